use std::collections::HashMap;
use std::path::Path;

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Reads a headed CSV. Every column except `label_column` is a float
/// feature; labels are mapped to indices in first-seen order.
pub fn load_csv(path: &Path, label_column: &str) -> Result<Dataset> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format {
            path: path.to_path_buf(),
            msg: format!("{other:?}"),
        },
    })?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            column: String::new(),
            msg: e.to_string(),
        })?
        .clone();
    let label_idx = headers.iter().position(|h| h == label_column).ok_or_else(|| Error::Parse {
        line: 1,
        column: label_column.to_string(),
        msg: "label column missing from header".into(),
    })?;

    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut label_map: Vec<String> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            column: String::new(),
            msg: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        for (j, cell) in record.iter().enumerate() {
            if j == label_idx {
                let next = label_map.len();
                let class = *index.entry(cell.to_string()).or_insert_with(|| {
                    label_map.push(cell.to_string());
                    next
                });
                labels.push(class);
            } else {
                let v: f32 = cell.trim().parse().map_err(|_| Error::Parse {
                    line,
                    column: headers[j].to_string(),
                    msg: format!("`{cell}` is not a number"),
                })?;
                features.push(v);
            }
        }
    }
    if labels.is_empty() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: "no data rows".into(),
        });
    }
    let d = headers.len() - 1;
    if d == 0 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: "no feature columns".into(),
        });
    }
    let inputs = Tensor::new(vec![labels.len(), d], features)?;
    let classes = label_map.len();
    let mut ds = Dataset::new(inputs, labels, classes, Split::Train, path.display().to_string())?;
    ds.label_map = label_map;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, text: &str) -> std::path::PathBuf {
        let p = dir.join("data.csv");
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn four_row_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "a,b,species,c\n1.0,2,cat,3\n4,5,dog,6\n7,8,cat,9\n-1,0.5,emu,2e1\n",
        );
        let ds = load_csv(&p, "species").unwrap();
        assert_eq!(ds.len(), 4);
        assert_eq!(ds.inputs.shape(), &[4, 3]);
        assert_eq!(ds.classes, 3);
        assert_eq!(ds.labels, vec![0, 1, 0, 2]);
        assert_eq!(ds.label_map, vec!["cat", "dog", "emu"]);
        assert_eq!(ds.inputs.row(3), &[-1.0, 0.5, 20.0]);
    }

    #[test]
    fn non_numeric_cell_is_located() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "x,y,label\n1,2,a\n3,oops,b\n");
        match load_csv(&p, "label") {
            Err(Error::Parse { line, column, .. }) => {
                assert_eq!(line, 3);
                assert_eq!(column, "y");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_label_column_and_ragged_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "x,y\n1,2\n");
        assert!(matches!(load_csv(&p, "label"), Err(Error::Parse { .. })));
        let p = write(dir.path(), "x,label\n1,a\n2\n");
        assert!(matches!(load_csv(&p, "label"), Err(Error::Parse { line: 3, .. })));
    }
}
