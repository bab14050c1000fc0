use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Error, Result};

/// One row of `run.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub lr: f32,
    pub loss_teacher_or_kbm: Option<f64>,
    pub loss_student: f64,
    pub acc_train_s: f64,
    pub acc_test_s: f64,
    pub acc_test_kbm_reconstructed: Option<f64>,
    pub cka: Option<f64>,
    pub ier: Option<f64>,
    pub mr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: String,
    pub seed: u64,
    pub epochs: usize,
    pub final_acc_student: f64,
    pub best_acc_student: f64,
    pub final_acc_reconstructed: Option<f64>,
    pub best_acc_reconstructed: Option<f64>,
    /// Test accuracy of the frozen teacher.
    pub teacher_acc: Option<f64>,
    /// Reconstructed-teacher test accuracy before the first step.
    pub initial_reconstructed_acc: Option<f64>,
    pub final_cka: Option<f64>,
    pub final_ier: Option<f64>,
    pub final_mr: Option<f64>,
    pub student_steps: usize,
    pub partner_steps: usize,
    pub batches_per_epoch: usize,
    pub teacher_checksum_before: Option<String>,
    pub teacher_checksum_after: Option<String>,
    pub config_checksum: String,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunLog {
    pub rows: Vec<EpochRow>,
    pub summary: RunSummary,
    pub config_echo: String,
}

pub fn write_run_csv(out: impl Write, rows: &[EpochRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row).map_err(|e| invalid_arg!("cannot encode run row: {e}"))?;
    }
    w.flush().map_err(|e| Error::io("<run csv>", e))
}

impl RunLog {
    pub fn csv_string(&self) -> String {
        let mut buf = Vec::new();
        write_run_csv(&mut buf, &self.rows).expect("in-memory csv");
        String::from_utf8(buf).expect("csv is UTF-8")
    }

    pub fn summary_toml(&self) -> String {
        toml::to_string(&self.summary).expect("summary always encodes")
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.csv_string()).map_err(|e| Error::io(path, e))
    }

    pub fn save_summary(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.summary_toml()).map_err(|e| Error::io(path, e))
    }
}

/// Reads a `run.csv`; a header that differs from the expected columns is a
/// format error.
pub fn read_run_csv(path: &Path) -> Result<Vec<EpochRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let expected = [
        "epoch",
        "lr",
        "loss_teacher_or_kbm",
        "loss_student",
        "acc_train_s",
        "acc_test_s",
        "acc_test_kbm_reconstructed",
        "cka",
        "ier",
        "mr",
    ];
    let headers = r.headers().map_err(|e| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    if headers.iter().ne(expected) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!("unexpected columns {:?}", headers.iter().collect::<Vec<_>>()),
        });
    }
    r.deserialize()
        .map(|row| {
            row.map_err(|e| Error::Format {
                path: path.to_path_buf(),
                msg: e.to_string(),
            })
        })
        .collect()
}

pub fn read_summary(path: &Path) -> Result<RunSummary> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_keeps_absent_cells() {
        let rows = vec![EpochRow {
            epoch: 0,
            lr: 0.1,
            loss_teacher_or_kbm: None,
            loss_student: 1.25,
            acc_train_s: 50.0,
            acc_test_s: 40.0,
            acc_test_kbm_reconstructed: None,
            cka: Some(0.5),
            ier: None,
            mr: None,
        }];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.csv");
        let mut buf = Vec::new();
        write_run_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("epoch,lr,loss_teacher_or_kbm,loss_student,acc_train_s,acc_test_s,acc_test_kbm_reconstructed,cka,ier,mr\n"));
        assert!(text.contains("0,0.1,,1.25,50.0,40.0,,0.5,,\n"));
        std::fs::write(&p, text).unwrap();
        assert_eq!(read_run_csv(&p).unwrap(), rows);
        std::fs::write(&p, "epoch,acc\n1,2\n").unwrap();
        assert!(matches!(read_run_csv(&p), Err(Error::Format { .. })));
    }
}
