use std::fs;
use std::path::Path;

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

/// Header dimensions and payload of an unsigned-byte IDX file.
fn read_idx(path: &Path, magic: u32) -> Result<(Vec<usize>, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let fmt = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    let word = |i: usize| -> Result<u32> {
        bytes
            .get(4 * i..4 * i + 4)
            .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
            .ok_or_else(|| fmt(format!("header truncated at byte {}", 4 * i)))
    };
    let found = word(0)?;
    if found != magic {
        return Err(fmt(format!("bad magic 0x{found:08x}, expected 0x{magic:08x}")));
    }
    let ndim = (magic & 0xff) as usize;
    let dims = (1..=ndim).map(|i| word(i).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let start = 4 * (ndim + 1);
    let expected: usize = dims.iter().product();
    let payload = &bytes[start..];
    if payload.len() != expected {
        return Err(fmt(format!("header promises {expected} bytes of data, file has {}", payload.len())));
    }
    Ok((dims, payload.to_vec()))
}

/// Reads an IDX image/label pair. Pixels are scaled to `[0, 1]` and shaped
/// `[n, 1, rows, cols]`; the class count is one past the largest label.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let (idims, pixels) = read_idx(images_path, IMAGES_MAGIC)?;
    let (ldims, raw_labels) = read_idx(labels_path, LABELS_MAGIC)?;
    if idims[0] != ldims[0] {
        return Err(Error::CountMismatch {
            images: idims[0],
            labels: ldims[0],
        });
    }
    if idims[0] == 0 {
        return Err(Error::Format {
            path: images_path.to_path_buf(),
            msg: "file holds no images".into(),
        });
    }
    let labels: Vec<usize> = raw_labels.iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1).max(2);
    let data = pixels.iter().map(|&p| p as f32 / 255.0).collect();
    let inputs = Tensor::new(vec![idims[0], 1, idims[1], idims[2]], data)?;
    Dataset::new(
        inputs,
        labels,
        classes,
        Split::Train,
        format!("{} + {}", images_path.display(), labels_path.display()),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_bytes(magic: u32, dims: &[u32], payload: &[u8]) -> Vec<u8> {
        let mut out = magic.to_be_bytes().to_vec();
        for d in dims {
            out.extend_from_slice(&d.to_be_bytes());
        }
        out.extend_from_slice(payload);
        out
    }

    fn fixture(dir: &Path, n_images: u32, n_labels: u32) -> (std::path::PathBuf, std::path::PathBuf) {
        let pixels: Vec<u8> = (0..n_images * 4).map(|i| (i * 20) as u8).collect();
        let labels: Vec<u8> = (0..n_labels).map(|i| (i % 3) as u8).collect();
        let ip = dir.join("images.idx");
        let lp = dir.join("labels.idx");
        fs::write(&ip, idx_bytes(IMAGES_MAGIC, &[n_images, 2, 2], &pixels)).unwrap();
        fs::write(&lp, idx_bytes(LABELS_MAGIC, &[n_labels], &labels)).unwrap();
        (ip, lp)
    }

    #[test]
    fn well_formed_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = fixture(dir.path(), 3, 3);
        let ds = load_idx(&ip, &lp).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.inputs.shape(), &[3, 1, 2, 2]);
        assert_eq!(ds.labels, vec![0, 1, 2]);
        assert_eq!(ds.classes, 3);
        assert_eq!(ds.inputs.data()[1], 20.0 / 255.0);
        assert!(ds.inputs.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn corrupted_magic_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = fixture(dir.path(), 3, 3);
        let mut bytes = fs::read(&ip).unwrap();
        bytes[2] = 0x09;
        fs::write(&ip, bytes).unwrap();
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Format { .. })));
    }

    #[test]
    fn count_mismatch_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = fixture(dir.path(), 3, 4);
        assert!(matches!(
            load_idx(&ip, &lp),
            Err(Error::CountMismatch { images: 3, labels: 4 })
        ));
        let (ip, lp) = fixture(dir.path(), 3, 3);
        let mut bytes = fs::read(&ip).unwrap();
        bytes.pop();
        fs::write(&ip, bytes).unwrap();
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Format { .. })));
        assert!(matches!(load_idx(&dir.path().join("nope"), &lp), Err(Error::Io { .. })));
    }
}
