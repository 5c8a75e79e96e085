//! Readers for the CIFAR binary formats.

use super::{Dataset, Split};
use crate::error::{Error, Result};
use std::fs;
use std::path::{Path, PathBuf};

const IMG_BYTES: usize = 3 * 32 * 32;

fn resolve(root: &Path, subdir: &str, file: &str) -> Result<PathBuf> {
    let direct = root.join(file);
    if direct.exists() {
        return Ok(direct);
    }
    let nested = root.join(subdir).join(file);
    if nested.exists() {
        return Ok(nested);
    }
    Err(Error::Io(format!(
        "dataset file {file} not found under {} (or {}/{subdir})",
        root.display(),
        root.display()
    )))
}

fn read_records(
    path: &Path,
    label_bytes: usize,
    pixels: &mut Vec<u8>,
    labels: &mut Vec<u16>,
    num_classes: usize,
) -> Result<()> {
    let bytes = fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let rec = label_bytes + IMG_BYTES;
    if bytes.len() % rec != 0 {
        return Err(Error::Io(format!(
            "{}: length {} is not a multiple of record size {rec}",
            path.display(),
            bytes.len()
        )));
    }
    for chunk in bytes.chunks_exact(rec) {
        // the fine label is the last label byte
        let label = chunk[label_bytes - 1] as u16;
        if label as usize >= num_classes {
            return Err(Error::Io(format!(
                "{}: label {label} outside [0,{num_classes})",
                path.display()
            )));
        }
        labels.push(label);
        pixels.extend_from_slice(&chunk[label_bytes..]);
    }
    Ok(())
}

pub fn load_cifar10(root: &Path, split: Split) -> Result<Dataset> {
    let files: Vec<&str> = match split {
        Split::Train => vec![
            "data_batch_1.bin",
            "data_batch_2.bin",
            "data_batch_3.bin",
            "data_batch_4.bin",
            "data_batch_5.bin",
        ],
        Split::Test => vec!["test_batch.bin"],
    };
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for f in files {
        let path = resolve(root, "cifar-10-batches-bin", f)?;
        read_records(&path, 1, &mut pixels, &mut labels, 10)?;
    }
    Ok(Dataset::from_u8("cifar10", 10, 3, 32, pixels, labels))
}

pub fn load_cifar100(root: &Path, split: Split) -> Result<Dataset> {
    let file = match split {
        Split::Train => "train.bin",
        Split::Test => "test.bin",
    };
    let path = resolve(root, "cifar-100-binary", file)?;
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    read_records(&path, 2, &mut pixels, &mut labels, 100)?;
    Ok(Dataset::from_u8("cifar100", 100, 3, 32, pixels, labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Writes `n` records in the CIFAR-10 binary layout.
    pub fn write_fake_cifar10(dir: &Path, file: &str, n: usize) {
        let mut bytes = Vec::with_capacity(n * (1 + IMG_BYTES));
        for i in 0..n {
            bytes.push((i % 10) as u8);
            bytes.extend(std::iter::repeat((i % 251) as u8).take(IMG_BYTES));
        }
        fs::write(dir.join(file), bytes).unwrap();
    }

    #[test]
    fn loads_cifar10_layout() {
        let dir = tempfile::tempdir().unwrap();
        write_fake_cifar10(dir.path(), "test_batch.bin", 40);
        let d = load_cifar10(dir.path(), Split::Test).unwrap();
        assert_eq!(d.len(), 40);
        assert_eq!(d.num_classes, 10);
        let batch = d.gather(&[0, 1]);
        assert_eq!(batch.labels, vec![0, 1]);
        assert_eq!(batch.images.data.dim(), (2, 3, 32, 32));
    }

    #[test]
    fn missing_root_is_io_error() {
        let err = load_cifar10(Path::new("/nonexistent/cifar"), Split::Train).unwrap_err();
        assert!(matches!(err, Error::Io(_)), "got {err:?}");
    }

    #[test]
    fn truncated_file_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("test_batch.bin"), vec![0u8; 100]).unwrap();
        let err = load_cifar10(dir.path(), Split::Test).unwrap_err();
        assert!(matches!(err, Error::Io(_)));
    }
}
