use std::path::Path;

use super::{Dataset, Normalization};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// One label byte followed by 32×32 pixels for each of R, G, B.
pub const CIFAR_RECORD_LEN: usize = 3073;
const PIXELS: usize = 3072;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn files(self) -> Vec<String> {
        match self {
            Split::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
            Split::Test => vec!["test_batch.bin".into()],
        }
    }
}

fn read_raw<S: Scalar>(dir: &Path, split: Split, limit: Option<usize>) -> Result<Dataset<S>> {
    let cap = limit.unwrap_or(usize::MAX);
    let mut data: Vec<S> = Vec::new();
    let mut labels = Vec::new();
    'files: for name in split.files() {
        let path = dir.join(&name);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if bytes.len() % CIFAR_RECORD_LEN != 0 {
            return Err(Error::Format {
                offset: (bytes.len() - bytes.len() % CIFAR_RECORD_LEN) as u64,
                msg: format!(
                    "{name}: trailing partial record of {} bytes",
                    bytes.len() % CIFAR_RECORD_LEN
                ),
            });
        }
        for (r, rec) in bytes.chunks_exact(CIFAR_RECORD_LEN).enumerate() {
            if labels.len() == cap {
                break 'files;
            }
            if rec[0] > 9 {
                return Err(Error::Format {
                    offset: (r * CIFAR_RECORD_LEN) as u64,
                    msg: format!("{name}: label byte {} out of range", rec[0]),
                });
            }
            labels.push(rec[0] as usize);
            let inv = S::one() / S::lit(255.0);
            data.extend(rec[1..].iter().map(|&b| S::lit(f64::from(b)) * inv));
        }
    }
    let n = labels.len();
    Dataset::new(Tensor::new(&[n, 3, 32, 32], data)?, labels, 10)
}

/// Reads the standard binary batches from `dir`. `limit` keeps the first
/// records in file order. Pixels are scaled to [0,1] and normalized with the
/// per-channel statistics of the records read.
pub fn load_cifar10<S: Scalar>(dir: &Path, split: Split, limit: Option<usize>) -> Result<Dataset<S>> {
    debug_assert_eq!(PIXELS + 1, CIFAR_RECORD_LEN);
    let mut ds = read_raw(dir, split, limit)?;
    if !ds.is_empty() {
        Normalization::fit(&ds.inputs)?.apply(&mut ds.inputs)?;
    }
    Ok(ds)
}

/// Train and test subsets, both normalized with the train statistics.
pub fn load_cifar10_pair<S: Scalar>(
    dir: &Path,
    train_limit: Option<usize>,
    test_limit: Option<usize>,
) -> Result<(Dataset<S>, Dataset<S>)> {
    let mut train = read_raw(dir, Split::Train, train_limit)?;
    let mut test = read_raw(dir, Split::Test, test_limit)?;
    let norm = Normalization::fit(&train.inputs)?;
    norm.apply(&mut train.inputs)?;
    norm.apply(&mut test.inputs)?;
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: u8, fill: impl Fn(usize) -> u8) -> Vec<u8> {
        let mut r = vec![label];
        r.extend((0..PIXELS).map(fill));
        r
    }

    fn write_split(dir: &Path, per_file: usize) {
        for name in Split::Train.files().into_iter().chain(Split::Test.files()) {
            let mut bytes = Vec::new();
            for i in 0..per_file {
                bytes.extend(record((i % 10) as u8, |p| ((p * 7 + i * 13) % 256) as u8));
            }
            std::fs::write(dir.join(name), bytes).unwrap();
        }
    }

    #[test]
    fn decodes_records_in_file_order() {
        let dir = tempfile::tempdir().unwrap();
        write_split(dir.path(), 4);
        let train = load_cifar10::<f64>(dir.path(), Split::Train, None).unwrap();
        assert_eq!(train.len(), 20);
        assert_eq!(train.inputs.shape(), &[20, 3, 32, 32]);
        let limited = load_cifar10::<f64>(dir.path(), Split::Train, Some(6)).unwrap();
        assert_eq!(limited.labels, vec![0, 1, 2, 3, 0, 1]);
        let test = load_cifar10::<f64>(dir.path(), Split::Test, None).unwrap();
        assert_eq!(test.len(), 4);
    }

    #[test]
    fn channels_are_normalized() {
        let dir = tempfile::tempdir().unwrap();
        write_split(dir.path(), 3);
        let ds = load_cifar10::<f64>(dir.path(), Split::Train, None).unwrap();
        let stats = Normalization::fit(&ds.inputs).unwrap();
        for c in 0..3 {
            assert!(stats.mean[c].abs() < 1e-6);
            assert!((stats.std[c] - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn partial_record_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        write_split(dir.path(), 2);
        let mut bytes = std::fs::read(dir.path().join("test_batch.bin")).unwrap();
        bytes.truncate(CIFAR_RECORD_LEN + 100);
        std::fs::write(dir.path().join("test_batch.bin"), bytes).unwrap();
        match load_cifar10::<f64>(dir.path(), Split::Test, None) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, CIFAR_RECORD_LEN as u64),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn bad_label_reports_record_offset() {
        let dir = tempfile::tempdir().unwrap();
        write_split(dir.path(), 3);
        let mut bytes = std::fs::read(dir.path().join("test_batch.bin")).unwrap();
        bytes[2 * CIFAR_RECORD_LEN] = 200;
        std::fs::write(dir.path().join("test_batch.bin"), bytes).unwrap();
        match load_cifar10::<f64>(dir.path(), Split::Test, None) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 2 * CIFAR_RECORD_LEN as u64),
            other => panic!("expected format error, got {other:?}"),
        }
    }
}
