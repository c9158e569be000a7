//! CIFAR-10 binary batches: records of one label byte followed by 3072 pixel
//! bytes (1024 R, 1024 G, 1024 B; 32×32 row-major).

use std::path::Path;

use super::Sample;
use crate::error::{Error, Result};

pub const CIFAR_RECORD_BYTES: usize = 1 + 3 * 32 * 32;
const SIDE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn files(&self) -> Vec<String> {
        match self {
            Split::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
            Split::Test => vec!["test_batch.bin".into()],
        }
    }
}

pub fn parse_cifar10(bytes: &[u8]) -> Result<Vec<Sample>> {
    if bytes.len() % CIFAR_RECORD_BYTES != 0 {
        return Err(Error::Format(format!(
            "cifar-10 batch of {} bytes is not a multiple of {CIFAR_RECORD_BYTES}",
            bytes.len()
        )));
    }
    bytes
        .chunks_exact(CIFAR_RECORD_BYTES)
        .enumerate()
        .map(|(i, rec)| {
            let label = rec[0] as usize;
            if label > 9 {
                return Err(Error::Format(format!("record {i}: label byte {label} > 9")));
            }
            Ok(Sample {
                image: rec[1..].iter().map(|&b| b as f64 / 255.0).collect(),
                label,
                channels: 3,
                side: SIDE,
            })
        })
        .collect()
}

pub fn load_cifar10_file(path: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_cifar10(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// All batches of a split, in file order.
pub fn load_cifar10(dir: impl AsRef<Path>, split: Split) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for f in split.files() {
        out.extend(load_cifar10_file(dir.as_ref().join(f))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: u8, pixel: u8) -> Vec<u8> {
        let mut r = vec![pixel; CIFAR_RECORD_BYTES];
        r[0] = label;
        r
    }

    #[test]
    fn ten_records() {
        let bytes: Vec<u8> = (0..10).flat_map(|i| record(i, 7)).collect();
        assert_eq!(bytes.len(), 30_730);
        let s = parse_cifar10(&bytes).unwrap();
        assert_eq!(s.len(), 10);
        assert_eq!(s[9].label, 9);
        assert_eq!(s[0].image.len(), 3072);
    }

    #[test]
    fn bad_label_and_length() {
        assert!(matches!(parse_cifar10(&record(10, 0)), Err(Error::Format(_))));
        let mut bytes = record(1, 0);
        bytes.pop();
        assert!(matches!(parse_cifar10(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn white_record_scales_to_one() {
        let s = parse_cifar10(&record(4, 255)).unwrap();
        assert!(s[0].image.iter().all(|&p| p == 1.0));
    }

    #[test]
    fn channel_planar_layout() {
        let mut r = record(0, 0);
        r[1 + 1024] = 255; // G channel, row 0, col 0
        r[1 + 2048 + 32 + 5] = 51; // B channel, row 1, col 5
        let s = &parse_cifar10(&r).unwrap()[0];
        assert_eq!(s.pixel(1, 0, 0), 1.0);
        assert_eq!(s.pixel(2, 1, 5), 0.2);
        assert_eq!(s.pixel(0, 0, 0), 0.0);
    }

    #[test]
    fn missing_files_are_io_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_cifar10(dir.path(), Split::Test), Err(Error::Io { .. })));
        std::fs::write(dir.path().join("test_batch.bin"), record(2, 9)).unwrap();
        assert_eq!(load_cifar10(dir.path(), Split::Test).unwrap().len(), 1);
    }
}
