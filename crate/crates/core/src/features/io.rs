use std::fs;
use std::io::Write;
use std::path::Path;

use super::{FeatureError, FeatureMatrix, FeatureMeta};
use crate::binio::{BinError, BinReader, BinWriter};

const MAGIC: &[u8; 8] = b"ASCFEAT\0";
const VERSION: u32 = 1;

/// Header (dim, rows, noise-floor flag, recording id) followed by row-major
/// little-endian `f32` values.
pub fn write_features(path: impl AsRef<Path>, feats: &FeatureMatrix) -> Result<(), FeatureError> {
    let mut w = BinWriter::new(MAGIC, VERSION);
    w.u32(feats.dim() as u32);
    w.u64(feats.n_rows() as u64);
    w.u8(feats.meta().noise_floor as u8);
    w.str(&feats.meta().recording_id);
    w.f32s(feats.as_slice().iter().map(|&v| v as f32));
    fs::write(path, w.finish()).map_err(|e| FeatureError::Container(BinError::Io(e)))
}

pub fn read_features(path: impl AsRef<Path>) -> Result<FeatureMatrix, FeatureError> {
    let bytes = fs::read(path).map_err(BinError::Io)?;
    let mut r = BinReader::open(&bytes, MAGIC, "feature", VERSION)?;
    let dim = r.u32()? as usize;
    let rows = r.u64()? as usize;
    let noise_floor = match r.u8()? {
        0 => false,
        1 => true,
        other => {
            return Err(BinError::Malformed(format!("noise-floor flag {other}")).into());
        }
    };
    let recording_id = r.str()?;
    let values = r.f32s(dim * rows)?;
    r.finish()?;
    FeatureMatrix::from_flat(
        values.into_iter().map(f64::from).collect(),
        dim.max(1),
        FeatureMeta {
            recording_id,
            noise_floor,
        },
    )
}

/// Debug export: one comma-separated line per frame.
pub fn write_features_csv(path: impl AsRef<Path>, feats: &FeatureMatrix) -> Result<(), FeatureError> {
    let mut out = Vec::new();
    for row in feats.rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        writeln!(out, "{}", line.join(",")).map_err(BinError::Io)?;
    }
    fs::write(path, out).map_err(|e| FeatureError::Container(BinError::Io(e)))
}
