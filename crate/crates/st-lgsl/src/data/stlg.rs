//! The STLG binary dataset container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic "STLG"
//! 4       4     u32 format version, currently 1
//! 8       4     u32 M  (nodes)
//! 12      4     u32 F  (features per node)
//! 16      8     u64 T  (time steps)
//! 24      4·T·M·F  float32 values, [t][node][feature] order
//! ```
//!
//! Values may contain NaN on disk; the configured [`NanPolicy`] repairs them
//! at load time.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{NanPolicy, TrafficSeries};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"STLG";
const VERSION: u32 = 1;

/// Write a series. In-memory f64 values are stored as f32.
pub fn save_dataset(path: &Path, series: &TrafficSeries) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path.display().to_string(), e);
    w.write_all(MAGIC).map_err(io_err)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io_err)?;
    w.write_all(&(series.num_nodes as u32).to_le_bytes())
        .map_err(io_err)?;
    w.write_all(&(series.num_features as u32).to_le_bytes())
        .map_err(io_err)?;
    w.write_all(&(series.num_steps as u64).to_le_bytes())
        .map_err(io_err)?;
    for &v in &series.values {
        w.write_all(&(v as f32).to_le_bytes()).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Read a series and repair gaps per `policy`.
pub fn load_dataset(path: &Path, policy: NanPolicy) -> Result<TrafficSeries> {
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = BufReader::new(file);
    let io_err = |e| Error::io(path.display().to_string(), e);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != MAGIC {
        return Err(Error::Data(format!(
            "{}: bad magic {:?}, not an STLG file",
            path.display(),
            magic
        )));
    }
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4).map_err(io_err)?;
    let version = u32::from_le_bytes(buf4);
    if version != VERSION {
        return Err(Error::Data(format!(
            "{}: unsupported STLG version {version} (expected {VERSION})",
            path.display()
        )));
    }
    r.read_exact(&mut buf4).map_err(io_err)?;
    let m = u32::from_le_bytes(buf4) as usize;
    r.read_exact(&mut buf4).map_err(io_err)?;
    let f = u32::from_le_bytes(buf4) as usize;
    let mut buf8 = [0u8; 8];
    r.read_exact(&mut buf8).map_err(io_err)?;
    let t = u64::from_le_bytes(buf8) as usize;

    if m == 0 || f == 0 || t == 0 {
        return Err(Error::Data(format!(
            "{}: degenerate dimensions M={m} F={f} T={t}",
            path.display()
        )));
    }
    let count = t
        .checked_mul(m)
        .and_then(|x| x.checked_mul(f))
        .ok_or_else(|| Error::Data(format!("{}: dimensions overflow", path.display())))?;

    let mut payload = Vec::new();
    r.read_to_end(&mut payload).map_err(io_err)?;
    if payload.len() != count * 4 {
        return Err(Error::Data(format!(
            "{}: payload is {} bytes but header implies {} (T·M·F = {count} float32)",
            path.display(),
            payload.len(),
            count * 4
        )));
    }
    let values: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();

    let mut series = TrafficSeries::new(m, f, t, values)?;
    series.apply_nan_policy(policy)?;
    Ok(series)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmpdir() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn roundtrip_is_bit_identical() {
        let dir = tmpdir();
        let path = dir.path().join("a.stlg");
        // values chosen f32-representable so f64 -> f32 -> f64 is lossless
        let values: Vec<f64> = (0..2 * 3 * 2).map(|i| (i as f32 * 0.25) as f64).collect();
        let series = TrafficSeries::new(3, 2, 2, values).unwrap();
        save_dataset(&path, &series).unwrap();
        let back = load_dataset(&path, NanPolicy::CarryForward).unwrap();
        assert_eq!(back, series);
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tmpdir();
        let path = dir.path().join("a.stlg");
        std::fs::write(&path, b"NOPE_____________________").unwrap();
        let err = load_dataset(&path, NanPolicy::CarryForward).unwrap_err();
        assert!(err.to_string().contains("bad magic"), "{err}");
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn rejects_wrong_version() {
        let dir = tmpdir();
        let path = dir.path().join("a.stlg");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"STLG");
        bytes.extend_from_slice(&9u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u64.to_le_bytes());
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        let err = load_dataset(&path, NanPolicy::CarryForward).unwrap_err();
        assert!(err.to_string().contains("version 9"), "{err}");
    }

    #[test]
    fn rejects_zero_steps() {
        let dir = tmpdir();
        let path = dir.path().join("a.stlg");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"STLG");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&4u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&0u64.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        let err = load_dataset(&path, NanPolicy::CarryForward).unwrap_err();
        assert!(err.to_string().contains("T=0"), "{err}");
    }

    #[test]
    fn rejects_truncated_payload() {
        let dir = tmpdir();
        let path = dir.path().join("a.stlg");
        let series =
            TrafficSeries::new(2, 1, 4, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        save_dataset(&path, &series).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 4);
        std::fs::write(&path, &bytes).unwrap();
        let err = load_dataset(&path, NanPolicy::CarryForward).unwrap_err();
        assert!(err.to_string().contains("payload"), "{err}");
    }

    #[test]
    fn nan_cells_are_repaired_on_load() {
        let dir = tmpdir();
        let path = dir.path().join("a.stlg");
        let series =
            TrafficSeries::new(1, 1, 4, vec![2.0, f64::NAN, f64::NAN, 5.0]).unwrap();
        save_dataset(&path, &series).unwrap();
        let back = load_dataset(&path, NanPolicy::CarryForward).unwrap();
        assert_eq!(back.values, vec![2.0, 2.0, 2.0, 5.0]);
    }
}
