//! CSV and JSON emission plus run manifests.
//!
//! Floats are written with 17 significant digits (`{:.16e}`), which round-trips
//! every finite `f64` exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mcprop::LayerStatsCurve;
use crate::trainer::TrainRun;

pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Writes a header row and data rows. Fields must not contain commas.
pub fn write_csv<I>(path: &Path, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = Vec<String>>,
{
    let mut out = header.join(",");
    out.push('\n');
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    ensure_parent(path)?;
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    ensure_parent(path)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        _ => Ok(()),
    }
}

pub const CURVE_HEADER: [&str; 5] = ["layer", "mean_q", "std_q", "mean_c", "std_c"];

/// One row per layer, layers numbered from 1.
pub fn write_curve_csv(curve: &LayerStatsCurve, path: &Path) -> Result<()> {
    let rows = (0..curve.layers()).map(|l| {
        vec![
            (l + 1).to_string(),
            fmt_f64(curve.mean_q[l]),
            fmt_f64(curve.std_q[l]),
            fmt_f64(curve.mean_c[l]),
            fmt_f64(curve.std_c[l]),
        ]
    });
    write_csv(path, &CURVE_HEADER, rows)
}

/// Parses a file written by [`write_curve_csv`]. Only the five emitted columns
/// are restored.
pub fn read_curve_csv(path: &Path) -> Result<LayerStatsCurve> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(CURVE_HEADER.join(",").as_str()) {
        return Err(Error::Config(format!("{}: unexpected header", path.display())));
    }
    let mut curve = LayerStatsCurve::default();
    for line in lines {
        let f: Vec<f64> = line
            .split(',')
            .skip(1)
            .map(|s| s.parse::<f64>().map_err(|e| Error::Config(format!("{}: {e}", path.display()))))
            .collect::<Result<_>>()?;
        if f.len() != 4 {
            return Err(Error::Config(format!("{}: bad row '{line}'", path.display())));
        }
        curve.mean_q.push(f[0]);
        curve.std_q.push(f[1]);
        curve.mean_c.push(f[2]);
        curve.std_c.push(f[3]);
    }
    Ok(curve)
}

/// Epoch 0 holds the losses before training.
pub fn write_train_csv(run: &TrainRun, path: &Path) -> Result<()> {
    let first = std::iter::once(vec!["0".to_string(), fmt_f64(run.initial_train_loss), fmt_f64(run.initial_val_loss)]);
    let rest = run
        .train_loss
        .iter()
        .zip(&run.val_loss)
        .enumerate()
        .map(|(e, (t, v))| vec![(e + 1).to_string(), fmt_f64(*t), fmt_f64(*v)]);
    write_csv(path, &["epoch", "train_loss", "val_loss"], first.chain(rest))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Everything needed to repeat a CLI invocation and check its outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Arguments after the program name, with the output directory removed.
    pub args: Vec<String>,
    pub config: serde_json::Value,
    pub seed: u64,
    pub version: String,
    pub threads: usize,
    pub started: String,
    pub finished: String,
    pub wall_time_secs: f64,
    /// Output path (relative to the run directory) to SHA-256 digest.
    pub outputs: BTreeMap<String, String>,
}

pub const MANIFEST_NAME: &str = "manifest.json";

impl RunManifest {
    /// Digests every listed file under `dir`.
    pub fn digest_outputs(dir: &Path, files: &[PathBuf]) -> Result<BTreeMap<String, String>> {
        let mut out = BTreeMap::new();
        for f in files {
            let rel = f.strip_prefix(dir).unwrap_or(f);
            out.insert(rel.to_string_lossy().replace('\\', "/"), file_digest(f)?);
        }
        Ok(out)
    }

    /// Files whose digests differ between two manifests, including files present
    /// in only one of them.
    pub fn mismatches(&self, other: &RunManifest) -> Vec<String> {
        let mut keys: Vec<&String> = self.outputs.keys().chain(other.outputs.keys()).collect();
        keys.sort();
        keys.dedup();
        keys.into_iter().filter(|k| self.outputs.get(*k) != other.outputs.get(*k)).cloned().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip() {
        for x in [0.1, 1.0 / 3.0, -2.5e-300, 6.02214076e23, f64::MIN_POSITIVE, f64::MAX, 0.0, -0.0] {
            let s = fmt_f64(x);
            assert_eq!(s.parse::<f64>().unwrap().to_bits(), x.to_bits(), "{s}");
        }
    }

    #[test]
    fn empty_curve_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.csv");
        write_curve_csv(&LayerStatsCurve::default(), &path).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "layer,mean_q,std_q,mean_c,std_c\n");
    }

    #[test]
    fn curve_round_trips_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/c.csv");
        let n = 30;
        let curve = LayerStatsCurve {
            mean_q: (0..n).map(|i| (i as f64).sin() + 1.0 / 7.0).collect(),
            std_q: (0..n).map(|i| (i as f64 * 0.1).exp()).collect(),
            mean_c: (0..n).map(|i| 1.0 - 1.0 / (i as f64 + 3.0)).collect(),
            std_c: (0..n).map(|i| 1e-9 * i as f64).collect(),
            ..Default::default()
        };
        write_curve_csv(&curve, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), n + 1);
        let back = read_curve_csv(&path).unwrap();
        assert_eq!(back.mean_q, curve.mean_q);
        assert_eq!(back.std_q, curve.std_q);
        assert_eq!(back.mean_c, curve.mean_c);
        assert_eq!(back.std_c, curve.std_c);
    }

    #[test]
    fn digest_known_value() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }
}
