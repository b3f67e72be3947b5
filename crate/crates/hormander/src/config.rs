//! Run configuration, its hash, and atomic artifact writing.

use crate::error::{invalid, Error, Result};
use crate::sde::{additive, degenerate, heisenberg, scalar_linear, DiffusionModel, Shipped};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum ModelSpec {
    Heisenberg,
    ScalarLinear { a: f64, x0: f64 },
    Additive { sigma: Vec<Vec<f64>>, drift: Vec<f64>, x0: Vec<f64> },
    Degenerate,
}

impl ModelSpec {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "heisenberg" => Ok(ModelSpec::Heisenberg),
            "scalar-linear" => Ok(ModelSpec::ScalarLinear { a: 1.0, x0: 1.0 }),
            "degenerate" => Ok(ModelSpec::Degenerate),
            "additive" => Ok(ModelSpec::Additive { sigma: vec![vec![1.0]], drift: vec![0.0], x0: vec![0.0] }),
            _ => invalid(format!("unknown model '{name}'")),
        }
    }

    pub fn build(&self) -> Result<DiffusionModel<Shipped>> {
        Ok(match self {
            ModelSpec::Heisenberg => heisenberg(),
            ModelSpec::ScalarLinear { a, x0 } => scalar_linear(*a, *x0),
            ModelSpec::Additive { sigma, drift, x0 } => additive(sigma.clone(), drift.clone(), x0.clone())?,
            ModelSpec::Degenerate => degenerate(),
        })
    }
}

/// Everything a run depends on. Optional fields take per-subcommand
/// defaults when resolved.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub horizon: f64,
    pub m: Option<usize>,
    pub delta: Option<f64>,
    pub deltas: Option<Vec<f64>>,
    pub center: Option<Vec<f64>>,
    pub radius: f64,
    pub lambda_star: f64,
    pub gamma: f64,
    pub paths: Option<usize>,
    pub inner: usize,
    pub lambdas: Vec<f64>,
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelSpec::Heisenberg,
            horizon: 1.0,
            m: None,
            delta: None,
            deltas: None,
            center: None,
            radius: 1.0,
            lambda_star: 0.5,
            gamma: 0.45,
            paths: None,
            inner: 16,
            lambdas: vec![0.5, 1.0, 2.0, 5.0],
            seed: 42,
            out: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidArgument(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// First 16 hex digits of SHA-256 over the compact JSON form, with the
    /// output directory blanked.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(&RunConfig { out: PathBuf::new(), ..self.clone() }).expect("config serializes");
        Sha256::digest(&bytes).iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn check(&self) -> Result<()> {
        if !(self.horizon > 0.0) || !(self.radius > 0.0) || !(self.lambda_star > 0.0) {
            return invalid("horizon, radius and λ* must be positive");
        }
        if !(0.0..0.5).contains(&self.gamma) {
            return invalid("γ must lie in [0, 1/2)");
        }
        if self.inner == 0 || self.m == Some(0) || self.paths == Some(0) {
            return invalid("m, paths and inner must be positive");
        }
        if self.lambdas.iter().any(|l| !(*l > 0.0)) {
            return invalid("every λ must be positive");
        }
        Ok(())
    }
}

/// Writes `contents` next to `path` and renames it into place.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let name = path.file_name().ok_or_else(|| Error::Io(format!("no file name in {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(contents)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path).inspect_err(|_| {
        let _ = std::fs::remove_file(&tmp);
    })?;
    Ok(())
}

/// Serializes rows to CSV in memory, then writes atomically.
pub fn write_csv<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Io(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
    write_atomic(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_hash() {
        let c = RunConfig { m: Some(32), deltas: Some(vec![0.1, 0.05]), model: ModelSpec::ScalarLinear { a: 0.5, x0: 2.0 }, ..Default::default() };
        let back = RunConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_ne!(RunConfig::default().hash(), c.hash());
        assert_eq!(RunConfig { out: "elsewhere".into(), ..c.clone() }.hash(), c.hash());
        let partial = RunConfig::from_json(r#"{"seed": 7, "model": {"name": "degenerate"}}"#).unwrap();
        assert_eq!(partial.seed, 7);
        assert_eq!(partial.radius, RunConfig::default().radius);
        assert!(RunConfig::from_json(r#"{"sed": 7}"#).is_err());
    }

    #[test]
    fn atomic_write_leaves_no_temporaries() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub").join("a.csv");
        write_csv(&p, &[(1, 2.5), (2, 3.5)]).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "1,2.5\n2,3.5\n");
        let names: Vec<_> = std::fs::read_dir(p.parent().unwrap()).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(names.len(), 1);
    }
}
