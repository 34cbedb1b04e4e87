//! Flat `key = value` experiment configuration.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::str::FromStr;

use sha2::{Digest, Sha256};
use spdhss::KernelFamily;

use crate::BenchError;

/// Which points to generate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PointKind {
    Ball,
    Sphere,
}

impl FromStr for PointKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "ball" => Ok(PointKind::Ball),
            "sphere" => Ok(PointKind::Sphere),
            other => Err(format!("unknown point kind `{other}`")),
        }
    }
}

impl std::fmt::Display for PointKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PointKind::Ball => "ball",
            PointKind::Sphere => "sphere",
        })
    }
}

/// Preconditioner families named in a sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PrecondKind {
    None,
    BlockJacobi,
    Fsai,
    SpdHss,
}

impl FromStr for PrecondKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "none" => Ok(PrecondKind::None),
            "bj" => Ok(PrecondKind::BlockJacobi),
            "fsai" => Ok(PrecondKind::Fsai),
            "spdhss" => Ok(PrecondKind::SpdHss),
            other => Err(format!("unknown preconditioner `{other}`")),
        }
    }
}

/// One concrete preconditioner of a sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PrecondSpec {
    None,
    BlockJacobi,
    Fsai(usize),
    SpdHss(usize),
}

impl PrecondSpec {
    pub fn name(&self) -> &'static str {
        match self {
            PrecondSpec::None => "none",
            PrecondSpec::BlockJacobi => "bj",
            PrecondSpec::Fsai(_) => "fsai",
            PrecondSpec::SpdHss(_) => "spdhss",
        }
    }

    /// Rank for SPD HSS, neighbour count for FSAI, 0 otherwise.
    pub fn size(&self) -> usize {
        match *self {
            PrecondSpec::Fsai(k) | PrecondSpec::SpdHss(k) => k,
            _ => 0,
        }
    }

    pub fn row_label(&self) -> String {
        match self {
            PrecondSpec::None => "none".into(),
            PrecondSpec::BlockJacobi => "BJ".into(),
            PrecondSpec::Fsai(k) => format!("FSAI k={k}"),
            PrecondSpec::SpdHss(r) => format!("SPDHSS r={r}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub kernel: KernelFamily,
    pub params: Vec<f64>,
    pub points: PointKind,
    pub sizes: Vec<usize>,
    pub seed: u64,
    pub leaf_cap: usize,
    pub h2_tol: f64,
    /// Diagonal shift; `None` means the family default.
    pub shift: Option<f64>,
    pub preconds: Vec<PrecondKind>,
    pub fsai_k: Vec<usize>,
    pub ranks: Vec<usize>,
    pub oversampling: usize,
    pub pcg_tol: f64,
    pub maxit: usize,
    pub error_probes: usize,
    pub output: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            kernel: KernelFamily::Matern32,
            params: vec![0.1],
            points: PointKind::Ball,
            sizes: vec![2000],
            seed: 0,
            leaf_cap: 400,
            h2_tol: 1e-8,
            shift: None,
            preconds: vec![PrecondKind::None, PrecondKind::BlockJacobi, PrecondKind::Fsai, PrecondKind::SpdHss],
            fsai_k: vec![60],
            ranks: vec![50],
            oversampling: 10,
            pcg_tol: 1e-4,
            maxit: 3000,
            error_probes: 10,
            output: PathBuf::from("bench-out"),
        }
    }
}

const KEYS: &[&str] = &[
    "kernel", "params", "points", "n", "seed", "leaf_cap", "h2_tol", "shift", "precond", "fsai_k", "ranks",
    "oversampling", "pcg_tol", "maxit", "error_probes", "output",
];

fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>, BenchError>
where
    T::Err: std::fmt::Display,
{
    let items: Vec<T> = v
        .split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|e| BenchError::Config(format!("{key}: `{s}`: {e}"))))
        .collect::<Result<_, _>>()?;
    if items.is_empty() {
        return Err(BenchError::Config(format!("{key}: empty list")));
    }
    Ok(items)
}

fn one<T: FromStr>(key: &str, v: &str) -> Result<T, BenchError>
where
    T::Err: std::fmt::Display,
{
    v.trim().parse::<T>().map_err(|e| BenchError::Config(format!("{key}: `{v}`: {e}")))
}

/// Splits `key = value`, ignoring blank lines and `#` comments.
fn split_line(line: &str) -> Result<Option<(String, String)>, BenchError> {
    let line = line.split('#').next().unwrap_or("").trim();
    if line.is_empty() {
        return Ok(None);
    }
    let (k, v) = line
        .split_once('=')
        .ok_or_else(|| BenchError::Config(format!("expected key = value, got `{line}`")))?;
    Ok(Some((k.trim().to_string(), v.trim().to_string())))
}

impl ExperimentConfig {
    /// Parses a config file body and then applies `overrides` (each `key=value`).
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self, BenchError> {
        let mut entries: BTreeMap<String, String> = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            if let Some((k, v)) = split_line(line).map_err(|e| BenchError::Config(format!("line {}: {e}", n + 1)))? {
                if entries.insert(k.clone(), v).is_some() {
                    return Err(BenchError::Config(format!("line {}: duplicate key `{k}`", n + 1)));
                }
            }
        }
        for o in overrides {
            let (k, v) = split_line(o)?.ok_or_else(|| BenchError::Config(format!("empty override `{o}`")))?;
            entries.insert(k, v);
        }
        let mut cfg = ExperimentConfig::default();
        for (k, v) in &entries {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<(), BenchError> {
        match key {
            "kernel" => self.kernel = one(key, v)?,
            "params" => self.params = list(key, v)?,
            "points" => self.points = one(key, v)?,
            "n" => self.sizes = list(key, v)?,
            "seed" => self.seed = one(key, v)?,
            "leaf_cap" => self.leaf_cap = one(key, v)?,
            "h2_tol" => self.h2_tol = one(key, v)?,
            "shift" => self.shift = Some(one(key, v)?),
            "precond" => self.preconds = list(key, v)?,
            "fsai_k" => self.fsai_k = list(key, v)?,
            "ranks" => self.ranks = list(key, v)?,
            "oversampling" => self.oversampling = one(key, v)?,
            "pcg_tol" => self.pcg_tol = one(key, v)?,
            "maxit" => self.maxit = one(key, v)?,
            "error_probes" => self.error_probes = one(key, v)?,
            "output" => self.output = PathBuf::from(v),
            other => {
                return Err(BenchError::Config(format!("unknown key `{other}` (known: {})", KEYS.join(", "))));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: &str| Err(BenchError::Config(m.to_string()));
        if self.params.iter().any(|&p| !(p > 0.0 && p.is_finite())) {
            return bad("params must be positive");
        }
        if self.sizes.contains(&0) {
            return bad("n must be positive");
        }
        if self.leaf_cap == 0 || self.maxit == 0 || self.error_probes == 0 {
            return bad("leaf_cap, maxit and error_probes must be positive");
        }
        if !(self.h2_tol > 0.0 && self.h2_tol < 1.0) || !(self.pcg_tol > 0.0 && self.pcg_tol < 1.0) {
            return bad("tolerances must lie in (0, 1)");
        }
        if self.shift.is_some_and(|s| !(s >= 0.0 && s.is_finite())) {
            return bad("shift must be non-negative");
        }
        if self.fsai_k.contains(&0) || self.ranks.contains(&0) {
            return bad("fsai_k and ranks must be positive");
        }
        Ok(())
    }

    pub fn shift_value(&self) -> f64 {
        self.shift.unwrap_or(if self.kernel == KernelFamily::Rpy { 0.0 } else { 1e-2 })
    }

    /// Every concrete preconditioner, in config order.
    pub fn precond_specs(&self) -> Vec<PrecondSpec> {
        let mut out = Vec::new();
        for p in &self.preconds {
            match p {
                PrecondKind::None => out.push(PrecondSpec::None),
                PrecondKind::BlockJacobi => out.push(PrecondSpec::BlockJacobi),
                PrecondKind::Fsai => out.extend(self.fsai_k.iter().map(|&k| PrecondSpec::Fsai(k))),
                PrecondKind::SpdHss => out.extend(self.ranks.iter().map(|&r| PrecondSpec::SpdHss(r))),
            }
        }
        out
    }

    /// Canonical `key=value` lines, sorted by key; the output path is left
    /// out and list entries are sorted, since sweep order does not change results.
    pub fn canonical(&self) -> String {
        let join = |v: &[String]| {
            let mut v = v.to_vec();
            v.sort();
            v.join(",")
        };
        let mut m = BTreeMap::new();
        m.insert("kernel", self.kernel.to_string());
        m.insert("params", join(&self.params.iter().map(|p| p.to_string()).collect::<Vec<_>>()));
        m.insert("points", self.points.to_string());
        m.insert("n", join(&self.sizes.iter().map(|p| p.to_string()).collect::<Vec<_>>()));
        m.insert("seed", self.seed.to_string());
        m.insert("leaf_cap", self.leaf_cap.to_string());
        m.insert("h2_tol", self.h2_tol.to_string());
        m.insert("shift", self.shift_value().to_string());
        m.insert(
            "precond",
            join(&self.precond_specs().iter().map(|p| format!("{}:{}", p.name(), p.size())).collect::<Vec<_>>()),
        );
        m.insert("oversampling", self.oversampling.to_string());
        m.insert("pcg_tol", self.pcg_tol.to_string());
        m.insert("maxit", self.maxit.to_string());
        m.insert("error_probes", self.error_probes.to_string());
        m.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// First 16 hex digits of the SHA-256 of [`canonical`](Self::canonical).
    pub fn hash(&self) -> String {
        let d = Sha256::digest(self.canonical().as_bytes());
        d.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_a_full_file() {
        let text = "\
# comment
kernel = imq
params = 0.1, 1, 10
points = sphere
n = 1000,2000
seed = 7
precond = none,spdhss   # trailing comment
ranks = 25,50
output = /tmp/x
";
        let c = ExperimentConfig::parse(text, &[]).unwrap();
        assert_eq!(c.kernel, KernelFamily::Imq);
        assert_eq!(c.params, vec![0.1, 1.0, 10.0]);
        assert_eq!(c.points, PointKind::Sphere);
        assert_eq!(c.sizes, vec![1000, 2000]);
        assert_eq!(c.precond_specs(), vec![PrecondSpec::None, PrecondSpec::SpdHss(25), PrecondSpec::SpdHss(50)]);
        assert_eq!(c.shift_value(), 1e-2);
        assert_eq!(c.leaf_cap, 400);
        assert_eq!(c.maxit, 3000);
    }

    #[test]
    fn overrides_replace_file_values() {
        let c = ExperimentConfig::parse("n = 100\n", &["n=300".into(), "kernel = rpy".into()]).unwrap();
        assert_eq!(c.sizes, vec![300]);
        assert_eq!(c.shift_value(), 0.0);
    }

    #[test]
    fn rejects_bad_input() {
        for text in ["n = 0", "bogus = 1", "n = 1\nn = 2", "params = ", "just words", "h2_tol = 2", "kernel = cubic"] {
            assert!(matches!(ExperimentConfig::parse(text, &[]), Err(BenchError::Config(_))), "{text}");
        }
    }

    #[test]
    fn hash_ignores_output_and_layout() {
        let a = ExperimentConfig::parse("n=100\noutput=a", &[]).unwrap();
        let b = ExperimentConfig::parse("  n = 100  \n\noutput = b", &[]).unwrap();
        let c = ExperimentConfig::parse("n=200", &[]).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 16);
    }
}
