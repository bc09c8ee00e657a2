//! Run manifests: which config ran, how long it took, and the outcome of
//! every assertion.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::CliError;

/// Version of the report, CSV and manifest layouts.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assertion {
    pub name: String,
    pub measured: f64,
    /// Human-readable bound, e.g. `≤ 0.005`.
    pub tolerance: String,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub tool_version: String,
    pub kind: String,
    pub config_hash: String,
    pub seed: u64,
    pub tol_profile: String,
    /// Seconds since the Unix epoch at start.
    pub started_at: u64,
    pub wall_clock_seconds: f64,
    assertions: Vec<Assertion>,
    pub errors: Vec<String>,
    /// Files written by the run, relative to the output directory.
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(kind: &str, config_hash: String, seed: u64, tol_profile: &str) -> Self {
        let started_at = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Self {
            schema_version: SCHEMA_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            kind: kind.to_string(),
            config_hash,
            seed,
            tol_profile: tol_profile.to_string(),
            started_at,
            wall_clock_seconds: 0.0,
            assertions: Vec::new(),
            errors: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn assertions(&self) -> &[Assertion] {
        &self.assertions
    }

    /// Appends an assertion; each name may be recorded only once.
    pub fn push(&mut self, a: Assertion) -> Result<(), CliError> {
        if self.assertions.iter().any(|b| b.name == a.name) {
            return Err(CliError::Run(format!("assertion `{}` recorded twice", a.name)));
        }
        self.assertions.push(a);
        Ok(())
    }

    pub fn at_most(&mut self, name: &str, measured: f64, bound: f64) -> Result<(), CliError> {
        self.push(Assertion { name: name.into(), measured, tolerance: format!("≤ {bound}"), pass: measured <= bound })
    }

    pub fn at_least(&mut self, name: &str, measured: f64, bound: f64) -> Result<(), CliError> {
        self.push(Assertion { name: name.into(), measured, tolerance: format!("≥ {bound}"), pass: measured >= bound })
    }

    pub fn within(&mut self, name: &str, measured: f64, lo: f64, hi: f64) -> Result<(), CliError> {
        self.push(Assertion {
            name: name.into(),
            measured,
            tolerance: format!("in [{lo}, {hi}]"),
            pass: (lo..=hi).contains(&measured),
        })
    }

    /// Boolean check; `measured` is 1 for true and 0 for false.
    pub fn check(&mut self, name: &str, ok: bool, expectation: &str) -> Result<(), CliError> {
        self.push(Assertion {
            name: name.into(),
            measured: if ok { 1.0 } else { 0.0 },
            tolerance: expectation.into(),
            pass: ok,
        })
    }

    pub fn passed(&self) -> bool {
        self.errors.is_empty() && self.assertions.iter().all(|a| a.pass)
    }

    /// Appends the manifest as one JSON line to `manifest.jsonl`.
    pub fn append_to(&self, dir: &Path) -> Result<(), CliError> {
        let mut file = std::fs::OpenOptions::new().create(true).append(true).open(dir.join("manifest.jsonl"))?;
        writeln!(file, "{}", serde_json::to_string(self)?)?;
        Ok(())
    }
}

/// Reads every manifest recorded in a directory, oldest first.
pub fn read_manifests(dir: &Path) -> Result<Vec<RunManifest>, CliError> {
    let text = std::fs::read_to_string(dir.join("manifest.jsonl"))?;
    text.lines().map(|l| serde_json::from_str(l).map_err(CliError::from)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn assertions_are_unique_and_appended() {
        let mut m = RunManifest::new("mf", "abc".into(), 0, "strict");
        m.at_most("gap", 0.001, 0.005).unwrap();
        assert!(m.at_most("gap", 0.001, 0.005).is_err());
        m.at_least("margin", -0.1, -0.01).unwrap();
        assert_eq!(m.assertions().len(), 2);
        assert!(!m.passed());
        let dir = tempfile::tempdir().unwrap();
        m.append_to(dir.path()).unwrap();
        m.append_to(dir.path()).unwrap();
        let back = read_manifests(dir.path()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0], m);
    }
}
