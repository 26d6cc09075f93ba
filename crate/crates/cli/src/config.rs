use std::path::Path;

use nalgebra::DMatrix;
use qntrpo::linalg::DenseSpd;
use qntrpo::testfns::TestFunction;
use qntrpo::trustregion::TrustRegionConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

/// A parsed configuration file with overrides applied, before it is bound
/// to a concrete config type.
#[derive(Debug, Clone)]
pub struct RawConfig {
    pub path: String,
    pub value: toml::Table,
}

impl RawConfig {
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Parse(format!("cannot read {}: {e}", path.display())))?;
        let mut value: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| CliError::Parse(format!("{}: {}", path.display(), e.message())))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        Ok(Self {
            path: path.display().to_string(),
            value,
        })
    }

    pub fn bind<T: DeserializeOwned>(&self) -> Result<T, CliError> {
        T::deserialize(toml::Value::Table(self.value.clone()))
            .map_err(|e| CliError::Parse(format!("{}: {}", self.path, e.message())))
    }

    /// SHA-256 of the configuration as JSON with sorted keys, so the hash
    /// ignores key order and formatting in the file.
    pub fn hash(&self) -> String {
        let json = serde_json::to_value(&self.value).expect("TOML tables always convert to JSON");
        let canonical = serde_json::to_string(&json).expect("JSON values always serialize");
        Sha256::digest(canonical.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// `a.b.c=value`; the value is read as a TOML literal, or as a bare string
/// if it does not parse.
fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Parse(format!("override `{spec}` is not of the form key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(CliError::Parse(format!("override `{spec}` has an empty key segment")));
    }
    let value = format!("v = {}", raw.trim())
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let (last, parents) = path.split_last().expect("split yields at least one segment");
    let mut cur = table;
    for p in parents {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| CliError::Parse(format!("override `{spec}`: `{p}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Trust-region metric for the optimizer benchmarks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MetricSpec {
    #[default]
    Identity,
    Diagonal {
        values: Vec<f64>,
    },
    /// Symmetric positive definite matrix given as rows.
    Dense {
        rows: Vec<Vec<f64>>,
    },
}

impl MetricSpec {
    pub fn build(&self, dim: usize) -> Result<DenseSpd, CliError> {
        let m = match self {
            MetricSpec::Identity => return Ok(DenseSpd::identity(dim)),
            MetricSpec::Diagonal { values } => {
                if values.len() != dim || values.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                    return Err(CliError::Parse(format!(
                        "metric.values needs {dim} positive finite entries"
                    )));
                }
                return Ok(DenseSpd::from_diagonal(values));
            }
            MetricSpec::Dense { rows } => {
                if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
                    return Err(CliError::Parse(format!("metric.rows must be {dim}x{dim}")));
                }
                DMatrix::from_fn(dim, dim, |i, j| rows[i][j])
            }
        };
        if m.clone().cholesky().is_none() {
            return Err(CliError::Parse("metric.rows is not positive definite".into()));
        }
        DenseSpd::new(m).map_err(|e| CliError::Parse(format!("metric.rows: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizeConfig {
    pub function: TestFunction,
    #[serde(default)]
    pub metric: MetricSpec,
    /// Defaults to the function's conventional start.
    #[serde(default)]
    pub start: Option<Vec<f64>>,
    #[serde(default)]
    pub trust_region: TrustRegionConfig,
}
