//! JSON experiment configs and model documents.

use std::path::{Path, PathBuf};

use hmm_duality::catalog::{self, CatalogModel};
use hmm_duality::{DMatrix, DVector, HmmModel, LinearGaussianModel};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const SCHEMA_VERSION: u32 = 1;

pub const SCHEMA_HELP: &str = r#"Config schema (JSON), version 1:
{
  "schema_version": 1,                      required
  "experiment": "stability",                subcommand name, needed by `run`
  "model": "two_state"                      catalog name, or an inline document:
         | {"catalog": "two_state", "a1": 1, "a2": 1}
         | {"rate": [[..],..], "obs": [[..],..] or [..], "prior": [..]}
         | {"a_mat": [[..]], "h_mat": [[..]], "sigma": [[..]], "mean0": [..], "cov0": [[..]]},
  "horizon": 10.0, "dt": 0.01, "paths": 1000, "seed": 0, "tol": 1e-9, "c": 4.0,
  "mu": [..], "nu": [..], "f": [..],          optional priors / test function
  "out": "out"                                output directory
}
All matrices are arrays of rows and must be rectangular."#;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema_version: Option<u32>,
    /// Written by the runner into manifests; ignored on input.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub library_version: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experiment: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub paths: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nu: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelRef {
    Name(String),
    Inline(Box<ModelDoc>),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub catalog: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub obs: Option<ObsDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a_mat: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h_mat: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean0: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cov0: Option<Vec<Vec<f64>>>,
}

/// Observation matrix: rows per state, or a plain vector for one channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ObsDoc {
    Column(Vec<f64>),
    Matrix(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Hmm(HmmModel),
    LinearGaussian(LinearGaussianModel),
}

impl Model {
    pub fn kind(&self) -> &'static str {
        match self {
            Model::Hmm(_) => "hmm",
            Model::LinearGaussian(_) => "linear_gaussian",
        }
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

pub fn matrix(name: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>, CliError> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || ncols == 0 {
        return Err(usage(format!("`{name}` must be a non-empty array of rows")));
    }
    if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != ncols) {
        return Err(usage(format!("`{name}` is ragged: row {i} has {} entries, row 0 has {ncols}", r.len())));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

fn require<'a, T>(name: &str, v: &'a Option<T>) -> Result<&'a T, CliError> {
    v.as_ref().ok_or_else(|| usage(format!("model document is missing `{name}`")))
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().cloned().collect()).collect()
}

impl ModelDoc {
    pub fn resolve(&self) -> Result<Model, CliError> {
        if let Some(name) = &self.catalog {
            return catalog_model(name, self.a1, self.a2);
        }
        if self.rate.is_some() {
            let rate = matrix("rate", require("rate", &self.rate)?)?;
            let obs = match require("obs", &self.obs)? {
                ObsDoc::Column(v) => DMatrix::from_column_slice(v.len(), 1, v),
                ObsDoc::Matrix(rows) => matrix("obs", rows)?,
            };
            let d = rate.nrows();
            let prior = match &self.prior {
                Some(p) => DVector::from_column_slice(p),
                None => DVector::from_element(d, 1.0 / d as f64),
            };
            return Ok(Model::Hmm(HmmModel::from_parts(rate, obs, prior)?));
        }
        if self.a_mat.is_some() {
            let lg = LinearGaussianModel::new(
                matrix("a_mat", require("a_mat", &self.a_mat)?)?,
                matrix("h_mat", require("h_mat", &self.h_mat)?)?,
                matrix("sigma", require("sigma", &self.sigma)?)?,
                DVector::from_column_slice(require("mean0", &self.mean0)?),
                matrix("cov0", require("cov0", &self.cov0)?)?,
            )?;
            return Ok(Model::LinearGaussian(lg));
        }
        Err(usage("model document needs `catalog`, `rate` (HMM) or `a_mat` (linear-Gaussian)"))
    }

    /// Full numeric description, so manifests do not depend on the catalog.
    pub fn from_model(model: &Model) -> Self {
        match model {
            Model::Hmm(m) => ModelDoc {
                rate: Some(to_rows(m.a())),
                obs: Some(ObsDoc::Matrix(to_rows(m.h()))),
                prior: Some(m.prior.as_vector().iter().cloned().collect()),
                ..Default::default()
            },
            Model::LinearGaussian(m) => ModelDoc {
                a_mat: Some(to_rows(&m.a_mat)),
                h_mat: Some(to_rows(&m.h_mat)),
                sigma: Some(to_rows(&m.sigma)),
                mean0: Some(m.mean0.iter().cloned().collect()),
                cov0: Some(to_rows(&m.cov0)),
                ..Default::default()
            },
        }
    }
}

pub fn catalog_model(name: &str, a1: Option<f64>, a2: Option<f64>) -> Result<Model, CliError> {
    if name == "two_state" {
        let (a1, a2) = (a1.unwrap_or(1.0), a2.unwrap_or(1.0));
        if !(a1 > 0.0 && a2 > 0.0) {
            return Err(usage("two_state needs positive rates a1, a2"));
        }
        return Ok(Model::Hmm(catalog::two_state(a1, a2)));
    }
    if a1.is_some() || a2.is_some() {
        return Err(usage(format!("--a1/--a2 only apply to two_state, not {name}")));
    }
    match catalog::lookup(name) {
        Some(e) => Ok(match e.model {
            CatalogModel::Hmm(m) => Model::Hmm(m),
            CatalogModel::LinearGaussian(m) => Model::LinearGaussian(m),
        }),
        None => Err(usage(format!("unknown model `{name}` (see `hmm-duality catalog`)"))),
    }
}

impl ModelRef {
    pub fn resolve(&self, a1: Option<f64>, a2: Option<f64>) -> Result<Model, CliError> {
        match self {
            ModelRef::Name(n) => catalog_model(n, a1, a2),
            ModelRef::Inline(doc) => {
                let mut doc = doc.clone();
                doc.a1 = a1.or(doc.a1);
                doc.a2 = a2.or(doc.a2);
                doc.resolve()
            }
        }
    }
}

fn read(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))
}

/// Parses a config file. Empty documents and missing or unknown schema
/// versions are usage errors.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, CliError> {
    if text.trim().is_empty() {
        return Err(CliError::Schema("config is empty".into()));
    }
    let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| CliError::Schema(format!("config does not parse: {e}")))?;
    if cfg == ExperimentConfig::default() {
        return Err(CliError::Schema("config is empty".into()));
    }
    match cfg.schema_version {
        Some(SCHEMA_VERSION) => Ok(cfg),
        Some(v) => Err(CliError::Schema(format!("unsupported schema_version {v} (expected {SCHEMA_VERSION})"))),
        None => Err(CliError::Schema("config is missing `schema_version`".into())),
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    parse_config(&read(path)?)
}

/// A positional model argument: a catalog name or a path to a JSON model
/// document.
pub fn model_arg(arg: &str) -> Result<ModelRef, CliError> {
    let path = Path::new(arg);
    if arg.ends_with(".json") || path.is_file() {
        let doc: ModelDoc = serde_json::from_str(&read(path)?).map_err(|e| usage(format!("model file {arg} does not parse: {e}")))?;
        Ok(ModelRef::Inline(Box::new(doc)))
    } else {
        Ok(ModelRef::Name(arg.to_string()))
    }
}
