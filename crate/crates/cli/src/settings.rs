//! Flat `key = value` run settings: defaults, then a config file, then
//! command-line overrides.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use evbalance::demand::{DemandModel, ElasticityParams, GnnParams, PretrainConfig};
use evbalance::graph::AdjacencyMethod;
use evbalance::optim::OptimizerKind;
use evbalance::training::TrainConfig;

use crate::CliError;

/// Every recognised key with its default.
pub const DEFAULTS: &[(&str, &str)] = &[
    ("adjacency", "delaunay"),
    ("alpha", "1"),
    ("batch_size", "32"),
    ("double", "false"),
    ("episodes", "100"),
    ("epsilon_decay", "0.95"),
    ("epsilon_min", "0.1"),
    ("epsilon_start", "1"),
    ("gamma", "0.99"),
    ("gnn_hidden", "16"),
    ("gnn_params", ""),
    ("hidden1", "64"),
    ("hidden2", "64"),
    ("kappa", "30"),
    ("lambda", "1"),
    ("lr", "0.0001"),
    ("model", "analytic"),
    ("mu", "0.3"),
    ("pretrain_epochs", "200"),
    ("pretrain_lr", "0.01"),
    ("replay_capacity", "10000"),
    ("seed", "0"),
    ("target_sync_every", "20"),
    ("train_fraction", "0.8"),
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            values: DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl Settings {
    /// Defaults overlaid with the file's entries. Blank lines and lines
    /// starting with `#` are skipped.
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let mut settings = Self::default();
        for (k, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |message: String| CliError::Config {
                path: path.to_path_buf(),
                line: k + 1,
                message,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad("expected `key = value`".into()))?;
            settings.set(key.trim(), value.trim()).map_err(|e| bad(e.to_string()))?;
        }
        Ok(settings)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(CliError::Usage(format!(
                "unknown setting `{key}`; known settings: {}",
                DEFAULTS.iter().map(|(k, _)| *k).collect::<Vec<_>>().join(", ")
            ))),
        }
    }

    /// Applies `KEY=VALUE` override strings.
    pub fn apply_overrides<'a>(&mut self, pairs: impl IntoIterator<Item = &'a str>) -> Result<(), CliError> {
        for pair in pairs {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("override `{pair}` is not KEY=VALUE")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn snapshot(&self) -> &BTreeMap<String, String> {
        &self.values
    }

    pub fn str(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).expect("key has a default")
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T, CliError> {
        let raw = self.str(key);
        raw.parse()
            .map_err(|_| CliError::Usage(format!("setting `{key}` has an unparsable value `{raw}`")))
    }

    pub fn seed(&self) -> Result<u64, CliError> {
        self.parse("seed")
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        Ok(TrainConfig {
            gamma: self.parse("gamma")?,
            lr: self.parse("lr")?,
            batch_size: self.parse("batch_size")?,
            target_sync_every: self.parse("target_sync_every")?,
            epsilon_start: self.parse("epsilon_start")?,
            epsilon_decay: self.parse("epsilon_decay")?,
            epsilon_min: self.parse("epsilon_min")?,
            lambda: self.parse("lambda")?,
            kappa: self.parse("kappa")?,
            episodes: self.parse("episodes")?,
            seed: self.seed()?,
            hidden1: self.parse("hidden1")?,
            hidden2: self.parse("hidden2")?,
            double: self.parse("double")?,
            replay_capacity: self.parse("replay_capacity")?,
            optimizer: OptimizerKind::adam(),
        })
    }

    pub fn pretrain_config(&self) -> Result<PretrainConfig, CliError> {
        Ok(PretrainConfig {
            epochs: self.parse("pretrain_epochs")?,
            lr: self.parse("pretrain_lr")?,
            seed: self.seed()?,
            hidden: self.parse("gnn_hidden")?,
        })
    }

    pub fn adjacency(&self) -> Result<AdjacencyMethod, CliError> {
        let raw = self.str("adjacency");
        match raw.split_once(':') {
            None if raw == "delaunay" => Ok(AdjacencyMethod::Delaunay),
            Some(("knn", k)) => k
                .parse()
                .map(AdjacencyMethod::Knn)
                .map_err(|_| CliError::Usage(format!("bad neighbour count in `{raw}`"))),
            _ => Err(CliError::Usage(format!(
                "adjacency must be `delaunay` or `knn:K`, got `{raw}`"
            ))),
        }
    }

    /// The demand model named by `model`, loading GNN parameters from
    /// `gnn_params` when needed.
    pub fn demand_model(&self) -> Result<DemandModel, CliError> {
        match self.str("model") {
            "analytic" => Ok(DemandModel::Analytic(ElasticityParams::new(
                self.parse("alpha")?,
                self.parse("mu")?,
            )?)),
            "gnn" => {
                let path = self.str("gnn_params");
                if path.is_empty() {
                    return Err(CliError::Usage(
                        "model `gnn` needs `gnn_params` pointing at a pretrained parameter file".into(),
                    ));
                }
                Ok(DemandModel::Gnn(GnnParams::load(path)?))
            }
            other => Err(CliError::Usage(format!(
                "model must be `analytic` or `gnn`, got `{other}`"
            ))),
        }
    }
}
