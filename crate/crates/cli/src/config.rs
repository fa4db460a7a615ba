//! Experiment configuration: one TOML document, overridable key by key.

use std::path::{Path, PathBuf};

use hcl_core::data::DatasetKind;
use hcl_core::hcl::{attach_heads, Backbone, HclModel};
use hcl_core::nn::{self, Activation, HintonConfig, LeNet5Config, NetworkSpec};
use hcl_core::trainer::{GridSpec, TrainConfig};
use hcl_core::{RngStream, StreamId};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult, Classify};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden widths of the `mlp` model.
    pub mlp_hidden: Vec<usize>,
    pub mlp_activation: Activation,
    pub lenet: LeNet5Config,
    pub hinton: HintonConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            mlp_hidden: vec![128],
            mlp_activation: Activation::Relu,
            lenet: LeNet5Config::default(),
            hinton: HintonConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GdvConfig {
    pub normalize: bool,
    /// Per-class subsample cap; GDV cost is quadratic in the point count.
    pub max_per_class: Option<usize>,
    pub batch_size: usize,
}

impl Default for GdvConfig {
    fn default() -> Self {
        Self {
            normalize: true,
            max_per_class: Some(500),
            batch_size: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    /// Per-channel standardization with training-split statistics.
    pub standardize: bool,
    /// Enables training-time augmentation; the `train.augment` table tunes it.
    pub augment: bool,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub grid: GridSpec,
    pub gdv: GdvConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
            train_limit: None,
            test_limit: None,
            standardize: false,
            augment: false,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            grid: GridSpec::default(),
            gdv: GdvConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Mlp,
    Lenet5,
    Hinton,
}

impl std::str::FromStr for ModelKind {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        match s {
            "mlp" => Ok(ModelKind::Mlp),
            "lenet5" | "lenet" => Ok(ModelKind::Lenet5),
            "hinton" => Ok(ModelKind::Hinton),
            other => Err(CliError::Config(format!("unknown model `{other}` (mlp, lenet5, hinton)"))),
        }
    }
}

/// Parses a command-line value as a TOML value, falling back to a string.
fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Sets a dotted key path, creating intermediate tables.
pub fn set_key(doc: &mut toml::Table, path: &str, value: toml::Value) -> CliResult<()> {
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("bad key path `{path}`")));
    }
    let (last, parents) = parts.split_last().unwrap();
    let mut table = doc;
    for p in parents {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("`{p}` in `{path}` is not a table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

/// Applies `key=value` overrides.
pub fn apply_overrides(doc: &mut toml::Table, overrides: &[String]) -> CliResult<()> {
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("override `{o}` is not key=value")))?;
        set_key(doc, k.trim(), parse_value(v.trim()))?;
    }
    Ok(())
}

pub fn read_document(path: Option<&Path>) -> CliResult<toml::Table> {
    match path {
        None => Ok(toml::Table::new()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            parse_document(&text)
        }
    }
}

pub fn parse_document(text: &str) -> CliResult<toml::Table> {
    text.parse::<toml::Table>().map_err(|e| CliError::Config(e.to_string()))
}

impl ExperimentConfig {
    pub fn from_document(doc: toml::Table) -> CliResult<Self> {
        let cfg: Self = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> CliResult<Self> {
        Self::from_document(parse_document(text)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> CliResult<()> {
        self.train.validate().config()?;
        self.dataset()?;
        self.model_kind()?;
        if self.train_limit == Some(0) || self.test_limit == Some(0) {
            return Err(CliError::Config("subset limits must be at least 1".into()));
        }
        if self.gdv.batch_size == 0 || self.gdv.max_per_class == Some(0) {
            return Err(CliError::Config("gdv batch_size and max_per_class must be at least 1".into()));
        }
        Ok(())
    }

    pub fn dataset(&self) -> CliResult<DatasetKind> {
        self.train.dataset.parse().config()
    }

    pub fn model_kind(&self) -> CliResult<ModelKind> {
        self.train.model.parse()
    }

    /// Short id from the content hash of everything that determines results
    /// (paths excluded).
    pub fn run_id(&self) -> String {
        let mut keyed = self.clone();
        keyed.data_dir = PathBuf::new();
        keyed.out_dir = PathBuf::new();
        Sha256::digest(keyed.to_toml().as_bytes())[..6]
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(self.run_id())
    }

    pub fn network_spec(&self) -> CliResult<NetworkSpec> {
        let kind = self.dataset()?;
        let shape = kind.image_shape();
        match self.model_kind()? {
            ModelKind::Mlp => nn::mlp_spec(&shape, &self.model.mlp_hidden, kind.num_classes(), self.model.mlp_activation),
            ModelKind::Lenet5 => LeNet5Config {
                input_shape: shape.to_vec(),
                ..self.model.lenet.clone()
            }
            .build(kind.num_classes()),
            ModelKind::Hinton => self.model.hinton.build(kind.num_classes(), &shape),
        }
        .config()
    }

    /// Head layers: `train.heads`, or every hidden layer when unset.
    pub fn head_layers(&self, spec: &NetworkSpec) -> Vec<usize> {
        self.train.heads.clone().unwrap_or_else(|| spec.hidden_layers())
    }

    /// A freshly initialized model. `heads` overrides the configured head
    /// placement (an empty slice gives the vanilla model). Configured λ are
    /// applied when there are heads; a single λ is broadcast to all heads.
    pub fn build_model(&self, heads: Option<&[usize]>) -> CliResult<HclModel<f32>> {
        let spec = self.network_spec()?;
        let heads = heads.map_or_else(|| self.head_layers(&spec), <[usize]>::to_vec);
        let seed = self.train.seed;
        let classes = spec.num_classes();
        let backbone = Backbone::init(spec, &mut RngStream::new(seed, StreamId::BackboneInit)).config()?;
        let model = attach_heads(backbone, &heads, classes, &mut RngStream::new(seed, StreamId::HeadInit)).config()?;
        match &self.train.lambdas {
            Some(l) if !heads.is_empty() => {
                let l = if l.len() == 1 { vec![l[0]; heads.len()] } else { l.clone() };
                model.with_lambdas(l).config()
            }
            _ => Ok(model),
        }
    }

    /// The trainer config with augmentation resolved for the dataset.
    pub fn resolved_train(&self) -> CliResult<TrainConfig> {
        let kind = self.dataset()?;
        let mut t = self.train.clone();
        t.augment = if self.augment {
            Some(t.augment.unwrap_or_default().with_default_flip(kind.default_flip()))
        } else {
            None
        };
        Ok(t)
    }

    /// Default λ sets for a grid over a model with `heads` heads: equal
    /// weights at three overall strengths.
    pub fn lambda_sets(&self, heads: usize) -> Vec<Vec<f64>> {
        if !self.grid.lambda_sets.is_empty() {
            return self.grid.lambda_sets.clone();
        }
        if heads == 0 {
            return vec![Vec::new()];
        }
        [0.5, 1.0, 2.0]
            .iter()
            .map(|s| vec![s / heads as f64; heads])
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_protocol() {
        let c = ExperimentConfig::default();
        assert_eq!((c.train.max_epochs, c.train.patience), (1000, 200));
        assert!(c.grid.lr_values.iter().all(|&lr| (1e-5..=1e-1).contains(&lr)));
        assert_eq!(ExperimentConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn overrides_set_typed_values() {
        let mut doc = parse_document("[train]\nlr = 0.5\n").unwrap();
        apply_overrides(
            &mut doc,
            &["train.lr=0.01".into(), "train.lambdas=[0.1, 0.2]".into(), "train.dataset=fashion-mnist".into()],
        )
        .unwrap();
        let c = ExperimentConfig::from_document(doc).unwrap();
        assert_eq!(c.train.lr, 0.01);
        assert_eq!(c.train.lambdas, Some(vec![0.1, 0.2]));
        assert_eq!(c.dataset().unwrap(), DatasetKind::FashionMnist);
        assert!(apply_overrides(&mut toml::Table::new(), &["novalue".into()]).is_err());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for bad in ["[train]\nlr = -1.0", "bogus = 1", "[train]\nmodel = \"vgg\"", "[train]\npatience = 0"] {
            assert!(matches!(ExperimentConfig::from_toml(bad), Err(CliError::Config(_))), "{bad}");
        }
    }

    #[test]
    fn run_id_ignores_paths_but_not_seed() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.out_dir = "elsewhere".into();
        assert_eq!(a.run_id(), b.run_id());
        b.train.seed = 1;
        assert_ne!(a.run_id(), b.run_id());
    }

    #[test]
    fn models_build_with_heads_and_lambdas() {
        let mut c = ExperimentConfig::default();
        c.train.lambdas = Some(vec![0.0]);
        let m = c.build_model(None).unwrap();
        assert_eq!(m.heads().len(), 6);
        assert!(m.is_vanilla_equivalent());
        assert!(c.build_model(Some(&[])).unwrap().heads().is_empty());
        c.train.model = "hinton".into();
        c.train.dataset = "cifar10".into();
        c.train.lambdas = None;
        assert_eq!(c.build_model(None).unwrap().spec().input_shape(), &[3, 32, 32]);
        c.train.lambdas = Some(vec![0.1, 0.2]);
        assert!(matches!(c.build_model(None), Err(CliError::Config(_))));
    }
}
