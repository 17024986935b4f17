//! Experiment configuration files (TOML).
//!
//! ```toml
//! seed = 7
//!
//! [dataset]
//! source = "synthetic"      # or "csv" with train_path / test_path
//! classes = 4
//! dims = 2
//! n_per_class = 200
//! test_per_class = 100
//! separation = 4.0
//!
//! [model]
//! hidden = [32]
//! normalizer = "bn"         # bn | gn | ln | in | none
//!
//! [partition]
//! scheme = "shards"         # iid | dirichlet | shards
//! clients = 4
//! class_fraction = 0.25
//!
//! [fed]
//! rounds = 300
//!
//! [momentum]
//! mode = "reinit"           # reinit | local | global
//!
//! [fixbn]
//! kind = "fixed_fraction"   # off | fixed_fraction | fixed_round | sliding_window
//! f = 0.5
//! ```
//!
//! Every key is optional and has a default; unknown keys are errors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fed::{BudgetMode, FedConfig};
use crate::model::{ModelSpec, Normalizer};
use crate::norm::{DEFAULT_EMA_ALPHA, DEFAULT_EPSILON};
use crate::partition::{PartitionSpec, Scheme};
use crate::policy::{FixBnKind, MomentumMode, DEFAULT_TAU, DEFAULT_WINDOW};

/// Name of the resolved configuration written next to run artifacts.
pub const ECHO_FILE: &str = "config.toml";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Output directory; the `--out` flag takes precedence.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub norm: NormSection,
    pub partition: PartitionSection,
    pub fed: FedSection,
    pub momentum: MomentumSection,
    pub fixbn: FixBnSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub source: DataSource,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_path: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_path: Option<PathBuf>,
    pub classes: usize,
    pub dims: usize,
    pub n_per_class: usize,
    pub test_per_class: usize,
    pub separation: f64,
    /// Per-example shape the flat feature rows are reshaped to, e.g. `[C, H, W]`.
    /// Empty means flat.
    pub input_shape: Vec<usize>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            train_path: None,
            test_path: None,
            classes: 4,
            dims: 2,
            n_per_class: 200,
            test_per_class: 100,
            separation: 4.0,
            input_shape: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizerKind {
    Bn,
    Gn,
    Ln,
    In,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub hidden: Vec<usize>,
    /// Output channels of 3×3 conv blocks placed before the dense layers.
    pub conv: Vec<usize>,
    pub residual: bool,
    pub normalizer: NormalizerKind,
    /// Group count for `gn`.
    pub groups: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            hidden: vec![32],
            conv: Vec::new(),
            residual: false,
            normalizer: NormalizerKind::Bn,
            groups: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NormSection {
    pub ema_alpha: f64,
    pub epsilon: f64,
}

impl Default for NormSection {
    fn default() -> Self {
        Self {
            ema_alpha: DEFAULT_EMA_ALPHA,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeKind {
    Iid,
    Dirichlet,
    Shards,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionSection {
    pub scheme: SchemeKind,
    pub clients: usize,
    pub alpha: f64,
    pub class_fraction: f64,
}

impl Default for PartitionSection {
    fn default() -> Self {
        Self {
            scheme: SchemeKind::Iid,
            clients: 4,
            alpha: 0.5,
            class_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetKind {
    FixedRounds,
    FixedEpochs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FedSection {
    pub rounds: usize,
    pub local_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay_points: Vec<f64>,
    pub lr_decay_factor: f64,
    pub participation: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub budget: BudgetKind,
    pub budget_epochs: f64,
}

impl Default for FedSection {
    fn default() -> Self {
        let d = FedConfig::default();
        Self {
            rounds: d.rounds,
            local_steps: d.local_steps,
            batch_size: d.batch_size,
            lr: d.base_lr,
            lr_decay_points: d.lr_decay_points,
            lr_decay_factor: d.lr_decay_factor,
            participation: d.participation_rate,
            momentum: d.momentum_coef,
            weight_decay: d.weight_decay,
            budget: BudgetKind::FixedRounds,
            budget_epochs: d.budget_epochs,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MomentumKind {
    Reinit,
    Local,
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MomentumSection {
    pub mode: MomentumKind,
}

impl Default for MomentumSection {
    fn default() -> Self {
        Self {
            mode: MomentumKind::Reinit,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixBnKindName {
    Off,
    FixedFraction,
    FixedRound,
    SlidingWindow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FixBnSection {
    pub kind: FixBnKindName,
    /// Fraction of rounds before freezing (`fixed_fraction`).
    pub f: f64,
    /// Last unfrozen round (`fixed_round`).
    pub round: usize,
    pub window: usize,
    pub tau: f64,
    pub fix_affine: bool,
}

impl Default for FixBnSection {
    fn default() -> Self {
        Self {
            kind: FixBnKindName::Off,
            f: 0.5,
            round: 1,
            window: DEFAULT_WINDOW,
            tau: DEFAULT_TAU,
            fix_affine: false,
        }
    }
}

fn line_column(text: &str, offset: usize) -> (usize, usize) {
    let offset = offset.min(text.len());
    let before = &text.as_bytes()[..offset];
    let line = before.iter().filter(|&&b| b == b'\n').count() + 1;
    let line_start = before.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    let column = String::from_utf8_lossy(&before[line_start..]).chars().count() + 1;
    (line, column)
}

/// Parses and validates configuration text. Relative dataset paths are
/// resolved against `base_dir`.
pub fn parse_config_str(text: &str, base_dir: &Path) -> Result<ExperimentConfig> {
    let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
        let (line, column) = e.span().map_or((1, 1), |s| line_column(text, s.start));
        Error::ConfigParse {
            line,
            column,
            message: e.message().to_string(),
        }
    })?;
    for p in [&mut cfg.dataset.train_path, &mut cfg.dataset.test_path]
        .into_iter()
        .flatten()
    {
        if p.is_relative() {
            *p = base_dir.join(&*p);
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_config_str(&text, base)
}

fn ensure(cond: bool, field: &str, message: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::config(field, message()))
    }
}

impl ExperimentConfig {
    /// Checks every constraint, naming the offending field.
    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        match d.source {
            DataSource::Synthetic => {
                ensure(d.classes >= 2, "dataset.classes", || {
                    format!("must be >= 2, got {}", d.classes)
                })?;
                ensure(d.dims >= 1, "dataset.dims", || "must be >= 1".into())?;
                ensure(d.n_per_class >= 1, "dataset.n_per_class", || "must be >= 1".into())?;
                ensure(d.test_per_class >= 1, "dataset.test_per_class", || {
                    "must be >= 1".into()
                })?;
                ensure(
                    d.separation >= 0.0 && d.separation.is_finite(),
                    "dataset.separation",
                    || format!("must be >= 0, got {}", d.separation),
                )?;
            }
            DataSource::Csv => {
                for (field, p) in [
                    ("dataset.train_path", &d.train_path),
                    ("dataset.test_path", &d.test_path),
                ] {
                    match p {
                        None => return Err(Error::config(field, "required when source = \"csv\"")),
                        Some(p) if !p.is_file() => {
                            return Err(Error::config(field, format!("{} does not exist", p.display())))
                        }
                        _ => {}
                    }
                }
            }
        }
        ensure(!d.input_shape.contains(&0), "dataset.input_shape", || {
            "extents must be positive".into()
        })?;
        if d.source == DataSource::Synthetic && !d.input_shape.is_empty() {
            let n: usize = d.input_shape.iter().product();
            ensure(n == d.dims, "dataset.input_shape", || {
                format!("{:?} holds {n} features but dims = {}", d.input_shape, d.dims)
            })?;
        }

        let m = &self.model;
        ensure(m.hidden.iter().all(|&w| w > 0), "model.hidden", || {
            "widths must be positive".into()
        })?;
        ensure(m.conv.iter().all(|&c| c > 0), "model.conv", || {
            "channel counts must be positive".into()
        })?;
        if !m.conv.is_empty() {
            ensure(d.input_shape.len() == 3, "dataset.input_shape", || {
                "conv layers need input_shape = [C, H, W]".into()
            })?;
        }
        if m.normalizer == NormalizerKind::Gn {
            ensure(m.groups >= 1, "model.groups", || "must be >= 1".into())?;
            for &c in m.conv.iter().chain(&m.hidden) {
                ensure(c % m.groups == 0, "model.groups", || {
                    format!("{c} channels are not divisible into {} groups", m.groups)
                })?;
            }
        }

        let n = &self.norm;
        ensure((0.0..1.0).contains(&n.ema_alpha), "norm.ema_alpha", || {
            format!("must lie in [0, 1), got {}", n.ema_alpha)
        })?;
        ensure(n.epsilon > 0.0 && n.epsilon.is_finite(), "norm.epsilon", || {
            format!("must be > 0, got {}", n.epsilon)
        })?;

        let p = &self.partition;
        ensure(p.clients >= 1, "partition.clients", || "must be >= 1".into())?;
        if p.scheme == SchemeKind::Dirichlet {
            ensure(p.alpha > 0.0 && p.alpha.is_finite(), "partition.alpha", || {
                format!("must be > 0, got {}", p.alpha)
            })?;
        }
        if p.scheme == SchemeKind::Shards {
            ensure(
                p.class_fraction > 0.0 && p.class_fraction <= 1.0,
                "partition.class_fraction",
                || format!("must lie in (0, 1], got {}", p.class_fraction),
            )?;
        }

        let fed = self.fed_config();
        if fed.budget_mode == BudgetMode::FixedRounds {
            ensure(fed.rounds >= 1, "fed.rounds", || "must be >= 1".into())?;
        }
        fed.validate()?;

        let fx = &self.fixbn;
        match fx.kind {
            FixBnKindName::FixedFraction => ensure(fx.f > 0.0 && fx.f < 1.0, "fixbn.f", || {
                format!("must lie in (0, 1), got {}", fx.f)
            })?,
            FixBnKindName::FixedRound => {
                ensure(fx.round >= 1, "fixbn.round", || "must be >= 1".into())?;
                if fed.budget_mode == BudgetMode::FixedRounds {
                    ensure(fx.round <= fed.rounds, "fixbn.round", || {
                        format!("{} exceeds fed.rounds = {}", fx.round, fed.rounds)
                    })?;
                }
            }
            FixBnKindName::SlidingWindow => {
                ensure(fx.window >= 2, "fixbn.window", || "must be >= 2".into())?;
                ensure(fx.tau > 0.0 && fx.tau.is_finite(), "fixbn.tau", || "must be > 0".into())?;
            }
            FixBnKindName::Off => {}
        }
        Ok(())
    }

    pub fn normalizer(&self) -> Normalizer {
        match self.model.normalizer {
            NormalizerKind::Bn => Normalizer::Batch,
            NormalizerKind::Gn => Normalizer::Group(self.model.groups),
            NormalizerKind::Ln => Normalizer::Layer,
            NormalizerKind::In => Normalizer::Instance,
            NormalizerKind::None => Normalizer::None,
        }
    }

    /// Model architecture for `features` inputs per example and `classes` outputs.
    pub fn model_spec(&self, features: usize, classes: usize) -> ModelSpec {
        let input_shape = if self.dataset.input_shape.is_empty() {
            vec![features]
        } else {
            self.dataset.input_shape.clone()
        };
        ModelSpec {
            input_shape,
            conv_channels: self.model.conv.clone(),
            residual: self.model.residual,
            hidden: self.model.hidden.clone(),
            classes,
            normalizer: self.normalizer(),
            ema_alpha: self.norm.ema_alpha,
            epsilon: self.norm.epsilon,
        }
    }

    pub fn partition_spec(&self) -> PartitionSpec {
        let p = &self.partition;
        PartitionSpec {
            scheme: match p.scheme {
                SchemeKind::Iid => Scheme::Iid,
                SchemeKind::Dirichlet => Scheme::Dirichlet { alpha: p.alpha },
                SchemeKind::Shards => Scheme::Shards {
                    class_fraction: p.class_fraction,
                },
            },
            clients: p.clients,
            seed: crate::seed::derive_seed(self.seed, crate::seed::Purpose::Partition, 0, 0),
        }
    }

    pub fn fed_config(&self) -> FedConfig {
        let f = &self.fed;
        FedConfig {
            rounds: f.rounds,
            local_steps: f.local_steps,
            batch_size: f.batch_size,
            base_lr: f.lr,
            lr_decay_points: f.lr_decay_points.clone(),
            lr_decay_factor: f.lr_decay_factor,
            participation_rate: f.participation,
            momentum_mode: match self.momentum.mode {
                MomentumKind::Reinit => MomentumMode::Reinit,
                MomentumKind::Local => MomentumMode::LocalMaintained,
                MomentumKind::Global => MomentumMode::GlobalMaintained,
            },
            momentum_coef: f.momentum,
            weight_decay: f.weight_decay,
            budget_mode: match f.budget {
                BudgetKind::FixedRounds => BudgetMode::FixedRounds,
                BudgetKind::FixedEpochs => BudgetMode::FixedEpochs,
            },
            budget_epochs: f.budget_epochs,
            fix_affine: self.fixbn.fix_affine,
            seed: self.seed,
        }
    }

    pub fn fixbn_kind(&self) -> FixBnKind {
        let fx = &self.fixbn;
        match fx.kind {
            FixBnKindName::Off => FixBnKind::Off,
            FixBnKindName::FixedFraction => FixBnKind::FixedFraction(fx.f),
            FixBnKindName::FixedRound => FixBnKind::FixedRound(fx.round),
            FixBnKindName::SlidingWindow => FixBnKind::SlidingWindow {
                window: fx.window,
                tau: fx.tau,
            },
        }
    }

    /// The fully resolved configuration as TOML; parsing it back yields `self`.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration always serializes")
    }

    /// Writes the resolved configuration to `dir/config.toml`.
    pub fn echo(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(ECHO_FILE);
        std::fs::write(&path, self.to_toml()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<ExperimentConfig> {
        parse_config_str(text, Path::new("."))
    }

    #[test]
    fn minimal_config_has_documented_defaults() {
        let cfg = parse("").unwrap();
        assert_eq!(cfg.norm.ema_alpha, 0.9);
        assert_eq!(cfg.norm.epsilon, 1e-5);
        assert_eq!(cfg.fed.lr, 0.02);
        assert_eq!(cfg.fed.lr_decay_points, vec![0.5, 0.75]);
        assert_eq!(cfg.fixbn_kind(), FixBnKind::Off);
    }

    #[test]
    fn fixed_fraction_policy() {
        let cfg = parse("[fixbn]\nkind = \"fixed_fraction\"\nf = 0.5\n").unwrap();
        assert_eq!(cfg.fixbn_kind(), FixBnKind::FixedFraction(0.5));
    }

    #[test]
    fn malformed_number_reports_position() {
        match parse("seed = 1\n[fed]\nrounds = 12x\n") {
            Err(Error::ConfigParse { line, column, .. }) => {
                assert_eq!(line, 3);
                assert!(column >= 10, "column {column}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(
            parse("[fed]\nroudns = 3\n"),
            Err(Error::ConfigParse { line: 2, .. })
        ));
        assert!(matches!(parse("[fedd]\n"), Err(Error::ConfigParse { .. })));
    }

    #[test]
    fn constraint_violations_name_the_field() {
        let field_of = |text: &str| match parse(text) {
            Err(Error::Config { field, .. }) => field,
            other => panic!("unexpected {other:?}"),
        };
        assert_eq!(field_of("[norm]\nepsilon = 0.0\n"), "norm.epsilon");
        assert_eq!(field_of("[fixbn]\nkind = \"fixed_fraction\"\nf = 1.0\n"), "fixbn.f");
        assert_eq!(field_of("[fed]\nrounds = 0\n"), "fed.rounds");
        assert_eq!(
            field_of("[model]\nnormalizer = \"gn\"\ngroups = 3\nhidden = [4]\n"),
            "model.groups"
        );
        assert_eq!(field_of("[dataset]\nsource = \"csv\"\n"), "dataset.train_path");
        assert_eq!(
            field_of("[fixbn]\nkind = \"fixed_round\"\nround = 500\n"),
            "fixbn.round"
        );
    }

    #[test]
    fn echo_reparses_to_the_same_config() {
        let cfg = parse(
            "seed = 3\n[model]\nnormalizer = \"gn\"\ngroups = 4\nhidden = [8, 8]\n[fixbn]\nkind = \"sliding_window\"\nwindow = 5\n",
        )
        .unwrap();
        assert_eq!(parse(&cfg.to_toml()).unwrap(), cfg);
    }
}
