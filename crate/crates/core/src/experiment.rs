//! The pipelines behind the `fedbn` subcommands.
//!
//! `train` writes into its output directory:
//!
//! - `config.toml`: the resolved configuration (feed it back to rerun)
//! - `manifest.csv`: `client_id,example_index` rows
//! - `metrics.csv`: one row per round
//! - `model.bin`: the final global model
//! - `test.csv`: the evaluation set, so `eval` can reproduce the last accuracy

use std::path::{Path, PathBuf};

use crate::config::{DataSource, ExperimentConfig};
use crate::data::{self, Dataset};
use crate::diagnostics::{save_records, RoundRecord};
use crate::error::{Error, Result};
use crate::fed::{evaluate, run_training, GlobalState, RunOptions};
use crate::gradcheck::{check_model, GradCheck};
use crate::model::{Layer, Model};
use crate::model_io::{load_model, save_model, ModelFile};
use crate::nn::{Conv2dLayer, DenseLayer};
use crate::norm::{GroupNormLayer, NormLayerState, DEFAULT_EMA_ALPHA, DEFAULT_EPSILON};
use crate::partition::{make_shards, save_manifest};
use crate::policy::FixBnPolicy;
use crate::seed::{self, Purpose};

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const MODEL_FILE: &str = "model.bin";
pub const TEST_FILE: &str = "test.csv";

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn shape_rows(dataset: Dataset, shape: &[usize]) -> Result<Dataset> {
    if shape.is_empty() {
        return Ok(dataset);
    }
    let n: usize = shape.iter().product();
    if n != dataset.feature_len() {
        return Err(Error::config(
            "dataset.input_shape",
            format!("{shape:?} holds {n} features but rows have {}", dataset.feature_len()),
        ));
    }
    dataset.with_example_shape(shape)
}

/// Training and test sets described by the configuration.
pub fn load_datasets(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let d = &cfg.dataset;
    let (train, test) = match d.source {
        DataSource::Synthetic => (
            data::gen_synthetic(
                d.classes,
                d.dims,
                d.n_per_class,
                d.separation,
                seed::derive_seed(cfg.seed, Purpose::TrainData, 0, 0),
            )?,
            data::gen_synthetic(
                d.classes,
                d.dims,
                d.test_per_class,
                d.separation,
                seed::derive_seed(cfg.seed, Purpose::TestData, 0, 0),
            )?,
        ),
        DataSource::Csv => {
            let missing = |f: &str| Error::config(f, "required when source = \"csv\"");
            let train = data::load_csv(d.train_path.as_deref().ok_or_else(|| missing("dataset.train_path"))?)?;
            let test = data::load_csv(d.test_path.as_deref().ok_or_else(|| missing("dataset.test_path"))?)?;
            if train.feature_len() != test.feature_len() {
                return Err(Error::config(
                    "dataset.test_path",
                    format!(
                        "{} features, training set has {}",
                        test.feature_len(),
                        train.feature_len()
                    ),
                ));
            }
            let k = train.class_count.max(test.class_count);
            (
                Dataset::new(train.features, train.labels, k)?,
                Dataset::new(test.features, test.labels, k)?,
            )
        }
    };
    Ok((shape_rows(train, &d.input_shape)?, shape_rows(test, &d.input_shape)?))
}

/// Partitions the training set and writes `manifest.csv`.
pub fn cmd_partition(cfg: &ExperimentConfig, out: &Path) -> Result<PathBuf> {
    create_dir(out)?;
    cfg.echo(out)?;
    let (train, _) = load_datasets(cfg)?;
    let shards = crate::partition::partition(&train, &cfg.partition_spec())?;
    let path = out.join(MANIFEST_FILE);
    save_manifest(&shards, &path)?;
    Ok(path)
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: GlobalState,
    pub records: Vec<RoundRecord>,
    pub input_shape: Vec<usize>,
    /// Accuracy of the final model on the test set.
    pub final_accuracy: f64,
}

/// Builds data, model and shards from the configuration and runs FedAvg.
pub fn train(cfg: &ExperimentConfig, threads: usize) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (train, test) = load_datasets(cfg)?;
    train_on(cfg, &train, &test, threads)
}

/// [`train`] on already loaded datasets.
pub fn train_on(cfg: &ExperimentConfig, train: &Dataset, test: &Dataset, threads: usize) -> Result<TrainOutcome> {
    let spec = cfg.model_spec(train.feature_len(), train.class_count);
    let model0 = spec
        .build(&mut seed::rng(seed::derive_seed(cfg.seed, Purpose::Init, 0, 0)))
        .map_err(|e| Error::config("model", e.to_string()))?;
    let mut shards = make_shards(train, &cfg.partition_spec(), cfg.seed)?;
    let mut policy = FixBnPolicy::new(cfg.fixbn_kind())?;
    let (state, records) = run_training(
        model0,
        &mut shards,
        train,
        test,
        &cfg.fed_config(),
        &mut policy,
        RunOptions { threads },
    )?;
    let final_accuracy = evaluate(&state.model, test)?;
    Ok(TrainOutcome {
        state,
        records,
        input_shape: spec.input_shape,
        final_accuracy,
    })
}

/// Runs [`train`] and writes every artifact into `out`.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path, threads: usize) -> Result<TrainOutcome> {
    cfg.validate()?;
    create_dir(out)?;
    cfg.echo(out)?;
    let (train_set, test) = load_datasets(cfg)?;
    save_manifest(
        &crate::partition::partition(&train_set, &cfg.partition_spec())?,
        &out.join(MANIFEST_FILE),
    )?;
    data::save_csv(&test, &out.join(TEST_FILE))?;
    let outcome = train_on(cfg, &train_set, &test, threads)?;
    save_records(&outcome.records, &out.join(METRICS_FILE))?;
    save_model(
        &ModelFile {
            input_shape: outcome.input_shape.clone(),
            model: outcome.state.model.clone(),
        },
        &out.join(MODEL_FILE),
    )?;
    Ok(outcome)
}

/// Top-1 accuracy of a saved model on a CSV dataset.
pub fn cmd_eval(model_path: &Path, data_path: &Path) -> Result<f64> {
    let file = load_model(model_path)?;
    let dataset = data::load_csv(data_path)?;
    let expected: usize = file.input_shape.iter().product();
    if dataset.feature_len() != expected {
        return Err(Error::dim(format!(
            "{} has {} features per row, model expects {expected}",
            data_path.display(),
            dataset.feature_len()
        )));
    }
    let dataset = dataset.with_example_shape(&file.input_shape)?;
    evaluate(&file.model, &dataset)
}

/// Built-in stacks covering every layer type: dense, conv, ReLU, residual,
/// batch norm (train and frozen), group norm, layer norm, instance norm.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<(String, Model, Vec<usize>)>> {
    let mut rng = seed::rng(seed);
    let bn = |c| NormLayerState::new(c, DEFAULT_EMA_ALPHA, DEFAULT_EPSILON).map(Layer::BatchNorm);
    let mlp = Model::new(vec![
        Layer::Dense(DenseLayer::new(3, 4, &mut rng)),
        bn(4)?,
        Layer::Relu,
        Layer::Dense(DenseLayer::new(4, 4, &mut rng)),
        Layer::GroupNorm(GroupNormLayer::new(4, 2, DEFAULT_EPSILON)?),
        Layer::Relu,
        Layer::Dense(DenseLayer::new(4, 4, &mut rng)),
        Layer::GroupNorm(GroupNormLayer::layer_norm(4, DEFAULT_EPSILON)?),
        Layer::Dense(DenseLayer::new(4, 4, &mut rng)),
        Layer::GroupNorm(GroupNormLayer::instance_norm(4, DEFAULT_EPSILON)?),
        Layer::Dense(DenseLayer::new(4, 3, &mut rng)),
    ]);
    let conv = Model::new(vec![
        Layer::Conv2d(Conv2dLayer::new(1, 2, 3, 1, 1, &mut rng)),
        bn(2)?,
        Layer::Relu,
        Layer::Residual(vec![
            Layer::Conv2d(Conv2dLayer::new(2, 2, 3, 1, 1, &mut rng)),
            Layer::GroupNorm(GroupNormLayer::new(2, 2, DEFAULT_EPSILON)?),
            Layer::Relu,
        ]),
        Layer::Conv2d(Conv2dLayer::new(2, 2, 2, 2, 0, &mut rng)),
        Layer::Flatten,
        Layer::Dense(DenseLayer::new(2 * 2 * 2, 2, &mut rng)),
    ]);
    Ok(vec![
        ("dense-norm stack".into(), mlp, vec![5, 3]),
        ("conv stack".into(), conv, vec![3, 1, 4, 4]),
    ])
}

/// Finite-difference checks of every layer in the built-in suite and, when a
/// configuration is given, of the configured model.
pub fn cmd_gradcheck(cfg: Option<&ExperimentConfig>, seed: u64) -> Result<Vec<GradCheck>> {
    let mut suite = gradcheck_suite(seed)?;
    if let Some(cfg) = cfg {
        let (train, _) = load_datasets(cfg)?;
        let spec = cfg.model_spec(train.feature_len(), train.class_count);
        let model = spec.build(&mut seed::rng(seed::derive_seed(seed, Purpose::Init, 0, 0)))?;
        let mut batch = vec![4];
        batch.extend_from_slice(&spec.input_shape);
        suite.push(("configured model".into(), model, batch));
    }
    let mut rng = seed::rng(seed::derive_seed(seed, Purpose::Gradcheck, 0, 0));
    let mut checks = Vec::new();
    for (name, model, shape) in suite {
        for mut c in check_model(&model, &shape, &mut rng)? {
            c.name = format!("{name}: {}", c.name);
            checks.push(c);
        }
    }
    Ok(checks)
}
