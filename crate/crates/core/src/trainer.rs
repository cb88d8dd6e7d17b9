//! Two-stage training: a warmup on the pairs annotated inside the training
//! label subset (implicit predicates by default), then alternating label
//! imputation on the remaining pairs with joint training under mixup.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{mixup_batch, MixupConfig};
use crate::data::{zero_shot_triplets, Dataset, PairRef, TripletType};
use crate::error::{Error, Result};
use crate::losses::LabelDistribution;
use crate::metrics::{evaluate, fmt_metric, EvalResult};
use crate::mining::{impute_over, refine_label, ImputeMode};
use crate::model::{
    init_classifier, loss_and_grad, mean_target_entropy, read_params, sgd_momentum_step,
    write_params, ClassifierParams, OptimizerState, Sample,
};
use crate::taxonomy::{hex_digest, RelationVocabulary};

/// Which annotations supervise the warmup.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelSubset {
    All,
    Explicit,
    #[default]
    Implicit,
    /// A seeded random subset of `|implicit|` predicates.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub warmup_iterations: usize,
    pub refinement_iterations: usize,
    pub mixup: MixupConfig,
    pub impute_mode: ImputeMode,
    /// Impute and average labels for held-out pairs; otherwise they keep their raw one-hot label.
    pub refinement_enabled: bool,
    pub train_label_subset: LabelSubset,
    /// Seed for [`LabelSubset::Random`].
    pub subset_seed: u64,
    /// Whether pairs annotated outside the subset join the second stage at all.
    pub include_holdout: bool,
    pub seed: u64,
    pub eval_every: usize,
    pub hidden_width: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::paper()
    }
}

impl TrainConfig {
    /// Published hyperparameters.
    pub fn paper() -> Self {
        TrainConfig {
            batch_size: 12,
            learning_rate: 1e-2,
            momentum: 0.9,
            warmup_iterations: 30_000,
            refinement_iterations: 20_000,
            mixup: MixupConfig::default(),
            impute_mode: ImputeMode::Hard,
            refinement_enabled: true,
            train_label_subset: LabelSubset::Implicit,
            subset_seed: 0,
            include_holdout: true,
            seed: 0,
            eval_every: 5_000,
            hidden_width: 64,
        }
    }

    /// Short schedule for desk-scale runs.
    pub fn desk() -> Self {
        TrainConfig {
            batch_size: 32,
            warmup_iterations: 3_000,
            refinement_iterations: 2_000,
            eval_every: 500,
            ..TrainConfig::paper()
        }
    }

    pub fn profile(name: &str) -> Option<Self> {
        match name {
            "paper" => Some(Self::paper()),
            "desk" => Some(Self::desk()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.eval_every == 0 {
            return bad("eval_every must be positive".into());
        }
        self.mixup.validate()
    }

    /// Short stable hash of the full configuration.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex_digest(&bytes)[..16].to_string()
    }

    /// `(batch, lr, momentum, warmup, refinement, alpha)`.
    pub fn headline(&self) -> (usize, f64, f64, usize, usize, f64) {
        (
            self.batch_size,
            self.learning_rate,
            self.momentum,
            self.warmup_iterations,
            self.refinement_iterations,
            self.mixup.alpha,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Warmup,
    Refinement,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Warmup => "warmup",
            Stage::Refinement => "refinement",
        }
    }
}

/// Predicate ids supervising the warmup and their complement.
pub fn label_split(vocabulary: &RelationVocabulary, config: &TrainConfig) -> (Vec<usize>, Vec<usize>) {
    let all: Vec<usize> = (0..vocabulary.len()).collect();
    let train: Vec<usize> = match config.train_label_subset {
        LabelSubset::All => all.clone(),
        LabelSubset::Explicit => vocabulary.explicit_vec(),
        LabelSubset::Implicit => vocabulary.implicit_vec(),
        LabelSubset::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(config.subset_seed);
            let mut shuffled = all.clone();
            shuffled.shuffle(&mut rng);
            let mut picked: Vec<usize> = shuffled
                .into_iter()
                .take(vocabulary.implicit_ids().len())
                .collect();
            picked.sort_unstable();
            picked
        }
    };
    let holdout = all.into_iter().filter(|p| !train.contains(p)).collect();
    (train, holdout)
}

/// Training pairs with `f64` embeddings, split into the warmup pool and the held-out pool.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub embeddings: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub refs: Vec<PairRef>,
    /// Indices of pairs annotated inside the training subset.
    pub warm_pool: Vec<usize>,
    /// Indices of pairs annotated outside it.
    pub holdout_pool: Vec<usize>,
    pub train_labels: Vec<usize>,
    pub holdout_labels: Vec<usize>,
    pub num_classes: usize,
}

impl TrainingData {
    pub fn new(train: &Dataset, config: &TrainConfig) -> Self {
        let (train_labels, holdout_labels) = label_split(&train.vocabulary, config);
        let refs: Vec<PairRef> = train.pair_refs().collect();
        let embeddings = refs.iter().map(|&r| train.pair(r).embedding_f64()).collect();
        let labels: Vec<usize> = refs.iter().map(|&r| train.pair(r).predicate_id).collect();
        let in_train: Vec<bool> = (0..train.vocabulary.len())
            .map(|p| train_labels.contains(&p))
            .collect();
        let (warm_pool, holdout_pool) = (0..labels.len()).partition(|&i| in_train[labels[i]]);
        TrainingData {
            embeddings,
            labels,
            refs,
            warm_pool,
            holdout_pool,
            train_labels,
            holdout_labels,
            num_classes: train.vocabulary.len(),
        }
    }

    /// Pool sampled during the second stage.
    pub fn refinement_pool(&self, config: &TrainConfig) -> Vec<usize> {
        let mut pool = self.warm_pool.clone();
        if config.include_holdout {
            pool.extend_from_slice(&self.holdout_pool);
            pool.sort_unstable();
        }
        pool
    }

    fn one_hot(&self, i: usize) -> Sample {
        Sample::new(
            self.embeddings[i].clone(),
            LabelDistribution::one_hot(self.num_classes, self.labels[i]),
        )
    }
}

/// Uniform draws with replacement from `pool`.
pub fn sample_indices<R: Rng + ?Sized>(rng: &mut R, pool: &[usize], batch_size: usize) -> Vec<usize> {
    (0..batch_size)
        .map(|_| pool[rng.random_range(0..pool.len())])
        .collect()
}

/// One warmup minibatch: one-hot targets from the warmup pool only.
pub fn warmup_batch<R: Rng + ?Sized>(
    data: &TrainingData,
    config: &TrainConfig,
    rng: &mut R,
) -> Vec<Sample> {
    let idx = sample_indices(rng, &data.warm_pool, config.batch_size);
    for &i in &idx {
        assert!(
            data.train_labels.contains(&data.labels[i]),
            "warmup consumed a pair outside the training subset"
        );
    }
    idx.into_iter().map(|i| data.one_hot(i)).collect()
}

/// One second-stage minibatch: imputation for held-out pairs, then mixup.
pub fn refinement_batch<R: Rng + ?Sized>(
    data: &TrainingData,
    pool: &[usize],
    params: &ClassifierParams,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<Vec<Sample>> {
    let idx = sample_indices(rng, pool, config.batch_size);
    let batch = idx
        .into_iter()
        .map(|i| {
            let held_out = data.holdout_labels.contains(&data.labels[i]);
            if held_out && config.refinement_enabled {
                let imputed = impute_over(params, &data.embeddings[i], &data.train_labels, config.impute_mode)?;
                let annotated = LabelDistribution::one_hot(data.num_classes, data.labels[i]);
                Ok(Sample::new(data.embeddings[i].clone(), refine_label(&annotated, &imputed)?))
            } else {
                Ok(data.one_hot(i))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    if config.mixup.enabled {
        mixup_batch(&batch, rng, config.mixup.alpha)
    } else {
        Ok(batch)
    }
}

/// One log line of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub stage: Stage,
    /// Mean of the per-step losses since the previous row (KL reading).
    pub mean_loss: f64,
    pub eval: EvalResult,
    pub wall_ms: u128,
}

pub const LOG_HEADER: &str =
    "iteration,stage,mean_loss,mR@20,mR@50,mR@100,R@20,R@50,R@100,zsR@20,zsR@50,wall_ms";

impl LogRow {
    pub fn csv_row(&self) -> String {
        let e = &self.eval;
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{},{}",
            self.iteration,
            self.stage.as_str(),
            self.mean_loss,
            e.mean_recall[0],
            e.mean_recall[1],
            e.mean_recall[2],
            e.recall[0],
            e.recall[1],
            e.recall[2],
            fmt_metric(e.zero_shot_recall[0]),
            fmt_metric(e.zero_shot_recall[1]),
            self.wall_ms
        )
    }
}

pub fn log_to_csv(rows: &[LogRow]) -> String {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Periodic validation hook used by [`train`].
struct Monitor<'a> {
    val: Option<(&'a Dataset, BTreeSet<TripletType>)>,
    every: usize,
    started: Instant,
    pending: Vec<f64>,
    rows: Vec<LogRow>,
}

impl Monitor<'_> {
    fn record(&mut self, iteration: usize, stage: Stage, loss: f64, params: &ClassifierParams, last: bool) {
        self.pending.push(loss);
        if iteration % self.every != 0 && !last {
            return;
        }
        let Some((val, zs)) = &self.val else {
            self.pending.clear();
            return;
        };
        let mean_loss = self.pending.iter().sum::<f64>() / self.pending.len() as f64;
        self.pending.clear();
        self.rows.push(LogRow {
            iteration,
            stage,
            mean_loss,
            eval: evaluate(params, val, zs),
            wall_ms: self.started.elapsed().as_millis(),
        });
    }
}

fn run_warmup(
    params: &mut ClassifierParams,
    data: &TrainingData,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
    mut on_step: impl FnMut(usize, f64, &ClassifierParams),
) -> Result<()> {
    if config.warmup_iterations == 0 {
        return Ok(());
    }
    if data.warm_pool.is_empty() {
        return Err(Error::Dataset(
            "no training pairs are annotated inside the warmup label subset".into(),
        ));
    }
    let mut opt = OptimizerState::new(params.shape(), config.learning_rate, config.momentum)?;
    for t in 1..=config.warmup_iterations {
        let batch = warmup_batch(data, config, rng);
        let (loss, grads) = loss_and_grad(params, &batch)?;
        sgd_momentum_step(params, &mut opt, &grads);
        on_step(t, loss - mean_target_entropy(&batch), params);
    }
    Ok(())
}

fn run_refinement(
    params: &mut ClassifierParams,
    data: &TrainingData,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
    mut on_step: impl FnMut(usize, f64, &ClassifierParams),
) -> Result<()> {
    if config.refinement_iterations == 0 {
        return Ok(());
    }
    let pool = data.refinement_pool(config);
    if pool.is_empty() {
        return Err(Error::Dataset("second-stage training pool is empty".into()));
    }
    // Momentum buffers start from zero at the stage boundary.
    let mut opt = OptimizerState::new(params.shape(), config.learning_rate, config.momentum)?;
    for t in 1..=config.refinement_iterations {
        let batch = refinement_batch(data, &pool, params, config, rng)?;
        let (loss, grads) = loss_and_grad(params, &batch)?;
        sgd_momentum_step(params, &mut opt, &grads);
        on_step(t, loss - mean_target_entropy(&batch), params);
    }
    Ok(())
}

/// Generator driving minibatch sampling and mixup for a config.
pub fn training_rng(config: &TrainConfig) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    rng
}

/// Fresh classifier sized for `train`.
pub fn initial_params(train: &Dataset, config: &TrainConfig) -> Result<ClassifierParams> {
    init_classifier(
        train.embedding_dim,
        config.hidden_width,
        train.vocabulary.len(),
        config.seed,
    )
}

/// Initializes a classifier and trains it on the warmup pool only.
pub fn warmup_stage(
    train: &Dataset,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ClassifierParams> {
    warmup_stage_observed(train, config, rng, |_, _| {})
}

/// [`warmup_stage`], reporting `(iteration, loss)` after every step.
pub fn warmup_stage_observed(
    train: &Dataset,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
    mut observer: impl FnMut(usize, f64),
) -> Result<ClassifierParams> {
    config.validate()?;
    let data = TrainingData::new(train, config);
    let mut params = initial_params(train, config)?;
    run_warmup(&mut params, &data, config, rng, |t, loss, _| observer(t, loss))?;
    Ok(params)
}

/// Second stage starting from `params`.
pub fn refinement_stage(
    params: ClassifierParams,
    train: &Dataset,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ClassifierParams> {
    refinement_stage_observed(params, train, config, rng, |_, _| {})
}

/// [`refinement_stage`], reporting `(iteration, loss)` after every step.
pub fn refinement_stage_observed(
    params: ClassifierParams,
    train: &Dataset,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
    mut observer: impl FnMut(usize, f64),
) -> Result<ClassifierParams> {
    config.validate()?;
    let data = TrainingData::new(train, config);
    let mut params = params;
    run_refinement(&mut params, &data, config, rng, |t, loss, _| observer(t, loss))?;
    Ok(params)
}

/// Final trained model with enough metadata to reproduce and validate it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ClassifierParams,
    pub vocabulary: RelationVocabulary,
    pub iteration: usize,
    pub stage: Stage,
    pub config: TrainConfig,
}

impl Checkpoint {
    pub fn vocabulary_hash(&self) -> String {
        self.vocabulary.content_hash()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::json!({
            "format": "relmine-checkpoint",
            "vocabulary": self.vocabulary,
            "vocabulary_hash": self.vocabulary_hash(),
            "iteration": self.iteration,
            "stage": self.stage,
            "config": self.config,
        });
        let mut out = Vec::new();
        write_params(&mut out, &self.params, &header).expect("writing to memory");
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let ctx = || format!("writing {}", path.display());
        let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(ctx(), e))?);
        w.write_all(&self.to_bytes()).map_err(|e| Error::io(ctx(), e))?;
        w.flush().map_err(|e| Error::io(ctx(), e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
        let (header, params) = read_params(BufReader::new(file))?;
        let field = |name: &str| {
            header
                .get(name)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("header lacks {name:?}")))
        };
        let parse = |name: &str, e| Error::json(format!("checkpoint {name}"), e);
        let vocabulary: RelationVocabulary =
            serde_json::from_value(field("vocabulary")?).map_err(|e| parse("vocabulary", e))?;
        let stored_hash: String =
            serde_json::from_value(field("vocabulary_hash")?).map_err(|e| parse("vocabulary_hash", e))?;
        if stored_hash != vocabulary.content_hash() {
            return Err(Error::Checkpoint("vocabulary hash does not match stored vocabulary".into()));
        }
        if params.shape().num_classes != vocabulary.len() {
            return Err(Error::Checkpoint("classifier output size differs from vocabulary".into()));
        }
        Ok(Checkpoint {
            params,
            vocabulary,
            iteration: serde_json::from_value(field("iteration")?).map_err(|e| parse("iteration", e))?,
            stage: serde_json::from_value(field("stage")?).map_err(|e| parse("stage", e))?,
            config: serde_json::from_value(field("config")?).map_err(|e| parse("config", e))?,
        })
    }

    /// Errors unless `dataset` uses this checkpoint's vocabulary and embedding size.
    pub fn check_compatible(&self, dataset: &Dataset) -> Result<()> {
        if dataset.vocabulary.content_hash() != self.vocabulary_hash() {
            return Err(Error::Checkpoint(
                "vocabulary hash mismatch between checkpoint and dataset".into(),
            ));
        }
        if dataset.embedding_dim != self.params.shape().input_dim {
            return Err(Error::Dimension {
                expected: self.params.shape().input_dim,
                got: dataset.embedding_dim,
            });
        }
        Ok(())
    }
}

/// Warmup then second stage, validating on `val` every `eval_every` iterations.
pub fn train(train: &Dataset, val: &Dataset, config: &TrainConfig) -> Result<(Checkpoint, Vec<LogRow>)> {
    config.validate()?;
    if train.vocabulary != val.vocabulary {
        return Err(Error::Vocabulary("train and validation vocabularies differ".into()));
    }
    let zs = zero_shot_triplets(train, val)?;
    let data = TrainingData::new(train, config);
    let mut params = initial_params(train, config)?;
    let mut rng = training_rng(config);
    let mut monitor = Monitor {
        val: Some((val, zs)),
        every: config.eval_every,
        started: Instant::now(),
        pending: Vec::new(),
        rows: Vec::new(),
    };
    let warm = config.warmup_iterations;
    let total = warm + config.refinement_iterations;
    run_warmup(&mut params, &data, config, &mut rng, |t, loss, p| {
        monitor.record(t, Stage::Warmup, loss, p, t == total)
    })?;
    run_refinement(&mut params, &data, config, &mut rng, |t, loss, p| {
        monitor.record(warm + t, Stage::Refinement, loss, p, warm + t == total)
    })?;
    if total == 0 {
        monitor.record(0, Stage::Warmup, 0.0, &params, true);
    }
    let checkpoint = Checkpoint {
        params,
        vocabulary: train.vocabulary.clone(),
        iteration: total,
        stage: if config.refinement_iterations > 0 {
            Stage::Refinement
        } else {
            Stage::Warmup
        },
        config: config.clone(),
    };
    Ok((checkpoint, monitor.rows))
}

/// A named grid entry.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub name: String,
    pub config: TrainConfig,
}

impl AblationRow {
    pub fn new(name: impl Into<String>, config: TrainConfig) -> Self {
        AblationRow {
            name: name.into(),
            config,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AblationOutcome {
    pub name: String,
    pub config_hash: String,
    pub config: TrainConfig,
    pub result: std::result::Result<EvalResult, String>,
}

pub const ABLATION_HEADER: &str = "config_hash,name,status,R@20,R@50,R@100,mR@20,mR@50,mR@100,zsR@20,zsR@50,zsR@100,explicit_mR@50,implicit_mR@50,error";

impl AblationOutcome {
    pub fn csv_row(&self) -> String {
        let name = crate::metrics::csv_field(&self.name);
        match &self.result {
            Ok(e) => format!(
                "{},{},ok,{},{},{},",
                self.config_hash,
                name,
                e.csv_row(),
                fmt_metric(e.subset_50.explicit),
                fmt_metric(e.subset_50.implicit)
            ),
            Err(msg) => format!(
                "{},{},error,{},,,{}",
                self.config_hash,
                name,
                vec![""; 9].join(","),
                crate::metrics::csv_field(msg)
            ),
        }
    }
}

/// Trains and evaluates on `test` once per grid row; a failing row does not stop the grid.
pub fn run_ablation(
    grid: &[AblationRow],
    train_set: &Dataset,
    val: &Dataset,
    test: &Dataset,
) -> Vec<AblationOutcome> {
    let zs = zero_shot_triplets(train_set, test);
    grid.par_iter()
        .map(|row| {
            let result = zs
                .as_ref()
                .map_err(|e| e.to_string())
                .and_then(|zs| {
                    train(train_set, val, &row.config)
                        .map(|(ckpt, _)| evaluate(&ckpt.params, test, zs))
                        .map_err(|e| e.to_string())
                });
            AblationOutcome {
                name: row.name.clone(),
                config_hash: row.config.hash(),
                config: row.config.clone(),
                result,
            }
        })
        .collect()
}

/// Rows of the training-label / imputation-target comparison.
pub fn label_subset_grid(base: &TrainConfig) -> Vec<AblationRow> {
    let baseline = |subset| TrainConfig {
        train_label_subset: subset,
        include_holdout: false,
        refinement_enabled: false,
        mixup: MixupConfig {
            enabled: false,
            ..base.mixup
        },
        ..base.clone()
    };
    let ours = |subset| TrainConfig {
        train_label_subset: subset,
        include_holdout: true,
        refinement_enabled: true,
        impute_mode: ImputeMode::Hard,
        mixup: MixupConfig {
            enabled: true,
            ..base.mixup
        },
        ..base.clone()
    };
    vec![
        AblationRow::new("baseline/all", baseline(LabelSubset::All)),
        AblationRow::new("baseline/explicit", baseline(LabelSubset::Explicit)),
        AblationRow::new("baseline/random", baseline(LabelSubset::Random)),
        AblationRow::new("baseline/implicit", baseline(LabelSubset::Implicit)),
        AblationRow::new("ours/random", ours(LabelSubset::Random)),
        AblationRow::new("ours/explicit-impute-on-implicit", ours(LabelSubset::Explicit)),
        AblationRow::new("ours/implicit-impute-on-explicit", ours(LabelSubset::Implicit)),
    ]
}

/// Rows of the mixup / soft-vs-hard / refinement comparison.
pub fn component_grid(base: &TrainConfig) -> Vec<AblationRow> {
    let with = |subset, holdout, mixup: bool, mode, refine| TrainConfig {
        train_label_subset: subset,
        include_holdout: holdout,
        refinement_enabled: refine,
        impute_mode: mode,
        mixup: MixupConfig {
            enabled: mixup,
            ..base.mixup
        },
        ..base.clone()
    };
    use ImputeMode::{Hard, Soft};
    use LabelSubset::{All, Implicit};
    vec![
        AblationRow::new("baseline", with(All, false, false, Hard, false)),
        AblationRow::new("baseline+mixup", with(All, false, true, Hard, false)),
        AblationRow::new("ours/no-mixup/no-refinement", with(Implicit, true, false, Hard, false)),
        AblationRow::new("ours/mixup/no-refinement", with(Implicit, true, true, Hard, false)),
        AblationRow::new("ours/no-mixup/hard", with(Implicit, true, false, Hard, true)),
        AblationRow::new("ours/mixup/soft", with(Implicit, true, true, Soft, true)),
        AblationRow::new("ours/mixup/hard", with(Implicit, true, true, Hard, true)),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticConfig};

    fn small_data() -> (Dataset, Dataset) {
        let cfg = SyntheticConfig {
            num_images: 20,
            num_test_images: 5,
            objects_per_image: [4, 5],
            pairs_per_image: [6, 10],
            num_object_classes: 5,
            ..SyntheticConfig::default()
        };
        let b = generate_synthetic(&cfg).unwrap();
        (b.train.without_oracle(), b.test)
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            warmup_iterations: 30,
            refinement_iterations: 20,
            eval_every: 25,
            hidden_width: 8,
            ..TrainConfig::desk()
        }
    }

    #[test]
    fn defaults_are_published_values() {
        assert_eq!(TrainConfig::default().headline(), (12, 1e-2, 0.9, 30_000, 20_000, 4.0));
        assert_eq!(TrainConfig::desk().headline(), (32, 1e-2, 0.9, 3_000, 2_000, 4.0));
        let d = TrainConfig::default();
        assert!(d.mixup.enabled && d.refinement_enabled);
        assert_eq!(d.impute_mode, ImputeMode::Hard);
    }

    #[test]
    fn zero_warmup_returns_initialization() {
        let (train, _) = small_data();
        let cfg = TrainConfig {
            warmup_iterations: 0,
            ..quick()
        };
        let mut rng = training_rng(&cfg);
        let p = warmup_stage(&train, &cfg, &mut rng).unwrap();
        assert_eq!(p, initial_params(&train, &cfg).unwrap());
    }

    #[test]
    fn warmup_respects_subset() {
        let (train, _) = small_data();
        for subset in [LabelSubset::Implicit, LabelSubset::Explicit, LabelSubset::Random] {
            let cfg = TrainConfig {
                train_label_subset: subset,
                ..quick()
            };
            let data = TrainingData::new(&train, &cfg);
            let mut rng = training_rng(&cfg);
            for _ in 0..20 {
                for s in warmup_batch(&data, &cfg, &mut rng) {
                    assert!(data.train_labels.contains(&s.target.argmax()));
                }
            }
        }
    }

    #[test]
    fn random_split_is_reproducible() {
        let v = crate::taxonomy::default_vg_partition();
        let cfg = TrainConfig {
            train_label_subset: LabelSubset::Random,
            subset_seed: 9,
            ..quick()
        };
        assert_eq!(label_split(&v, &cfg), label_split(&v, &cfg));
        assert_eq!(label_split(&v, &cfg).0.len(), 37);
        let other = TrainConfig { subset_seed: 10, ..cfg.clone() };
        assert_ne!(label_split(&v, &cfg), label_split(&v, &other));
    }

    #[test]
    fn empty_warm_pool_errors() {
        let (mut train, _) = small_data();
        let implicit = train.vocabulary.implicit_ids().clone();
        for img in &mut train.images {
            img.pairs.retain(|p| !implicit.contains(&p.predicate_id));
        }
        let mut rng = training_rng(&quick());
        assert!(warmup_stage(&train, &quick(), &mut rng).is_err());
    }

    #[test]
    fn no_explicit_pairs_still_runs() {
        let (mut train, _) = small_data();
        let explicit = train.vocabulary.explicit_ids().clone();
        for img in &mut train.images {
            img.pairs.retain(|p| !explicit.contains(&p.predicate_id));
        }
        let cfg = quick();
        let mut rng = training_rng(&cfg);
        let p = warmup_stage(&train, &cfg, &mut rng).unwrap();
        refinement_stage(p, &train, &cfg, &mut rng).unwrap();
    }

    #[test]
    fn plain_step_equivalence() {
        let (train, _) = small_data();
        let cfg = TrainConfig {
            mixup: MixupConfig { enabled: false, alpha: 4.0 },
            refinement_enabled: false,
            ..quick()
        };
        let data = TrainingData::new(&train, &cfg);
        let pool = data.refinement_pool(&cfg);
        let params = initial_params(&train, &cfg).unwrap();

        let mut rng_a = training_rng(&cfg);
        let batch = refinement_batch(&data, &pool, &params, &cfg, &mut rng_a).unwrap();
        let mut pa = params.clone();
        let mut oa = OptimizerState::new(pa.shape(), cfg.learning_rate, cfg.momentum).unwrap();
        let (_, g) = loss_and_grad(&pa, &batch).unwrap();
        sgd_momentum_step(&mut pa, &mut oa, &g);

        let mut rng_b = training_rng(&cfg);
        let plain: Vec<Sample> = sample_indices(&mut rng_b, &pool, cfg.batch_size)
            .into_iter()
            .map(|i| {
                let p = train.pair(data.refs[i]);
                Sample::new(p.embedding_f64(), LabelDistribution::one_hot(data.num_classes, p.predicate_id))
            })
            .collect();
        let mut pb = params.clone();
        let mut ob = OptimizerState::new(pb.shape(), cfg.learning_rate, cfg.momentum).unwrap();
        let (_, g) = loss_and_grad(&pb, &plain).unwrap();
        sgd_momentum_step(&mut pb, &mut ob, &g);

        assert_eq!(pa.values(), pb.values());
        assert_eq!(rng_a.random::<u64>(), rng_b.random::<u64>());
    }

    #[test]
    fn held_out_targets_are_refined() {
        let (train, _) = small_data();
        let cfg = TrainConfig {
            mixup: MixupConfig { enabled: false, alpha: 4.0 },
            ..quick()
        };
        let data = TrainingData::new(&train, &cfg);
        let pool = data.refinement_pool(&cfg);
        let params = initial_params(&train, &cfg).unwrap();
        let mut rng = training_rng(&cfg);
        let mut saw_refined = false;
        for _ in 0..10 {
            for s in refinement_batch(&data, &pool, &params, &cfg, &mut rng).unwrap() {
                let nz: Vec<f64> = s.target.probs().iter().copied().filter(|p| *p > 0.0).collect();
                if nz.len() == 2 {
                    assert_eq!(nz, vec![0.5, 0.5]);
                    saw_refined = true;
                } else {
                    assert_eq!(nz, vec![1.0]);
                }
            }
        }
        assert!(saw_refined);
    }

    #[test]
    fn soft_mode_targets_spread_over_implicit() {
        let (train, _) = small_data();
        let cfg = TrainConfig {
            mixup: MixupConfig { enabled: false, alpha: 4.0 },
            impute_mode: ImputeMode::Soft,
            ..quick()
        };
        let data = TrainingData::new(&train, &cfg);
        let pool = data.refinement_pool(&cfg);
        let params = initial_params(&train, &cfg).unwrap();
        let mut rng = training_rng(&cfg);
        let batch = refinement_batch(&data, &pool, &params, &cfg, &mut rng).unwrap();
        let implicit = train.vocabulary.implicit_ids();
        for s in batch {
            let imp_mass: f64 = implicit.iter().map(|&i| s.target.probs()[i]).sum();
            let annotated = s.target.argmax();
            if !implicit.contains(&annotated) {
                assert!((imp_mass - 0.5).abs() < 1e-12);
                assert!(s.target.probs().iter().filter(|p| **p > 0.0).count() > 2);
            }
        }
    }

    #[test]
    fn train_is_deterministic_and_logs() {
        let (train_set, val) = small_data();
        let cfg = quick();
        let (a, log_a) = train(&train_set, &val, &cfg).unwrap();
        let (b, log_b) = train(&train_set, &val, &cfg).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_eq!(log_a.len(), 2);
        assert_eq!(log_a[0].iteration, 25);
        assert_eq!(log_a[1].iteration, 50);
        assert_eq!(log_a[1].stage, Stage::Refinement);
        for (x, y) in log_a.iter().zip(&log_b) {
            assert_eq!(x.eval, y.eval);
            assert_eq!(x.mean_loss, y.mean_loss);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let (train_set, val) = small_data();
        let (ckpt, _) = train(&train_set, &val, &quick()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(std::fs::read(&path).unwrap(), back.to_bytes());
        back.check_compatible(&val).unwrap();
    }

    #[test]
    fn ablation_matches_direct_run_and_continues_on_error() {
        let (train_set, val) = small_data();
        let good = AblationRow::new("good", quick());
        let bad = AblationRow::new("bad", TrainConfig { batch_size: 0, ..quick() });
        let out = run_ablation(&[good.clone(), bad], &train_set, &val, &val);
        assert_eq!(out.len(), 2);
        let (ckpt, _) = train(&train_set, &val, &good.config).unwrap();
        let zs = zero_shot_triplets(&train_set, &val).unwrap();
        assert_eq!(out[0].result.as_ref().unwrap(), &evaluate(&ckpt.params, &val, &zs));
        assert!(out[1].result.is_err());
        assert_eq!(out[1].csv_row().split(',').count(), ABLATION_HEADER.split(',').count());
        assert_eq!(out[0].csv_row().split(',').count(), ABLATION_HEADER.split(',').count());
    }
}
