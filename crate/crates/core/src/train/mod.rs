//! Optimization loop, evaluation and the reported indicators.

mod history;
mod metrics;
mod optimizer;

pub use self::history::{export_history, history_from_csv, history_to_csv, history_to_svg, EpochStats, HISTORY_HEADER};
pub use self::metrics::{argmax, compute_metrics, ClassMetrics, ConfusionMatrix};
pub use self::optimizer::{Optimizer, OptimizerConfig, OptimizerKind};

use std::collections::BTreeMap;

use serde::Serialize;

use crate::data::{balance_classes, AugmentPolicy, Batch, BatchLoader, Class, DatasetManifest, Split};
use crate::error::{invalid, Error, Result};
use crate::graph::{FreezePolicy, Graph};
use crate::ops::{softmax_cross_entropy, softmax_cross_entropy_grad};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    pub freeze: FreezePolicy,
    pub augment: AugmentPolicy,
    /// Oversample minority classes of the train split.
    pub balance: bool,
    /// After `epochs`, unfreeze everything and train `fine_tune_epochs` more
    /// at `fine_tune_learning_rate`.
    pub fine_tune: bool,
    pub fine_tune_epochs: usize,
    pub fine_tune_learning_rate: f64,
    /// Square input side.
    pub image_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            optimizer: OptimizerConfig::default(),
            seed: 0,
            freeze: FreezePolicy::FreezeTrunkExceptLast(6),
            augment: AugmentPolicy::default(),
            balance: true,
            fine_tune: false,
            fine_tune_epochs: 10,
            fine_tune_learning_rate: 1e-4,
            image_size: crate::arch::INPUT_SIZE,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(invalid!("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(invalid!("batch size must be at least 1"));
        }
        if self.image_size == 0 {
            return Err(invalid!("image size must be positive"));
        }
        self.optimizer.validate()?;
        self.augment.validate()?;
        if self.fine_tune {
            OptimizerConfig {
                learning_rate: self.fine_tune_learning_rate,
                ..self.optimizer
            }
            .validate()?;
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.epochs + if self.fine_tune { self.fine_tune_epochs } else { 0 }
    }
}

/// One optimizer step on a batch. Returns the batch loss before the update.
/// `epoch` and `batch` only label a divergence error.
pub fn train_step(graph: &mut Graph, optimizer: &mut Optimizer, batch: &Batch, epoch: usize, index: usize) -> Result<f64> {
    let acts = graph.forward_train(&batch.input)?;
    let (loss, probs) = softmax_cross_entropy(acts.output(), &batch.labels)?;
    if !loss.is_finite() {
        return Err(Error::Diverged {
            epoch,
            batch: index,
            loss: loss as f64,
        });
    }
    let dy = softmax_cross_entropy_grad(&probs, &batch.labels)?;
    let grads = graph.backward(&acts, &dy)?;
    drop(acts);
    optimizer.step(graph, &grads)?;
    Ok(loss as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub confusion: ConfusionMatrix,
    /// Mean cross-entropy per sample.
    pub loss: f64,
}

impl Evaluation {
    pub fn accuracy(&self) -> f64 {
        self.confusion.accuracy()
    }
}

/// Inference-mode pass over every batch of `loader`.
pub fn evaluate(graph: &Graph, loader: &BatchLoader) -> Result<Evaluation> {
    evaluate_with(loader, |b| graph.predict(&b.input))
}

/// Accumulates a confusion matrix and mean loss from any logit source.
pub fn evaluate_with(loader: &BatchLoader, mut logits_of: impl FnMut(&Batch) -> Result<crate::Tensor>) -> Result<Evaluation> {
    if loader.is_empty() {
        return Err(invalid!("cannot evaluate an empty split"));
    }
    let mut confusion = ConfusionMatrix::new();
    let mut total = 0.0;
    for batch in loader.ordered() {
        let batch = batch?;
        let logits = logits_of(&batch)?;
        confusion.record_logits(&logits, &batch.classes)?;
        let (loss, _) = softmax_cross_entropy(&logits, &batch.labels)?;
        total += loss as f64 * batch.len() as f64;
    }
    Ok(Evaluation {
        loss: total / loader.len() as f64,
        confusion,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PerClass {
    pub precision: Vec<f64>,
    pub sensitivity: Vec<f64>,
    pub specificity: Vec<f64>,
    pub f1: Vec<f64>,
    pub undefined: Vec<Vec<&'static str>>,
}

/// Evaluation report. Per-class arrays follow the order of `classes`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub split: String,
    pub samples: u64,
    pub accuracy: f64,
    pub loss: f64,
    pub classes: Vec<&'static str>,
    pub per_class: PerClass,
    pub confusion: ConfusionMatrix,
    pub history: Vec<EpochStats>,
    pub provenance: BTreeMap<String, String>,
}

impl EvalReport {
    pub fn new(split: Split, eval: &Evaluation) -> Result<Self> {
        let m = compute_metrics(&eval.confusion)?;
        let col = |f: fn(&ClassMetrics) -> f64| m.iter().map(f).collect();
        Ok(EvalReport {
            split: split.name().to_string(),
            samples: eval.confusion.total(),
            accuracy: eval.accuracy(),
            loss: eval.loss,
            classes: Class::ALL.iter().map(|c| c.name()).collect(),
            per_class: PerClass {
                precision: col(|c| c.precision),
                sensitivity: col(|c| c.sensitivity),
                specificity: col(|c| c.specificity),
                f1: col(|c| c.f1),
                undefined: m.iter().map(|c| c.undefined.clone()).collect(),
            },
            confusion: eval.confusion.clone(),
            history: Vec::new(),
            provenance: BTreeMap::new(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Key/value record of the settings behind a run.
pub fn provenance(config: &TrainConfig) -> BTreeMap<String, String> {
    let mut p = BTreeMap::new();
    let mut put = |k: &str, v: String| {
        p.insert(k.to_string(), v);
    };
    put("freeze_policy", config.freeze.to_string());
    put("optimizer", config.optimizer.kind.to_string());
    put("learning_rate", config.optimizer.learning_rate.to_string());
    put("batch_size", config.batch_size.to_string());
    put("epochs", config.epochs.to_string());
    put("seed", config.seed.to_string());
    put("balance", config.balance.to_string());
    put("fine_tune", config.fine_tune.to_string());
    if config.fine_tune {
        put("fine_tune_epochs", config.fine_tune_epochs.to_string());
        put("fine_tune_learning_rate", config.fine_tune_learning_rate.to_string());
    }
    p
}

pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation accuracy.
    pub best: Graph,
    pub best_epoch: usize,
    /// Parameters after the last epoch.
    pub last: Graph,
    pub history: Vec<EpochStats>,
}

/// Epoch-by-epoch training driver.
pub struct Trainer {
    graph: Graph,
    config: TrainConfig,
    optimizer: Optimizer,
    train: BatchLoader,
    train_eval: BatchLoader,
    val: BatchLoader,
    history: Vec<EpochStats>,
    best: Option<(usize, f64, f64, Graph)>,
    fine_tuning: bool,
}

impl Trainer {
    /// Applies the freeze policy and prepares the loaders. The val split must
    /// not be empty.
    pub fn new(mut graph: Graph, manifest: &DatasetManifest, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        graph.apply_freeze(config.freeze)?;
        let samples = if config.balance {
            balance_classes(manifest, &mut crate::rng::stream(config.seed, "balance", 0))
        } else {
            manifest.split(Split::Train).map(Into::into).collect()
        };
        if samples.is_empty() {
            return Err(invalid!("the train split is empty"));
        }
        let side = config.image_size;
        let train = BatchLoader::new(samples, config.batch_size)?
            .with_size(side, side)
            .with_augmentation(config.augment)?;
        let train_eval = BatchLoader::from_split(manifest, Split::Train, config.batch_size)?.with_size(side, side);
        let val = BatchLoader::from_split(manifest, Split::Val, config.batch_size)?.with_size(side, side);
        if val.is_empty() {
            return Err(invalid!("the val split is empty"));
        }
        Ok(Trainer {
            optimizer: Optimizer::new(config.optimizer)?,
            graph,
            config,
            train,
            train_eval,
            val,
            history: Vec::new(),
            best: None,
            fine_tuning: false,
        })
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn history(&self) -> &[EpochStats] {
        &self.history
    }

    pub fn epochs_done(&self) -> usize {
        self.history.len()
    }

    /// Unfreezes every layer and restarts the optimizer at the fine-tune
    /// learning rate.
    pub fn begin_fine_tune(&mut self) -> Result<()> {
        self.graph.apply_freeze(FreezePolicy::TrainAll)?;
        self.optimizer = Optimizer::new(OptimizerConfig {
            learning_rate: self.config.fine_tune_learning_rate,
            ..self.config.optimizer
        })?;
        self.fine_tuning = true;
        Ok(())
    }

    /// Trains one epoch, then evaluates the train and val splits in
    /// inference mode.
    pub fn run_epoch(&mut self) -> Result<EpochStats> {
        let epoch = self.history.len() + 1;
        for (i, batch) in self.train.epoch(self.config.seed, epoch).enumerate() {
            train_step(&mut self.graph, &mut self.optimizer, &batch?, epoch, i + 1)?;
        }
        let tr = evaluate(&self.graph, &self.train_eval)?;
        let va = evaluate(&self.graph, &self.val)?;
        let stats = EpochStats {
            epoch,
            train_acc: tr.accuracy(),
            val_acc: va.accuracy(),
            train_loss: tr.loss,
            val_loss: va.loss,
        };
        let better = match &self.best {
            None => true,
            Some((_, acc, loss, _)) => stats.val_acc > *acc || (stats.val_acc == *acc && stats.val_loss < *loss),
        };
        if better {
            self.best = Some((epoch, stats.val_acc, stats.val_loss, self.graph.clone()));
        }
        self.history.push(stats);
        Ok(stats)
    }

    /// Runs every configured epoch, including the fine-tune phase.
    pub fn fit(mut self, mut on_epoch: impl FnMut(&EpochStats)) -> Result<TrainOutcome> {
        for e in 0..self.config.total_epochs() {
            if e == self.config.epochs && !self.fine_tuning {
                self.begin_fine_tune()?;
            }
            let stats = self.run_epoch()?;
            on_epoch(&stats);
        }
        let (best_epoch, _, _, best) = self.best.expect("at least one epoch ran");
        Ok(TrainOutcome {
            best,
            best_epoch,
            last: self.graph,
            history: self.history,
        })
    }
}

/// Convenience wrapper around [`Trainer::fit`].
pub fn train(graph: Graph, manifest: &DatasetManifest, config: TrainConfig) -> Result<TrainOutcome> {
    Trainer::new(graph, manifest, config)?.fit(|_| {})
}
