//! Teacher-forced training with token-budget batches, early stopping and
//! best-checkpoint retention.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::optim::{adam_step, lr_schedule, AdamConfig, AdamState};
use super::transformer::{Batch, EncodedPair, Model};
use super::vocab::Vocab;
use super::{Mode, ModelConfig, ModelError, Result};
use crate::decode::{translate_all, Strategy};
use crate::eval::{corpus_bleu, Smoothing};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub warmup_steps: u64,
    /// Source plus target tokens per batch.
    pub batch_tokens: usize,
    pub max_epochs: usize,
    /// Stop after this many epochs without a validation improvement.
    pub patience: Option<usize>,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl TrainConfig {
    /// lr 5e-4, 4000 warmup steps, 4096-token batches, 100 epochs.
    pub fn string_tasks(seed: u64) -> Self {
        TrainConfig {
            lr_max: 5e-4,
            warmup_steps: 4000,
            batch_tokens: 4096,
            max_epochs: 100,
            patience: None,
            seed,
            adam: AdamConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::InvalidTrainConfig(m.to_string()));
        if !(self.lr_max > 0.0 && self.lr_max.is_finite()) {
            return bad("lr_max must be positive");
        }
        if self.warmup_steps == 0 {
            return bad("warmup_steps must be at least 1");
        }
        if self.batch_tokens == 0 {
            return bad("batch_tokens must be positive");
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || a.eps <= 0.0 {
            return bad("Adam needs betas in [0, 1) and eps > 0");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ValidMetric {
    Loss,
    Accuracy,
    Bleu,
}

impl ValidMetric {
    pub fn higher_is_better(self) -> bool {
        !matches!(self, ValidMetric::Loss)
    }
}

impl fmt::Display for ValidMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ValidMetric::Loss => "loss",
            ValidMetric::Accuracy => "acc",
            ValidMetric::Bleu => "bleu",
        })
    }
}

impl FromStr for ValidMetric {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "loss" => Ok(ValidMetric::Loss),
            "acc" | "accuracy" => Ok(ValidMetric::Accuracy),
            "bleu" => Ok(ValidMetric::Bleu),
            _ => Err(format!("unknown validation metric {s:?} (expected loss, acc or bleu)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimizer steps taken so far in this run.
    pub step: u64,
    /// Mean training token loss; `None` for the pre-training evaluation.
    pub train_loss: Option<f64>,
    pub valid_metric: f64,
    pub lr: f64,
}

pub enum Init {
    Fresh,
    Checkpoint(Box<Checkpoint>),
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Best-by-validation parameters; its `metric_log` covers the whole run.
    pub best: Checkpoint,
    pub epochs_run: usize,
    pub stopped_early: bool,
}

/// Sorts by (target length, source length) and packs greedily up to
/// `batch_tokens` source+target tokens. Returns example indices per batch.
pub fn make_batches(data: &[EncodedPair], batch_tokens: usize) -> Result<Vec<Vec<usize>>> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.sort_by_key(|&i| (data[i].tgt.len(), data[i].src.len(), i));
    let mut batches = Vec::new();
    let mut cur = Vec::new();
    let mut used = 0;
    for i in order {
        let n = data[i].num_tokens();
        if n > batch_tokens {
            return Err(ModelError::InvalidTrainConfig(format!(
                "batch_tokens={batch_tokens} is smaller than an example of {n} tokens"
            )));
        }
        if used + n > batch_tokens {
            batches.push(std::mem::take(&mut cur));
            used = 0;
        }
        cur.push(i);
        used += n;
    }
    if !cur.is_empty() {
        batches.push(cur);
    }
    Ok(batches)
}

/// Patience bookkeeping over a per-epoch validation metric.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: Option<usize>,
    higher_is_better: bool,
    best: Option<f64>,
    pub best_epoch: usize,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: Option<usize>, higher_is_better: bool) -> Self {
        EarlyStopping { patience, higher_is_better, best: None, best_epoch: 0, since_best: 0 }
    }

    /// Records an epoch's value; true if it is a new best.
    pub fn observe(&mut self, epoch: usize, value: f64) -> bool {
        let better = match self.best {
            None => true,
            Some(b) if self.higher_is_better => value > b,
            Some(b) => value < b,
        };
        if better {
            self.best = Some(value);
            self.best_epoch = epoch;
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        better
    }

    pub fn should_stop(&self) -> bool {
        self.patience.is_some_and(|p| self.since_best >= p)
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }
}

/// Validation metric of `model` on `data`: token-weighted loss, or greedy-decoded
/// exact-match accuracy (fraction) or BLEU.
pub fn validation_metric(model: &Model<f32>, data: &[EncodedPair], metric: ValidMetric, batch_tokens: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(ModelError::EmptyInput);
    }
    match metric {
        ValidMetric::Loss => {
            let (mut sum, mut count) = (0.0, 0usize);
            for idx in make_batches(data, batch_tokens)? {
                let batch = Batch::teacher_forced(idx.iter().map(|&i| &data[i]));
                let (loss, n) = model.loss(&batch, Mode::Eval)?;
                sum += loss * n as f64;
                count += n;
            }
            Ok(sum / count as f64)
        }
        ValidMetric::Accuracy | ValidMetric::Bleu => {
            let srcs: Vec<Vec<u32>> = data.iter().map(|p| p.src.clone()).collect();
            let hyps: Vec<Vec<u32>> = translate_all(model, &srcs, &Strategy::Greedy)?.into_iter().map(|h| h.tokens).collect();
            let refs: Vec<Vec<u32>> = data.iter().map(|p| p.tgt.clone()).collect();
            if metric == ValidMetric::Accuracy {
                Ok(hyps.iter().zip(&refs).filter(|(h, r)| h == r).count() as f64 / data.len() as f64)
            } else {
                corpus_bleu(&hyps, &refs, 4, Smoothing::None).map_err(|e| ModelError::InvalidTrainConfig(e.to_string()))
            }
        }
    }
}

/// Trains from scratch or from a checkpoint.
///
/// The validation metric is computed once before the first update (epoch 0)
/// and after every epoch. On a warm start the epoch-0 value competes for best
/// checkpoint and counts toward patience; on a fresh start it is only logged.
/// Warm starts reset the optimizer moments and the learning-rate schedule.
#[allow(clippy::too_many_arguments)]
pub fn train(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    vocab: &Vocab,
    train_data: &[EncodedPair],
    valid_data: &[EncodedPair],
    metric: ValidMetric,
    init: Init,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    model_cfg.validate()?;
    cfg.validate()?;
    if train_data.is_empty() || valid_data.is_empty() {
        return Err(ModelError::EmptyInput);
    }
    if vocab.len() != model_cfg.vocab_size {
        return Err(ModelError::InvalidConfig(format!("vocab has {} entries, config says {}", vocab.len(), model_cfg.vocab_size)));
    }
    let longest = train_data.iter().chain(valid_data).map(EncodedPair::num_tokens).max().unwrap_or(0);
    if cfg.batch_tokens < longest {
        return Err(ModelError::InvalidTrainConfig(format!(
            "batch_tokens={} is smaller than the longest example ({longest} tokens)",
            cfg.batch_tokens
        )));
    }
    let (mut model, warm) = match init {
        Init::Fresh => (Model::<f32>::new(model_cfg.clone(), cfg.seed)?, false),
        Init::Checkpoint(ck) => {
            if ck.config != *model_cfg || ck.vocab != *vocab {
                return Err(ModelError::InvalidConfig("checkpoint config or vocabulary differs from the requested one".into()));
            }
            (ck.model()?, true)
        }
    };
    let mut adam = AdamState::new(&model.params);
    let mut stopper = EarlyStopping::new(cfg.patience, metric.higher_is_better());
    let mut log = Vec::new();
    let snapshot = |model: &Model<f32>, adam: &AdamState<f32>, epoch: usize| Checkpoint {
        config: model.config.clone(),
        vocab: vocab.clone(),
        params: model.params.clone(),
        adam: adam.clone(),
        metric_log: Vec::new(),
        best_epoch: epoch,
    };

    let v0 = validation_metric(&model, valid_data, metric, cfg.batch_tokens)?;
    let rec = EpochRecord { epoch: 0, step: 0, train_loss: None, valid_metric: v0, lr: 0.0 };
    on_epoch(&rec);
    log.push(rec);
    let mut best = snapshot(&model, &adam, 0);
    if warm {
        stopper.observe(0, v0);
    }

    let batches: Vec<Batch> = make_batches(train_data, cfg.batch_tokens)?
        .into_iter()
        .map(|idx| Batch::teacher_forced(idx.iter().map(|&i| &train_data[i])))
        .collect();
    let mut order: Vec<usize> = (0..batches.len()).collect();
    let diverged = |epoch: usize, step: u64, best: &Checkpoint, log: &[EpochRecord]| {
        let mut last_good = best.clone();
        last_good.metric_log = log.to_vec();
        ModelError::Diverged { epoch, step, last_good: Box::new(last_good) }
    };

    let mut epochs_run = 0;
    let mut stopped_early = false;
    for epoch in 1..=cfg.max_epochs {
        order.sort_unstable();
        order.shuffle(&mut seed::rng(cfg.seed, &[seed::tag("shuffle"), epoch as u64]));
        let (mut loss_sum, mut tokens) = (0.0, 0usize);
        let mut lr = 0.0;
        for &bi in &order {
            let step = adam.step + 1;
            lr = lr_schedule(step, cfg.lr_max, cfg.warmup_steps);
            let mode = Mode::Train { seed: seed::derive(cfg.seed, &[seed::tag("dropout"), step]) };
            let (loss, n, grad) = match model.loss_and_grad(&batches[bi], mode) {
                Ok(r) => r,
                Err(ModelError::NonFinite(_)) => return Err(diverged(epoch, step, &best, &log)),
                Err(e) => return Err(e),
            };
            match adam_step(&mut model.params, &grad, &mut adam, lr, &cfg.adam) {
                Ok(()) => {}
                Err(ModelError::NonFinite(_)) => return Err(diverged(epoch, step, &best, &log)),
                Err(e) => return Err(e),
            }
            loss_sum += loss * n as f64;
            tokens += n;
        }
        let v = validation_metric(&model, valid_data, metric, cfg.batch_tokens)?;
        if !v.is_finite() {
            return Err(diverged(epoch, adam.step, &best, &log));
        }
        let rec = EpochRecord { epoch, step: adam.step, train_loss: Some(loss_sum / tokens as f64), valid_metric: v, lr };
        on_epoch(&rec);
        log.push(rec);
        epochs_run = epoch;
        if stopper.observe(epoch, v) {
            best = snapshot(&model, &adam, epoch);
        }
        if stopper.should_stop() {
            stopped_early = epoch < cfg.max_epochs;
            break;
        }
    }
    best.metric_log = log;
    Ok(TrainOutcome { best, epochs_run, stopped_early })
}
