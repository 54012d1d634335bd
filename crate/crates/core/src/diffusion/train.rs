//! AdamW training with linear warmup and cosine decay.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{add_noise, NoiseSchedule};
use crate::denoiser::{batch_loss, loss_and_grad, DenoiserModel, ExampleInput, ModelMeta, Prediction, TrainExample};
use crate::error::{GdrError, Result};
use crate::latentdata::{CondSeq, Corpus, CorpusItem, LatentSeq, Split};
use crate::numerics::{gaussian_mat, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// ‖z₀ − G(z_τ, τ, c)‖²
    Sample,
    /// ‖ε − G(z_τ, τ, c)‖²
    Epsilon,
    /// ‖z₀ − G(mask, 1, c)‖²
    Regression,
}

impl Objective {
    pub fn prediction(self) -> Prediction {
        match self {
            Objective::Sample => Prediction::Sample,
            Objective::Epsilon => Prediction::Epsilon,
            Objective::Regression => Prediction::Regression,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub objective: Objective,
    pub steps: usize,
    pub batch: usize,
    pub lr_peak: f64,
    pub warmup_steps: usize,
    /// Probability of replacing an item's conditioning with the null sequence.
    pub cond_mask_prob: f64,
    /// Probability of keeping a single random token of a multi-token
    /// conditioning sequence, so partial prompts stay in distribution.
    pub token_drop_prob: f64,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Validation loss cadence in steps; 0 disables validation.
    pub eval_every: usize,
    /// Evaluations without improvement before stopping; 0 disables early stopping.
    pub patience: usize,
    pub log_every: usize,
}

impl TrainConfig {
    /// Desk-scale defaults.
    pub fn desk() -> Self {
        Self {
            objective: Objective::Sample,
            steps: 3000,
            batch: 64,
            lr_peak: 1e-3,
            warmup_steps: 300,
            cond_mask_prob: 0.1,
            token_drop_prob: 0.25,
            seed: 0,
            adam: AdamConfig::default(),
            eval_every: 200,
            patience: 5,
            log_every: 10,
        }
    }

    /// Full-scale protocol: 100k steps, batch 256, warmup to
    /// 1e-4 over 5000 steps, 10% conditioning dropout.
    pub fn full() -> Self {
        Self {
            steps: 100_000,
            batch: 256,
            lr_peak: 1e-4,
            warmup_steps: 5000,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(GdrError::InvalidSpec(m.to_string()));
        if self.steps == 0 || self.batch == 0 {
            return bad("steps and batch must be positive");
        }
        if self.warmup_steps > self.steps {
            return bad("warmup_steps must not exceed steps");
        }
        if !(0.0..=1.0).contains(&self.cond_mask_prob) || !(0.0..=1.0).contains(&self.token_drop_prob) {
            return bad("probabilities must lie in [0, 1]");
        }
        if !(self.lr_peak > 0.0 && self.lr_peak.is_finite()) {
            return bad("lr_peak must be positive");
        }
        if self.log_every == 0 {
            return bad("log_every must be positive");
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        format!("{:08x}", crc32fast::hash(&json))
    }
}

/// Learning rate at 1-based `step`: linear warmup to the peak, then cosine
/// decay reaching 0 at the final step.
pub fn lr_at(cfg: &TrainConfig, step: usize) -> f64 {
    if cfg.warmup_steps > 0 && step <= cfg.warmup_steps {
        return cfg.lr_peak * step as f64 / cfg.warmup_steps as f64;
    }
    let span = (cfg.steps - cfg.warmup_steps).max(1) as f64;
    let progress = ((step - cfg.warmup_steps) as f64 / span).min(1.0);
    0.5 * cfg.lr_peak * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub log: Vec<LogEntry>,
    /// Mean batch loss over the first logging window.
    pub initial_loss: f64,
    /// Mean batch loss over the last logging window.
    pub final_train_loss: f64,
    pub final_val_loss: Option<f64>,
    pub best_val_loss: Option<f64>,
    pub early_stop_step: Option<usize>,
    pub steps_run: usize,
    #[serde(skip)]
    pub wall_time_secs: f64,
}

impl TrainReport {
    /// One JSON object per line.
    pub fn write_jsonl(&self, mut out: impl Write) -> Result<()> {
        for e in &self.log {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, cfg: &AdamConfig, lr: f64, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * (mh / (vh.sqrt() + cfg.eps) + cfg.weight_decay * params[i]);
        }
    }
}

fn make_example(
    item: &CorpusItem,
    cfg: &TrainConfig,
    sched: &NoiseSchedule,
    rng: &mut SeededRng,
    augment: bool,
) -> Result<TrainExample> {
    let z0 = &item.audio;
    let mut cond = item.cond.clone();
    if augment {
        if cond.len() > 1 && rng.bernoulli(cfg.token_drop_prob) {
            cond = cond.select(&[rng.below(cond.len())])?;
        }
        if rng.bernoulli(cfg.cond_mask_prob) {
            cond = CondSeq::null(cond.dim());
        }
    }
    let step = 1 + rng.below(sched.steps());
    let eps = LatentSeq::new(gaussian_mat(rng, z0.len(), z0.dim()))?;
    Ok(match cfg.objective {
        Objective::Sample => TrainExample {
            input: ExampleInput::Latent(add_noise(z0, step, &eps, sched)?),
            step,
            target: z0.clone(),
            cond,
        },
        Objective::Epsilon => TrainExample {
            input: ExampleInput::Latent(add_noise(z0, step, &eps, sched)?),
            step,
            target: eps,
            cond,
        },
        Objective::Regression => TrainExample {
            input: ExampleInput::Mask,
            step: 1,
            target: z0.clone(),
            cond,
        },
    })
}

/// Trains `model` on the corpus train split. Batches draw items with
/// replacement, a uniform step in 1..=N and fresh noise per item. When
/// `log` is given, each log entry is also written there as a JSON line.
pub fn train(
    model: &DenoiserModel,
    corpus: &Corpus,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<(DenoiserModel, TrainReport)> {
    cfg.validate()?;
    let started = Instant::now();
    let train_items: Vec<&CorpusItem> = corpus.split(Split::Train).collect();
    if train_items.is_empty() {
        return Err(GdrError::EmptyInput("corpus has no training items".into()));
    }
    if cfg.objective == Objective::Regression {
        let mask_len = model.dims().mask_len;
        if let Some(bad) = train_items.iter().find(|it| it.audio.len() != mask_len) {
            return Err(GdrError::ShapeError(format!(
                "regression needs mask frames matching item length: mask {mask_len}, item {} has {}",
                bad.id,
                bad.audio.len()
            )));
        }
    }

    // fixed validation batch
    let val_items: Vec<&CorpusItem> = corpus.split(Split::Val).collect();
    let val_batch: Vec<TrainExample> = if cfg.eval_every > 0 && !val_items.is_empty() {
        let mut vrng = SeededRng::new(cfg.seed, 0xfa1);
        val_items
            .iter()
            .map(|it| make_example(it, cfg, sched, &mut vrng, false))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };

    let mut model = model.clone();
    let mut params = model.params().to_vec();
    let mut adam = Adam::new(params.len());
    let mut rng = SeededRng::new(cfg.seed, 0x7a1);

    let mut entries = Vec::new();
    let mut window = Vec::with_capacity(cfg.log_every);
    let mut initial_loss = None;
    let mut last_window = f64::NAN;
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut stale = 0usize;
    let mut early_stop_step = None;
    let mut last_val = None;
    let mut steps_run = 0;

    let mut emit = |e: LogEntry, entries: &mut Vec<LogEntry>| -> Result<()> {
        if let Some(w) = log.as_deref_mut() {
            serde_json::to_writer(&mut *w, &e)?;
            w.write_all(b"\n")?;
        }
        entries.push(e);
        Ok(())
    };

    for step in 1..=cfg.steps {
        let batch: Vec<TrainExample> = (0..cfg.batch)
            .map(|_| {
                let it = train_items[rng.below(train_items.len())];
                make_example(it, cfg, sched, &mut rng, true)
            })
            .collect::<Result<_>>()?;
        model.set_params(&params)?;
        let (loss, grad) = loss_and_grad(&model, &batch)?;
        if !loss.is_finite() {
            return Err(GdrError::NumericalFailure(format!("loss diverged at step {step}")));
        }
        let lr = lr_at(cfg, step);
        adam.step(&cfg.adam, lr, &mut params, &grad);
        steps_run = step;

        window.push(loss);
        if window.len() == cfg.log_every || step == cfg.steps {
            let mean = window.iter().sum::<f64>() / window.len() as f64;
            initial_loss.get_or_insert(mean);
            last_window = mean;
            window.clear();
            emit(
                LogEntry {
                    step,
                    loss: mean,
                    lr,
                    split: Split::Train,
                },
                &mut entries,
            )?;
        }

        if !val_batch.is_empty() && (step % cfg.eval_every == 0 || step == cfg.steps) {
            model.set_params(&params)?;
            let val = batch_loss(&model, &val_batch)?;
            last_val = Some(val);
            emit(
                LogEntry {
                    step,
                    loss: val,
                    lr,
                    split: Split::Val,
                },
                &mut entries,
            )?;
            if best.as_ref().is_none_or(|(b, _)| val < *b) {
                best = Some((val, params.clone()));
                stale = 0;
            } else {
                stale += 1;
                if cfg.patience > 0 && stale >= cfg.patience {
                    early_stop_step = Some(step);
                    break;
                }
            }
        }
    }

    let best_val_loss = best.as_ref().map(|(b, _)| *b);
    if let (Some(_), Some((_, p))) = (early_stop_step, best) {
        params = p;
    }
    model.set_params(&params)?;
    model.quantize();
    model.set_meta(ModelMeta {
        prediction: cfg.objective.prediction(),
        schedule_hash: Some(sched.digest()),
        train_digest: Some(cfg.digest()),
    });
    let report = TrainReport {
        log: entries,
        initial_loss: initial_loss.unwrap_or(f64::NAN),
        final_train_loss: last_window,
        final_val_loss: last_val,
        best_val_loss,
        early_stop_step,
        steps_run,
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    Ok((model, report))
}
