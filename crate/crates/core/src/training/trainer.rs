//! The optimisation loop: shuffled batches, two-stage objective, dev
//! evaluation, metrics log, checkpoints, and resume.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::TokenPair;
use crate::error::{RederError, Result};
use crate::eval::{decode_batch, exact_match, DecodeMode};
use crate::model::{Direction, DuplexModel, ModelParams, ModelWeights};
use crate::tensor::Tensor;
use crate::vocab::Vocab;

use super::loss::{build_passes, oriented, stored_grads, AuxTargets, LossBreakdown, LossWeights};
use super::optim::{Adam, AdamConfig, Schedule};
use super::recompute::recompute_grads;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lambda_fba: f64,
    pub lambda_cc: f64,
    /// Fraction of updates trained on the CTC terms alone.
    pub stage1_fraction: f64,
    pub epochs: usize,
    /// Overrides `epochs` when set.
    pub total_updates: Option<u64>,
    /// Sentence pairs per update; each pair is used in both directions.
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub adam: AdamConfig,
    pub label_smoothing: f64,
    pub recompute_activations: bool,
    pub seed: u64,
    /// Simplex training of one direction only.
    pub unidirectional: Option<Direction>,
    /// Batch shards evaluated in parallel; gradients are reduced in shard order.
    pub threads: usize,
    /// Updates between dev evaluations; 0 evaluates once per epoch.
    pub eval_every: u64,
    /// Dev pairs used for evaluation during training.
    pub dev_limit: Option<usize>,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_fba: 0.1,
            lambda_cc: 0.1,
            stage1_fraction: 0.5,
            epochs: 20,
            total_updates: None,
            batch_size: 32,
            peak_lr: 2e-3,
            warmup_steps: 400,
            adam: AdamConfig::default(),
            label_smoothing: 0.0,
            recompute_activations: false,
            seed: 1,
            unidirectional: None,
            threads: 1,
            eval_every: 0,
            dev_limit: None,
            log_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(RederError::Config(m));
        if !(0.0..=1.0).contains(&self.stage1_fraction) {
            return bad(format!("stage1_fraction {} outside [0, 1]", self.stage1_fraction));
        }
        if self.lambda_fba < 0.0 || self.lambda_cc < 0.0 || self.label_smoothing < 0.0 {
            return bad("loss weights must be non-negative".into());
        }
        if self.batch_size == 0 || self.threads == 0 {
            return bad("batch_size and threads must be positive".into());
        }
        if !(self.peak_lr > 0.0) {
            return bad(format!("peak_lr {} must be positive", self.peak_lr));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            peak_lr: self.peak_lr,
            warmup_steps: self.warmup_steps,
        }
    }

    pub fn directions(&self) -> Vec<Direction> {
        match self.unidirectional {
            Some(d) => vec![d],
            None => vec![Direction::Forward, Direction::Reverse],
        }
    }
}

/// Loss breakdown and gradients for one batch, sharded over `threads`.
pub fn compute_grads(
    model: &DuplexModel,
    pairs: &[TokenPair],
    aux: Option<&AuxTargets>,
    w: &LossWeights,
    recompute: bool,
    threads: usize,
    dropout_seed: u64,
) -> Result<(LossBreakdown, ModelParams)> {
    let shards = threads.clamp(1, pairs.len().max(1));
    let bounds: Vec<std::ops::Range<usize>> = (0..shards)
        .map(|s| s * pairs.len() / shards..(s + 1) * pairs.len() / shards)
        .collect();
    let run = |s: usize| -> Result<(LossBreakdown, ModelParams)> {
        let plan = build_passes(pairs, bounds[s].clone(), aux, w, &model.config)?;
        if recompute {
            recompute_grads(model, &plan, w).map(|(b, g, _)| (b, g))
        } else {
            stored_grads(model, &plan, w, Some(dropout_seed ^ (s as u64).wrapping_mul(0x9e37_79b9)))
        }
    };
    let results: Vec<Result<(LossBreakdown, ModelParams)>> = if shards == 1 {
        vec![run(0)]
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..shards).map(|s| scope.spawn(move || run(s))).collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(RederError::Contract("worker panicked".into()))))
                .collect()
        })
    };
    let mut total = LossBreakdown::default();
    let mut grads: Option<ModelParams> = None;
    for r in results {
        let (b, g) = r?;
        total.total += b.total;
        total.ctc_x2y += b.ctc_x2y;
        total.ctc_y2x += b.ctc_y2x;
        total.fba_x2y += b.fba_x2y;
        total.fba_y2x += b.fba_y2x;
        total.cc_x += b.cc_x;
        total.cc_y += b.cc_y;
        total.smoothing += b.smoothing;
        total.fba_skipped += b.fba_skipped;
        total.cc_skipped += b.cc_skipped;
        grads = Some(match grads {
            None => g,
            Some(mut acc) => {
                for (a, x) in acc.iter_mut().zip(g.named().into_iter().map(|(_, t)| t)) {
                    a.add_assign(x)?;
                }
                acc
            }
        });
    }
    total.sequences = pairs.len();
    Ok((total, grads.unwrap_or_else(|| model.params.map(|t| Tensor::zeros(t.shape())))))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DevMetrics {
    pub em_x2y: Option<f64>,
    pub em_y2x: Option<f64>,
}

impl DevMetrics {
    /// Mean over the evaluated directions.
    pub fn score(&self) -> f64 {
        let v: Vec<f64> = [self.em_x2y, self.em_y2x].into_iter().flatten().collect();
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    }
}

pub fn dev_metrics(model: &DuplexModel, dev: &[TokenPair], dirs: &[Direction]) -> Result<DevMetrics> {
    let mut m = DevMetrics::default();
    for &d in dirs {
        let (inputs, refs): (Vec<Vec<usize>>, Vec<Vec<usize>>) = dev
            .iter()
            .map(|p| {
                let (a, b) = oriented(p, d);
                (a.to_vec(), b.to_vec())
            })
            .unzip();
        let hyps = decode_batch(model, &inputs, d, DecodeMode::Greedy)?;
        let em = Some(exact_match(&hyps, &refs));
        match d {
            Direction::Forward => m.em_x2y = em,
            Direction::Reverse => m.em_y2x = em,
        }
    }
    Ok(m)
}

#[derive(Serialize)]
struct TrainRecord<'a> {
    kind: &'static str,
    step: u64,
    epoch: usize,
    stage: u8,
    lr: f64,
    grad_norm: f64,
    #[serde(flatten)]
    loss: &'a LossBreakdown,
}

#[derive(Serialize)]
struct DevRecord<'a> {
    kind: &'static str,
    step: u64,
    epoch: usize,
    #[serde(flatten)]
    dev: &'a DevMetrics,
    best: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters with the best dev score (the last ones without dev data).
    pub best: DuplexModel,
    pub last: DuplexModel,
    pub best_dev: Option<DevMetrics>,
    pub last_dev: Option<DevMetrics>,
    pub steps: u64,
    /// Every metrics record, as written to the log.
    pub log: Vec<String>,
}

pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const METRICS_LOG: &str = "metrics.jsonl";

pub struct Trainer<'a> {
    pub config: TrainConfig,
    pub model: DuplexModel,
    pub vocab: Vocab,
    pub opt: Adam,
    train: &'a [TokenPair],
    dev: &'a [TokenPair],
    out_dir: Option<PathBuf>,
    best: Option<(f64, DuplexModel, DevMetrics)>,
    last_dev: Option<DevMetrics>,
    log: Vec<String>,
    /// Stop after this many total updates (simulated interruption).
    pub stop_at: Option<u64>,
    /// Progress lines on stderr.
    pub verbose: bool,
}

impl<'a> Trainer<'a> {
    pub fn new(
        model: DuplexModel,
        vocab: Vocab,
        train: &'a [TokenPair],
        dev: &'a [TokenPair],
        config: TrainConfig,
        out_dir: Option<&Path>,
    ) -> Result<Self> {
        config.validate()?;
        if config.recompute_activations && model.config.dropout > 0.0 {
            return Err(RederError::Config(
                "recompute_activations cannot be combined with dropout".into(),
            ));
        }
        if train.is_empty() {
            return Err(RederError::Corpus("empty training split".into()));
        }
        let factor = model.config.upsample_factor;
        for p in train {
            if !crate::data::alignable(&p.src, &p.tgt, factor) {
                return Err(RederError::Contract(format!(
                    "training pair with lengths {} and {} cannot be aligned by CTC",
                    p.src.len(),
                    p.tgt.len()
                )));
            }
        }
        let opt = Adam::new(&model.params, config.adam, config.schedule());
        Ok(Self {
            config,
            model,
            vocab,
            opt,
            train,
            dev,
            out_dir: out_dir.map(Path::to_path_buf),
            best: None,
            last_dev: None,
            log: Vec::new(),
            stop_at: None,
            verbose: false,
        })
    }

    pub fn updates_per_epoch(&self) -> u64 {
        self.train.len().div_ceil(self.config.batch_size) as u64
    }

    pub fn total_updates(&self) -> u64 {
        self.config
            .total_updates
            .unwrap_or(self.config.epochs as u64 * self.updates_per_epoch())
    }

    /// First update (0-based) of stage 2.
    pub fn stage2_start(&self) -> u64 {
        (self.config.stage1_fraction * self.total_updates() as f64).ceil() as u64
    }

    fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed.wrapping_mul(1_000_003).wrapping_add(epoch as u64));
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut rng);
        order
    }

    fn loss_weights(&self, step: u64) -> LossWeights {
        LossWeights {
            lambda_fba: self.config.lambda_fba,
            lambda_cc: self.config.lambda_cc,
            label_smoothing: self.config.label_smoothing,
            aux_active: step >= self.stage2_start(),
            only: self.config.unidirectional,
        }
    }

    /// One update on `batch`; returns the breakdown and gradient norm.
    pub fn update(&mut self, batch: &[TokenPair], step: u64) -> Result<(LossBreakdown, f64)> {
        let w = self.loss_weights(step);
        let aux = if w.aux_active && (w.lambda_fba > 0.0 || (w.lambda_cc > 0.0 && w.only.is_none())) {
            Some(AuxTargets::compute(&self.model, batch, &self.config.directions())?)
        } else {
            None
        };
        let (bd, grads) = compute_grads(
            &self.model,
            batch,
            aux.as_ref(),
            &w,
            self.config.recompute_activations,
            self.config.threads,
            self.config.seed ^ step.wrapping_mul(0x2545_f491),
        )?;
        if !bd.total.is_finite() {
            return Err(RederError::NonFinite(format!("loss {} at update {}", bd.total, step + 1)));
        }
        let norm = self.opt.update(&mut self.model.params, &grads)?;
        Ok((bd, norm))
    }

    fn emit(&mut self, line: String) -> Result<()> {
        if let Some(dir) = &self.out_dir {
            let mut f = OpenOptions::new().create(true).append(true).open(dir.join(METRICS_LOG))?;
            writeln!(f, "{line}")?;
        }
        self.log.push(line);
        Ok(())
    }

    fn evaluate(&mut self, step: u64, epoch: usize) -> Result<()> {
        if self.dev.is_empty() {
            return Ok(());
        }
        let n = self.config.dev_limit.unwrap_or(self.dev.len()).min(self.dev.len());
        let m = dev_metrics(&self.model, &self.dev[..n], &self.config.directions())?;
        let score = m.score();
        let improved = self.best.as_ref().map_or(true, |(b, _, _)| score > *b);
        if improved {
            self.best = Some((score, self.model.clone(), m.clone()));
            if let Some(dir) = &self.out_dir {
                let mut ck = Checkpoint::from_model(&self.model, &self.vocab);
                ck.meta = serde_json::json!({ "step": step, "dev": m });
                ck.write(&dir.join(BEST_CHECKPOINT))?;
            }
        }
        if self.verbose {
            eprintln!(
                "step {step} epoch {epoch} dev em x2y {:?} y2x {:?}{}",
                m.em_x2y,
                m.em_y2x,
                if improved { " *" } else { "" }
            );
        }
        let line = serde_json::to_string(&DevRecord {
            kind: "dev",
            step,
            epoch,
            dev: &m,
            best: improved,
        })?;
        self.last_dev = Some(m);
        self.emit(line)
    }

    /// Full checkpoint with optimizer state.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_model(&self.model, &self.vocab);
        for (prefix, moments) in [("adam.m.", &self.opt.m), ("adam.v.", &self.opt.v)] {
            for (name, t) in moments.named() {
                ck.tensors.push((format!("{prefix}{name}"), t.clone()));
            }
        }
        ck.meta = serde_json::json!({
            "step": self.opt.step,
            "train_config": self.config,
            "best_score": self.best.as_ref().map(|b| b.0),
            "best_dev": self.best.as_ref().map(|b| b.2.clone()),
            "last_dev": self.last_dev,
        });
        ck
    }

    /// Restores parameters, optimizer moments, and progress.
    pub fn resume(&mut self, ck: &Checkpoint) -> Result<()> {
        self.model = ck.model(Some(&self.model.config))?;
        let restore = |prefix: &str, template: &ModelParams| -> Result<ModelParams> {
            let vals: Result<Vec<Tensor>> = template
                .named()
                .into_iter()
                .map(|(name, _)| {
                    ck.tensor(&format!("{prefix}{name}"))
                        .cloned()
                        .ok_or_else(|| RederError::Checkpoint(format!("missing optimizer tensor {prefix}{name}")))
                })
                .collect();
            ModelWeights::from_ordered(template.layers.len(), vals?)
                .ok_or_else(|| RederError::Checkpoint("optimizer state size mismatch".into()))
        };
        self.opt.m = restore("adam.m.", &self.model.params)?;
        self.opt.v = restore("adam.v.", &self.model.params)?;
        self.opt.step = ck.meta["step"]
            .as_u64()
            .ok_or_else(|| RederError::Checkpoint("checkpoint has no step".into()))?;
        self.last_dev = serde_json::from_value(ck.meta["last_dev"].clone()).unwrap_or(None);
        if let (Some(score), Some(dev)) = (
            ck.meta["best_score"].as_f64(),
            serde_json::from_value::<Option<DevMetrics>>(ck.meta["best_dev"].clone()).unwrap_or(None),
        ) {
            let best_model = match &self.out_dir {
                Some(dir) if dir.join(BEST_CHECKPOINT).exists() => {
                    Checkpoint::read(&dir.join(BEST_CHECKPOINT))?.model(Some(&self.model.config))?
                }
                _ => self.model.clone(),
            };
            self.best = Some((score, best_model, dev));
        }
        // Keep log records up to the restored step.
        if let Some(dir) = &self.out_dir {
            let path = dir.join(METRICS_LOG);
            if path.exists() {
                let kept: Vec<String> = fs::read_to_string(&path)?
                    .lines()
                    .filter(|l| {
                        serde_json::from_str::<serde_json::Value>(l)
                            .ok()
                            .and_then(|v| v["step"].as_u64())
                            .is_some_and(|s| s <= self.opt.step)
                    })
                    .map(str::to_string)
                    .collect();
                let mut text = kept.join("\n");
                if !text.is_empty() {
                    text.push('\n');
                }
                crate::data::atomic_write(&path, text.as_bytes())?;
                self.log = kept;
            }
        }
        Ok(())
    }

    fn save_last(&self) -> Result<()> {
        if let Some(dir) = &self.out_dir {
            self.checkpoint().write(&dir.join(LAST_CHECKPOINT))?;
        }
        Ok(())
    }

    pub fn run(mut self) -> Result<TrainOutcome> {
        if let Some(dir) = &self.out_dir {
            fs::create_dir_all(dir)?;
            if self.opt.step == 0 {
                crate::data::atomic_write(&dir.join(METRICS_LOG), b"")?;
            }
        }
        let total = self.total_updates();
        let per_epoch = self.updates_per_epoch();
        let eval_every = if self.config.eval_every == 0 {
            per_epoch
        } else {
            self.config.eval_every
        };
        let started = std::time::Instant::now();
        let mut order_epoch = usize::MAX;
        let mut order = Vec::new();
        while self.opt.step < total {
            if self.stop_at.is_some_and(|s| self.opt.step >= s) {
                break;
            }
            let step = self.opt.step;
            let epoch = (step / per_epoch) as usize;
            if epoch != order_epoch {
                order = self.epoch_order(epoch);
                order_epoch = epoch;
            }
            let k = (step % per_epoch) as usize * self.config.batch_size;
            let batch: Vec<TokenPair> = order[k..(k + self.config.batch_size).min(order.len())]
                .iter()
                .map(|&i| self.train[i].clone())
                .collect();
            let (bd, norm) = self.update(&batch, step)?;
            let done = self.opt.step;
            if done % self.config.log_every.max(1) == 0 || done == total {
                let line = serde_json::to_string(&TrainRecord {
                    kind: "train",
                    step: done,
                    epoch,
                    stage: if step >= self.stage2_start() { 2 } else { 1 },
                    lr: self.opt.schedule.lr(done),
                    grad_norm: norm,
                    loss: &bd,
                })?;
                self.emit(line)?;
                if self.verbose {
                    eprintln!(
                        "step {done}/{total} loss {:.4} ctc {:.4}/{:.4} fba {:.4}/{:.4} cc {:.4}/{:.4} ({:.0}s)",
                        bd.total,
                        bd.ctc_x2y,
                        bd.ctc_y2x,
                        bd.fba_x2y,
                        bd.fba_y2x,
                        bd.cc_x,
                        bd.cc_y,
                        started.elapsed().as_secs_f64()
                    );
                }
            }
            if done % eval_every == 0 || done == total {
                self.evaluate(done, epoch)?;
                self.save_last()?;
            }
        }
        if self.opt.step < total {
            self.save_last()?;
        }
        let last = self.model.clone();
        let (best, best_dev) = match self.best.take() {
            Some((_, m, d)) => (m, Some(d)),
            None => (last.clone(), None),
        };
        Ok(TrainOutcome {
            best,
            last,
            best_dev,
            last_dev: self.last_dev,
            steps: self.opt.step,
            log: self.log,
        })
    }
}
