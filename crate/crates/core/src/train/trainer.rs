use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{adam_step, clip_global_norm, early_stop_check, lr_schedule, AdamState};
use crate::codec::{read_file, write_file, Reader, Writer};
use crate::datagen::ManifestRecord;
use crate::error::{Error, Result};
use crate::model::{forward_graph, save_checkpoint, ModelConfig, ModelParams};
use crate::parallel::Executor;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const RESUME_STATE: &str = "resume.state";
pub const TRAIN_LOG: &str = "train_log.jsonl";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Squared error averaged over samples.
    #[default]
    Mean,
    /// Squared error summed over samples.
    Sum,
}

/// Squared error between an estimate and its target, both `1 × n`.
pub fn mse_loss(tape: &mut Tape, estimate: Var, target: Var, kind: LossKind) -> Result<Var> {
    tape.squared_error(estimate, target, kind == LossKind::Mean)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs_max: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub early_stop_patience: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Write resume state every this many epochs; 0 disables it.
    pub checkpoint_every: usize,
    pub loss: LossKind,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs_max: 200,
            lr_start: 1e-4,
            lr_end: 1e-8,
            early_stop_patience: 10,
            batch_size: 4,
            seed: 0,
            checkpoint_every: 1,
            loss: LossKind::Mean,
            grad_clip: Some(5.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_start > self.lr_end && self.lr_end > 0.0) {
            return Err(Error::Config(format!(
                "need lr_start > lr_end > 0, got {} and {}",
                self.lr_start, self.lr_end
            )));
        }
        if self.early_stop_patience == 0 {
            return Err(Error::Config(
                "early_stop_patience must be at least 1".into(),
            ));
        }
        if self.epochs_max == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "epochs_max and batch_size must be positive".into(),
            ));
        }
        if let Some(c) = self.grad_clip {
            if c.is_nan() || c <= 0.0 {
                return Err(Error::Config(format!("grad_clip {c} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub wall_seconds: f64,
    /// Set on the epoch holding the lowest validation loss so far.
    pub best: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn val_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.val_loss).collect()
    }

    pub fn best_epoch(&self) -> Option<&EpochRecord> {
        self.epochs.iter().rev().find(|e| e.best)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e).expect("plain record"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> std::result::Result<Self, serde_json::Error> {
        let epochs = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        Ok(TrainLog { epochs })
    }
}

/// One training utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    pub far: Vec<f64>,
    pub mixture: Vec<f64>,
    pub near: Vec<f64>,
}

pub fn load_examples(
    records: &[ManifestRecord],
    base: &Path,
    exec: &Executor,
) -> Result<Vec<Example>> {
    exec.map(records, |r| {
        let (far, mixture, near) = r.read_signals(base).map_err(|e| e.for_item(&r.id))?;
        Ok(Example {
            id: r.id.clone(),
            far,
            mixture,
            near,
        })
    })
    .into_iter()
    .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitOutcome {
    pub best_epoch: Option<usize>,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

/// Owns the parameters and optimizer; gradients are computed per example
/// (in parallel when the executor allows) and reduced in example order.
#[derive(Debug)]
pub struct Trainer {
    model: ModelConfig,
    config: TrainConfig,
    params: ModelParams<Tensor>,
    adam: AdamState,
    log: TrainLog,
    next_epoch: usize,
    best: Option<(f64, ModelParams<Tensor>)>,
    exec: Executor,
}

impl Trainer {
    pub fn new(
        model: ModelConfig,
        config: TrainConfig,
        params: ModelParams<Tensor>,
        exec: Executor,
    ) -> Result<Self> {
        model.validate()?;
        config.validate()?;
        let adam = AdamState::new(params.count());
        Ok(Trainer {
            model,
            config,
            params,
            adam,
            log: TrainLog::default(),
            next_epoch: 0,
            best: None,
            exec,
        })
    }

    /// Fresh trainer with parameters initialized from the training seed.
    pub fn from_seed(model: ModelConfig, config: TrainConfig, exec: Executor) -> Result<Self> {
        let params = ModelParams::init(&model, config.seed);
        Self::new(model, config, params, exec)
    }

    pub fn params(&self) -> &ModelParams<Tensor> {
        &self.params
    }

    pub fn model_config(&self) -> &ModelConfig {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn log(&self) -> &TrainLog {
        &self.log
    }

    pub fn adam(&self) -> &AdamState {
        &self.adam
    }

    pub fn next_epoch(&self) -> usize {
        self.next_epoch
    }

    /// Loss and flat gradient for one example.
    pub fn loss_and_grads(&self, ex: &Example) -> Result<(f64, Vec<f64>)> {
        let mut tape = Tape::new();
        let p = self.params.to_tape(&mut tape, true);
        let (loss, _) = self.record_loss(&mut tape, &p, ex)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFinite {
                item: ex.id.clone(),
            });
        }
        tape.backward(loss)?;
        let grads = p.grads(&tape)?.flatten();
        Ok((value, grads))
    }

    fn record_loss(
        &self,
        tape: &mut Tape,
        p: &ModelParams<Var>,
        ex: &Example,
    ) -> Result<(Var, usize)> {
        if ex.far.len() != ex.mixture.len() || ex.near.len() != ex.mixture.len() {
            return Err(Error::dim(
                "train",
                format!("item `{}` has mismatched lengths", ex.id),
            ));
        }
        let mix = tape.constant(Tensor::row(ex.mixture.clone()));
        let far = tape.constant(Tensor::row(ex.far.clone()));
        let g = forward_graph(tape, p, &self.model, mix, far)?;
        let n = tape.shape(g.estimate)[1];
        let target = tape.constant(Tensor::row(ex.near[..n].to_vec()));
        Ok((mse_loss(tape, g.estimate, target, self.config.loss)?, n))
    }

    /// Loss without gradients.
    pub fn loss(&self, ex: &Example) -> Result<f64> {
        let mut tape = Tape::new();
        let p = self.params.to_tape(&mut tape, false);
        let (loss, _) = self
            .record_loss(&mut tape, &p, ex)
            .map_err(|e| e.for_item(&ex.id))?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFinite {
                item: ex.id.clone(),
            });
        }
        Ok(value)
    }

    /// Mean loss and mean gradient over a batch.
    pub fn batch_grads(&self, batch: &[&Example]) -> Result<(f64, Vec<f64>)> {
        if batch.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let results = self.exec.map(batch, |ex| self.loss_and_grads(ex));
        let mut total = 0.0;
        let mut grads = vec![0.0; self.adam.m.len()];
        for r in results {
            let (loss, g) = r?;
            total += loss;
            grads.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
        let scale = 1.0 / batch.len() as f64;
        grads.iter_mut().for_each(|g| *g *= scale);
        Ok((total * scale, grads))
    }

    /// One optimizer update on `batch` at learning rate `lr`; returns the batch loss.
    pub fn step(&mut self, batch: &[&Example], lr: f64) -> Result<f64> {
        let (loss, mut grads) = self.batch_grads(batch)?;
        if let Some(max) = self.config.grad_clip {
            clip_global_norm(&mut grads, max);
        }
        let mut flat = self.params.flatten();
        adam_step(&mut flat, &grads, &mut self.adam, lr)?;
        self.params.assign_flat(&flat)?;
        Ok(loss)
    }

    /// Mean loss over `examples`.
    pub fn evaluate(&self, examples: &[Example]) -> Result<f64> {
        if examples.is_empty() {
            return Err(Error::Contract("no examples to evaluate".into()));
        }
        let losses = self.exec.map(examples, |ex| self.loss(ex));
        let mut total = 0.0;
        for l in losses {
            total += l?;
        }
        Ok(total / examples.len() as f64)
    }

    fn epoch_order(&self, epoch: usize, n: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch as u64 + 1);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order
    }

    /// Trains one epoch and validates. When `out_dir` is given, the log, the
    /// best checkpoint and (at the configured cadence) the resume state are
    /// written there.
    pub fn run_epoch(
        &mut self,
        train: &[Example],
        val: &[Example],
        out_dir: Option<&Path>,
    ) -> Result<EpochRecord> {
        if train.is_empty() || val.is_empty() {
            return Err(Error::Contract(
                "training and validation sets must be nonempty".into(),
            ));
        }
        let start = Instant::now();
        let epoch = self.next_epoch;
        let lr = lr_schedule(
            epoch,
            self.config.epochs_max,
            self.config.lr_start,
            self.config.lr_end,
        )?;
        let order = self.epoch_order(epoch, train.len());
        let mut weighted = 0.0;
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train[i]).collect();
            weighted += self.step(&batch, lr)? * batch.len() as f64;
        }
        let train_loss = weighted / train.len() as f64;
        let val_loss = self.evaluate(val)?;
        let best = self.best.as_ref().is_none_or(|(b, _)| val_loss < *b);
        if best {
            self.best = Some((val_loss, self.params.clone()));
        }
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr,
            wall_seconds: start.elapsed().as_secs_f64(),
            best,
        };
        self.log.epochs.push(record.clone());
        self.next_epoch += 1;
        if let Some(dir) = out_dir {
            if best {
                save_checkpoint(&dir.join(BEST_CHECKPOINT), &self.model, &self.params)?;
            }
            let log_path = dir.join(TRAIN_LOG);
            let mut f = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&log_path)
                .map_err(|e| Error::io(&log_path, e))?;
            writeln!(
                f,
                "{}",
                serde_json::to_string(&record).expect("plain record")
            )
            .map_err(|e| Error::io(&log_path, e))?;
            if self.config.checkpoint_every > 0
                && self.next_epoch.is_multiple_of(self.config.checkpoint_every)
            {
                self.save_state(&dir.join(RESUME_STATE))?;
            }
        }
        Ok(record)
    }

    /// Runs epochs until the cap or early stopping, then restores the best
    /// validation parameters.
    pub fn fit(
        &mut self,
        train: &[Example],
        val: &[Example],
        out_dir: Option<&Path>,
    ) -> Result<FitOutcome> {
        let mut stopped_early =
            early_stop_check(&self.log.val_losses(), self.config.early_stop_patience);
        while !stopped_early && self.next_epoch < self.config.epochs_max {
            self.run_epoch(train, val, out_dir)?;
            stopped_early =
                early_stop_check(&self.log.val_losses(), self.config.early_stop_patience);
        }
        if let Some((_, best)) = &self.best {
            self.params = best.clone();
        }
        Ok(FitOutcome {
            best_epoch: self.log.best_epoch().map(|e| e.epoch),
            best_val_loss: self.best.as_ref().map_or(f64::INFINITY, |(v, _)| *v),
            stopped_early,
        })
    }

    const STATE_MAGIC: &'static [u8; 8] = b"AECTRAIN";
    const STATE_VERSION: u32 = 1;

    /// Serializes everything needed to continue bit-identically: configs,
    /// parameters and moments at full precision, the best snapshot and the log.
    pub fn encode_state(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(Self::STATE_MAGIC);
        w.u32(Self::STATE_VERSION);
        w.str(&serde_json::to_string(&self.model).expect("plain config"));
        w.str(&serde_json::to_string(&self.config).expect("plain config"));
        w.u64(self.next_epoch as u64);
        w.u64(self.adam.step);
        for v in [self.adam.beta1, self.adam.beta2, self.adam.eps] {
            w.f64(v);
        }
        let vec = |w: &mut Writer, xs: &[f64]| {
            w.u64(xs.len() as u64);
            xs.iter().for_each(|&x| w.f64(x));
        };
        vec(&mut w, &self.params.flatten());
        vec(&mut w, &self.adam.m);
        vec(&mut w, &self.adam.v);
        match &self.best {
            Some((loss, p)) => {
                w.u8(1);
                w.f64(*loss);
                vec(&mut w, &p.flatten());
            }
            None => w.u8(0),
        }
        w.str(&self.log.to_jsonl());
        w.buf
    }

    pub fn save_state(&self, path: &Path) -> Result<()> {
        write_file(path, &self.encode_state())
    }

    pub fn decode_state(data: &[u8], path: &Path, exec: Executor) -> Result<Self> {
        let mut r = Reader::new(data, path);
        if r.take(8)? != Self::STATE_MAGIC {
            return Err(r.fail("not a training state (bad magic)"));
        }
        let version = r.u32()?;
        if version != Self::STATE_VERSION {
            return Err(r.fail(format!("unsupported version {version}")));
        }
        let model: ModelConfig =
            serde_json::from_str(&r.str()?).map_err(|e| r.fail(e.to_string()))?;
        let config: TrainConfig =
            serde_json::from_str(&r.str()?).map_err(|e| r.fail(e.to_string()))?;
        let next_epoch = r.u64()? as usize;
        let step = r.u64()?;
        let (beta1, beta2, eps) = (r.f64()?, r.f64()?, r.f64()?);
        let read_vec = |r: &mut Reader| -> Result<Vec<f64>> {
            let n = r.u64()? as usize;
            (0..n).map(|_| r.f64()).collect()
        };
        let mut params = ModelParams::zeros(&model);
        params
            .assign_flat(&read_vec(&mut r)?)
            .map_err(|e| r.fail(e.to_string()))?;
        let m = read_vec(&mut r)?;
        let v = read_vec(&mut r)?;
        let best = match r.u8()? {
            0 => None,
            1 => {
                let loss = r.f64()?;
                let mut p = ModelParams::zeros(&model);
                p.assign_flat(&read_vec(&mut r)?)
                    .map_err(|e| r.fail(e.to_string()))?;
                Some((loss, p))
            }
            f => return Err(r.fail(format!("bad best flag {f}"))),
        };
        let log = TrainLog::from_jsonl(&r.str()?).map_err(|e| r.fail(e.to_string()))?;
        r.finish()?;
        let mut trainer = Trainer::new(model, config, params, exec)?;
        if m.len() != trainer.adam.m.len() || v.len() != trainer.adam.v.len() {
            return Err(Error::format(
                path,
                "optimizer moments do not match the parameter count",
            ));
        }
        trainer.adam = AdamState {
            beta1,
            beta2,
            eps,
            step,
            m,
            v,
        };
        trainer.next_epoch = next_epoch;
        trainer.best = best;
        trainer.log = log;
        Ok(trainer)
    }

    pub fn resume(path: &Path, exec: Executor) -> Result<Self> {
        Self::decode_state(&read_file(path)?, path, exec)
    }
}
