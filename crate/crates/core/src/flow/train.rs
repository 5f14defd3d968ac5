use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ot::ot_couple;
use crate::batch::FunctionBatch;
use crate::diff::{ParamStore, Tape};
use crate::error::{MinoError, Result};
use crate::gaussian_field::{GpSampler, GpSpec};
use crate::linalg::Matrix;
use crate::model::{batch_to_columns, VelocityModel};
use crate::scalar::Scalar;

fn default_weight_decay() -> f64 {
    1e-4
}

fn default_clip() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_decay_gamma: f64,
    /// Epochs between learning-rate decays.
    pub lr_decay_every: usize,
    pub use_ot_coupling: bool,
    pub seed: u64,
    pub base_gp: GpSpec,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; `0` disables clipping.
    #[serde(default = "default_clip")]
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            learning_rate: 1e-4,
            lr_decay_gamma: 0.8,
            lr_decay_every: 25,
            use_ot_coupling: true,
            seed: 0,
            base_gp: GpSpec::default_base(),
            weight_decay: default_weight_decay(),
            grad_clip: default_clip(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(MinoError::invalid(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 || (self.use_ot_coupling && self.batch_size < 2) {
            return Err(MinoError::invalid(format!("batch_size {} too small", self.batch_size)));
        }
        if self.lr_decay_every == 0 || !(self.lr_decay_gamma > 0.0) {
            return Err(MinoError::invalid("lr_decay_every and lr_decay_gamma must be positive"));
        }
        if self.weight_decay < 0.0 || self.grad_clip < 0.0 {
            return Err(MinoError::invalid("weight_decay and grad_clip must be non-negative"));
        }
        self.base_gp.validate()
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.lr_decay_gamma.powi((epoch / self.lr_decay_every) as i32)
    }
}

/// Adam moments with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamW {
    pub fn new(n: usize, weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn update<T: Scalar>(&mut self, store: &mut ParamStore<T>, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let grads: Vec<f64> = store.grads().iter().map(|g| g.to_f64().unwrap()).collect();
        for (i, p) in store.values_mut().iter_mut().enumerate() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mut x = p.to_f64().unwrap();
            x *= 1.0 - lr * self.weight_decay;
            x -= lr * (self.m[i] / bc1) / ((self.v[i] / bc2).sqrt() + self.eps);
            *p = T::from_f64_lossy(x);
        }
    }
}

/// Per-epoch mean training loss.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossHistory {
    pub epochs: Vec<(usize, f64)>,
}

impl LossHistory {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.1).collect()
    }

    /// Two whitespace-separated columns under a `# epoch mean_loss` header.
    pub fn to_table(&self) -> String {
        let mut s = String::from("# epoch mean_loss\n");
        for (e, l) in &self.epochs {
            writeln!(s, "{e} {l:e}").unwrap();
        }
        s
    }

    pub fn from_table(text: &str) -> Result<Self> {
        let mut epochs = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let bad = || MinoError::invalid(format!("bad loss row {line:?}"));
            let mut it = line.split_whitespace();
            let e = it.next().and_then(|x| x.parse().ok()).ok_or_else(bad)?;
            let l = it.next().and_then(|x| x.parse().ok()).ok_or_else(bad)?;
            epochs.push((e, l));
        }
        Ok(Self { epochs })
    }
}

/// Everything beyond the parameters needed to continue a run exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub epoch: usize,
    pub optimizer: AdamW,
    pub history: LossHistory,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateHeader {
    magic: String,
    format_version: u32,
    epoch: usize,
    step: u64,
    n_params: usize,
    history: Vec<(usize, f64)>,
}

const STATE_MAGIC: &str = "MINOTS";

impl TrainState {
    /// Header length (u32 LE), TOML header, then first and second moments as f64 LE.
    pub fn write<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let header = StateHeader {
            magic: STATE_MAGIC.into(),
            format_version: 1,
            epoch: self.epoch,
            step: self.optimizer.step,
            n_params: self.optimizer.m.len(),
            history: self.history.epochs.clone(),
        };
        let text = toml::to_string(&header).map_err(std::io::Error::other)?;
        w.write_all(&(text.len() as u32).to_le_bytes())?;
        w.write_all(text.as_bytes())?;
        for x in self.optimizer.m.iter().chain(&self.optimizer.v) {
            w.write_all(&x.to_le_bytes())?;
        }
        w.flush()
    }

    pub fn read<R: Read>(mut r: R, path: &Path, weight_decay: f64) -> Result<Self> {
        let io = |e| MinoError::io(path, e);
        let mut len = [0u8; 4];
        r.read_exact(&mut len).map_err(io)?;
        let len = u32::from_le_bytes(len) as usize;
        if len > 1 << 24 {
            return Err(MinoError::format(path, format!("implausible header length {len}")));
        }
        let mut text = vec![0u8; len];
        r.read_exact(&mut text).map_err(io)?;
        let text = String::from_utf8(text).map_err(|_| MinoError::format(path, "header is not UTF-8"))?;
        let h: StateHeader = toml::from_str(&text).map_err(|e| MinoError::format(path, format!("bad header: {e}")))?;
        if h.magic != STATE_MAGIC || h.format_version != 1 {
            return Err(MinoError::format(path, "not a version 1 training state"));
        }
        let mut bytes = vec![0u8; 16 * h.n_params];
        r.read_exact(&mut bytes).map_err(io)?;
        let vals: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let mut optimizer = AdamW::new(h.n_params, weight_decay);
        optimizer.step = h.step;
        optimizer.m.copy_from_slice(&vals[..h.n_params]);
        optimizer.v.copy_from_slice(&vals[h.n_params..]);
        Ok(Self {
            epoch: h.epoch,
            optimizer,
            history: LossHistory { epochs: h.history },
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| MinoError::io(path, e))?;
        self.write(BufWriter::new(f)).map_err(|e| MinoError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>, weight_decay: f64) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| MinoError::io(path, e))?;
        Self::read(BufReader::new(f), path, weight_decay)
    }
}

/// Epoch-level driver for flow-matching regression.
pub struct Trainer<'a, T: Scalar> {
    model: &'a mut VelocityModel<T>,
    data: &'a FunctionBatch<T>,
    cfg: TrainConfig,
    base: GpSampler<f64>,
    state: TrainState,
}

impl<'a, T: Scalar> Trainer<'a, T> {
    pub fn new(model: &'a mut VelocityModel<T>, data: &'a FunctionBatch<T>, cfg: TrainConfig) -> Result<Self> {
        let state = TrainState {
            epoch: 0,
            optimizer: AdamW::new(model.num_params(), cfg.weight_decay),
            history: LossHistory::default(),
        };
        Self::resume(model, data, cfg, state)
    }

    pub fn resume(model: &'a mut VelocityModel<T>, data: &'a FunctionBatch<T>, cfg: TrainConfig, state: TrainState) -> Result<Self> {
        cfg.validate()?;
        if data.f_dim() != model.config().f_dim {
            return Err(MinoError::shape("train", model.config().f_dim, data.f_dim()));
        }
        if data.is_empty() {
            return Err(MinoError::invalid("training set is empty"));
        }
        if state.optimizer.m.len() != model.num_params() {
            return Err(MinoError::shape("train state", model.num_params(), state.optimizer.m.len()));
        }
        let base = GpSampler::new(cfg.base_gp.clone(), data.points().clone())?;
        Ok(Self {
            model,
            data,
            cfg,
            base,
            state,
        })
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn model(&self) -> &VelocityModel<T> {
        self.model
    }

    pub fn history(&self) -> &LossHistory {
        &self.state.history
    }

    pub fn is_done(&self) -> bool {
        self.state.epoch >= self.cfg.epochs
    }

    /// One regression step on a data minibatch; returns the loss before the update.
    fn step(&mut self, data: FunctionBatch<T>, rng: &mut ChaCha8Rng, lr: f64) -> Result<f64> {
        let b = data.len();
        let f0 = self.base.sample(b, data.f_dim(), rng).cast::<T>();
        let f1 = if self.cfg.use_ot_coupling {
            let plan = ot_couple(&f0, &data)?;
            data.select(&plan.permutation)
        } else {
            data
        };
        let t: Vec<f64> = (0..b).map(|_| rng.random::<f64>()).collect();
        let c0 = batch_to_columns(&f0);
        let c1 = batch_to_columns(&f1);
        let (rows, cols) = c0.shape();
        let n = f0.n_points();
        let mut xt = Matrix::zeros(rows, cols);
        let mut target = Matrix::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                let ti = T::from_f64_lossy(t[c / n]);
                let (a, z) = (c0.get(r, c), c1.get(r, c));
                xt.set(r, c, (T::one() - ti) * a + ti * z);
                target.set(r, c, z - a);
            }
        }
        let mut tape = Tape::new();
        let x = tape.constant(xt);
        let out = self.model.forward(&mut tape, x, f1.points(), &t)?;
        let loss = tape.mse(out.velocity, target)?;
        let value = tape.value(loss).get(0, 0).to_f64().unwrap();
        if !value.is_finite() {
            return Err(MinoError::NonFiniteLoss { step: self.state.optimizer.step as usize });
        }
        let store = self.model.params_mut();
        store.zero_grad();
        tape.backward(loss, store)?;
        if self.cfg.grad_clip > 0.0 {
            let norm = store.grad_norm().to_f64().unwrap();
            if norm > self.cfg.grad_clip {
                let s = T::from_f64_lossy(self.cfg.grad_clip / norm);
                store.grads_mut().iter_mut().for_each(|g| *g *= s);
            }
        }
        self.state.optimizer.update(store, lr);
        Ok(value)
    }

    /// Runs the next epoch and returns its mean loss.
    pub fn run_epoch(&mut self) -> Result<f64> {
        let epoch = self.state.epoch;
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        order.shuffle(&mut rng);
        let lr = self.cfg.learning_rate_at(epoch);
        let (mut total, mut count) = (0.0, 0usize);
        for chunk in order.chunks(self.cfg.batch_size) {
            let batch = self.data.select(chunk);
            total += self.step(batch, &mut rng, lr)?;
            count += 1;
        }
        let mean = total / count as f64;
        log::info!("epoch {epoch}: loss {mean:.6e} lr {lr:.3e}");
        self.state.history.epochs.push((epoch, mean));
        self.state.epoch += 1;
        Ok(mean)
    }

    pub fn run(&mut self) -> Result<&LossHistory> {
        while !self.is_done() {
            self.run_epoch()?;
        }
        Ok(&self.state.history)
    }
}

/// Trains `model` in place for `cfg.epochs` epochs.
pub fn train<T: Scalar>(model: &mut VelocityModel<T>, data: &FunctionBatch<T>, cfg: &TrainConfig) -> Result<LossHistory> {
    let mut trainer = Trainer::new(model, data, cfg.clone())?;
    trainer.run()?;
    Ok(trainer.state.history)
}
