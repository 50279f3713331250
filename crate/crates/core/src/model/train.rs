use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adapter::{Adapter, LoraHook};
use super::forward::{SlotHook, TokenBatch};
use super::prompt::Example;
use super::BaseModel;
use crate::error::{Error, Result};
use crate::tensor::{clip_global_norm, Graph, Optimizer, OptimizerKind, Scalar, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    /// Global gradient-norm clip; 0 disables.
    pub clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            steps: 100,
            lr: 5e-3,
            optimizer: OptimizerKind::default(),
            clip: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("learning rate {} must be finite and non-negative", self.lr)));
        }
        if !(self.clip.is_finite() && self.clip >= 0.0) {
            return Err(Error::Config(format!("clip {} must be finite and non-negative", self.clip)));
        }
        Ok(())
    }
}

/// Loss per optimizer step.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: Vec<f64>,
}

impl TrainReport {
    pub fn first(&self) -> Option<f64> {
        self.losses.first().copied()
    }

    pub fn last(&self) -> Option<f64> {
        self.losses.last().copied()
    }
}

/// Something `train_lm` can optimize while the base stays frozen.
pub trait TrainTarget<T: Scalar> {
    type Hook: SlotHook<T>;

    /// Places the trainable tensors on `g`; vars follow `params_mut` order.
    fn bind(&self, g: &mut Graph<T>) -> Result<(Self::Hook, Vec<Var>)>;

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>>;
}

impl<T: Scalar> TrainTarget<T> for Adapter<T> {
    type Hook = LoraHook;

    fn bind(&self, g: &mut Graph<T>) -> Result<(LoraHook, Vec<Var>)> {
        let hook = Adapter::bind(self, g, true)?;
        let vars = hook.vars();
        Ok((hook, vars))
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.tensors_mut()
    }
}

/// Token batch plus the flat `(row, target)` pairs the loss reads.
pub struct LossBatch {
    pub tokens: TokenBatch,
    pub rows: Vec<usize>,
    pub targets: Vec<usize>,
}

impl LossBatch {
    pub fn new(examples: &[&Example]) -> Result<Self> {
        let seqs: Vec<&[u32]> = examples.iter().map(|e| e.tokens.as_slice()).collect();
        let tokens = TokenBatch::from_sequences(&seqs)?;
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for (b, e) in examples.iter().enumerate() {
            for t in e.loss_from.max(1)..e.tokens.len() {
                rows.push(b * tokens.seq + t - 1);
                targets.push(e.tokens[t] as usize);
            }
        }
        Ok(Self { tokens, rows, targets })
    }
}

struct Sampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl Sampler {
    fn new(n: usize, seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..n).collect(),
            pos: n,
        }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let size = size.min(self.order.len());
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn at_step(step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Tensor(TensorError::NonFinite { op }) => Error::NonFiniteLoss {
            step,
            detail: format!("non-finite value produced by {op}"),
        },
        other => other,
    }
}

fn apply_update<T: Scalar>(
    step: usize,
    cfg: &TrainConfig,
    opt: &mut Optimizer,
    g: &mut Graph<T>,
    loss: Var,
    vars: &[Var],
    mut params: Vec<&mut Tensor<T>>,
) -> Result<f64> {
    let value = g.value(loss).data()[0].to_f64();
    let mut grads = g.backward(loss)?;
    let mut grads: Vec<Tensor<T>> = vars
        .iter()
        .map(|&v| grads.take(v).ok_or_else(|| Error::Contract("missing gradient for a trainable tensor".into())))
        .collect::<Result<_>>()?;
    if grads.iter().any(|t| !t.is_finite()) {
        return Err(Error::NonFiniteLoss {
            step,
            detail: "non-finite gradient".into(),
        });
    }
    if cfg.clip > 0.0 {
        clip_global_norm(&mut grads, cfg.clip);
    }
    opt.step(&mut params, &grads);
    Ok(value)
}

fn check_data(data: &[Example]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if let Some(e) = data.iter().find(|e| e.loss_from >= e.tokens.len()) {
        return Err(Error::invalid(format!(
            "example of length {} has no loss positions",
            e.tokens.len()
        )));
    }
    Ok(())
}

/// Optimizes only `target`; the base model is bound as constants.
pub fn train_lm<T: Scalar, P: TrainTarget<T>>(
    model: &BaseModel<T>,
    data: &[Example],
    cfg: &TrainConfig,
    target: &mut P,
) -> Result<TrainReport> {
    cfg.validate()?;
    if cfg.steps == 0 {
        return Ok(TrainReport::default());
    }
    check_data(data)?;
    if target.params_mut().is_empty() {
        return Err(Error::invalid("trainable set is empty"));
    }
    let mut sampler = Sampler::new(data.len(), cfg.seed);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr);
    let mut report = TrainReport::default();
    for step in 0..cfg.steps {
        let idx = sampler.next_batch(cfg.batch_size);
        let examples: Vec<&Example> = idx.iter().map(|&i| &data[i]).collect();
        let lb = LossBatch::new(&examples)?;
        let loss = (|| {
            let mut g = Graph::new();
            let w = model.weights.bind(&mut g, false)?;
            let (mut hook, vars) = target.bind(&mut g)?;
            let out = model.forward_bound(&mut g, &w, &lb.tokens, &mut hook)?;
            let loss = g.cross_entropy(out.logits, &lb.rows, &lb.targets)?;
            apply_update(step, cfg, &mut opt, &mut g, loss, &vars, target.params_mut())
        })()
        .map_err(at_step(step))?;
        report.losses.push(loss);
    }
    Ok(report)
}

/// Full-weight training of every base parameter.
pub fn train_full<T: Scalar>(model: &mut BaseModel<T>, data: &[Example], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if cfg.steps == 0 {
        return Ok(TrainReport::default());
    }
    check_data(data)?;
    let mut sampler = Sampler::new(data.len(), cfg.seed);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr);
    let mut report = TrainReport::default();
    for step in 0..cfg.steps {
        let idx = sampler.next_batch(cfg.batch_size);
        let examples: Vec<&Example> = idx.iter().map(|&i| &data[i]).collect();
        let lb = LossBatch::new(&examples)?;
        let loss = (|| {
            let mut g = Graph::new();
            let w = model.weights.bind(&mut g, true)?;
            let out = model.forward_bound(&mut g, &w, &lb.tokens, &mut super::NoHook)?;
            let loss = g.cross_entropy(out.logits, &lb.rows, &lb.targets)?;
            let vars = w.vars().to_vec();
            apply_update(step, cfg, &mut opt, &mut g, loss, &vars, model.weights.tensors_mut())
        })()
        .map_err(at_step(step))?;
        report.losses.push(loss);
    }
    Ok(report)
}

/// Token-weighted mean cross entropy over `data`, no gradients.
pub fn eval_loss<T: Scalar>(
    model: &BaseModel<T>,
    data: &[Example],
    batch_size: usize,
    hook: &mut dyn SlotHook<T>,
) -> Result<f64> {
    check_data(data)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in data.chunks(batch_size.max(1)) {
        let examples: Vec<&Example> = chunk.iter().collect();
        let lb = LossBatch::new(&examples)?;
        let mut g = Graph::inference();
        let w = model.weights.bind(&mut g, false)?;
        let out = model.forward_bound(&mut g, &w, &lb.tokens, hook)?;
        let loss = g.cross_entropy(out.logits, &lb.rows, &lb.targets)?;
        total += g.value(loss).data()[0].to_f64() * lb.rows.len() as f64;
        count += lb.rows.len();
    }
    Ok(total / count as f64)
}
