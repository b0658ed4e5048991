//! Next-token training with randomly sampled wait-k masks.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::SpeechUtterance;
use crate::error::{invalid, Error, Result};
use crate::model::BestowModel;
use crate::numerics::{adam_step, clip_global_norm, AdamConfig, AdamState, Graph, ParamStore};
use crate::policy::WaitKConfig;
use crate::prompt::PromptLayout;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub clip_norm: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Inclusive range K is drawn from for streaming examples.
    pub k_range: [usize; 2],
    /// Probability that an example is trained under a wait-k mask.
    pub stream_fraction: f64,
    /// Encoder steps per READ used by training masks.
    pub l: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            clip_norm: 1.0,
            steps: 2000,
            batch_size: 8,
            k_range: [3, 12],
            stream_fraction: 0.0,
            l: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.k_range;
        if lo == 0 || lo > hi {
            return Err(invalid(format!("bad k_range [{lo}, {hi}]")));
        }
        if !(0.0..=1.0).contains(&self.stream_fraction) {
            return Err(invalid("stream_fraction must lie in [0, 1]"));
        }
        if self.batch_size == 0 || self.l == 0 {
            return Err(invalid("batch_size and L must be positive"));
        }
        Ok(())
    }

    /// Streaming mask spec for one example, or `None` for the offline mask.
    pub fn sample_mask_spec<R: Rng + ?Sized>(&self, p: usize, rng: &mut R) -> Option<WaitKConfig> {
        if self.stream_fraction <= 0.0 || rng.gen::<f64>() >= self.stream_fraction {
            return None;
        }
        let k = rng.gen_range(self.k_range[0]..=self.k_range[1]);
        Some(WaitKConfig { k, l: self.l, p })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub mask_specs: Vec<Option<WaitKConfig>>,
}

/// Mean next-token loss of a batch under the given masks, as a graph node.
pub fn batch_loss(
    model: &BestowModel,
    ps: &ParamStore,
    g: &mut Graph,
    batch: &[(&SpeechUtterance, &PromptLayout)],
    specs: &[Option<WaitKConfig>],
) -> Result<crate::numerics::Var> {
    if batch.is_empty() {
        return Err(invalid("empty batch"));
    }
    let mut total = None;
    for ((u, p), spec) in batch.iter().zip(specs) {
        let logits = model.forward(g, ps, u, p, spec.as_ref())?;
        let l = g.cross_entropy(logits, &p.labels())?;
        total = Some(match total {
            Some(t) => g.add(t, l)?,
            None => l,
        });
    }
    Ok(g.scale(total.expect("nonempty batch"), 1.0 / batch.len() as f64))
}

/// Loss without an update.
pub fn eval_loss(
    model: &BestowModel,
    ps: &ParamStore,
    batch: &[(&SpeechUtterance, &PromptLayout)],
    spec: Option<&WaitKConfig>,
) -> Result<f64> {
    let mut g = Graph::new();
    let specs = vec![spec.copied(); batch.len()];
    let l = batch_loss(model, ps, &mut g, batch, &specs)?;
    Ok(g.value(l).item())
}

/// One optimisation step: sample masks, backprop, clip, Adam. A non-finite
/// loss returns an error and leaves parameters untouched.
pub fn train_step<R: Rng + ?Sized>(
    model: &BestowModel,
    ps: &mut ParamStore,
    batch: &[(&SpeechUtterance, &PromptLayout)],
    state: &mut AdamState,
    cfg: &TrainConfig,
    k_rng: &mut R,
) -> Result<StepReport> {
    cfg.validate()?;
    let p = model.cfg.encoder.downsample;
    let specs: Vec<Option<WaitKConfig>> = batch.iter().map(|_| cfg.sample_mask_spec(p, k_rng)).collect();
    let mut g = Graph::new();
    let loss_var = batch_loss(model, ps, &mut g, batch, &specs)?;
    let loss = g.value(loss_var).item();
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("training loss {loss}")));
    }
    g.backward(loss_var)?;
    let mut grads = g.param_grads(ps);
    let grad_norm = clip_global_norm(&mut grads, cfg.clip_norm);
    adam_step(ps.values_mut(), &grads, state, &cfg.adam)?;
    Ok(StepReport { loss, grad_norm, mask_specs: specs })
}

/// Epoch-shuffled batches over a fixed example set.
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
}

impl BatchSampler {
    pub fn new(n: usize) -> Self {
        Self { order: (0..n).collect(), pos: n }
    }

    pub fn next_batch<R: Rng + ?Sized>(&mut self, size: usize, rng: &mut R) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}
