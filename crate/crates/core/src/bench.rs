//! Attention cost model and measured comparison of speech-prefix fusion
//! against cross-attention fusion on shared kernels.

use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::{BestowModel, ModelConfig};
use crate::nn::{AttentionMask, Linear};
use crate::numerics::{Graph, ParamStore, Tensor, Var};
use crate::prompt::N_RESERVED;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Prepend,
    Xattn,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Self::Prepend => "prepend",
            Self::Xattn => "xattn",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CostModel {
    pub l_t: usize,
    pub l_a: usize,
    pub d_model: usize,
    pub n_layers_llm: usize,
    /// Bridge layers.
    pub x: usize,
}

/// Attention score entries (`Q·Kᵀ` elements) of one forward pass.
pub fn predicted_ops(variant: Variant, m: &CostModel) -> u64 {
    let (lt, la) = (m.l_t as u64, m.l_a as u64);
    let n = m.n_layers_llm as u64;
    match variant {
        Variant::Prepend => n * (lt + la) * (lt + la),
        Variant::Xattn => n * lt * lt + m.x as u64 * (lt * la + lt * lt),
    }
}

/// Speech states mapped by a linear adapter and prepended to the text
/// embeddings; the shared LLM runs over the joint sequence and logits are
/// read from the text rows.
#[derive(Clone, Debug)]
pub struct PrependBaseline {
    adapter: Linear,
}

impl PrependBaseline {
    pub fn new<R: rand::Rng + ?Sized>(ps: &mut ParamStore, d_model: usize, rng: &mut R) -> Self {
        Self { adapter: Linear::new(ps, "prepend.adapter", d_model, d_model, true, rng) }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, model: &BestowModel, states: Var, ids: &[usize]) -> Result<Var> {
        let l_a = g.shape(states)[0];
        let speech = self.adapter.forward(g, ps, states)?;
        let text = model.text_embedding(g, ps, ids)?;
        let x = g.concat_rows(&[speech, text])?;
        let h = model.llm_hidden(g, ps, x)?;
        let h = g.slice_rows(h, l_a, l_a + ids.len())?;
        model.llm_head(g, ps, h)
    }
}

/// Cross-attention forward with every text row seeing every speech state.
pub fn xattn_forward(g: &mut Graph, ps: &ParamStore, model: &BestowModel, states: Var, ids: &[usize]) -> Result<Var> {
    let mask = AttentionMask::full(ids.len(), g.shape(states)[0]);
    model.logits_from_states(g, ps, ids, states, &mask)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub model: ModelConfig,
    pub repetitions: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { model: ModelConfig::default(), repetitions: 7, warmup: 1, seed: 0 }
    }
}

pub const DEFAULT_GRID: [(usize, usize); 4] = [(16, 128), (16, 256), (16, 512), (16, 1024)];

#[derive(Clone, Debug, PartialEq)]
pub struct BenchResult {
    pub variant: Variant,
    pub l_t: usize,
    pub l_a: usize,
    pub pred_ops: u64,
    /// Score entries counted by the attention kernels.
    pub measured_ops: u64,
    pub measured_ms: f64,
    /// High-water bytes of tensor values held by the forward graph.
    pub mem_bytes: usize,
    pub output_shape: Vec<usize>,
}

/// Minimum duration of one timed sample.
const MIN_SAMPLE_NS: u128 = 20_000_000;

/// Smallest observable step of the monotonic clock, in nanoseconds.
pub fn timer_granularity_ns() -> u128 {
    let mut best = u128::MAX;
    for _ in 0..50 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min((b - a).as_nanos());
    }
    best.max(1)
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.total_cmp(b));
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

/// Times both variants on every grid point (sequentially, single thread).
/// `measured_ms` is the median over `repetitions` samples of the mean time
/// per forward within a sample.
pub fn run_bench(grid: &[(usize, usize)], cfg: &BenchConfig) -> Result<Vec<BenchResult>> {
    if grid.is_empty() {
        return Err(invalid("benchmark grid is empty"));
    }
    if cfg.repetitions == 0 {
        return Err(invalid("benchmark needs at least one repetition"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut ps = ParamStore::new();
    let model = BestowModel::new(&mut ps, &cfg.model, &mut rng)?;
    let prepend = PrependBaseline::new(&mut ps, cfg.model.d_model, &mut rng);
    let granularity = timer_granularity_ns();
    let mut out = Vec::with_capacity(grid.len() * 2);
    for &(l_t, l_a) in grid {
        if l_t == 0 || l_a == 0 {
            return Err(invalid(format!("grid point ({l_t}, {l_a}) must be positive")));
        }
        let states = Tensor::randn(&[l_a, cfg.model.d_model], 1.0, &mut rng);
        let ids: Vec<usize> = (0..l_t).map(|i| N_RESERVED + i % cfg.model.vocab_size).collect();
        let cost = CostModel {
            l_t,
            l_a,
            d_model: cfg.model.d_model,
            n_layers_llm: cfg.model.llm_layers,
            x: cfg.model.bridge.layers,
        };
        for variant in [Variant::Prepend, Variant::Xattn] {
            let run = || -> Result<(Graph, Vec<usize>)> {
                let mut g = Graph::new();
                let s = g.constant(states.clone());
                let logits = match variant {
                    Variant::Prepend => prepend.forward(&mut g, &ps, &model, s, &ids)?,
                    Variant::Xattn => xattn_forward(&mut g, &ps, &model, s, &ids)?,
                };
                let shape = g.shape(logits).to_vec();
                Ok((g, shape))
            };
            for _ in 0..cfg.warmup {
                run()?;
            }
            // repeat short forwards inside one sample so each sample spans
            // at least MIN_SAMPLE_NS
            let t0 = Instant::now();
            let (g, output_shape) = run()?;
            let once = t0.elapsed().as_nanos().max(1);
            let iters = (MIN_SAMPLE_NS / once).clamp(1, 1000) as usize;
            let mut times = Vec::with_capacity(cfg.repetitions);
            for _ in 0..cfg.repetitions {
                let t0 = Instant::now();
                for _ in 0..iters {
                    run()?;
                }
                times.push(t0.elapsed().as_nanos() as f64);
            }
            let med = median(times);
            if med < 10.0 * granularity as f64 {
                return Err(Error::TimerResolution { measured_ns: med as u128, granularity_ns: granularity });
            }
            let med = med / iters as f64;
            out.push(BenchResult {
                variant,
                l_t,
                l_a,
                pred_ops: predicted_ops(variant, &cost),
                measured_ops: g.score_entries(),
                measured_ms: med / 1e6,
                mem_bytes: g.value_bytes(),
                output_shape,
            });
        }
    }
    Ok(out)
}

pub const BENCH_HEADER: &str = "variant,L_t,L_a,pred_ops,measured_ms,mem_bytes";

/// Prepend time over cross-attention time at each grid point, in grid order.
pub fn speedups(results: &[BenchResult]) -> Vec<((usize, usize), f64)> {
    let mut out = Vec::new();
    for p in results.iter().filter(|r| r.variant == Variant::Prepend) {
        if let Some(x) = results
            .iter()
            .find(|r| r.variant == Variant::Xattn && r.l_t == p.l_t && r.l_a == p.l_a)
        {
            out.push(((p.l_t, p.l_a), p.measured_ms / x.measured_ms));
        }
    }
    out
}

/// CSV rows plus a short summary of the speedups.
pub fn report(results: &[BenchResult]) -> Result<(String, String)> {
    if results.is_empty() {
        return Err(invalid("no benchmark results to report"));
    }
    let mut csv = format!("{BENCH_HEADER}\n");
    for r in results {
        let _ = writeln!(
            csv,
            "{},{},{},{},{:.4},{}",
            r.variant.name(),
            r.l_t,
            r.l_a,
            r.pred_ops,
            r.measured_ms,
            r.mem_bytes
        );
    }
    let mut summary = String::new();
    let sp = speedups(results);
    for ((lt, la), s) in &sp {
        let _ = writeln!(summary, "L_t={lt} L_a={la}: xattn speedup {s:.2}x");
    }
    if !sp.is_empty() {
        let vals: Vec<f64> = sp.iter().map(|x| x.1).collect();
        let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let max = vals.iter().copied().fold(0.0, f64::max);
        let _ = writeln!(summary, "speedup min {min:.2}x median {:.2}x max {max:.2}x", median(vals));
    }
    Ok((csv, summary))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::model::BridgeConfig;

    fn cost(l_t: usize, l_a: usize, n: usize, x: usize) -> CostModel {
        CostModel { l_t, l_a, d_model: 64, n_layers_llm: n, x }
    }

    #[test]
    fn closed_form_examples() {
        assert_eq!(predicted_ops(Variant::Prepend, &cost(10, 100, 1, 0)), 12100);
        assert_eq!(predicted_ops(Variant::Xattn, &cost(10, 100, 1, 0)), 100);
        assert_eq!(predicted_ops(Variant::Xattn, &cost(10, 100, 1, 1)), 1200);
        let r = predicted_ops(Variant::Prepend, &cost(10, 100, 1, 1)) as f64 / 1200.0;
        assert!((r - 10.083).abs() < 1e-3);
        assert_eq!(predicted_ops(Variant::Prepend, &cost(7, 0, 3, 2)), 3 * 49);
        assert_eq!(predicted_ops(Variant::Xattn, &cost(7, 0, 3, 2)), 3 * 49 + 2 * 49);
    }

    fn small_bench() -> BenchConfig {
        BenchConfig {
            model: ModelConfig {
                vocab_size: 8,
                d_model: 8,
                n_heads: 2,
                d_ff: 16,
                llm_layers: 2,
                bridge: BridgeConfig { layers: 2, n_heads: 2, ..Default::default() },
                encoder: EncoderConfig { d_model: 8, n_heads: 2, d_ff: 16, ..Default::default() },
            },
            repetitions: 3,
            warmup: 1,
            seed: 1,
        }
    }

    #[test]
    fn counters_match_closed_form_and_shapes_agree() {
        let cfg = small_bench();
        let grid = [(4, 40), (6, 90)];
        let res = run_bench(&grid, &cfg).unwrap();
        assert_eq!(res.len(), 4);
        for r in &res {
            assert_eq!(r.measured_ops, r.pred_ops, "{r:?}");
            assert_eq!(r.output_shape, vec![r.l_t, 12]);
        }
        let (csv, summary) = report(&res).unwrap();
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.starts_with(BENCH_HEADER));
        for line in csv.lines().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            let (lt, la): (usize, usize) = (f[1].parse().unwrap(), f[2].parse().unwrap());
            let v = if f[0] == "prepend" { Variant::Prepend } else { Variant::Xattn };
            assert_eq!(f[3].parse::<u64>().unwrap(), predicted_ops(v, &cost(lt, la, 2, 2)));
        }
        assert!(summary.contains("median"));
    }

    #[test]
    fn empty_inputs_rejected() {
        assert!(run_bench(&[], &small_bench()).is_err());
        assert!(report(&[]).is_err());
    }
}
