//! Attention masks, multi-head attention and pre-norm transformer blocks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

/// Boolean `[query × key]` matrix, `true` where attending is allowed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                allowed.push(f(i, j));
            }
        }
        Self { rows, cols, allowed }
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        Self::from_fn(rows, cols, |_, _| true)
    }

    pub fn causal(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| j <= i)
    }

    /// Query `i` sees keys `[i - left, i + right]` (clipped to the sequence).
    pub fn window(n: usize, left: usize, right: usize) -> Self {
        Self::from_fn(n, n, |i, j| j + left >= i && j <= i + right)
    }

    /// Row `i` allows keys `[0, counts[i])`.
    pub fn staircase(counts: &[usize], cols: usize) -> Self {
        Self::from_fn(counts.len(), cols, |i, j| j < counts[i])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.allowed
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.allowed[i * self.cols..(i + 1) * self.cols]
    }

    /// Number of allowed keys in row `i`.
    pub fn row_count(&self, i: usize) -> usize {
        self.row(i).iter().filter(|&&a| a).count()
    }

    pub fn is_causal(&self) -> bool {
        (0..self.rows).all(|i| (0..self.cols).all(|j| !self.allowed(i, j) || j <= i))
    }

    /// Every row allows a key prefix, and prefixes never shrink going down.
    pub fn is_staircase(&self) -> bool {
        let mut prev = 0;
        for i in 0..self.rows {
            let c = self.row_count(i);
            if c < prev || !self.row(i)[..c].iter().all(|&a| a) {
                return false;
            }
            prev = c;
        }
        true
    }

    /// Keeps the first `cols` key columns.
    pub fn truncate_cols(&self, cols: usize) -> Self {
        Self::from_fn(self.rows, cols.min(self.cols), |i, j| self.allowed(i, j))
    }

    fn check(&self, tq: usize, tk: usize) -> Result<()> {
        if self.rows != tq || self.cols != tk {
            return Err(Error::Shape {
                op: "attention mask",
                lhs: vec![self.rows, self.cols],
                rhs: vec![tq, tk],
            });
        }
        Ok(())
    }
}

fn init_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    Tensor::randn(&[rows, cols], 1.0 / (rows as f64).sqrt(), rng)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = ps.add(format!("{name}.weight"), init_matrix(d_in, d_out, rng));
        let bias = bias.then(|| ps.add(format!("{name}.bias"), Tensor::zeros(&[d_out])));
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(ps, self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(ps, b);
                g.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gain: ps.add(format!("{name}.gain"), Tensor::filled(&[d], 1.0)),
            bias: ps.add(format!("{name}.bias"), Tensor::zeros(&[d])),
        }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        let gain = g.param(ps, self.gain);
        let bias = g.param(ps, self.bias);
        g.layer_norm(x, gain, bias, LN_EPS)
    }
}

/// `softmax(Q·Kᵀ/√d masked)·V`; rows with no allowed key come out as zeros.
pub fn scaled_dot_attention(g: &mut Graph, q: Var, k: Var, v: Var, mask: &AttentionMask) -> Result<Var> {
    let (tq, d) = (g.shape(q)[0], g.shape(q)[1]);
    let tk = g.shape(k)[0];
    if g.shape(k)[1] != d || g.shape(v)[0] != tk {
        return Err(Error::Shape {
            op: "scaled_dot_attention",
            lhs: g.shape(q).to_vec(),
            rhs: g.shape(k).to_vec(),
        });
    }
    mask.check(tq, tk)?;
    let scores = g.matmul_t(q, k)?;
    let scores = g.scale(scores, 1.0 / (d as f64).sqrt());
    let probs = g.masked_softmax(scores, mask.as_slice())?;
    g.matmul(probs, v)
}

/// Query/key/value projections with biases; the output projection has none,
/// so an attention row with nothing to attend to contributes exactly zero.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub n_heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamStore,
        name: &str,
        d_model: usize,
        n_heads: usize,
        rng: &mut R,
    ) -> Self {
        assert!(n_heads > 0 && d_model % n_heads == 0, "d_model must divide into heads");
        Self {
            q: Linear::new(ps, &format!("{name}.q"), d_model, d_model, true, rng),
            // a key bias adds the same amount to every score of a row, so it is left out
            k: Linear::new(ps, &format!("{name}.k"), d_model, d_model, false, rng),
            v: Linear::new(ps, &format!("{name}.v"), d_model, d_model, true, rng),
            out: Linear::new(ps, &format!("{name}.out"), d_model, d_model, false, rng),
            n_heads,
        }
    }

    /// Self-attention is the `x_q == x_kv` case.
    pub fn forward(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        x_q: Var,
        x_kv: Var,
        mask: &AttentionMask,
    ) -> Result<Var> {
        let (tq, tk) = (g.shape(x_q)[0], g.shape(x_kv)[0]);
        mask.check(tq, tk)?;
        g.count_scores((tq * tk) as u64);
        let q = self.q.forward(g, ps, x_q)?;
        let k = self.k.forward(g, ps, x_kv)?;
        let v = self.v.forward(g, ps, x_kv)?;
        let d = g.shape(q)[1];
        let dh = d / self.n_heads;
        let heads = if self.n_heads == 1 {
            scaled_dot_attention(g, q, k, v, mask)?
        } else {
            let mut outs = Vec::with_capacity(self.n_heads);
            for h in 0..self.n_heads {
                let (a, b) = (h * dh, (h + 1) * dh);
                let qh = g.slice_cols(q, a, b)?;
                let kh = g.slice_cols(k, a, b)?;
                let vh = g.slice_cols(v, a, b)?;
                outs.push(scaled_dot_attention(g, qh, kh, vh, mask)?);
            }
            g.concat_cols(&outs)?
        };
        self.out.forward(g, ps, heads)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamStore, name: &str, d_model: usize, d_ff: usize, rng: &mut R) -> Self {
        Self {
            up: Linear::new(ps, &format!("{name}.up"), d_model, d_ff, true, rng),
            down: Linear::new(ps, &format!("{name}.down"), d_ff, d_model, true, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        let h = self.up.forward(g, ps, x)?;
        let h = g.gelu(h);
        self.down.forward(g, ps, h)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerBlockConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
}

impl TransformerBlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(invalid(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

/// Pre-norm decoder block: self-attention, optional cross-attention, FFN.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TransformerBlock {
    pub ln_self: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub cross: Option<(LayerNorm, MultiHeadAttention)>,
    pub ln_ff: LayerNorm,
    pub ff: FeedForward,
}

impl TransformerBlock {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamStore,
        name: &str,
        cfg: &TransformerBlockConfig,
        with_cross: bool,
        rng: &mut R,
    ) -> Self {
        let d = cfg.d_model;
        Self {
            ln_self: LayerNorm::new(ps, &format!("{name}.ln_self"), d),
            self_attn: MultiHeadAttention::new(ps, &format!("{name}.self_attn"), d, cfg.n_heads, rng),
            cross: with_cross.then(|| {
                (
                    LayerNorm::new(ps, &format!("{name}.ln_cross"), d),
                    MultiHeadAttention::new(ps, &format!("{name}.cross_attn"), d, cfg.n_heads, rng),
                )
            }),
            ln_ff: LayerNorm::new(ps, &format!("{name}.ln_ff"), d),
            ff: FeedForward::new(ps, &format!("{name}.ff"), d, cfg.d_ff, rng),
        }
    }

    /// `x + SelfAttn(LN x)`, then `+ CrossAttn(LN ·, cross_kv)` when given,
    /// then `+ FFN(LN ·)`.
    pub fn forward(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        x: Var,
        cross_kv: Option<Var>,
        self_mask: &AttentionMask,
        cross_mask: Option<&AttentionMask>,
    ) -> Result<Var> {
        self.forward_with_keys(g, ps, x, None, cross_kv, self_mask, cross_mask)
    }

    /// Like [`forward`](Self::forward), but self-attention keys come from
    /// `self_kv` (rows of the same sequence) instead of `x`. Used to encode a
    /// window of positions against a cached key range.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_with_keys(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        x: Var,
        self_kv: Option<Var>,
        cross_kv: Option<Var>,
        self_mask: &AttentionMask,
        cross_mask: Option<&AttentionMask>,
    ) -> Result<Var> {
        if cross_mask.is_some() && cross_kv.is_none() {
            return Err(invalid("cross-attention mask given without cross keys/values"));
        }
        let hq = self.ln_self.forward(g, ps, x)?;
        let hk = match self_kv {
            Some(kv) => self.ln_self.forward(g, ps, kv)?,
            None => hq,
        };
        let a = self.self_attn.forward(g, ps, hq, hk, self_mask)?;
        let mut h = g.add(x, a)?;
        if let Some(kv) = cross_kv {
            let (ln, attn) = self
                .cross
                .as_ref()
                .ok_or_else(|| invalid("block has no cross-attention sub-layer"))?;
            let full;
            let mask = match cross_mask {
                Some(m) => m,
                None => {
                    full = AttentionMask::full(g.shape(h)[0], g.shape(kv)[0]);
                    &full
                }
            };
            let hn = ln.forward(g, ps, h)?;
            let c = attn.forward(g, ps, hn, kv, mask)?;
            h = g.add(h, c)?;
        }
        let hn = self.ln_ff.forward(g, ps, h)?;
        let f = self.ff.forward(g, ps, hn)?;
        g.add(h, f)
    }
}

/// Sinusoidal table: `sin(p/10000^(2i/d))` at even columns, `cos` at odd.
pub fn positional_encoding(len: usize, d_model: usize) -> Tensor {
    let mut data = vec![0.0; len * d_model];
    for p in 0..len {
        for i in 0..d_model {
            let pair = (i / 2) as f64;
            let freq = 1.0 / 10000f64.powf(2.0 * pair / d_model as f64);
            let angle = p as f64 * freq;
            data[p * d_model + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![len, d_model], data).expect("positive dims")
}

/// Sinusoidal rows for absolute positions `[start, start + len)`.
pub fn positional_rows(start: usize, len: usize, d_model: usize) -> Tensor {
    positional_encoding(start + len, d_model)
        .slice_rows(start, start + len)
        .expect("in range")
}
