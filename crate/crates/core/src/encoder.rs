//! Toy speech encoder: stacks `P` raw 10 ms frames per step, projects them,
//! and runs a small transformer in one of three streaming regimes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nn::{positional_rows, AttentionMask, LayerNorm, Linear, TransformerBlock, TransformerBlockConfig};
use crate::numerics::{Graph, ParamStore, Tensor, Var};

pub const FRAME_MS: u32 = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderMode {
    /// Full-context encoder, offline only.
    Bidi,
    /// Full-context encoder re-run on each growing prefix while streaming.
    BidiRecompute,
    /// Bounded left/right windows; exact incremental encoding with a cache.
    Causal,
}

impl std::str::FromStr for EncoderMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bidi" => Ok(Self::Bidi),
            "bidi_recompute" => Ok(Self::BidiRecompute),
            "causal" => Ok(Self::Causal),
            _ => Err(invalid(format!("unknown encoder mode {s:?} (bidi, bidi_recompute, causal)"))),
        }
    }
}

impl std::fmt::Display for EncoderMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Bidi => "bidi",
            Self::BidiRecompute => "bidi_recompute",
            Self::Causal => "causal",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub mode: EncoderMode,
    /// Raw frames per encoder step (`P`).
    pub downsample: usize,
    pub n_layers: usize,
    pub d_in: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Encoder steps withheld from the end of a prefix in bidi-recompute mode.
    pub right_context_frames: usize,
    /// Per-layer `[left, right]` attention windows, in encoder steps.
    pub causal_context_windows: Vec<[usize; 2]>,
    /// Which window of `causal_context_windows` is active.
    pub window_index: usize,
    /// Optional `[left, right]` window for the bidirectional modes.
    pub bidi_window: Option<[usize; 2]>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            mode: EncoderMode::Bidi,
            downsample: 8,
            n_layers: 2,
            d_in: 16,
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            right_context_frames: 13,
            causal_context_windows: vec![[70, 13], [70, 6], [70, 1], [70, 0]],
            window_index: 0,
            bidi_window: None,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.downsample == 0 {
            return Err(invalid("downsample factor must be >= 1"));
        }
        if self.n_layers == 0 || self.d_in == 0 {
            return Err(invalid("encoder needs at least one layer and a positive frame dim"));
        }
        if self.window_index >= self.causal_context_windows.len() {
            return Err(invalid(format!(
                "window index {} out of {} context windows",
                self.window_index,
                self.causal_context_windows.len()
            )));
        }
        self.block_config().validate()
    }

    pub fn block_config(&self) -> TransformerBlockConfig {
        TransformerBlockConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
        }
    }

    /// Active `[left, right]` causal window.
    pub fn causal_window(&self) -> [usize; 2] {
        self.causal_context_windows[self.window_index]
    }

    pub fn stride_ms(&self) -> u32 {
        self.downsample as u32 * FRAME_MS
    }

    pub fn enc_len(&self, raw_frames: usize) -> usize {
        raw_frames.div_ceil(self.downsample)
    }

    /// Steps of lookahead the full stack needs before a causal state is final.
    pub fn causal_lookahead(&self) -> usize {
        self.n_layers * self.causal_window()[1]
    }

    /// Encoder states a streaming session can use after reading `frames_read`
    /// raw frames; `exhausted` means the source has ended.
    pub fn available_states(&self, frames_read: usize, exhausted: bool) -> usize {
        if exhausted {
            return self.enc_len(frames_read);
        }
        match self.mode {
            EncoderMode::Causal => (frames_read / self.downsample).saturating_sub(self.causal_lookahead()),
            EncoderMode::BidiRecompute => self.enc_len(frames_read).saturating_sub(self.right_context_frames),
            EncoderMode::Bidi => 0,
        }
    }

    fn self_mask(&self, len: usize) -> AttentionMask {
        match self.mode {
            EncoderMode::Causal => {
                let [l, r] = self.causal_window();
                AttentionMask::window(len, l, r)
            }
            _ => match self.bidi_window {
                Some([l, r]) => AttentionMask::window(len, l, r),
                None => AttentionMask::full(len, len),
            },
        }
    }
}

/// Raw 10 ms frames, `[T_raw × d_in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeechUtterance {
    frames: Tensor,
}

impl SpeechUtterance {
    pub fn new(frames: Tensor) -> Result<Self> {
        if frames.ndim() != 2 {
            return Err(invalid("utterance frames must be a [T_raw x d_in] matrix"));
        }
        if !frames.is_finite() {
            return Err(Error::NonFinite("utterance frames".into()));
        }
        Ok(Self { frames })
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn duration_ms(&self) -> u64 {
        self.len() as u64 * FRAME_MS as u64
    }

    /// First `n` frames.
    pub fn prefix(&self, n: usize) -> Result<Self> {
        Ok(Self {
            frames: self.frames.slice_rows(0, n.min(self.len()))?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    pub states: Tensor,
    pub stride_ms: u32,
    /// Leading states that later input can no longer change.
    pub finalized: usize,
}

impl EncoderOutput {
    pub fn len(&self) -> usize {
        self.states.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Downsample projection, transformer blocks, output norm, then sinusoidal
/// positions added to the output states.
#[derive(Clone, Debug)]
pub struct SpeechEncoder {
    pub cfg: EncoderConfig,
    proj: Linear,
    blocks: Vec<TransformerBlock>,
    ln_out: LayerNorm,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct CacheKey {
    n_layers: usize,
    d_in: usize,
    d_model: usize,
    downsample: usize,
    window: [usize; 2],
}

#[derive(Clone, Debug, PartialEq)]
struct LayerCache {
    /// Absolute index of the first retained input row.
    offset: usize,
    rows: Option<Tensor>,
    /// Absolute index of the next output row to produce.
    next_out: usize,
}

impl LayerCache {
    fn available(&self) -> usize {
        self.offset + self.rows.as_ref().map_or(0, Tensor::rows)
    }
}

/// Session state for cache-aware causal encoding.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderCache {
    key: CacheKey,
    pending: Vec<f64>,
    steps_in: usize,
    layers: Vec<LayerCache>,
    emitted: usize,
    finished: bool,
}

impl EncoderCache {
    pub fn new(cfg: &EncoderConfig) -> Self {
        Self {
            key: CacheKey {
                n_layers: cfg.n_layers,
                d_in: cfg.d_in,
                d_model: cfg.d_model,
                downsample: cfg.downsample,
                window: cfg.causal_window(),
            },
            pending: Vec::new(),
            steps_in: 0,
            layers: (0..cfg.n_layers)
                .map(|_| LayerCache { offset: 0, rows: None, next_out: 0 })
                .collect(),
            emitted: 0,
            finished: false,
        }
    }

    /// Retained left-context rows at `layer`; never exceeds the left window.
    pub fn left_context_len(&self, layer: usize) -> usize {
        let l = &self.layers[layer];
        l.next_out - l.offset
    }

    /// Final states emitted so far.
    pub fn emitted(&self) -> usize {
        self.emitted
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }
}

fn append_rows(dst: &mut Option<Tensor>, new: &Tensor) -> Result<()> {
    *dst = Some(match dst.take() {
        Some(old) => Tensor::concat_rows(&[&old, new])?,
        None => new.clone(),
    });
    Ok(())
}

impl SpeechEncoder {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamStore, cfg: &EncoderConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let bc = cfg.block_config();
        Ok(Self {
            cfg: cfg.clone(),
            proj: Linear::new(ps, "encoder.downsample", cfg.d_in * cfg.downsample, cfg.d_model, true, rng),
            blocks: (0..cfg.n_layers)
                .map(|i| TransformerBlock::new(ps, &format!("encoder.block{i}"), &bc, false, rng))
                .collect(),
            ln_out: LayerNorm::new(ps, "encoder.ln_out", cfg.d_model),
        })
    }

    pub fn downsample_projection(&self) -> &Linear {
        &self.proj
    }

    /// Stacks `P` consecutive frames (zero-padding the tail) and projects to
    /// `d_model`: `[T_raw × d_in] → [ceil(T_raw/P) × d_model]`.
    pub fn downsample(&self, g: &mut Graph, ps: &ParamStore, frames: Var) -> Result<Var> {
        let shape = g.shape(frames).to_vec();
        if shape.len() != 2 || shape[1] != self.cfg.d_in {
            return Err(Error::Shape {
                op: "downsample",
                lhs: shape,
                rhs: vec![self.cfg.d_in],
            });
        }
        let p = self.cfg.downsample;
        let t_enc = shape[0].div_ceil(p);
        let pad = t_enc * p - shape[0];
        let padded = if pad > 0 {
            let zeros = g.constant(Tensor::zeros(&[pad, shape[1]]));
            g.concat_rows(&[frames, zeros])?
        } else {
            frames
        };
        let stacked = g.reshape(padded, vec![t_enc, p * shape[1]])?;
        self.proj.forward(g, ps, stacked)
    }

    fn finish_states(&self, g: &mut Graph, ps: &ParamStore, h: Var, start: usize) -> Result<Var> {
        let h = self.ln_out.forward(g, ps, h)?;
        let n = g.shape(h)[0];
        let pe = g.constant(positional_rows(start, n, self.cfg.d_model));
        g.add(h, pe)
    }

    /// Full-sequence encoding in the graph, using the configured mode's mask.
    pub fn encode_var(&self, g: &mut Graph, ps: &ParamStore, frames: Var) -> Result<Var> {
        let mut h = self.downsample(g, ps, frames)?;
        let mask = self.cfg.self_mask(g.shape(h)[0]);
        for block in &self.blocks {
            h = block.forward(g, ps, h, None, &mask, None)?;
        }
        self.finish_states(g, ps, h, 0)
    }

    /// Full-sequence encoding of a whole utterance under the configured mode.
    pub fn encode(&self, ps: &ParamStore, u: &SpeechUtterance) -> Result<EncoderOutput> {
        let mut g = Graph::new();
        let frames = g.constant(u.frames().clone());
        let out = self.encode_var(&mut g, ps, frames)?;
        let states = g.value(out).clone();
        Ok(EncoderOutput {
            finalized: states.rows(),
            states,
            stride_ms: self.cfg.stride_ms(),
        })
    }

    /// Bidirectional encoding of a complete utterance.
    pub fn encode_offline(&self, ps: &ParamStore, u: &SpeechUtterance) -> Result<EncoderOutput> {
        if self.cfg.mode == EncoderMode::Causal {
            return Err(invalid("encode_offline needs a bidirectional encoder"));
        }
        self.encode(ps, u)
    }

    /// Re-encodes an available prefix bidirectionally. States within
    /// `right_context_frames` of the prefix end stay provisional unless
    /// `complete` marks the prefix as the whole utterance.
    pub fn encode_streaming_bidi(
        &self,
        ps: &ParamStore,
        prefix: &SpeechUtterance,
        complete: bool,
    ) -> Result<EncoderOutput> {
        if self.cfg.mode != EncoderMode::BidiRecompute {
            return Err(invalid("encode_streaming_bidi needs mode bidi_recompute"));
        }
        let mut out = self.encode(ps, prefix)?;
        if !complete {
            out.finalized = out.len().saturating_sub(self.cfg.right_context_frames);
        }
        Ok(out)
    }

    /// Feeds a block of raw frames to a causal session. Returns the states
    /// that became final (possibly none) and the updated cache. `is_last`
    /// flushes the zero-padded tail and every pending lookahead.
    pub fn encode_causal_incremental(
        &self,
        ps: &ParamStore,
        block: Option<&Tensor>,
        mut cache: EncoderCache,
        is_last: bool,
    ) -> Result<(Option<Tensor>, EncoderCache)> {
        if self.cfg.mode != EncoderMode::Causal {
            return Err(invalid("encode_causal_incremental needs mode causal"));
        }
        let expected = EncoderCache::new(&self.cfg).key;
        if cache.key != expected {
            return Err(Error::CacheMismatch(format!("cache {:?} vs config {:?}", cache.key, expected)));
        }
        if cache.finished {
            return Err(invalid("causal encoder session already finished"));
        }
        let (d_in, p) = (self.cfg.d_in, self.cfg.downsample);
        if let Some(b) = block {
            if b.ndim() != 2 || b.cols() != d_in {
                return Err(Error::Shape {
                    op: "encode_causal_incremental",
                    lhs: b.shape().to_vec(),
                    rhs: vec![d_in],
                });
            }
            cache.pending.extend_from_slice(b.data());
        }
        let mut n_steps = cache.pending.len() / (p * d_in);
        if is_last && cache.pending.len() % (p * d_in) != 0 {
            cache.pending.resize((n_steps + 1) * p * d_in, 0.0);
            n_steps += 1;
        }
        let mut g = Graph::new();
        let mut new_rows: Option<Var> = None;
        if n_steps > 0 {
            let take = n_steps * p * d_in;
            let raw: Vec<f64> = cache.pending.drain(..take).collect();
            let stacked = g.constant(Tensor::new(vec![n_steps, p * d_in], raw)?);
            new_rows = Some(self.proj.forward(&mut g, ps, stacked)?);
            cache.steps_in += n_steps;
        }

        let [left, right] = self.cfg.causal_window();
        for (block, lc) in self.blocks.iter().zip(cache.layers.iter_mut()) {
            if let Some(rows) = new_rows {
                append_rows(&mut lc.rows, g.value(rows))?;
            }
            let avail = lc.available();
            let end = if is_last { avail } else { avail.saturating_sub(right) }.max(lc.next_out);
            if end == lc.next_out {
                new_rows = None;
                continue;
            }
            let start = lc.next_out;
            let k_start = start.saturating_sub(left);
            let k_end = (end - 1 + right + 1).min(avail);
            let stored = lc.rows.as_ref().expect("rows present when outputs are due");
            debug_assert!(k_start >= lc.offset);
            let xq = g.constant(stored.slice_rows(start - lc.offset, end - lc.offset)?);
            let xkv = g.constant(stored.slice_rows(k_start - lc.offset, k_end - lc.offset)?);
            let mask = AttentionMask::from_fn(end - start, k_end - k_start, |qi, kj| {
                let (i, j) = (start + qi, k_start + kj);
                j + left >= i && j <= i + right
            });
            let out = block.forward_with_keys(&mut g, ps, xq, Some(xkv), None, &mask, None)?;
            new_rows = Some(out);
            lc.next_out = end;
            let keep_from = lc.next_out.saturating_sub(left).max(lc.offset);
            if keep_from > lc.offset {
                let stored = lc.rows.take().expect("rows present");
                let n = stored.rows();
                let drop = keep_from - lc.offset;
                lc.rows = (drop < n).then(|| stored.slice_rows(drop, n)).transpose()?;
                lc.offset = keep_from;
            }
        }
        cache.finished = is_last;
        let delta = match new_rows {
            Some(h) => {
                let start = cache.emitted;
                let out = self.finish_states(&mut g, ps, h, start)?;
                let t = g.value(out).clone();
                cache.emitted += t.rows();
                Some(t)
            }
            None => None,
        };
        Ok((delta, cache))
    }

    /// Runs a whole utterance through the causal session in blocks of
    /// `block_frames` raw frames and concatenates the emitted states.
    pub fn encode_causal_blocks(&self, ps: &ParamStore, u: &SpeechUtterance, splits: &[usize]) -> Result<Tensor> {
        let mut cache = EncoderCache::new(&self.cfg);
        let mut parts = Vec::new();
        let mut start = 0;
        let mut bounds: Vec<usize> = splits.iter().copied().filter(|&s| s > 0 && s < u.len()).collect();
        bounds.sort_unstable();
        bounds.dedup();
        bounds.push(u.len());
        for (i, &end) in bounds.iter().enumerate() {
            let block = u.frames().slice_rows(start, end)?;
            let (delta, c) = self.encode_causal_incremental(ps, Some(&block), cache, i + 1 == bounds.len())?;
            cache = c;
            parts.extend(delta);
            start = end;
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        Tensor::concat_rows(&refs)
    }
}
