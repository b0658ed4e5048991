//! Speech encoder, text-query bridge and causal LLM backbone.
//!
//! Text embeddings (token table plus sinusoidal positions) are used as bridge
//! queries. The bridge runs `X` layers of causal self-attention followed by
//! cross-attention over encoder states (or a 2-layer tanh RNN followed by `X`
//! cross-attention layers). The cross-attention outputs are summed and added
//! to the text embeddings, and the result is the LLM input.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, SpeechEncoder, SpeechUtterance};
use crate::error::{invalid, Error, Result};
use crate::nn::{positional_rows, AttentionMask, LayerNorm, Linear, MultiHeadAttention, TransformerBlock, TransformerBlockConfig};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::policy::{schedule_mask, WaitKConfig};
use crate::prompt::{model_vocab, PromptLayout, EOS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryEncoder {
    CausalSelfAttention,
    Rnn,
}

impl std::str::FromStr for QueryEncoder {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "causal_self_attention" => Ok(Self::CausalSelfAttention),
            "rnn" => Ok(Self::Rnn),
            _ => Err(invalid(format!("unknown query encoder {s:?} (causal_self_attention, rnn)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BridgeConfig {
    /// Number of cross-attention layers (`X`).
    pub layers: usize,
    pub query_encoder: QueryEncoder,
    pub n_heads: usize,
}

impl Default for BridgeConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            query_encoder: QueryEncoder::CausalSelfAttention,
            n_heads: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Content tokens; reserved ids are added on top.
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub llm_layers: usize,
    pub bridge: BridgeConfig,
    pub encoder: EncoderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            llm_layers: 4,
            bridge: BridgeConfig::default(),
            encoder: EncoderConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bridge.layers == 0 {
            return Err(invalid("bridge needs at least one cross-attention layer"));
        }
        if self.vocab_size < 4 {
            return Err(invalid("vocab_size must be >= 4"));
        }
        if self.encoder.d_model != self.d_model {
            return Err(invalid(format!(
                "encoder d_model {} differs from model d_model {}",
                self.encoder.d_model, self.d_model
            )));
        }
        self.block_config().validate()?;
        TransformerBlockConfig { n_heads: self.bridge.n_heads, ..self.block_config() }.validate()?;
        self.encoder.validate()
    }

    pub fn block_config(&self) -> TransformerBlockConfig {
        TransformerBlockConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
        }
    }

    pub fn model_vocab(&self) -> usize {
        model_vocab(self.vocab_size)
    }
}

#[derive(Clone, Debug)]
struct BridgeLayer {
    self_attn: Option<(LayerNorm, MultiHeadAttention)>,
    ln_cross: LayerNorm,
    cross: MultiHeadAttention,
}

#[derive(Clone, Debug)]
struct Rnn {
    layers: Vec<(Linear, ParamId)>,
}

impl Rnn {
    /// `h_t = tanh(x_t·W + b + h_{t-1}·U)` per layer.
    fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        for (inp, rec) in &self.layers {
            let xw = inp.forward(g, ps, h)?;
            let u = g.param(ps, *rec);
            let mut rows = Vec::with_capacity(g.shape(xw)[0]);
            let mut prev: Option<Var> = None;
            for t in 0..g.shape(xw)[0] {
                let mut pre = g.slice_rows(xw, t, t + 1)?;
                if let Some(p) = prev {
                    let r = g.matmul(p, u)?;
                    pre = g.add(pre, r)?;
                }
                let ht = g.tanh(pre);
                rows.push(ht);
                prev = Some(ht);
            }
            h = g.concat_rows(&rows)?;
        }
        Ok(h)
    }
}

/// Parameters of the full speech LLM; values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct BestowModel {
    pub cfg: ModelConfig,
    pub encoder: SpeechEncoder,
    tok_emb: ParamId,
    rnn: Option<Rnn>,
    bridge: Vec<BridgeLayer>,
    llm: Vec<TransformerBlock>,
    ln_f: LayerNorm,
    head: Linear,
}

impl BestowModel {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let vocab = cfg.model_vocab();
        let tok_emb = ps.add("tok_emb", Tensor::randn(&[vocab, d], 1.0, rng));
        let encoder = SpeechEncoder::new(ps, &cfg.encoder, rng)?;
        let rnn = (cfg.bridge.query_encoder == QueryEncoder::Rnn).then(|| Rnn {
            layers: (0..2)
                .map(|i| {
                    let name = format!("bridge.rnn{i}");
                    let inp = Linear::new(ps, &format!("{name}.input"), d, d, true, rng);
                    let rec = ps.add(format!("{name}.recurrent"), Tensor::randn(&[d, d], 0.5 / (d as f64).sqrt(), rng));
                    (inp, rec)
                })
                .collect(),
        });
        let bh = cfg.bridge.n_heads;
        let bridge = (0..cfg.bridge.layers)
            .map(|i| {
                let name = format!("bridge.layer{i}");
                BridgeLayer {
                    self_attn: rnn.is_none().then(|| {
                        (
                            LayerNorm::new(ps, &format!("{name}.ln_self"), d),
                            MultiHeadAttention::new(ps, &format!("{name}.self_attn"), d, bh, rng),
                        )
                    }),
                    ln_cross: LayerNorm::new(ps, &format!("{name}.ln_cross"), d),
                    cross: MultiHeadAttention::new(ps, &format!("{name}.cross_attn"), d, bh, rng),
                }
            })
            .collect();
        let bc = cfg.block_config();
        let llm = (0..cfg.llm_layers)
            .map(|i| TransformerBlock::new(ps, &format!("llm.block{i}"), &bc, false, rng))
            .collect();
        let ln_f = LayerNorm::new(ps, "llm.ln_f", d);
        let head = Linear::new(ps, "llm.head", d, vocab, true, rng);
        // near-uniform predictions at initialisation
        for v in ps.get_mut(head.weight).data_mut() {
            *v *= 0.1;
        }
        Ok(Self { cfg: cfg.clone(), encoder, tok_emb, rnn, bridge, llm, ln_f, head })
    }

    pub fn vocab(&self) -> usize {
        self.cfg.model_vocab()
    }

    pub fn is_speech_param(ps: &ParamStore, id: ParamId) -> bool {
        let n = ps.name(id);
        n.starts_with("encoder.") || n.starts_with("bridge.")
    }

    /// Cross-attention output projections of every bridge layer.
    pub fn cross_output_projections(&self) -> Vec<ParamId> {
        self.bridge.iter().map(|l| l.cross.out.weight).collect()
    }

    /// Token embeddings plus positions `0..n`.
    pub fn text_embedding(&self, g: &mut Graph, ps: &ParamStore, ids: &[usize]) -> Result<Var> {
        if ids.is_empty() {
            return Err(invalid("empty token sequence"));
        }
        let table = g.param(ps, self.tok_emb);
        let e = g.embedding(table, ids)?;
        let pe = g.constant(positional_rows(0, ids.len(), self.cfg.d_model));
        g.add(e, pe)
    }

    /// Query encoder output: the text embeddings themselves for the
    /// self-attention variant (its causal self-attention runs inside each
    /// bridge layer), or the RNN states for the RNN variant.
    pub fn build_queries(&self, g: &mut Graph, ps: &ParamStore, text_emb: Var) -> Result<Var> {
        match &self.rnn {
            Some(rnn) => rnn.forward(g, ps, text_emb),
            None => Ok(text_emb),
        }
    }

    /// Runs the bridge and returns `text_emb + Σ cross-attention outputs`.
    /// `enc` of `None` gives the text embeddings unchanged.
    pub fn extract_features(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        queries: Var,
        text_emb: Var,
        enc: Option<Var>,
        cross_mask: &AttentionMask,
    ) -> Result<Var> {
        let Some(enc) = enc else {
            return Ok(text_emb);
        };
        let n = g.shape(queries)[0];
        let t_enc = g.shape(enc)[0];
        if cross_mask.rows() != n || cross_mask.cols() != t_enc {
            return Err(Error::Shape {
                op: "extract_features mask",
                lhs: vec![cross_mask.rows(), cross_mask.cols()],
                rhs: vec![n, t_enc],
            });
        }
        let causal = AttentionMask::causal(n);
        let mut h = queries;
        let mut out = text_emb;
        for layer in &self.bridge {
            if let Some((ln, sa)) = &layer.self_attn {
                let hn = ln.forward(g, ps, h)?;
                let a = sa.forward(g, ps, hn, hn, &causal)?;
                h = g.add(h, a)?;
            }
            let hn = layer.ln_cross.forward(g, ps, h)?;
            let c = layer.cross.forward(g, ps, hn, enc, cross_mask)?;
            h = g.add(h, c)?;
            out = g.add(out, c)?;
        }
        Ok(out)
    }

    /// Causal LLM over input features, returning `[T × vocab]` logits.
    pub fn llm_forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        let h = self.llm_hidden(g, ps, x)?;
        self.llm_head(g, ps, h)
    }

    /// Causal decoder blocks only.
    pub fn llm_hidden(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        let causal = AttentionMask::causal(g.shape(x)[0]);
        let mut h = x;
        for block in &self.llm {
            h = block.forward(g, ps, h, None, &causal, None)?;
        }
        Ok(h)
    }

    /// Final norm and vocabulary projection.
    pub fn llm_head(&self, g: &mut Graph, ps: &ParamStore, h: Var) -> Result<Var> {
        let h = self.ln_f.forward(g, ps, h)?;
        self.head.forward(g, ps, h)
    }

    /// Logits of a prompt against given encoder states and cross mask.
    pub fn logits_from_states(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        ids: &[usize],
        enc: Var,
        cross_mask: &AttentionMask,
    ) -> Result<Var> {
        let emb = self.text_embedding(g, ps, ids)?;
        let q = self.build_queries(g, ps, emb)?;
        let feats = self.extract_features(g, ps, q, emb, Some(enc), cross_mask)?;
        self.llm_forward(g, ps, feats)
    }

    /// LLM on the text embeddings alone; reads no encoder or bridge weights.
    pub fn text_only_forward(&self, g: &mut Graph, ps: &ParamStore, ids: &[usize]) -> Result<Var> {
        let emb = self.text_embedding(g, ps, ids)?;
        self.llm_forward(g, ps, emb)
    }

    /// Cross mask for a prompt: context rows before the last see no speech;
    /// later rows follow the wait-k schedule, or see everything offline.
    pub fn cross_mask(&self, prompt: &PromptLayout, t_enc: usize, mask_spec: Option<&WaitKConfig>) -> AttentionMask {
        let n = prompt.len();
        let b = prompt.mask_boundary();
        match mask_spec {
            Some(cfg) => schedule_mask(n, b, cfg, t_enc),
            None => AttentionMask::from_fn(n, t_enc, |r, _| r >= b),
        }
    }

    /// Full forward: encode in the graph, then bridge and LLM.
    pub fn forward(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        utterance: &SpeechUtterance,
        prompt: &PromptLayout,
        mask_spec: Option<&WaitKConfig>,
    ) -> Result<Var> {
        let frames = g.constant(utterance.frames().clone());
        self.forward_frames(g, ps, frames, prompt, mask_spec)
    }

    /// [`forward`](Self::forward) with frames already in the graph.
    pub fn forward_frames(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        frames: Var,
        prompt: &PromptLayout,
        mask_spec: Option<&WaitKConfig>,
    ) -> Result<Var> {
        prompt.check_vocab(self.vocab())?;
        let enc = self.encoder.encode_var(g, ps, frames)?;
        let mask = self.cross_mask(prompt, g.shape(enc)[0], mask_spec);
        self.logits_from_states(g, ps, &prompt.input_ids(), enc, &mask)
    }

    /// Greedy next token for `ids`, where row `r` may see the first
    /// `counts[r]` encoder states.
    pub fn next_token(&self, ps: &ParamStore, states: &Tensor, ids: &[usize], counts: &[usize]) -> Result<usize> {
        let mut g = Graph::new();
        let enc = g.constant(states.clone());
        let mask = AttentionMask::staircase(counts, states.rows());
        let logits = self.logits_from_states(&mut g, ps, ids, enc, &mask)?;
        Ok(g.value(logits).argmax_row(ids.len() - 1))
    }

    /// Greedy decoding against the complete utterance; every emitted token is
    /// fed back as a query and LLM input. Stops at EOS (not emitted) or
    /// `max_len`.
    pub fn decode_offline(
        &self,
        ps: &ParamStore,
        utterance: &SpeechUtterance,
        context: &[usize],
        max_len: usize,
    ) -> Result<Vec<usize>> {
        if max_len == 0 {
            return Ok(Vec::new());
        }
        let states = self.encoder.encode(ps, utterance)?.states;
        self.decode_with_states(ps, &states, context, max_len)
    }

    pub fn decode_with_states(
        &self,
        ps: &ParamStore,
        states: &Tensor,
        context: &[usize],
        max_len: usize,
    ) -> Result<Vec<usize>> {
        if context.is_empty() {
            return Err(invalid("decoding needs at least one context token"));
        }
        let t_enc = states.rows();
        let b = context.len() - 1;
        let mut ids = context.to_vec();
        let mut counts: Vec<usize> = (0..ids.len()).map(|r| if r < b { 0 } else { t_enc }).collect();
        let mut out = Vec::new();
        while out.len() < max_len {
            let tok = self.next_token(ps, states, &ids, &counts)?;
            if tok == EOS {
                break;
            }
            out.push(tok);
            ids.push(tok);
            counts.push(t_enc);
        }
        Ok(out)
    }

    /// Teacher-forced greedy predictions for the target positions.
    pub fn forced_predictions(
        &self,
        ps: &ParamStore,
        utterance: &SpeechUtterance,
        prompt: &PromptLayout,
        mask_spec: Option<&WaitKConfig>,
    ) -> Result<Vec<usize>> {
        let mut g = Graph::new();
        let logits = self.forward(&mut g, ps, utterance, prompt, mask_spec)?;
        let lv = g.value(logits);
        let b = prompt.mask_boundary();
        Ok((b..b + prompt.target_tokens.len()).map(|r| lv.argmax_row(r)).collect())
    }
}
