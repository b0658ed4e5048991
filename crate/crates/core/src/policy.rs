//! Wait-k read/write policy: visibility law, staircase training masks and the
//! interleaved streaming decode loop.

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderCache, EncoderConfig, EncoderMode, SpeechUtterance, FRAME_MS};
use crate::error::{invalid, Error, Result};
use crate::model::BestowModel;
use crate::nn::AttentionMask;
use crate::numerics::{ParamStore, Tensor};
use crate::prompt::EOS;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WaitKConfig {
    pub k: usize,
    /// Encoder steps per READ.
    pub l: usize,
    /// Raw frames per encoder step.
    pub p: usize,
}

impl Default for WaitKConfig {
    fn default() -> Self {
        Self { k: 10, l: 4, p: 8 }
    }
}

impl WaitKConfig {
    pub fn new(k: usize, l: usize, p: usize) -> Result<Self> {
        let cfg = Self { k, l, p };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.l == 0 || self.p == 0 {
            return Err(invalid(format!("wait-k needs K, L, P >= 1 (got {}, {}, {})", self.k, self.l, self.p)));
        }
        Ok(())
    }

    /// Audio covered by one READ.
    pub fn step_ms(&self) -> u32 {
        (self.l * self.p) as u32 * FRAME_MS
    }

    pub fn read_frames(&self) -> usize {
        self.l * self.p
    }

    /// Whether the schedule sees the whole source from the first token.
    pub fn saturates(&self, t_enc: usize) -> bool {
        self.k * self.l >= t_enc
    }
}

/// Encoder steps visible when emitting target token `i` (1-based).
pub fn visible_steps(i: usize, cfg: &WaitKConfig, t_enc: usize) -> usize {
    debug_assert!(i >= 1);
    ((cfg.k + i - 1) * cfg.l).min(t_enc)
}

/// Cross mask for `l_t` query rows: rows before `boundary` see nothing, row
/// `r ≥ boundary` (target index `r − boundary + 1`) sees a visible prefix.
pub fn schedule_mask(l_t: usize, boundary: usize, cfg: &WaitKConfig, t_enc: usize) -> AttentionMask {
    let counts: Vec<usize> = (0..l_t)
        .map(|r| if r < boundary { 0 } else { visible_steps(r - boundary + 1, cfg, t_enc) })
        .collect();
    AttentionMask::staircase(&counts, t_enc)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StreamEvent {
    Read { frames: usize },
    Write { token: usize, d: usize },
}

impl std::fmt::Display for StreamEvent {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Read { frames } => write!(f, "READ {frames}"),
            Self::Write { token, d } => write!(f, "WRITE {token} {d}"),
        }
    }
}

impl std::str::FromStr for StreamEvent {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Format(format!("bad trace line {s:?}"));
        let parts: Vec<&str> = s.split_whitespace().collect();
        let num = |t: &str| t.parse::<usize>().map_err(|_| bad());
        match parts.as_slice() {
            ["READ", n] => Ok(Self::Read { frames: num(n)? }),
            ["WRITE", t, d] => Ok(Self::Write { token: num(t)?, d: num(d)? }),
            _ => Err(bad()),
        }
    }
}

/// One event per line.
pub fn format_events(events: &[StreamEvent]) -> String {
    events.iter().map(|e| format!("{e}\n")).collect()
}

pub fn parse_events(text: &str) -> Result<Vec<StreamEvent>> {
    text.lines().filter(|l| !l.trim().is_empty()).map(str::parse).collect()
}

/// Source frames consumed before each written token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LatencyTrace {
    pub d: Vec<usize>,
    pub source_len_frames: usize,
}

impl LatencyTrace {
    pub fn frame_ms(&self) -> u32 {
        FRAME_MS
    }

    pub fn from_events(events: &[StreamEvent], source_len_frames: usize) -> Self {
        let d = events
            .iter()
            .filter_map(|e| match e {
                StreamEvent::Write { d, .. } => Some(*d),
                StreamEvent::Read { .. } => None,
            })
            .collect();
        Self { d, source_len_frames }
    }
}

pub struct FrameChunk {
    pub frames: Option<Tensor>,
    pub end_of_stream: bool,
}

/// Incremental supplier of raw frames.
pub trait FrameSource {
    /// Up to `max_frames` further frames; `end_of_stream` is set on the chunk
    /// that exhausts the source.
    fn next_chunk(&mut self, max_frames: usize) -> Result<FrameChunk>;

    /// Total length when known in advance.
    fn total_frames(&self) -> Option<usize> {
        None
    }
}

/// Serves a stored utterance chunk by chunk.
pub struct UtteranceSource<'a> {
    utterance: &'a SpeechUtterance,
    pos: usize,
}

impl<'a> UtteranceSource<'a> {
    pub fn new(utterance: &'a SpeechUtterance) -> Self {
        Self { utterance, pos: 0 }
    }
}

impl FrameSource for UtteranceSource<'_> {
    fn next_chunk(&mut self, max_frames: usize) -> Result<FrameChunk> {
        let n = self.utterance.len();
        let end = (self.pos + max_frames).min(n);
        let frames = (end > self.pos).then(|| self.utterance.frames().slice_rows(self.pos, end)).transpose()?;
        self.pos = end;
        Ok(FrameChunk { frames, end_of_stream: end == n })
    }

    fn total_frames(&self) -> Option<usize> {
        Some(self.utterance.len())
    }
}

/// What a policy sees before each decision.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PolicyState {
    pub written: usize,
    /// Final encoder states available now.
    pub available: usize,
    /// Set once the source is exhausted.
    pub exhausted: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Action {
    Read,
    /// Write the next token attending to the first `visible` states.
    Write { visible: usize },
}

pub trait Policy {
    fn name(&self) -> &'static str;
    fn decide(&self, state: &PolicyState) -> Action;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WaitK(pub WaitKConfig);

impl Policy for WaitK {
    fn name(&self) -> &'static str {
        "waitk"
    }

    fn decide(&self, s: &PolicyState) -> Action {
        let c = &self.0;
        let needed = (c.k + s.written) * c.l;
        if s.exhausted {
            Action::Write { visible: needed.min(s.available) }
        } else if s.available >= needed {
            Action::Write { visible: needed }
        } else {
            Action::Read
        }
    }
}

pub const SUPPORTED_POLICIES: &[&str] = &["waitk"];

pub fn attach_policy(kind: &str, cfg: WaitKConfig) -> Result<Box<dyn Policy>> {
    match kind {
        "waitk" => {
            cfg.validate()?;
            Ok(Box::new(WaitK(cfg)))
        }
        _ => Err(Error::UnknownPolicy {
            kind: kind.to_string(),
            supported: SUPPORTED_POLICIES.join(", "),
        }),
    }
}

/// Frames consumed before each of `n_tokens` writes, simulating reads of
/// `L·P` frames against the encoder's availability law.
pub fn simulate_delays(cfg: &WaitKConfig, enc: &EncoderConfig, source_frames: usize, n_tokens: usize) -> Vec<usize> {
    let policy = WaitK(*cfg);
    let mut read = 0;
    let mut d = Vec::with_capacity(n_tokens);
    while d.len() < n_tokens {
        let exhausted = read >= source_frames;
        let state = PolicyState {
            written: d.len(),
            available: enc.available_states(read, exhausted),
            exhausted,
        };
        match policy.decide(&state) {
            Action::Read => read = (read + cfg.read_frames()).min(source_frames),
            Action::Write { .. } => d.push(read),
        }
    }
    d
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct StreamOutput {
    pub tokens: Vec<usize>,
    pub events: Vec<StreamEvent>,
    pub trace: LatencyTrace,
}

impl Default for LatencyTrace {
    fn default() -> Self {
        Self { d: Vec::new(), source_len_frames: 0 }
    }
}

/// A failed session with everything recorded up to the failure.
#[derive(Debug)]
pub struct StreamFailure {
    pub error: Error,
    pub partial: StreamOutput,
}

impl std::fmt::Display for StreamFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} (after {} events)", self.error, self.partial.events.len())
    }
}

impl std::error::Error for StreamFailure {}

impl From<StreamFailure> for Error {
    fn from(f: StreamFailure) -> Self {
        f.error
    }
}

enum EncoderSession {
    Causal { cache: Option<EncoderCache>, states: Vec<Tensor> },
    Recompute { frames: Vec<Tensor>, states: Option<Tensor>, finalized: usize },
}

impl EncoderSession {
    fn new(model: &BestowModel) -> Result<Self> {
        match model.cfg.encoder.mode {
            EncoderMode::Causal => Ok(Self::Causal {
                cache: Some(EncoderCache::new(&model.cfg.encoder)),
                states: Vec::new(),
            }),
            EncoderMode::BidiRecompute => Ok(Self::Recompute { frames: Vec::new(), states: None, finalized: 0 }),
            EncoderMode::Bidi => Err(invalid("streaming needs encoder mode causal or bidi_recompute")),
        }
    }

    fn feed(&mut self, model: &BestowModel, ps: &ParamStore, block: Option<Tensor>, last: bool) -> Result<()> {
        match self {
            Self::Causal { cache, states } => {
                let c = cache.take().expect("cache present between feeds");
                let (delta, c) = model.encoder.encode_causal_incremental(ps, block.as_ref(), c, last)?;
                *cache = Some(c);
                states.extend(delta);
            }
            Self::Recompute { frames, states, finalized } => {
                frames.extend(block);
                if frames.is_empty() {
                    return Ok(());
                }
                let refs: Vec<&Tensor> = frames.iter().collect();
                let prefix = SpeechUtterance::new(Tensor::concat_rows(&refs)?)?;
                let out = model.encoder.encode_streaming_bidi(ps, &prefix, last)?;
                *finalized = out.finalized;
                *states = Some(out.states);
            }
        }
        Ok(())
    }

    fn available(&self) -> usize {
        match self {
            Self::Causal { states, .. } => states.iter().map(Tensor::rows).sum(),
            Self::Recompute { finalized, .. } => *finalized,
        }
    }

    fn states(&self, n: usize) -> Result<Tensor> {
        match self {
            Self::Causal { states, .. } => {
                let refs: Vec<&Tensor> = states.iter().collect();
                Tensor::concat_rows(&refs)?.slice_rows(0, n)
            }
            Self::Recompute { states, .. } => states.as_ref().expect("states after first read").slice_rows(0, n),
        }
    }
}

/// Wait-k streaming decode.
pub fn stream_decode(
    model: &BestowModel,
    ps: &ParamStore,
    source: &mut dyn FrameSource,
    context: &[usize],
    cfg: &WaitKConfig,
    max_len: usize,
) -> std::result::Result<StreamOutput, StreamFailure> {
    stream_decode_with(model, ps, source, context, &WaitK(*cfg), cfg.read_frames(), max_len)
}

/// Streaming decode under any policy: READ takes `read_frames` frames, WRITE
/// emits the greedy token given the policy's visible prefix, earlier rows
/// keeping the prefixes they were written with. After the source ends no
/// further READs occur. EOS ends the session and is not emitted.
pub fn stream_decode_with(
    model: &BestowModel,
    ps: &ParamStore,
    source: &mut dyn FrameSource,
    context: &[usize],
    policy: &dyn Policy,
    read_frames: usize,
    max_len: usize,
) -> std::result::Result<StreamOutput, StreamFailure> {
    let mut out = StreamOutput::default();
    let mut frames_read = 0;
    let result = run_session(model, ps, source, context, policy, read_frames, max_len, &mut out, &mut frames_read);
    out.trace = LatencyTrace::from_events(&out.events, source.total_frames().unwrap_or(frames_read));
    match result {
        Ok(()) => Ok(out),
        Err(error) => Err(StreamFailure { error, partial: out }),
    }
}

#[allow(clippy::too_many_arguments)]
fn run_session(
    model: &BestowModel,
    ps: &ParamStore,
    source: &mut dyn FrameSource,
    context: &[usize],
    policy: &dyn Policy,
    read_frames: usize,
    max_len: usize,
    out: &mut StreamOutput,
    frames_read: &mut usize,
) -> Result<()> {
    if context.is_empty() {
        return Err(invalid("streaming needs at least one context token"));
    }
    if read_frames == 0 {
        return Err(invalid("READ size must be positive"));
    }
    let mut session = EncoderSession::new(model)?;
    let mut exhausted = false;
    let mut ids = context.to_vec();
    let mut counts = vec![0; context.len() - 1];
    while out.tokens.len() < max_len {
        let state = PolicyState {
            written: out.tokens.len(),
            available: session.available(),
            exhausted,
        };
        match policy.decide(&state) {
            Action::Read if !exhausted => {
                let chunk = source.next_chunk(read_frames).map_err(|e| match e {
                    Error::FrameSource(m) => Error::FrameSource(m),
                    other => Error::FrameSource(other.to_string()),
                })?;
                let n = chunk.frames.as_ref().map_or(0, Tensor::rows);
                if n > 0 {
                    *frames_read += n;
                    out.events.push(StreamEvent::Read { frames: n });
                }
                exhausted = chunk.end_of_stream;
                session.feed(model, ps, chunk.frames, exhausted)?;
            }
            Action::Read => return Err(invalid(format!("policy {} asked to read an exhausted source", policy.name()))),
            Action::Write { visible } => {
                if visible == 0 || visible > session.available() {
                    return Err(invalid(format!(
                        "policy {} wrote with {visible} of {} available states",
                        policy.name(),
                        session.available()
                    )));
                }
                counts.push(visible);
                let states = session.states(visible)?;
                let tok = model.next_token(ps, &states, &ids, &counts)?;
                if tok == EOS {
                    break;
                }
                out.tokens.push(tok);
                out.events.push(StreamEvent::Write { token: tok, d: *frames_read });
                ids.push(tok);
            }
        }
    }
    Ok(())
}
