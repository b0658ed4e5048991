//! Token-level quality, length-adaptive average lagging, and K sweeps.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::encoder::FRAME_MS;
use crate::error::{invalid, Result};
use crate::model::BestowModel;
use crate::numerics::ParamStore;
use crate::policy::{simulate_delays, stream_decode, UtteranceSource, WaitKConfig};
use crate::synth::SynthExample;

#[derive(Clone, Debug, PartialEq)]
pub struct LaalInput {
    pub d: Vec<usize>,
    pub hyp_len: usize,
    pub ref_len: usize,
    pub source_len_frames: usize,
    pub frame_ms: u32,
}

impl LaalInput {
    pub fn new(d: Vec<usize>, ref_len: usize, source_len_frames: usize) -> Self {
        Self { hyp_len: d.len(), d, ref_len, source_len_frames, frame_ms: FRAME_MS }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Laal {
    pub ms: f64,
    pub tau: usize,
    /// No token was written after the full source; `tau` fell back to the
    /// hypothesis length.
    pub tau_defaulted: bool,
}

/// `(1/τ) Σ_{i≤τ} (d_i − (i−1)·S / max(|hyp|, |ref|))`, in milliseconds.
pub fn laal(input: &LaalInput) -> Result<Laal> {
    let LaalInput { d, hyp_len, ref_len, source_len_frames: s, frame_ms } = input;
    if d.is_empty() {
        return Err(invalid("LAAL of an empty delay sequence"));
    }
    if d.len() != *hyp_len {
        return Err(invalid(format!("{} delays for hypothesis length {hyp_len}", d.len())));
    }
    if *s == 0 {
        return Err(invalid("LAAL needs a non-empty source"));
    }
    if d.windows(2).any(|w| w[0] > w[1]) || d.iter().any(|x| x > s) {
        return Err(invalid("delays must be nondecreasing and within the source"));
    }
    let max_len = (*hyp_len).max(*ref_len) as f64;
    let found = d.iter().position(|x| x == s);
    let tau = found.map_or(*hyp_len, |i| i + 1);
    let sum: f64 = d[..tau]
        .iter()
        .enumerate()
        .map(|(i, &di)| di as f64 - (i * s) as f64 / max_len)
        .sum();
    Ok(Laal {
        ms: sum / tau as f64 * *frame_ms as f64,
        tau,
        tau_defaulted: found.is_none(),
    })
}

pub fn levenshtein(a: &[usize], b: &[usize]) -> usize {
    let mut row: Vec<usize> = (0..=b.len()).collect();
    for (i, x) in a.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let next = (row[j + 1] + 1).min(row[j] + 1).min(diag + usize::from(x != y));
            diag = row[j + 1];
            row[j + 1] = next;
        }
    }
    row[b.len()]
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ErrorRate {
    pub rate: f64,
    pub edits: usize,
    /// Empty reference with a non-empty hypothesis; `rate` is then the
    /// hypothesis length.
    pub empty_reference: bool,
}

pub fn token_error_rate(hyp: &[usize], reference: &[usize]) -> ErrorRate {
    let edits = levenshtein(hyp, reference);
    if reference.is_empty() {
        return ErrorRate { rate: hyp.len() as f64, edits, empty_reference: !hyp.is_empty() };
    }
    ErrorRate { rate: edits as f64 / reference.len() as f64, edits, empty_reference: false }
}

/// Positions where both sequences agree.
pub fn positional_matches(hyp: &[usize], reference: &[usize]) -> usize {
    hyp.iter().zip(reference).filter(|(a, b)| a == b).count()
}

/// Positional matches over the longer length; 1 for two empty sequences.
pub fn token_accuracy(hyp: &[usize], reference: &[usize]) -> f64 {
    let n = hyp.len().max(reference.len());
    if n == 0 {
        return 1.0;
    }
    positional_matches(hyp, reference) as f64 / n as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    /// Teacher forcing under the schedule mask; delays from the
    /// availability simulation and hypothesis length = reference length.
    Forced,
    /// Free-running streaming decode.
    Free,
}

impl std::str::FromStr for DecodeMode {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forced" => Ok(Self::Forced),
            "free" => Ok(Self::Free),
            _ => Err(invalid(format!("unknown decode mode {s:?} (forced, free)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QualityMetric {
    /// Corpus token accuracy: Σ positional matches / Σ max(|hyp|, |ref|).
    Accuracy,
    /// Corpus token error rate: Σ edits / Σ |ref|.
    ErrorRate,
}

impl std::str::FromStr for QualityMetric {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "accuracy" => Ok(Self::Accuracy),
            "error_rate" => Ok(Self::ErrorRate),
            _ => Err(invalid(format!("unknown quality metric {s:?} (accuracy, error_rate)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
struct QualityTally {
    num: usize,
    den: usize,
}

impl QualityTally {
    fn add(&mut self, metric: QualityMetric, hyp: &[usize], reference: &[usize]) {
        match metric {
            QualityMetric::Accuracy => {
                self.num += positional_matches(hyp, reference);
                self.den += hyp.len().max(reference.len());
            }
            QualityMetric::ErrorRate => {
                self.num += levenshtein(hyp, reference);
                self.den += reference.len();
            }
        }
    }

    fn value(&self, metric: QualityMetric) -> f64 {
        match (self.den, metric) {
            (0, QualityMetric::Accuracy) => 1.0,
            (0, QualityMetric::ErrorRate) => 0.0,
            _ => self.num as f64 / self.den as f64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    /// Encoder steps per READ.
    pub l: usize,
    pub mode: DecodeMode,
    pub quality: QualityMetric,
    /// Range the model was trained with; Ks outside it produce a warning.
    pub trained_k_range: Option<[usize; 2]>,
    /// Free decoding stops after `ref_len + max_len_slack` tokens.
    pub max_len_slack: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            l: 4,
            mode: DecodeMode::Forced,
            quality: QualityMetric::Accuracy,
            trained_k_range: None,
            max_len_slack: 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TradeoffPoint {
    pub k: usize,
    pub laal_ms: f64,
    pub quality: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub points: Vec<TradeoffPoint>,
    pub warnings: Vec<String>,
}

/// Quality and mean LAAL of one K over a dataset.
pub fn evaluate_k(
    model: &BestowModel,
    ps: &ParamStore,
    data: &[SynthExample],
    k: usize,
    cfg: &SweepConfig,
    warnings: &mut Vec<String>,
) -> Result<TradeoffPoint> {
    if data.is_empty() {
        return Err(invalid("evaluation needs at least one example"));
    }
    let wk = WaitKConfig::new(k, cfg.l, model.cfg.encoder.downsample)?;
    let mut tally = QualityTally::default();
    let mut laal_sum = 0.0;
    let mut empty = 0;
    for ex in data {
        let reference = &ex.prompt.target_tokens;
        let frames = ex.utterance.len();
        let (hyp, d) = match cfg.mode {
            DecodeMode::Forced => {
                let hyp = model.forced_predictions(ps, &ex.utterance, &ex.prompt, Some(&wk))?;
                let d = simulate_delays(&wk, &model.cfg.encoder, frames, reference.len());
                (hyp, d)
            }
            DecodeMode::Free => {
                let mut src = UtteranceSource::new(&ex.utterance);
                let max_len = reference.len() + cfg.max_len_slack;
                let out = stream_decode(model, ps, &mut src, &ex.prompt.context_tokens, &wk, max_len)?;
                (out.tokens, out.trace.d)
            }
        };
        tally.add(cfg.quality, &hyp, reference);
        if d.is_empty() {
            // nothing written: charge the whole source
            empty += 1;
            laal_sum += (frames as u64 * FRAME_MS as u64) as f64;
        } else {
            laal_sum += laal(&LaalInput::new(d, reference.len(), frames))?.ms;
        }
    }
    if empty > 0 {
        warnings.push(format!("K={k}: {empty} empty hypotheses charged full source latency"));
    }
    Ok(TradeoffPoint {
        k,
        laal_ms: laal_sum / data.len() as f64,
        quality: tally.value(cfg.quality),
        n: data.len(),
    })
}

/// One tradeoff point per K, sorted by K.
pub fn sweep_k(
    model: &BestowModel,
    ps: &ParamStore,
    data: &[SynthExample],
    ks: &[usize],
    cfg: &SweepConfig,
) -> Result<SweepResult> {
    if ks.is_empty() {
        return Err(invalid("sweep needs at least one K"));
    }
    let mut ks = ks.to_vec();
    ks.sort_unstable();
    ks.dedup();
    let mut warnings = Vec::new();
    let mut points = Vec::with_capacity(ks.len());
    for k in ks {
        if let Some([lo, hi]) = cfg.trained_k_range {
            if k < lo || k > hi {
                warnings.push(format!("K={k} outside trained range [{lo}, {hi}]"));
            }
        }
        points.push(evaluate_k(model, ps, data, k, cfg, &mut warnings)?);
    }
    Ok(SweepResult { points, warnings })
}

/// Offline quality: teacher-forced predictions with full speech visibility
/// (forced mode) or greedy offline decoding (free mode).
pub fn offline_quality(model: &BestowModel, ps: &ParamStore, data: &[SynthExample], cfg: &SweepConfig) -> Result<f64> {
    let mut tally = QualityTally::default();
    for ex in data {
        let reference = &ex.prompt.target_tokens;
        let hyp = match cfg.mode {
            DecodeMode::Forced => model.forced_predictions(ps, &ex.utterance, &ex.prompt, None)?,
            DecodeMode::Free => model.decode_offline(
                ps,
                &ex.utterance,
                &ex.prompt.context_tokens,
                reference.len() + cfg.max_len_slack,
            )?,
        };
        tally.add(cfg.quality, &hyp, reference);
    }
    Ok(tally.value(cfg.quality))
}

pub const TRADEOFF_HEADER: &str = "K,laal_ms,quality,n";

pub fn tradeoff_csv(points: &[TradeoffPoint]) -> String {
    let mut s = format!("{TRADEOFF_HEADER}\n");
    for p in points {
        let _ = writeln!(s, "{},{},{},{}", p.k, p.laal_ms, p.quality, p.n);
    }
    s
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn approx(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-9 * b.abs().max(1.0)
    }

    #[test]
    fn laal_hand_example() {
        let r = laal(&LaalInput::new(vec![48, 64, 80, 96], 4, 96)).unwrap();
        assert_eq!(r.ms, 360.0);
        assert_eq!(r.tau, 4);
        assert!(!r.tau_defaulted);
    }

    #[test]
    fn laal_offline_is_source_duration() {
        for (n, s) in [(1, 7), (5, 96), (12, 1000)] {
            let r = laal(&LaalInput::new(vec![s; n], n, s)).unwrap();
            assert_eq!(r.ms, s as f64 * 10.0);
            assert_eq!(r.tau, 1);
        }
    }

    #[test]
    fn laal_errors_and_defaults() {
        assert!(laal(&LaalInput::new(vec![], 3, 10)).is_err());
        assert!(laal(&LaalInput::new(vec![5, 4], 2, 10)).is_err());
        assert!(laal(&LaalInput::new(vec![5, 11], 2, 10)).is_err());
        let mut bad = LaalInput::new(vec![1, 2], 2, 10);
        bad.hyp_len = 3;
        assert!(laal(&bad).is_err());
        let r = laal(&LaalInput::new(vec![4, 6], 2, 10)).unwrap();
        assert!(r.tau_defaulted);
        assert_eq!(r.tau, 2);
        assert_eq!(r.ms, (4.0 + (6.0 - 5.0)) / 2.0 * 10.0);
    }

    #[test]
    fn laal_lower_bound_single_read() {
        let p = 8;
        let r = laal(&LaalInput::new(vec![p, 2 * p, 3 * p], 3, 3 * p)).unwrap();
        assert!(r.ms >= (p * 10) as f64);
    }

    #[test]
    fn error_rate_examples() {
        assert_eq!(token_error_rate(&[1, 2, 3], &[1, 2, 3]).rate, 0.0);
        assert_eq!(token_error_rate(&[1, 2, 3], &[1, 9, 3]).rate, 1.0 / 3.0);
        let e = token_error_rate(&[1, 2], &[]);
        assert!(e.empty_reference);
        assert_eq!(e.rate, 2.0);
        assert!(!token_error_rate(&[], &[]).empty_reference);
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(token_accuracy(&[1, 2, 3], &[1, 2, 3]), 1.0);
        assert_eq!(token_accuracy(&[1, 2], &[1, 2, 3, 4]), 0.5);
        assert_eq!(token_accuracy(&[], &[]), 1.0);
    }

    #[test]
    fn csv_layout() {
        let pts = [TradeoffPoint { k: 3, laal_ms: 360.0, quality: 0.5, n: 2 }];
        assert_eq!(tradeoff_csv(&pts), "K,laal_ms,quality,n\n3,360,0.5,2\n");
    }

    /// Full-matrix recursion, independent of the rolling-row version.
    fn edit_distance_oracle(a: &[usize], b: &[usize]) -> usize {
        let mut m = vec![vec![0usize; b.len() + 1]; a.len() + 1];
        for (i, row) in m.iter_mut().enumerate() {
            row[0] = i;
        }
        for j in 0..=b.len() {
            m[0][j] = j;
        }
        for i in 1..=a.len() {
            for j in 1..=b.len() {
                let sub = m[i - 1][j - 1] + if a[i - 1] == b[j - 1] { 0 } else { 1 };
                m[i][j] = sub.min(m[i - 1][j] + 1).min(m[i][j - 1] + 1);
            }
        }
        m[a.len()][b.len()]
    }

    proptest! {
        #[test]
        fn levenshtein_matches_oracle(a in prop::collection::vec(0usize..5, 0..12), b in prop::collection::vec(0usize..5, 0..12)) {
            prop_assert_eq!(levenshtein(&a, &b), edit_distance_oracle(&a, &b));
            prop_assert_eq!(levenshtein(&a, &b), levenshtein(&b, &a));
        }

        #[test]
        fn error_rate_bounds(a in prop::collection::vec(0usize..5, 0..12), b in prop::collection::vec(0usize..5, 1..12)) {
            let r = token_error_rate(&a, &b).rate;
            prop_assert!(r >= 0.0);
            prop_assert!(r <= 1f64.max(a.len() as f64 / b.len() as f64) + 1e-12);
            prop_assert_eq!(r == 0.0, a == b);
        }

        #[test]
        fn laal_scales_with_source(
            steps in prop::collection::vec(0usize..5, 1..10),
            extra in 0usize..20,
            c in 1usize..6,
            ref_len in 1usize..12,
        ) {
            let mut d = Vec::new();
            let mut acc = 1;
            for s in steps {
                acc += s;
                d.push(acc);
            }
            let s = acc + extra;
            let base = laal(&LaalInput::new(d.clone(), ref_len, s)).unwrap().ms;
            let scaled = laal(&LaalInput::new(d.iter().map(|x| x * c).collect(), ref_len, s * c)).unwrap().ms;
            prop_assert!(approx(scaled, base * c as f64), "{} vs {}", scaled, base * c as f64);
        }
    }
}
