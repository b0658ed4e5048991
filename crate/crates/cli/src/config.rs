//! Run configuration as flat dotted keys.
//!
//! Resolution order, lowest to highest: built-in default, config file,
//! command-line flags (`--set key=value` and the dedicated flags).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use bestow_core::bench::{BenchConfig, DEFAULT_GRID};
use bestow_core::encoder::{EncoderConfig, EncoderMode};
use bestow_core::metrics::{DecodeMode, QualityMetric, SweepConfig};
use bestow_core::model::{BridgeConfig, ModelConfig, QueryEncoder};
use bestow_core::numerics::AdamConfig;
use bestow_core::policy::WaitKConfig;
use bestow_core::synth::{SynthTaskSpec, TaskKind};
use bestow_core::train::TrainConfig;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{usage, CliResult};

/// `(key, default, description)` for every accepted key.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "0", "root seed; data, init, batch and K-sampling streams derive from it"),
    ("out", "runs/default", "output directory"),
    ("data.dir", "", "dataset directory written by `gen`"),
    ("task.kind", "copy", "copy | shift_vocab | local_reorder"),
    ("task.vocab", "64", "content vocabulary size V"),
    ("task.min_len", "4", "shortest source sequence"),
    ("task.max_len", "8", "longest source sequence"),
    ("task.U", "16", "raw frames per source token"),
    ("task.noise_std", "0.1", "frame noise"),
    ("task.frame_dim", "16", "raw frame width"),
    ("task.shift_offset", "1", "offset of shift_vocab"),
    ("task.reorder_window", "2", "window of local_reorder"),
    ("task.n", "4096", "training examples"),
    ("task.test_n", "256", "held-out examples"),
    ("model.d_model", "64", "model width"),
    ("model.n_heads", "4", "LLM attention heads"),
    ("model.d_ff", "256", "LLM feed-forward width"),
    ("model.llm_layers", "4", "LLM decoder blocks"),
    ("bridge.X", "2", "bridge layers"),
    ("bridge.query_encoder", "causal_self_attention", "causal_self_attention | rnn"),
    ("bridge.n_heads", "4", "bridge attention heads"),
    ("encoder.mode", "causal", "bidi | bidi_recompute | causal"),
    ("encoder.P", "8", "raw frames per encoder step"),
    ("encoder.layers", "2", "encoder blocks"),
    ("encoder.n_heads", "4", "encoder attention heads"),
    ("encoder.d_ff", "256", "encoder feed-forward width"),
    ("encoder.right_context", "13", "steps withheld by bidi_recompute"),
    ("encoder.windows", "70:13,70:6,70:1,70:0", "causal [left:right] windows in encoder steps"),
    ("encoder.window_index", "3", "active causal window"),
    ("policy.kind", "waitk", "read/write policy"),
    ("policy.K", "10", "wait-k K"),
    ("policy.L", "4", "encoder steps per READ"),
    ("policy.k_range", "3,12", "training K range, inclusive"),
    ("policy.stream_fraction", "0", "share of training examples under a streaming mask"),
    ("train.lr", "1e-4", "Adam learning rate"),
    ("train.weight_decay", "1e-3", "decoupled weight decay"),
    ("train.clip", "1.0", "global gradient-norm clip"),
    ("train.steps", "2000", "optimizer steps"),
    ("train.batch", "8", "examples per step"),
    ("train.eval_every", "200", "steps between evaluation rows and checkpoints"),
    ("train.eval_n", "64", "held-out examples used by evaluation rows"),
    ("eval.mode", "offline", "offline | stream"),
    ("eval.decode", "free", "forced | free"),
    ("eval.quality", "accuracy", "accuracy | error_rate"),
    ("eval.n", "0", "held-out examples to evaluate, 0 for all"),
    ("eval.traces", "false", "write per-example READ/WRITE traces in stream mode"),
    ("sweep.ks", "3..12", "K values: a range a..b or a list a,b,c"),
    ("sweep.decode", "forced", "forced | free"),
    ("bench.grid", "16x128,16x256,16x512,16x1024", "L_t x L_a grid points"),
    ("bench.reps", "7", "timed repetitions per point"),
    ("bench.warmup", "1", "untimed repetitions per point"),
];

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_config_text(text: &str) -> CliResult<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| usage(format!("config line {}: expected key=value", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn parse_assignment(s: &str) -> CliResult<(String, String)> {
    let (k, v) = s.split_once('=').ok_or_else(|| usage(format!("expected key=value, got {s:?}")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

/// RNG for one named sub-stream of the root seed.
pub fn substream(seed: u64, name: &str) -> ChaCha8Rng {
    // FNV-1a of the name selects the ChaCha stream
    let id = name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { values: KEYS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect() }
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> CliResult<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(usage(format!("unknown config key {key:?}"))),
        }
    }

    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> CliResult<Self> {
        let mut cfg = Self::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
            for (k, v) in parse_config_text(&text)? {
                cfg.set(&k, &v)?;
            }
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("undeclared key {key}"))
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> CliResult<T>
    where
        T::Err: std::fmt::Display,
    {
        let v = self.get(key);
        v.parse().map_err(|e| usage(format!("{key}={v}: {e}")))
    }

    pub fn entries(&self) -> &BTreeMap<String, String> {
        &self.values
    }

    /// Round-trips through [`parse_config_text`].
    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn seed(&self) -> CliResult<u64> {
        self.parse("seed")
    }

    pub fn out(&self) -> PathBuf {
        PathBuf::from(self.get("out"))
    }

    pub fn data_dir(&self) -> CliResult<PathBuf> {
        match self.get("data.dir") {
            "" => Err(usage("no dataset given (--data or data.dir)")),
            d => Ok(PathBuf::from(d)),
        }
    }

    pub fn task_spec(&self) -> CliResult<SynthTaskSpec> {
        let spec = SynthTaskSpec {
            kind: self.parse::<TaskKind>("task.kind")?,
            vocab_size: self.parse("task.vocab")?,
            min_len: self.parse("task.min_len")?,
            max_len: self.parse("task.max_len")?,
            upsample: self.parse("task.U")?,
            noise_std: self.parse("task.noise_std")?,
            frame_dim: self.parse("task.frame_dim")?,
            shift_offset: self.parse("task.shift_offset")?,
            reorder_window: self.parse("task.reorder_window")?,
            seed: substream(self.seed()?, "data").next_u64(),
        };
        spec.validate().map_err(|e| usage(e.to_string()))?;
        Ok(spec)
    }

    pub fn dataset_sizes(&self) -> CliResult<(usize, usize)> {
        let n: usize = self.parse("task.n")?;
        let test_n: usize = self.parse("task.test_n")?;
        if n == 0 || test_n == 0 {
            return Err(usage("task.n and task.test_n must be at least 1"));
        }
        Ok((n, test_n))
    }

    pub fn encoder_config(&self) -> CliResult<EncoderConfig> {
        Ok(EncoderConfig {
            mode: self.parse::<EncoderMode>("encoder.mode")?,
            downsample: self.parse("encoder.P")?,
            n_layers: self.parse("encoder.layers")?,
            d_in: self.parse("task.frame_dim")?,
            d_model: self.parse("model.d_model")?,
            n_heads: self.parse("encoder.n_heads")?,
            d_ff: self.parse("encoder.d_ff")?,
            right_context_frames: self.parse("encoder.right_context")?,
            causal_context_windows: parse_windows(self.get("encoder.windows"))?,
            window_index: self.parse("encoder.window_index")?,
            bidi_window: None,
        })
    }

    /// Model shape; vocabulary and frame width follow the task keys.
    pub fn model_config(&self) -> CliResult<ModelConfig> {
        let cfg = ModelConfig {
            vocab_size: self.parse("task.vocab")?,
            d_model: self.parse("model.d_model")?,
            n_heads: self.parse("model.n_heads")?,
            d_ff: self.parse("model.d_ff")?,
            llm_layers: self.parse("model.llm_layers")?,
            bridge: BridgeConfig {
                layers: self.parse("bridge.X")?,
                query_encoder: self.parse::<QueryEncoder>("bridge.query_encoder")?,
                n_heads: self.parse("bridge.n_heads")?,
            },
            encoder: self.encoder_config()?,
        };
        cfg.validate().map_err(|e| usage(e.to_string()))?;
        Ok(cfg)
    }

    pub fn k_range(&self) -> CliResult<[usize; 2]> {
        let v = self.get("policy.k_range");
        let parts = parse_usize_list(v)?;
        match parts.as_slice() {
            [lo, hi] => Ok([*lo, *hi]),
            _ => Err(usage(format!("policy.k_range={v}: expected lo,hi"))),
        }
    }

    pub fn train_config(&self) -> CliResult<TrainConfig> {
        let tc = TrainConfig {
            adam: AdamConfig {
                lr: self.parse("train.lr")?,
                weight_decay: self.parse("train.weight_decay")?,
                ..AdamConfig::default()
            },
            clip_norm: self.parse("train.clip")?,
            steps: self.parse("train.steps")?,
            batch_size: self.parse("train.batch")?,
            k_range: self.k_range()?,
            stream_fraction: self.parse("policy.stream_fraction")?,
            l: self.parse("policy.L")?,
        };
        tc.validate().map_err(|e| usage(e.to_string()))?;
        Ok(tc)
    }

    pub fn wait_k(&self, p: usize) -> CliResult<WaitKConfig> {
        WaitKConfig::new(self.parse("policy.K")?, self.parse("policy.L")?, p).map_err(|e| usage(e.to_string()))
    }

    pub fn sweep_config(&self, decode_key: &str) -> CliResult<SweepConfig> {
        Ok(SweepConfig {
            l: self.parse("policy.L")?,
            mode: self.parse::<DecodeMode>(decode_key)?,
            quality: self.parse::<QualityMetric>("eval.quality")?,
            trained_k_range: Some(self.k_range()?),
            ..SweepConfig::default()
        })
    }

    pub fn sweep_ks(&self) -> CliResult<Vec<usize>> {
        parse_ks(self.get("sweep.ks"))
    }

    pub fn bench_config(&self) -> CliResult<BenchConfig> {
        Ok(BenchConfig {
            model: self.model_config()?,
            repetitions: self.parse("bench.reps")?,
            warmup: self.parse("bench.warmup")?,
            seed: substream(self.seed()?, "init").next_u64(),
        })
    }

    pub fn bench_grid(&self) -> CliResult<Vec<(usize, usize)>> {
        parse_grid(self.get("bench.grid"))
    }
}

fn parse_usize_list(s: &str) -> CliResult<Vec<usize>> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| p.trim().parse().map_err(|_| usage(format!("bad integer {p:?} in {s:?}"))))
        .collect()
}

/// `a..b` (inclusive) or `a,b,c`.
pub fn parse_ks(s: &str) -> CliResult<Vec<usize>> {
    let ks = match s.split_once("..") {
        Some((a, b)) => {
            let a: usize = a.trim().parse().map_err(|_| usage(format!("bad K range {s:?}")))?;
            let b: usize = b.trim().parse().map_err(|_| usage(format!("bad K range {s:?}")))?;
            (a..=b).collect()
        }
        None => parse_usize_list(s)?,
    };
    if ks.is_empty() {
        return Err(usage("empty K list"));
    }
    if ks.contains(&0) {
        return Err(usage("K must be at least 1"));
    }
    Ok(ks)
}

/// `LxA,LxA,...`; an empty string selects the default grid.
pub fn parse_grid(s: &str) -> CliResult<Vec<(usize, usize)>> {
    if s.trim().is_empty() {
        return Ok(DEFAULT_GRID.to_vec());
    }
    s.split(',')
        .map(|p| {
            let (a, b) = p.trim().split_once('x').ok_or_else(|| usage(format!("bad grid point {p:?}")))?;
            let a = a.parse().map_err(|_| usage(format!("bad grid point {p:?}")))?;
            let b = b.parse().map_err(|_| usage(format!("bad grid point {p:?}")))?;
            Ok((a, b))
        })
        .collect()
}

fn parse_windows(s: &str) -> CliResult<Vec<[usize; 2]>> {
    s.split(',')
        .map(|p| {
            let (l, r) = p.trim().split_once(':').ok_or_else(|| usage(format!("bad window {p:?}")))?;
            let l = l.parse().map_err(|_| usage(format!("bad window {p:?}")))?;
            let r = r.parse().map_err(|_| usage(format!("bad window {p:?}")))?;
            Ok([l, r])
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve() {
        let c = RunConfig::default();
        let tc = c.train_config().unwrap();
        assert_eq!(tc.adam.lr, 1e-4);
        assert_eq!(tc.adam.weight_decay, 1e-3);
        assert_eq!(tc.clip_norm, 1.0);
        assert_eq!(tc.k_range, [3, 12]);
        let wk = c.wait_k(8).unwrap();
        assert_eq!((wk.k, wk.l, wk.p), (10, 4, 8));
        assert_eq!(c.model_config().unwrap().encoder.causal_context_windows.len(), 4);
        assert_eq!(c.sweep_ks().unwrap(), (3..=12).collect::<Vec<_>>());
        assert_eq!(c.bench_grid().unwrap(), DEFAULT_GRID.to_vec());
    }

    #[test]
    fn text_round_trip_and_comments() {
        let mut c = RunConfig::default();
        c.set("policy.K", "7").unwrap();
        let mut d = RunConfig::default();
        for (k, v) in parse_config_text(&c.to_text()).unwrap() {
            d.set(&k, &v).unwrap();
        }
        assert_eq!(c, d);
        let kv = parse_config_text("# header\n\n policy.K = 5 # trailing\n").unwrap();
        assert_eq!(kv, vec![("policy.K".to_string(), "5".to_string())]);
        assert!(parse_config_text("no equals sign").is_err());
    }

    #[test]
    fn unknown_key_and_bad_values_rejected() {
        let mut c = RunConfig::default();
        assert!(c.set("policy.k", "5").is_err());
        c.set("policy.K", "0").unwrap();
        assert!(c.wait_k(8).is_err());
        assert!(parse_ks("").is_err());
        assert!(parse_ks("0..3").is_err());
        assert_eq!(parse_ks("3,6").unwrap(), vec![3, 6]);
        assert!(parse_grid("16-128").is_err());
    }

    #[test]
    fn substreams_are_independent_of_each_other() {
        let a = substream(1, "data").next_u64();
        assert_eq!(a, substream(1, "data").next_u64());
        assert_ne!(a, substream(1, "init").next_u64());
        assert_ne!(a, substream(2, "data").next_u64());
    }
}
