//! One function per subcommand. Each writes its artifacts plus a manifest
//! into the configured output directory.

use std::fmt::Write as _;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::time::Instant;

use bestow_core::bench::{report, run_bench};
use bestow_core::checkpoint;
use bestow_core::metrics::{evaluate_k, laal, offline_quality, sweep_k, tradeoff_csv, DecodeMode, LaalInput, SweepConfig};
use bestow_core::model::BestowModel;
use bestow_core::numerics::{AdamState, ParamStore};
use bestow_core::policy::{attach_policy, format_events, UtteranceSource};
use bestow_core::prompt::id_to_content;
use bestow_core::synth::{generate_range, read_dataset, write_dataset, SynthExample, SynthTaskSpec};
use bestow_core::train::{eval_loss, train_step, BatchSampler};

use crate::config::{parse_ks, substream, RunConfig};
use crate::error::{usage, CliError, CliResult};
use crate::manifest::{verify_artifact, RunManifest};

pub const TRAIN_FILE: &str = "train.tsv";
pub const TEST_FILE: &str = "test.tsv";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOSS_HEADER: &str = "step,loss,grad_norm,eval_loss,eval_quality";
pub const EVAL_HEADER: &str = "mode,K,L,decode,quality,laal_ms,n";
pub const STREAM_HEADER: &str = "index,hyp,ref,laal_ms";

#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub out_dir: PathBuf,
    pub files: Vec<PathBuf>,
    pub summary: String,
    pub warnings: Vec<String>,
}

fn prepare_out(dir: &Path, force: bool) -> CliResult<()> {
    if dir.exists() && std::fs::read_dir(dir)?.next().is_some() && !force {
        return Err(usage(format!("output directory {} is not empty (use --force)", dir.display())));
    }
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn write_file(path: &Path, contents: &str, files: &mut Vec<PathBuf>) -> CliResult<()> {
    std::fs::write(path, contents).map_err(|e| CliError { kind: "io", message: format!("{}: {e}", path.display()) })?;
    files.push(path.to_path_buf());
    Ok(())
}

pub fn load_split(path: &Path) -> CliResult<(SynthTaskSpec, Vec<SynthExample>)> {
    verify_artifact(path)?;
    let f = std::fs::File::open(path).map_err(|e| CliError { kind: "io", message: format!("{}: {e}", path.display()) })?;
    Ok(read_dataset(BufReader::new(f))?)
}

pub fn load_model(path: &Path) -> CliResult<(BestowModel, ParamStore)> {
    verify_artifact(path)?;
    Ok(checkpoint::load(path)?)
}

fn check_compatible(model: &BestowModel, spec: &SynthTaskSpec) -> CliResult<()> {
    if model.cfg.vocab_size != spec.vocab_size || model.cfg.encoder.d_in != spec.frame_dim {
        return Err(usage(format!(
            "model (vocab {}, frame_dim {}) does not fit the dataset (vocab {}, frame_dim {})",
            model.cfg.vocab_size, model.cfg.encoder.d_in, spec.vocab_size, spec.frame_dim
        )));
    }
    Ok(())
}

fn limit(data: &[SynthExample], n: usize) -> &[SynthExample] {
    if n == 0 {
        data
    } else {
        &data[..n.min(data.len())]
    }
}

fn join_content(ids: &[usize]) -> String {
    ids.iter().map(|&t| id_to_content(t).map_or_else(|| format!("<{t}>"), |c| c.to_string())).collect::<Vec<_>>().join(" ")
}

pub fn cmd_gen(cfg: &RunConfig, force: bool) -> CliResult<Outcome> {
    let t0 = Instant::now();
    let spec = cfg.task_spec()?;
    let (n, test_n) = cfg.dataset_sizes()?;
    let out = cfg.out();
    prepare_out(&out, force)?;
    let mut files = Vec::new();
    for (name, start, count) in [(TRAIN_FILE, 0, n), (TEST_FILE, n, test_n)] {
        let examples = generate_range(&spec, start, count)?;
        let mut buf = Vec::new();
        write_dataset(&mut buf, &spec, &examples)?;
        write_file(&out.join(name), &String::from_utf8(buf).expect("dataset is UTF-8"), &mut files)?;
    }
    write_file(&out.join("config.txt"), &cfg.to_text(), &mut files)?;
    RunManifest::new("gen", cfg).write(&out, &files, t0.elapsed().as_secs_f64())?;
    Ok(Outcome {
        summary: format!("{n} train and {test_n} test examples of {} in {}", spec.kind.name(), out.display()),
        out_dir: out,
        files,
        warnings: Vec::new(),
    })
}

fn eval_metrics(model: &BestowModel, ps: &ParamStore, data: &[SynthExample], sc: &SweepConfig) -> CliResult<(f64, f64)> {
    let batch: Vec<_> = data.iter().map(|e| (&e.utterance, &e.prompt)).collect();
    let loss = eval_loss(model, ps, &batch, None)?;
    let q = offline_quality(model, ps, data, &SweepConfig { mode: DecodeMode::Forced, ..*sc })?;
    Ok((loss, q))
}

/// Trains from scratch, or continues `init_from` (optimizer state restarts).
/// The checkpoint is rewritten only at evaluation points that come out
/// finite, so a non-finite loss aborts with the last good one in place.
pub fn cmd_train(cfg: &RunConfig, init_from: Option<&Path>, force: bool) -> CliResult<Outcome> {
    let t0 = Instant::now();
    let data_dir = cfg.data_dir()?;
    let (spec, train) = load_split(&data_dir.join(TRAIN_FILE))?;
    let (_, test) = load_split(&data_dir.join(TEST_FILE))?;
    let tc = cfg.train_config()?;
    let eval_every: usize = cfg.parse("train.eval_every")?;
    let eval_set = limit(&test, cfg.parse("train.eval_n")?);
    let sc = cfg.sweep_config("eval.decode")?;
    let seed = cfg.seed()?;
    let (model, mut ps) = match init_from {
        Some(p) => load_model(p)?,
        None => {
            let mut ps = ParamStore::new();
            let m = BestowModel::new(&mut ps, &cfg.model_config()?, &mut substream(seed, "init"))?;
            (m, ps)
        }
    };
    check_compatible(&model, &spec)?;
    let out = cfg.out();
    prepare_out(&out, force)?;
    let ckpt = out.join(CHECKPOINT_FILE);
    let mut manifest = RunManifest::new("train", cfg);
    manifest.add_input(&data_dir.join(TRAIN_FILE))?;
    manifest.add_input(&data_dir.join(TEST_FILE))?;
    if let Some(p) = init_from {
        manifest.add_input(p)?;
    }

    let mut batch_rng = substream(seed, "batch");
    let mut k_rng = substream(seed, "k");
    let mut sampler = BatchSampler::new(train.len());
    let mut state = AdamState::default();
    let mut csv = format!("{LOSS_HEADER}\n");
    let (l0, q0) = eval_metrics(&model, &ps, eval_set, &sc)?;
    let _ = writeln!(csv, "0,,,{l0},{q0}");
    checkpoint::save(&ckpt, &model.cfg, &ps)?;
    let mut last = (f64::NAN, l0, q0);
    let mut failure: Option<(usize, CliError)> = None;
    for step in 1..=tc.steps {
        let idx = sampler.next_batch(tc.batch_size, &mut batch_rng);
        let batch: Vec<_> = idx.iter().map(|&i| (&train[i].utterance, &train[i].prompt)).collect();
        match train_step(&model, &mut ps, &batch, &mut state, &tc, &mut k_rng) {
            Ok(r) => {
                let _ = write!(csv, "{step},{},{}", r.loss, r.grad_norm);
                last.0 = r.loss;
                if step == tc.steps || (eval_every > 0 && step % eval_every == 0) {
                    match eval_metrics(&model, &ps, eval_set, &sc) {
                        Ok((l, q)) => {
                            let _ = writeln!(csv, ",{l},{q}");
                            last = (r.loss, l, q);
                            checkpoint::save(&ckpt, &model.cfg, &ps)?;
                        }
                        Err(e) => {
                            csv.push_str(",,\n");
                            failure = Some((step, e));
                            break;
                        }
                    }
                } else {
                    csv.push_str(",,\n");
                }
            }
            Err(e) => {
                failure = Some((step, e.into()));
                break;
            }
        }
    }
    let mut files = Vec::new();
    files.push(ckpt.clone());
    write_file(&out.join("loss.csv"), &csv, &mut files)?;
    write_file(&out.join("config.txt"), &cfg.to_text(), &mut files)?;
    manifest.write(&out, &files, t0.elapsed().as_secs_f64())?;
    if let Some((step, mut err)) = failure {
        err.message = format!("{} at step {step}; last good checkpoint kept in {}", err.message, ckpt.display());
        return Err(err);
    }
    Ok(Outcome {
        summary: format!(
            "{} steps: final loss {:.4}, held-out loss {:.4}, held-out quality {:.4}",
            tc.steps, last.0, last.1, last.2
        ),
        out_dir: out,
        files,
        warnings: Vec::new(),
    })
}

/// Offline or streaming quality on the held-out split. Streaming mode needs
/// an explicit K.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, mode: Option<&str>, k: Option<usize>) -> CliResult<Outcome> {
    let t0 = Instant::now();
    let mode = mode.unwrap_or(cfg.get("eval.mode"));
    let (model, ps) = load_model(checkpoint)?;
    let data_dir = cfg.data_dir()?;
    let (spec, test) = load_split(&data_dir.join(TEST_FILE))?;
    check_compatible(&model, &spec)?;
    let data = limit(&test, cfg.parse("eval.n")?);
    let sc = cfg.sweep_config("eval.decode")?;
    let decode = cfg.get("eval.decode");
    let out = cfg.out();
    std::fs::create_dir_all(&out)?;
    let mut files = Vec::new();
    let mut warnings = Vec::new();
    let mut csv = format!("{EVAL_HEADER}\n");
    let summary = match mode {
        "offline" => {
            let q = offline_quality(&model, &ps, data, &sc)?;
            let _ = writeln!(csv, "offline,,,{decode},{q},,{}", data.len());
            format!("offline quality {q:.4} on {} examples", data.len())
        }
        "stream" => {
            let k = k.ok_or_else(|| usage("--mode stream needs --k"))?;
            let p = sc;
            let pt = evaluate_k(&model, &ps, data, k, &p, &mut warnings)?;
            let _ = writeln!(csv, "stream,{k},{},{decode},{},{},{}", p.l, pt.quality, pt.laal_ms, pt.n);
            if cfg.parse::<bool>("eval.traces")? {
                let wk = bestow_core::policy::WaitKConfig::new(k, p.l, model.cfg.encoder.downsample)?;
                let mut traces = String::new();
                for ex in data {
                    let max_len = ex.prompt.target_tokens.len() + p.max_len_slack;
                    let mut src = UtteranceSource::new(&ex.utterance);
                    let o = bestow_core::policy::stream_decode(&model, &ps, &mut src, &ex.prompt.context_tokens, &wk, max_len)
                        .map_err(|f| CliError::from(f.error))?;
                    let _ = writeln!(traces, "# example {}", ex.index);
                    traces.push_str(&format_events(&o.events));
                }
                write_file(&out.join("traces.txt"), &traces, &mut files)?;
            }
            format!("K={k}: quality {:.4}, mean LAAL {:.1} ms on {} examples", pt.quality, pt.laal_ms, pt.n)
        }
        other => return Err(usage(format!("unknown eval mode {other:?} (offline, stream)"))),
    };
    files.insert(0, out.join("eval.csv"));
    std::fs::write(&files[0], csv)?;
    let mut manifest = RunManifest::new("eval", cfg);
    manifest.add_input(checkpoint)?;
    manifest.write(&out, &files, t0.elapsed().as_secs_f64())?;
    Ok(Outcome { out_dir: out, files, summary, warnings })
}

/// Free-running streaming decode of held-out utterances under the configured
/// policy, with per-example READ/WRITE traces.
pub fn cmd_stream(cfg: &RunConfig, checkpoint: &Path, k: Option<usize>) -> CliResult<Outcome> {
    let t0 = Instant::now();
    let (model, ps) = load_model(checkpoint)?;
    let data_dir = cfg.data_dir()?;
    let (spec, test) = load_split(&data_dir.join(TEST_FILE))?;
    check_compatible(&model, &spec)?;
    let data = limit(&test, cfg.parse("eval.n")?);
    let mut wk = cfg.wait_k(model.cfg.encoder.downsample)?;
    if let Some(k) = k {
        wk.k = k;
        wk.validate()?;
    }
    let policy = attach_policy(cfg.get("policy.kind"), wk)?;
    let out = cfg.out();
    std::fs::create_dir_all(&out)?;
    let mut csv = format!("{STREAM_HEADER}\n");
    let mut events = String::new();
    let mut laal_sum = 0.0;
    let mut failure = None;
    for ex in data {
        let max_len = ex.prompt.target_tokens.len() + SweepConfig::default().max_len_slack;
        let mut src = UtteranceSource::new(&ex.utterance);
        let res = bestow_core::policy::stream_decode_with(
            &model,
            &ps,
            &mut src,
            &ex.prompt.context_tokens,
            policy.as_ref(),
            wk.read_frames(),
            max_len,
        );
        let o = match res {
            Ok(o) => o,
            Err(f) => {
                let _ = writeln!(events, "# example {} (failed)", ex.index);
                events.push_str(&format_events(&f.partial.events));
                failure = Some(CliError::from(f.error));
                break;
            }
        };
        let la = if o.trace.d.is_empty() {
            ex.utterance.duration_ms() as f64
        } else {
            laal(&LaalInput::new(o.trace.d.clone(), ex.prompt.target_tokens.len(), ex.utterance.len()))?.ms
        };
        laal_sum += la;
        let _ = writeln!(csv, "{},{},{},{la}", ex.index, join_content(&o.tokens), join_content(&ex.prompt.target_tokens));
        let _ = writeln!(events, "# example {}", ex.index);
        events.push_str(&format_events(&o.events));
    }
    let mut files = Vec::new();
    write_file(&out.join("stream.csv"), &csv, &mut files)?;
    write_file(&out.join("events.txt"), &events, &mut files)?;
    let mut manifest = RunManifest::new("stream", cfg);
    manifest.add_input(checkpoint)?;
    manifest.write(&out, &files, t0.elapsed().as_secs_f64())?;
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(Outcome {
        summary: format!(
            "streamed {} examples at K={} L={}: mean LAAL {:.1} ms",
            data.len(),
            wk.k,
            wk.l,
            laal_sum / data.len().max(1) as f64
        ),
        out_dir: out,
        files,
        warnings: Vec::new(),
    })
}

/// Latency-quality tradeoff over `ks` (or `sweep.ks`).
pub fn cmd_sweep(cfg: &RunConfig, checkpoint: &Path, ks: Option<&str>) -> CliResult<Outcome> {
    let t0 = Instant::now();
    let ks = match ks {
        Some(s) => parse_ks(s)?,
        None => cfg.sweep_ks()?,
    };
    let (model, ps) = load_model(checkpoint)?;
    let data_dir = cfg.data_dir()?;
    let (spec, test) = load_split(&data_dir.join(TEST_FILE))?;
    check_compatible(&model, &spec)?;
    let data = limit(&test, cfg.parse("eval.n")?);
    let sc = cfg.sweep_config("sweep.decode")?;
    let res = sweep_k(&model, &ps, data, &ks, &sc)?;
    let offline = offline_quality(&model, &ps, data, &sc)?;
    let out = cfg.out();
    std::fs::create_dir_all(&out)?;
    let mut files = Vec::new();
    write_file(&out.join("tradeoff.csv"), &tradeoff_csv(&res.points), &mut files)?;
    let mut manifest = RunManifest::new("sweep", cfg);
    manifest.add_input(checkpoint)?;
    manifest.write(&out, &files, t0.elapsed().as_secs_f64())?;
    let mut summary = format!("offline quality {offline:.4}\n");
    for p in &res.points {
        let _ = writeln!(summary, "K={:>2} LAAL {:>8.1} ms quality {:.4}", p.k, p.laal_ms, p.quality);
    }
    Ok(Outcome { out_dir: out, files, summary, warnings: res.warnings })
}

/// Prepend vs cross-attention fusion on `grid` (or `bench.grid`).
pub fn cmd_bench(cfg: &RunConfig, grid: Option<&str>) -> CliResult<Outcome> {
    let t0 = Instant::now();
    let grid = match grid {
        Some(s) => crate::config::parse_grid(s)?,
        None => cfg.bench_grid()?,
    };
    let results = run_bench(&grid, &cfg.bench_config()?)?;
    let (csv, summary) = report(&results)?;
    let out = cfg.out();
    std::fs::create_dir_all(&out)?;
    let mut files = Vec::new();
    write_file(&out.join("bench.csv"), &csv, &mut files)?;
    write_file(&out.join("bench_summary.txt"), &summary, &mut files)?;
    RunManifest::new("bench", cfg).write(&out, &files, t0.elapsed().as_secs_f64())?;
    Ok(Outcome { out_dir: out, files, summary, warnings: Vec::new() })
}
