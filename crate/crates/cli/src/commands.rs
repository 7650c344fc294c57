use std::path::{Path, PathBuf};
use std::time::Instant;

use kqprune_core::diagnostics::spectrum_over_tokens;
use kqprune_core::linalg::rho_for_selection;
use kqprune_core::mixers::{flops_per_step, layer_mixer_flops, mixer_core, Variant};
use kqprune_core::pruning::{
    retained_width, CalibrationStats, CapturePoint, SelectionMode, Strategy,
};
use kqprune_core::random::{gaussian_matrix, rng_for};
use kqprune_core::tasks::{
    calibration_set, eval_recall, eval_set, gen_recall, prune_model, recovery_finetune, to_jsonl,
    train_toy, RecallExample, ToyModel, FINETUNE_STREAM, TRAIN_STREAM,
};
use kqprune_core::verify::{run_all, VerifyOptions, VerifyReport};
use kqprune_core::Matrix;
use serde::Serialize;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const CHECKPOINT_DIR: &str = "checkpoint";

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    std::fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).expect("plain data");
    write_file(path, text + "\n")
}

fn eval_examples(cfg: &RunConfig) -> CliResult<Vec<RecallExample>> {
    Ok(eval_set(&cfg.task, cfg.eval_sequences)?)
}

fn check_vocab(cfg: &RunConfig, model: &ToyModel) -> CliResult<()> {
    if model.vocab() != cfg.task.vocab {
        return Err(CliError::Config(format!(
            "checkpoint vocabulary {} differs from task.vocab {}",
            model.vocab(),
            cfg.task.vocab
        )));
    }
    Ok(())
}

#[derive(Debug, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct TrainMetrics {
    pub seed: u64,
    pub steps: usize,
    pub accuracy: f64,
    pub final_loss: f64,
    pub losses: Vec<f64>,
}

pub fn train(cfg: &RunConfig) -> CliResult<TrainMetrics> {
    cfg.validate()?;
    let mut model = ToyModel::init(&cfg.model, cfg.seed)?;
    let report = train_toy(&mut model, &cfg.task, &cfg.train)?;
    let accuracy = eval_recall(&model, &eval_examples(cfg)?)?;
    let out = &cfg.output_dir;
    checkpoint::save(&model, &out.join(CHECKPOINT_DIR))?;
    let metrics = TrainMetrics {
        seed: cfg.seed,
        steps: report.losses.len(),
        accuracy,
        final_loss: report.trailing_mean(report.losses.len(), 100),
        losses: report.losses,
    };
    write_json(&out.join("config.json"), cfg)?;
    write_json(&out.join("metrics.json"), &metrics)?;
    println!(
        "trained {} steps: recall accuracy {:.4}, final loss {:.4}",
        metrics.steps, metrics.accuracy, metrics.final_loss
    );
    Ok(metrics)
}

pub fn eval(cfg: &RunConfig, ckpt: &Path) -> CliResult<f64> {
    cfg.validate()?;
    let model = checkpoint::load(ckpt)?;
    check_vocab(cfg, &model)?;
    let accuracy = eval_recall(&model, &eval_examples(cfg)?)?;
    println!("{}", serde_json::json!({ "accuracy": accuracy }));
    Ok(accuracy)
}

#[derive(Debug, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct FinetuneMetrics {
    pub steps: usize,
    pub accuracy_before: f64,
    pub accuracy_after: f64,
    pub losses: Vec<f64>,
}

pub fn finetune(cfg: &RunConfig, ckpt: &Path) -> CliResult<FinetuneMetrics> {
    cfg.validate()?;
    let mut model = checkpoint::load(ckpt)?;
    check_vocab(cfg, &model)?;
    let examples = eval_examples(cfg)?;
    let before = eval_recall(&model, &examples)?;
    let report = recovery_finetune(&mut model, &cfg.task, &cfg.finetune)?;
    let after = eval_recall(&model, &examples)?;
    checkpoint::save(&model, &cfg.output_dir.join(CHECKPOINT_DIR))?;
    let metrics = FinetuneMetrics {
        steps: report.losses.len(),
        accuracy_before: before,
        accuracy_after: after,
        losses: report.losses,
    };
    write_json(&cfg.output_dir.join("finetune_metrics.json"), &metrics)?;
    println!("recovery fine-tune: accuracy {before:.4} -> {after:.4}");
    Ok(metrics)
}

/// Activation dump sufficient to re-check a plan.
#[derive(Debug, Serialize, serde::Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CalibrationDump {
    pub mode: SelectionMode,
    pub f: f64,
    pub capture: CapturePoint,
    pub layers: Vec<CalibrationStats>,
}

#[derive(Debug, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct HeadSummary {
    pub layer: usize,
    pub head: usize,
    pub key_dim_before: usize,
    pub key_dim_after: usize,
    pub utilization_before: f64,
    pub utilization_after: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_rho: Option<f64>,
}

#[derive(Debug, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct PruneReport {
    pub strategy: Strategy,
    pub mode: SelectionMode,
    pub ratio: f64,
    pub f: f64,
    pub accuracy_before: f64,
    pub accuracy_after: f64,
    pub heads: Vec<HeadSummary>,
}

/// Rows `layer,head,token,utilization` over one probe sequence.
fn utilization_table(
    model: &ToyModel,
    tokens: &[usize],
    skip: usize,
) -> CliResult<(String, Vec<Vec<f64>>)> {
    let hs = model.hidden_states(tokens)?;
    let mut csv = String::from("layer,head,token,utilization\n");
    let mut means = Vec::new();
    for (l, layer) in model.layers.iter().enumerate() {
        let rep = spectrum_over_tokens(layer, &hs[l], model.variant, skip)?;
        let body = rep.utilization_csv();
        for line in body.lines().skip(1) {
            csv.push_str(&format!("{l},{line}\n"));
        }
        means.push(rep.heads.iter().map(|h| h.utilization).collect());
    }
    Ok((csv, means))
}

pub fn prune(cfg: &RunConfig, ckpt: &Path) -> CliResult<PruneReport> {
    cfg.validate()?;
    let model = checkpoint::load(ckpt)?;
    check_vocab(cfg, &model)?;
    let s = &cfg.prune;
    let calib = calibration_set(&cfg.task, s.seed, s.calibration_sequences)?;
    let outcome = prune_model(&model, &calib, s)?;
    let out = &cfg.output_dir;
    checkpoint::save(&outcome.model, &out.join(CHECKPOINT_DIR))?;
    write_json(&out.join("plan.json"), &outcome.plan)?;
    if !outcome.stats.is_empty() {
        let dump = CalibrationDump {
            mode: s.mode,
            f: s.f,
            capture: s.capture,
            layers: outcome.stats.clone(),
        };
        write_json(&out.join("calibration.json"), &dump)?;
    }
    if let Some(tr) = &outcome.transforms {
        write_json(&out.join("pca_transforms.json"), tr)?;
    }
    let examples = eval_examples(cfg)?;
    let probe = &examples[0].tokens;
    let (before_csv, before) = utilization_table(&model, probe, cfg.spectrum_skip)?;
    let (after_csv, after) = utilization_table(&outcome.model, probe, cfg.spectrum_skip)?;
    write_file(&out.join("rank_before.csv"), before_csv)?;
    write_file(&out.join("rank_after.csv"), after_csv)?;
    let mut heads = Vec::new();
    for (l, lp) in outcome.plan.layers.iter().enumerate() {
        for (h, hp) in lp.heads.iter().enumerate() {
            let max_rho = if s.strategy == Strategy::Drrqr {
                let m = outcome.stats[l].heads[h].activations(s.mode)?;
                if hp.retained.len() < m.cols() {
                    Some(rho_for_selection(&m, &hp.retained, s.f)?.0.max_abs())
                } else {
                    None
                }
            } else {
                None
            };
            heads.push(HeadSummary {
                layer: l,
                head: h,
                key_dim_before: model.layers[l].heads[h].key_dim(),
                key_dim_after: outcome.model.layers[l].heads[h].key_dim(),
                utilization_before: before[l][h],
                utilization_after: after[l][h],
                max_rho,
            });
        }
    }
    let report = PruneReport {
        strategy: s.strategy,
        mode: s.mode,
        ratio: s.ratio,
        f: s.f,
        accuracy_before: eval_recall(&model, &examples)?,
        accuracy_after: eval_recall(&outcome.model, &examples)?,
        heads,
    };
    write_json(&out.join("prune_report.json"), &report)?;
    println!(
        "pruned with {} ({}), ratio {}: accuracy {:.4} -> {:.4}",
        s.strategy, s.mode, s.ratio, report.accuracy_before, report.accuracy_after
    );
    for h in &report.heads {
        println!(
            "  layer {} head {}: d_k {} -> {}, utilization {:.4} -> {:.4}",
            h.layer,
            h.head,
            h.key_dim_before,
            h.key_dim_after,
            h.utilization_before,
            h.utilization_after
        );
    }
    Ok(report)
}

/// Per-layer spectra of the state over the first evaluation sequence.
pub fn spectrum(cfg: &RunConfig, ckpt: &Path) -> CliResult<Vec<PathBuf>> {
    cfg.validate()?;
    let model = checkpoint::load(ckpt)?;
    check_vocab(cfg, &model)?;
    let examples = eval_examples(cfg)?;
    let hs = model.hidden_states(&examples[0].tokens)?;
    let mut written = Vec::new();
    for (l, layer) in model.layers.iter().enumerate() {
        let rep = spectrum_over_tokens(layer, &hs[l], model.variant, cfg.spectrum_skip)?;
        let sp = cfg.output_dir.join(format!("spectrum_layer{l}.csv"));
        let ut = cfg.output_dir.join(format!("utilization_layer{l}.csv"));
        write_file(&sp, rep.spectrum_csv())?;
        write_file(&ut, rep.utilization_csv())?;
        for h in &rep.heads {
            println!(
                "layer {l} head {}: effective rank {:.3}, utilization {:.4}, kappa(S_T) {:.3e}",
                h.head, h.effective_rank, h.utilization, h.kappa_s
            );
        }
        written.push(sp);
        written.push(ut);
    }
    Ok(written)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Split {
    Train,
    Eval,
    Calibration,
    Finetune,
}

pub fn gen_data(cfg: &RunConfig, split: Split, count: usize, path: &Path) -> CliResult<()> {
    cfg.task.validate()?;
    let examples = match split {
        Split::Train => gen_recall(&cfg.task, TRAIN_STREAM, count)?,
        Split::Eval => eval_set(&cfg.task, count)?,
        Split::Calibration => calibration_set(&cfg.task, cfg.prune.seed, count)?,
        Split::Finetune => gen_recall(&cfg.task, FINETUNE_STREAM, count)?,
    };
    write_file(path, to_jsonl(&examples))?;
    println!("wrote {count} sequences to {}", path.display());
    Ok(())
}

pub fn verify(cfg: &RunConfig, corrupt: Option<String>) -> CliResult<VerifyReport> {
    let opts = VerifyOptions {
        seed: cfg.seed,
        corrupt,
        ..VerifyOptions::default()
    };
    let report = run_all(&opts)?;
    write_json(&cfg.output_dir.join("verify_report.json"), &report)?;
    print!("{}", report.table());
    if !report.passed {
        let failed: Vec<&str> = report
            .checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.name.as_str())
            .collect();
        return Err(CliError::Verify(failed.join(", ")));
    }
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct BenchRow {
    pub variant: Variant,
    pub key_dim: usize,
    pub value_dim: usize,
    pub seq_len: usize,
    pub num_heads: usize,
    pub flops_per_step: u64,
    pub flops_total: u64,
    /// Wall-clock fields vary between runs.
    pub median_seconds: f64,
    pub tokens_per_second: f64,
}

#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct BenchComparison {
    pub variant: Variant,
    pub flop_ratio: f64,
    pub speedup: f64,
    /// Compressed run slower than the baseline.
    pub flagged: bool,
}

#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct BenchReport {
    pub ratio: f64,
    pub rows: Vec<BenchRow>,
    pub comparisons: Vec<BenchComparison>,
}

fn time_mixer(
    variant: Variant,
    d_k: usize,
    d_v: usize,
    heads: usize,
    cfg: &RunConfig,
) -> CliResult<f64> {
    let t = cfg.bench.seq_len;
    let mut rng = rng_for(cfg.seed, d_k as u64);
    let inputs: Vec<(Matrix, Matrix, Matrix)> = (0..heads)
        .map(|_| {
            let norm = |m: Matrix| {
                let mut m = m;
                for r in 0..m.rows() {
                    let row = m.row_mut(r);
                    let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                    row.iter_mut().for_each(|x| *x /= n);
                }
                m
            };
            (
                norm(gaussian_matrix(&mut rng, t, d_k)),
                norm(gaussian_matrix(&mut rng, t, d_k)),
                gaussian_matrix(&mut rng, t, d_v),
            )
        })
        .collect();
    let beta = vec![0.5; t];
    let alpha = vec![0.9; t];
    let run = || -> CliResult<f64> {
        let start = Instant::now();
        for (q, k, v) in &inputs {
            let (o, _) = mixer_core(q, k, v, &beta, &alpha, variant, false)?;
            std::hint::black_box(o);
        }
        Ok(start.elapsed().as_secs_f64())
    };
    for _ in 0..cfg.bench.warmup {
        run()?;
    }
    let mut times = (0..cfg.bench.repeats)
        .map(|_| run())
        .collect::<CliResult<Vec<f64>>>()?;
    times.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    Ok(times[times.len() / 2])
}

/// Mixer throughput at full and compressed key width. The FLOP ratio is
/// checked against the closed form; the wall-clock ratio is only reported.
pub fn bench(cfg: &RunConfig) -> CliResult<BenchReport> {
    cfg.validate()?;
    let m = &cfg.model;
    let full = m.key_dim;
    let small = retained_width(full, cfg.prune.ratio)?;
    let t = cfg.bench.seq_len;
    let mut rows = Vec::new();
    let mut comparisons = Vec::new();
    for variant in Variant::ALL {
        let mut pair = Vec::new();
        for d_k in [full, small] {
            let per_step = flops_per_step(variant, d_k, m.value_dim);
            let total = layer_mixer_flops(variant, d_k, m.value_dim, m.num_heads, t);
            if total != per_step.total() * (t * m.num_heads) as u64 {
                return Err(CliError::Numeric(format!(
                    "{variant}: layer FLOPs disagree with the per-step model"
                )));
            }
            let secs = time_mixer(variant, d_k, m.value_dim, m.num_heads, cfg)?;
            pair.push((per_step, total));
            rows.push(BenchRow {
                variant,
                key_dim: d_k,
                value_dim: m.value_dim,
                seq_len: t,
                num_heads: m.num_heads,
                flops_per_step: per_step.total(),
                flops_total: total,
                median_seconds: secs,
                tokens_per_second: t as f64 / secs,
            });
        }
        let (f_full, f_small) = (pair[0].0, pair[1].0);
        // Bilinear part scales with d_k, the rest is independent of it.
        if f_small.bilinear * full as u64 != f_full.bilinear * small as u64
            || f_small.linear != f_full.linear
        {
            return Err(CliError::Numeric(format!(
                "{variant}: FLOP ratio deviates from the closed form"
            )));
        }
        let n = rows.len();
        let speedup = rows[n - 2].median_seconds / rows[n - 1].median_seconds;
        comparisons.push(BenchComparison {
            variant,
            flop_ratio: pair[1].1 as f64 / pair[0].1 as f64,
            speedup,
            flagged: speedup < 1.0,
        });
    }
    let report = BenchReport {
        ratio: cfg.prune.ratio,
        rows,
        comparisons,
    };
    println!(
        "{:<8} {:>5} {:>5} {:>12} {:>14} {:>14}",
        "variant", "d_k", "d_v", "flops/step", "median s", "tokens/s"
    );
    for r in &report.rows {
        println!(
            "{:<8} {:>5} {:>5} {:>12} {:>14.6e} {:>14.1}",
            r.variant.name(),
            r.key_dim,
            r.value_dim,
            r.flops_per_step,
            r.median_seconds,
            r.tokens_per_second
        );
    }
    for c in &report.comparisons {
        println!(
            "{}: flop ratio {:.4}, wall-clock speedup {:.3}x{}",
            c.variant.name(),
            c.flop_ratio,
            c.speedup,
            if c.flagged {
                " (slower than baseline)"
            } else {
                ""
            }
        );
    }
    write_json(&cfg.output_dir.join("bench.json"), &report)?;
    Ok(report)
}
