//! `memaudit sweep`: one fine-tuning run per (loss mode, seed), per-run
//! artefacts in `out_dir/<mode>/seed_<n>/`, then an aggregate table of
//! memorisation and evaluation trade-offs with the plain baseline.

use std::fs;
use std::io::Write;
use std::path::Path;

use memaudit::corpus::{load_corpus_with, ByteTokenizer, Split};
use memaudit::losses::LossMode;
use memaudit::metrics::{write_epoch_csv, write_histories_jsonl};
use memaudit::model::ModelParams;
use memaudit::trainer::{fit, fit_from, write_loss_trace_csv, write_timings_csv, FitRun, RunReport};

use crate::spec::ExperimentSpec;
use crate::{CmdError, SweepArgs};

pub fn run(args: &SweepArgs) -> Result<(), CmdError> {
    let mut spec = ExperimentSpec::load(&args.spec)?;
    if let Some(n) = args.seeds {
        if n == 0 {
            return Err(CmdError::Usage("--seeds must be at least 1".into()));
        }
        spec.seeds = (0..n as u64).collect();
    }

    let tokenizer = ByteTokenizer;
    let train = load_corpus_with(&spec.train_corpus, Split::Train, &tokenizer, spec.max_samples)?;
    let val = load_corpus_with(&spec.val_corpus, Split::Validation, &tokenizer, spec.max_samples)?;

    fs::create_dir_all(&spec.out_dir)?;
    fs::write(spec.out_dir.join("effective_spec.txt"), spec.to_text())?;

    // every run fine-tunes from the same checkpoint when one is given,
    // mirroring the pretrained-model protocol; otherwise each seed gets a
    // fresh initialisation
    let initial: Option<ModelParams> = match &spec.init_checkpoint {
        Some(path) => Some(ModelParams::load_checkpoint(path)?),
        None => None,
    };

    // completed per-seed reports stay on disk even if a later run fails
    let mut rows: Vec<RunRow> = Vec::new();
    for &mode in &spec.modes {
        for &seed in &spec.seeds {
            let cfg = spec.train_config(mode, seed);
            let run_dir = spec.out_dir.join(mode.as_str()).join(format!("seed_{seed}"));
            fs::create_dir_all(&run_dir)?;
            let run = match &initial {
                Some(params) => fit_from(params.clone(), &train, &val, &cfg)?,
                None => fit(&train, &val, &cfg)?,
            };
            write_run_artifacts(&run_dir, &run)?;
            rows.push(RunRow::from_run(mode, seed, &run.report));
            println!(
                "{} seed {seed}: selected epoch {} (mem {:.3}%, ppl {:.3})",
                mode.as_str(),
                rows.last().unwrap().selected_epoch,
                rows.last().unwrap().mem_avg_k,
                rows.last().unwrap().val_ppl
            );
        }
    }

    write_aggregate(&spec, &rows, &spec.out_dir)?;
    Ok(())
}

fn write_run_artifacts(dir: &Path, run: &FitRun) -> Result<(), CmdError> {
    fs::write(dir.join("report.json"), run.report.to_json())?;

    let mut epochs_csv = Vec::new();
    write_epoch_csv(&run.report.epochs, &mut epochs_csv)?;
    fs::write(dir.join("epochs.csv"), epochs_csv)?;

    let mut histories = Vec::new();
    write_histories_jsonl(&run.report.histories, &mut histories)?;
    fs::write(dir.join("histories.jsonl"), histories)?;

    let mut trace = Vec::new();
    write_loss_trace_csv(&run.loss_trace, &mut trace)?;
    fs::write(dir.join("loss_trace.csv"), trace)?;

    let mut timings = Vec::new();
    write_timings_csv(&run.report, &mut timings)?;
    fs::write(dir.join("timings.csv"), timings)?;

    let stop_key = run.report.config.stop.key();
    if let Some(params) = run.params_at_selected(stop_key) {
        params.save_checkpoint(&dir.join("checkpoint_selected.json"))?;
    }
    Ok(())
}

/// Per-run values at the run's selected epoch.
struct RunRow {
    mode: LossMode,
    #[allow(dead_code)]
    seed: u64,
    selected_epoch: usize,
    /// Extraction percentage averaged over the configured prefix lengths.
    mem_avg_k: f64,
    ngram_mem: f64,
    val_ppl: f64,
    eval_acc: f64,
    /// Best accuracy this run reached at any epoch (baseline reference).
    best_acc: f64,
}

impl RunRow {
    fn from_run(mode: LossMode, seed: u64, report: &RunReport) -> RunRow {
        let stop_key = report.config.stop.key();
        let selected_epoch = report.selected[stop_key];
        let m = &report.epochs[selected_epoch - 1];
        let mem_avg_k =
            m.mem_percent.values().sum::<f64>() / m.mem_percent.len() as f64;
        let best_acc =
            report.epochs.iter().map(|e| e.eval_accuracy).fold(f64::NEG_INFINITY, f64::max);
        RunRow {
            mode,
            seed,
            selected_epoch,
            mem_avg_k,
            ngram_mem: m.ngram_mem_percent,
            val_ppl: m.val_perplexity,
            eval_acc: m.eval_accuracy,
            best_acc,
        }
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n - 1 denominator); 0 for a single value.
fn stddev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

fn write_aggregate(spec: &ExperimentSpec, rows: &[RunRow], out_dir: &Path) -> Result<(), CmdError> {
    // evaluation delta is measured against the plain baseline's best
    // accuracy, seed by seed (rows are in seed order within each mode)
    let baseline_best: Vec<f64> =
        rows.iter().filter(|r| r.mode == LossMode::Plain).map(|r| r.best_acc).collect();

    let mut csv = Vec::new();
    writeln!(
        csv,
        "mode,runs,mem_mean,mem_stddev,ngram_mem_mean,val_ppl_mean,eval_acc_mean,eval_delta_mean,eval_delta_stddev"
    )?;
    for &mode in &spec.modes {
        let mode_rows: Vec<&RunRow> = rows.iter().filter(|r| r.mode == mode).collect();
        if mode_rows.is_empty() {
            continue;
        }
        let mems: Vec<f64> = mode_rows.iter().map(|r| r.mem_avg_k).collect();
        let ngrams: Vec<f64> = mode_rows.iter().map(|r| r.ngram_mem).collect();
        let ppls: Vec<f64> = mode_rows.iter().map(|r| r.val_ppl).collect();
        let accs: Vec<f64> = mode_rows.iter().map(|r| r.eval_acc).collect();
        let deltas: Option<Vec<f64>> = if baseline_best.len() == mode_rows.len() {
            Some(
                mode_rows
                    .iter()
                    .zip(&baseline_best)
                    .map(|(r, &b)| b - r.eval_acc)
                    .collect(),
            )
        } else {
            None
        };
        let (delta_mean, delta_sd) = match &deltas {
            Some(d) => (format!("{}", mean(d)), format!("{}", stddev(d))),
            None => (String::new(), String::new()),
        };
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{}",
            mode.as_str(),
            mode_rows.len(),
            mean(&mems),
            stddev(&mems),
            mean(&ngrams),
            mean(&ppls),
            mean(&accs),
            delta_mean,
            delta_sd
        )?;
    }
    fs::write(out_dir.join("aggregate.csv"), csv)?;
    Ok(())
}
