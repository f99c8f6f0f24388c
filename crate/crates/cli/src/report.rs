//! `memaudit report`: scan a directory for run reports and emit the
//! plot-ready CSVs — per-epoch new-memorisation counts, pre-transition
//! score summaries against the never-memorised baseline, and the
//! stopping-criterion comparison table.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use memaudit::metrics::track_transitions;
use memaudit::trainer::RunReport;

use crate::{CmdError, ReportArgs};

pub fn run(args: &ReportArgs) -> Result<(), CmdError> {
    let mut report_paths = Vec::new();
    collect_reports(&args.dir, &mut report_paths)?;
    report_paths.sort();
    if report_paths.is_empty() {
        return Err(CmdError::Data(format!(
            "no report.json files under {}",
            args.dir.display()
        )));
    }

    let mut reports = Vec::new();
    let mut offenders = Vec::new();
    for path in &report_paths {
        match fs::read_to_string(path)
            .map_err(|e| e.to_string())
            .and_then(|text| RunReport::from_json(&text).map_err(|e| e.to_string()))
            .and_then(|report| validate_report(&report).map(|()| report))
        {
            Ok(report) => reports.push((run_label(&args.dir, path), report)),
            Err(err) => offenders.push(format!("{}: {err}", path.display())),
        }
    }
    if !offenders.is_empty() {
        return Err(CmdError::Data(format!(
            "unreadable reports:\n  {}",
            offenders.join("\n  ")
        )));
    }

    write_new_memorisations(&reports, &args.dir.join("new_memorisations.csv"))?;
    write_transitions(&reports, &args.dir.join("transitions.csv"))?;
    write_criterion_comparison(&reports, &args.dir.join("criterion_comparison.csv"))?;
    println!(
        "wrote new_memorisations.csv, transitions.csv, criterion_comparison.csv for {} runs",
        reports.len()
    );
    Ok(())
}

/// Internal consistency a report must satisfy before the emitters index
/// into it.
fn validate_report(report: &RunReport) -> Result<(), String> {
    let epochs = report.epochs.len();
    if epochs == 0 {
        return Err("report has no epochs".to_string());
    }
    if report.histories.iter().any(|h| h.scores.len() != epochs || h.verbatim.len() != epochs) {
        return Err("sample histories do not cover the recorded epochs".to_string());
    }
    for (criterion, &epoch) in &report.selected {
        if epoch < 1 || epoch > epochs {
            return Err(format!("selected epoch {epoch} for {criterion} is out of range"));
        }
    }
    Ok(())
}

fn collect_reports(dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), CmdError> {
    let entries = fs::read_dir(dir)
        .map_err(|e| CmdError::Data(format!("cannot read {}: {e}", dir.display())))?;
    let mut children: Vec<PathBuf> = entries
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .collect();
    children.sort();
    for path in children {
        if path.is_dir() {
            collect_reports(&path, out)?;
        } else if path.file_name().is_some_and(|n| n == "report.json") {
            out.push(path);
        }
    }
    Ok(())
}

/// Run identifier: the report's directory, relative to the scan root.
fn run_label(root: &Path, report_path: &Path) -> String {
    let dir = report_path.parent().unwrap_or(report_path);
    let rel = dir.strip_prefix(root).unwrap_or(dir);
    let label = rel.to_string_lossy().replace('\\', "/");
    if label.is_empty() {
        ".".to_string()
    } else {
        label
    }
}

/// Count of samples first memorised at each epoch.
fn write_new_memorisations(reports: &[(String, RunReport)], path: &Path) -> Result<(), CmdError> {
    let mut csv = Vec::new();
    writeln!(csv, "run,epoch,new_memorisations")?;
    for (label, report) in reports {
        let epochs = report.epochs.len();
        for epoch in 1..=epochs {
            let count = report
                .histories
                .iter()
                .filter(|h| h.memorisation_epoch == Some(epoch))
                .count();
            writeln!(csv, "{label},{epoch},{count}")?;
        }
    }
    fs::write(path, csv)?;
    Ok(())
}

/// Pre-transition medians/ranges plus the never-memorised baseline mean.
fn write_transitions(reports: &[(String, RunReport)], path: &Path) -> Result<(), CmdError> {
    let mut csv = Vec::new();
    writeln!(csv, "run,epoch,transition_count,median,min,max,baseline_mean")?;
    for (label, report) in reports {
        let summary = track_transitions(&report.histories);
        for epoch in 1..=report.epochs.len() {
            let baseline = summary
                .baseline
                .get(epoch - 1)
                .copied()
                .flatten()
                .map_or(String::new(), |b| b.to_string());
            match summary.transitions.iter().find(|t| t.epoch == epoch) {
                Some(t) => writeln!(
                    csv,
                    "{label},{epoch},{},{},{},{},{baseline}",
                    t.count, t.median, t.min, t.max
                )?,
                None => writeln!(csv, "{label},{epoch},0,,,,{baseline}")?,
            }
        }
    }
    fs::write(path, csv)?;
    Ok(())
}

/// Selected-epoch metrics per criterion, with gaps to the run's best
/// perplexity and accuracy.
fn write_criterion_comparison(
    reports: &[(String, RunReport)],
    path: &Path,
) -> Result<(), CmdError> {
    let mut csv = Vec::new();
    writeln!(
        csv,
        "run,criterion,selected_epoch,mem_avg_k,ngram_mem_percent,val_ppl,eval_acc,ppl_gap_pct,acc_gap_pct"
    )?;
    for (label, report) in reports {
        let best_ppl = report
            .epochs
            .iter()
            .map(|e| e.val_perplexity)
            .fold(f64::INFINITY, f64::min);
        let best_acc = report
            .epochs
            .iter()
            .map(|e| e.eval_accuracy)
            .fold(f64::NEG_INFINITY, f64::max);
        for (criterion, &epoch) in &report.selected {
            let m = &report.epochs[epoch - 1];
            let mem_avg =
                m.mem_percent.values().sum::<f64>() / m.mem_percent.len() as f64;
            let ppl_gap = 100.0 * (m.val_perplexity - best_ppl) / best_ppl;
            let acc_gap = if best_acc > 0.0 {
                format!("{}", 100.0 * (best_acc - m.eval_accuracy) / best_acc)
            } else {
                String::new()
            };
            writeln!(
                csv,
                "{label},{criterion},{epoch},{mem_avg},{},{},{},{ppl_gap},{acc_gap}",
                m.ngram_mem_percent, m.val_perplexity, m.eval_accuracy
            )?;
        }
    }
    fs::write(path, csv)?;
    Ok(())
}
