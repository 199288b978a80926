//! `report`: plain-text tables from a run or sweep directory.

use std::fmt::Write;
use std::path::Path;

use crate::commands::{FpfDelta, SensitivityFile, DELTA_FILE, SENSITIVITY_FILE};
use crate::pipeline::{RunSummary, SUMMARY_FILE};
use crate::sweep::{read_aggregate, AGGREGATE_FILE};
use crate::{read_json, CliError, Result};

fn pct(x: Option<f64>) -> String {
    x.map(|v| format!("{:.2}", 100.0 * v))
        .unwrap_or_else(|| "-".into())
}

/// Render whatever summaries `dir` holds.
pub fn render(dir: &Path) -> Result<String> {
    let mut out = String::new();
    let mut found = false;
    if dir.join(AGGREGATE_FILE).exists() {
        found = true;
        let rows = read_aggregate(&dir.join(AGGREGATE_FILE))?;
        let _ = writeln!(
            out,
            "{:<20} {:<12} {:>5} {:>6} {:>16} {:>10}",
            "cell", "method", "runs", "failed", "acc % (mean±std)", "flops"
        );
        for r in rows {
            let acc = format!("{}±{}", pct(r.acc_mean), pct(r.acc_std));
            let flops = r
                .flops_norm
                .map(|f| format!("{f:.3}"))
                .unwrap_or_else(|| "-".into());
            let _ = writeln!(
                out,
                "{:<20} {:<12} {:>5} {:>6} {:>16} {:>10}",
                r.cell, r.method, r.runs, r.failed, acc, flops
            );
        }
    }
    if dir.join(SUMMARY_FILE).exists() {
        found = true;
        let s: RunSummary = read_json(&dir.join(SUMMARY_FILE))?;
        let _ = writeln!(out, "run {} ({}), {} steps", s.run_id, s.method, s.steps);
        let per_task: Vec<String> = s
            .final_eval
            .per_task
            .iter()
            .map(|a| pct(Some(*a)))
            .collect();
        let _ = writeln!(
            out,
            "final accuracy {}% [{}]",
            pct(Some(s.final_eval.average)),
            per_task.join(" ")
        );
        if let Some(f) = &s.fpf {
            let _ = writeln!(out, "after fpf      {}%", pct(Some(f.average)));
        }
        let l = s.fpf_ledger.unwrap_or(s.ledger);
        let _ = writeln!(
            out,
            "flops cl {} replay {} finetune {} total {}",
            l.cl_training,
            l.replay,
            l.finetuning,
            l.total()
        );
    }
    if dir.join(DELTA_FILE).exists() {
        found = true;
        let d: FpfDelta = read_json(&dir.join(DELTA_FILE))?;
        let _ = writeln!(
            out,
            "fpf on {} for {} steps: {}% -> {}% ({:+.2} points)",
            d.mask,
            d.steps,
            pct(Some(d.before.average)),
            pct(Some(d.after.average)),
            100.0 * d.delta_average
        );
    }
    if dir.join(SENSITIVITY_FILE).exists() {
        found = true;
        let s: SensitivityFile = read_json(&dir.join(SENSITIVITY_FILE))?;
        let _ = writeln!(out, "sensitivity over {} task transitions:", s.window);
        let mut ranked: Vec<_> = s.scores.iter().collect();
        ranked.sort_by(|a, b| b.1.total_cmp(a.1));
        for (g, v) in ranked {
            let _ = writeln!(out, "  {:<14} {v:.4}", g.to_string());
        }
        for (th, m) in &s.finetune_masks {
            let _ = writeln!(out, "finetune mask @{th}: {m}");
        }
    }
    if !found {
        return Err(CliError::NothingToReport(dir.to_path_buf()));
    }
    Ok(out)
}
