use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{ExperimentReport, ReportRow};
use crate::attacks::Strategy;
use crate::error::{LabError, Result};
use crate::numfmt::fmt_f64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ReportFormat {
    Csv,
    Json,
    Markdown,
}

impl ReportFormat {
    pub const ALL: [ReportFormat; 3] = [Self::Csv, Self::Json, Self::Markdown];

    /// Parses `csv`, `json`, `markdown`/`md`, `all`, or a comma-separated list.
    pub fn parse_list(s: &str) -> Result<Vec<Self>> {
        let mut out = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part.to_ascii_lowercase().as_str() {
                "csv" => out.push(Self::Csv),
                "json" => out.push(Self::Json),
                "markdown" | "md" | "markdown-table" => out.push(Self::Markdown),
                "all" => out.extend(Self::ALL),
                other => return Err(LabError::config("format", format!("unknown format `{other}`"))),
            }
        }
        if out.is_empty() {
            return Err(LabError::config("format", "no format given"));
        }
        out.dedup();
        Ok(out)
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn rows_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from(
        "victim,config,strategy,seed,clean_score,post_attack_score,reduction_pct,energy_spent,budgeted_energy,matched_energy,n_poisoned,zero_gradient_count,attack_objective,audit_passed,failure\n",
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            csv_field(&r.victim),
            csv_field(&r.config),
            csv_field(&r.strategy),
            r.seed,
            fmt_f64(r.clean_score),
            opt(r.post_attack_score),
            opt(r.reduction_pct),
            opt(r.energy_spent),
            opt(r.budgeted_energy),
            opt(r.matched_energy),
            r.n_poisoned.map(|v| v.to_string()).unwrap_or_default(),
            r.zero_gradient_count.map(|v| v.to_string()).unwrap_or_default(),
            opt(r.attack_objective),
            r.audit_passed.map(|v| v.to_string()).unwrap_or_default(),
            csv_field(r.failure.as_deref().unwrap_or("")),
        );
    }
    out
}

pub fn detection_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from(
        "detector,attack,recall,precision,auc,max_score,flagged_count,victim,config,seed,auc_vs_base\n",
    );
    for r in rows {
        for d in &r.detectors {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                d.detector.label(),
                csv_field(&r.strategy),
                fmt_f64(d.recall),
                fmt_f64(d.precision),
                opt(d.auc),
                fmt_f64(d.max_score),
                d.flagged_count,
                csv_field(&r.victim),
                csv_field(&r.config),
                r.seed,
                opt(d.auc_vs_base),
            );
        }
    }
    out
}

pub fn to_json(report: &ExperimentReport) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serializes");
    s.push('\n');
    s
}

pub fn from_json(text: &str) -> Result<ExperimentReport> {
    serde_json::from_str(text).map_err(|e| LabError::parse("report", e))
}

/// Victim x config rows, one column per attack, bold on the lowest mean
/// post-attack score; the reduction column is GlobalAllocation's.
pub fn markdown(report: &ExperimentReport) -> String {
    let mut labels: Vec<String> = Vec::new();
    for s in &report.summary {
        if !labels.contains(&s.strategy) {
            labels.push(s.strategy.clone());
        }
    }
    let mut out = String::new();
    let _ = writeln!(out, "# Poisoning report\n");
    let _ = writeln!(out, "- units: {}", report.units);
    let _ = writeln!(out, "- config hash: `{}`", report.config_hash);
    let seeds: Vec<String> = report.seeds.iter().map(u64::to_string).collect();
    let _ = writeln!(out, "- seeds: {}", seeds.join(", "));
    let _ = writeln!(out, "- failed cells: {}\n", report.failures());
    let _ = write!(out, "| Victim | Config (rho, eps) | Clean Score |");
    for l in &labels {
        let _ = write!(out, " {l} |");
    }
    let _ = writeln!(out, " Reduction (%) |");
    let _ = writeln!(out, "|{}", "---|".repeat(labels.len() + 4));
    let mut groups: Vec<(String, String)> = Vec::new();
    for s in &report.summary {
        let k = (s.victim.clone(), s.config.clone());
        if !groups.contains(&k) {
            groups.push(k);
        }
    }
    for (victim, config) in groups {
        let cells: Vec<Option<&super::SummaryRow>> = labels
            .iter()
            .map(|l| {
                report
                    .summary
                    .iter()
                    .find(|s| s.victim == victim && s.config == config && &s.strategy == l)
            })
            .collect();
        let min = cells
            .iter()
            .flatten()
            .map(|s| s.mean_post_attack)
            .fold(f64::INFINITY, f64::min);
        let clean = cells.iter().flatten().next().map_or(0.0, |s| s.mean_clean);
        let _ = write!(out, "| {victim} | {config} | {clean:.4} |");
        for c in &cells {
            match c {
                Some(s) if s.mean_post_attack == min => {
                    let _ = write!(out, " **{:.4}** |", s.mean_post_attack);
                }
                Some(s) => {
                    let _ = write!(out, " {:.4} |", s.mean_post_attack);
                }
                None => out.push_str(" - |"),
            }
        }
        let red = cells
            .iter()
            .flatten()
            .find(|s| s.strategy == Strategy::GlobalAllocation.label())
            .and_then(|s| s.reduction_pct);
        match red {
            Some(r) => {
                let _ = writeln!(out, " {r:.1}% |");
            }
            None => out.push_str(" - |\n"),
        }
    }
    if !report.hierarchy.is_empty() {
        let _ = writeln!(out, "\n## Damage hierarchy\n");
        let _ = writeln!(out, "| Victim | Config | Global | LocalGreedy | RandomSubset | RandomNoise | Clean | G<L (diff, se) | L<N (diff, se) | Verdict |");
        let _ = writeln!(out, "|---|---|---|---|---|---|---|---|---|---|");
        for h in &report.hierarchy {
            let pc = |p: &super::PairedComparison| {
                format!("{:.4}, {}", p.mean_diff, p.se_diff.map_or("-".into(), |s| format!("{s:.4}")))
            };
            let _ = writeln!(
                out,
                "| {} | {} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} | {} | {} | {} |",
                h.victim,
                h.config,
                h.means[0],
                h.means[1],
                h.means[2],
                h.means[3],
                h.means[4],
                pc(&h.global_vs_local),
                pc(&h.local_vs_noise),
                if h.passed { "pass" } else { "fail" }
            );
        }
    }
    if !report.stealth.is_empty() {
        let _ = writeln!(out, "\n## Stealth (AUC against clean base rows)\n");
        let _ = writeln!(out, "| Victim | Config | Detector | Global | RandomNoise(rho=1) | Difference | Verdict |");
        let _ = writeln!(out, "|---|---|---|---|---|---|---|");
        let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        for s in &report.stealth {
            let _ = writeln!(
                out,
                "| {} | {} | {} | {} | {} | {} | {} |",
                s.victim,
                s.config,
                s.detector.label(),
                f(s.mean_auc_global),
                f(s.mean_auc_noise_full),
                f(s.mean_diff),
                if s.passed { "pass" } else { "fail" }
            );
        }
    }
    let diag: Vec<_> = report.diagnostics.iter().filter(|d| d.influence_spearman.is_some() || d.note.is_some()).collect();
    if !diag.is_empty() {
        let _ = writeln!(out, "\n## Influence proxy check\n");
        for d in diag {
            match (d.influence_spearman, &d.note) {
                (Some(r), _) => {
                    let _ = writeln!(out, "- {} seed {}: Spearman(proxy, exact) = {r:.4}", d.victim, d.seed);
                }
                (None, Some(n)) => {
                    let _ = writeln!(out, "- {} seed {}: unavailable ({n})", d.victim, d.seed);
                }
                _ => {}
            }
        }
    }
    out
}

/// Writes `report.csv`, `detection.csv`, `report.json` and `report.md` as
/// requested, creating `dir` if needed.
pub fn emit_report(report: &ExperimentReport, dir: &Path, formats: &[ReportFormat]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    let mut written = Vec::new();
    let mut put = |name: &str, body: String| -> Result<()> {
        let path = dir.join(name);
        std::fs::write(&path, body).map_err(|e| LabError::io(&path, e))?;
        written.push(path);
        Ok(())
    };
    for f in formats {
        match f {
            ReportFormat::Csv => {
                put("report.csv", rows_csv(&report.rows))?;
                put("detection.csv", detection_csv(&report.rows))?;
            }
            ReportFormat::Json => put("report.json", to_json(report))?,
            ReportFormat::Markdown => put("report.md", markdown(report))?,
        }
    }
    Ok(written)
}
