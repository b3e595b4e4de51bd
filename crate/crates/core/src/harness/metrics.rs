use serde::{Deserialize, Serialize};

use super::{EpisodeResult, HarnessError};

/// Success weighted by path length for one episode.
pub fn spl_term(success: bool, shortest: f64, taken: f64) -> f64 {
    if !success {
        return 0.0;
    }
    let denom = shortest.max(taken);
    if denom <= 0.0 {
        1.0
    } else {
        shortest / denom
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub label: String,
    pub episodes: Vec<EpisodeResult>,
    pub tl: f64,
    pub ne: f64,
    pub sr: f64,
    pub spl: f64,
    pub runner_step_fraction: f64,
    pub ruminator_step_fraction: f64,
    pub mean_llm_calls: f64,
    pub switch_rate: f64,
    pub failures: usize,
}

/// Aggregate per-episode rows. Errors on an empty list.
pub fn metrics(label: &str, results: Vec<EpisodeResult>) -> Result<SuiteReport, HarnessError> {
    if results.is_empty() {
        return Err(HarnessError::EmptyReport(label.to_string()));
    }
    let n = results.len() as f64;
    let mean = |f: &dyn Fn(&EpisodeResult) -> f64| results.iter().map(f).sum::<f64>() / n;
    let runner: usize = results.iter().map(EpisodeResult::runner_steps).sum();
    let total: usize = results.iter().map(|r| r.modes.len()).sum();
    let runner_step_fraction = if total == 0 { 1.0 } else { runner as f64 / total as f64 };
    Ok(SuiteReport {
        label: label.to_string(),
        tl: mean(&|r| r.tl),
        ne: mean(&|r| r.ne),
        sr: mean(&|r| f64::from(u8::from(r.success))),
        spl: mean(&|r| spl_term(r.success, r.shortest, r.tl)),
        runner_step_fraction,
        ruminator_step_fraction: 1.0 - runner_step_fraction,
        mean_llm_calls: mean(&|r| r.llm_calls as f64),
        switch_rate: mean(&|r| f64::from(u8::from(r.switch.is_some()))),
        failures: results.iter().filter(|r| r.error.is_some()).count(),
        episodes: results,
    })
}

impl SuiteReport {
    /// Recompute the aggregates from the episode rows.
    pub fn recomputed(&self) -> Result<SuiteReport, HarnessError> {
        metrics(&self.label, self.episodes.clone())
    }
}

/// Aligned text table, one row per report.
pub fn render_table(reports: &[SuiteReport]) -> String {
    let header = ["arm", "episodes", "TL", "NE", "SR", "SPL", "runner", "llm/ep", "switched"];
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            vec![
                r.label.clone(),
                r.episodes.len().to_string(),
                format!("{:.2}", r.tl),
                format!("{:.2}", r.ne),
                format!("{:.1}", 100.0 * r.sr),
                format!("{:.1}", 100.0 * r.spl),
                format!("{:.1}%", 100.0 * r.runner_step_fraction),
                format!("{:.2}", r.mean_llm_calls),
                format!("{:.1}%", 100.0 * r.switch_rate),
            ]
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|c| rows.iter().map(|r| r[c].len()).chain([header[c].len()]).max().unwrap_or(0))
        .collect();
    let line = |cells: Vec<&str>| -> String {
        cells
            .iter()
            .enumerate()
            .map(|(c, s)| if c == 0 { format!("{s:<w$}", w = widths[c]) } else { format!("{s:>w$}", w = widths[c]) })
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = line(header.to_vec());
    out.push('\n');
    for r in &rows {
        out.push_str(&line(r.iter().map(String::as_str).collect()));
        out.push('\n');
    }
    out
}
