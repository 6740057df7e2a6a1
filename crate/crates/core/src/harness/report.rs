//! CSV and markdown rendering of evaluation and training artifacts.

use std::io::{BufRead, BufReader, Read, Write};

use crate::harness::metrics::{q_error, Aggregates, EvalReport, QueryEval};
use crate::harness::noise::RobustnessRow;
use crate::{Error, Result};

/// One training-curve sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub epoch: u32,
    pub train_loss: f64,
    /// Mean training-set Q-Error, when the stage tracks it.
    pub train_q_error: Option<f64>,
}

/// `epoch,train_loss,train_mean_q_error` rows.
pub fn write_curve_csv<W: Write>(writer: &mut W, curve: &[CurvePoint]) -> Result<()> {
    writeln!(writer, "epoch,train_loss,train_mean_q_error")?;
    for p in curve {
        match p.train_q_error {
            Some(q) => writeln!(writer, "{},{},{}", p.epoch, p.train_loss, q)?,
            None => writeln!(writer, "{},{},", p.epoch, p.train_loss)?,
        }
    }
    Ok(())
}

const PER_QUERY_HEADER: &str =
    "query_id,template_id,actual_s,predicted_s,q_error,baseline_const_s,baseline_ocp_s";

/// Per-query evaluation rows.
pub fn write_per_query_csv<W: Write>(writer: &mut W, report: &EvalReport) -> Result<()> {
    writeln!(writer, "{PER_QUERY_HEADER}")?;
    for q in &report.per_query {
        let ocp = q.baseline_ocp.map(|v| v.to_string()).unwrap_or_default();
        writeln!(
            writer,
            "{},{},{},{},{},{},{}",
            q.query_id, q.template_id, q.actual, q.predicted, q.q_error, q.baseline_const, ocp
        )?;
    }
    Ok(())
}

/// Parse a per-query CSV back into evaluation rows.
pub fn read_per_query_csv<R: Read>(reader: R) -> Result<Vec<QueryEval>> {
    let mut lines = BufReader::new(reader).lines();
    let header = lines
        .next()
        .transpose()?
        .ok_or_else(|| Error::Config("empty per-query CSV".to_string()))?;
    if header.trim() != PER_QUERY_HEADER {
        return Err(Error::Config(format!("unexpected CSV header: {header}")));
    }
    let mut out = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 7 {
            return Err(Error::Config(format!("line {}: expected 7 fields", lineno + 2)));
        }
        let field = |i: usize| -> Result<f64> {
            parts[i]
                .parse()
                .map_err(|_| Error::Config(format!("line {}: bad number {:?}", lineno + 2, parts[i])))
        };
        let actual = field(2)?;
        let predicted = field(3)?;
        out.push(QueryEval {
            query_id: parts[0]
                .parse()
                .map_err(|_| Error::Config(format!("line {}: bad query id", lineno + 2)))?,
            template_id: parts[1]
                .parse()
                .map_err(|_| Error::Config(format!("line {}: bad template id", lineno + 2)))?,
            actual,
            predicted,
            q_error: q_error(predicted, actual)?,
            baseline_const: field(5)?,
            baseline_ocp: if parts[6].is_empty() { None } else { Some(field(6)?) },
        });
    }
    Ok(out)
}

fn aggregate_row(name: &str, a: &Aggregates) -> String {
    format!(
        "| {} | {:.3} | {:.3} | {:.3} | {:.3} | {:.3} | {:.3} |\n",
        name, a.mean, a.p50, a.p90, a.p95, a.p99, a.max
    )
}

/// Markdown summary: Q-Error aggregates for the model and the naive
/// baselines, plus the per-latency-range breakdown.
pub fn render_summary_markdown(report: &EvalReport) -> String {
    let mut s = String::new();
    s.push_str("# Evaluation summary\n\n");
    s.push_str("Q-Error aggregates (lower is better):\n\n");
    s.push_str("| predictor | mean | 50th | 90th | 95th | 99th | max |\n");
    s.push_str("|---|---|---|---|---|---|---|\n");
    s.push_str(&aggregate_row("model", &report.model));
    s.push_str(&aggregate_row("constant-median baseline", &report.baseline_const));
    if let Some(ocp) = &report.baseline_ocp {
        s.push_str(&aggregate_row("work-sum baseline", ocp));
    }
    s.push_str("\nQ-Error grouped by actual latency:\n\n");
    s.push_str("| latency range (s) | queries | mean Q-Error |\n");
    s.push_str("|---|---|---|\n");
    for g in &report.groups {
        let high = if g.high.is_finite() { format!("{:.4}", g.high) } else { "inf".to_string() };
        s.push_str(&format!(
            "| {:.4} – {} | {} | {:.3} |\n",
            g.low, high, g.count, g.mean_q_error
        ));
    }
    s
}

/// Markdown robustness table: one row per noise level.
pub fn render_robustness_markdown(rows: &[RobustnessRow]) -> String {
    let mut s = String::new();
    s.push_str("# Cardinality-noise robustness\n\n");
    s.push_str("Held-out Q-Error under log-normal cardinality noise:\n\n");
    s.push_str("| sigma | mean | 50th | 90th | 95th | 99th | max |\n");
    s.push_str("|---|---|---|---|---|---|---|\n");
    for r in rows {
        let label = if r.sigma == 0.0 { "true card".to_string() } else { format!("{}", r.sigma) };
        let a = &r.aggregates;
        s.push_str(&format!(
            "| {} | {:.3} | {:.3} | {:.3} | {:.3} | {:.3} | {:.3} |\n",
            label, a.mean, a.p50, a.p90, a.p95, a.p99, a.max
        ));
    }
    s
}
