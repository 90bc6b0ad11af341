//! Run report (both passes plus cost) and its JSON / table renderings.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::backend::{teraflops, LedgerSnapshot};
use crate::error::{Error, Result};
use crate::metrics::{MetricsReport, Scores};

pub const FLOPS_FORMULA: &str = "estimate: 2 x params x (prompt_tokens + completion_tokens)";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub backend_id: String,
    pub params: u64,
    pub calls: u64,
    pub errors: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub flops: u128,
    pub teraflops: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostSummary {
    pub formula: String,
    pub backends: BTreeMap<String, CostRow>,
    pub total_flops: u128,
    pub total_teraflops: f64,
}

impl CostSummary {
    pub fn from_ledger(ledger: &LedgerSnapshot) -> Self {
        let backends = ledger
            .backends
            .iter()
            .map(|(name, t)| {
                (
                    name.clone(),
                    CostRow {
                        backend_id: t.backend_id.clone(),
                        params: t.params,
                        calls: t.calls,
                        errors: t.errors,
                        prompt_tokens: t.prompt_tokens,
                        completion_tokens: t.completion_tokens,
                        flops: t.flops,
                        teraflops: t.teraflops(),
                    },
                )
            })
            .collect();
        let total = ledger.total_flops();
        Self {
            formula: FLOPS_FORMULA.to_string(),
            backends,
            total_flops: total,
            total_teraflops: teraflops(total),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub first: MetricsReport,
    #[serde(rename = "final")]
    pub final_pass: MetricsReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost: Option<CostSummary>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReportFormat {
    Json,
    #[default]
    Table,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "table" => Ok(ReportFormat::Table),
            other => Err(Error::InvalidArgument(format!(
                "unknown report format {other:?} (expected json or table)"
            ))),
        }
    }
}

/// Percentage with two decimals: 0.5 -> "50.00".
pub fn pct(x: f64) -> String {
    format!("{:.2}", x * 100.0)
}

/// "JGA / F1" cell.
pub fn cell(jga: f64, f1: f64) -> String {
    format!("{} / {}", pct(jga), pct(f1))
}

fn score_cells(s: &Scores) -> (String, String) {
    (cell(s.dst_jga, s.dst_f1), cell(s.tlb_jga, s.tlb_f1))
}

pub fn format_report(report: &RunReport, format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(report)?;
            s.push('\n');
            Ok(s)
        }
        ReportFormat::Table => Ok(format_table(report)),
    }
}

fn format_table(report: &RunReport) -> String {
    let mut out = String::new();
    let w = 18;
    let _ = writeln!(out, "{:<14}{:>7}  {:>w$}  {:>w$}", "pass", "turns", "DST JGA / F1", "TLB JGA / F1");
    for (name, r) in [("first", &report.first), ("final", &report.final_pass)] {
        let (dst, tlb) = score_cells(&r.scores);
        let _ = writeln!(out, "{name:<14}{:>7}  {dst:>w$}  {tlb:>w$}", r.turns);
    }
    if !report.final_pass.categories.is_empty() {
        let _ = writeln!(out);
        let _ = writeln!(out, "{:<14}{:>7}  {:>w$}  {:>w$}", "category", "turns", "DST JGA / F1", "TLB JGA / F1");
        for c in &report.final_pass.categories {
            let (dst, tlb) = match &c.scores {
                Some(s) => score_cells(s),
                None => ("-".to_string(), "-".to_string()),
            };
            let _ = writeln!(out, "{:<14}{:>7}  {dst:>w$}  {tlb:>w$}", c.category.label(), c.turns);
        }
    }
    if let Some(cost) = &report.cost {
        let _ = writeln!(out);
        let _ = writeln!(out, "cost ({})", cost.formula);
        let _ = writeln!(
            out,
            "{:<14}{:>7}  {:>14}  {:>14}  {:>16}",
            "backend", "calls", "prompt tok", "completion tok", "TeraFLOPs"
        );
        for (name, row) in &cost.backends {
            let _ = writeln!(
                out,
                "{name:<14}{:>7}  {:>14}  {:>14}  {:>16.4}",
                row.calls, row.prompt_tokens, row.completion_tokens, row.teraflops
            );
        }
        let _ = writeln!(out, "{:<14}{:>7}  {:>14}  {:>14}  {:>16.4}", "total", "", "", "", cost.total_teraflops);
    }
    out
}
