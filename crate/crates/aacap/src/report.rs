//! Strategy comparison tables in text and JSON.

use serde::{Deserialize, Serialize};

use aacap_core::metrics::EvaluationReport;

/// Column order: metric key in the evaluation report and its heading.
pub const COLUMNS: [(&str, &str); 6] = [
    ("meteor", "METEOR"),
    ("cider_d", "CIDEr-D"),
    ("spice", "SPICE"),
    ("spider", "SPIDEr"),
    ("spider_fl", "SPIDEr-FL"),
    ("fense", "FENSE"),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub strategy: String,
    /// Diagnostic rows (the oracle) are not selectable at inference time.
    pub diagnostic: bool,
    /// Percentages rounded to two decimals; `None` when the metric is unavailable.
    pub values: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub columns: Vec<String>,
    pub rows: Vec<TableRow>,
    pub degraded_flags: Vec<String>,
}

fn percent(v: f64) -> f64 {
    (v * 10_000.0).round() / 100.0
}

/// One row per evaluated strategy, in the given order.
pub fn build_table(evaluations: &[(String, bool, EvaluationReport)]) -> ComparisonTable {
    let mut flags: Vec<String> = evaluations.iter().flat_map(|(_, _, r)| r.degraded_flags.iter().cloned()).collect();
    flags.sort();
    flags.dedup();
    ComparisonTable {
        columns: COLUMNS.iter().map(|(_, h)| h.to_string()).collect(),
        rows: evaluations
            .iter()
            .map(|(name, diagnostic, r)| TableRow {
                strategy: name.clone(),
                diagnostic: *diagnostic,
                values: COLUMNS.iter().map(|(k, _)| r.corpus.get(*k).copied().map(percent)).collect(),
            })
            .collect(),
        degraded_flags: flags,
    }
}

/// Fixed-width text rendering; diagnostic rows are marked with `*`.
pub fn render_text(table: &ComparisonTable) -> String {
    let width = table.rows.iter().map(|r| r.strategy.len() + 2).max().unwrap_or(8).max(8);
    let mut out = format!("{:<width$}", "Strategy");
    for c in &table.columns {
        out.push_str(&format!(" {c:>10}"));
    }
    out.push('\n');
    for r in &table.rows {
        let name = if r.diagnostic { format!("{}*", r.strategy) } else { r.strategy.clone() };
        out.push_str(&format!("{name:<width$}"));
        for v in &r.values {
            match v {
                Some(x) => out.push_str(&format!(" {x:>10.2}")),
                None => out.push_str(&format!(" {:>10}", "n/a")),
            }
        }
        out.push('\n');
    }
    if table.rows.iter().any(|r| r.diagnostic) {
        out.push_str("* diagnostic: best candidate chosen with the references\n");
    }
    if !table.degraded_flags.is_empty() {
        out.push_str(&format!("degraded: {}\n", table.degraded_flags.join(", ")));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn eval(cider: f64) -> EvaluationReport {
        let corpus = BTreeMap::from([("cider_d".to_string(), cider), ("meteor".to_string(), 0.123456)]);
        EvaluationReport { corpus, items: vec![], degraded_flags: vec!["spider_without_spice".into()] }
    }

    #[test]
    fn single_strategy_one_row() {
        let t = build_table(&[("beam".into(), false, eval(0.5))]);
        assert_eq!(t.rows.len(), 1);
        assert_eq!(t.rows[0].values[0], Some(12.35));
        assert_eq!(t.rows[0].values[1], Some(50.0));
        assert_eq!(t.rows[0].values[2], None);
    }

    #[test]
    fn text_and_json_agree() {
        let t = build_table(&[("beam".into(), false, eval(0.5)), ("oracle".into(), true, eval(0.75))]);
        let text = render_text(&t);
        for (line, row) in text.lines().skip(1).zip(&t.rows) {
            let nums: Vec<f64> = line.split_whitespace().filter_map(|w| w.parse().ok()).collect();
            let json: Vec<f64> = row.values.iter().flatten().copied().collect();
            assert_eq!(nums, json);
        }
        assert!(text.contains("oracle*"));
    }
}
