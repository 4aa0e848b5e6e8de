//! Report rendering: key-sorted JSON and plain-text tables (methods by Top-N).

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::error::Result;
use crate::eval::ComparisonResult;

/// Pretty JSON with object keys in sorted order and a trailing newline.
pub fn to_sorted_json<T: Serialize>(value: &T) -> Result<String> {
    // serde_json's default map is ordered, so a round trip through Value sorts every object
    let v = serde_json::to_value(value)?;
    let mut s = serde_json::to_string_pretty(&v)?;
    s.push('\n');
    Ok(s)
}

/// Accuracy table: one row per method, one column per N, values in percent with one decimal.
pub fn render_table(rows: &[(String, BTreeMap<usize, f64>)], ns: &[usize]) -> String {
    let name_w = rows.iter().map(|(n, _)| n.len()).chain(["Method".len()]).max().unwrap_or(6);
    let headers: Vec<String> = ns.iter().map(|n| format!("Top-{n}")).collect();
    let col_w: Vec<usize> = headers.iter().map(|h| h.len().max(5)).collect();
    let mut out = String::new();
    let _ = write!(out, "{:<name_w$}", "Method");
    for (h, w) in headers.iter().zip(&col_w) {
        let _ = write!(out, "  {h:>w$}");
    }
    out.push('\n');
    for (name, acc) in rows {
        let _ = write!(out, "{name:<name_w$}");
        for (n, w) in ns.iter().zip(&col_w) {
            match acc.get(n) {
                Some(v) => {
                    let _ = write!(out, "  {:>w$.1}", 100.0 * v);
                }
                None => {
                    let _ = write!(out, "  {:>w$}", "-");
                }
            }
        }
        out.push('\n');
    }
    out
}

/// Comparison table: delta in accuracy points, raw and adjusted p per N.
pub fn render_comparisons(results: &[ComparisonResult]) -> String {
    let mut out = String::new();
    if let Some(first) = results.first() {
        let _ = writeln!(
            out,
            "paired t-test on per-query hits, Bonferroni family = {} comparisons, level {}",
            first.family_size, first.level
        );
    }
    for c in results {
        let _ = writeln!(out, "{} vs {}", c.a, c.b);
        let _ = writeln!(out, "  {:>7}  {:>7}  {:>9}  {:>9}  {:>9}  sig", "N", "delta", "t", "p", "p_adj");
        for r in &c.rows {
            let t = r.test.t.map_or_else(|| "-".to_string(), |t| format!("{t:.3}"));
            let flag = if r.test.identical {
                "identical"
            } else if r.significant {
                "*"
            } else {
                ""
            };
            let _ = writeln!(
                out,
                "  {:>7}  {:>+7.1}  {:>9}  {:>9.4}  {:>9.4}  {flag}",
                format!("Top-{}", r.top_n),
                100.0 * r.delta,
                t,
                r.test.p_value,
                r.p_adjusted
            );
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::EvalReport;

    fn report() -> EvalReport {
        EvalReport {
            expander: "aligned".into(),
            n_queries: 2,
            cutoff: 100,
            accuracy: [(1, 0.5), (5, 1.0)].into(),
            diversity: Some(0.25),
            forward_passes: 7,
            per_query: vec![],
        }
    }

    #[test]
    fn json_round_trip_and_sorted_keys() {
        let s = to_sorted_json(&report()).unwrap();
        let back: EvalReport = serde_json::from_str(&s).unwrap();
        assert_eq!(back, report());
        let keys: Vec<usize> = ["accuracy", "cutoff", "diversity", "expander", "forward_passes", "n_queries", "per_query"]
            .iter()
            .map(|k| s.find(&format!("\"{k}\"")).unwrap())
            .collect();
        assert!(keys.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(s, to_sorted_json(&report()).unwrap());
    }

    #[test]
    fn table_has_one_numeric_column_per_n() {
        let t = render_table(&[("aligned".into(), report().accuracy)], &[1, 5]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 2);
        let numeric = lines[1].split_whitespace().filter(|c| c.parse::<f64>().is_ok()).count();
        assert_eq!(numeric, 2);
        assert!(lines[1].contains("50.0") && lines[1].contains("100.0"));
        assert_eq!(t, render_table(&[("aligned".into(), report().accuracy)], &[1, 5]));
    }
}
