//! Plain-text tables for `--pretty`.

use std::fmt::Write;

use gdr_core::denoiser::GradientReport;
use gdr_core::retrieval::RankedResult;
use serde_json::Value;

/// Dotted `key  value` lines for every scalar in a JSON document.
pub fn flat(value: &Value) -> String {
    fn walk(prefix: &str, v: &Value, rows: &mut Vec<(String, String)>) {
        match v {
            Value::Object(map) => {
                for (k, child) in map {
                    let key = if prefix.is_empty() {
                        k.clone()
                    } else {
                        format!("{prefix}.{k}")
                    };
                    walk(&key, child, rows);
                }
            }
            Value::Array(items) if items.iter().all(|i| !i.is_object() && !i.is_array()) => {
                let joined: Vec<String> = items.iter().map(scalar).collect();
                rows.push((prefix.to_string(), joined.join(", ")));
            }
            Value::Array(items) => {
                for (i, child) in items.iter().enumerate() {
                    walk(&format!("{prefix}[{i}]"), child, rows);
                }
            }
            other => rows.push((prefix.to_string(), scalar(other))),
        }
    }
    let mut rows = Vec::new();
    walk("", value, &mut rows);
    let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut out = String::new();
    for (k, v) in rows {
        let _ = writeln!(out, "{k:<width$}  {v}");
    }
    out
}

fn scalar(v: &Value) -> String {
    match v {
        Value::Null => "-".into(),
        Value::Number(n) => match n.as_f64() {
            Some(f) if !n.is_i64() && !n.is_u64() => format!("{f:.6}"),
            _ => n.to_string(),
        },
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

pub fn ranking(ranked: &RankedResult, retention: Option<f64>) -> String {
    let mut out = String::new();
    let width = ranked.results.iter().map(|h| h.id.len()).max().unwrap_or(2).max(2);
    let _ = writeln!(out, "{:>4}  {:<width$}  {:>9}  labels", "rank", "id", "score");
    for h in &ranked.results {
        let labels: Vec<String> = h.labels.iter().map(|(k, v)| format!("{k}={v}")).collect();
        let _ = writeln!(
            out,
            "{:>4}  {:<width$}  {:>9.6}  {}",
            h.rank,
            h.id,
            h.score,
            labels.join(" ")
        );
    }
    if let Some(r) = retention {
        let _ = writeln!(out, "retention {r:.6}");
    }
    out
}

pub fn gradcheck(reports: &[GradientReport]) -> String {
    let mut out = String::new();
    for r in reports {
        let verdict = if r.passed { "PASS" } else { "FAIL" };
        let _ = writeln!(
            out,
            "{verdict} {} ({} params): max rel err {:.3e} in {} (tolerance {:.1e})",
            r.arch, r.param_count, r.max_rel_err, r.worst_segment, r.tolerance
        );
        for s in &r.per_segment {
            let _ = writeln!(out, "    {:<12} {:.3e}", s.segment, s.max_rel_err);
        }
    }
    out
}
