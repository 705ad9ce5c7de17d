use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::{EvalError, EvalReport, Metric};

const HEADER: &str = "model\ttask\tmetric\tvalue\tn_items";

/// Tab-separated report table with a header row.
pub fn write_reports(reports: &[EvalReport]) -> String {
    let mut out = format!("{HEADER}\n");
    for r in reports {
        writeln!(out, "{}\t{}\t{}\t{}\t{}", r.model, r.task, r.metric.name(), r.value, r.n_items).unwrap();
    }
    out
}

pub fn read_reports(text: &str) -> Result<Vec<EvalReport>, EvalError> {
    let mut reports = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line == HEADER {
            continue;
        }
        let bad = |message: String| EvalError::Format { line: i + 1, message };
        let fields: Vec<&str> = line.split('\t').collect();
        let [model, task, metric, value, n_items] = fields[..] else {
            return Err(bad(format!("expected 5 tab-separated fields, got {}", fields.len())));
        };
        reports.push(EvalReport {
            model: model.to_string(),
            task: task.to_string(),
            metric: metric.parse().map_err(bad)?,
            value: value.parse().map_err(|e| bad(format!("value: {e}")))?,
            n_items: n_items.parse().map_err(|e| bad(format!("n_items: {e}")))?,
        });
    }
    Ok(reports)
}

/// A score next to the baseline's score on the same task and metric.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaRow {
    pub model: String,
    pub task: String,
    pub metric: Metric,
    pub value: f64,
    pub baseline_value: Option<f64>,
    /// `value - baseline_value`; absent when the baseline lacks this task.
    pub delta: Option<f64>,
}

impl DeltaRow {
    pub fn incomplete(&self) -> bool {
        self.delta.is_none()
    }
}

/// Pairs every report with the baseline model's score on the same task.
pub fn delta_report(reports: &[EvalReport], baseline: &str) -> Result<Vec<DeltaRow>, EvalError> {
    if !reports.iter().any(|r| r.model == baseline) {
        return Err(EvalError::MissingBaseline(baseline.to_string()));
    }
    let base: BTreeMap<(&str, Metric), f64> = reports
        .iter()
        .filter(|r| r.model == baseline)
        .map(|r| ((r.task.as_str(), r.metric), r.value))
        .collect();
    Ok(reports
        .iter()
        .map(|r| {
            let baseline_value = base.get(&(r.task.as_str(), r.metric)).copied();
            DeltaRow {
                model: r.model.clone(),
                task: r.task.clone(),
                metric: r.metric,
                value: r.value,
                baseline_value,
                delta: baseline_value.map(|b| r.value - b),
            }
        })
        .collect())
}

/// One row per task, a score column per model (baseline first) and a
/// difference column after every other model. Missing cells read `NA`.
pub fn delta_table(rows: &[DeltaRow], baseline: &str) -> String {
    let mut models: Vec<&str> = vec![baseline];
    let mut tasks: Vec<(&str, Metric)> = Vec::new();
    for r in rows {
        if !models.contains(&r.model.as_str()) {
            models.push(&r.model);
        }
        if !tasks.contains(&(r.task.as_str(), r.metric)) {
            tasks.push((&r.task, r.metric));
        }
    }
    let cell = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |v| format!("{v:.4}"));
    let mut out = String::from("task\tmetric");
    for m in &models {
        write!(out, "\t{m}").unwrap();
        if *m != baseline {
            write!(out, "\tdelta_{m}").unwrap();
        }
    }
    out.push('\n');
    for (task, metric) in tasks {
        write!(out, "{task}\t{}", metric.name()).unwrap();
        for m in &models {
            let row = rows.iter().find(|r| r.model == *m && r.task == task && r.metric == metric);
            write!(out, "\t{}", cell(row.map(|r| r.value))).unwrap();
            if *m != baseline {
                write!(out, "\t{}", cell(row.and_then(|r| r.delta))).unwrap();
            }
        }
        out.push('\n');
    }
    out
}
