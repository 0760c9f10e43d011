//! Splitting provisioning and image-pull costs into one-time and repeated
//! from an event log.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::Serialize;

use crate::cluster::CostEntry;
use crate::engine::{read_log, LogRecord};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostRow {
    pub class: String,
    pub kind: String,
    pub count: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CostReport {
    pub runs: usize,
    /// Whether any run in the log made scaling decisions.
    pub autoscaling: bool,
    pub rows: Vec<CostRow>,
    pub one_time_count: usize,
    pub repeated_count: usize,
    pub one_time_seconds: f64,
    pub repeated_seconds: f64,
}

pub fn cost_report(records: &[(Option<String>, LogRecord)]) -> CostReport {
    let mut report = CostReport::default();
    let mut runs = BTreeSet::new();
    let mut rows: BTreeMap<(String, String), (usize, f64)> = BTreeMap::new();
    for (run, rec) in records {
        runs.insert(run.clone());
        match rec.kind.as_str() {
            "scale_decision" => report.autoscaling = true,
            "cost" => {
                let Ok(entry) = serde_json::from_value::<CostEntry>(rec.payload.clone()) else {
                    continue;
                };
                let class = serde_json::to_value(entry.class).unwrap_or_default();
                let kind = serde_json::to_value(entry.kind).unwrap_or_default();
                let slot = rows
                    .entry((
                        class.as_str().unwrap_or_default().to_string(),
                        kind.as_str().unwrap_or_default().to_string(),
                    ))
                    .or_default();
                slot.0 += 1;
                slot.1 += entry.seconds;
                match entry.class {
                    crate::cluster::CostClass::OneTime => {
                        report.one_time_count += 1;
                        report.one_time_seconds += entry.seconds;
                    }
                    crate::cluster::CostClass::Repeated => {
                        report.repeated_count += 1;
                        report.repeated_seconds += entry.seconds;
                    }
                }
            }
            _ => {}
        }
    }
    report.runs = runs.len();
    report.rows = rows
        .into_iter()
        .map(|((class, kind), (count, seconds))| CostRow {
            class,
            kind,
            count,
            seconds,
        })
        .collect();
    report
}

/// Parses a JSON-lines log and reports on it.
pub fn cost_report_text(text: &str) -> Result<CostReport, String> {
    Ok(cost_report(&read_log(text)?))
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "runs: {}  autoscaling: {}",
            self.runs,
            if self.autoscaling { "on" } else { "off" }
        )?;
        writeln!(f, "{:<10} {:<11} {:>7} {:>12}", "class", "kind", "count", "seconds")?;
        for r in &self.rows {
            writeln!(f, "{:<10} {:<11} {:>7} {:>12.3}", r.class, r.kind, r.count, r.seconds)?;
        }
        writeln!(f, "one_time: {} entries, {:.3} s", self.one_time_count, self.one_time_seconds)?;
        write!(f, "repeated: {} entries, {:.3} s", self.repeated_count, self.repeated_seconds)
    }
}
