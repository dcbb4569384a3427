//! Cross-policy aggregation and exports.
//!
//! Per (family, tier) cell, each policy contributes the unweighted mean of
//! its template rates; the aggregate is the mean and population standard
//! deviation over contributing policies. A policy with no episodes in a cell
//! is listed under `missing` and left out, never counted as zero.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::capability::{CapabilityReport, TemplateResult};
use crate::episode::{Family, Tier};
use crate::stress::{Level, MetricRecord, StressKind};
use crate::taskgen::TemplateRef;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no reports to aggregate")]
    Empty,
    #[error("report for {policy} covers a different catalog")]
    CatalogMismatch { policy: String },
    #[error("unknown export format {0:?}")]
    UnknownFormat(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Radar axes in display order.
pub const RADAR_AXES: [Family; 6] = [
    Family::Perception,
    Family::Control,
    Family::Language,
    Family::SpatialReasoning,
    Family::DynamicAdaptation,
    Family::Robustness,
];

pub fn axis_label(f: Family) -> &'static str {
    match f {
        Family::SpatialReasoning => "Spatial",
        Family::DynamicAdaptation => "Dynamic",
        f => f.as_str(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateCell {
    pub family: Family,
    pub tier: Tier,
    /// `None` when no policy has data for the cell.
    pub mean: Option<f64>,
    pub std: Option<f64>,
    /// Policies contributing to the cell.
    pub count: u32,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub missing: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StressAggregate {
    pub kind: StressKind,
    pub level: Level,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub count: u32,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failed: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub capability: Vec<CapabilityReport>,
    #[serde(default)]
    pub stress: Vec<MetricRecord>,
    pub cells: Vec<AggregateCell>,
    #[serde(default)]
    pub stress_cells: Vec<StressAggregate>,
}

/// Mean and population (divisor N) standard deviation.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

/// A policy's unweighted mean over the cell's templates that ran.
fn policy_cell(r: &CapabilityReport, family: Family, tier: Tier) -> Option<f64> {
    let rates: Vec<f64> = r
        .templates
        .iter()
        .filter(|t| t.family == family && t.tier == tier && t.episodes_run > 0)
        .map(|t| t.successes as f64 / t.episodes_run as f64)
        .collect();
    mean_std(&rates).map(|(m, _)| m)
}

fn catalog(r: &CapabilityReport) -> BTreeSet<TemplateRef> {
    r.templates.iter().map(TemplateResult::template_ref).collect()
}

/// The headline value of a stress record.
pub fn primary_value(m: &MetricRecord) -> Option<f64> {
    match m.kind {
        StressKind::Frequency => m.frequency_hz,
        StressKind::Latency => m.latency_ms.map(|l| l.mean),
        StressKind::Stability => m.stability,
        StressKind::Adaptability => m.adaptability_rate,
        StressKind::Resources => m.resources.and_then(|r| r.peak_process_mem_bytes).map(|b| b as f64),
    }
}

fn sort_key_report(r: &CapabilityReport) -> (String, u64, String) {
    (r.meta.policy_id.clone(), r.meta.seed, serde_json::to_string(r).unwrap_or_default())
}

/// Aggregates capability reports (and optional stress records) across
/// policies. The result does not depend on input order.
pub fn aggregate(reports: &[CapabilityReport], stress: &[MetricRecord]) -> Result<EvalReport, ReportError> {
    let first = reports.first().ok_or(ReportError::Empty)?;
    let expected = catalog(first);
    for r in reports {
        if catalog(r) != expected {
            return Err(ReportError::CatalogMismatch {
                policy: r.meta.policy_id.clone(),
            });
        }
    }
    let mut capability = reports.to_vec();
    capability.sort_by_cached_key(sort_key_report);
    let cell_keys: BTreeSet<(Family, Tier)> = expected.iter().map(|t| (t.family, t.tier)).collect();
    let cells = cell_keys
        .into_iter()
        .map(|(family, tier)| {
            let mut values = Vec::new();
            let mut missing = Vec::new();
            for r in &capability {
                match policy_cell(r, family, tier) {
                    Some(v) => values.push(v),
                    None => missing.push(r.meta.policy_id.clone()),
                }
            }
            let (mean, std) = mean_std(&values).unzip();
            AggregateCell {
                family,
                tier,
                mean,
                std,
                count: values.len() as u32,
                missing,
            }
        })
        .collect();

    let mut stress = stress.to_vec();
    stress.sort_by_cached_key(|m| (m.kind as u8, m.level, m.policy_id.clone(), m.to_json()));
    let keys: BTreeSet<(u8, Level)> = stress.iter().map(|m| (m.kind as u8, m.level)).collect();
    let stress_cells = keys
        .into_iter()
        .map(|(k, level)| {
            let group: Vec<&MetricRecord> = stress.iter().filter(|m| m.kind as u8 == k && m.level == level).collect();
            let mut values = Vec::new();
            let mut failed = Vec::new();
            for m in &group {
                match primary_value(m).filter(|_| !m.failed()) {
                    Some(v) => values.push(v),
                    None => failed.push(m.policy_id.clone()),
                }
            }
            let (mean, std) = mean_std(&values).unzip();
            StressAggregate {
                kind: group[0].kind,
                level,
                mean,
                std,
                count: values.len() as u32,
                failed,
            }
        })
        .collect();
    Ok(EvalReport {
        capability,
        stress,
        cells,
        stress_cells,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Json,
    Csv,
    RadarJson,
}

impl FromStr for ExportFormat {
    type Err = ReportError;

    fn from_str(s: &str) -> Result<Self, ReportError> {
        match s {
            "json" => Ok(ExportFormat::Json),
            "csv" => Ok(ExportFormat::Csv),
            "radar_json" => Ok(ExportFormat::RadarJson),
            _ => Err(ReportError::UnknownFormat(s.to_string())),
        }
    }
}

impl fmt::Display for ExportFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExportFormat::Json => "json",
            ExportFormat::Csv => "csv",
            ExportFormat::RadarJson => "radar_json",
        })
    }
}

pub const CSV_HEADER: [&str; 7] = ["policy_id", "family", "tier", "template_id", "episodes", "successes", "rate"];

/// Serializes `report`. `tiers` restricts the radar view (all tiers when
/// `None`); the other formats ignore it.
pub fn export(report: &EvalReport, format: ExportFormat, tiers: Option<&[Tier]>) -> Result<Vec<u8>, ReportError> {
    match format {
        ExportFormat::Json => Ok(serde_json::to_vec_pretty(report).expect("report serializes")),
        ExportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(CSV_HEADER)?;
            for r in &report.capability {
                for t in &r.templates {
                    w.write_record([
                        r.meta.policy_id.clone(),
                        t.family.to_string(),
                        t.tier.to_string(),
                        t.template_id.to_string(),
                        t.episodes_run.to_string(),
                        t.successes.to_string(),
                        t.success_rate.to_string(),
                    ])?;
                }
            }
            w.into_inner().map_err(|e| ReportError::Csv(e.into_error().into()))
        }
        ExportFormat::RadarJson => {
            let bytes = serde_json::to_vec_pretty(&radar(report, tiers)).expect("radar serializes");
            Ok(bytes)
        }
    }
}

fn axis_values(cell: impl Fn(Family, Tier) -> Option<f64>, tiers: &[Tier]) -> Vec<Option<f64>> {
    RADAR_AXES
        .iter()
        .map(|&f| {
            let v: Vec<f64> = tiers.iter().filter_map(|&t| cell(f, t)).collect();
            mean_std(&v).map(|(m, _)| m)
        })
        .collect()
}

/// Radar payload: one value per axis, per policy and per tier, plus the
/// cross-policy mean. Axis values average the included tiers uniformly.
pub fn radar(report: &EvalReport, tiers: Option<&[Tier]>) -> serde_json::Value {
    let tiers: Vec<Tier> = tiers.map(<[Tier]>::to_vec).unwrap_or_else(|| Tier::ALL.to_vec());
    let per_tier = |cell: &dyn Fn(Family, Tier) -> Option<f64>| {
        tiers
            .iter()
            .map(|t| (t.to_string(), json!(axis_values(cell, &[*t]))))
            .collect::<serde_json::Map<_, _>>()
    };
    let series: Vec<serde_json::Value> = report
        .capability
        .iter()
        .map(|r| {
            let cell = |f, t| policy_cell(r, f, t);
            json!({
                "policy_id": r.meta.policy_id,
                "values": axis_values(cell, &tiers),
                "per_tier": per_tier(&cell),
            })
        })
        .collect();
    let mean_cell = |f: Family, t: Tier| {
        report
            .cells
            .iter()
            .find(|c| c.family == f && c.tier == t)
            .and_then(|c| c.mean)
    };
    json!({
        "axes": RADAR_AXES.iter().map(|f| axis_label(*f)).collect::<Vec<_>>(),
        "tiers": tiers.iter().map(Tier::to_string).collect::<Vec<_>>(),
        "series": series,
        "mean": {
            "values": axis_values(mean_cell, &tiers),
            "per_tier": per_tier(&mean_cell),
        },
    })
}

#[cfg(test)]
mod tests;
