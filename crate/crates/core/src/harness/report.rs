use std::io::Write;

use serde::Serialize;

use super::HarnessError;
use crate::message::PayloadTier;
use crate::netem::LinkProfile;
use crate::transport::BackendSpec;

pub const CSV_HEADER: [&str; 7] = ["backend", "tier", "profile", "metric", "value", "unit", "rep"];

/// What every report records about how it was produced.
#[derive(Debug, Clone, Serialize)]
pub struct ReportMeta {
    pub tool_version: &'static str,
    pub seed: u64,
    pub scale: f64,
    /// Resolved, scaled backend settings.
    pub backend: BackendSpec,
    pub tier: PayloadTier,
    /// Label for the CSV `profile` column.
    pub profile: String,
    /// Every link profile used, scaled.
    pub profiles: Vec<LinkProfile>,
    pub store: String,
}

impl ReportMeta {
    pub fn new(
        backend: &BackendSpec,
        tier: PayloadTier,
        profiles: Vec<LinkProfile>,
        seed: u64,
        scale: f64,
        store: &str,
    ) -> Self {
        // Store links are named after their region; they don't make a run
        // mixed.
        let region = |p: &LinkProfile| p.name().trim_start_matches("store:").to_owned();
        let profile = match profiles.first() {
            Some(p) if profiles.iter().all(|q| region(q) == region(p)) => region(p),
            Some(_) => "mixed".to_owned(),
            None => String::new(),
        };
        Self {
            tool_version: env!("CARGO_PKG_VERSION"),
            seed,
            scale,
            backend: backend.clone(),
            tier,
            profile,
            profiles,
            store: store.to_owned(),
        }
    }
}

/// One CSV data row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Row {
    pub backend: String,
    pub tier: String,
    pub profile: String,
    pub metric: String,
    pub value: String,
    pub unit: String,
    pub rep: Option<u32>,
}

/// Metric rows without the identifying columns.
#[derive(Debug, Default)]
pub struct Metrics(Vec<(String, String, &'static str, Option<u32>)>);

impl Metrics {
    pub fn new() -> Self {
        Self(Vec::new())
    }

    pub fn num(&mut self, metric: impl Into<String>, value: f64, unit: &'static str) -> &mut Self {
        self.0.push((metric.into(), value.to_string(), unit, None));
        self
    }

    pub fn rep(&mut self, metric: impl Into<String>, value: f64, unit: &'static str, rep: u32) -> &mut Self {
        self.0.push((metric.into(), value.to_string(), unit, Some(rep)));
        self
    }

    pub fn text(&mut self, metric: impl Into<String>, value: impl Into<String>) -> &mut Self {
        self.0.push((metric.into(), value.into(), "", None));
        self
    }
}

/// A benchmark report, serializable as JSON and as CSV rows.
pub trait Report: Serialize {
    fn meta(&self) -> &ReportMeta;

    fn metrics(&self) -> Metrics;

    /// Metadata rows followed by metric rows.
    fn rows(&self) -> Vec<Row> {
        let meta = self.meta();
        let mut m = Metrics::new();
        m.text("meta.tool_version", meta.tool_version)
            .text("meta.seed", meta.seed.to_string())
            .num("meta.scale", meta.scale, "")
            .text("meta.store", meta.store.clone())
            .text("meta.config", serde_json::to_string(meta).expect("meta serializes"));
        m.0.extend(self.metrics().0);
        m.0.into_iter()
            .map(|(metric, value, unit, rep)| Row {
                backend: meta.backend.name.clone(),
                tier: meta.tier.name().to_owned(),
                profile: meta.profile.clone(),
                metric,
                value,
                unit: unit.to_owned(),
                rep,
            })
            .collect()
    }
}

pub fn write_csv<R: Report + ?Sized>(report: &R, out: impl Write) -> Result<(), HarnessError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    let err = |e: csv::Error| HarnessError::Output(e.to_string());
    w.write_record(CSV_HEADER).map_err(err)?;
    for row in report.rows() {
        w.serialize(row).map_err(err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<R: Report + ?Sized>(report: &R, out: impl Write) -> Result<(), HarnessError> {
    serde_json::to_writer_pretty(out, report).map_err(|e| HarnessError::Output(e.to_string()))
}

/// Median and spread of a sample, in seconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Summary {
    pub median: f64,
    pub p10: f64,
    pub p90: f64,
    pub mean: f64,
}

impl Summary {
    /// Linear-interpolated percentiles. Empty input gives all zeros.
    pub fn of(xs: &[f64]) -> Self {
        if xs.is_empty() {
            return Self::default();
        }
        let mut v = xs.to_vec();
        v.sort_by(f64::total_cmp);
        let pct = |q: f64| {
            let pos = q * (v.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
        };
        Self {
            median: pct(0.5),
            p10: pct(0.1),
            p90: pct(0.9),
            mean: v.iter().sum::<f64>() / v.len() as f64,
        }
    }

    pub fn push(&self, m: &mut Metrics, prefix: &str, unit: &'static str) {
        m.num(format!("{prefix}_median"), self.median, unit)
            .num(format!("{prefix}_p10"), self.p10, unit)
            .num(format!("{prefix}_p90"), self.p90, unit);
    }
}
