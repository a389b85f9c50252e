//! Evaluation reports.
//!
//! A report directory holds three files:
//!
//! * `rows.csv`: one row per setting x model x proxy x track x source with
//!   the columns of [`ReportRow`], in that order. Optional values are empty.
//! * `summary.csv`: one row per track with the source-averaged ΔSDR of
//!   every group, followed by a `median` and a `mean` row.
//! * `report.json`: the rows, the per-group medians ([`GroupSummary`]), any
//!   command-specific payload, and the reproducibility [`Stanza`].
//!
//! A group is the set of rows sharing `setting`, `model` and `proxy`. Medians
//! are taken over tracks; `avg` is the mean of the per-source medians.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::metrics::{self, Aggregate, MetricsError, TrackScores};

pub const REPORT_FORMAT: &str = "amicable-report";
pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{path}: {detail}")]
    Io { path: String, detail: String },
}

fn io_err(path: &Path) -> impl FnOnce(String) -> ReportError + '_ {
    move |detail| ReportError::Io {
        path: path.display().to_string(),
        detail,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    /// Experiment point, e.g. `lambda=5e-7`; empty when there is only one.
    pub setting: String,
    /// Model label, `m<index>:<arch>`.
    pub model: String,
    /// Compression proxy, or `none`.
    pub proxy: String,
    pub track_id: String,
    pub source: usize,
    pub sdr_clean: f64,
    pub sdr_perturbed: Option<f64>,
    pub delta_sdr: Option<f64>,
    pub di_sdr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaSummary {
    pub median_per_source: Vec<f64>,
    /// Mean of `median_per_source`.
    pub avg: f64,
    /// Mean over every track and source.
    pub mean: f64,
    /// Median over tracks of the source-averaged delta.
    pub median_track: f64,
    /// Tracks whose source-averaged delta is positive.
    pub positive_tracks: usize,
    pub negative_tracks: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub setting: String,
    pub model: String,
    pub proxy: String,
    pub tracks: usize,
    pub clean: Aggregate,
    pub perturbed: Option<Aggregate>,
    pub delta: Option<DeltaSummary>,
    pub median_di_sdr: Option<f64>,
}

impl GroupSummary {
    pub fn label(&self) -> String {
        [self.setting.as_str(), self.model.as_str(), self.proxy.as_str()]
            .iter()
            .filter(|s| !s.is_empty() && **s != "none")
            .copied()
            .collect::<Vec<_>>()
            .join("|")
    }
}

/// Provenance block written into every report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stanza {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// SHA-256 of the resolved configuration, hex encoded.
    pub config_sha256: String,
    pub seeds: BTreeMap<String, u64>,
    /// SHA-256 of every input checkpoint, by path as given.
    pub models: BTreeMap<String, String>,
}

impl Stanza {
    pub fn new(command: &str, config_json: &str) -> Self {
        Self {
            tool: "amicable".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config_sha256: sha256_hex(config_json.as_bytes()),
            seeds: BTreeMap::new(),
            models: BTreeMap::new(),
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format: String,
    pub version: u32,
    pub stanza: Stanza,
    pub groups: Vec<GroupSummary>,
    pub rows: Vec<ReportRow>,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub extra: serde_json::Value,
}

fn group_key(r: &ReportRow) -> (String, String, String) {
    (r.setting.clone(), r.model.clone(), r.proxy.clone())
}

fn summarize(rows: &[&ReportRow]) -> Result<GroupSummary, ReportError> {
    let first = rows[0];
    // Track order follows first appearance.
    let mut order: Vec<&str> = Vec::new();
    let mut by_track: BTreeMap<&str, Vec<&ReportRow>> = BTreeMap::new();
    for r in rows {
        if !by_track.contains_key(r.track_id.as_str()) {
            order.push(&r.track_id);
        }
        by_track.entry(&r.track_id).or_default().push(r);
    }
    let per_track = |f: &dyn Fn(&ReportRow) -> Option<f64>| -> Option<Vec<TrackScores>> {
        order
            .iter()
            .map(|id| {
                let mut rs = by_track[id].clone();
                rs.sort_by_key(|r| r.source);
                Some(TrackScores {
                    track_id: id.to_string(),
                    sdr: rs.iter().map(|r| f(r)).collect::<Option<Vec<_>>>()?,
                    di_sdr: rs[0].di_sdr,
                })
            })
            .collect()
    };
    let clean = metrics::aggregate(&per_track(&|r| Some(r.sdr_clean)).expect("clean always present"))?;
    let perturbed = per_track(&|r| r.sdr_perturbed).map(|s| metrics::aggregate(&s)).transpose()?;
    let delta = match per_track(&|r| r.delta_sdr) {
        Some(scores) => {
            let agg = metrics::aggregate(&scores)?;
            let track_means: Vec<f64> = scores.iter().map(|s| metrics::mean(&s.sdr).unwrap_or(0.0)).collect();
            let all: Vec<f64> = scores.iter().flat_map(|s| s.sdr.iter().copied()).collect();
            Some(DeltaSummary {
                median_per_source: agg.median_per_source,
                avg: agg.avg,
                mean: metrics::mean(&all).unwrap_or(0.0),
                median_track: metrics::median(&track_means).unwrap_or(0.0),
                positive_tracks: track_means.iter().filter(|v| **v > 0.0).count(),
                negative_tracks: track_means.iter().filter(|v| **v < 0.0).count(),
            })
        }
        None => None,
    };
    Ok(GroupSummary {
        setting: first.setting.clone(),
        model: first.model.clone(),
        proxy: first.proxy.clone(),
        tracks: order.len(),
        median_di_sdr: clean.median_di_sdr,
        clean,
        perturbed,
        delta,
    })
}

impl EvalReport {
    /// Builds the report; groups appear in the order of their first row.
    pub fn new(stanza: Stanza, rows: Vec<ReportRow>, extra: serde_json::Value) -> Result<Self, ReportError> {
        let mut keys: Vec<(String, String, String)> = Vec::new();
        for r in &rows {
            let k = group_key(r);
            if !keys.contains(&k) {
                keys.push(k);
            }
        }
        let groups = keys
            .iter()
            .map(|k| {
                let members: Vec<&ReportRow> = rows.iter().filter(|r| &group_key(r) == k).collect();
                summarize(&members)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            format: REPORT_FORMAT.into(),
            version: REPORT_VERSION,
            stanza,
            groups,
            rows,
            extra,
        })
    }

    /// First group matching all given fields.
    pub fn group(&self, setting: Option<&str>, model: Option<&str>, proxy: Option<&str>) -> Option<&GroupSummary> {
        self.groups.iter().find(|g| {
            setting.is_none_or(|s| g.setting == s)
                && model.is_none_or(|m| g.model == m)
                && proxy.is_none_or(|p| g.proxy == p)
        })
    }

    pub fn rows_csv(&self) -> Result<String, ReportError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        if self.rows.is_empty() {
            w.write_record([
                "setting",
                "model",
                "proxy",
                "track_id",
                "source",
                "sdr_clean",
                "sdr_perturbed",
                "delta_sdr",
                "di_sdr",
            ])
            .map_err(|e| io_err(Path::new("rows.csv"))(e.to_string()))?;
        }
        for r in &self.rows {
            w.serialize(r).map_err(|e| io_err(Path::new("rows.csv"))(e.to_string()))?;
        }
        Ok(String::from_utf8(w.into_inner().expect("in-memory writer")).expect("csv is utf-8"))
    }

    /// Wide table of per-track, source-averaged ΔSDR (SDR when there is no
    /// perturbation) for every group, plus median and mean rows.
    pub fn summary_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["track_id".to_string()];
        header.extend(self.groups.iter().map(|g| {
            let metric = if g.delta.is_some() { "delta_sdr" } else { "sdr" };
            let label = g.label();
            if label.is_empty() {
                metric.to_string()
            } else {
                format!("{metric}[{label}]")
            }
        }));
        w.write_record(&header).expect("in-memory writer");

        let mut tracks: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !tracks.contains(&r.track_id.as_str()) {
                tracks.push(&r.track_id);
            }
        }
        let mut columns: Vec<Vec<f64>> = vec![Vec::new(); self.groups.len()];
        for t in &tracks {
            let mut record = vec![t.to_string()];
            for (gi, g) in self.groups.iter().enumerate() {
                let vals: Vec<f64> = self
                    .rows
                    .iter()
                    .filter(|r| r.track_id == *t && group_key(r) == (g.setting.clone(), g.model.clone(), g.proxy.clone()))
                    .map(|r| r.delta_sdr.unwrap_or(r.sdr_clean))
                    .collect();
                match metrics::mean(&vals) {
                    Some(v) => {
                        columns[gi].push(v);
                        record.push(v.to_string());
                    }
                    None => record.push(String::new()),
                }
            }
            w.write_record(&record).expect("in-memory writer");
        }
        for (name, f) in [("median", metrics::median as fn(&[f64]) -> Option<f64>), ("mean", metrics::mean)] {
            let mut record = vec![name.to_string()];
            record.extend(columns.iter().map(|c| f(c).map(|v| v.to_string()).unwrap_or_default()));
            w.write_record(&record).expect("in-memory writer");
        }
        String::from_utf8(w.into_inner().expect("in-memory writer")).expect("csv is utf-8")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// Writes `rows.csv`, `summary.csv` and `report.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), ReportError> {
        for (name, text) in [
            ("rows.csv", self.rows_csv()?),
            ("summary.csv", self.summary_csv()),
            ("report.json", self.to_json()),
        ] {
            let path = dir.join(name);
            fs::write(&path, text).map_err(|e| io_err(&path)(e.to_string()))?;
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, ReportError> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path)(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| io_err(path)(e.to_string()))
    }
}
