//! Plot-ready output files and the manifest that lists them.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cpe::{CpeReport, InfluenceMatrix};
use crate::error::{CpeError, Result};
use crate::runner::{EpisodeResult, MetricsRow};

pub const METRICS_HEADER: &str = "rho_max,success_rate,collision_rate,execution_rate,episodes";

/// Formats like C's `%.17g`, which round-trips every `f64`.
pub fn fmt_g17(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    let sci = format!("{:.16e}", x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..17).contains(&exp) {
        let fixed = format!("{:.*}", (16 - exp) as usize, x);
        trim_zeros(&fixed).to_string()
    } else {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{}{:02}", trim_zeros(mantissa), sign, exp.abs())
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(METRICS_HEADER.split(',')).expect("in-memory write");
    for r in rows {
        w.write_record([
            fmt_g17(r.rho_max),
            fmt_g17(r.success_rate),
            fmt_g17(r.collision_rate),
            fmt_g17(r.execution_rate),
            r.episodes.to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ascii")
}

/// One parsed line of `metrics.csv`.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
pub struct MetricsCsvRow {
    pub rho_max: f64,
    pub success_rate: f64,
    pub collision_rate: f64,
    pub execution_rate: f64,
    pub episodes: usize,
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsCsvRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let parse_err = |e: csv::Error| {
        let line = e.position().map_or(0, |p| p.line() as usize);
        CpeError::Parse {
            line,
            column: 1,
            message: e.to_string(),
        }
    };
    let header = r.headers().map_err(parse_err)?;
    if header.iter().collect::<Vec<_>>().join(",") != METRICS_HEADER {
        return Err(CpeError::Parse {
            line: 1,
            column: 1,
            message: "missing metrics header".into(),
        });
    }
    r.deserialize().map(|row| row.map_err(parse_err)).collect()
}

/// Rows are observed vehicles, columns the worlds in which each vehicle was
/// replaced.
pub fn influence_csv(m: &InfluenceMatrix) -> String {
    let mut out = String::from("observed");
    for id in &m.replaced {
        out.push_str(&format!(",replaced_{id}"));
    }
    out.push('\n');
    for (id, row) in m.observed.iter().zip(&m.values) {
        out.push_str(&id.to_string());
        for v in row {
            out.push(',');
            out.push_str(&fmt_g17(*v));
        }
        out.push('\n');
    }
    out
}

/// What a command produced. Absent parts write no file.
#[derive(Debug, Clone, Default)]
pub struct RunOutputs {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub metrics: Vec<MetricsRow>,
    pub episodes: Vec<EpisodeResult>,
    pub report: Option<CpeReport>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub files: Vec<String>,
}

fn write(dir: &Path, name: &str, body: &str, files: &mut Vec<String>) -> Result<()> {
    fs::write(dir.join(name), body)?;
    files.push(name.to_string());
    Ok(())
}

fn pretty<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

/// Writes every present output plus `manifest.json`, which is written last.
pub fn write_reports(out: &RunOutputs, dir: impl AsRef<Path>) -> Result<Manifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    if !out.metrics.is_empty() {
        write(dir, "metrics.csv", &metrics_csv(&out.metrics), &mut files)?;
        write(dir, "metrics.json", &pretty(&out.metrics), &mut files)?;
    }
    if !out.episodes.is_empty() {
        let mut lines = String::new();
        for e in &out.episodes {
            lines.push_str(&serde_json::to_string(e).expect("serializable"));
            lines.push('\n');
        }
        write(dir, "episodes.jsonl", &lines, &mut files)?;
    }
    if let Some(r) = &out.report {
        write(dir, "influence.csv", &influence_csv(&r.influence_matrix), &mut files)?;
        write(dir, "report.json", &pretty(r), &mut files)?;
    }
    let manifest = Manifest {
        command: out.command.clone(),
        config_hash: out.config_hash.clone(),
        seed: out.seed,
        files,
    };
    fs::write(dir.join("manifest.json"), pretty(&manifest))?;
    Ok(manifest)
}
