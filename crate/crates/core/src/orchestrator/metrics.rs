//! CSV and JSON export of run ledgers, and a text report over a run directory.

use super::run::{RoundStatus, RunOutput};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{path}: missing column '{column}'")]
    MissingColumn { path: PathBuf, column: String },
}

pub const ROUNDS_HEADER: [&str; 24] = [
    "round",
    "status",
    "accuracy",
    "w_low",
    "w_mid",
    "w_high",
    "n_selected",
    "n_uploaded",
    "bytes_features",
    "bytes_eval",
    "bytes_total",
    "bytes_per_client",
    "acc_low",
    "acc_mid",
    "acc_high",
    "single_low",
    "single_mid",
    "single_high",
    "battery_low",
    "battery_mid",
    "battery_high",
    "sim_seconds",
    "server_loss",
    "ablations",
];

pub const CLIENTS_HEADER: [&str; 20] = [
    "round",
    "client_id",
    "tier",
    "dropped",
    "skipped",
    "local_accuracy",
    "local_loss",
    "mu",
    "train_time_s",
    "battery_pct",
    "peak_memory_mb",
    "entries",
    "bytes_raw",
    "bytes_wire",
    "bytes_eval",
    "compression_ratio",
    "eps_round",
    "eps_total",
    "exhausted",
    "ablations",
];

pub const PRIVACY_HEADER: [&str; 5] = ["client_id", "round", "eps_round", "eps_total", "exhausted"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub rounds: usize,
    pub final_accuracy: Option<f64>,
    pub bytes_total: u64,
    pub max_eps_total: f64,
    pub ablations: String,
}

/// Contents of `run.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunFile {
    pub summary: RunSummary,
    #[serde(flatten)]
    pub output: RunOutput,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>, MetricsError> {
    csv::Writer::from_path(path).map_err(|source| MetricsError::Csv { path: path.into(), source })
}

fn write_rows(path: &Path, header: &[&str], rows: Vec<Vec<String>>) -> Result<(), MetricsError> {
    let err = |source| MetricsError::Csv { path: path.into(), source };
    let mut w = writer(path)?;
    w.write_record(header).map_err(err)?;
    for row in rows {
        w.write_record(&row).map_err(err)?;
    }
    w.flush().map_err(|source| MetricsError::Io { path: path.into(), source })
}

pub fn rounds_rows(out: &RunOutput) -> Vec<Vec<String>> {
    let tag = out.config.ablation_tag();
    out.rounds
        .iter()
        .map(|r| {
            let status = match r.status {
                RoundStatus::Ok => "ok",
                RoundStatus::Aborted => "aborted",
            };
            let mut row = vec![r.round.to_string(), status.into(), opt(r.server_accuracy)];
            row.extend(r.weights.iter().map(|w| w.to_string()));
            row.extend([
                r.n_selected.to_string(),
                r.n_uploaded.to_string(),
                r.bytes_features.to_string(),
                r.bytes_eval.to_string(),
                r.bytes_total.to_string(),
                r.bytes_per_client.to_string(),
            ]);
            row.extend(r.tier_accuracy.iter().map(|a| opt(*a)));
            row.extend(r.single_tier_accuracy.iter().map(|a| opt(*a)));
            row.extend(r.battery_by_tier.iter().map(|a| opt(*a)));
            row.extend([r.sim_seconds.to_string(), opt(r.server_loss), tag.clone()]);
            row
        })
        .collect()
}

pub fn clients_rows(out: &RunOutput) -> Vec<Vec<String>> {
    let tag = out.config.ablation_tag();
    out.rounds
        .iter()
        .flat_map(|r| &r.clients)
        .map(|c| {
            vec![
                c.round.to_string(),
                c.client_id.to_string(),
                c.tier.name().to_string(),
                c.dropped.to_string(),
                c.skipped.to_string(),
                c.local_accuracy.to_string(),
                c.local_loss.to_string(),
                c.mu.to_string(),
                c.train_time_s.to_string(),
                c.battery_pct.to_string(),
                c.peak_memory_mb.to_string(),
                c.entries.to_string(),
                c.bytes_raw.to_string(),
                c.bytes_wire.to_string(),
                c.bytes_eval.to_string(),
                c.compression_ratio.to_string(),
                c.eps_round.to_string(),
                c.eps_total.to_string(),
                c.exhausted.to_string(),
                tag.clone(),
            ]
        })
        .collect()
}

pub fn privacy_rows(out: &RunOutput) -> Vec<Vec<String>> {
    out.rounds
        .iter()
        .flat_map(|r| &r.clients)
        .map(|c| {
            vec![
                c.client_id.to_string(),
                c.round.to_string(),
                c.eps_round.to_string(),
                c.eps_total.to_string(),
                c.exhausted.to_string(),
            ]
        })
        .collect()
}

pub fn summarize(out: &RunOutput) -> RunSummary {
    RunSummary {
        rounds: out.rounds.len(),
        final_accuracy: out.final_accuracy(),
        bytes_total: out.rounds.iter().map(|r| r.bytes_total).sum(),
        max_eps_total: out.rounds.iter().flat_map(|r| &r.clients).map(|c| c.eps_total).fold(0.0, f64::max),
        ablations: out.config.ablation_tag(),
    }
}

/// Writes `rounds.csv`, `clients.csv`, `privacy.csv` and `run.json` into `dir`.
pub fn export_metrics(out: &RunOutput, dir: &Path) -> Result<(), MetricsError> {
    std::fs::create_dir_all(dir).map_err(|source| MetricsError::Io { path: dir.into(), source })?;
    write_rows(&dir.join("rounds.csv"), &ROUNDS_HEADER, rounds_rows(out))?;
    write_rows(&dir.join("clients.csv"), &CLIENTS_HEADER, clients_rows(out))?;
    write_rows(&dir.join("privacy.csv"), &PRIVACY_HEADER, privacy_rows(out))?;
    let path = dir.join("run.json");
    let file = RunFile { summary: summarize(out), output: out.clone() };
    let text = serde_json::to_string_pretty(&file).map_err(|source| MetricsError::Json { path: path.clone(), source })?;
    std::fs::write(&path, text).map_err(|source| MetricsError::Io { path, source })
}

pub fn read_run_file(dir: &Path) -> Result<RunFile, MetricsError> {
    let path = dir.join("run.json");
    let text = std::fs::read_to_string(&path).map_err(|source| MetricsError::Io { path: path.clone(), source })?;
    serde_json::from_str(&text).map_err(|source| MetricsError::Json { path, source })
}

type Table = Vec<BTreeMap<String, String>>;

fn read_table(path: &Path) -> Result<Table, MetricsError> {
    let err = |source| MetricsError::Csv { path: path.into(), source };
    let mut r = csv::Reader::from_path(path).map_err(err)?;
    let header = r.headers().map_err(err)?.clone();
    r.records()
        .map(|rec| {
            let rec = rec.map_err(err)?;
            Ok(header.iter().zip(rec.iter()).map(|(h, v)| (h.to_string(), v.to_string())).collect())
        })
        .collect()
}

fn col<'a>(row: &'a BTreeMap<String, String>, name: &str, path: &Path) -> Result<&'a str, MetricsError> {
    row.get(name)
        .map(String::as_str)
        .ok_or_else(|| MetricsError::MissingColumn { path: path.into(), column: name.into() })
}

fn num(s: &str) -> f64 {
    s.parse().unwrap_or(f64::NAN)
}

/// Text tables for a run directory: communication, server accuracy with
/// quality weights, and privacy spend by tier.
pub fn report(dir: &Path) -> Result<String, MetricsError> {
    let rounds_path = dir.join("rounds.csv");
    let clients_path = dir.join("clients.csv");
    let rounds = read_table(&rounds_path)?;
    let clients = read_table(&clients_path)?;
    let mut s = String::new();
    let mb = |b: f64| b / 1e6;

    writeln!(s, "Communication").unwrap();
    writeln!(s, "{:>5} {:>12} {:>12} {:>14}", "round", "total MB", "eval MB", "per client MB").unwrap();
    for r in &rounds {
        let p = &rounds_path;
        writeln!(
            s,
            "{:>5} {:>12.4} {:>12.4} {:>14.4}",
            col(r, "round", p)?,
            mb(num(col(r, "bytes_total", p)?)),
            mb(num(col(r, "bytes_eval", p)?)),
            mb(num(col(r, "bytes_per_client", p)?)),
        )
        .unwrap();
    }

    writeln!(s, "\nServer").unwrap();
    writeln!(s, "{:>5} {:>8} {:>9} {:>8} {:>8} {:>8}", "round", "status", "accuracy", "w_low", "w_mid", "w_high").unwrap();
    for r in &rounds {
        let p = &rounds_path;
        let acc = col(r, "accuracy", p)?;
        let acc = if acc.is_empty() { "-".to_string() } else { format!("{:.4}", num(acc)) };
        writeln!(
            s,
            "{:>5} {:>8} {:>9} {:>8.4} {:>8.4} {:>8.4}",
            col(r, "round", p)?,
            col(r, "status", p)?,
            acc,
            num(col(r, "w_low", p)?),
            num(col(r, "w_mid", p)?),
            num(col(r, "w_high", p)?),
        )
        .unwrap();
    }

    writeln!(s, "\nPrivacy").unwrap();
    writeln!(s, "{:>6} {:>8} {:>12} {:>10} {:>10}", "tier", "clients", "mean eps", "max eps", "exhausted").unwrap();
    let mut last: BTreeMap<String, (String, f64, bool)> = BTreeMap::new();
    for c in &clients {
        let p = &clients_path;
        last.insert(
            col(c, "client_id", p)?.to_string(),
            (col(c, "tier", p)?.to_string(), num(col(c, "eps_total", p)?), col(c, "exhausted", p)? == "true"),
        );
    }
    for tier in ["low", "medium", "high"] {
        let eps: Vec<&(String, f64, bool)> = last.values().filter(|v| v.0 == tier).collect();
        if eps.is_empty() {
            continue;
        }
        let mean = eps.iter().map(|v| v.1).sum::<f64>() / eps.len() as f64;
        let max = eps.iter().map(|v| v.1).fold(0.0, f64::max);
        let ex = eps.iter().filter(|v| v.2).count();
        writeln!(s, "{:>6} {:>8} {:>12.4} {:>10.4} {:>10}", tier, eps.len(), mean, max, ex).unwrap();
    }
    Ok(s)
}
