//! Run artifacts on disk.
//!
//! A run directory holds:
//!
//! ```text
//! config.json              single-condition config document
//! replication_00000.jsonl  one event per line, in turn order
//! ...
//! summary.csv              condition,replication,metric,value
//! provenance.json          engine version and wall-clock timestamp
//! ```
//!
//! Everything except `provenance.json` is byte-identical across reruns of the
//! same config and seed.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::config::{self, ConfigDocument};
use crate::engine::{Event, MetricRow, Provenance, RunArtifact, Trajectory};
use crate::error::Error;
use crate::interventions::{LiftReport, SensitivityReport};

pub const CONFIG_FILE: &str = "config.json";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const PROVENANCE_FILE: &str = "provenance.json";
pub const SUMMARY_HEADER: [&str; 4] = ["condition", "replication", "metric", "value"];

pub fn replication_file(replication: u32) -> String {
    format!("replication_{replication:05}.jsonl")
}

fn create(path: &Path) -> Result<BufWriter<fs::File>, Error> {
    fs::File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other:?}", path.display())),
    }
}

pub fn write_events(path: &Path, events: &[Event]) -> Result<(), Error> {
    let mut w = create(path)?;
    for e in events {
        let line = serde_json::to_string(e).expect("event serializes");
        writeln!(w, "{line}").map_err(|err| Error::io(path, err))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_events(path: &Path) -> Result<Vec<Event>, Error> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut events = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        let ev = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
        events.push(ev);
    }
    Ok(events)
}

pub fn write_summary(path: &Path, rows: &[MetricRow]) -> Result<(), Error> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(SUMMARY_HEADER).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record([
            r.condition.clone(),
            r.replication.to_string(),
            r.metric.clone(),
            r.value.map(|v| v.to_string()).unwrap_or_default(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_summary(path: &Path) -> Result<Vec<MetricRow>, Error> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let bad = || Error::Format(format!("{}: malformed summary row {rec:?}", path.display()));
        if rec.len() != 4 {
            return Err(bad());
        }
        let value = match &rec[3] {
            "" => None,
            s => Some(s.parse().map_err(|_| bad())?),
        };
        rows.push(MetricRow {
            condition: rec[0].to_string(),
            replication: rec[1].parse().map_err(|_| bad())?,
            metric: rec[2].to_string(),
            value,
        });
    }
    Ok(rows)
}

/// Writes a run into `dir`, creating it if needed. Returns the written paths.
pub fn write_trajectories(run: &RunArtifact, dir: &Path) -> Result<Vec<PathBuf>, Error> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();

    let cfg_path = dir.join(CONFIG_FILE);
    fs::write(&cfg_path, ConfigDocument::from_config(&run.config).to_normalized_json())
        .map_err(|e| Error::io(&cfg_path, e))?;
    written.push(cfg_path);

    for t in &run.trajectories {
        let p = dir.join(replication_file(t.replication));
        write_events(&p, &t.events)?;
        written.push(p);
    }

    let summary = dir.join(SUMMARY_FILE);
    write_summary(&summary, &run.summary)?;
    written.push(summary);

    let prov = dir.join(PROVENANCE_FILE);
    let mut text = serde_json::to_string_pretty(&run.provenance).expect("provenance serializes");
    text.push('\n');
    fs::write(&prov, text).map_err(|e| Error::io(&prov, e))?;
    written.push(prov);
    Ok(written)
}

/// Loads a run written by [`write_trajectories`]. Ledgers are rebuilt from
/// the event logs.
pub fn read_run(dir: &Path) -> Result<RunArtifact, Error> {
    let cfg_path = dir.join(CONFIG_FILE);
    let text = fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
    let mut configs = config::parse_config(&text)?;
    if configs.len() != 1 {
        return Err(Error::Format(format!(
            "{}: expected a single-condition document",
            cfg_path.display()
        )));
    }
    let config = configs.remove(0);
    let mut trajectories = Vec::with_capacity(config.replications as usize);
    for r in 0..config.replications {
        let p = dir.join(replication_file(r));
        if !p.exists() {
            break;
        }
        let events = read_events(&p)?;
        let t = Trajectory::from_events(r, config.slate_size as usize, events)
            .map_err(|e| Error::Format(format!("{}: {e}", p.display())))?;
        trajectories.push(t);
    }
    let summary = read_summary(&dir.join(SUMMARY_FILE))?;
    let prov_path = dir.join(PROVENANCE_FILE);
    let provenance: Provenance = match fs::read_to_string(&prov_path) {
        Ok(s) => serde_json::from_str(&s).map_err(|e| Error::Format(format!("{}: {e}", prov_path.display())))?,
        Err(e) => return Err(Error::io(&prov_path, e)),
    };
    Ok(RunArtifact {
        config,
        trajectories,
        summary,
        provenance,
    })
}

fn csv_string(fill: impl FnOnce(&mut csv::Writer<Vec<u8>>) -> csv::Result<()>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    fill(&mut w).expect("in-memory csv");
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv")
}

pub fn lift_csv(reports: &[LiftReport]) -> String {
    csv_string(|w| reports.iter().try_for_each(|r| w.serialize(r)))
}

pub fn sensitivity_csv(report: &SensitivityReport) -> String {
    csv_string(|w| {
        w.write_record([
            "condition",
            "dimension",
            "detector",
            "base_effect",
            "perturbed_effect",
            "change",
            "base_detected",
            "perturbed_detected",
        ])?;
        for r in &report.rows {
            w.write_record([
                report.condition.clone(),
                r.dimension.to_string(),
                r.detector.clone(),
                r.base_effect.to_string(),
                r.perturbed_effect.to_string(),
                r.change.to_string(),
                r.base_detected.to_string(),
                r.perturbed_detected.to_string(),
            ])?;
        }
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::{PolicyParams, PolicySpec};
    use crate::engine::{run_experiment_with, Execution, ExperimentConfig};
    use crate::metrics::REGISTERED_METRICS;

    fn config(reps: u32) -> ExperimentConfig {
        ExperimentConfig::baseline(PolicySpec::gated(PolicyParams::gated(3, 1.0, 0.0)), reps, 5)
    }

    #[test]
    fn minimal_run_has_one_line() {
        let run = run_experiment_with(&config(1), Execution::Sequential).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_trajectories(&run, dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join(replication_file(0))).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert!(text.starts_with(r#"{"round":0,"turn_index":0,"agent_id":0,"permutation_digest":""#));
    }

    #[test]
    fn summary_row_count() {
        let run = run_experiment_with(&config(7), Execution::Sequential).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_trajectories(&run, dir.path()).unwrap();
        let rows = read_summary(&dir.path().join(SUMMARY_FILE)).unwrap();
        assert_eq!(rows.len(), 7 * REGISTERED_METRICS.len());
        let head = fs::read_to_string(dir.path().join(SUMMARY_FILE)).unwrap();
        assert!(head.starts_with("condition,replication,metric,value\n"));
    }

    #[test]
    fn round_trip() {
        let run = run_experiment_with(&config(3), Execution::Sequential).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_trajectories(&run, dir.path()).unwrap();
        let back = read_run(dir.path()).unwrap();
        assert_eq!(back.comparable_json(), run.comparable_json());
        assert_eq!(back.provenance, run.provenance);
    }

    #[test]
    fn missing_dir_reports_path() {
        let err = read_run(Path::new("/nonexistent/run")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/run/config.json"), "{err}");
    }
}
