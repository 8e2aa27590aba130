//! Per-round metrics files (CSV).
//!
//! Columns: `run_id, round, defense, attack, malicious_fraction, loss,
//! accuracy, selected_count, excluded_ids, sv_0 .. sv_{N-1}, wall_time_s`.
//! `excluded_ids` is `;`-joined. SV cells are empty outside FedSV rounds that
//! recomputed values; `wall_time_s` is empty unless wall time is recorded.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::orchestrator::{RoundRecord, RunConfig, RunSummary};

/// Run-level columns repeated on every row.
#[derive(Debug, Clone, PartialEq)]
pub struct RunMeta {
    pub run_id: String,
    pub defense: String,
    pub attack: String,
    pub malicious_fraction: f64,
    pub clients: usize,
}

impl RunMeta {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            run_id: cfg.run_id(),
            defense: cfg.defense.label().to_string(),
            attack: cfg.attack.kind.name().to_string(),
            malicious_fraction: cfg.malicious_fraction(),
            clients: cfg.clients,
        }
    }

    pub fn from_summary(s: &RunSummary) -> Self {
        Self {
            run_id: s.run_id.clone(),
            defense: s.defense.clone(),
            attack: s.attack.clone(),
            malicious_fraction: s.malicious_fraction(),
            clients: s.clients,
        }
    }
}

pub fn header(clients: usize) -> Vec<String> {
    let mut h: Vec<String> = [
        "run_id",
        "round",
        "defense",
        "attack",
        "malicious_fraction",
        "loss",
        "accuracy",
        "selected_count",
        "excluded_ids",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    h.extend((0..clients).map(|i| format!("sv_{i}")));
    h.push("wall_time_s".into());
    h
}

/// Streams rows, flushing after each so an interrupted run leaves a valid
/// prefix.
pub struct MetricsWriter<W: Write> {
    inner: csv::Writer<W>,
    meta: RunMeta,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(sink: W, meta: RunMeta) -> Result<Self> {
        let mut inner = csv::Writer::from_writer(sink);
        inner.write_record(header(meta.clients))?;
        inner.flush()?;
        Ok(Self { inner, meta })
    }

    pub fn write(&mut self, record: &RoundRecord) -> Result<()> {
        let m = &self.meta;
        let excluded: Vec<String> = record.excluded(m.clients).iter().map(usize::to_string).collect();
        let mut row = vec![
            m.run_id.clone(),
            record.round.to_string(),
            m.defense.clone(),
            m.attack.clone(),
            m.malicious_fraction.to_string(),
            record.loss.to_string(),
            record.accuracy.to_string(),
            record.selected.len().to_string(),
            excluded.join(";"),
        ];
        match &record.sv {
            Some(sv) => row.extend(sv.iter().map(f64::to_string)),
            None => row.extend(std::iter::repeat_n(String::new(), m.clients)),
        }
        row.push(record.wall_time.map(|t| t.to_string()).unwrap_or_default());
        self.inner.write_record(&row)?;
        self.inner.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> Result<W> {
        self.inner
            .into_inner()
            .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
    }
}

/// Writes a finished run's records.
pub fn write_summary<W: Write>(sink: W, summary: &RunSummary) -> Result<W> {
    let mut w = MetricsWriter::new(sink, RunMeta::from_summary(summary))?;
    for r in &summary.records {
        w.write(r)?;
    }
    w.into_inner()
}

/// One parsed metrics row.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub run_id: String,
    pub round: usize,
    pub defense: String,
    pub attack: String,
    pub malicious_fraction: f64,
    pub loss: f64,
    pub accuracy: f64,
    pub selected_count: usize,
    pub excluded: Vec<usize>,
    pub sv: Option<Vec<f64>>,
    pub wall_time: Option<f64>,
}

/// Rows of a metrics file plus descriptions of rows that were skipped.
#[derive(Debug, Clone, Default)]
pub struct MetricsTable {
    pub clients: usize,
    pub rows: Vec<MetricsRow>,
    pub skipped: Vec<String>,
}

fn parse_row(rec: &csv::StringRecord, clients: usize) -> std::result::Result<MetricsRow, String> {
    let expected = 10 + clients;
    if rec.len() != expected {
        return Err(format!("{} fields, expected {expected}", rec.len()));
    }
    fn num<T: std::str::FromStr>(s: &str, what: &str) -> std::result::Result<T, String> {
        s.parse().map_err(|_| format!("bad {what} `{s}`"))
    }
    let excluded = if rec[8].is_empty() {
        Vec::new()
    } else {
        rec[8]
            .split(';')
            .map(|s| num(s, "excluded id"))
            .collect::<std::result::Result<_, _>>()?
    };
    let sv_cells: Vec<&str> = (0..clients).map(|i| &rec[9 + i]).collect();
    let sv = if sv_cells.iter().all(|c| c.is_empty()) {
        None
    } else {
        Some(
            sv_cells
                .iter()
                .map(|c| num(c, "sv"))
                .collect::<std::result::Result<_, _>>()?,
        )
    };
    let wall = &rec[9 + clients];
    let row = MetricsRow {
        run_id: rec[0].to_string(),
        round: num(&rec[1], "round")?,
        defense: rec[2].to_string(),
        attack: rec[3].to_string(),
        malicious_fraction: num(&rec[4], "malicious_fraction")?,
        loss: num(&rec[5], "loss")?,
        accuracy: num(&rec[6], "accuracy")?,
        selected_count: num(&rec[7], "selected_count")?,
        excluded,
        sv,
        wall_time: if wall.is_empty() {
            None
        } else {
            Some(num(wall, "wall_time_s")?)
        },
    };
    if !(0.0..=1.0).contains(&row.accuracy) {
        return Err(format!("accuracy {} outside [0, 1]", row.accuracy));
    }
    Ok(row)
}

/// Reads a metrics file. Malformed rows are skipped and described in
/// `skipped`; a malformed header is an error.
pub fn read_metrics<R: Read>(source: R) -> Result<MetricsTable> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(source);
    let head = reader.headers()?.clone();
    let n = head.len();
    let clients = n
        .checked_sub(10)
        .ok_or_else(|| Error::Consistency("metrics header too short".into()))?;
    let expected = header(clients);
    if head.iter().ne(expected.iter().map(String::as_str)) {
        return Err(Error::Consistency("not a metrics file header".into()));
    }
    let mut table = MetricsTable {
        clients,
        ..MetricsTable::default()
    };
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        match rec.map_err(|e| e.to_string()).and_then(|r| parse_row(&r, clients)) {
            Ok(row) => table.rows.push(row),
            Err(e) => table.skipped.push(format!("line {line}: {e}")),
        }
    }
    Ok(table)
}
