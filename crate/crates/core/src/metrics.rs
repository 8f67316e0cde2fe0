//! Per-round metrics log and the summary used by `report`.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("metrics I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("metrics CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("metrics rounds not contiguous from 0: found round {found} at position {position}")]
    NonContiguous { position: usize, found: u64 },
}

pub type Result<T> = std::result::Result<T, MetricsError>;

pub const METRICS_HEADER: &str = "round,accuracy,loss,n_accepted,n_uploaded,n_dropped,n_carried,agg_ms,outcome";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: u64,
    pub accuracy: f64,
    pub loss: f64,
    pub n_accepted: usize,
    pub n_uploaded: usize,
    pub n_dropped: usize,
    pub n_carried: usize,
    pub agg_ms: f64,
    pub outcome: String,
}

/// Floats are printed with a fixed number of digits so that identical runs
/// give identical bytes regardless of formatting shortcuts.
pub fn write_metrics(mut w: impl Write, rows: &[RoundMetrics]) -> Result<()> {
    writeln!(w, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{:.6},{:.6},{},{},{},{},{:.3},{}",
            r.round, r.accuracy, r.loss, r.n_accepted, r.n_uploaded, r.n_dropped, r.n_carried, r.agg_ms, r.outcome
        )?;
    }
    Ok(())
}

pub fn metrics_to_string(rows: &[RoundMetrics]) -> String {
    let mut buf = Vec::new();
    write_metrics(&mut buf, rows).expect("writing to a Vec cannot fail");
    String::from_utf8(buf).expect("metrics are ASCII")
}

pub fn read_metrics(r: impl Read) -> Result<Vec<RoundMetrics>> {
    let mut rdr = csv::Reader::from_reader(r);
    let rows = rdr
        .deserialize()
        .collect::<std::result::Result<Vec<RoundMetrics>, _>>()?;
    for (i, row) in rows.iter().enumerate() {
        if row.round != i as u64 {
            return Err(MetricsError::NonContiguous {
                position: i,
                found: row.round,
            });
        }
    }
    Ok(rows)
}

pub fn read_metrics_file(path: &Path) -> Result<Vec<RoundMetrics>> {
    read_metrics(std::fs::File::open(path)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub rounds: usize,
    pub accepted_rounds: usize,
    pub aborted_rounds: usize,
    pub final_accuracy: Option<f64>,
    pub best_accuracy: Option<f64>,
    pub final_loss: Option<f64>,
    pub total_uploaded: usize,
    pub total_dropped: usize,
    pub total_carried: usize,
    pub mean_agg_ms: Option<f64>,
}

pub fn summarize(rows: &[RoundMetrics]) -> Summary {
    let accepted = rows.iter().filter(|r| r.outcome == "accepted").count();
    let mean_agg = (!rows.is_empty()).then(|| rows.iter().map(|r| r.agg_ms).sum::<f64>() / rows.len() as f64);
    Summary {
        rounds: rows.len(),
        accepted_rounds: accepted,
        aborted_rounds: rows.len() - accepted,
        final_accuracy: rows.last().map(|r| r.accuracy),
        best_accuracy: rows.iter().map(|r| r.accuracy).reduce(f64::max),
        final_loss: rows.last().map(|r| r.loss),
        total_uploaded: rows.iter().map(|r| r.n_uploaded).sum(),
        total_dropped: rows.iter().map(|r| r.n_dropped).sum(),
        total_carried: rows.iter().map(|r| r.n_carried).sum(),
        mean_agg_ms: mean_agg,
    }
}

pub const SUMMARY_HEADER: &str = "run,rounds,accepted_rounds,aborted_rounds,final_accuracy,best_accuracy,final_loss,total_uploaded,total_dropped,total_carried,mean_agg_ms";

fn opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(String::new, |x| format!("{x:.digits$}"))
}

pub fn summary_row(run: &str, s: &Summary) -> String {
    format!(
        "{run},{},{},{},{},{},{},{},{},{},{}",
        s.rounds,
        s.accepted_rounds,
        s.aborted_rounds,
        opt(s.final_accuracy, 6),
        opt(s.best_accuracy, 6),
        opt(s.final_loss, 6),
        s.total_uploaded,
        s.total_dropped,
        s.total_carried,
        opt(s.mean_agg_ms, 3)
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(round: u64, acc: f64, outcome: &str) -> RoundMetrics {
        RoundMetrics {
            round,
            accuracy: acc,
            loss: 1.0 - acc,
            n_accepted: 4,
            n_uploaded: 3,
            n_dropped: 1,
            n_carried: 0,
            agg_ms: 2150.0,
            outcome: outcome.into(),
        }
    }

    #[test]
    fn round_trip_and_summary() {
        let rows = vec![
            row(0, 0.25, "accepted"),
            row(1, 0.5, "aborted"),
            row(2, 0.4, "accepted"),
        ];
        let text = metrics_to_string(&rows);
        assert!(text.starts_with(METRICS_HEADER));
        let back = read_metrics(text.as_bytes()).unwrap();
        assert_eq!(back, rows);
        let s = summarize(&back);
        assert_eq!((s.accepted_rounds, s.aborted_rounds, s.total_uploaded), (2, 1, 9));
        assert_eq!(s.best_accuracy, Some(0.5));
        assert_eq!(s.final_accuracy, Some(0.4));
    }

    #[test]
    fn empty_log_is_header_only() {
        let text = metrics_to_string(&[]);
        assert_eq!(text, format!("{METRICS_HEADER}\n"));
        assert!(read_metrics(text.as_bytes()).unwrap().is_empty());
        assert_eq!(summarize(&[]).final_accuracy, None);
    }

    #[test]
    fn gaps_rejected() {
        let text = metrics_to_string(&[row(0, 0.1, "accepted"), row(2, 0.1, "accepted")]);
        assert!(matches!(
            read_metrics(text.as_bytes()),
            Err(MetricsError::NonContiguous { position: 1, found: 2 })
        ));
    }
}
