//! Per-update metrics rows and the CSV schema.
//!
//! The column order is fixed and consumed by the plot command and the
//! acceptance checks. Aggregates over the update's groups that are undefined
//! (e.g. effective weights when every group was degenerate) are written as
//! NaN, never as zeros.

use std::fmt::Write as _;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("metrics io: {0}")]
    Io(#[from] std::io::Error),
    #[error("metrics csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("metrics file {path} is missing column {column}")]
    MissingColumn { path: String, column: String },
    #[error("bad value in metrics file {path}, column {column}: {value}")]
    BadValue {
        path: String,
        column: String,
        value: String,
    },
}

/// CSV columns in emission order.
pub const COLUMNS: [&str; 21] = [
    "update",
    "episodes_seen",
    "goal_rate",
    "lava_rate_per_step",
    "battery_rate_per_step",
    "mean_episode_len",
    "lambda_r",
    "lambda_lava",
    "lambda_battery",
    "eff_w_r",
    "eff_w_lava",
    "eff_w_battery",
    "sigma_rs_mean",
    "policy_loss",
    "entropy",
    "j_hat_lava",
    "j_hat_battery",
    "z_lava",
    "z_battery",
    "d_lava",
    "d_battery",
];

/// One row of training metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub update: u64,
    pub episodes_seen: u64,
    pub goal_rate: f64,
    pub lava_rate_per_step: f64,
    pub battery_rate_per_step: f64,
    pub mean_episode_len: f64,
    pub lambda_r: f64,
    pub lambda_lava: f64,
    pub lambda_battery: f64,
    pub eff_w_r: f64,
    pub eff_w_lava: f64,
    pub eff_w_battery: f64,
    pub sigma_rs_mean: f64,
    pub policy_loss: f64,
    pub entropy: f64,
    pub j_hat_lava: f64,
    pub j_hat_battery: f64,
    pub z_lava: f64,
    pub z_battery: f64,
    pub d_lava: f64,
    pub d_battery: f64,
}

impl MetricsRow {
    pub fn floats(&self) -> [f64; 19] {
        [
            self.goal_rate,
            self.lava_rate_per_step,
            self.battery_rate_per_step,
            self.mean_episode_len,
            self.lambda_r,
            self.lambda_lava,
            self.lambda_battery,
            self.eff_w_r,
            self.eff_w_lava,
            self.eff_w_battery,
            self.sigma_rs_mean,
            self.policy_loss,
            self.entropy,
            self.j_hat_lava,
            self.j_hat_battery,
            self.z_lava,
            self.z_battery,
            self.d_lava,
            self.d_battery,
        ]
    }

    /// The row formatted exactly as it lands in the CSV.
    pub fn csv_line(&self) -> String {
        let mut line = format!("{},{}", self.update, self.episodes_seen);
        for v in self.floats() {
            let _ = write!(line, ",{v}");
        }
        line.push('\n');
        line
    }
}

/// Incremental CSV writer; flushes after every row so partial runs keep
/// their metrics.
pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self, MetricsError> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{}", COLUMNS.join(","))?;
        out.flush()?;
        Ok(Self { out })
    }

    /// Reopens an existing file for appending after `keep_updates` rows,
    /// discarding any rows past that point (crash recovery on resume).
    pub fn reopen(path: &Path, keep_updates: u64) -> Result<Self, MetricsError> {
        let rows = read_metrics(path)?;
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{}", COLUMNS.join(","))?;
        for row in rows.iter().filter(|r| r.update <= keep_updates) {
            out.write_all(row.csv_line().as_bytes())?;
        }
        out.flush()?;
        Ok(Self { out })
    }

    pub fn append(&mut self, row: &MetricsRow) -> Result<(), MetricsError> {
        self.out.write_all(row.csv_line().as_bytes())?;
        self.out.flush()?;
        Ok(())
    }
}

/// Appends a row to an existing metrics file without truncation.
pub fn append_row(path: &Path, row: &MetricsRow) -> Result<(), MetricsError> {
    let mut f = OpenOptions::new().append(true).open(path)?;
    f.write_all(row.csv_line().as_bytes())?;
    Ok(())
}

/// Reads a metrics CSV, validating that every schema column is present.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>, MetricsError> {
    let display = path.display().to_string();
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let mut index = Vec::with_capacity(COLUMNS.len());
    for col in COLUMNS {
        let pos = headers.iter().position(|h| h == col).ok_or_else(|| {
            MetricsError::MissingColumn {
                path: display.clone(),
                column: col.to_string(),
            }
        })?;
        index.push(pos);
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        let field = |i: usize| -> &str { record.get(index[i]).unwrap_or("") };
        let parse_f = |i: usize| -> Result<f64, MetricsError> {
            field(i).parse::<f64>().map_err(|_| MetricsError::BadValue {
                path: display.clone(),
                column: COLUMNS[i].to_string(),
                value: field(i).to_string(),
            })
        };
        let parse_u = |i: usize| -> Result<u64, MetricsError> {
            field(i).parse::<u64>().map_err(|_| MetricsError::BadValue {
                path: display.clone(),
                column: COLUMNS[i].to_string(),
                value: field(i).to_string(),
            })
        };
        rows.push(MetricsRow {
            update: parse_u(0)?,
            episodes_seen: parse_u(1)?,
            goal_rate: parse_f(2)?,
            lava_rate_per_step: parse_f(3)?,
            battery_rate_per_step: parse_f(4)?,
            mean_episode_len: parse_f(5)?,
            lambda_r: parse_f(6)?,
            lambda_lava: parse_f(7)?,
            lambda_battery: parse_f(8)?,
            eff_w_r: parse_f(9)?,
            eff_w_lava: parse_f(10)?,
            eff_w_battery: parse_f(11)?,
            sigma_rs_mean: parse_f(12)?,
            policy_loss: parse_f(13)?,
            entropy: parse_f(14)?,
            j_hat_lava: parse_f(15)?,
            j_hat_battery: parse_f(16)?,
            z_lava: parse_f(17)?,
            z_battery: parse_f(18)?,
            d_lava: parse_f(19)?,
            d_battery: parse_f(20)?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_row(update: u64) -> MetricsRow {
        MetricsRow {
            update,
            episodes_seen: update * 64,
            goal_rate: 0.5,
            lava_rate_per_step: 0.125,
            battery_rate_per_step: 0.0,
            mean_episode_len: 40.25,
            lambda_r: 1.0,
            lambda_lava: 0.01,
            lambda_battery: 0.0,
            eff_w_r: 0.9,
            eff_w_lava: 0.3,
            eff_w_battery: f64::NAN,
            sigma_rs_mean: 0.41,
            policy_loss: -0.001,
            entropy: 1.55,
            j_hat_lava: 0.125,
            j_hat_battery: 0.0,
            z_lava: 0.02,
            z_battery: f64::NAN,
            d_lava: 0.01,
            d_battery: f64::NAN,
        }
    }

    #[test]
    fn write_read_round_trip_including_nan() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        let mut w = MetricsWriter::create(&path).unwrap();
        w.append(&sample_row(1)).unwrap();
        w.append(&sample_row(2)).unwrap();
        drop(w);
        let rows = read_metrics(&path).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].update, 1);
        assert_eq!(rows[1].mean_episode_len, 40.25);
        assert!(rows[0].eff_w_battery.is_nan());
        assert!(rows[1].d_battery.is_nan());
    }

    #[test]
    fn reopen_discards_rows_past_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        let mut w = MetricsWriter::create(&path).unwrap();
        for u in 1..=5 {
            w.append(&sample_row(u)).unwrap();
        }
        drop(w);
        let w = MetricsWriter::reopen(&path, 3).unwrap();
        drop(w);
        let rows = read_metrics(&path).unwrap();
        assert_eq!(rows.iter().map(|r| r.update).collect::<Vec<_>>(), vec![1, 2, 3]);
    }

    #[test]
    fn missing_column_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("broken.csv");
        std::fs::write(&path, "update,episodes_seen\n1,64\n").unwrap();
        match read_metrics(&path) {
            Err(MetricsError::MissingColumn { column, .. }) => assert_eq!(column, "goal_rate"),
            other => panic!("expected missing column, got {other:?}"),
        }
    }
}
