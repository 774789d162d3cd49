//! Metrics persistence and the table view.
//!
//! `metrics.txt` is flat `key: value` text, written deterministically so a
//! re-run from the same checkpoint and seeds is byte-identical. The table
//! mirrors the evaluation layout: one row per observation set, columns for
//! reconstruction, prediction, planning loss, and success rate.

use std::path::Path;

use ddc_core::eval::{MeanStd, MetricsReport, SetMetrics};

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed metrics file: {0}")]
    Malformed(String),
}

fn fmt_f64(v: f64) -> String {
    // Round-trippable float text.
    format!("{:?}", v)
}

fn write_set(out: &mut String, prefix: &str, m: &SetMetrics) {
    let stat = |out: &mut String, name: &str, s: &MeanStd| {
        out.push_str(&format!("{}.{}.mean: {}\n", prefix, name, fmt_f64(s.mean)));
        out.push_str(&format!("{}.{}.std: {}\n", prefix, name, fmt_f64(s.std)));
        out.push_str(&format!("{}.{}.n: {}\n", prefix, name, s.n));
    };
    stat(out, "reconstruction", &m.reconstruction);
    stat(out, "prediction", &m.prediction);
    stat(out, "planning_loss", &m.planning_loss);
    out.push_str(&format!(
        "{}.success_rate: {}\n",
        prefix,
        fmt_f64(m.success_rate)
    ));
    out.push_str(&format!("{}.planning_runs: {}\n", prefix, m.planning_runs));
}

pub fn render_metrics(report: &MetricsReport) -> String {
    let mut out = String::new();
    out.push_str(&format!("eval_seed: {}\n", report.eval_seed));
    write_set(&mut out, "x", &report.x);
    write_set(&mut out, "y", &report.y);
    out
}

pub fn write_metrics(report: &MetricsReport, path: &Path) -> Result<(), ReportError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, render_metrics(report))?;
    Ok(())
}

struct Fields(Vec<(String, String)>);

impl Fields {
    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T, ReportError> {
        self.0
            .iter()
            .find(|(k, _)| k == key)
            .ok_or_else(|| ReportError::Malformed(format!("missing `{}`", key)))?
            .1
            .parse()
            .map_err(|_| ReportError::Malformed(format!("bad value for `{}`", key)))
    }

    fn mean_std(&self, prefix: &str) -> Result<MeanStd, ReportError> {
        Ok(MeanStd {
            mean: self.parse(&format!("{}.mean", prefix))?,
            std: self.parse(&format!("{}.std", prefix))?,
            n: self.parse(&format!("{}.n", prefix))?,
        })
    }

    fn set(&self, prefix: &str) -> Result<SetMetrics, ReportError> {
        Ok(SetMetrics {
            reconstruction: self.mean_std(&format!("{}.reconstruction", prefix))?,
            prediction: self.mean_std(&format!("{}.prediction", prefix))?,
            planning_loss: self.mean_std(&format!("{}.planning_loss", prefix))?,
            success_rate: self.parse(&format!("{}.success_rate", prefix))?,
            planning_runs: self.parse(&format!("{}.planning_runs", prefix))?,
        })
    }
}

pub fn parse_metrics(text: &str) -> Result<MetricsReport, ReportError> {
    let mut fields = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once(':')
            .ok_or_else(|| ReportError::Malformed(format!("bad line `{}`", line)))?;
        fields.push((k.trim().to_string(), v.trim().to_string()));
    }
    let fields = Fields(fields);
    Ok(MetricsReport {
        eval_seed: fields.parse("eval_seed")?,
        x: fields.set("x")?,
        y: fields.set("y")?,
    })
}

pub fn read_metrics(path: &Path) -> Result<MetricsReport, ReportError> {
    parse_metrics(&std::fs::read_to_string(path)?)
}

/// Two rows (observation sets) by four metric columns.
pub fn format_table(report: &MetricsReport) -> String {
    let row = |label: &str, m: &SetMetrics| {
        format!(
            "{:<20} {:>7.2} +- {:<5.2} {:>7.2} +- {:<5.2} {:>8.2} +- {:<5.2} {:>9.1} %",
            label,
            m.reconstruction.mean,
            m.reconstruction.std,
            m.prediction.mean,
            m.prediction.std,
            m.planning_loss.mean,
            m.planning_loss.std,
            m.success_rate * 100.0,
        )
    };
    format!(
        "{:<20} {:>15} {:>16} {:>17} {:>11}\n{}\n{}\n",
        "dataset",
        "reconstruction",
        "prediction",
        "planning loss",
        "success",
        row("with action (X)", &report.x),
        row("without action (Y)", &report.y),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> MetricsReport {
        let m = |mean: f64, std: f64| MeanStd { mean, std, n: 500 };
        MetricsReport {
            eval_seed: 99,
            x: SetMetrics {
                reconstruction: m(3.6, 1.7),
                prediction: m(6.2, 2.8),
                planning_loss: MeanStd {
                    mean: 21.4,
                    std: 2.9,
                    n: 20,
                },
                success_rate: 1.0,
                planning_runs: 20,
            },
            y: SetMetrics {
                reconstruction: m(3.9, 2.2),
                prediction: m(6.3, 3.0),
                planning_loss: MeanStd {
                    mean: 22.0,
                    std: 2.4,
                    n: 20,
                },
                success_rate: 1.0,
                planning_runs: 20,
            },
        }
    }

    #[test]
    fn metrics_round_trip_exactly() {
        let report = sample();
        let text = render_metrics(&report);
        let back = parse_metrics(&text).unwrap();
        assert_eq!(back, report);
        assert_eq!(render_metrics(&back), text);
    }

    #[test]
    fn table_has_two_data_rows_and_four_metric_columns() {
        let table = format_table(&sample());
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 3, "header plus two set rows");
        assert!(lines[1].starts_with("with action (X)"));
        assert!(lines[2].starts_with("without action (Y)"));
        for line in &lines[1..] {
            assert_eq!(line.matches("+-").count(), 3);
            assert!(line.ends_with('%'));
        }
    }
}
