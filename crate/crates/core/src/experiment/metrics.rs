//! Metrics stream, summary table and plot data.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde_json::Value;

use crate::error::{Error, Result};

/// Exponential moving average whose impulse response halves every `half_life` steps.
pub fn smooth(series: &[f64], half_life: f64) -> Result<Vec<f64>> {
    if half_life.is_nan() || half_life <= 0.0 {
        return Err(Error::usage("half-life must be positive"));
    }
    let alpha = 1.0 - 0.5f64.powf(1.0 / half_life);
    let mut out = Vec::with_capacity(series.len());
    let mut state = None;
    for &x in series {
        let s = match state {
            None => x,
            Some(prev) => prev + alpha * (x - prev),
        };
        state = Some(s);
        out.push(s);
    }
    Ok(out)
}

fn number(v: f64) -> String {
    serde_json::to_string(&v).unwrap_or_else(|_| "null".into())
}

/// One JSON line: `{"step":N,"name":value,...}`.
pub fn record_line(step: u64, metrics: &[(&str, f64)]) -> String {
    let mut line = format!("{{\"step\":{step}");
    for (k, v) in metrics {
        line.push_str(&format!(
            ",{}:{}",
            serde_json::Value::String(k.to_string()),
            number(*v)
        ));
    }
    line.push('}');
    line
}

/// Appends records to `metrics.jsonl`, flushing after each line.
pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    /// Starts a new stream whose first line is `{"header": header}`.
    pub fn create(path: &Path, header: &Value) -> Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut out, &serde_json::json!({ "header": header }))?;
        out.write_all(b"\n")?;
        out.flush()?;
        Ok(MetricsWriter { out })
    }

    /// Keeps the header and records up to `step`, then appends after them.
    pub fn resume(path: &Path, step: u64) -> Result<Self> {
        let lines: Vec<String> = BufReader::new(File::open(path)?)
            .lines()
            .collect::<std::io::Result<_>>()?;
        let mut kept = Vec::new();
        for (i, line) in lines.into_iter().enumerate() {
            let v: Value = serde_json::from_str(&line)?;
            let keep = i == 0
                || v.get("step")
                    .and_then(Value::as_u64)
                    .is_some_and(|s| s <= step);
            if keep {
                kept.push(line);
            }
        }
        let mut out = BufWriter::new(File::create(path)?);
        for line in kept {
            writeln!(out, "{line}")?;
        }
        out.flush()?;
        Ok(MetricsWriter { out })
    }

    pub fn record(&mut self, step: u64, metrics: &[(&str, f64)]) -> Result<()> {
        writeln!(self.out, "{}", record_line(step, metrics))?;
        self.out.flush()?;
        Ok(())
    }
}

/// Per-metric `(step, value)` series read back from a metrics stream.
pub type Series = BTreeMap<String, Vec<(u64, f64)>>;

pub fn read_metrics(path: &Path) -> Result<(Value, Series)> {
    let mut header = Value::Null;
    let mut series = Series::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let v: Value = serde_json::from_str(&line?)?;
        if i == 0 {
            header = v.get("header").cloned().unwrap_or(Value::Null);
            continue;
        }
        let Some(obj) = v.as_object() else { continue };
        let Some(step) = obj.get("step").and_then(Value::as_u64) else {
            continue;
        };
        for (k, x) in obj {
            if k == "step" {
                continue;
            }
            series
                .entry(k.clone())
                .or_default()
                .push((step, x.as_f64().unwrap_or(f64::NAN)));
        }
    }
    Ok((header, series))
}

fn csv_number(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        "nan".into()
    }
}

/// `step,metric,raw,smoothed` for every recorded value.
pub fn write_plotdata(path: &Path, series: &Series, half_life: f64) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "step,metric,raw,smoothed")?;
    for (name, points) in series {
        let raw: Vec<f64> = points.iter().map(|p| p.1).collect();
        let smoothed = smooth(&raw, half_life)?;
        for ((step, r), s) in points.iter().zip(smoothed) {
            writeln!(out, "{step},{name},{},{}", csv_number(*r), csv_number(s))?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Mean of the last tenth (at least one point) of a series.
pub fn tail_mean(points: &[f64]) -> f64 {
    let k = (points.len() / 10).max(1).min(points.len());
    let tail = &points[points.len() - k..];
    tail.iter().sum::<f64>() / tail.len() as f64
}

/// `metric,count,last,mean,min,max,tail_mean`.
pub fn write_summary(path: &Path, series: &Series) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "metric,count,last,mean,min,max,tail_mean")?;
    for (name, points) in series {
        let xs: Vec<f64> = points.iter().map(|p| p.1).collect();
        if xs.is_empty() {
            continue;
        }
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let min = xs.iter().copied().fold(f64::INFINITY, f64::min);
        let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        writeln!(
            out,
            "{name},{},{},{},{},{},{}",
            xs.len(),
            csv_number(*xs.last().expect("non-empty")),
            csv_number(mean),
            csv_number(min),
            csv_number(max),
            csv_number(tail_mean(&xs))
        )?;
    }
    out.flush()?;
    Ok(())
}
