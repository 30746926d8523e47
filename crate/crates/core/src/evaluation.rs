//! RMSE/MAPE scoring, recursive horizon evaluation and report rendering.

use std::fmt::Write as _;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionResult;
use crate::data::{DateWindow, PreparedData, ScalerParams, SplitSpec, WindowedDataset};
use crate::exec::Execution;
use crate::model::{ForecastPath, Model};
use crate::numerics::Tensor;
use crate::{Error, Result};

fn check_pair(y: &[f64], y_hat: &[f64]) -> Result<()> {
    if y.len() != y_hat.len() {
        return Err(Error::dim("metric", &[y.len()], &[y_hat.len()]));
    }
    if y.is_empty() {
        return Err(Error::InsufficientData {
            required: 1,
            available: 0,
        });
    }
    Ok(())
}

pub fn rmse(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check_pair(y, y_hat)?;
    let sse: f64 = y.iter().zip(y_hat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((sse / y.len() as f64).sqrt())
}

/// Percent; a zero actual is an error naming its index.
pub fn mape(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check_pair(y, y_hat)?;
    if let Some(index) = y.iter().position(|v| *v == 0.0) {
        return Err(Error::UndefinedMetric { index });
    }
    let total: f64 = y.iter().zip(y_hat).map(|(a, b)| 100.0 * (a - b).abs() / a.abs()).sum();
    Ok(total / y.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rmse: f64,
    pub mape: f64,
}

impl Metrics {
    pub fn score(y: &[f64], y_hat: &[f64]) -> Result<Self> {
        Ok(Metrics {
            rmse: rmse(y, y_hat)?,
            mape: mape(y, y_hat)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HorizonSpec {
    pub horizons: Vec<usize>,
}

impl Default for HorizonSpec {
    fn default() -> Self {
        HorizonSpec {
            horizons: vec![2, 4, 6, 8, 10, 12, 14],
        }
    }
}

impl HorizonSpec {
    pub fn validate(&self) -> Result<()> {
        if self.horizons.is_empty() || self.horizons[0] == 0 {
            return Err(Error::Config("horizons must be positive and nonempty".into()));
        }
        if self.horizons.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(format!(
                "horizons must be strictly increasing: {:?}",
                self.horizons
            )));
        }
        Ok(())
    }

    pub fn max(&self) -> usize {
        self.horizons.last().copied().unwrap_or(0)
    }
}

/// Predictions and actuals in raw case counts.
#[derive(Clone, Debug, PartialEq)]
pub struct Scored {
    pub actual: Vec<f64>,
    pub predicted: Vec<f64>,
    pub metrics: Metrics,
}

/// One-step-ahead predictions over the whole test split.
pub fn evaluate_test(
    model: &Model,
    test: &WindowedDataset,
    scaler: &ScalerParams,
    exec: Execution,
) -> Result<Scored> {
    if test.is_empty() {
        return Err(Error::InsufficientData {
            required: 1,
            available: 0,
        });
    }
    let target = model.config.target_index;
    let preds = exec.map_range(test.len(), |i| {
        model
            .predict(&test.inputs[i], &test.time_indices[i])
            .map(|(y, _)| y)
    });
    let predicted = preds
        .into_iter()
        .map(|p| p.map(|y| scaler.inverse_value(target, y)))
        .collect::<Result<Vec<_>>>()?;
    let actual: Vec<f64> = test
        .targets
        .iter()
        .map(|&y| scaler.inverse_value(target, y))
        .collect();
    let metrics = Metrics::score(&actual, &predicted)?;
    Ok(Scored {
        actual,
        predicted,
        metrics,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct HorizonForecast {
    /// First forecast row of the series.
    pub first_row: usize,
    pub scored: Scored,
    pub attention: Vec<AttentionResult>,
}

/// Seeds a window ending at series row `boundary`, forecasts `horizon`
/// days recursively and scores against `actual[boundary + 1..]`. Only rows
/// up to `boundary` are read while forecasting.
pub fn forecast_from(
    model: &Model,
    scaled: &[Vec<f64>],
    times: &[f64],
    scaler: &ScalerParams,
    boundary: usize,
    horizon: usize,
) -> Result<(ForecastPath, Vec<f64>)> {
    let lookback = model.config.lookback;
    if boundary + 1 < lookback || boundary >= scaled.len() {
        return Err(Error::InsufficientData {
            required: lookback,
            available: (boundary + 1).min(scaled.len()),
        });
    }
    let start = boundary + 1 - lookback;
    let window = Tensor::matrix(&scaled[start..=boundary])?;
    let path = model.forecast_recursive(&window, &times[start..=boundary], horizon)?;
    let target = model.config.target_index;
    let raw = path
        .predictions
        .iter()
        .map(|&y| scaler.inverse_value(target, y))
        .collect();
    Ok((path, raw))
}

/// Out-of-sample forecast seeded at the end of train + validation.
pub fn evaluate_horizon(
    model: &Model,
    data: &PreparedData,
    actual: &[f64],
    horizon: usize,
) -> Result<HorizonForecast> {
    let boundary = *data
        .validation
        .target_rows
        .last()
        .ok_or(Error::InsufficientData {
            required: 1,
            available: 0,
        })?;
    if actual.len() != data.scaled.len() {
        return Err(Error::dim("horizon actuals", &[data.scaled.len()], &[actual.len()]));
    }
    if boundary + horizon >= actual.len() {
        return Err(Error::InsufficientData {
            required: boundary + 1 + horizon,
            available: actual.len(),
        });
    }
    let (path, predicted) =
        forecast_from(model, &data.scaled, &data.times, &data.scaler, boundary, horizon)?;
    let actual = actual[boundary + 1..=boundary + horizon].to_vec();
    let metrics = Metrics::score(&actual, &predicted)?;
    Ok(HorizonForecast {
        first_row: boundary + 1,
        scored: Scored {
            actual,
            predicted,
            metrics,
        },
        attention: path.attention_traces,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum RowOutcome {
    Scored { test: Metrics, horizons: Vec<Metrics> },
    Failed(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub country: String,
    pub model: String,
    pub outcome: RowOutcome,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub window: DateWindow,
    pub split: SplitSpec,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub metadata: ReportMetadata,
    pub horizons: Vec<usize>,
    pub rows: Vec<ReportRow>,
}

impl MetricsReport {
    pub fn find(&self, country: &str, model: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.country == country && r.model == model)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Markdown,
    Csv,
}

/// Published results for the four countries: `[Test, 2, 4, …, 14]` as
/// (RMSE, MAPE) pairs.
#[allow(clippy::approx_constant)]
pub const PUBLISHED: &[(&str, &str, [f64; 16])] = &[
    ("Italy", "ARIMA", [454.66, 2.23, 491.34, 2.52, 704.53, 4.77, 711.98, 5.25, 878.34, 6.02, 1154.66, 6.98, 1251.15, 7.53, 1498.57, 8.40]),
    ("Italy", "LSTM", [312.10, 2.01, 339.09, 2.38, 451.34, 4.06, 538.41, 4.22, 711.05, 6.09, 893.25, 7.22, 973.78, 6.75, 1174.56, 7.98]),
    ("Italy", "AttentionLSTM", [209.23, 1.71, 217.49, 1.86, 576.97, 4.21, 479.07, 4.12, 606.40, 5.96, 678.70, 6.02, 692.52, 6.18, 689.84, 7.07]),
    ("Spain", "ARIMA", [331.12, 2.56, 367.72, 2.98, 411.03, 3.07, 461.21, 3.23, 610.73, 4.51, 877.40, 5.13, 1156.90, 6.27, 1389.33, 7.94]),
    ("Spain", "LSTM", [290.23, 2.29, 378.11, 3.04, 381.44, 2.71, 417.61, 2.89, 514.57, 3.28, 601.15, 4.00, 718.09, 4.99, 1039.90, 7.03]),
    ("Spain", "AttentionLSTM", [281.03, 2.11, 299.42, 2.42, 293.61, 2.48, 321.26, 2.51, 471.89, 3.19, 493.11, 3.20, 617.16, 3.89, 919.27, 6.67]),
    ("Canada", "ARIMA", [18.67, 0.14, 19.41, 0.17, 22.41, 0.20, 26.32, 0.21, 30.12, 0.24, 34.87, 0.28, 39.91, 0.31, 47.66, 0.45]),
    ("Canada", "LSTM", [13.82, 0.12, 15.76, 0.14, 19.97, 0.16, 22.55, 0.20, 26.33, 0.22, 32.14, 0.25, 37.04, 0.29, 46.03, 0.43]),
    ("Canada", "AttentionLSTM", [12.46, 0.11, 12.67, 0.13, 16.04, 0.14, 18.09, 0.16, 21.96, 0.19, 24.37, 0.21, 26.20, 0.22, 36.20, 0.28]),
    ("France", "ARIMA", [189.00, 1.67, 173.20, 1.40, 217.44, 1.77, 322.71, 1.98, 349.10, 2.57, 511.76, 3.81, 793.20, 5.97, 991.01, 6.30]),
    ("France", "LSTM", [201.49, 1.73, 213.77, 1.74, 397.01, 4.26, 217.79, 1.82, 309.14, 2.17, 499.71, 3.59, 702.83, 5.56, 892.74, 6.03]),
    ("France", "AttentionLSTM", [163.78, 1.21, 167.36, 1.34, 496.55, 4.61, 174.70, 1.40, 226.64, 1.74, 433.40, 3.14, 671.82, 5.16, 711.69, 5.75]),
];

fn metric_headers(horizons: &[usize]) -> Vec<String> {
    let mut h = vec!["test_rmse".to_string(), "test_mape".to_string()];
    for k in horizons {
        h.push(format!("h{k}_rmse"));
        h.push(format!("h{k}_mape"));
    }
    h
}

pub fn render_report(report: &MetricsReport, format: ReportFormat) -> Result<String> {
    if report.rows.is_empty() {
        return Err(Error::Contract("report has no rows".into()));
    }
    match format {
        ReportFormat::Markdown => Ok(render_markdown(report)),
        ReportFormat::Csv => render_csv(report),
    }
}

fn render_markdown(report: &MetricsReport) -> String {
    let m = &report.metadata;
    let mut s = String::new();
    let _ = writeln!(s, "# Forecast accuracy\n");
    let _ = writeln!(
        s,
        "Window {}..{}, split {}/{}/{}, seed {}. RMSE in cases, MAPE in percent.\n",
        m.window.start, m.window.end, m.split.train, m.split.validation, m.split.test, m.seed
    );
    let steps: Vec<String> = report.horizons.iter().map(|h| h.to_string()).collect();
    let mut header = vec!["Dataset".to_string(), "Model".to_string(), "Test".to_string()];
    header.extend(steps.iter().cloned());
    let _ = writeln!(s, "| {} |", header.join(" | "));
    let _ = writeln!(s, "|{}", "---|".repeat(header.len()));
    for row in &report.rows {
        let cells = match &row.outcome {
            RowOutcome::Scored { test, horizons } => std::iter::once(test)
                .chain(horizons)
                .map(|m| format!("{:.2} / {:.2}%", m.rmse, m.mape))
                .collect::<Vec<_>>(),
            RowOutcome::Failed(msg) => {
                let mut v = vec![format!("failed: {}", msg.replace('|', "/"))];
                v.resize(report.horizons.len() + 1, String::new());
                v
            }
        };
        let _ = writeln!(s, "| {} | {} | {} |", row.country, row.model, cells.join(" | "));
    }

    let countries: Vec<&str> = {
        let mut seen = Vec::new();
        for r in &report.rows {
            if !seen.contains(&r.country.as_str()) {
                seen.push(r.country.as_str());
            }
        }
        seen
    };
    let published: Vec<_> = PUBLISHED.iter().filter(|(c, _, _)| countries.contains(c)).collect();
    if !published.is_empty() {
        let _ = writeln!(s, "\n## Published reference values\n");
        let mut header = vec!["Dataset".to_string(), "Model".to_string(), "Test".to_string()];
        header.extend(["2", "4", "6", "8", "10", "12", "14"].iter().map(|x| x.to_string()));
        let _ = writeln!(s, "| {} |", header.join(" | "));
        let _ = writeln!(s, "|{}", "---|".repeat(header.len()));
        for (country, model, values) in published {
            let cells: Vec<String> = values
                .chunks(2)
                .map(|p| format!("{:.2} / {:.2}%", p[0], p[1]))
                .collect();
            let _ = writeln!(s, "| {country} | {model} | {} |", cells.join(" | "));
        }
    }
    s
}

fn render_csv(report: &MetricsReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["country".to_string(), "model".to_string()];
    header.extend(metric_headers(&report.horizons));
    header.push("error".to_string());
    w.write_record(&header)?;
    for row in &report.rows {
        let mut rec = vec![row.country.clone(), row.model.clone()];
        match &row.outcome {
            RowOutcome::Scored { test, horizons } => {
                for m in std::iter::once(test).chain(horizons) {
                    rec.push(m.rmse.to_string());
                    rec.push(m.mape.to_string());
                }
                rec.push(String::new());
            }
            RowOutcome::Failed(msg) => {
                rec.extend(std::iter::repeat_n(String::new(), 2 * (report.horizons.len() + 1)));
                rec.push(msg.clone());
            }
        }
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Contract(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Parses the CSV rendering back into `(country, model, metrics)` rows;
/// failed rows come back with an empty metric list.
pub fn parse_report_csv(text: &str) -> Result<Vec<(String, String, Vec<Metrics>)>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let n = rec.len();
        let mut metrics = Vec::new();
        let cells: Vec<&str> = rec.iter().skip(2).take(n - 3).collect();
        if cells.iter().all(|c| !c.is_empty()) {
            for pair in cells.chunks(2) {
                let parse = |s: &str| {
                    s.parse::<f64>()
                        .map_err(|_| Error::Contract(format!("bad metric cell {s:?}")))
                };
                metrics.push(Metrics {
                    rmse: parse(pair[0])?,
                    mape: parse(pair[1])?,
                });
            }
        }
        out.push((rec[0].to_string(), rec[1].to_string(), metrics));
    }
    Ok(out)
}

/// `date,actual,predicted`, full float precision.
pub fn emit_plot_series(dates: &[NaiveDate], actual: &[f64], predicted: &[f64]) -> Result<String> {
    if dates.len() != actual.len() || actual.len() != predicted.len() {
        return Err(Error::Contract(format!(
            "plot series misaligned: {} dates, {} actuals, {} predictions",
            dates.len(),
            actual.len(),
            predicted.len()
        )));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["date", "actual", "predicted"])?;
    for i in 0..dates.len() {
        w.write_record([
            dates[i].format("%Y-%m-%d").to_string(),
            actual[i].to_string(),
            predicted[i].to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Contract(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Long-format attention weights: `step,time,dimension,weight`, one row per
/// forecast step × lookback position × scored dimension.
pub fn attention_trace_csv(traces: &[AttentionResult]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["step", "time", "dimension", "weight"])?;
    for (step, trace) in traces.iter().enumerate() {
        let (rows, cols) = (trace.weights.rows(), trace.weights.cols());
        for t in 0..rows {
            for j in 0..cols {
                w.write_record([
                    (step + 1).to_string(),
                    t.to_string(),
                    j.to_string(),
                    trace.weights.get2(t, j).to_string(),
                ])?;
            }
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Contract(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
