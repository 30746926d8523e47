//! JHU CSSE ingestion, per-country series, scaling, windowing and splits.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use chrono::NaiveDate;
use log::warn;
use serde::{Deserialize, Serialize};

use crate::numerics::Tensor;
use crate::{Error, Result};

pub const FEATURE_NAMES: [&str; 3] = ["confirmed", "recovered", "deaths"];
pub const CONFIRMED: usize = 0;
pub const RECOVERED: usize = 1;
pub const DEATHS: usize = 2;

const JHU_HEADER: [&str; 4] = ["Province/State", "Country/Region", "Lat", "Long"];
const JHU_DATE_FORMAT: &str = "%m/%d/%y";

#[derive(Clone, Debug, PartialEq)]
pub struct JhuRow {
    pub province: Option<String>,
    pub country: String,
    pub values: Vec<f64>,
}

/// One JHU global time-series file.
#[derive(Clone, Debug, PartialEq)]
pub struct JhuTable {
    pub source: String,
    pub dates: Vec<NaiveDate>,
    pub rows: Vec<JhuRow>,
}

impl JhuTable {
    /// Sorted, deduplicated country names.
    pub fn countries(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.rows.iter().map(|r| r.country.as_str()).collect();
        set.into_iter().map(str::to_string).collect()
    }
}

fn ingest_err(source: &str, row: usize, column: Option<&str>, message: impl Into<String>) -> Error {
    Error::Ingest {
        file: source.to_string(),
        row,
        column: column.map(str::to_string),
        message: message.into(),
    }
}

/// Parses a JHU global time-series CSV. Rows are numbered from 1 (the
/// header); errors name the row and column.
pub fn parse_jhu_csv<R: Read>(reader: R, source: &str) -> Result<JhuTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);
    let mut records = rdr.records();
    let header = match records.next() {
        Some(h) => h?,
        None => return Err(ingest_err(source, 1, None, "missing header")),
    };
    for (i, expected) in JHU_HEADER.iter().enumerate() {
        match header.get(i) {
            Some(h) if h.trim() == *expected => {}
            got => {
                return Err(ingest_err(
                    source,
                    1,
                    Some(expected),
                    format!("expected header column {expected:?}, found {got:?}"),
                ))
            }
        }
    }
    let mut dates = Vec::with_capacity(header.len().saturating_sub(4));
    for raw in header.iter().skip(JHU_HEADER.len()) {
        let date = NaiveDate::parse_from_str(raw.trim(), JHU_DATE_FORMAT).map_err(|e| {
            ingest_err(source, 1, Some(raw), format!("unparseable date (expected M/D/YY): {e}"))
        })?;
        if let Some(prev) = dates.last() {
            if date <= *prev {
                return Err(ingest_err(source, 1, Some(raw), "dates are not increasing"));
            }
        }
        dates.push(date);
    }
    if dates.is_empty() {
        return Err(ingest_err(source, 1, None, "no date columns"));
    }

    let mut rows = Vec::new();
    for (i, record) in records.enumerate() {
        let line = i + 2;
        let record = record?;
        if record.len() != header.len() {
            return Err(ingest_err(
                source,
                line,
                None,
                format!("expected {} fields, found {}", header.len(), record.len()),
            ));
        }
        let province = record[0].trim();
        let country = record[1].trim();
        if country.is_empty() {
            return Err(ingest_err(source, line, Some(JHU_HEADER[1]), "empty country"));
        }
        let mut values = Vec::with_capacity(dates.len());
        for (j, cell) in record.iter().skip(JHU_HEADER.len()).enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| {
                ingest_err(
                    source,
                    line,
                    Some(&header[j + JHU_HEADER.len()]),
                    format!("non-numeric cell {cell:?}"),
                )
            })?;
            if !v.is_finite() {
                return Err(ingest_err(
                    source,
                    line,
                    Some(&header[j + JHU_HEADER.len()]),
                    format!("non-finite cell {cell:?}"),
                ));
            }
            values.push(v);
        }
        rows.push(JhuRow {
            province: (!province.is_empty()).then(|| province.to_string()),
            country: country.to_string(),
            values,
        });
    }
    Ok(JhuTable {
        source: source.to_string(),
        dates,
        rows,
    })
}

pub fn read_jhu_csv(path: &Path) -> Result<JhuTable> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_jhu_csv(file, &path.display().to_string())
}

/// A single cumulative feature for one country.
#[derive(Clone, Debug, PartialEq)]
pub struct CountrySeries {
    pub country: String,
    pub dates: Vec<NaiveDate>,
    pub values: Vec<f64>,
}

/// Sums all province rows of `country`.
pub fn aggregate_country(table: &JhuTable, country: &str) -> Result<CountrySeries> {
    let mut values = vec![0.0; table.dates.len()];
    let mut found = false;
    for row in table.rows.iter().filter(|r| r.country == country) {
        found = true;
        for (acc, v) in values.iter_mut().zip(&row.values) {
            *acc += v;
        }
    }
    if !found {
        return Err(Error::UnknownCountry {
            name: country.to_string(),
            available: table.countries(),
        });
    }
    Ok(CountrySeries {
        country: country.to_string(),
        dates: table.dates.clone(),
        values,
    })
}

/// Inclusive calendar window.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DateWindow {
    pub start: NaiveDate,
    pub end: NaiveDate,
}

impl Default for DateWindow {
    fn default() -> Self {
        DateWindow {
            start: NaiveDate::from_ymd_opt(2020, 2, 21).expect("valid date"),
            end: NaiveDate::from_ymd_opt(2020, 9, 12).expect("valid date"),
        }
    }
}

impl DateWindow {
    pub fn contains(&self, d: NaiveDate) -> bool {
        self.start <= d && d <= self.end
    }

    pub fn validate(&self) -> Result<()> {
        if self.start > self.end {
            return Err(Error::Config(format!(
                "date window starts after it ends: {} > {}",
                self.start, self.end
            )));
        }
        Ok(())
    }
}

impl CountrySeries {
    /// Keeps the dates inside `window`; warns if the window is not fully covered.
    pub fn restrict(&self, window: &DateWindow) -> Result<CountrySeries> {
        window.validate()?;
        let (dates, values): (Vec<_>, Vec<_>) = self
            .dates
            .iter()
            .zip(&self.values)
            .filter(|(d, _)| window.contains(**d))
            .map(|(d, v)| (*d, *v))
            .unzip();
        if dates.is_empty() {
            return Err(Error::InsufficientData {
                required: 1,
                available: 0,
            });
        }
        if dates[0] != window.start || dates[dates.len() - 1] != window.end {
            warn!(
                "{}: data covers {}..{} of requested window {}..{}",
                self.country,
                dates[0],
                dates[dates.len() - 1],
                window.start,
                window.end
            );
        }
        Ok(CountrySeries {
            country: self.country.clone(),
            dates,
            values,
        })
    }
}

/// Indices `i` where `values[i] < values[i - 1]`.
pub fn decreasing_indices(values: &[f64]) -> Vec<usize> {
    (1..values.len()).filter(|&i| values[i] < values[i - 1]).collect()
}

/// Per-country cumulative counts on a daily grid.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSeries {
    pub country: String,
    pub dates: Vec<NaiveDate>,
    pub confirmed: Vec<f64>,
    pub recovered: Vec<f64>,
    pub deaths: Vec<f64>,
}

impl RawSeries {
    pub fn new(
        country: impl Into<String>,
        dates: Vec<NaiveDate>,
        confirmed: Vec<f64>,
        recovered: Vec<f64>,
        deaths: Vec<f64>,
    ) -> Result<Self> {
        let s = RawSeries {
            country: country.into(),
            dates,
            confirmed,
            recovered,
            deaths,
        };
        s.validate()?;
        Ok(s)
    }

    fn validate(&self) -> Result<()> {
        let n = self.dates.len();
        if n == 0 {
            return Err(Error::InsufficientData {
                required: 1,
                available: 0,
            });
        }
        for (name, v) in FEATURE_NAMES.iter().zip(self.features()) {
            if v.len() != n {
                return Err(Error::Contract(format!(
                    "{}: {name} has {} values for {n} dates",
                    self.country,
                    v.len()
                )));
            }
            if let Some(i) = v.iter().position(|x| !x.is_finite() || *x < 0.0) {
                return Err(Error::Contract(format!(
                    "{}: {name} on {} is {}, counts must be nonnegative",
                    self.country, self.dates[i], v[i]
                )));
            }
        }
        for w in self.dates.windows(2) {
            if w[1] != w[0].succ_opt().expect("date in range") {
                return Err(Error::Contract(format!(
                    "{}: dates {} and {} are not consecutive days",
                    self.country, w[0], w[1]
                )));
            }
        }
        Ok(())
    }

    /// Builds the three-feature series for `country` inside `window`.
    /// A missing recovered table, country or date is zero-filled with a
    /// warning; confirmed and deaths must be present.
    pub fn assemble(
        confirmed: &JhuTable,
        recovered: Option<&JhuTable>,
        deaths: &JhuTable,
        country: &str,
        window: &DateWindow,
    ) -> Result<Self> {
        let c = aggregate_country(confirmed, country)?.restrict(window)?;
        let d = aggregate_country(deaths, country)?;
        let d_by_date: BTreeMap<_, _> = d.dates.iter().copied().zip(d.values).collect();
        let deaths = c
            .dates
            .iter()
            .map(|date| {
                d_by_date.get(date).copied().ok_or_else(|| {
                    ingest_err(&deaths.source, 1, Some(&date.to_string()), "date missing from deaths file")
                })
            })
            .collect::<Result<Vec<_>>>()?;

        let r_by_date: BTreeMap<NaiveDate, f64> = match recovered.map(|t| aggregate_country(t, country)) {
            Some(Ok(r)) => r.dates.into_iter().zip(r.values).collect(),
            Some(Err(Error::UnknownCountry { .. })) => {
                warn!("{country}: no recovered series; substituting zeros");
                BTreeMap::new()
            }
            Some(Err(e)) => return Err(e),
            None => {
                warn!("{country}: no recovered file; substituting zeros");
                BTreeMap::new()
            }
        };
        let missing = c.dates.iter().filter(|d| !r_by_date.contains_key(d)).count();
        if missing > 0 && !r_by_date.is_empty() {
            warn!("{country}: recovered missing on {missing} dates; substituting zeros");
        }
        let recovered: Vec<f64> = c
            .dates
            .iter()
            .map(|d| r_by_date.get(d).copied().unwrap_or(0.0))
            .collect();

        let series = RawSeries::new(country, c.dates, c.values, recovered, deaths)?;
        for (name, v) in FEATURE_NAMES.iter().zip(series.features()) {
            let dec = decreasing_indices(v);
            if !dec.is_empty() {
                warn!("{country}: {name} decreases at indices {dec:?} (upstream revisions)");
            }
        }
        Ok(series)
    }

    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    pub fn features(&self) -> [&[f64]; 3] {
        [&self.confirmed, &self.recovered, &self.deaths]
    }

    /// Row-major `[len × 3]` feature rows.
    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.len())
            .map(|i| vec![self.confirmed[i], self.recovered[i], self.deaths[i]])
            .collect()
    }

    /// Integer day offsets from the first date.
    pub fn time_indices(&self) -> Vec<f64> {
        let start = self.dates[0];
        self.dates
            .iter()
            .map(|d| (*d - start).num_days() as f64)
            .collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["date", "confirmed", "recovered", "deaths"])?;
        for i in 0..self.len() {
            w.write_record([
                self.dates[i].format("%Y-%m-%d").to_string(),
                self.confirmed[i].to_string(),
                self.recovered[i].to_string(),
                self.deaths[i].to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("series csv", e))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R, country: &str, source: &str) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(input);
        let header = rdr.headers()?.clone();
        if header.iter().collect::<Vec<_>>() != ["date", "confirmed", "recovered", "deaths"] {
            return Err(ingest_err(source, 1, None, "expected header date,confirmed,recovered,deaths"));
        }
        let mut cols: [Vec<f64>; 3] = Default::default();
        let mut dates = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let line = i + 2;
            let date = NaiveDate::parse_from_str(&rec[0], "%Y-%m-%d")
                .map_err(|e| ingest_err(source, line, Some("date"), e.to_string()))?;
            dates.push(date);
            for (k, col) in cols.iter_mut().enumerate() {
                let v = rec[k + 1]
                    .parse()
                    .map_err(|_| ingest_err(source, line, Some(FEATURE_NAMES[k]), "non-numeric cell"))?;
                col.push(v);
            }
        }
        let [confirmed, recovered, deaths] = cols;
        RawSeries::new(country, dates, confirmed, recovered, deaths)
    }
}

/// Population moments; kurtosis is excess (Fisher).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DescriptiveStats {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub skewness: f64,
    pub kurtosis: f64,
}

pub fn descriptive_stats(series: &[f64]) -> Result<DescriptiveStats> {
    if series.len() < 2 {
        return Err(Error::InsufficientData {
            required: 2,
            available: series.len(),
        });
    }
    let n = series.len() as f64;
    let mean = series.iter().sum::<f64>() / n;
    let moment = |k: i32| series.iter().map(|x| (x - mean).powi(k)).sum::<f64>() / n;
    let (m2, m3, m4) = (moment(2), moment(3), moment(4));
    if m2 == 0.0 {
        return Err(Error::UndefinedStatistic(
            "skewness and kurtosis of a constant series".into(),
        ));
    }
    Ok(DescriptiveStats {
        mean,
        std: m2.sqrt(),
        min: series.iter().copied().fold(f64::INFINITY, f64::min),
        max: series.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        skewness: m3 / m2.powf(1.5),
        kurtosis: m4 / (m2 * m2) - 3.0,
    })
}

/// Per-feature affine map of `[min, max]` onto `[-1, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalerParams {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl ScalerParams {
    /// Fits on `rows`; every feature must vary.
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let s = Self::fit_allowing_constant(rows)?;
        if let Some(f) = (0..s.min.len()).find(|&f| s.max[f] == s.min[f]) {
            return Err(Error::DegenerateFeature {
                feature: f,
                value: s.min[f],
            });
        }
        Ok(s)
    }

    /// Fits on `rows`; features in `strict` must vary, others may be
    /// constant and then scale to 0.
    pub fn fit_with_strict(rows: &[Vec<f64>], strict: &[usize]) -> Result<Self> {
        let s = Self::fit_allowing_constant(rows)?;
        for &f in strict {
            if f >= s.min.len() {
                return Err(Error::Config(format!("feature {f} out of range")));
            }
            if s.max[f] == s.min[f] {
                return Err(Error::DegenerateFeature {
                    feature: f,
                    value: s.min[f],
                });
            }
        }
        for f in 0..s.min.len() {
            if s.max[f] == s.min[f] && !strict.contains(&f) {
                warn!("feature {f} is constant ({}) on the fit rows; it scales to 0", s.min[f]);
            }
        }
        Ok(s)
    }

    fn fit_allowing_constant(rows: &[Vec<f64>]) -> Result<Self> {
        let first = rows.first().ok_or(Error::InsufficientData {
            required: 1,
            available: 0,
        })?;
        let width = first.len();
        let mut min = vec![f64::INFINITY; width];
        let mut max = vec![f64::NEG_INFINITY; width];
        for row in rows {
            if row.len() != width {
                return Err(Error::dim("scaler fit", &[width], &[row.len()]));
            }
            for (f, &v) in row.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::NonFinite("scaler input".into()));
                }
                min[f] = min[f].min(v);
                max[f] = max[f].max(v);
            }
        }
        Ok(ScalerParams { min, max })
    }

    pub fn width(&self) -> usize {
        self.min.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.min.len() != self.max.len() {
            return Err(Error::dim("scaler", &[self.min.len()], &[self.max.len()]));
        }
        if let Some(f) = (0..self.min.len()).find(|&f| !(self.max[f] >= self.min[f])) {
            return Err(Error::Contract(format!("scaler feature {f} has max < min")));
        }
        Ok(())
    }

    pub fn scale_value(&self, feature: usize, x: f64) -> f64 {
        let (lo, hi) = (self.min[feature], self.max[feature]);
        if hi == lo {
            return 0.0;
        }
        2.0 * (x - lo) / (hi - lo) - 1.0
    }

    pub fn inverse_value(&self, feature: usize, y: f64) -> f64 {
        let (lo, hi) = (self.min[feature], self.max[feature]);
        if hi == lo {
            return lo;
        }
        (y + 1.0) / 2.0 * (hi - lo) + lo
    }

    pub fn scale_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter().enumerate().map(|(f, &x)| self.scale_value(f, x)).collect()
    }

    pub fn inverse_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter().enumerate().map(|(f, &y)| self.inverse_value(f, y)).collect()
    }

    pub fn scale(&self, rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
        rows.iter().map(|r| self.scale_row(r)).collect()
    }

    pub fn inverse(&self, rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
        rows.iter().map(|r| self.inverse_row(r)).collect()
    }
}

/// Supervised one-step samples cut from a feature matrix.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WindowedDataset {
    /// Each `[lookback × features]`.
    pub inputs: Vec<Tensor>,
    pub targets: Vec<f64>,
    /// Day offsets of each input's rows.
    pub time_indices: Vec<Vec<f64>>,
    /// Series row of each target.
    pub target_rows: Vec<usize>,
}

impl WindowedDataset {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    fn slice(&self, range: std::ops::Range<usize>) -> Self {
        WindowedDataset {
            inputs: self.inputs[range.clone()].to_vec(),
            targets: self.targets[range.clone()].to_vec(),
            time_indices: self.time_indices[range.clone()].to_vec(),
            target_rows: self.target_rows[range].to_vec(),
        }
    }
}

/// Sample `i` covers rows `[i, i + lookback)`; its target is row
/// `i + lookback`, column `target_index`.
pub fn make_windows(
    rows: &[Vec<f64>],
    times: &[f64],
    lookback: usize,
    target_index: usize,
) -> Result<WindowedDataset> {
    if lookback == 0 {
        return Err(Error::Config("lookback must be positive".into()));
    }
    if rows.len() != times.len() {
        return Err(Error::dim("windowing", &[rows.len()], &[times.len()]));
    }
    if rows.len() <= lookback {
        return Err(Error::InsufficientData {
            required: lookback + 1,
            available: rows.len(),
        });
    }
    let width = rows[0].len();
    if target_index >= width {
        return Err(Error::Config(format!(
            "target index {target_index} out of range for {width} features"
        )));
    }
    let n = rows.len() - lookback;
    let mut ds = WindowedDataset::default();
    for i in 0..n {
        let block = &rows[i..i + lookback];
        ds.inputs.push(Tensor::matrix(block)?);
        ds.targets.push(rows[i + lookback][target_index]);
        ds.time_indices.push(times[i..i + lookback].to_vec());
        ds.target_rows.push(i + lookback);
    }
    Ok(ds)
}

/// Chronological train/validation/test fractions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train: 0.8,
            validation: 0.1,
            test: 0.1,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.validation, self.test];
        if parts.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Config(format!("split fractions must be nonnegative: {self:?}")));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions must sum to 1: {self:?}")));
        }
        Ok(())
    }

    /// Partition sizes for `n` samples; train and validation are rounded,
    /// test takes the remainder.
    pub fn sizes(&self, n: usize) -> Result<(usize, usize, usize)> {
        self.validate()?;
        let train = ((n as f64) * self.train).round() as usize;
        let validation = (((n as f64) * self.validation).round() as usize).min(n - train.min(n));
        let train = train.min(n);
        let test = n - train - validation;
        for (name, size) in [("train", train), ("validation", validation), ("test", test)] {
            if size == 0 {
                return Err(Error::Config(format!(
                    "{name} partition is empty for {n} samples with split {self:?}"
                )));
            }
        }
        Ok((train, validation, test))
    }
}

pub fn chronological_split(
    dataset: &WindowedDataset,
    spec: &SplitSpec,
) -> Result<(WindowedDataset, WindowedDataset, WindowedDataset)> {
    let (a, b, _) = spec.sizes(dataset.len())?;
    Ok((
        dataset.slice(0..a),
        dataset.slice(a..a + b),
        dataset.slice(a + b..dataset.len()),
    ))
}

/// Scaled, windowed and split series ready for training and evaluation.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub scaler: ScalerParams,
    /// Scaled `[len × features]` rows of the full series.
    pub scaled: Vec<Vec<f64>>,
    pub times: Vec<f64>,
    pub train: WindowedDataset,
    pub validation: WindowedDataset,
    pub test: WindowedDataset,
    /// Last series row used to fit the scaler (the last training target).
    pub fit_end: usize,
}

/// Windows the raw rows, splits chronologically, fits the scaler on the rows
/// covered by training samples only, then scales every partition.
pub fn prepare(
    rows: &[Vec<f64>],
    times: &[f64],
    lookback: usize,
    target_index: usize,
    split: &SplitSpec,
) -> Result<PreparedData> {
    let raw = make_windows(rows, times, lookback, target_index)?;
    let (train, _, test) = chronological_split(&raw, split)?;
    let fit_end = *train.target_rows.last().expect("train is non-empty");
    debug_assert!(fit_end < test.target_rows[0]);
    let scaler = ScalerParams::fit_with_strict(&rows[..=fit_end], &[target_index])?;
    let scaled = scaler.scale(rows);
    let all = make_windows(&scaled, times, lookback, target_index)?;
    let (train, validation, test) = chronological_split(&all, split)?;
    Ok(PreparedData {
        scaler,
        scaled,
        times: times.to_vec(),
        train,
        validation,
        test,
        fit_end,
    })
}
