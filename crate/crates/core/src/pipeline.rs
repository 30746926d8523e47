//! Config-driven runs: ingest, statistics, training, evaluation and
//! forecasting for a list of countries, with country-scoped outputs.

use std::fs;
use std::path::{Path, PathBuf};

use chrono::Duration;
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::data::{
    descriptive_stats, prepare, read_jhu_csv, DateWindow, DescriptiveStats, JhuTable, PreparedData,
    RawSeries, SplitSpec, FEATURE_NAMES,
};
use crate::evaluation::{
    attention_trace_csv, emit_plot_series, evaluate_horizon, evaluate_test, forecast_from,
    render_report, HorizonSpec, Metrics, MetricsReport, ReportFormat, ReportMetadata, ReportRow,
    RowOutcome,
};
use crate::exec::Execution;
use crate::model::{Model, ModelConfig, ModelKind};
use crate::training::{
    history_csv, load_checkpoint, save_checkpoint, train_with, CheckpointMetadata, Control,
    TrainConfig, TrainOutcome,
};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    /// Root for relative file names; falls back to the caller's default.
    #[serde(default)]
    pub dir: Option<PathBuf>,
    pub confirmed: PathBuf,
    /// Absent means no recovered series; it is zero-filled.
    #[serde(default)]
    pub recovered: Option<PathBuf>,
    pub deaths: PathBuf,
}

impl Default for DataPaths {
    fn default() -> Self {
        DataPaths {
            dir: None,
            confirmed: "time_series_covid19_confirmed_global.csv".into(),
            recovered: Some("time_series_covid19_recovered_global.csv".into()),
            deaths: "time_series_covid19_deaths_global.csv".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataPaths,
    pub countries: Vec<String>,
    pub window: DateWindow,
    pub split: SplitSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub horizons: HorizonSpec,
    pub output_dir: PathBuf,
    /// Write per-horizon attention weights during evaluation.
    pub attention_traces: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataPaths::default(),
            countries: ["Italy", "Spain", "Canada", "France"].map(String::from).to_vec(),
            window: DateWindow::default(),
            split: SplitSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            horizons: HorizonSpec::default(),
            output_dir: "out".into(),
            attention_traces: true,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.countries.is_empty() {
            return Err(Error::Config("no countries configured".into()));
        }
        self.window.validate()?;
        self.split.validate()?;
        self.model.validate()?;
        if self.model.feature_count != FEATURE_NAMES.len() {
            return Err(Error::Config(format!(
                "the series has {} features, model expects {}",
                FEATURE_NAMES.len(),
                self.model.feature_count
            )));
        }
        if self.model.kind != ModelKind::AttentionLstm {
            return Err(Error::Config(
                "model.kind selects the proposed model; the LSTM and persistence baselines are always run".into(),
            ));
        }
        self.train.validate()?;
        self.horizons.validate()?;
        Ok(())
    }

    /// Resolves a data file against `data.dir`, else `default_root`.
    pub fn data_file(&self, file: &Path, default_root: Option<&Path>) -> PathBuf {
        if file.is_absolute() {
            return file.to_path_buf();
        }
        match (&self.data.dir, default_root) {
            (Some(dir), _) => dir.join(file),
            (None, Some(root)) => root.join(file),
            (None, None) => file.to_path_buf(),
        }
    }

    pub fn country_dir(&self, country: &str) -> PathBuf {
        self.output_dir.join(country_slug(country))
    }
}

/// Directory-safe country name.
pub fn country_slug(country: &str) -> String {
    let s: String = country
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect();
    s.trim_matches('_').to_string()
}

pub fn checkpoint_name(kind: ModelKind) -> &'static str {
    match kind {
        ModelKind::AttentionLstm => "checkpoint.json",
        ModelKind::PlainLstm => "checkpoint_plain_lstm.json",
        ModelKind::Persistence => "checkpoint_persistence.json",
    }
}

pub fn losses_name(kind: ModelKind) -> &'static str {
    match kind {
        ModelKind::AttentionLstm => "losses.csv",
        ModelKind::PlainLstm => "losses_plain_lstm.csv",
        ModelKind::Persistence => "losses_persistence.csv",
    }
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Result of one country's work item.
#[derive(Debug)]
pub struct CountryOutcome<T> {
    pub country: String,
    pub result: Result<T>,
}

pub struct Tables {
    pub confirmed: JhuTable,
    pub recovered: Option<JhuTable>,
    pub deaths: JhuTable,
}

pub fn load_tables(cfg: &RunConfig, default_root: Option<&Path>) -> Result<Tables> {
    let path = |p: &Path| cfg.data_file(p, default_root);
    Ok(Tables {
        confirmed: read_jhu_csv(&path(&cfg.data.confirmed))?,
        recovered: cfg
            .data
            .recovered
            .as_ref()
            .map(|p| read_jhu_csv(&path(p)))
            .transpose()?,
        deaths: read_jhu_csv(&path(&cfg.data.deaths))?,
    })
}

fn stats_row(name: &str, s: &Result<DescriptiveStats>) -> Vec<String> {
    let mut row = vec![name.to_string()];
    match s {
        Ok(s) => {
            for v in [s.mean, s.std, s.min, s.max, s.skewness, s.kurtosis] {
                row.push(v.to_string());
            }
        }
        Err(_) => row.extend(std::iter::repeat_n(String::new(), 6)),
    }
    row
}

const STATS_HEADER: [&str; 6] = ["mean", "std", "min", "max", "skewness", "kurtosis"];

fn stats_csv(first: &str, rows: &[(String, Result<DescriptiveStats>)]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec![first];
    header.extend(STATS_HEADER);
    w.write_record(&header)?;
    for (name, s) in rows {
        w.write_record(stats_row(name, s))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Contract(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Table-2-shaped statistics of the confirmed series, one row per country.
pub fn stats_table(series: &[RawSeries]) -> Result<String> {
    let rows: Vec<_> = series
        .iter()
        .map(|s| (s.country.clone(), descriptive_stats(&s.confirmed)))
        .collect();
    stats_csv("country", &rows)
}

pub fn stats_markdown(series: &[RawSeries]) -> String {
    let mut s = String::from("| Country | Mean | Standard deviation | Minimum | Maximum | Skewness | Kurtosis |\n|---|---|---|---|---|---|---|\n");
    for r in series {
        match descriptive_stats(&r.confirmed) {
            Ok(d) => s.push_str(&format!(
                "| {} | {:.2} | {:.2} | {:.1} | {:.1} | {:.2} | {:.2} |\n",
                r.country, d.mean, d.std, d.min, d.max, d.skewness, d.kurtosis
            )),
            Err(e) => s.push_str(&format!("| {} | {e} | | | | | |\n", r.country)),
        }
    }
    s
}

/// Builds each country's series, writing `series.csv` and a per-feature
/// `stats.csv` under its directory.
pub fn ingest(cfg: &RunConfig, tables: &Tables, exec: Execution) -> Vec<CountryOutcome<RawSeries>> {
    exec.map_slice(&cfg.countries, |country| {
        let result = (|| {
            let s = RawSeries::assemble(
                &tables.confirmed,
                tables.recovered.as_ref(),
                &tables.deaths,
                country,
                &cfg.window,
            )?;
            let dir = cfg.country_dir(country);
            let mut buf = Vec::new();
            s.write_csv(&mut buf)?;
            write(&dir.join("series.csv"), &String::from_utf8(buf).expect("utf-8"))?;
            let rows: Vec<_> = FEATURE_NAMES
                .iter()
                .zip(s.features())
                .map(|(n, v)| (n.to_string(), descriptive_stats(v)))
                .collect();
            write(&dir.join("stats.csv"), &stats_csv("feature", &rows)?)?;
            info!("{country}: {} days ingested", s.len());
            Ok(s)
        })();
        CountryOutcome {
            country: country.clone(),
            result,
        }
    })
}

pub fn write_stats_table(cfg: &RunConfig, series: &[RawSeries]) -> Result<()> {
    write(&cfg.output_dir.join("stats.csv"), &stats_table(series)?)?;
    write(&cfg.output_dir.join("stats.md"), &stats_markdown(series))
}

/// Reads a country's ingested `series.csv`.
pub fn load_series(cfg: &RunConfig, country: &str) -> Result<RawSeries> {
    let path = cfg.country_dir(country).join("series.csv");
    let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    RawSeries::read_csv(file, country, &path.display().to_string())
}

pub fn prepare_series(cfg: &RunConfig, series: &RawSeries) -> Result<PreparedData> {
    prepare(
        &series.rows(),
        &series.time_indices(),
        cfg.model.lookback,
        cfg.model.target_index,
        &cfg.split,
    )
}

#[derive(Debug)]
pub struct TrainedCountry {
    pub attention: TrainOutcome,
    pub plain: TrainOutcome,
}

fn train_kind(
    cfg: &RunConfig,
    country: &str,
    data: &PreparedData,
    kind: ModelKind,
    seed: u64,
) -> Result<TrainOutcome> {
    let model = Model::new(cfg.model.clone().with_kind(kind), seed)?;
    let tc = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    // Per-sample updates are sequential; the validation pass is cheap, so
    // the country-level fan-out carries the parallelism.
    let out = train_with(&model, &data.train, &data.validation, &tc, Execution::Sequential, |_| {
        Control::Continue
    })?;
    let dir = cfg.country_dir(country);
    save_checkpoint(
        &out.model,
        CheckpointMetadata {
            epoch: out.best_epoch,
            validation_loss: Some(out.best_validation_loss),
            seed,
            country: Some(country.to_string()),
            scaler: Some(data.scaler.clone()),
        },
        &dir.join(checkpoint_name(kind)),
    )?;
    write(&dir.join(losses_name(kind)), &history_csv(&out.history)?)?;
    Ok(out)
}

/// Trains the proposed model and the plain LSTM baseline per country.
pub fn train(cfg: &RunConfig, seed: u64, exec: Execution) -> Vec<CountryOutcome<TrainedCountry>> {
    exec.map_slice(&cfg.countries, |country| {
        let result = (|| {
            let series = load_series(cfg, country)?;
            let data = prepare_series(cfg, &series)?;
            let attention = train_kind(cfg, country, &data, ModelKind::AttentionLstm, seed)?;
            let plain = train_kind(cfg, country, &data, ModelKind::PlainLstm, seed)?;
            Ok(TrainedCountry { attention, plain })
        })();
        if let Err(e) = &result {
            warn!("{country}: training failed: {e}");
        }
        CountryOutcome {
            country: country.clone(),
            result,
        }
    })
}

fn load_model(cfg: &RunConfig, country: &str, kind: ModelKind, seed: u64, data: &PreparedData) -> Result<Model> {
    if kind == ModelKind::Persistence {
        return Model::new(cfg.model.clone().with_kind(kind), seed);
    }
    let path = cfg.country_dir(country).join(checkpoint_name(kind));
    let (model, meta) = load_checkpoint(&path)?;
    if meta.seed != seed {
        return Err(Error::Checkpoint(format!(
            "{} was trained with seed {}, not {seed}",
            path.display(),
            meta.seed
        )));
    }
    if model.config.kind != kind {
        return Err(Error::Checkpoint(format!("{} holds a {:?} model", path.display(), model.config.kind)));
    }
    if meta.scaler.as_ref() != Some(&data.scaler) {
        return Err(Error::Checkpoint(format!(
            "{}: scaler does not match the ingested series; retrain",
            path.display()
        )));
    }
    Ok(model)
}

pub const EVALUATED_MODELS: [ModelKind; 3] =
    [ModelKind::AttentionLstm, ModelKind::PlainLstm, ModelKind::Persistence];

fn evaluate_model(
    cfg: &RunConfig,
    country: &str,
    kind: ModelKind,
    seed: u64,
    series: &RawSeries,
    data: &PreparedData,
    exec: Execution,
) -> Result<(Metrics, Vec<Metrics>)> {
    let model = load_model(cfg, country, kind, seed, data)?;
    let test = evaluate_test(&model, &data.test, &data.scaler, exec)?;
    let dir = cfg.country_dir(country);
    let dates_of = |rows: &[usize]| rows.iter().map(|&r| series.dates[r]).collect::<Vec<_>>();
    write(
        &dir.join(format!("plot_test_{}.csv", kind.label())),
        &emit_plot_series(&dates_of(&data.test.target_rows), &test.actual, &test.predicted)?,
    )?;
    let actual = &series.confirmed;
    let mut horizons = Vec::with_capacity(cfg.horizons.horizons.len());
    for &h in &cfg.horizons.horizons {
        let f = evaluate_horizon(&model, data, actual, h)?;
        if h == cfg.horizons.max() {
            let rows: Vec<usize> = (f.first_row..f.first_row + h).collect();
            write(
                &dir.join(format!("plot_h{h}_{}.csv", kind.label())),
                &emit_plot_series(&dates_of(&rows), &f.scored.actual, &f.scored.predicted)?,
            )?;
        }
        if cfg.attention_traces && !f.attention.is_empty() {
            write(
                &dir.join("attention").join(format!("horizon_{h}.csv")),
                &attention_trace_csv(&f.attention)?,
            )?;
        }
        horizons.push(f.scored.metrics);
    }
    Ok((test.metrics, horizons))
}

/// Scores every model per country; failures become report rows. Writes
/// per-country and combined `report.md` / `report.csv`.
pub fn evaluate(cfg: &RunConfig, seed: u64, exec: Execution) -> Result<MetricsReport> {
    let per_country = exec.map_slice(&cfg.countries, |country| {
        let prepared = load_series(cfg, country)
            .and_then(|s| prepare_series(cfg, &s).map(|d| (s, d)));
        let rows: Vec<ReportRow> = EVALUATED_MODELS
            .iter()
            .map(|&kind| {
                let outcome = match &prepared {
                    Ok((series, data)) => {
                        match evaluate_model(cfg, country, kind, seed, series, data, exec) {
                            Ok((test, horizons)) => RowOutcome::Scored { test, horizons },
                            Err(e) => RowOutcome::Failed(e.to_string()),
                        }
                    }
                    Err(e) => RowOutcome::Failed(e.to_string()),
                };
                if let RowOutcome::Failed(msg) = &outcome {
                    warn!("{country} {}: {msg}", kind.display_name());
                }
                ReportRow {
                    country: country.clone(),
                    model: kind.display_name().to_string(),
                    outcome,
                }
            })
            .collect();
        (country.clone(), rows)
    });
    let metadata = ReportMetadata {
        window: cfg.window,
        split: cfg.split,
        seed,
    };
    let mut all = Vec::new();
    for (country, rows) in per_country {
        let report = MetricsReport {
            metadata: metadata.clone(),
            horizons: cfg.horizons.horizons.clone(),
            rows: rows.clone(),
        };
        let dir = cfg.country_dir(&country);
        write(&dir.join("report.md"), &render_report(&report, ReportFormat::Markdown)?)?;
        write(&dir.join("report.csv"), &render_report(&report, ReportFormat::Csv)?)?;
        all.extend(rows);
    }
    let report = MetricsReport {
        metadata,
        horizons: cfg.horizons.horizons.clone(),
        rows: all,
    };
    write(&cfg.output_dir.join("report.md"), &render_report(&report, ReportFormat::Markdown)?)?;
    write(&cfg.output_dir.join("report.csv"), &render_report(&report, ReportFormat::Csv)?)?;
    Ok(report)
}

#[derive(Debug)]
pub struct ForecastOutput {
    pub dates: Vec<chrono::NaiveDate>,
    pub predicted: Vec<f64>,
}

/// Forecasts `horizon` days past the last ingested date with the country's
/// AttentionLSTM checkpoint; writes `forecast.csv` and
/// `attention/forecast.csv`.
pub fn forecast(cfg: &RunConfig, country: &str, horizon: usize) -> Result<ForecastOutput> {
    if horizon == 0 {
        return Err(Error::Config("horizon must be at least 1".into()));
    }
    let series = load_series(cfg, country)?;
    let path = cfg.country_dir(country).join(checkpoint_name(ModelKind::AttentionLstm));
    let (model, meta) = load_checkpoint(&path)?;
    let scaler = meta
        .scaler
        .ok_or_else(|| Error::Checkpoint(format!("{} has no scaler", path.display())))?;
    let scaled = scaler.scale(&series.rows());
    let last = series.len() - 1;
    let (path_out, predicted) =
        forecast_from(&model, &scaled, &series.time_indices(), &scaler, last, horizon)?;
    let end = series.dates[last];
    let dates: Vec<_> = (1..=horizon as i64).map(|k| end + Duration::days(k)).collect();

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["date", "predicted_confirmed"])?;
    for (d, y) in dates.iter().zip(&predicted) {
        w.write_record([d.format("%Y-%m-%d").to_string(), y.to_string()])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Contract(e.to_string()))?;
    let dir = cfg.country_dir(country);
    write(&dir.join("forecast.csv"), &String::from_utf8(bytes).expect("utf-8"))?;
    write(
        &dir.join("attention").join("forecast.csv"),
        &attention_trace_csv(&path_out.attention_traces)?,
    )?;
    Ok(ForecastOutput { dates, predicted })
}
