//! Synthetic files in the JHU global time-series layout.
//!
//! Cumulative curves are logistic waves plus a linear tail, rounded to whole
//! cases. They exercise the pipeline mechanics only; they are not a stand-in
//! for the real archive.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

pub const CONFIRMED: &str = "time_series_covid19_confirmed_global.csv";
pub const RECOVERED: &str = "time_series_covid19_recovered_global.csv";
pub const DEATHS: &str = "time_series_covid19_deaths_global.csv";

/// (province, country, scale, midpoint day, width, tail slope)
const ROWS: &[(&str, &str, f64, f64, f64, f64)] = &[
    ("", "Italy", 240_000.0, 60.0, 12.0, 120.0),
    ("", "Spain", 250_000.0, 65.0, 11.0, 700.0),
    ("Ontario", "Canada", 40_000.0, 90.0, 14.0, 90.0),
    ("Quebec", "Canada", 60_000.0, 85.0, 12.0, 80.0),
    ("British Columbia", "Canada", 5_000.0, 80.0, 15.0, 60.0),
    ("", "France", 180_000.0, 70.0, 10.0, 600.0),
    ("Reunion", "France", 500.0, 75.0, 9.0, 20.0),
    ("", "Germany", 200_000.0, 68.0, 10.0, 300.0),
];

fn curve(day: usize, scale: f64, mid: f64, width: f64, tail: f64) -> f64 {
    let t = day as f64;
    let logistic = scale / (1.0 + (-(t - mid) / width).exp());
    let late = (t - mid - 3.0 * width).max(0.0) * tail;
    (logistic + late).floor()
}

fn dates(days: usize) -> Vec<String> {
    let start = chrono::NaiveDate::from_ymd_opt(2020, 1, 22).unwrap();
    (0..days)
        .map(|i| {
            let d = start + chrono::Duration::days(i as i64);
            d.format("%-m/%-d/%y").to_string()
        })
        .collect()
}

fn table(days: usize, rows: &[(String, String, Vec<f64>)]) -> String {
    let mut s = String::from("Province/State,Country/Region,Lat,Long");
    for d in dates(days) {
        s.push(',');
        s.push_str(&d);
    }
    s.push('\n');
    for (province, country, values) in rows {
        let province = if province.contains(',') {
            format!("\"{province}\"")
        } else {
            province.clone()
        };
        let _ = write!(s, "{province},{country},0.0,0.0");
        for v in values {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

/// Writes confirmed, recovered and deaths files covering 1/22/20 onwards
/// for `days` days. Canada's recovered series is a single national row, as
/// in the archive.
pub fn write_jhu_fixture(dir: &Path, days: usize) {
    fs::create_dir_all(dir).unwrap();
    let confirmed: Vec<_> = ROWS
        .iter()
        .map(|&(p, c, k, m, w, t)| {
            (p.to_string(), c.to_string(), (0..days).map(|d| curve(d, k, m, w, t)).collect::<Vec<_>>())
        })
        .collect();
    let deaths: Vec<_> = ROWS
        .iter()
        .map(|&(p, c, k, m, w, t)| {
            let v = (0..days).map(|d| curve(d, 0.1 * k, m + 7.0, w, 0.05 * t)).collect::<Vec<_>>();
            (p.to_string(), c.to_string(), v)
        })
        .collect();
    let mut recovered: Vec<_> = ROWS
        .iter()
        .filter(|r| r.1 != "Canada")
        .map(|&(p, c, k, m, w, t)| {
            let v = (0..days).map(|d| curve(d, 0.7 * k, m + 20.0, w, 0.5 * t)).collect::<Vec<_>>();
            (p.to_string(), c.to_string(), v)
        })
        .collect();
    recovered.push((
        String::new(),
        "Canada".to_string(),
        (0..days).map(|d| curve(d, 70_000.0, 105.0, 13.0, 50.0)).collect(),
    ));
    fs::write(dir.join(CONFIRMED), table(days, &confirmed)).unwrap();
    fs::write(dir.join(RECOVERED), table(days, &recovered)).unwrap();
    fs::write(dir.join(DEATHS), table(days, &deaths)).unwrap();
}
