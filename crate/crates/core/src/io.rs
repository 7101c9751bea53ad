//! Data ingestion, run configuration, the end-to-end pipeline and its
//! tabular and SVG outputs.
//!
//! Plots are drawn from the emitted CSV files only, so every figure can be
//! regenerated from the tables of a finished run.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::NaiveDate;
use log::info;
use plotters::prelude::*;

use crate::checks::{
    fit_undilated, forward_sanity_from_fit, ifr_adjust, naive_imputation_demo, refit_dilated, simulate_extreme, PeakReport,
    ScenarioSpec,
};
use crate::durations::{
    convolve_to_infection, Family, duration_ensemble, fit_chess_mixture, incubation_model, isaric_infection_to_death, DurationDist,
    DurationEnsemble,
};
use crate::epi_r::{r_posterior, r_sensitivity, SeirParams};
use crate::error::{Error, Result};
use crate::inference::{pool_with_dispersion, Bands, FitSettings, MhSettings, PoolSettings, Sampler};
use crate::models::{DeathSeries, Model, ModelKind, ModelSpec};
use crate::pcr::PcrFit;

/// Environment variable that overrides the output directory.
pub const OUTPUT_ENV: &str = "BACKCALC_OUT";

/// The conventional day 0 of the first-wave figures, 13 March 2020.
pub fn day0_preset() -> NaiveDate {
    NaiveDate::from_ymd_opt(2020, 3, 13).expect("valid date")
}

pub const CHESS_TABLE: &str = include_str!("../data/chess_onset_to_death.csv");
pub const ISARIC_TABLE: &str = include_str!("../data/isaric_hosp_to_death.csv");
pub const SAMPLE_SERIES: &str = include_str!("../data/synthetic_first_wave.csv");

fn parse_date(s: &str) -> Result<NaiveDate> {
    NaiveDate::parse_from_str(s.trim(), "%Y-%m-%d").map_err(|_| Error::Input(format!("'{s}' is not a YYYY-MM-DD date")))
}

/// Read a `date,deaths` series. Blank lines and `#` comments are ignored;
/// rows may come in any order but must cover a contiguous run of days.
pub fn ingest_deaths(path: &Path) -> Result<DeathSeries> {
    let file = fs::File::open(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    parse_deaths(file)
}

pub fn parse_deaths<R: Read>(reader: R) -> Result<DeathSeries> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).flexible(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h.eq_ignore_ascii_case(name));
    let (Some(di), Some(yi)) = (col("date"), col("deaths")) else {
        return Err(Error::Input("expected a header with 'date' and 'deaths' columns".into()));
    };
    let mut rows: Vec<(NaiveDate, u64)> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        if rec.iter().all(|f| f.is_empty()) {
            continue;
        }
        let line = rec.position().map_or(0, |p| p.line());
        let date = parse_date(rec.get(di).unwrap_or(""))?;
        let raw = rec.get(yi).unwrap_or("");
        let deaths: u64 = raw.parse().map_err(|_| Error::Input(format!("line {line}: deaths '{raw}' is not a nonnegative integer")))?;
        rows.push((date, deaths));
    }
    if rows.is_empty() {
        return Err(Error::Input("no data rows".into()));
    }
    rows.sort_by_key(|r| r.0);
    if let Some(w) = rows.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(Error::Input(format!("duplicate date {}", w[0].0)));
    }
    let have: BTreeSet<NaiveDate> = rows.iter().map(|r| r.0).collect();
    let (first, last) = (rows[0].0, rows[rows.len() - 1].0);
    let missing: Vec<String> = first
        .iter_days()
        .take_while(|d| *d <= last)
        .filter(|d| !have.contains(d))
        .map(|d| d.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Input(format!("missing dates: {}", missing.join(", "))));
    }
    DeathSeries::new(first, rows.into_iter().map(|r| r.1).collect())
}

/// Where the infection-to-death distributions come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DurationSource {
    /// Replicates of the published-study meta-analysis.
    Meta,
    /// The community component of the English hospital mixture fit.
    Chess,
    /// The hospitalisation-to-death function combined with onset data.
    Isaric,
    /// A table written by `durations build`.
    File(PathBuf),
}

impl FromStr for DurationSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "meta" => Ok(Self::Meta),
            "chess" => Ok(Self::Chess),
            "isaric" => Ok(Self::Isaric),
            _ => match s.trim().strip_prefix("file:") {
                Some(p) => Ok(Self::File(PathBuf::from(p))),
                None => Err(Error::Input(format!("unknown duration source '{s}' (meta, chess, isaric or file:PATH)"))),
            },
        }
    }
}

/// Input series: a CSV path, the bundled synthetic series or a simulated
/// extreme scenario.
#[derive(Debug, Clone, PartialEq)]
pub enum InputSource {
    File(PathBuf),
    Sample,
    Extreme,
}

impl FromStr for InputSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "sample" => Self::Sample,
            "extreme" => Self::Extreme,
            p => Self::File(PathBuf::from(p)),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub input: InputSource,
    pub model: ModelKind,
    pub anchors: Vec<(String, NaiveDate)>,
    pub durations: DurationSource,
    pub ensemble: usize,
    pub seed: u64,
    pub output: PathBuf,
    /// Dates are also reported as days from this one.
    pub day0: Option<NaiveDate>,
    pub k: usize,
    pub samples_per_draw: usize,
    pub mh: bool,
    pub dilate: bool,
    pub ifr_adjust: bool,
    pub sanity: bool,
    pub imputation_demo: bool,
    pub ifr_rate: f64,
    pub ifr_start: NaiveDate,
    pub seir: SeirParams,
    pub latent_range: (f64, f64),
    pub infectious_range: (f64, f64),
    pub sanity_reps: usize,
    pub imputation_reps: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            input: InputSource::Sample,
            model: ModelKind::Incidence,
            anchors: Vec::new(),
            durations: DurationSource::Meta,
            ensemble: 100,
            seed: 1,
            output: PathBuf::from("backcalc-out"),
            day0: None,
            k: 30,
            samples_per_draw: 200,
            mh: false,
            dilate: false,
            ifr_adjust: false,
            sanity: true,
            imputation_demo: false,
            ifr_rate: 0.985,
            ifr_start: NaiveDate::from_ymd_opt(2020, 3, 29).expect("valid date"),
            seir: SeirParams::default(),
            latent_range: (1.0, 5.0),
            infectious_range: (2.0, 10.0),
            sanity_reps: 100,
            imputation_reps: 20,
        }
    }
}

fn parse_bool(v: &str) -> Result<bool> {
    match v.trim().to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::Input(format!("'{v}' is not a boolean"))),
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim().parse().map_err(|_| Error::Input(format!("bad value '{v}' for {key}")))
}

fn parse_range(key: &str, v: &str) -> Result<(f64, f64)> {
    let (a, b) = v.split_once(',').or_else(|| v.split_once(".."))
        .ok_or_else(|| Error::Input(format!("{key} expects LO,HI")))?;
    Ok((parse_num(key, a)?, parse_num(key, b)?))
}

/// Parse `name=YYYY-MM-DD`.
pub fn parse_anchor(v: &str) -> Result<(String, NaiveDate)> {
    let (name, date) = v.split_once('=').ok_or_else(|| Error::Input(format!("anchor '{v}' should be name=YYYY-MM-DD")))?;
    Ok((name.trim().to_string(), parse_date(date)?))
}

impl RunConfig {
    /// Set one option. Anchors accumulate; everything else overwrites.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "input" => self.input = v.parse()?,
            "model" => self.model = v.parse()?,
            "anchor" => {
                let (name, date) = parse_anchor(v)?;
                self.anchors.retain(|a| a.0 != name);
                self.anchors.push((name, date));
            }
            "durations" => self.durations = v.parse()?,
            "ensemble" => self.ensemble = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "output" => self.output = PathBuf::from(v),
            "day0" => self.day0 = Some(if v == "preset" { day0_preset() } else { parse_date(v)? }),
            "k" => self.k = parse_num(key, v)?,
            "samples_per_draw" => self.samples_per_draw = parse_num(key, v)?,
            "sampler" => {
                self.mh = match v {
                    "mh" => true,
                    "gaussian" => false,
                    _ => return Err(Error::Input(format!("sampler '{v}' is not gaussian or mh"))),
                }
            }
            "dilate" => self.dilate = parse_bool(v)?,
            "ifr_adjust" => self.ifr_adjust = parse_bool(v)?,
            "sanity" => self.sanity = parse_bool(v)?,
            "imputation_demo" => self.imputation_demo = parse_bool(v)?,
            "ifr_rate" => self.ifr_rate = parse_num(key, v)?,
            "ifr_start" => self.ifr_start = parse_date(v)?,
            "latent_days" => self.seir = SeirParams::new(parse_num(key, v)?, self.seir.infectious_days)?,
            "infectious_days" => self.seir = SeirParams::new(self.seir.latent_days, parse_num(key, v)?)?,
            "latent_range" => self.latent_range = parse_range(key, v)?,
            "infectious_range" => self.infectious_range = parse_range(key, v)?,
            "sanity_reps" => self.sanity_reps = parse_num(key, v)?,
            "imputation_reps" => self.imputation_reps = parse_num(key, v)?,
            other => return Err(Error::Input(format!("unknown configuration key '{other}'"))),
        }
        Ok(())
    }

    /// Apply `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Input(format!("config line {}: expected key = value", i + 1)))?;
            self.set(k, v).map_err(|e| Error::Input(format!("config line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(&fs::read_to_string(path)?)?;
        Ok(c)
    }

    /// The output directory, unless the environment overrides it.
    pub fn output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.output.clone(),
        }
    }
}

/// Load the series named by the configuration, with its anchors attached.
/// The extreme scenario is simulated from `dist`.
pub fn load_series(config: &RunConfig, dist: &DurationDist) -> Result<DeathSeries> {
    let mut series = match &config.input {
        InputSource::File(p) => ingest_deaths(p)?,
        InputSource::Sample => parse_deaths(SAMPLE_SERIES.as_bytes())?,
        InputSource::Extreme => {
            let mut rng = crate::stream_rng(config.seed, u64::MAX - 1);
            simulate_extreme(&ScenarioSpec::default(), dist, &mut rng)?.series
        }
    };
    if config.input == InputSource::Sample && config.anchors.is_empty() {
        series = series.with_anchor("lockdown", NaiveDate::from_ymd_opt(2020, 3, 24).expect("valid date"));
    }
    for (name, date) in &config.anchors {
        series.anchors.retain(|a| &a.0 != name);
        series = series.with_anchor(name, *date);
    }
    Ok(series)
}

fn table_rows(text: &str) -> Result<Vec<(u32, f64)>> {
    crate::durations::parse_day_table(text.as_bytes())
}

/// The community onset-to-death component fitted to the bundled hospital
/// histogram, convolved with the incubation period.
pub fn chess_infection_to_death(seed: u64) -> Result<(crate::durations::ChessFit, DurationDist)> {
    let hist: Vec<(u32, u64)> = table_rows(CHESS_TABLE)?.into_iter().map(|(d, c)| (d, c.round() as u64)).collect();
    let fit = fit_chess_mixture(&hist)?;
    let mut rng = crate::stream_rng(seed, u64::MAX - 2);
    let dist = convolve_to_infection(&fit.constrained.lognormal, &incubation_model(), &mut rng);
    Ok((fit, dist))
}

pub fn isaric_result(seed: u64) -> Result<crate::durations::IsaricResult> {
    let mut rng = crate::stream_rng(seed, u64::MAX - 3);
    isaric_infection_to_death(&table_rows(ISARIC_TABLE)?, &mut rng)
}

/// Write an ensemble as `family,p1,p2` rows; the central law comes first.
pub fn write_duration_draws(path: &Path, ensemble: &DurationEnsemble) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["family", "p1", "p2", "mean", "sd"])?;
    for d in std::iter::once(&ensemble.mean_dist).chain(&ensemble.draws) {
        let fam = match d.family {
            Family::LogNormal => "lognormal",
            Family::Gamma => "gamma",
        };
        w.write_record([fam.to_string(), format!("{}", d.p1), format!("{}", d.p2), format!("{}", d.mean()), format!("{}", d.sd())])?;
    }
    w.flush()?;
    Ok(())
}

/// Read what [`write_duration_draws`] wrote. The first row is the central
/// law; if it is the only row it is also the single draw.
pub fn read_duration_draws(path: &Path) -> Result<DurationEnsemble> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_path(path)?;
    let mut dists = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        if rec.iter().all(|f| f.is_empty()) {
            continue;
        }
        let (p1, p2) = (parse_num("p1", &rec[1])?, parse_num("p2", &rec[2])?);
        dists.push(match &rec[0] {
            "lognormal" => DurationDist::lognormal(p1, p2)?,
            "gamma" => DurationDist::gamma(p1, p2)?,
            f => return Err(Error::Input(format!("unknown family '{f}'"))),
        });
    }
    match dists.len() {
        0 => Err(Error::Input(format!("{}: no distributions", path.display()))),
        1 => Ok(DurationEnsemble::single(dists[0])),
        _ => {
            let mean_dist = dists.remove(0);
            Ok(DurationEnsemble { draws: dists, mean_dist })
        }
    }
}

pub fn build_ensemble(config: &RunConfig) -> Result<DurationEnsemble> {
    match &config.durations {
        DurationSource::Meta => duration_ensemble(config.ensemble, config.seed),
        DurationSource::Chess => Ok(DurationEnsemble::single(chess_infection_to_death(config.seed)?.1)),
        DurationSource::Isaric => Ok(DurationEnsemble::single(isaric_result(config.seed)?.infection_to_death)),
        DurationSource::File(p) => read_duration_draws(p),
    }
}

/// Bands keyed by grid day, as written to `incidence.csv` and `r.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct BandTable {
    pub days: Vec<i64>,
    pub dates: Vec<NaiveDate>,
    pub bands: Bands,
}

const BAND_HEADER: [&str; 7] = ["day", "date", "median", "q2.5", "q16", "q84", "q97.5"];

fn fmt_value(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        String::new()
    }
}

fn parse_value(s: &str) -> Result<f64> {
    if s.trim().is_empty() {
        Ok(f64::NAN)
    } else {
        parse_num("value", s)
    }
}

pub fn write_band_table(path: &Path, table: &BandTable) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(BAND_HEADER)?;
    let b = &table.bands;
    for i in 0..table.days.len() {
        w.write_record([
            table.days[i].to_string(),
            table.dates[i].to_string(),
            fmt_value(b.median[i]),
            fmt_value(b.q025[i]),
            fmt_value(b.q16[i]),
            fmt_value(b.q84[i]),
            fmt_value(b.q975[i]),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_band_table(path: &Path) -> Result<BandTable> {
    let mut rdr = csv::Reader::from_path(path)?;
    if rdr.headers()?.iter().collect::<Vec<_>>() != BAND_HEADER {
        return Err(Error::Input(format!("{}: unexpected header", path.display())));
    }
    let mut t = BandTable {
        days: Vec::new(),
        dates: Vec::new(),
        bands: Bands { q025: Vec::new(), q16: Vec::new(), median: Vec::new(), q84: Vec::new(), q975: Vec::new() },
    };
    for rec in rdr.records() {
        let rec = rec?;
        t.days.push(parse_num("day", &rec[0])?);
        t.dates.push(parse_date(&rec[1])?);
        t.bands.median.push(parse_value(&rec[2])?);
        t.bands.q025.push(parse_value(&rec[3])?);
        t.bands.q16.push(parse_value(&rec[4])?);
        t.bands.q84.push(parse_value(&rec[5])?);
        t.bands.q975.push(parse_value(&rec[6])?);
    }
    Ok(t)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PeakTable {
    pub days: Vec<i64>,
    pub dates: Vec<NaiveDate>,
    pub probability: Vec<f64>,
}

pub fn write_peak_table(path: &Path, t: &PeakTable) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["day", "date", "probability"])?;
    for i in 0..t.days.len() {
        w.write_record([t.days[i].to_string(), t.dates[i].to_string(), format!("{}", t.probability[i])])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_peak_table(path: &Path) -> Result<PeakTable> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut t = PeakTable { days: Vec::new(), dates: Vec::new(), probability: Vec::new() };
    for rec in rdr.records() {
        let rec = rec?;
        t.days.push(parse_num("day", &rec[0])?);
        t.dates.push(parse_date(&rec[1])?);
        t.probability.push(parse_num("probability", &rec[2])?);
    }
    Ok(t)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SanityTable {
    pub days: Vec<i64>,
    pub dates: Vec<NaiveDate>,
    pub observed: Vec<f64>,
    pub mean: Vec<f64>,
    pub lower: Vec<f64>,
    pub median: Vec<f64>,
    pub upper: Vec<f64>,
}

const SANITY_HEADER: [&str; 7] = ["day", "date", "observed", "mean", "lower", "median", "upper"];

pub fn write_sanity_table(path: &Path, t: &SanityTable) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(SANITY_HEADER)?;
    for i in 0..t.days.len() {
        w.write_record([
            t.days[i].to_string(),
            t.dates[i].to_string(),
            fmt_value(t.observed[i]),
            fmt_value(t.mean[i]),
            fmt_value(t.lower[i]),
            fmt_value(t.median[i]),
            fmt_value(t.upper[i]),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_sanity_table(path: &Path) -> Result<SanityTable> {
    let mut rdr = csv::Reader::from_path(path)?;
    if rdr.headers()?.iter().collect::<Vec<_>>() != SANITY_HEADER {
        return Err(Error::Input(format!("{}: unexpected header", path.display())));
    }
    let mut t = SanityTable {
        days: Vec::new(),
        dates: Vec::new(),
        observed: Vec::new(),
        mean: Vec::new(),
        lower: Vec::new(),
        median: Vec::new(),
        upper: Vec::new(),
    };
    for rec in rdr.records() {
        let rec = rec?;
        t.days.push(parse_num("day", &rec[0])?);
        t.dates.push(parse_date(&rec[1])?);
        t.observed.push(parse_value(&rec[2])?);
        t.mean.push(parse_value(&rec[3])?);
        t.lower.push(parse_value(&rec[4])?);
        t.median.push(parse_value(&rec[5])?);
        t.upper.push(parse_value(&rec[6])?);
    }
    Ok(t)
}

fn plot_err<E: std::fmt::Display>(e: E) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

fn finite_range<'a>(vals: impl Iterator<Item = &'a f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in vals {
        if v.is_finite() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi <= lo {
        hi = lo + 1.0;
    }
    (lo, hi)
}

fn band_polygon(days: &[i64], lo: &[f64], hi: &[f64]) -> Vec<(f64, f64)> {
    let idx: Vec<usize> = (0..days.len()).filter(|&i| lo[i].is_finite() && hi[i].is_finite()).collect();
    let mut pts: Vec<(f64, f64)> = idx.iter().map(|&i| (days[i] as f64, lo[i])).collect();
    pts.extend(idx.iter().rev().map(|&i| (days[i] as f64, hi[i])));
    pts
}

fn line_points(days: &[i64], v: &[f64]) -> Vec<(f64, f64)> {
    days.iter().zip(v).filter(|(_, y)| y.is_finite()).map(|(&d, &y)| (d as f64, y)).collect()
}

/// Draw a band table: shaded 95% and 68% intervals, the median, an optional
/// reference level and vertical anchor lines.
pub fn plot_band_table(csv_path: &Path, svg_path: &Path, title: &str, y_label: &str, reference: Option<f64>, anchors: &[i64]) -> Result<()> {
    let t = read_band_table(csv_path)?;
    let b = &t.bands;
    let xs = (*t.days.first().unwrap_or(&0) as f64, *t.days.last().unwrap_or(&1) as f64);
    let (_, mut y1) = finite_range(b.q975.iter().chain(b.median.iter()));
    if let Some(r) = reference {
        y1 = y1.max(r * 1.2);
    }
    let root = SVGBackend::new(svg_path, (900, 520)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(xs.0..xs.1.max(xs.0 + 1.0), 0.0..y1 * 1.05)
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc("day").y_desc(y_label).draw().map_err(plot_err)?;
    chart
        .draw_series(std::iter::once(Polygon::new(band_polygon(&t.days, &b.q025, &b.q975), RGBColor(200, 200, 200).mix(0.6))))
        .map_err(plot_err)?;
    chart
        .draw_series(std::iter::once(Polygon::new(band_polygon(&t.days, &b.q16, &b.q84), RGBColor(150, 150, 150).mix(0.6))))
        .map_err(plot_err)?;
    chart.draw_series(LineSeries::new(line_points(&t.days, &b.median), BLACK.stroke_width(2))).map_err(plot_err)?;
    if let Some(r) = reference {
        chart.draw_series(LineSeries::new(vec![(xs.0, r), (xs.1, r)], &BLUE)).map_err(plot_err)?;
    }
    for &a in anchors {
        chart.draw_series(LineSeries::new(vec![(a as f64, 0.0), (a as f64, y1 * 1.05)], &RED)).map_err(plot_err)?;
    }
    root.present().map_err(plot_err)?;
    Ok(())
}

pub fn plot_peak_table(csv_path: &Path, svg_path: &Path, anchors: &[i64]) -> Result<()> {
    let t = read_peak_table(csv_path)?;
    let xs = (*t.days.first().unwrap_or(&0) as f64 - 0.5, *t.days.last().unwrap_or(&1) as f64 + 0.5);
    let (_, y1) = finite_range(t.probability.iter());
    let root = SVGBackend::new(svg_path, (900, 360)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("posterior peak day", ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(xs.0..xs.1, 0.0..y1 * 1.1)
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc("day").y_desc("probability").draw().map_err(plot_err)?;
    chart
        .draw_series(
            t.days
                .iter()
                .zip(&t.probability)
                .filter(|(_, p)| **p > 0.0)
                .map(|(&d, &p)| Rectangle::new([(d as f64 - 0.4, 0.0), (d as f64 + 0.4, p)], BLUE.filled())),
        )
        .map_err(plot_err)?;
    for &a in anchors {
        chart.draw_series(LineSeries::new(vec![(a as f64, 0.0), (a as f64, y1 * 1.1)], &RED)).map_err(plot_err)?;
    }
    root.present().map_err(plot_err)?;
    Ok(())
}

pub fn plot_sanity_table(csv_path: &Path, svg_path: &Path) -> Result<()> {
    let t = read_sanity_table(csv_path)?;
    let xs = (*t.days.first().unwrap_or(&0) as f64, *t.days.last().unwrap_or(&1) as f64);
    let (_, y1) = finite_range(t.upper.iter().chain(t.observed.iter()));
    let root = SVGBackend::new(svg_path, (900, 520)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("deaths simulated forward from the median profile", ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(xs.0..xs.1.max(xs.0 + 1.0), 0.0..y1 * 1.05)
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc("day").y_desc("deaths").draw().map_err(plot_err)?;
    chart
        .draw_series(std::iter::once(Polygon::new(band_polygon(&t.days, &t.lower, &t.upper), RGBColor(200, 200, 200).mix(0.7))))
        .map_err(plot_err)?;
    chart.draw_series(LineSeries::new(line_points(&t.days, &t.median), &BLACK)).map_err(plot_err)?;
    chart
        .draw_series(line_points(&t.days, &t.observed).into_iter().map(|p| Circle::new(p, 2, BLUE.filled())))
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

/// Per-day PCR surveillance table. `truth` and the fit columns are empty
/// when unknown.
#[derive(Debug, Clone, PartialEq)]
pub struct PcrTable {
    pub truth: Vec<f64>,
    pub positives: Vec<u64>,
    pub tested: u64,
    pub fitted: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

const PCR_HEADER: [&str; 7] = ["day", "truth", "positives", "tested", "fitted", "lower", "upper"];

impl PcrTable {
    pub fn new(truth: Option<&[f64]>, positives: Vec<u64>, tested: u64) -> Self {
        let n = positives.len();
        let nan = vec![f64::NAN; n];
        Self { truth: truth.map_or_else(|| nan.clone(), <[f64]>::to_vec), positives, tested, fitted: nan.clone(), lower: nan.clone(), upper: nan }
    }

    pub fn with_fit(mut self, fit: &PcrFit) -> Self {
        self.fitted = fit.incidence.clone();
        self.lower = fit.lower.clone();
        self.upper = fit.upper.clone();
        self
    }
}

pub fn write_pcr_table(path: &Path, t: &PcrTable) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(PCR_HEADER)?;
    for i in 0..t.positives.len() {
        w.write_record([
            i.to_string(),
            fmt_value(t.truth[i]),
            t.positives[i].to_string(),
            t.tested.to_string(),
            fmt_value(t.fitted[i]),
            fmt_value(t.lower[i]),
            fmt_value(t.upper[i]),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Read a PCR table. Only `day`, `positives` and `tested` are required.
pub fn read_pcr_table(path: &Path) -> Result<PcrTable> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_path(path)?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (Some(pi), Some(ti)) = (col("positives"), col("tested")) else {
        return Err(Error::Input(format!("{}: needs 'positives' and 'tested' columns", path.display())));
    };
    let opt = |rec: &csv::StringRecord, name: &str| -> Result<f64> { col(name).map_or(Ok(f64::NAN), |i| parse_value(rec.get(i).unwrap_or(""))) };
    let mut t = PcrTable { truth: Vec::new(), positives: Vec::new(), tested: 0, fitted: Vec::new(), lower: Vec::new(), upper: Vec::new() };
    for rec in rdr.records() {
        let rec = rec?;
        if rec.iter().all(|f| f.is_empty()) {
            continue;
        }
        let tested: u64 = parse_num("tested", &rec[ti])?;
        if !t.positives.is_empty() && tested != t.tested {
            return Err(Error::Input("the number tested must be the same every day".into()));
        }
        t.tested = tested;
        t.positives.push(parse_num("positives", &rec[pi])?);
        t.truth.push(opt(&rec, "truth")?);
        t.fitted.push(opt(&rec, "fitted")?);
        t.lower.push(opt(&rec, "lower")?);
        t.upper.push(opt(&rec, "upper")?);
    }
    if t.positives.is_empty() {
        return Err(Error::Input(format!("{}: no rows", path.display())));
    }
    Ok(t)
}

pub fn plot_pcr_table(csv_path: &Path, svg_path: &Path) -> Result<()> {
    let t = read_pcr_table(csv_path)?;
    let days: Vec<i64> = (0..t.positives.len() as i64).collect();
    let (_, y1) = finite_range(t.upper.iter().chain(t.truth.iter()).chain(t.fitted.iter()));
    let root = SVGBackend::new(svg_path, (900, 520)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("incidence from PCR surveillance", ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(70)
        .build_cartesian_2d(0.0..(days.len().max(2) - 1) as f64, 0.0..y1 * 1.05)
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc("day").y_desc("new infections per capita").draw().map_err(plot_err)?;
    chart
        .draw_series(std::iter::once(Polygon::new(band_polygon(&days, &t.lower, &t.upper), RGBColor(200, 200, 200).mix(0.7))))
        .map_err(plot_err)?;
    chart.draw_series(LineSeries::new(line_points(&days, &t.fitted), BLACK.stroke_width(2))).map_err(plot_err)?;
    chart.draw_series(LineSeries::new(line_points(&days, &t.truth), &RED)).map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

/// Files written by a run, and the text of its report.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub dir: PathBuf,
    pub files: Vec<PathBuf>,
    pub report: String,
    pub peak_mode: (NaiveDate, f64),
}

fn peak_table(report: &PeakReport, series: &DeathSeries, day0: NaiveDate) -> PeakTable {
    let dates: Vec<NaiveDate> = report.days.iter().map(|&d| series.date(d)).collect();
    PeakTable { days: dates.iter().map(|d| (*d - day0).num_days()).collect(), dates, probability: report.probs.clone() }
}

fn write_peak_summary(out: &mut String, label: &str, report: &PeakReport, series: &DeathSeries) {
    let (d, p) = report.mode();
    let _ = write!(out, "{label}: peak mode {} (probability {p:.3})", series.date(d));
    for (name, date) in &series.anchors {
        let _ = write!(out, ", P(peak before {name}) = {:.3}", report.prob_before(series.day_of(*date)));
    }
    out.push('\n');
}

fn summary_stats(v: &[f64]) -> (f64, f64, f64) {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    (s[0], crate::inference::quantile_sorted(&s, 0.5), s[s.len() - 1])
}

/// Fit, pool over the duration ensemble and write every artifact.
pub fn run_pipeline(config: &RunConfig) -> Result<Artifacts> {
    let dir = config.output_dir();
    fs::create_dir_all(&dir)?;
    let ensemble = build_ensemble(config)?;
    let reference = ensemble.mean_dist;
    let series = load_series(config, &reference)?;
    let day0 = config.day0.unwrap_or(series.start);
    info!("{} days of deaths from {}, {} duration draws", series.len(), series.start, ensemble.len());

    let mut spec = ModelSpec::new(config.model);
    spec.k = config.k;
    let sampler = if config.mh { Sampler::MetropolisHastings(MhSettings::default()) } else { Sampler::Gaussian };
    let settings = PoolSettings { fit: FitSettings::default(), sampler, samples_per_draw: config.samples_per_draw, seed: config.seed };
    let (pooled, ref_fit, ref_model) = pool_with_dispersion(|d| Model::build(&spec, &series, Some(d)), &reference, &ensemble, &settings)?;
    spec.theta = ref_model.theta;

    let dates: Vec<NaiveDate> = pooled.grid_days.iter().map(|&d| series.date(d)).collect();
    let days: Vec<i64> = dates.iter().map(|d| (*d - day0).num_days()).collect();
    let anchor_days: Vec<i64> = series.anchors.iter().map(|(_, d)| (*d - day0).num_days()).collect();
    let mut files = Vec::new();

    let incidence = BandTable { days: days.clone(), dates: dates.clone(), bands: pooled.bands() };
    let inc_path = dir.join("incidence.csv");
    write_band_table(&inc_path, &incidence)?;
    files.push(inc_path.clone());

    let peak = PeakReport { days: pooled.grid_days.clone(), probs: pooled.peak_distribution().probs };
    let peak_path = dir.join("peak_distribution.csv");
    write_peak_table(&peak_path, &peak_table(&peak, &series, day0))?;
    files.push(peak_path.clone());

    let r_path = dir.join("r.csv");
    let r_bands = r_posterior(&pooled.incidence, &config.seir)?;
    write_band_table(&r_path, &BandTable { days: days.clone(), dates: dates.clone(), bands: r_bands })?;
    files.push(r_path.clone());

    let sens = r_sensitivity(&incidence.bands.median, &config.seir, config.latent_range, config.infectious_range, 5)?;
    let sens_path = dir.join("r_sensitivity.csv");
    let mut w = csv::Writer::from_path(&sens_path)?;
    w.write_record(["day", "date", "central", "lower", "upper"])?;
    let cell = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x}"));
    for i in 0..days.len() {
        w.write_record([days[i].to_string(), dates[i].to_string(), cell(sens.central[i]), cell(sens.lower[i]), cell(sens.upper[i])])?;
    }
    w.flush()?;
    files.push(sens_path);

    let mut report = String::new();
    let _ = writeln!(report, "model: {}", config.model);
    let _ = writeln!(report, "series: {} to {} ({} days, {} deaths)", series.start, series.date(series.len() as i64 - 1), series.len(), series.deaths.iter().sum::<f64>());
    let _ = writeln!(report, "duration draws: {} fitted, {} failed", pooled.fits.len(), pooled.failed);
    let _ = writeln!(report, "reference infection-to-death: mean {:.2}, sd {:.2}", reference.mean(), reference.sd());
    let _ = writeln!(report, "theta: {:.4}", ref_fit.theta);
    let _ = writeln!(report, "lambda (reference fit): {:?}", ref_fit.lambda);
    let _ = writeln!(report, "deviance (reference fit): {:.4}", ref_fit.deviance);
    let _ = writeln!(report, "edf (reference fit): {:.3}", ref_fit.edf);
    let _ = writeln!(report, "laplace marginal likelihood (reference fit): {:.4}", ref_fit.lml);
    let (dmin, dmed, dmax) = summary_stats(&pooled.fits.iter().map(|f| f.deviance).collect::<Vec<_>>());
    let _ = writeln!(report, "deviance over draws: min {dmin:.3}, median {dmed:.3}, max {dmax:.3}");
    let ess: Vec<f64> = pooled.fits.iter().filter_map(|f| f.min_ess).collect();
    if ess.is_empty() {
        let _ = writeln!(report, "sampler: gaussian approximation, {} samples per draw", config.samples_per_draw);
    } else {
        let (lo, med, _) = summary_stats(&ess);
        let _ = writeln!(report, "sampler: metropolis-hastings, min ESS over draws {lo:.0}, median {med:.0}");
    }
    write_peak_summary(&mut report, "pooled", &peak, &series);

    let anchor = series.first_anchor().map(|a| series.day_of(a));
    if config.sanity && config.model != ModelKind::Basic {
        let mut rng = crate::stream_rng(config.seed, u64::MAX - 4);
        let env = forward_sanity_from_fit(&ref_model, &incidence.bands.median, &ref_fit, config.sanity_reps, &mut rng)?;
        let all_dates: Vec<NaiveDate> = (0..series.len() as i64).map(|d| series.date(d)).collect();
        let table = SanityTable {
            days: all_dates.iter().map(|d| (*d - day0).num_days()).collect(),
            dates: all_dates,
            observed: series.deaths.clone(),
            mean: env.mean.clone(),
            lower: env.lower.clone(),
            median: env.median.clone(),
            upper: env.upper.clone(),
        };
        let p = dir.join("sanity_envelope.csv");
        write_sanity_table(&p, &table)?;
        files.push(p.clone());
        let _ = writeln!(report, "sanity: observed inside the simulated 95% envelope on {:.1}% of days", 100.0 * env.coverage(&series.deaths));
        let svg = dir.join("sanity.svg");
        plot_sanity_table(&p, &svg)?;
        files.push(svg);
    }

    if config.dilate && config.model != ModelKind::Basic {
        let a = anchor.ok_or_else(|| Error::Input("the dilation check needs an anchor".into()))?;
        let mut rng = crate::stream_rng(config.seed, u64::MAX - 5);
        let plain = fit_undilated(&spec, &series, &reference, &settings.fit, 2000, &mut rng)?;
        let dil = refit_dilated(&spec, &series, &reference, a, None, &settings.fit, 2000, &mut rng)?;
        write_peak_summary(&mut report, "undilated reference fit", &plain.peak, &series);
        write_peak_summary(&mut report, "dilated reference fit", &dil.peak, &series);
        let p = dir.join("peak_distribution_dilated.csv");
        write_peak_table(&p, &peak_table(&dil.peak, &series, day0))?;
        files.push(p);
    }

    if config.ifr_adjust && config.model != ModelKind::Basic {
        let start = series.day_of(config.ifr_start);
        if start < 0 {
            return Err(Error::Input("ifr_start precedes the series".into()));
        }
        let (adjusted, _) = ifr_adjust(&series, config.ifr_rate, start as usize)?;
        let mut rng = crate::stream_rng(config.seed, u64::MAX - 6);
        let plain = fit_undilated(&spec, &series, &reference, &settings.fit, 2000, &mut rng)?;
        let adj = fit_undilated(&spec, &adjusted, &reference, &settings.fit, 2000, &mut rng)?;
        write_peak_summary(&mut report, "unadjusted reference fit", &plain.peak, &series);
        write_peak_summary(&mut report, &format!("ifr-adjusted ({} per day from {})", config.ifr_rate, config.ifr_start), &adj.peak, &series);
        let p = dir.join("peak_distribution_ifr.csv");
        write_peak_table(&p, &peak_table(&adj.peak, &series, day0))?;
        files.push(p);
    }

    if config.imputation_demo && config.model != ModelKind::Basic {
        let rep = naive_imputation_demo(&series, &reference, ref_fit.theta, config.imputation_reps, config.seed)?;
        let _ = writeln!(
            report,
            "imputation demo: naive deviance {:.2}, model deviance {:.2}, ratio {:.2}",
            rep.deviance,
            ref_fit.deviance,
            rep.deviance_ratio(ref_fit.deviance)
        );
        let p = dir.join("imputation.csv");
        let mut w = csv::Writer::from_path(&p)?;
        w.write_record(["day", "date", "imputed_infections", "implied_deaths", "observed_deaths"])?;
        for i in 0..series.len() {
            w.write_record([
                days[i].to_string(),
                dates[i].to_string(),
                format!("{}", rep.imputed[i]),
                format!("{}", rep.implied_deaths[i]),
                format!("{}", series.deaths[i]),
            ])?;
        }
        w.flush()?;
        files.push(p);
    }

    let inc_svg = dir.join("incidence.svg");
    let y_label = if config.model == ModelKind::Basic { "deaths per day" } else { "fatal infections per day" };
    plot_band_table(&inc_path, &inc_svg, "fatal incidence", y_label, None, &anchor_days)?;
    let r_svg = dir.join("r.svg");
    plot_band_table(&r_path, &r_svg, "reproduction number", "R", Some(1.0), &anchor_days)?;
    let peak_svg = dir.join("peak_distribution.svg");
    plot_peak_table(&peak_path, &peak_svg, &anchor_days)?;
    files.extend([inc_svg, r_svg, peak_svg]);

    let report_path = dir.join("fit_report.txt");
    fs::write(&report_path, &report)?;
    files.push(report_path);
    let (mode_day, mode_p) = peak.mode();
    Ok(Artifacts { dir, files, report, peak_mode: (series.date(mode_day), mode_p) })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_rows_parse() {
        let s = parse_deaths("date,deaths\n2020-03-01,1\n2020-03-02,4\n2020-03-03,2\n".as_bytes()).unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s.deaths, vec![1.0, 4.0, 2.0]);
    }

    #[test]
    fn gaps_name_the_missing_date() {
        let e = parse_deaths("date,deaths\n2020-03-01,1\n2020-03-03,2\n".as_bytes()).unwrap_err();
        assert!(e.to_string().contains("2020-03-02"), "{e}");
    }

    #[test]
    fn trailing_blank_lines_are_accepted() {
        let s = parse_deaths("date,deaths\n2020-03-01,1\n2020-03-02,4\n\n\n".as_bytes()).unwrap();
        assert_eq!(s.len(), 2);
    }

    #[test]
    fn bad_rows_are_rejected() {
        assert!(parse_deaths("date,deaths\n2020-03-01,1.5\n".as_bytes()).is_err());
        assert!(parse_deaths("date,deaths\n2020-03-01,-1\n".as_bytes()).is_err());
        assert!(parse_deaths("date,deaths\n2020-03-01,1\n2020-03-01,2\n".as_bytes()).is_err());
        assert!(parse_deaths("day,count\n1,2\n".as_bytes()).is_err());
    }

    #[test]
    fn bundled_sample_parses() {
        let s = parse_deaths(SAMPLE_SERIES.as_bytes()).unwrap();
        assert!(s.len() > 100);
    }

    #[test]
    fn config_text_and_overrides() {
        let mut c = RunConfig::default();
        c.apply_text("# run\nmodel = renewal\nanchor = lockdown=2020-03-24\nensemble = 20\ndilate = yes\nday0 = preset\n").unwrap();
        assert_eq!(c.model, ModelKind::Renewal);
        assert_eq!(c.ensemble, 20);
        assert!(c.dilate);
        assert_eq!(c.day0, Some(day0_preset()));
        c.set("anchor", "lockdown=2020-03-23").unwrap();
        assert_eq!(c.anchors, vec![("lockdown".to_string(), NaiveDate::from_ymd_opt(2020, 3, 23).unwrap())]);
        assert!(c.set("colour", "blue").is_err());
        assert!(c.apply_text("model renewal").is_err());
    }

    #[test]
    fn tables_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d0 = NaiveDate::from_ymd_opt(2020, 3, 1).unwrap();
        let bands = Bands {
            q025: vec![1.0, f64::NAN],
            q16: vec![2.0, 2.5],
            median: vec![3.0, 3.25],
            q84: vec![4.0, 4.5],
            q975: vec![5.0, 6.125],
        };
        let t = BandTable { days: vec![-1, 0], dates: vec![d0, d0.succ_opt().unwrap()], bands };
        let p = dir.path().join("b.csv");
        write_band_table(&p, &t).unwrap();
        let back = read_band_table(&p).unwrap();
        assert_eq!(back.days, t.days);
        assert_eq!(back.bands.median, t.bands.median);
        assert!(back.bands.q025[1].is_nan());
        let pk = PeakTable { days: vec![0, 1], dates: t.dates.clone(), probability: vec![0.25, 0.75] };
        let pp = dir.path().join("p.csv");
        write_peak_table(&pp, &pk).unwrap();
        assert_eq!(read_peak_table(&pp).unwrap(), pk);
        let st = SanityTable {
            days: vec![0],
            dates: vec![d0],
            observed: vec![3.0],
            mean: vec![2.5],
            lower: vec![0.0],
            median: vec![2.0],
            upper: vec![7.0],
        };
        let sp = dir.path().join("s.csv");
        write_sanity_table(&sp, &st).unwrap();
        assert_eq!(read_sanity_table(&sp).unwrap(), st);
        plot_band_table(&p, &dir.path().join("b.svg"), "t", "y", Some(1.0), &[0]).unwrap();
        plot_peak_table(&pp, &dir.path().join("p.svg"), &[1]).unwrap();
        plot_sanity_table(&sp, &dir.path().join("s.svg")).unwrap();
    }

    #[test]
    fn duration_sources_parse() {
        assert_eq!("meta".parse::<DurationSource>().unwrap(), DurationSource::Meta);
        assert_eq!("file:x.csv".parse::<DurationSource>().unwrap(), DurationSource::File("x.csv".into()));
        assert!("other".parse::<DurationSource>().is_err());
    }

    fn quick_config(dir: &Path, ensemble: usize) -> RunConfig {
        let mut c = RunConfig { output: dir.to_path_buf(), ensemble, k: 15, samples_per_draw: 100, sanity_reps: 30, ..RunConfig::default() };
        c.set("seed", "7").unwrap();
        c
    }

    #[test]
    fn pipeline_writes_artifacts_and_is_deterministic() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ra = run_pipeline(&quick_config(a.path(), 3)).unwrap();
        let rb = run_pipeline(&quick_config(b.path(), 3)).unwrap();
        for name in ["incidence.csv", "r.csv", "peak_distribution.csv", "sanity_envelope.csv", "fit_report.txt", "incidence.svg", "r.svg", "peak_distribution.svg"] {
            let fa = fs::read(a.path().join(name)).unwrap();
            assert!(!fa.is_empty(), "{name}");
            if !name.ends_with(".svg") {
                assert_eq!(fa, fs::read(b.path().join(name)).unwrap(), "{name} differs between identical runs");
            }
        }
        assert_eq!(ra.peak_mode, rb.peak_mode);
        assert!(ra.report.contains("theta"));
        let svg = fs::read_to_string(a.path().join("incidence.svg")).unwrap();
        assert!(svg.contains("<svg"));
    }

    #[test]
    fn bands_widen_with_duration_uncertainty() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        run_pipeline(&quick_config(a.path(), 1)).unwrap();
        run_pipeline(&quick_config(b.path(), 100)).unwrap();
        let one = read_band_table(&a.path().join("incidence.csv")).unwrap().bands;
        let many = read_band_table(&b.path().join("incidence.csv")).unwrap().bands;
        let wider = (0..one.len()).filter(|&i| many.q975[i] - many.q025[i] >= one.q975[i] - one.q025[i]).count();
        assert!(wider as f64 >= 0.9 * one.len() as f64, "{wider} of {}", one.len());
    }

    #[test]
    fn extreme_scenario_report_names_the_peak() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = quick_config(dir.path(), 1);
        c.input = InputSource::Extreme;
        c.dilate = true;
        let art = run_pipeline(&c).unwrap();
        assert!(art.report.contains("peak mode"), "{}", art.report);
        assert!(art.report.contains("dilated reference fit"));
        assert!(art.peak_mode.1 > 0.0 && art.peak_mode.1 <= 1.0);
    }

    #[test]
    fn duration_and_pcr_tables_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let e = duration_ensemble(5, 3).unwrap();
        let p = dir.path().join("d.csv");
        write_duration_draws(&p, &e).unwrap();
        let back = read_duration_draws(&p).unwrap();
        assert_eq!(back.draws, e.draws);
        assert_eq!(back.mean_dist, e.mean_dist);

        let t = PcrTable::new(Some(&[0.5, 0.25]), vec![3, 4], 400);
        let q = dir.path().join("pcr.csv");
        write_pcr_table(&q, &t).unwrap();
        let r = read_pcr_table(&q).unwrap();
        assert_eq!(r.positives, t.positives);
        assert_eq!(r.truth, t.truth);
        assert!(r.fitted.iter().all(|v| v.is_nan()));
        plot_pcr_table(&q, &dir.path().join("pcr.svg")).unwrap();
    }
}
