//! Region tables and station time series: CSV loading, validation, hourly
//! resampling, chronological splitting, and a seeded synthetic generator.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use chrono::{DateTime, NaiveDateTime, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Lowest observed charging price, CNY/kWh.
pub const PRICE_MIN: f64 = 0.54;
/// Highest observed charging price, CNY/kWh.
pub const PRICE_MAX: f64 = 1.47;
/// Mean daytime price, CNY/kWh.
pub const DAY_PRICE: f64 = 0.99;
/// Mean nighttime price, CNY/kWh.
pub const NIGHT_PRICE: f64 = 0.93;

pub const RAW_STEP_SECS: i64 = 300;
pub const HOUR_SECS: i64 = 3600;

const REGIONS_HEADER: [&str; 4] = ["region_id", "lon", "lat", "pile_count"];

#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub region_id: i64,
    pub lon: f64,
    pub lat: f64,
    pub pile_count: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionTable {
    regions: Vec<Region>,
}

impl RegionTable {
    /// Builds a table, rejecting duplicate region ids.
    pub fn new(regions: Vec<Region>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(regions.len());
        for r in &regions {
            if !seen.insert(r.region_id) {
                return Err(Error::Validation(format!("duplicate region_id {}", r.region_id)));
            }
            if !(r.lon.is_finite() && r.lat.is_finite()) {
                return Err(Error::Validation(format!(
                    "region {} has a non-finite centroid",
                    r.region_id
                )));
            }
        }
        Ok(Self { regions })
    }

    pub fn regions(&self) -> &[Region] {
        &self.regions
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn get(&self, region_id: i64) -> Option<&Region> {
        self.regions.iter().find(|r| r.region_id == region_id)
    }

    pub fn total_piles(&self) -> u64 {
        self.regions.iter().map(|r| u64::from(r.pile_count)).sum()
    }

    pub fn nonempty_count(&self) -> usize {
        self.regions.iter().filter(|r| r.pile_count > 0).count()
    }
}

/// Reads `region_id,lon,lat,pile_count`.
pub fn load_regions(path: impl AsRef<Path>) -> Result<RegionTable> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);

    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    if headers.iter().collect::<Vec<_>>() != REGIONS_HEADER {
        return Err(Error::Schema {
            path: path.into(),
            line: 1,
            message: format!("expected header `{}`", REGIONS_HEADER.join(",")),
        });
    }

    let mut regions = Vec::new();
    let mut seen = HashSet::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let field = |i: usize| record.get(i).unwrap_or("");
        let schema = |message: String| Error::Schema {
            path: path.into(),
            line,
            message,
        };

        let region_id: i64 = field(0)
            .parse()
            .map_err(|_| schema(format!("bad region_id `{}`", field(0))))?;
        let lon: f64 = field(1)
            .parse()
            .map_err(|_| schema(format!("bad lon `{}`", field(1))))?;
        let lat: f64 = field(2)
            .parse()
            .map_err(|_| schema(format!("bad lat `{}`", field(2))))?;
        let piles: i64 = field(3)
            .parse()
            .map_err(|_| schema(format!("bad pile_count `{}`", field(3))))?;

        if piles < 0 {
            return Err(Error::Validation(format!(
                "{}: line {line}: region {region_id} has negative pile_count {piles}",
                path.display()
            )));
        }
        let pile_count = u32::try_from(piles)
            .map_err(|_| Error::Validation(format!("{}: line {line}: pile_count too large", path.display())))?;
        if !seen.insert(region_id) {
            return Err(schema(format!("duplicate region_id {region_id}")));
        }
        regions.push(Region {
            region_id,
            lon,
            lat,
            pile_count,
        });
    }

    let table = RegionTable::new(regions)?;
    if table.nonempty_count() == 0 {
        return Err(Error::Validation(format!(
            "{}: no region holds a charging pile",
            path.display()
        )));
    }
    Ok(table)
}

pub fn save_regions(table: &RegionTable, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = create(path)?;
    let mut write = || -> std::io::Result<()> {
        writeln!(out, "{}", REGIONS_HEADER.join(","))?;
        for r in table.regions() {
            writeln!(out, "{},{},{},{}", r.region_id, r.lon, r.lat, r.pile_count)?;
        }
        out.flush()
    };
    write().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeriesKind {
    /// Occupied piles per station.
    Occupancy,
    /// Charging price in CNY/kWh.
    Price,
}

/// Per-station values on a uniform time grid. Rows are timesteps, columns
/// are stations.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesFrame {
    kind: SeriesKind,
    step_secs: i64,
    time_index: Vec<i64>,
    station_ids: Vec<i64>,
    values: Matrix,
}

impl TimeSeriesFrame {
    pub fn new(
        kind: SeriesKind,
        step_secs: i64,
        time_index: Vec<i64>,
        station_ids: Vec<i64>,
        values: Matrix,
    ) -> Result<Self> {
        if step_secs <= 0 {
            return Err(Error::Argument(format!("step must be positive, got {step_secs}")));
        }
        if values.rows() != time_index.len() || values.cols() != station_ids.len() {
            return Err(Error::Argument(format!(
                "values are {}x{} but index is {}x{}",
                values.rows(),
                values.cols(),
                time_index.len(),
                station_ids.len()
            )));
        }
        if let Some(k) = time_index.windows(2).position(|w| w[1] - w[0] != step_secs) {
            return Err(Error::Validation(format!(
                "non-uniform spacing between rows {k} and {}",
                k + 1
            )));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = station_ids.iter().find(|id| !seen.insert(**id)) {
            return Err(Error::Validation(format!("duplicate station column {dup}")));
        }
        for (k, &v) in values.as_slice().iter().enumerate() {
            let bad = match kind {
                SeriesKind::Occupancy => !(v.is_finite() && v >= 0.0),
                SeriesKind::Price => !(v.is_finite() && (PRICE_MIN..=PRICE_MAX).contains(&v)),
            };
            if bad {
                return Err(Error::Validation(format!(
                    "{kind:?} value {v} at row {}, column {} out of range",
                    k / values.cols().max(1),
                    k % values.cols().max(1)
                )));
            }
        }
        Ok(Self {
            kind,
            step_secs,
            time_index,
            station_ids,
            values,
        })
    }

    pub fn kind(&self) -> SeriesKind {
        self.kind
    }

    pub fn step_secs(&self) -> i64 {
        self.step_secs
    }

    pub fn time_index(&self) -> &[i64] {
        &self.time_index
    }

    pub fn station_ids(&self) -> &[i64] {
        &self.station_ids
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.time_index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.time_index.is_empty()
    }

    pub fn n_stations(&self) -> usize {
        self.station_ids.len()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        self.values.row(t)
    }

    /// Rows `[start, end)` as a new frame.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        let n = self.n_stations();
        let data = self.values.as_slice()[start * n..end * n].to_vec();
        Self {
            kind: self.kind,
            step_secs: self.step_secs,
            time_index: self.time_index[start..end].to_vec(),
            station_ids: self.station_ids.clone(),
            values: Matrix::from_vec(end - start, n, data).expect("slice shape"),
        }
    }

    /// Reorders (and subsets) columns to follow `ids`.
    pub fn select_stations(&self, ids: &[i64]) -> Result<Self> {
        let cols = ids
            .iter()
            .map(|id| {
                self.station_ids
                    .iter()
                    .position(|s| s == id)
                    .ok_or_else(|| Error::Validation(format!("{:?} frame has no column {id}", self.kind)))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut values = Matrix::zeros(self.len(), ids.len());
        for t in 0..self.len() {
            for (k, &c) in cols.iter().enumerate() {
                values.set(t, k, self.values.get(t, c));
            }
        }
        Ok(Self {
            kind: self.kind,
            step_secs: self.step_secs,
            time_index: self.time_index.clone(),
            station_ids: ids.to_vec(),
            values,
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LoadReport {
    /// Price cells pulled back into the observed band.
    pub clamped: usize,
}

/// Loads a raw 5-minute wide CSV.
pub fn load_series(path: impl AsRef<Path>, kind: SeriesKind) -> Result<(TimeSeriesFrame, LoadReport)> {
    load_series_with_step(path, kind, RAW_STEP_SECS)
}

/// Loads a wide CSV `time,<id1>,<id2>,...` whose rows must be exactly
/// `step_secs` apart.
pub fn load_series_with_step(
    path: impl AsRef<Path>,
    kind: SeriesKind,
    step_secs: i64,
) -> Result<(TimeSeriesFrame, LoadReport)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);

    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let schema = |line: usize, message: String| Error::Schema {
        path: path.into(),
        line,
        message,
    };
    if headers.get(0) != Some("time") {
        return Err(schema(1, "first column must be `time`".into()));
    }
    let station_ids = headers
        .iter()
        .skip(1)
        .map(|h| h.parse::<i64>().map_err(|_| schema(1, format!("bad station id `{h}`"))))
        .collect::<Result<Vec<_>>>()?;
    if station_ids.is_empty() {
        return Err(schema(1, "no station columns".into()));
    }

    let mut time_index = Vec::new();
    let mut data = Vec::new();
    let mut report = LoadReport::default();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let ts = parse_timestamp(record.get(0).unwrap_or(""))
            .ok_or_else(|| schema(line, format!("bad timestamp `{}`", record.get(0).unwrap_or(""))))?;
        if let Some(&prev) = time_index.last() {
            if ts - prev != step_secs {
                return Err(Error::Format {
                    path: path.into(),
                    line,
                    message: format!("expected a {step_secs} s step, found {} s", ts - prev),
                });
            }
        }
        time_index.push(ts);
        for field in record.iter().skip(1) {
            let mut v: f64 = field
                .parse()
                .map_err(|_| schema(line, format!("bad value `{field}`")))?;
            if kind == SeriesKind::Price && v.is_finite() && !(PRICE_MIN..=PRICE_MAX).contains(&v) {
                v = v.clamp(PRICE_MIN, PRICE_MAX);
                report.clamped += 1;
            }
            data.push(v);
        }
    }
    if report.clamped > 0 {
        log::warn!(
            "{}: clamped {} price values into [{PRICE_MIN}, {PRICE_MAX}]",
            path.display(),
            report.clamped
        );
    }

    let values = Matrix::from_vec(time_index.len(), station_ids.len(), data)?;
    let frame = TimeSeriesFrame::new(kind, step_secs, time_index, station_ids, values).map_err(|e| match e {
        Error::Validation(m) => Error::Validation(format!("{}: {m}", path.display())),
        other => other,
    })?;
    Ok((frame, report))
}

pub fn save_series(frame: &TimeSeriesFrame, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = create(path)?;
    let mut write = || -> std::io::Result<()> {
        write!(out, "time")?;
        for id in frame.station_ids() {
            write!(out, ",{id}")?;
        }
        writeln!(out)?;
        for (t, &ts) in frame.time_index().iter().enumerate() {
            write!(out, "{}", format_timestamp(ts))?;
            for v in frame.row(t) {
                // Shortest representation that parses back to the same bits.
                write!(out, ",{v}")?;
            }
            writeln!(out)?;
        }
        out.flush()
    };
    write().map_err(|e| Error::io(path, e))
}

/// Averages consecutive samples into one-hour buckets. A trailing partial
/// hour is dropped.
pub fn aggregate_hourly(frame: &TimeSeriesFrame) -> Result<TimeSeriesFrame> {
    let step = frame.step_secs();
    if HOUR_SECS % step != 0 {
        return Err(Error::Argument(format!("step of {step} s does not divide one hour")));
    }
    let per_hour = (HOUR_SECS / step) as usize;
    let hours = frame.len() / per_hour;
    if hours == 0 {
        return Err(Error::EmptyOutput(format!(
            "{} samples of {step} s cover less than one hour",
            frame.len()
        )));
    }

    let n = frame.n_stations();
    let mut values = Matrix::zeros(hours, n);
    let mut time_index = Vec::with_capacity(hours);
    for h in 0..hours {
        time_index.push(frame.time_index()[h * per_hour]);
        let out = values.row_mut(h);
        for k in 0..per_hour {
            for (o, v) in out.iter_mut().zip(frame.row(h * per_hour + k)) {
                *o += v;
            }
        }
        for o in out.iter_mut() {
            *o /= per_hour as f64;
        }
    }
    TimeSeriesFrame::new(
        frame.kind(),
        HOUR_SECS,
        time_index,
        frame.station_ids().to_vec(),
        values,
    )
}

/// Occupancy and price on a shared grid, plus the region geography they
/// belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub occupancy: TimeSeriesFrame,
    pub price: TimeSeriesFrame,
    pub regions: RegionTable,
    /// First timestamp of the held-out range, when one has been designated.
    pub split_point: Option<i64>,
}

impl DatasetBundle {
    pub fn new(occupancy: TimeSeriesFrame, price: TimeSeriesFrame, regions: RegionTable) -> Result<Self> {
        if occupancy.kind() != SeriesKind::Occupancy || price.kind() != SeriesKind::Price {
            return Err(Error::Argument("frames passed in the wrong order".into()));
        }
        if occupancy.time_index() != price.time_index() || occupancy.step_secs() != price.step_secs() {
            return Err(Error::Validation("occupancy and price time indices differ".into()));
        }
        if occupancy.station_ids() != price.station_ids() {
            return Err(Error::Validation("occupancy and price station columns differ".into()));
        }
        for (c, id) in occupancy.station_ids().iter().enumerate() {
            let region = regions
                .get(*id)
                .ok_or_else(|| Error::Validation(format!("station {id} is not in the region table")))?;
            let cap = f64::from(region.pile_count);
            for t in 0..occupancy.len() {
                let v = occupancy.values().get(t, c);
                if v > cap {
                    return Err(Error::Validation(format!(
                        "occupancy {v} at row {t} exceeds the {cap} piles of station {id}"
                    )));
                }
            }
        }
        Ok(Self {
            occupancy,
            price,
            regions,
            split_point: None,
        })
    }

    pub fn with_split_point(mut self, ts: i64) -> Result<Self> {
        let idx = self.occupancy.time_index();
        match (idx.first(), idx.last()) {
            (Some(&lo), Some(&hi)) if lo < ts && ts <= hi => {
                self.split_point = Some(ts);
                Ok(self)
            }
            _ => Err(Error::Argument(format!(
                "split point {ts} is not inside the time range"
            ))),
        }
    }

    pub fn n_steps(&self) -> usize {
        self.occupancy.len()
    }

    pub fn station_ids(&self) -> &[i64] {
        self.occupancy.station_ids()
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        Self {
            occupancy: self.occupancy.slice_rows(start, end),
            price: self.price.slice_rows(start, end),
            regions: self.regions.clone(),
            split_point: None,
        }
    }

    /// Reorders both frames' columns to follow `ids`.
    pub fn select_stations(&self, ids: &[i64]) -> Result<Self> {
        Ok(Self {
            occupancy: self.occupancy.select_stations(ids)?,
            price: self.price.select_stations(ids)?,
            regions: self.regions.clone(),
            split_point: self.split_point,
        })
    }
}

/// Chronological split at `floor(T * train_fraction)`.
pub fn split_train_test(bundle: &DatasetBundle, train_fraction: f64) -> Result<(DatasetBundle, DatasetBundle)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Argument(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let t = bundle.n_steps();
    let cut = (t as f64 * train_fraction).floor() as usize;
    if cut == 0 || cut >= t {
        return Err(Error::Argument(format!(
            "fraction {train_fraction} of {t} rows leaves one side empty"
        )));
    }
    Ok((bundle.slice_rows(0, cut), bundle.slice_rows(cut, t)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticConfig {
    pub n_regions: usize,
    pub n_hours: usize,
    pub seed: u64,
    /// Probability that a region holds no piles before the 60 % floor on
    /// pile-bearing regions is enforced.
    pub empty_probability: f64,
}

impl SyntheticConfig {
    pub fn new(n_regions: usize, n_hours: usize, seed: u64) -> Self {
        Self {
            n_regions,
            n_hours,
            seed,
            empty_probability: 0.25,
        }
    }
}

/// 2024-06-19T00:00:00Z
const SYNTHETIC_START: i64 = 1_718_755_200;

pub fn generate_synthetic(n_regions: usize, n_hours: usize, seed: u64) -> Result<DatasetBundle> {
    generate_synthetic_with(&SyntheticConfig::new(n_regions, n_hours, seed))
}

/// Hourly bundle on a jittered grid of regions with a daily sinusoidal
/// occupancy profile and a day/night price step.
pub fn generate_synthetic_with(cfg: &SyntheticConfig) -> Result<DatasetBundle> {
    if cfg.n_regions < 2 {
        return Err(Error::Argument(format!(
            "need at least 2 regions, got {}",
            cfg.n_regions
        )));
    }
    if cfg.n_hours < 24 {
        return Err(Error::Argument(format!("need at least 24 hours, got {}", cfg.n_hours)));
    }
    if !(0.0..=1.0).contains(&cfg.empty_probability) {
        return Err(Error::Argument("empty_probability must lie in [0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.n_regions;

    let grid = (n as f64).sqrt().ceil() as usize;
    let spacing = 0.02;
    let mut empty: Vec<bool> = (0..n).map(|_| rng.gen::<f64>() < cfg.empty_probability).collect();
    let min_nonempty = (0.6 * n as f64).ceil() as usize;
    while empty.iter().filter(|e| !**e).count() < min_nonempty {
        let k = rng.gen_range(0..n);
        empty[k] = false;
    }
    let regions = (0..n)
        .map(|k| Region {
            region_id: k as i64 + 1,
            lon: 113.9 + (k % grid) as f64 * spacing + rng.gen_range(-0.25..0.25) * spacing,
            lat: 22.5 + (k / grid) as f64 * spacing + rng.gen_range(-0.25..0.25) * spacing,
            pile_count: if empty[k] { 0 } else { rng.gen_range(1..=30) },
        })
        .collect::<Vec<_>>();

    let stations: Vec<&Region> = regions.iter().filter(|r| r.pile_count > 0).collect();
    let station_ids: Vec<i64> = stations.iter().map(|r| r.region_id).collect();
    let m = stations.len();

    struct Profile {
        base: f64,
        amplitude: f64,
        phase: f64,
        price_offset: f64,
    }
    let profiles: Vec<Profile> = (0..m)
        .map(|_| Profile {
            base: rng.gen_range(0.15..0.8),
            amplitude: rng.gen_range(0.1..0.25),
            phase: rng.gen_range(0.0..24.0),
            price_offset: rng.gen_range(-0.08..0.08),
        })
        .collect();

    let time_index: Vec<i64> = (0..cfg.n_hours)
        .map(|h| SYNTHETIC_START + h as i64 * HOUR_SECS)
        .collect();
    let mut occupancy = Matrix::zeros(cfg.n_hours, m);
    let mut price = Matrix::zeros(cfg.n_hours, m);
    for h in 0..cfg.n_hours {
        let hour_of_day = (h % 24) as f64;
        let daytime = (7.0..23.0).contains(&hour_of_day);
        for (i, (p, st)) in profiles.iter().zip(&stations).enumerate() {
            let wave = (2.0 * PI * (hour_of_day - p.phase) / 24.0).sin();
            let util = (p.base + p.amplitude * wave + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0);
            let cap = f64::from(st.pile_count);
            occupancy.set(h, i, (util * cap).clamp(0.0, cap));

            let level = if daytime { DAY_PRICE } else { NIGHT_PRICE };
            let pr = level + p.price_offset + rng.gen_range(-0.02..0.02);
            price.set(h, i, pr.clamp(PRICE_MIN, PRICE_MAX));
        }
    }

    let occupancy = TimeSeriesFrame::new(
        SeriesKind::Occupancy,
        HOUR_SECS,
        time_index.clone(),
        station_ids.clone(),
        occupancy,
    )?;
    let price = TimeSeriesFrame::new(SeriesKind::Price, HOUR_SECS, time_index.clone(), station_ids, price)?;
    let split = time_index[(cfg.n_hours as f64 * 0.8).floor() as usize];
    DatasetBundle::new(occupancy, price, RegionTable::new(regions)?)?.with_split_point(split)
}

/// Accepts RFC 3339 timestamps as well as naive `YYYY-MM-DD HH:MM:SS`
/// (optionally with `T`), which are read as UTC.
pub fn parse_timestamp(s: &str) -> Option<i64> {
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.timestamp());
    }
    ["%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M"]
        .iter()
        .find_map(|fmt| NaiveDateTime::parse_from_str(s, fmt).ok())
        .map(|dt| dt.and_utc().timestamp())
}

pub fn format_timestamp(ts: i64) -> String {
    DateTime::<Utc>::from_timestamp(ts, 0)
        .map(|dt| dt.format("%Y-%m-%dT%H:%M:%SZ").to_string())
        .unwrap_or_else(|| ts.to_string())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Schema {
            path: path.into(),
            line,
            message: format!("{other:?}"),
        },
    }
}
