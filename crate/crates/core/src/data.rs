//! Price data: CSV ingestion/export and seeded synthetic series.
//!
//! A [`PriceSeries`] holds one wide table of daily levels. Column 0 is the
//! risky asset, the next `l` columns are the hedging strategy NAVs, and any
//! remaining columns are raw context features (which may be negative).

use std::io::{Read, Write};
use std::path::Path;

use chrono::{Datelike, Duration, NaiveDate, Weekday};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Daily levels for the risky asset, the hedging strategies and context features.
#[derive(Debug, Clone, PartialEq)]
pub struct PriceSeries {
    dates: Vec<NaiveDate>,
    names: Vec<String>,
    /// Column-major storage: `columns[c][t]`.
    columns: Vec<Vec<f64>>,
    strategies: usize,
}

impl PriceSeries {
    /// Builds a series and checks every invariant.
    ///
    /// `columns[0]` is the risky asset, `columns[1..=strategies]` the strategies.
    pub fn new(
        dates: Vec<NaiveDate>,
        names: Vec<String>,
        columns: Vec<Vec<f64>>,
        strategies: usize,
    ) -> Result<Self> {
        if names.len() != columns.len() {
            return Err(invalid(format!(
                "{} names for {} columns",
                names.len(),
                columns.len()
            )));
        }
        if columns.len() < 1 + strategies {
            return Err(invalid(format!(
                "need a risky column and {strategies} strategy columns, got {} columns",
                columns.len()
            )));
        }
        if dates.is_empty() {
            return Err(invalid("empty series"));
        }
        for w in dates.windows(2) {
            if w[1] == w[0] {
                return Err(invalid(format!("duplicate date {}", w[0])));
            }
            if w[1] < w[0] {
                return Err(invalid(format!("dates not increasing at {}", w[1])));
            }
        }
        for (c, col) in columns.iter().enumerate() {
            if col.len() != dates.len() {
                return Err(invalid(format!(
                    "column `{}` has {} values, expected {}",
                    names[c],
                    col.len(),
                    dates.len()
                )));
            }
            for (t, &v) in col.iter().enumerate() {
                if !v.is_finite() {
                    return Err(invalid(format!("non-finite value in `{}` at row {t}", names[c])));
                }
                if c <= strategies && v <= 0.0 {
                    return Err(invalid(format!(
                        "non-positive level {v} in `{}` at row {t}",
                        names[c]
                    )));
                }
            }
        }
        Ok(Self {
            dates,
            names,
            columns,
            strategies,
        })
    }

    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Number of hedging strategies `l`.
    pub fn n_strategies(&self) -> usize {
        self.strategies
    }

    /// Number of raw context features `p`.
    pub fn n_context(&self) -> usize {
        self.columns.len() - 1 - self.strategies
    }

    pub fn risky(&self) -> &[f64] {
        &self.columns[0]
    }

    pub fn strategy(&self, i: usize) -> &[f64] {
        &self.columns[1 + i]
    }

    pub fn context(&self, i: usize) -> &[f64] {
        &self.columns[1 + self.strategies + i]
    }

    pub fn column(&self, c: usize) -> &[f64] {
        &self.columns[c]
    }

    pub fn n_columns(&self) -> usize {
        self.columns.len()
    }

    /// Simple return of column `c` from row `t - 1` to row `t`.
    pub(crate) fn column_return(&self, c: usize, t: usize) -> f64 {
        let col = &self.columns[c];
        col[t] / col[t - 1] - 1.0
    }

    /// Keeps rows `0..=last`. Used to hand a fitting routine nothing past its train end.
    pub fn truncate_to(&self, last: usize) -> Result<Self> {
        if last >= self.len() {
            return Err(Error::OutOfRange(format!(
                "row {last} beyond series of length {}",
                self.len()
            )));
        }
        Ok(Self {
            dates: self.dates[..=last].to_vec(),
            names: self.names.clone(),
            columns: self.columns.iter().map(|c| c[..=last].to_vec()).collect(),
            strategies: self.strategies,
        })
    }

    /// Keeps rows `first..=last`.
    pub fn slice(&self, first: usize, last: usize) -> Result<Self> {
        if first > last || last >= self.len() {
            return Err(Error::OutOfRange(format!(
                "rows {first}..={last} in series of length {}",
                self.len()
            )));
        }
        Ok(Self {
            dates: self.dates[first..=last].to_vec(),
            names: self.names.clone(),
            columns: self
                .columns
                .iter()
                .map(|c| c[first..=last].to_vec())
                .collect(),
            strategies: self.strategies,
        })
    }

    /// Returns a copy with `f(column, row, value)` applied to every cell,
    /// re-validating the result.
    pub fn map_values(&self, mut f: impl FnMut(usize, usize, f64) -> f64) -> Result<Self> {
        let columns = self
            .columns
            .iter()
            .enumerate()
            .map(|(c, col)| col.iter().enumerate().map(|(t, &v)| f(c, t, v)).collect())
            .collect();
        Self::new(
            self.dates.clone(),
            self.names.clone(),
            columns,
            self.strategies,
        )
    }

    /// Row index of the last date `<= date`, if any.
    pub fn last_row_on_or_before(&self, date: NaiveDate) -> Option<usize> {
        match self.dates.binary_search(&date) {
            Ok(i) => Some(i),
            Err(0) => None,
            Err(i) => Some(i - 1),
        }
    }
}

/// Reads a wide CSV file: `date,<risky>,<strategy 1..l>,<context 1..p>`.
pub fn load_csv(path: impl AsRef<Path>, strategies: usize) -> Result<PriceSeries> {
    let file = std::fs::File::open(path.as_ref())?;
    read_csv(file, strategies)
}

pub fn read_csv<R: Read>(reader: R, strategies: usize) -> Result<PriceSeries> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.len() < 2 {
        return Err(Error::Parse {
            line: 1,
            msg: "header needs a date column and at least one series".into(),
        });
    }
    let names: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    let mut rows: Vec<(NaiveDate, Vec<f64>, usize)> = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| Error::Parse {
            line,
            msg: e.to_string(),
        })?;
        if record.len() != headers.len() {
            return Err(Error::Parse {
                line,
                msg: format!("expected {} fields, got {}", headers.len(), record.len()),
            });
        }
        let date = NaiveDate::parse_from_str(&record[0], "%Y-%m-%d").map_err(|e| Error::Parse {
            line,
            msg: format!("bad date `{}`: {e}", &record[0]),
        })?;
        let mut values = Vec::with_capacity(names.len());
        for (c, field) in record.iter().skip(1).enumerate() {
            if field.is_empty() {
                return Err(Error::Parse {
                    line,
                    msg: format!("missing value for `{}`", names[c]),
                });
            }
            let v: f64 = field.parse().map_err(|_| Error::Parse {
                line,
                msg: format!("bad number `{field}` for `{}`", names[c]),
            })?;
            if c <= strategies && v <= 0.0 {
                return Err(invalid(format!(
                    "non-positive level {v} for `{}` at line {line}",
                    names[c]
                )));
            }
            values.push(v);
        }
        rows.push((date, values, line));
    }
    rows.sort_by_key(|r| r.0);
    for w in rows.windows(2) {
        if w[0].0 == w[1].0 {
            return Err(invalid(format!(
                "duplicate date {} at line {}",
                w[1].0,
                w[0].2.max(w[1].2)
            )));
        }
    }
    let dates = rows.iter().map(|r| r.0).collect();
    let columns = (0..names.len())
        .map(|c| rows.iter().map(|r| r.1[c]).collect())
        .collect();
    PriceSeries::new(dates, names, columns, strategies)
}

pub fn write_csv(series: &PriceSeries, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path.as_ref())?;
    write_csv_to(series, file)
}

pub fn write_csv_to<W: Write>(series: &PriceSeries, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["date".to_string()];
    header.extend(series.names().iter().cloned());
    w.write_record(&header)?;
    for t in 0..series.len() {
        let mut rec = vec![series.dates()[t].format("%Y-%m-%d").to_string()];
        rec.extend((0..series.n_columns()).map(|c| series.column(c)[t].to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// `n` consecutive weekdays starting at `start` (rolled forward off a weekend).
pub fn business_days(start: NaiveDate, n: usize) -> Vec<NaiveDate> {
    let mut out = Vec::with_capacity(n);
    let mut d = start;
    while out.len() < n {
        if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
            out.push(d);
        }
        d += Duration::days(1);
    }
    out
}

/// Every weekday in `[start, end]`.
pub fn business_days_between(start: NaiveDate, end: NaiveDate) -> Vec<NaiveDate> {
    let mut out = Vec::new();
    let mut d = start;
    while d <= end {
        if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
            out.push(d);
        }
        d += Duration::days(1);
    }
    out
}

/// A stretch of days with constant per-day drift and volatility.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub length: usize,
    pub drift: f64,
    pub vol: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssetPath {
    pub name: String,
    pub segments: Vec<Segment>,
}

/// Piecewise-stationary random-walk description of every column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeSpec {
    pub start: NaiveDate,
    /// How many columns after the risky asset are strategies.
    pub strategies: usize,
    pub assets: Vec<AssetPath>,
    pub seed: u64,
}

impl RegimeSpec {
    pub fn validate(&self) -> Result<usize> {
        if self.assets.is_empty() {
            return Err(invalid("regime spec has no assets"));
        }
        let mut total = None;
        for a in &self.assets {
            if a.segments.is_empty() {
                return Err(invalid(format!("asset `{}` has no segments", a.name)));
            }
            for s in &a.segments {
                if s.length == 0 {
                    return Err(invalid(format!("asset `{}` has a zero-length segment", a.name)));
                }
                if !(s.vol >= 0.0) || !s.drift.is_finite() || !s.vol.is_finite() {
                    return Err(invalid(format!("asset `{}` has invalid drift/vol", a.name)));
                }
            }
            let len: usize = a.segments.iter().map(|s| s.length).sum();
            match total {
                None => total = Some(len),
                Some(t) if t != len => {
                    return Err(invalid(format!(
                        "asset `{}` spans {len} days, others span {t}",
                        a.name
                    )))
                }
                _ => {}
            }
        }
        Ok(total.unwrap_or(0))
    }
}

/// Random-walk levels starting at 100: `p[i] = p[i-1] * (1 + drift + vol * z)`.
///
/// Day `i` draws its parameters from the segment covering index `i`. One normal
/// draw is consumed per asset-day even when `vol == 0`, so the stream stays aligned.
pub fn synthesize(spec: &RegimeSpec) -> Result<PriceSeries> {
    let n = spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut columns = Vec::with_capacity(spec.assets.len());
    for asset in &spec.assets {
        let mut params = Vec::with_capacity(n);
        for s in &asset.segments {
            params.extend(std::iter::repeat_n((s.drift, s.vol), s.length));
        }
        let mut levels = Vec::with_capacity(n);
        levels.push(100.0);
        for &(drift, vol) in &params[1..] {
            let z: f64 = StandardNormal.sample(&mut rng);
            let factor = 1.0 + drift + vol * z;
            if factor <= 0.0 {
                return Err(invalid(format!(
                    "asset `{}`: drift/vol produce a non-positive level",
                    asset.name
                )));
            }
            let prev = *levels.last().unwrap();
            levels.push(prev * factor);
        }
        columns.push(levels);
    }
    PriceSeries::new(
        business_days(spec.start, n),
        spec.assets.iter().map(|a| a.name.clone()).collect(),
        columns,
        spec.strategies,
    )
}
