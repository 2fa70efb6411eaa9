//! Observation construction: lagged strategy returns and rolling volatilities,
//! plus a lagged context matrix.
//!
//! The context matrix has the `p` raw features followed by three derived rows:
//! the minimum strategy return, the maximum strategy return and the maximum
//! strategy volatility, each sampled at the context lags.
//!
//! Every entry is standardized with train-window statistics: context features
//! per column, returns by their pooled std, volatilities by their pooled mean
//! and std.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::PriceSeries;
use crate::error::{invalid, Error, Result};

/// Number of derived context rows appended after the raw features.
pub const DERIVED_CONTEXT_ROWS: usize = 3;

/// Ordered day offsets at which past values are sampled. Must contain 0.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct LagSet(Vec<usize>);

impl LagSet {
    pub fn new(lags: Vec<usize>) -> Result<Self> {
        if lags.is_empty() {
            return Err(invalid("empty lag set"));
        }
        if !lags.contains(&0) {
            return Err(invalid(format!("lag set {lags:?} must contain 0")));
        }
        let increasing = lags.windows(2).all(|w| w[0] < w[1]);
        let decreasing = lags.windows(2).all(|w| w[0] > w[1]);
        if !(increasing || decreasing) {
            return Err(invalid(format!(
                "lag set {lags:?} must be strictly monotone without duplicates"
            )));
        }
        Ok(Self(lags))
    }

    pub fn lags(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn max(&self) -> usize {
        self.0.iter().copied().max().unwrap_or(0)
    }
}

impl Default for LagSet {
    fn default() -> Self {
        Self(vec![60, 20, 4, 3, 2, 1, 0])
    }
}

impl TryFrom<Vec<usize>> for LagSet {
    type Error = Error;
    fn try_from(v: Vec<usize>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<LagSet> for Vec<usize> {
    fn from(l: LagSet) -> Self {
        l.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub asset_lags: LagSet,
    pub context_lags: LagSet,
    /// Rolling volatility window `d`, in days.
    pub vol_window: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            asset_lags: LagSet::default(),
            context_lags: LagSet::default(),
            vol_window: 20,
        }
    }
}

impl FeatureConfig {
    /// First row at which a full observation can be built.
    pub fn first_valid_row(&self) -> usize {
        self.asset_lags.max().max(self.context_lags.max()) + self.vol_window
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

/// Augmented observation `[A1, A2, C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    /// `[m strategies x j lags]` simple returns.
    pub returns: Matrix,
    /// `[m x j]` rolling per-day standard deviations.
    pub vols: Matrix,
    /// `[(p + 3) x j_c]` context matrix.
    pub context: Matrix,
}

impl Observation {
    /// Adds i.i.d. Gaussian noise to every entry of every layer.
    pub fn add_noise<R: Rng + ?Sized>(&mut self, rng: &mut R, std: f64) {
        if std <= 0.0 {
            return;
        }
        let normal = Normal::new(0.0, std).expect("finite positive std");
        for m in [&mut self.returns, &mut self.vols, &mut self.context] {
            for v in m.as_mut_slice() {
                *v += normal.sample(rng);
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        [&self.returns, &self.vols, &self.context]
            .iter()
            .all(|m| m.as_slice().iter().all(|v| v.is_finite()))
    }
}

/// Simple return `p[t] / p[t-1] - 1` of column `col`.
pub fn compute_return(series: &PriceSeries, col: usize, t: usize) -> Result<f64> {
    if t == 0 || t >= series.len() {
        return Err(Error::OutOfRange(format!(
            "return at row {t} needs 1 <= t < {}",
            series.len()
        )));
    }
    if col >= series.n_columns() {
        return Err(Error::OutOfRange(format!("column {col}")));
    }
    Ok(series.column_return(col, t))
}

/// Population standard deviation of the `d` returns ending at row `t`.
pub fn rolling_vol(series: &PriceSeries, col: usize, t: usize, d: usize) -> Result<f64> {
    if d == 0 {
        return Err(invalid("volatility window must be positive"));
    }
    if t < d || t >= series.len() {
        return Err(Error::OutOfRange(format!(
            "volatility at row {t} with window {d} needs {d} <= t < {}",
            series.len()
        )));
    }
    if col >= series.n_columns() {
        return Err(Error::OutOfRange(format!("column {col}")));
    }
    let rets: Vec<f64> = (t + 1 - d..=t)
        .map(|u| series.column_return(col, u))
        .collect();
    let mean = rets.iter().sum::<f64>() / d as f64;
    let var = rets.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / d as f64;
    Ok(var.sqrt())
}

/// Centering and scaling fitted on a training window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    /// Per context feature.
    pub mean: Vec<f64>,
    /// Per context feature; 1.0 where the train-window std was zero.
    pub scale: Vec<f64>,
    /// Pooled std of strategy returns (returns are not centered).
    pub return_scale: f64,
    pub vol_mean: f64,
    pub vol_scale: f64,
}

fn mean_std(x: &[f64]) -> (f64, f64) {
    if x.is_empty() {
        return (0.0, 1.0);
    }
    let n = x.len() as f64;
    let mu = x.iter().sum::<f64>() / n;
    let sd = (x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n).sqrt();
    (mu, if sd > 0.0 { sd } else { 1.0 })
}

impl Normalization {
    /// Fits on rows `first..=last`: context columns directly, strategy returns
    /// and `vol_window` volatilities wherever they are defined.
    pub fn fit(series: &PriceSeries, first: usize, last: usize, vol_window: usize) -> Result<Self> {
        if first > last || last >= series.len() {
            return Err(Error::OutOfRange(format!(
                "normalization window {first}..={last} in series of length {}",
                series.len()
            )));
        }
        if vol_window == 0 {
            return Err(invalid("volatility window must be positive"));
        }
        let mut mean = Vec::with_capacity(series.n_context());
        let mut scale = Vec::with_capacity(series.n_context());
        for i in 0..series.n_context() {
            let (mu, sd) = mean_std(&series.context(i)[first..=last]);
            mean.push(mu);
            scale.push(sd);
        }
        let m = series.n_strategies();
        let rets: Vec<f64> = (first.max(1)..=last)
            .flat_map(|t| (0..m).map(move |k| series.column_return(1 + k, t)))
            .collect();
        let n = rets.len().max(1) as f64;
        let rms = (rets.iter().map(|r| r * r).sum::<f64>() / n).sqrt();
        let vols = (first.max(vol_window)..=last)
            .flat_map(|t| (0..m).map(move |k| rolling_vol(series, 1 + k, t, vol_window)))
            .collect::<Result<Vec<_>>>()?;
        let (vol_mean, vol_scale) = mean_std(&vols);
        Ok(Self {
            mean,
            scale,
            return_scale: if rms > 0.0 { rms } else { 1.0 },
            vol_mean,
            vol_scale,
        })
    }

    /// Leaves every feature in natural units.
    pub fn identity(features: usize) -> Self {
        Self {
            mean: vec![0.0; features],
            scale: vec![1.0; features],
            return_scale: 1.0,
            vol_mean: 0.0,
            vol_scale: 1.0,
        }
    }

    /// Adds Gaussian noise of std `std` in raw units to every entry of a
    /// standardized observation.
    pub fn add_noise<R: Rng + ?Sized>(&self, obs: &mut Observation, rng: &mut R, std: f64) {
        if std <= 0.0 {
            return;
        }
        let mut perturb = |v: &mut f64, scale: f64| {
            let z: f64 = StandardNormal.sample(rng);
            *v += z * std / scale;
        };
        for v in obs.returns.as_mut_slice() {
            perturb(v, self.return_scale);
        }
        for v in obs.vols.as_mut_slice() {
            perturb(v, self.vol_scale);
        }
        let p = self.scale.len();
        let cols = obs.context.cols();
        for r in 0..obs.context.rows() {
            let scale = match r.checked_sub(p) {
                None => self.scale[r],
                Some(0) | Some(1) => self.return_scale,
                Some(_) => self.vol_scale,
            };
            for c in 0..cols {
                let mut v = obs.context.get(r, c);
                perturb(&mut v, scale);
                obs.context.set(r, c, v);
            }
        }
    }
}

/// Builds `O_t` from prices at rows `<= t` only.
pub fn build_observation(
    series: &PriceSeries,
    t: usize,
    cfg: &FeatureConfig,
    norm: &Normalization,
) -> Result<Observation> {
    let first = cfg.first_valid_row();
    if t < first || t >= series.len() {
        return Err(Error::OutOfRange(format!(
            "observation at row {t} needs {first} <= t < {}",
            series.len()
        )));
    }
    let p = series.n_context();
    if norm.mean.len() != p || norm.scale.len() != p {
        return Err(invalid(format!(
            "normalization has {} features, series has {p}",
            norm.mean.len()
        )));
    }
    let m = series.n_strategies();
    let d = cfg.vol_window;

    let asset_lags = cfg.asset_lags.lags();
    let mut returns = Matrix::zeros(m, asset_lags.len());
    let mut vols = Matrix::zeros(m, asset_lags.len());
    for k in 0..m {
        for (a, &lag) in asset_lags.iter().enumerate() {
            let r = compute_return(series, 1 + k, t - lag)?;
            let v = rolling_vol(series, 1 + k, t - lag, d)?;
            returns.set(k, a, r / norm.return_scale);
            vols.set(k, a, (v - norm.vol_mean) / norm.vol_scale);
        }
    }

    let ctx_lags = cfg.context_lags.lags();
    let mut context = Matrix::zeros(p + DERIVED_CONTEXT_ROWS, ctx_lags.len());
    for (a, &lag) in ctx_lags.iter().enumerate() {
        let u = t - lag;
        for i in 0..p {
            context.set(i, a, (series.context(i)[u] - norm.mean[i]) / norm.scale[i]);
        }
        let mut min_r = f64::INFINITY;
        let mut max_r = f64::NEG_INFINITY;
        let mut max_v = f64::NEG_INFINITY;
        for k in 0..m {
            let r = compute_return(series, 1 + k, u)?;
            let v = rolling_vol(series, 1 + k, u, d)?;
            min_r = min_r.min(r);
            max_r = max_r.max(r);
            max_v = max_v.max(v);
        }
        if m == 0 {
            (min_r, max_r, max_v) = (0.0, 0.0, 0.0);
        }
        context.set(p, a, min_r / norm.return_scale);
        context.set(p + 1, a, max_r / norm.return_scale);
        context.set(p + 2, a, (max_v - norm.vol_mean) / norm.vol_scale);
    }

    let obs = Observation {
        returns,
        vols,
        context,
    };
    if !obs.is_finite() {
        return Err(invalid(format!("non-finite observation at row {t}")));
    }
    Ok(obs)
}
