//! Reference allocators: risky asset alone, rolling minimum-variance, and
//! follow-the-winner / follow-the-loser.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::PriceSeries;
use crate::error::{invalid, Result};
use crate::evaluation::{AllocationModel, Decider};
use crate::rewards::TRADING_DAYS;

const DIAG_REG: f64 = 1e-8;
const FEAS_TOL: f64 = 1e-10;
/// Largest strategy count the exhaustive active-set search accepts.
pub const MAX_QP_ASSETS: usize = 16;

/// `sigma` itself when positive definite, otherwise `sigma + 1e-8 I`.
fn regularized(sigma: &DMatrix<f64>) -> DMatrix<f64> {
    if sigma.clone().cholesky().is_some() {
        sigma.clone()
    } else {
        sigma + DMatrix::<f64>::identity(sigma.nrows(), sigma.ncols()) * DIAG_REG
    }
}

fn check_inputs(mu: &[f64], sigma: &DMatrix<f64>) -> Result<()> {
    let l = mu.len();
    if l == 0 || l > MAX_QP_ASSETS {
        return Err(invalid(format!("QP supports 1..={MAX_QP_ASSETS} assets, got {l}")));
    }
    if sigma.nrows() != l || sigma.ncols() != l {
        return Err(invalid(format!(
            "covariance is {}x{}, expected {l}x{l}",
            sigma.nrows(),
            sigma.ncols()
        )));
    }
    for i in 0..l {
        for j in 0..i {
            let (a, b) = (sigma[(i, j)], sigma[(j, i)]);
            if (a - b).abs() > 1e-12 * a.abs().max(b.abs()).max(1.0) {
                return Err(invalid(format!("covariance not symmetric at ({i}, {j})")));
            }
        }
    }
    if mu.iter().chain(sigma.iter()).any(|v| !v.is_finite()) {
        return Err(invalid("non-finite QP input"));
    }
    Ok(())
}

/// Minimizes `w' S w` over `S` restricted to `support`, with `sum w = 1` and
/// optionally `mu' w = floor`. `None` when the system is singular.
fn solve_on_support(
    mu: &[f64],
    sigma: &DMatrix<f64>,
    floor: f64,
    support: &[usize],
    return_active: bool,
) -> Option<DVector<f64>> {
    let k = support.len();
    let m = k + 1 + usize::from(return_active);
    let mut a = DMatrix::<f64>::zeros(m, m);
    let mut b = DVector::<f64>::zeros(m);
    for (r, &i) in support.iter().enumerate() {
        for (c, &j) in support.iter().enumerate() {
            a[(r, c)] = 2.0 * sigma[(i, j)];
        }
        a[(r, k)] = -1.0;
        a[(k, r)] = 1.0;
        if return_active {
            a[(r, k + 1)] = -mu[i];
            a[(k + 1, r)] = mu[i];
        }
    }
    b[k] = 1.0;
    if return_active {
        b[k + 1] = floor;
    }
    let x = a.lu().solve(&b)?;
    if x.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let mut w = DVector::zeros(mu.len());
    for (r, &i) in support.iter().enumerate() {
        w[i] = x[r];
    }
    Some(w)
}

/// Minimum-variance long-only weights with `mu' w >= floor`.
///
/// Exhausts every support and active-constraint combination, so the result
/// is the exact optimum up to linear-solve accuracy. When no simplex point
/// reaches the floor, all weight goes to the highest `mu` (lowest index on ties).
pub fn min_variance_qp(mu: &[f64], sigma: &DMatrix<f64>, floor: f64) -> Result<Vec<f64>> {
    check_inputs(mu, sigma)?;
    let l = mu.len();
    let best_mu = (0..l).fold(0, |b, i| if mu[i] > mu[b] { i } else { b });
    if mu[best_mu] < floor {
        let mut w = vec![0.0; l];
        w[best_mu] = 1.0;
        return Ok(w);
    }
    let reg = regularized(sigma);
    let mut best: Option<(f64, DVector<f64>)> = None;
    for mask in 1u32..(1 << l) {
        let support: Vec<usize> = (0..l).filter(|i| mask & (1 << i) != 0).collect();
        for active in [false, true] {
            // one weight cannot meet both equalities
            if active && support.len() < 2 {
                continue;
            }
            let Some(w) = solve_on_support(mu, &reg, floor, &support, active) else { continue };
            let ret: f64 = w.iter().zip(mu).map(|(a, b)| a * b).sum();
            if w.iter().any(|&x| x < -FEAS_TOL)
                || (w.sum() - 1.0).abs() > FEAS_TOL
                || ret < floor - FEAS_TOL * floor.abs().max(1.0)
            {
                continue;
            }
            let var = w.dot(&(&reg * &w));
            if best.as_ref().is_none_or(|(v, _)| var < *v) {
                best = Some((var, w));
            }
        }
    }
    let (_, w) = best.ok_or_else(|| invalid("no feasible minimum-variance solution"))?;
    // clip round-off below zero and renormalize
    let mut w: Vec<f64> = w.iter().map(|x| x.max(0.0)).collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= s);
    Ok(w)
}

/// Largest violation of the KKT conditions of the minimum-variance problem at
/// `w`, with multipliers fitted by least squares on the support.
pub fn kkt_residual(mu: &[f64], sigma: &DMatrix<f64>, floor: f64, w: &[f64]) -> f64 {
    let l = mu.len();
    let reg = regularized(sigma);
    let wv = DVector::from_column_slice(w);
    let grad = (&reg * &wv) * 2.0;
    let ret: f64 = w.iter().zip(mu).map(|(a, b)| a * b).sum();
    let sum: f64 = w.iter().sum();
    let mut worst = (sum - 1.0).abs().max(floor - ret).max(0.0);
    for &x in w {
        worst = worst.max(-x);
    }
    let support: Vec<usize> = (0..l).filter(|&i| w[i] > 1e-9).collect();
    let return_active = (ret - floor).abs() <= 1e-9 * floor.abs().max(1.0);
    let cols = 1 + usize::from(return_active);
    let mut a = DMatrix::<f64>::zeros(support.len(), cols);
    let mut b = DVector::<f64>::zeros(support.len());
    for (r, &i) in support.iter().enumerate() {
        a[(r, 0)] = 1.0;
        if return_active {
            a[(r, 1)] = mu[i];
        }
        b[r] = grad[i];
    }
    let mult = a
        .svd(true, true)
        .solve(&b, 1e-12)
        .unwrap_or_else(|_| DVector::zeros(cols));
    let nu = mult[0];
    let lambda = if return_active { mult[1] } else { 0.0 };
    worst = worst.max(-lambda);
    for i in 0..l {
        let reduced = grad[i] - nu - lambda * mu[i];
        if support.contains(&i) {
            worst = worst.max(reduced.abs());
        } else {
            worst = worst.max(-reduced);
        }
    }
    worst
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MarkowitzConfig {
    /// Returns used for each estimate.
    pub lookback: usize,
    /// Rows between re-solves, counted from the first decided row.
    pub rebalance_period: usize,
}

impl Default for MarkowitzConfig {
    fn default() -> Self {
        Self {
            lookback: 250,
            rebalance_period: 126,
        }
    }
}

impl MarkowitzConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lookback < 2 || self.rebalance_period == 0 {
            return Err(invalid("lookback must be >= 2 and rebalance period >= 1"));
        }
        Ok(())
    }
}

fn check_range(series: &PriceSeries, first: usize, last: usize, lookback: usize) -> Result<()> {
    if first > last || last >= series.len() {
        return Err(invalid(format!(
            "decision rows {first}..={last} outside series of {} rows",
            series.len()
        )));
    }
    if first < lookback + 1 {
        return Err(invalid(format!(
            "decision row {first} has fewer than {lookback} returns of history"
        )));
    }
    Ok(())
}

/// Piecewise-constant rows: `solve(r)` at each rebalance row, held until the next.
fn rebalanced(
    first: usize,
    last: usize,
    period: usize,
    mut solve: impl FnMut(usize) -> Result<Vec<f64>>,
) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::with_capacity(last - first + 1);
    let mut current = Vec::new();
    for t in first..=last {
        if (t - first).is_multiple_of(period) {
            current = solve(t)?;
        }
        rows.push(current.clone());
    }
    Ok(rows)
}

/// Annualized mean returns and annualized sample covariance of the strategy
/// returns at rows `row - lookback .. row` (strictly before `row`).
pub fn trailing_estimates(series: &PriceSeries, row: usize, lookback: usize) -> (Vec<f64>, DMatrix<f64>) {
    let l = series.n_strategies();
    let rets = DMatrix::from_fn(lookback, l, |k, i| series.column_return(1 + i, row - lookback + k));
    let mean: Vec<f64> = (0..l).map(|i| rets.column(i).mean()).collect();
    let centered = DMatrix::from_fn(lookback, l, |k, i| rets[(k, i)] - mean[i]);
    let cov = (centered.transpose() * &centered) * (TRADING_DAYS / (lookback - 1) as f64);
    (mean.iter().map(|m| m * TRADING_DAYS).collect(), cov)
}

/// Minimum-variance weights re-solved every `rebalance_period` rows with the
/// floor set to the cross-strategy mean of trailing annualized returns.
pub fn markowitz_decide(series: &PriceSeries, first: usize, last: usize, cfg: &MarkowitzConfig) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    check_range(series, first, last, cfg.lookback)?;
    rebalanced(first, last, cfg.rebalance_period, |r| {
        let (mu, sigma) = trailing_estimates(series, r, cfg.lookback);
        let floor = mu.iter().sum::<f64>() / mu.len() as f64;
        min_variance_qp(&mu, &sigma, floor)
    })
}

/// Cumulative return of each strategy over the `lookback` returns before `row`.
pub fn trailing_cumulative(series: &PriceSeries, row: usize, lookback: usize) -> Vec<f64> {
    (0..series.n_strategies())
        .map(|i| {
            let p = series.strategy(i);
            p[row - 1] / p[row - 1 - lookback] - 1.0
        })
        .collect()
}

fn one_hot(l: usize, i: usize) -> Vec<f64> {
    let mut w = vec![0.0; l];
    w[i] = 1.0;
    w
}

fn follow(
    series: &PriceSeries,
    first: usize,
    last: usize,
    lookback: usize,
    period: usize,
    better: fn(f64, f64) -> bool,
) -> Result<Vec<Vec<f64>>> {
    if lookback == 0 || period == 0 {
        return Err(invalid("lookback and rebalance period must be positive"));
    }
    check_range(series, first, last, lookback)?;
    let l = series.n_strategies();
    rebalanced(first, last, period, |r| {
        let perf = trailing_cumulative(series, r, lookback);
        let pick = (0..l).fold(0, |b, i| if better(perf[i], perf[b]) { i } else { b });
        Ok(one_hot(l, pick))
    })
}

/// All weight on the best trailing performer (lowest index on ties).
pub fn follow_winner(series: &PriceSeries, first: usize, last: usize, lookback: usize, period: usize) -> Result<Vec<Vec<f64>>> {
    follow(series, first, last, lookback, period, |a, b| a > b)
}

/// All weight on the worst trailing performer (lowest index on ties).
pub fn follow_loser(series: &PriceSeries, first: usize, last: usize, lookback: usize, period: usize) -> Result<Vec<Vec<f64>>> {
    follow(series, first, last, lookback, period, |a, b| a < b)
}

/// No overlay at all.
pub fn risky_only(series: &PriceSeries, first: usize, last: usize) -> Vec<Vec<f64>> {
    vec![vec![0.0; series.n_strategies()]; last + 1 - first]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Baseline {
    RiskyOnly,
    Markowitz(MarkowitzConfig),
    FollowWinner { lookback: usize, rebalance_period: usize },
    FollowLoser { lookback: usize, rebalance_period: usize },
}

impl Baseline {
    pub fn winner() -> Self {
        Baseline::FollowWinner {
            lookback: 250,
            rebalance_period: 126,
        }
    }

    pub fn loser() -> Self {
        Baseline::FollowLoser {
            lookback: 250,
            rebalance_period: 126,
        }
    }

    pub fn markowitz() -> Self {
        Baseline::Markowitz(MarkowitzConfig::default())
    }

    pub fn decide(&self, series: &PriceSeries, first: usize, last: usize) -> Result<Vec<Vec<f64>>> {
        match *self {
            Baseline::RiskyOnly => {
                if first > last || last >= series.len() {
                    return Err(invalid("decision rows outside series"));
                }
                Ok(risky_only(series, first, last))
            }
            Baseline::Markowitz(cfg) => markowitz_decide(series, first, last, &cfg),
            Baseline::FollowWinner {
                lookback,
                rebalance_period,
            } => follow_winner(series, first, last, lookback, rebalance_period),
            Baseline::FollowLoser {
                lookback,
                rebalance_period,
            } => follow_loser(series, first, last, lookback, rebalance_period),
        }
    }
}

impl Decider for Baseline {
    fn decide(&self, series: &PriceSeries, first: usize, last: usize) -> Result<Vec<Vec<f64>>> {
        Baseline::decide(self, series, first, last)
    }
}

impl AllocationModel for Baseline {
    fn name(&self) -> String {
        match self {
            Baseline::RiskyOnly => "risky_only",
            Baseline::Markowitz(_) => "markowitz",
            Baseline::FollowWinner { .. } => "follow_winner",
            Baseline::FollowLoser { .. } => "follow_loser",
        }
        .to_string()
    }

    fn fit(&self, _train: &PriceSeries, _step: usize) -> Result<Box<dyn Decider>> {
        Ok(Box::new(*self))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::business_days;
    use chrono::NaiveDate;

    #[test]
    fn floor_binding_on_two_assets() {
        // asset 1 alone misses the floor; the optimum mixes in just enough of asset 0
        let mu = [0.20547174664694562, -0.07898467162631412];
        let s = DMatrix::from_row_slice(2, 2, &[1.3151472115663987, 1.0881321688083418, 1.0881321688083418, 0.9970338786052946]);
        let floor = -0.07219969950580746;
        let w = min_variance_qp(&mu, &s, floor).unwrap();
        let w0 = (floor - mu[1]) / (mu[0] - mu[1]);
        assert!((w[0] - w0).abs() < 1e-9, "{w:?}");
        assert!(kkt_residual(&mu, &s, floor, &w) < 1e-9);
    }
    use proptest::prelude::*;

    fn var(sigma: &DMatrix<f64>, w: &[f64]) -> f64 {
        let v = DVector::from_column_slice(w);
        v.dot(&(sigma * &v))
    }

    #[test]
    fn identity_covariance_gives_uniform() {
        let w = min_variance_qp(&[0.1, 0.2, 0.3, 0.4], &DMatrix::identity(4, 4), -1.0).unwrap();
        for x in w {
            assert!((x - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn two_asset_diagonal_closed_form() {
        let s = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 4.0]));
        let w = min_variance_qp(&[0.0, 0.0], &s, -1.0).unwrap();
        assert!((w[0] - 0.8).abs() < 1e-9 && (w[1] - 0.2).abs() < 1e-9);
    }

    #[test]
    fn unreachable_floor_goes_all_in() {
        let w = min_variance_qp(&[0.1, 0.3, 0.2], &DMatrix::identity(3, 3), 0.5).unwrap();
        assert_eq!(w, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn binding_floor_shifts_weight() {
        let s = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 4.0]));
        // unconstrained optimum returns 0.8 * 0 + 0.2 * 1 = 0.2 < 0.5
        let w = min_variance_qp(&[0.0, 1.0], &s, 0.5).unwrap();
        assert!((w[1] - 0.5).abs() < 1e-9);
        assert!(kkt_residual(&[0.0, 1.0], &s, 0.5, &w) < 1e-6);
    }

    #[test]
    fn rejects_bad_covariance() {
        let mut s = DMatrix::identity(2, 2);
        s[(0, 1)] = 0.5;
        assert!(min_variance_qp(&[0.0, 0.0], &s, 0.0).is_err());
        assert!(min_variance_qp(&[0.0, 0.0, 0.0], &DMatrix::identity(2, 2), 0.0).is_err());
    }

    fn random_problem(l: usize) -> impl Strategy<Value = (Vec<f64>, DMatrix<f64>, f64)> {
        (
            prop::collection::vec(-0.2f64..0.3, l),
            prop::collection::vec(-1.0f64..1.0, l * l),
            0.0f64..1.0,
        )
            .prop_map(move |(mu, raw, t)| {
                let a = DMatrix::from_vec(l, l, raw);
                let sigma = &a * a.transpose() * 0.1;
                let lo = mu.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = mu.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                (mu, sigma, lo + t * (hi - lo))
            })
    }

    proptest! {
        #[test]
        fn solution_is_feasible_and_kkt((mu, sigma, floor) in (2usize..6).prop_flat_map(random_problem)) {
            let w = min_variance_qp(&mu, &sigma, floor).unwrap();
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(w.iter().all(|&x| x >= 0.0));
            let ret: f64 = w.iter().zip(&mu).map(|(a, b)| a * b).sum();
            prop_assert!(ret >= floor - 1e-9);
            prop_assert!(kkt_residual(&mu, &sigma, floor, &w) < 1e-6);
        }

        #[test]
        fn never_loses_to_grid((mu, sigma, floor) in (2usize..4).prop_flat_map(random_problem)) {
            let w = min_variance_qp(&mu, &sigma, floor).unwrap();
            let qp = var(&sigma, &w);
            let l = mu.len();
            let steps = 100;
            let mut best = f64::INFINITY;
            let mut visit = |g: &[f64]| {
                let ret: f64 = g.iter().zip(&mu).map(|(a, b)| a * b).sum();
                if ret >= floor {
                    best = best.min(var(&sigma, g));
                }
            };
            for i in 0..=steps {
                if l == 2 {
                    let a = i as f64 / steps as f64;
                    visit(&[a, 1.0 - a]);
                } else {
                    for j in 0..=steps - i {
                        let (a, b) = (i as f64 / steps as f64, j as f64 / steps as f64);
                        visit(&[a, b, 1.0 - a - b]);
                    }
                }
            }
            prop_assert!(qp <= best + 1e-9);
        }
    }

    /// Two strategies with constant daily growth `a`, `b`; the risky asset is flat.
    fn trending(rows: usize, growth: &[f64]) -> PriceSeries {
        let dates = business_days(NaiveDate::from_ymd_opt(2010, 1, 4).unwrap(), rows);
        let mut cols = vec![vec![100.0; rows]];
        for g in growth {
            cols.push((0..rows).map(|t| 100.0 * (1.0 + g).powi(t as i32)).collect());
        }
        let names = std::iter::once("risky".to_string())
            .chain((0..growth.len()).map(|i| format!("s{i}")))
            .collect();
        PriceSeries::new(dates, names, cols, growth.len()).unwrap()
    }

    #[test]
    fn winner_and_loser_pick_extremes() {
        let s = trending(300, &[0.001, 0.003, 0.002]);
        assert_eq!(follow_winner(&s, 260, 260, 250, 126).unwrap(), vec![vec![0.0, 1.0, 0.0]]);
        assert_eq!(follow_loser(&s, 260, 260, 250, 126).unwrap(), vec![vec![1.0, 0.0, 0.0]]);
        let tie = trending(300, &[0.002, 0.001, 0.002]);
        assert_eq!(follow_winner(&tie, 260, 260, 250, 126).unwrap()[0], vec![1.0, 0.0, 0.0]);
        assert!(follow_winner(&s, 100, 120, 250, 126).is_err());
    }

    #[test]
    fn rebalance_grid_holds_weights() {
        let s = trending(600, &[0.001, 0.002]);
        let rows = markowitz_decide(&s, 300, 599, &MarkowitzConfig::default()).unwrap();
        for (k, w) in rows.windows(2).enumerate() {
            if (k + 1) % 126 != 0 {
                assert_eq!(w[0], w[1]);
            }
        }
        let long = MarkowitzConfig {
            rebalance_period: 1000,
            ..Default::default()
        };
        let rows = markowitz_decide(&s, 300, 599, &long).unwrap();
        assert!(rows.iter().all(|r| *r == rows[0]));
    }

    proptest! {
        #[test]
        fn winner_matches_brute_force_argmax(seed in 0u64..500, row in 260usize..299) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let rows = 300;
            let dates = business_days(NaiveDate::from_ymd_opt(2010, 1, 4).unwrap(), rows);
            let mut cols = vec![vec![100.0; rows]];
            for _ in 0..4 {
                let mut p = vec![100.0];
                for t in 1..rows {
                    p.push(p[t - 1] * (1.0 + rng.random_range(-0.02..0.02)));
                }
                cols.push(p);
            }
            let names = ["r", "a", "b", "c", "d"].map(String::from).to_vec();
            let s = PriceSeries::new(dates, names, cols, 4).unwrap();
            // compound returns one day at a time
            let cum: Vec<f64> = (0..4).map(|i| {
                (row - 250..row).map(|u| s.strategy(i)[u] / s.strategy(i)[u - 1]).product::<f64>() - 1.0
            }).collect();
            let argmax = (0..4).max_by(|&a, &b| cum[a].partial_cmp(&cum[b]).unwrap().then(b.cmp(&a))).unwrap();
            let argmin = (0..4).min_by(|&a, &b| cum[a].partial_cmp(&cum[b]).unwrap().then(a.cmp(&b))).unwrap();
            prop_assert_eq!(&follow_winner(&s, row, row, 250, 126).unwrap()[0], &one_hot(4, argmax));
            prop_assert_eq!(&follow_loser(&s, row, row, 250, 126).unwrap()[0], &one_hot(4, argmin));
        }

        #[test]
        fn baseline_decisions_are_causal(seed in 0u64..50, cut in 300usize..400) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let rows = 420;
            let dates = business_days(NaiveDate::from_ymd_opt(2010, 1, 4).unwrap(), rows);
            let mut cols = vec![vec![100.0; rows]];
            for _ in 0..3 {
                let mut p = vec![100.0];
                for t in 1..rows {
                    p.push(p[t - 1] * (1.0 + rng.random_range(-0.02..0.02)));
                }
                cols.push(p);
            }
            let names = ["r", "a", "b", "c"].map(String::from).to_vec();
            let s = PriceSeries::new(dates, names, cols, 3).unwrap();
            let bumped = s.map_values(|c, t, v| if t > cut && c > 0 { v * (1.0 + 0.01 * ((t * c) % 7) as f64) } else { v }).unwrap();
            for b in [Baseline::markowitz(), Baseline::winner(), Baseline::loser()] {
                let a = b.decide(&s, 260, 419).unwrap();
                let c = b.decide(&bumped, 260, 419).unwrap();
                prop_assert_eq!(&a[..=cut - 260], &c[..=cut - 260]);
            }
        }
    }

    #[test]
    fn risky_only_path_tracks_risky_asset() {
        let mut s = trending(50, &[0.001, -0.001]);
        s = s.map_values(|c, t, v| if c == 0 { 100.0 + t as f64 } else { v }).unwrap();
        let rows = Baseline::RiskyOnly.decide(&s, 0, 49).unwrap();
        let r = crate::simulator::run_backtest(&s, &rows, &Default::default()).unwrap();
        for (v, p) in r.values.iter().zip(s.risky()) {
            assert!((v - p / 100.0).abs() < 1e-12);
        }
        assert!(r.turnover.iter().chain(&r.cost_paid).all(|&x| x == 0.0));
    }
}
