//! Episode rewards computed from daily portfolio returns, with exact gradients.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Trading days per year used for every annualization.
pub const TRADING_DAYS: f64 = 250.0;

/// Magnitude reported for ratios whose denominator vanishes.
pub const RATIO_CAP: f64 = 1e6;

/// Daily returns of one episode plus its length in years.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeReturns {
    daily_returns: Vec<f64>,
    year_fraction: f64,
}

impl EpisodeReturns {
    pub fn new(daily_returns: Vec<f64>, year_fraction: f64) -> Result<Self> {
        if daily_returns.iter().any(|r| !r.is_finite()) {
            return Err(invalid("non-finite daily return"));
        }
        if !(year_fraction > 0.0) || !year_fraction.is_finite() {
            return Err(invalid(format!("year fraction {year_fraction} must be positive")));
        }
        Ok(Self {
            daily_returns,
            year_fraction,
        })
    }

    /// Year fraction is `len / 250`.
    pub fn from_daily(daily_returns: Vec<f64>) -> Result<Self> {
        let tau = daily_returns.len() as f64 / TRADING_DAYS;
        Self::new(daily_returns, tau)
    }

    pub fn daily_returns(&self) -> &[f64] {
        &self.daily_returns
    }

    pub fn year_fraction(&self) -> f64 {
        self.year_fraction
    }

    pub fn len(&self) -> usize {
        self.daily_returns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.daily_returns.is_empty()
    }

    fn growth(&self) -> Result<f64> {
        if self.daily_returns.is_empty() {
            return Err(invalid("empty episode"));
        }
        let g: f64 = self.daily_returns.iter().map(|r| 1.0 + r).product();
        if g <= 0.0 {
            return Err(invalid("portfolio value hit zero"));
        }
        Ok(g)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    #[default]
    NetProfit,
    Sortino,
}

impl RewardKind {
    pub fn label(&self) -> &'static str {
        match self {
            RewardKind::NetProfit => "net_profit",
            RewardKind::Sortino => "sortino",
        }
    }

    pub fn value(&self, ep: &EpisodeReturns) -> Result<f64> {
        match self {
            RewardKind::NetProfit => net_profit(ep),
            RewardKind::Sortino => sortino(ep),
        }
    }

    /// Reward and its gradient w.r.t. each daily return.
    pub fn value_and_grad(&self, ep: &EpisodeReturns) -> Result<(f64, Vec<f64>)> {
        match self {
            RewardKind::NetProfit => net_profit_grad(ep),
            RewardKind::Sortino => sortino_grad(ep),
        }
    }
}

/// `prod(1 + r) - 1`.
pub fn net_profit(ep: &EpisodeReturns) -> Result<f64> {
    Ok(ep.growth()? - 1.0)
}

pub fn net_profit_grad(ep: &EpisodeReturns) -> Result<(f64, Vec<f64>)> {
    let g = ep.growth()?;
    let grad = ep.daily_returns.iter().map(|r| g / (1.0 + r)).collect();
    Ok((g - 1.0, grad))
}

/// `(prod(1 + r))^(1/tau) - 1`.
pub fn annualized_return(ep: &EpisodeReturns) -> Result<f64> {
    Ok(ep.growth()?.powf(1.0 / ep.year_fraction) - 1.0)
}

struct Downside {
    idx: Vec<usize>,
    mean: f64,
    /// Per-day population std of the negative returns.
    std: f64,
}

fn downside(ep: &EpisodeReturns) -> Result<Downside> {
    let idx: Vec<usize> = ep
        .daily_returns
        .iter()
        .enumerate()
        .filter(|(_, &r)| r < 0.0)
        .map(|(i, _)| i)
        .collect();
    if idx.is_empty() {
        return Err(Error::Degenerate("no negative daily returns".into()));
    }
    let n = idx.len() as f64;
    let mean = idx.iter().map(|&i| ep.daily_returns[i]).sum::<f64>() / n;
    let var = idx
        .iter()
        .map(|&i| {
            let d = ep.daily_returns[i] - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    Ok(Downside {
        idx,
        mean,
        std: var.sqrt(),
    })
}

/// `sqrt(250)` times the population std of the strictly negative daily returns.
///
/// Returns [`Error::Degenerate`] when no return is negative.
pub fn downside_std(ep: &EpisodeReturns) -> Result<f64> {
    Ok(TRADING_DAYS.sqrt() * downside(ep)?.std)
}

fn capped(sign_source: f64) -> f64 {
    if sign_source >= 0.0 {
        RATIO_CAP
    } else {
        -RATIO_CAP
    }
}

/// Annualized return over downside deviation, `+-RATIO_CAP` when the deviation
/// is zero or undefined (sign taken from the return, zero counts as positive).
pub fn sortino(ep: &EpisodeReturns) -> Result<f64> {
    let mu = annualized_return(ep)?;
    match downside(ep) {
        Ok(d) if d.std > 0.0 => Ok((mu / (TRADING_DAYS.sqrt() * d.std)).clamp(-RATIO_CAP, RATIO_CAP)),
        Ok(_) | Err(Error::Degenerate(_)) => Ok(capped(mu)),
        Err(e) => Err(e),
    }
}

/// Sortino ratio and its gradient; the gradient is zero in the capped case.
pub fn sortino_grad(ep: &EpisodeReturns) -> Result<(f64, Vec<f64>)> {
    let value = sortino(ep)?;
    let n = ep.len();
    let d = match downside(ep) {
        Ok(d) if d.std > 0.0 && value.abs() < RATIO_CAP => d,
        Ok(_) | Err(Error::Degenerate(_)) => return Ok((value, vec![0.0; n])),
        Err(e) => return Err(e),
    };
    let g = ep.growth()?;
    let tau = ep.year_fraction;
    let mu = g.powf(1.0 / tau) - 1.0;
    let dd = TRADING_DAYS.sqrt() * d.std;
    let mut grad: Vec<f64> = ep
        .daily_returns
        .iter()
        .map(|r| (1.0 + mu) / (tau * (1.0 + r)) / dd)
        .collect();
    let k = d.idx.len() as f64;
    for &i in &d.idx {
        let d_dd = TRADING_DAYS.sqrt() * (ep.daily_returns[i] - d.mean) / (k * d.std);
        grad[i] -= mu * d_dd / (dd * dd);
    }
    Ok((value, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ep(r: &[f64]) -> EpisodeReturns {
        EpisodeReturns::from_daily(r.to_vec()).unwrap()
    }

    #[test]
    fn net_profit_examples() {
        assert_eq!(net_profit(&ep(&[0.0, 0.0, 0.0])).unwrap(), 0.0);
        assert!((net_profit(&ep(&[0.10, -0.10])).unwrap() + 0.01).abs() < 1e-15);
        assert!((net_profit(&ep(&[0.05])).unwrap() - 0.05).abs() < 1e-15);
        assert!(EpisodeReturns::from_daily(vec![]).is_err());
        assert!(net_profit(&EpisodeReturns::new(vec![], 1.0).unwrap()).is_err());
    }

    #[test]
    fn downside_examples() {
        assert_eq!(downside_std(&ep(&[-0.02, -0.02, -0.02])).unwrap(), 0.0);
        let v = downside_std(&ep(&[-0.01, 0.02, -0.03])).unwrap();
        assert!((v - 250f64.sqrt() * 0.01).abs() < 1e-12);
        assert!(matches!(
            downside_std(&ep(&[0.01, 0.0])),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn sortino_cap_cases() {
        assert_eq!(sortino(&ep(&[0.0; 10])).unwrap(), RATIO_CAP);
        // 125 pairs of +1%, -1%: negatives all equal so the deviation is zero
        let path: Vec<f64> = (0..250).map(|i| if i % 2 == 0 { 0.01 } else { -0.01 }).collect();
        let e = ep(&path);
        let mu = annualized_return(&e).unwrap();
        assert!((mu - (0.9999f64.powi(125) - 1.0)).abs() < 1e-12);
        assert!(mu < -0.0124 && mu > -0.0125);
        assert_eq!(sortino(&e).unwrap(), -RATIO_CAP);
    }

    #[test]
    fn sortino_is_ratio_of_parts() {
        let e = ep(&[0.01, -0.02, 0.015, -0.005, 0.003]);
        let s = sortino(&e).unwrap();
        let expected = annualized_return(&e).unwrap() / downside_std(&e).unwrap();
        assert!((s - expected).abs() < 1e-12);
    }

    fn fd_check(kind: RewardKind, r: &[f64]) {
        let e = ep(r);
        let (_, grad) = kind.value_and_grad(&e).unwrap();
        let h = 1e-7;
        for i in 0..r.len() {
            let mut up = r.to_vec();
            up[i] += h;
            let mut dn = r.to_vec();
            dn[i] -= h;
            let fd = (kind.value(&ep(&up)).unwrap() - kind.value(&ep(&dn)).unwrap()) / (2.0 * h);
            assert!(
                (fd - grad[i]).abs() < 1e-5 * grad[i].abs().max(1.0),
                "{kind:?} day {i}: analytic {} fd {fd}",
                grad[i]
            );
        }
    }

    fn away_from_zero() -> impl Strategy<Value = f64> {
        (1e-4f64..0.03, any::<bool>()).prop_map(|(m, neg)| if neg { -m } else { m })
    }

    proptest! {
        #[test]
        fn net_profit_gradient_matches_fd(r in prop::collection::vec(away_from_zero(), 1..40)) {
            fd_check(RewardKind::NetProfit, &r);
        }

        #[test]
        fn sortino_gradient_matches_fd(
            r in prop::collection::vec(away_from_zero(), 5..40)
                .prop_filter("needs two distinct negatives", |r| {
                    let neg: Vec<_> = r.iter().filter(|&&x| x < 0.0).collect();
                    neg.len() >= 2 && neg.iter().any(|&&x| (x - neg[0]).abs() > 1e-3)
                })
        ) {
            fd_check(RewardKind::Sortino, &r);
        }

        #[test]
        fn net_profit_composes(a in prop::collection::vec(-0.05f64..0.05, 1..20),
                               b in prop::collection::vec(-0.05f64..0.05, 1..20)) {
            let mut ab = a.clone();
            ab.extend(&b);
            let lhs = net_profit(&ep(&ab)).unwrap();
            let rhs = (1.0 + net_profit(&ep(&a)).unwrap()) * (1.0 + net_profit(&ep(&b)).unwrap()) - 1.0;
            prop_assert!((lhs - rhs).abs() < 1e-12);
        }

        #[test]
        fn downside_std_nonnegative(r in prop::collection::vec(-0.05f64..0.05, 1..50)) {
            if let Ok(v) = downside_std(&ep(&r)) {
                prop_assert!(v >= 0.0);
            }
        }
    }
}
