//! The α-divergence family: generator `f_α`, its convex conjugate `f*_α`, the
//! scalar encoding `t_α` that turns the conjugate term into a squared inner
//! product, and exact/variational f-mutual information on finite tables.

use crate::dataset::JointDistribution;
use crate::error::{Error, Result};

/// Lower clamp on `|u|` inside `t_α'(u)`; the derivative blows up at zero for `α < 2`.
pub const T_ALPHA_DERIVATIVE_FLOOR: f64 = 1e-8;

/// α-divergence with `α > 1`. `α = 2` is the χ² case.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct AlphaDivergence {
    alpha: f64,
}

impl TryFrom<f64> for AlphaDivergence {
    type Error = Error;
    fn try_from(alpha: f64) -> Result<Self> {
        Self::new(alpha)
    }
}

impl From<AlphaDivergence> for f64 {
    fn from(d: AlphaDivergence) -> f64 {
        d.alpha
    }
}

impl AlphaDivergence {
    pub fn new(alpha: f64) -> Result<Self> {
        if !alpha.is_finite() || alpha <= 1.0 {
            return Err(Error::Domain(format!("alpha must be finite and > 1, got {alpha}")));
        }
        Ok(Self { alpha })
    }

    pub fn chi_squared() -> Self {
        Self { alpha: 2.0 }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// `f_α(y) = (y^α − 1 − α(y − 1)) / (α(α − 1))`
    pub fn f(&self, y: f64) -> Result<f64> {
        if y < 0.0 || y.is_nan() {
            return Err(Error::Domain(format!("f_alpha needs y >= 0, got {y}")));
        }
        Ok(self.f_unchecked(y))
    }

    fn f_unchecked(&self, y: f64) -> f64 {
        let a = self.alpha;
        (y.powf(a) - 1.0 - a * (y - 1.0)) / (a * (a - 1.0))
    }

    /// `f_α'(y) = (y^(α−1) − 1) / (α − 1)`
    pub fn f_prime(&self, y: f64) -> f64 {
        let a = self.alpha;
        (y.powf(a - 1.0) - 1.0) / (a - 1.0)
    }

    /// `f*_α(t) = |1 + (α−1)t|^(α/(α−1)) / α − 1/α`
    pub fn fstar(&self, t: f64) -> f64 {
        let a = self.alpha;
        (1.0 + (a - 1.0) * t).abs().powf(a / (a - 1.0)) / a - 1.0 / a
    }

    /// `t_α(u) = sign(u)·|√(α/2)·u|^(2(α−1)/α) / (α−1) − 1/(α−1)`.
    ///
    /// The sign factor is applied literally, so negative similarities map
    /// below `−1/(α−1)`. `f*_α(t_α(u)) = u²/2 − 1/α` holds for every real `u`.
    pub fn t(&self, u: f64) -> f64 {
        let a = self.alpha;
        let scaled = ((a / 2.0).sqrt() * u).abs();
        u.signum_or_zero() * scaled.powf(self.t_exponent()) / (a - 1.0) - 1.0 / (a - 1.0)
    }

    /// `dt_α/du = (2c/α)·|c·u|^(q−1)` with `c = √(α/2)` and `q = 2(α−1)/α`;
    /// `|u|` is floored at [`T_ALPHA_DERIVATIVE_FLOOR`].
    pub fn t_prime(&self, u: f64) -> f64 {
        let a = self.alpha;
        let c = (a / 2.0).sqrt();
        let q = self.t_exponent();
        if q == 1.0 {
            return 1.0;
        }
        let mag = u.abs().max(T_ALPHA_DERIVATIVE_FLOOR);
        2.0 * c / a * (c * mag).powf(q - 1.0)
    }

    fn t_exponent(&self) -> f64 {
        2.0 * (self.alpha - 1.0) / self.alpha
    }
}

trait SignumOrZero {
    fn signum_or_zero(self) -> f64;
}

impl SignumOrZero for f64 {
    fn signum_or_zero(self) -> f64 {
        if self > 0.0 {
            1.0
        } else if self < 0.0 {
            -1.0
        } else {
            0.0
        }
    }
}

/// Exact `I_f = Σ f_α(p(x,x′)/(p(x)p(x′))) p(x) p(x′)`, skipping cells whose
/// marginal product is zero.
pub fn exact_f_mi(div: &AlphaDivergence, joint: &JointDistribution) -> f64 {
    let px = joint.marginal_x();
    let pxp = joint.marginal_xp();
    let table = joint.table();
    let mut total = 0.0;
    for (i, &pi) in px.iter().enumerate() {
        for (j, &pj) in pxp.iter().enumerate() {
            let q = pi * pj;
            if q == 0.0 {
                continue;
            }
            total += div.f_unchecked(table[(i, j)] / q) * q;
        }
    }
    total
}

/// Monte-Carlo form of the variational bound:
/// `mean_joint critic − mean_marginal f*_α(critic)`.
pub fn variational_mi_bound(
    div: &AlphaDivergence,
    joint_samples: &[(usize, usize)],
    marginal_samples: &[(usize, usize)],
    critic: impl Fn(usize, usize) -> f64,
) -> Result<f64> {
    if joint_samples.is_empty() || marginal_samples.is_empty() {
        return Err(Error::pre("variational bound needs non-empty sample lists"));
    }
    let first = joint_samples.iter().map(|&(x, xp)| critic(x, xp)).sum::<f64>() / joint_samples.len() as f64;
    let second = marginal_samples.iter().map(|&(x, xp)| div.fstar(critic(x, xp))).sum::<f64>()
        / marginal_samples.len() as f64;
    Ok(first - second)
}

/// The same bound evaluated as exact expectations over a finite table.
pub fn expected_mi_bound(
    div: &AlphaDivergence,
    joint: &JointDistribution,
    critic: impl Fn(usize, usize) -> f64,
) -> f64 {
    let px = joint.marginal_x();
    let pxp = joint.marginal_xp();
    let table = joint.table();
    let mut total = 0.0;
    for (i, &pi) in px.iter().enumerate() {
        for (j, &pj) in pxp.iter().enumerate() {
            let (pij, q) = (table[(i, j)], pi * pj);
            if pij == 0.0 && q == 0.0 {
                continue;
            }
            let c = critic(i, j);
            total += pij * c - q * div.fstar(c);
        }
    }
    total
}
