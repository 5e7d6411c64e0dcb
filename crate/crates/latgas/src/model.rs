//! Rate families and weak-asymmetry parameters.
//!
//! A model is a pair of nonnegative bond rates `b^R_x`, `b^L_x` of finite
//! range `R`, together with a local function `c` satisfying the gradient
//! identity `b^R_x - b^L_x = c_x - c_{x+1}`. The generator weights the
//! unweighted rates by `n^2 p_n` and `n^2 q_n` where
//! `p_n = 1/2 + a / (2 n^gamma)`.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lattice::Occupancies;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("gamma must lie in (0, 1], got {0}")]
    GammaOutOfRange(f64),
    #[error("n = {n} is too small for a = {a}: p_n = {p} outside [0, 1]")]
    DriftTooStrong { a: f64, n: u32, p: f64 },
    #[error("zero-range g must satisfy g(0) = 0 and g(k) > 0 for k >= 1")]
    BadRateFunction,
    #[error("kinetically constrained model needs m >= 2 and theta > 0")]
    BadKclg,
    #[error("speed-change weights must be positive, satisfy alpha2 = e^beta alpha3 and alpha1 - alpha2 - alpha3 + alpha4 = 0 (got residuals {0:.3e}, {1:.3e})")]
    BadSpeedChange(f64, f64),
    #[error("occupancy {0} is not in {{0,1}} for an exclusion family")]
    NotExclusion(u32),
}

/// Drift strength `a`, asymmetry exponent `gamma` and scaling parameter `n`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Asymmetry {
    pub a: f64,
    pub gamma: f64,
    pub n: u32,
}

impl Asymmetry {
    pub fn new(a: f64, gamma: f64, n: u32) -> Result<Self, ModelError> {
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(ModelError::GammaOutOfRange(gamma));
        }
        let asym = Asymmetry { a, gamma, n };
        let p = asym.p_n();
        if !(0.0..=1.0).contains(&p) {
            return Err(ModelError::DriftTooStrong { a, n, p });
        }
        Ok(asym)
    }

    pub fn symmetric(n: u32) -> Self {
        Asymmetry { a: 0.0, gamma: 1.0, n }
    }

    /// `p_n = 1/2 + a/(2 n^gamma)`.
    #[inline]
    pub fn p_n(&self) -> f64 {
        0.5 + self.a / (2.0 * (self.n as f64).powf(self.gamma))
    }

    #[inline]
    pub fn q_n(&self) -> f64 {
        1.0 - self.p_n()
    }

    /// Diffusive-scale directed weights `(n^2 p_n, n^2 q_n)`.
    pub fn directed_weights(&self) -> (f64, f64) {
        let n2 = (self.n as f64) * (self.n as f64);
        (n2 * self.p_n(), n2 * self.q_n())
    }
}

/// Single-site jump rate `g` of a zero-range model, with a tabulation used
/// for Lipschitz estimation and measure construction.
#[derive(Clone)]
pub struct RateFn {
    name: String,
    f: Arc<dyn Fn(u32) -> f64 + Send + Sync>,
}

impl fmt::Debug for RateFn {
    fn fmt(&self, fm: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(fm, "RateFn({})", self.name)
    }
}

impl RateFn {
    pub fn new(name: &str, f: impl Fn(u32) -> f64 + Send + Sync + 'static) -> Self {
        RateFn { name: name.to_string(), f: Arc::new(f) }
    }

    /// `g(k) = k`, the independent-walker rate.
    pub fn linear() -> Self {
        RateFn::new("linear", |k| k as f64)
    }

    /// `g(k) = 1(k >= 1)`, the constant-rate queueing model.
    pub fn indicator() -> Self {
        RateFn::new("indicator", |k| if k >= 1 { 1.0 } else { 0.0 })
    }

    /// Tabulated rate; `table[k]` is `g(k)`, constant beyond the table.
    pub fn tabulated(table: Vec<f64>) -> Self {
        RateFn::new("tabulated", move |k| {
            let i = (k as usize).min(table.len() - 1);
            table[i]
        })
    }

    #[inline]
    pub fn eval(&self, k: u32) -> f64 {
        (self.f)(k)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Checks `g(0) = 0`, `g(k) > 0` for `1 <= k <= k_max`.
    pub fn validate(&self, k_max: u32) -> Result<(), ModelError> {
        if self.eval(0) != 0.0 {
            return Err(ModelError::BadRateFunction);
        }
        for k in 1..=k_max {
            if !(self.eval(k) > 0.0) {
                return Err(ModelError::BadRateFunction);
            }
        }
        Ok(())
    }

    /// Lipschitz constant `sup |g(k+1) - g(k)|` estimated on `0..=k_max`.
    pub fn lipschitz(&self, k_max: u32) -> f64 {
        (0..k_max)
            .map(|k| (self.eval(k + 1) - self.eval(k)).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone)]
pub enum Family {
    SimpleExclusion,
    ZeroRange { g: RateFn },
    /// Kinetically constrained exclusion: a jump needs `m - 1` occupied
    /// neighbors, softened by the vanishing rate `theta / (2n)`.
    Kclg { m: u32, theta: f64 },
    /// Gradient exclusion with speed change; weights
    /// `[alpha1, alpha2, alpha3, alpha4]` tied to the inverse temperature
    /// `beta` of the invariant Gibbs measure.
    SpeedChange { beta: f64, alpha: [f64; 4] },
}

#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub family: Family,
    /// Support radius of `b_0`: rates across bond `(0, 1)` read sites in
    /// `[-range, range]`.
    pub range: i64,
}

impl ModelSpec {
    pub fn simple_exclusion() -> Self {
        ModelSpec { family: Family::SimpleExclusion, range: 1 }
    }

    pub fn zero_range(g: RateFn) -> Result<Self, ModelError> {
        g.validate(64)?;
        Ok(ModelSpec { family: Family::ZeroRange { g }, range: 1 })
    }

    pub fn kclg(m: u32, theta: f64) -> Result<Self, ModelError> {
        if m < 2 || !(theta > 0.0) {
            return Err(ModelError::BadKclg);
        }
        Ok(ModelSpec { family: Family::Kclg { m, theta }, range: m as i64 })
    }

    /// Kclg with `theta = 0` is forbidden for dynamics (absorbing states);
    /// exact generator studies may still build it.
    pub fn kclg_frozen(m: u32) -> Self {
        ModelSpec { family: Family::Kclg { m, theta: 0.0 }, range: m as i64 }
    }

    pub fn speed_change(beta: f64, alpha: [f64; 4]) -> Result<Self, ModelError> {
        let tie = alpha[1] - beta.exp() * alpha[2];
        let grad = alpha[0] - alpha[1] - alpha[2] + alpha[3];
        if alpha.iter().any(|&v| !(v > 0.0)) || tie.abs() > 1e-12 || grad.abs() > 1e-12 {
            return Err(ModelError::BadSpeedChange(tie, grad));
        }
        Ok(ModelSpec { family: Family::SpeedChange { beta, alpha }, range: 2 })
    }

    /// Canonical speed-change weights for a given `beta`:
    /// `alpha = ((e^beta + 1)/2, e^beta, 1, (e^beta + 1)/2) * scale`, which
    /// satisfies both the Gibbs tie and the gradient constraint for every
    /// `beta` and reduces to constant rates at `beta = 0`.
    pub fn speed_change_canonical(beta: f64, scale: f64) -> Self {
        let e = beta.exp();
        let mid = (e + 1.0) / 2.0;
        ModelSpec::speed_change(beta, [mid * scale, e * scale, scale, mid * scale])
            .expect("canonical weights satisfy both constraints")
    }

    pub fn is_exclusion(&self) -> bool {
        !matches!(self.family, Family::ZeroRange { .. })
    }

    /// Unweighted rates `(b^R, b^L)` across the bond `(0, 1)` of `eta`.
    /// The engine multiplies by `n^2 p_n` and `n^2 q_n`.
    #[inline]
    pub fn eval_rates<O: Occupancies>(&self, n: u32, eta: &O) -> (f64, f64) {
        match &self.family {
            Family::SimpleExclusion => {
                let (e0, e1) = (eta.at(0), eta.at(1));
                (
                    (e0 * (1 - e1)) as f64,
                    (e1 * (1 - e0)) as f64,
                )
            }
            Family::ZeroRange { g } => (g.eval(eta.at(0)), g.eval(eta.at(1))),
            Family::Kclg { m, theta } => {
                let (e0, e1) = (eta.at(0), eta.at(1));
                if e0 == 0 && e1 == 0 {
                    return (0.0, 0.0);
                }
                let a = self.kclg_neighbor_factor(*m, *theta, n, eta);
                ((e0 * (1 - e1)) as f64 * a, (e1 * (1 - e0)) as f64 * a)
            }
            Family::SpeedChange { alpha, .. } => {
                let (e0, e1) = (eta.at(0), eta.at(1));
                if e0 == e1 {
                    return (0.0, 0.0);
                }
                let (l, r) = (eta.at(-1), eta.at(2));
                let right = match (l, r) {
                    (1, 1) => alpha[0],
                    (0, 1) => alpha[1],
                    (1, 0) => alpha[2],
                    _ => alpha[3],
                };
                let left = match (l, r) {
                    (1, 1) => alpha[0],
                    (0, 1) => alpha[2],
                    (1, 0) => alpha[1],
                    _ => alpha[3],
                };
                if e0 == 1 {
                    (right, 0.0)
                } else {
                    (0.0, left)
                }
            }
        }
    }

    /// Sum over the `m` windows of `m - 1` consecutive neighbor sites that
    /// hug the bond `(0, 1)`, plus the softening `theta / (2n)`.
    ///
    /// Neighbors are the sites `-(m-1)..=-1` and `2..=m`; a window may
    /// straddle the bond gap.
    fn kclg_neighbor_factor<O: Occupancies>(&self, m: u32, theta: f64, n: u32, eta: &O) -> f64 {
        let m = m as i64;
        let real = |idx: i64| if idx < m - 1 { idx - (m - 1) } else { idx - (m - 1) + 2 };
        let mut sum = 0.0;
        for start in 0..m {
            let mut prod = 1.0;
            for idx in start..(start + m - 1) {
                prod *= eta.at(real(idx)) as f64;
                if prod == 0.0 {
                    break;
                }
            }
            sum += prod;
        }
        sum + theta / (2.0 * n as f64)
    }

    /// The gradient function `c` with `b^R_0 - b^L_0 = c_0 - c_1`,
    /// supported on `[-range, range]` around its origin.
    pub fn c_fn<O: Occupancies>(&self, n: u32, eta: &O) -> f64 {
        match &self.family {
            Family::SimpleExclusion => eta.at(0) as f64,
            Family::ZeroRange { g } => g.eval(eta.at(0)),
            Family::Kclg { m, theta } => {
                let m = *m as i64;
                let mut sum = 0.0;
                // windows of m consecutive sites containing the origin
                for start in (1 - m)..=0 {
                    let mut prod = 1.0;
                    for j in start..(start + m) {
                        prod *= eta.at(j) as f64;
                        if prod == 0.0 {
                            break;
                        }
                    }
                    sum += prod;
                }
                // windows of m sites from -(m-1)..=m skipping the origin
                for start in (1 - m)..=0 {
                    if start == 0 {
                        continue;
                    }
                    let mut prod = 1.0;
                    for j in start..=(start + m) {
                        if j == 0 {
                            continue;
                        }
                        prod *= eta.at(j) as f64;
                        if prod == 0.0 {
                            break;
                        }
                    }
                    sum -= prod;
                }
                sum + theta / (2.0 * n as f64) * eta.at(0) as f64
            }
            Family::SpeedChange { alpha, .. } => {
                let (l, c, r) = (eta.at(-1) as f64, eta.at(0) as f64, eta.at(1) as f64);
                alpha[3] * c
                    + (alpha[2] - alpha[3]) * (l * c + c * r)
                    + (alpha[3] - alpha[1]) * l * r
                    + (alpha[1] - alpha[2]) * l * c * r
            }
        }
    }

    /// Occupancy cap used when enumerating local patterns.
    pub fn enumeration_cap(&self) -> u32 {
        if self.is_exclusion() {
            1
        } else {
            6
        }
    }
}

/// Enumerates occupancy windows of `width` sites with per-site cap.
pub fn enumerate_windows(width: usize, cap: u32) -> impl Iterator<Item = Vec<u32>> {
    let base = cap as u64 + 1;
    let total = base.pow(width as u32);
    (0..total).map(move |mut code| {
        let mut w = vec![0u32; width];
        for v in w.iter_mut() {
            *v = (code % base) as u32;
            code /= base;
        }
        w
    })
}

/// Report of an exhaustive structural check.
#[derive(Debug, Clone, Copy)]
pub struct CheckReport {
    pub max_violation: f64,
    pub patterns: u64,
}

/// Exhaustive check of the gradient identity (R1):
/// `b^R_0 - b^L_0 = c_0 - c_1` over all local patterns on a window of
/// width `2 range + 2`.
pub fn gradient_identity_check(spec: &ModelSpec, asym: &Asymmetry) -> CheckReport {
    let r = spec.range;
    let width = (2 * r + 2) as usize;
    let offset = -r;
    let mut max_violation: f64 = 0.0;
    let mut patterns = 0;
    for w in enumerate_windows(width, spec.enumeration_cap()) {
        let win = crate::lattice::Window { values: &w, offset };
        let (br, bl) = spec.eval_rates(asym.n, &win);
        let c0 = spec.c_fn(asym.n, &win);
        let shifted = crate::lattice::Window { values: &w, offset: offset - 1 };
        let c1 = spec.c_fn(asym.n, &shifted);
        max_violation = max_violation.max(((br - bl) - (c0 - c1)).abs());
        patterns += 1;
    }
    CheckReport { max_violation, patterns }
}

/// Exhaustive check of reversibility (R2):
/// `b^R_0(eta^{1,0}) dnu^{1,0}/dnu (eta) = b^L_0(eta)` over local patterns,
/// with the Radon-Nikodym ratio supplied by the measure.
pub fn detailed_balance_check(
    spec: &ModelSpec,
    asym: &Asymmetry,
    measure: &crate::measures::MeasureSpec,
) -> Result<CheckReport, crate::measures::MeasureError> {
    let r = spec.range;
    // window [-r-1, r+2] so the measure ratio sees one extra site per side
    let offset = -r - 1;
    let width = (2 * r + 4) as usize;
    let cap = spec.enumeration_cap().max(measure.enumeration_cap());
    let mut max_violation: f64 = 0.0;
    let mut patterns = 0;
    for w in enumerate_windows(width, cap) {
        let win = crate::lattice::Window { values: &w, offset };
        if win.at(1) == 0 {
            continue; // b^L vanishes and eta^{1,0} carries no mass
        }
        if spec.is_exclusion() && win.at(0) == 1 {
            continue;
        }
        let (_, bl) = spec.eval_rates(asym.n, &win);
        // eta^{1,0}: move one particle from site 1 to site 0
        let mut moved = w.clone();
        moved[(0 - offset) as usize] += 1;
        moved[(1 - offset) as usize] -= 1;
        let moved_win = crate::lattice::Window { values: &moved, offset };
        let (br_moved, _) = spec.eval_rates(asym.n, &moved_win);
        let ratio = measure.swap_ratio(&w, offset)?;
        max_violation = max_violation.max((br_moved * ratio - bl).abs());
        patterns += 1;
    }
    Ok(CheckReport { max_violation, patterns })
}
