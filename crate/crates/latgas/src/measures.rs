//! Invariant and tilted measures: exact samplers, moments, and the tilted
//! means `phi_f` with their first two density derivatives.
//!
//! Three kinds are supported: Bernoulli product, zero-range product with
//! marginal `alpha^k / (g(1)...g(k))`, and the nearest-neighbor Markov-Gibbs
//! measure of the speed-change model, represented by its 2x2 transition
//! matrix `P_lambda`.

use std::sync::Arc;

use rand::RngExt;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lattice::Configuration;
use crate::model::{Asymmetry, ModelSpec, RateFn};

/// Truncation tolerance for unbounded zero-range marginals.
pub const ZRP_TAIL_MASS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum MeasureError {
    #[error("density {0} outside the open interval (0, 1)")]
    BadDensity(f64),
    #[error("fugacity alpha = {0} is outside the convergence region of Z(alpha)")]
    AlphaOutOfRange(f64),
    #[error("tilt outside the working range: {0}")]
    TiltOutOfRange(f64),
    #[error("transition matrix is not stochastic or not strictly positive")]
    BadTransitionMatrix,
    #[error("measure and model family are incompatible: {0}")]
    FamilyMismatch(String),
    #[error("perturbed site mean {0} outside [0, 1]")]
    BadSiteMean(f64),
}

/// Marginal table of a product measure, truncated and renormalized.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Marginal {
    pub pmf: Vec<f64>,
    cdf: Vec<f64>,
    pub mean: f64,
}

impl Marginal {
    pub fn new(mut pmf: Vec<f64>) -> Self {
        let total: f64 = pmf.iter().sum();
        for p in pmf.iter_mut() {
            *p /= total;
        }
        let mut cdf = Vec::with_capacity(pmf.len());
        let mut acc = 0.0;
        for &p in &pmf {
            acc += p;
            cdf.push(acc);
        }
        let mean = pmf.iter().enumerate().map(|(k, &p)| k as f64 * p).sum();
        Marginal { pmf, cdf, mean }
    }

    pub fn bernoulli(rho: f64) -> Self {
        Marginal::new(vec![1.0 - rho, rho])
    }

    /// Zero-range marginal `alpha^k / (g(1)..g(k))`, truncated at tail mass
    /// `ZRP_TAIL_MASS`.
    pub fn zrp(g: &RateFn, alpha: f64) -> Result<Self, MeasureError> {
        if alpha < 0.0 {
            return Err(MeasureError::AlphaOutOfRange(alpha));
        }
        let mut w = vec![1.0];
        let mut total = 1.0;
        let mut term: f64 = 1.0;
        for k in 1..=4096u32 {
            term *= alpha / g.eval(k);
            w.push(term);
            total += term;
            if term < total * ZRP_TAIL_MASS && k as usize > 8 {
                return Ok(Marginal::new(w));
            }
            if !term.is_finite() {
                break;
            }
        }
        Err(MeasureError::AlphaOutOfRange(alpha))
    }

    pub fn max_occupancy(&self) -> u32 {
        (self.pmf.len() - 1) as u32
    }

    #[inline]
    pub fn p(&self, k: u32) -> f64 {
        self.pmf.get(k as usize).copied().unwrap_or(0.0)
    }

    pub fn variance(&self) -> f64 {
        self.central_moment(2)
    }

    pub fn central_moment(&self, order: u32) -> f64 {
        self.pmf
            .iter()
            .enumerate()
            .map(|(k, &p)| (k as f64 - self.mean).powi(order as i32) * p)
            .sum()
    }

    pub fn sample<R: RngExt + ?Sized>(&self, rng: &mut R) -> u32 {
        let u: f64 = rng.random();
        match self.cdf.binary_search_by(|c| c.partial_cmp(&u).unwrap()) {
            Ok(i) | Err(i) => i.min(self.pmf.len() - 1) as u32,
        }
    }

    /// Exponential tilt `pmf(k) e^{lambda k}`, renormalized.
    pub fn tilted(&self, lambda: f64) -> Self {
        let pmf: Vec<f64> = self
            .pmf
            .iter()
            .enumerate()
            .map(|(k, &p)| p * (lambda * k as f64).exp())
            .collect();
        Marginal::new(pmf)
    }
}

/// Two-state stationary Markov chain, the transfer description of the
/// nearest-neighbor Gibbs measure.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Chain2 {
    /// Transition matrix rows: `p[i][j] = P(eta(x+1) = j | eta(x) = i)`.
    pub p: [[f64; 2]; 2],
    /// Stationary distribution.
    pub pi: [f64; 2],
    /// Second eigenvalue; correlations decay like `r^d`.
    pub r: f64,
}

impl Chain2 {
    pub fn new(p: [[f64; 2]; 2]) -> Result<Self, MeasureError> {
        for row in &p {
            if (row[0] + row[1] - 1.0).abs() > 1e-12 || row[0] <= 0.0 || row[1] <= 0.0 {
                return Err(MeasureError::BadTransitionMatrix);
            }
        }
        let denom = p[0][1] + p[1][0];
        let pi = [p[1][0] / denom, p[0][1] / denom];
        let r = p[0][0] + p[1][1] - 1.0;
        Ok(Chain2 { p, pi, r })
    }

    /// The transition matrix of the tilted Gibbs chain, built from
    /// `p1 = e^{beta/4 - lambda/2} + e^{-beta/4 + lambda/2}` and
    /// `p2 = e^{-beta/4 - lambda/2} + e^{beta/4 + lambda/2}`.
    pub fn from_gibbs(beta: f64, lambda: f64) -> Result<Self, MeasureError> {
        let (b4, l2) = (beta / 4.0, lambda / 2.0);
        let p1 = (b4 - l2).exp() + (-b4 + l2).exp();
        let p2 = (-b4 - l2).exp() + (b4 + l2).exp();
        Chain2::new([
            [(b4 - l2).exp() / p1, (-b4 + l2).exp() / p1],
            [(-b4 - l2).exp() / p2, (b4 + l2).exp() / p2],
        ])
    }

    /// `[P^d](i, j)` via the rank-one decomposition `P^d = Pi + r^d (I - Pi)`.
    #[inline]
    pub fn power(&self, d: u64, i: usize, j: usize) -> f64 {
        let rd = self.r.powi(d as i32);
        self.pi[j] + rd * ((i == j) as u64 as f64 - self.pi[j])
    }

    /// Probability of a contiguous pattern under the stationary chain.
    pub fn pattern_weight(&self, pattern: &[u32]) -> f64 {
        let mut w = self.pi[pattern[0] as usize];
        for k in 1..pattern.len() {
            w *= self.p[pattern[k - 1] as usize][pattern[k] as usize];
        }
        w
    }

    /// Exact sampling of the periodic Gibbs measure on a ring of `l` sites:
    /// the cyclic product of transition weights telescopes to the ring Gibbs
    /// weight, so marginal-plus-bridge sampling through matrix powers is
    /// exact.
    pub fn sample_ring<R: RngExt + ?Sized>(&self, l: usize, rng: &mut R) -> Vec<u32> {
        let trace = self.power(l as u64, 0, 0) + self.power(l as u64, 1, 1);
        let p0 = self.power(l as u64, 0, 0) / trace;
        let mut out = vec![0u32; l];
        let first = if rng.random::<f64>() < p0 { 0 } else { 1 };
        out[0] = first as u32;
        let mut prev = first;
        for i in 1..l {
            let steps_left = (l - i) as u64;
            let denom = self.power(steps_left + 1, prev, first);
            let p_one = self.p[prev][1] * self.power(steps_left, 1, first) / denom;
            let v = if rng.random::<f64>() < p_one { 1 } else { 0 };
            out[i] = v as u32;
            prev = v;
        }
        out
    }
}

/// An invariant or tilted measure with exact sampling and moments.
#[derive(Debug, Clone)]
pub enum MeasureSpec {
    Bernoulli { rho: f64, marginal: Marginal },
    ProductZrp { g: RateFn, alpha: f64, marginal: Marginal },
    MarkovGibbs { beta: f64, lambda: f64, chain: Chain2 },
}

impl MeasureSpec {
    pub fn bernoulli(rho: f64) -> Result<Self, MeasureError> {
        if !(rho > 0.0 && rho < 1.0) {
            return Err(MeasureError::BadDensity(rho));
        }
        Ok(MeasureSpec::Bernoulli { rho, marginal: Marginal::bernoulli(rho) })
    }

    pub fn product_zrp(g: RateFn, alpha: f64) -> Result<Self, MeasureError> {
        let marginal = Marginal::zrp(&g, alpha)?;
        Ok(MeasureSpec::ProductZrp { g, alpha, marginal })
    }

    /// Zero-range measure indexed by density instead of fugacity.
    pub fn product_zrp_by_density(g: RateFn, rho: f64) -> Result<Self, MeasureError> {
        let alpha = zrp_density_to_fugacity(&g, rho)?;
        MeasureSpec::product_zrp(g, alpha)
    }

    pub fn markov_gibbs(beta: f64, lambda: f64) -> Result<Self, MeasureError> {
        let chain = Chain2::from_gibbs(beta, lambda)?;
        Ok(MeasureSpec::MarkovGibbs { beta, lambda, chain })
    }

    /// Mean density `rho = E[eta(0)]`.
    pub fn rho(&self) -> f64 {
        match self {
            MeasureSpec::Bernoulli { rho, .. } => *rho,
            MeasureSpec::ProductZrp { marginal, .. } => marginal.mean,
            MeasureSpec::MarkovGibbs { chain, .. } => chain.pi[1],
        }
    }

    pub fn is_product(&self) -> bool {
        !matches!(self, MeasureSpec::MarkovGibbs { .. })
    }

    /// Largest occupancy carrying mass, used by enumerations.
    pub fn enumeration_cap(&self) -> u32 {
        match self {
            MeasureSpec::Bernoulli { .. } | MeasureSpec::MarkovGibbs { .. } => 1,
            MeasureSpec::ProductZrp { marginal, .. } => marginal.max_occupancy(),
        }
    }

    pub fn site_variance(&self) -> f64 {
        match self {
            MeasureSpec::Bernoulli { rho, .. } => rho * (1.0 - rho),
            MeasureSpec::ProductZrp { marginal, .. } => marginal.variance(),
            MeasureSpec::MarkovGibbs { chain, .. } => chain.pi[0] * chain.pi[1],
        }
    }

    /// Block variance `sigma^2_l = Var(sum_{|x| <= l} eta(x)) / (2l + 1)`.
    pub fn sigma2_block(&self, ell: u32) -> f64 {
        let m = 2 * ell as u64 + 1;
        match self {
            MeasureSpec::MarkovGibbs { chain, .. } => {
                let c0 = chain.pi[0] * chain.pi[1];
                let mut acc = m as f64 * c0;
                for d in 1..m {
                    acc += 2.0 * (m - d) as f64 * c0 * chain.r.powi(d as i32);
                }
                acc / m as f64
            }
            _ => self.site_variance(),
        }
    }

    /// `sigma^2(rho) = lim sigma^2_l`.
    pub fn sigma2_inf(&self) -> f64 {
        match self {
            MeasureSpec::MarkovGibbs { chain, .. } => {
                chain.pi[0] * chain.pi[1] * (1.0 + chain.r) / (1.0 - chain.r)
            }
            _ => self.site_variance(),
        }
    }

    /// Draws a ring configuration; i.i.d. sites for product kinds, exact
    /// transfer-matrix ring sampling for the Markov kind.
    pub fn sample<R: RngExt + ?Sized>(&self, l: usize, rng: &mut R) -> Configuration {
        match self {
            MeasureSpec::Bernoulli { marginal, .. } | MeasureSpec::ProductZrp { marginal, .. } => {
                Configuration::new((0..l).map(|_| marginal.sample(rng)).collect())
            }
            MeasureSpec::MarkovGibbs { chain, .. } => Configuration::new(chain.sample_ring(l, rng)),
        }
    }

    /// Radon-Nikodym ratio `nu(eta^{1,0}) / nu(eta)` for moving one particle
    /// from local site 1 to local site 0; `window` holds occupancies for
    /// local coordinates `offset..offset + window.len()`.
    pub fn swap_ratio(&self, window: &[u32], offset: i64) -> Result<f64, MeasureError> {
        let idx = |x: i64| (x - offset) as usize;
        let e0 = window[idx(0)];
        let e1 = window[idx(1)];
        assert!(e1 > 0, "swap_ratio needs a particle at site 1");
        match self {
            MeasureSpec::Bernoulli { marginal, .. } | MeasureSpec::ProductZrp { marginal, .. } => {
                Ok(marginal.p(e0 + 1) * marginal.p(e1 - 1) / (marginal.p(e0) * marginal.p(e1)))
            }
            MeasureSpec::MarkovGibbs { chain, .. } => {
                let (a, b) = (window[idx(-1)] as usize, window[idx(2)] as usize);
                let (x, y) = (e0 as usize, e1 as usize);
                let before = chain.p[a][x] * chain.p[x][y] * chain.p[y][b];
                let after = chain.p[a][y] * chain.p[y][x] * chain.p[x][b];
                Ok(after / before)
            }
        }
    }

    /// The tilted measure at density `z` (paper's `nu_z`), staying inside
    /// the same family.
    pub fn tilt_to_density(&self, z: f64) -> Result<MeasureSpec, MeasureError> {
        match self {
            MeasureSpec::Bernoulli { .. } => MeasureSpec::bernoulli(z),
            MeasureSpec::ProductZrp { g, .. } => MeasureSpec::product_zrp_by_density(g.clone(), z),
            MeasureSpec::MarkovGibbs { beta, .. } => {
                let lambda = gibbs_density_to_lambda(*beta, z)?;
                MeasureSpec::markov_gibbs(*beta, lambda)
            }
        }
    }

    /// Expectation of a local function by exact enumeration over its
    /// support window.
    pub fn expect_local(&self, f: &LocalFunction) -> f64 {
        self.window_expect(f.lo, f.hi, |w| f.eval(w))
    }

    pub fn lp_norm(&self, f: &LocalFunction, p: f64) -> f64 {
        self.window_expect(f.lo, f.hi, |w| f.eval(w).abs().powf(p)).powf(1.0 / p)
    }

    /// `E[ phi(eta(lo..=hi)) ]` by exact enumeration.
    pub fn window_expect(&self, lo: i64, hi: i64, phi: impl Fn(&[u32]) -> f64) -> f64 {
        let width = (hi - lo + 1) as usize;
        let cap = self.enumeration_cap();
        let mut acc = 0.0;
        for w in crate::model::enumerate_windows(width, cap) {
            let weight = self.pattern_weight(&w);
            if weight > 0.0 {
                acc += weight * phi(&w);
            }
        }
        acc
    }

    /// Probability of a contiguous occupancy pattern.
    pub fn pattern_weight(&self, pattern: &[u32]) -> f64 {
        match self {
            MeasureSpec::Bernoulli { marginal, .. } | MeasureSpec::ProductZrp { marginal, .. } => {
                pattern.iter().map(|&k| marginal.p(k)).product()
            }
            MeasureSpec::MarkovGibbs { chain, .. } => chain.pattern_weight(pattern),
        }
    }
}

/// `rho(alpha) = alpha Z'(alpha) / Z(alpha)`, the mean of the zero-range
/// marginal.
pub fn zrp_fugacity_to_density(g: &RateFn, alpha: f64) -> Result<f64, MeasureError> {
    Ok(Marginal::zrp(g, alpha)?.mean)
}

/// Inverts the strictly increasing density map by bisection; fugacities at
/// or beyond the convergence radius count as overshooting.
pub fn zrp_density_to_fugacity(g: &RateFn, rho: f64) -> Result<f64, MeasureError> {
    if !(rho > 0.0) {
        return Err(MeasureError::BadDensity(rho));
    }
    let mut lo = 0.0;
    let mut hi = 1.0;
    loop {
        match zrp_fugacity_to_density(g, hi) {
            Ok(d) if d < rho => {
                lo = hi;
                hi *= 2.0;
                if hi > 1e9 {
                    return Err(MeasureError::BadDensity(rho));
                }
            }
            _ => break,
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        match zrp_fugacity_to_density(g, mid) {
            Ok(d) if d < rho => lo = mid,
            _ => hi = mid,
        }
    }
    let alpha = 0.5 * (lo + hi);
    let back = zrp_fugacity_to_density(g, alpha)?;
    if (back - rho).abs() > 1e-8 * rho.max(1.0) {
        return Err(MeasureError::BadDensity(rho));
    }
    Ok(alpha)
}

/// Density of the tilted Gibbs chain as a function of lambda.
pub fn gibbs_lambda_to_density(beta: f64, lambda: f64) -> Result<f64, MeasureError> {
    Ok(Chain2::from_gibbs(beta, lambda)?.pi[1])
}

/// Working tilt range for the Markov kind.
pub const GIBBS_LAMBDA_MAX: f64 = 4.0;

/// Solves `E_{nu^lambda}[eta(0)] = z` by bisection on `|lambda| <= 4`;
/// the density is strictly increasing in lambda for the transfer family.
pub fn gibbs_density_to_lambda(beta: f64, z: f64) -> Result<f64, MeasureError> {
    let lo_z = gibbs_lambda_to_density(beta, -GIBBS_LAMBDA_MAX)?;
    let hi_z = gibbs_lambda_to_density(beta, GIBBS_LAMBDA_MAX)?;
    if !(z > lo_z && z < hi_z) {
        return Err(MeasureError::TiltOutOfRange(z));
    }
    let (mut lo, mut hi) = (-GIBBS_LAMBDA_MAX, GIBBS_LAMBDA_MAX);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if gibbs_lambda_to_density(beta, mid)? < z {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// A function of finitely many occupancies, with support `lo..=hi`.
#[derive(Clone)]
pub struct LocalFunction {
    pub lo: i64,
    pub hi: i64,
    pub name: String,
    eval: Arc<dyn Fn(&[u32]) -> f64 + Send + Sync>,
}

impl std::fmt::Debug for LocalFunction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "LocalFunction({}, support [{}, {}])", self.name, self.lo, self.hi)
    }
}

impl LocalFunction {
    pub fn new(
        name: &str,
        lo: i64,
        hi: i64,
        eval: impl Fn(&[u32]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        assert!(hi >= lo);
        LocalFunction { lo, hi, name: name.to_string(), eval: Arc::new(eval) }
    }

    /// Evaluate on a window slice indexed by `lo..=hi`.
    #[inline]
    pub fn eval(&self, window: &[u32]) -> f64 {
        debug_assert_eq!(window.len() as i64, self.hi - self.lo + 1);
        (self.eval)(window)
    }

    /// Evaluate at the origin of a ring configuration, shifted by `x`.
    pub fn eval_at(&self, config: &Configuration, x: i64) -> f64 {
        let w: Vec<u32> = (self.lo..=self.hi).map(|j| config.get(x + j)).collect();
        self.eval(&w)
    }

    pub fn width(&self) -> usize {
        (self.hi - self.lo + 1) as usize
    }

    /// `eta(0) - rho`, the density coordinate.
    pub fn density_centered(rho: f64) -> Self {
        LocalFunction::new("eta0-rho", 0, 0, move |w| w[0] as f64 - rho)
    }

    /// `(eta(1) - rho)(eta(2) - rho)`.
    pub fn pair_centered(rho: f64) -> Self {
        LocalFunction::new("pair", 1, 2, move |w| (w[0] as f64 - rho) * (w[1] as f64 - rho))
    }

    /// The symmetrized bond rate `b = b^R_0 + b^L_0` of a model.
    pub fn bond_rate(spec: &ModelSpec, asym: &Asymmetry) -> Self {
        let r = spec.range;
        let spec = spec.clone();
        let n = asym.n;
        LocalFunction::new("b", -r, r, move |w| {
            let win = crate::lattice::Window { values: w, offset: -r };
            let (br, bl) = spec.eval_rates(n, &win);
            br + bl
        })
    }

    /// The gradient function `c` of a model.
    pub fn c_fn(spec: &ModelSpec, asym: &Asymmetry) -> Self {
        let r = spec.range;
        let spec = spec.clone();
        let n = asym.n;
        LocalFunction::new("c", -r, r, move |w| {
            let win = crate::lattice::Window { values: w, offset: -r };
            spec.c_fn(n, &win)
        })
    }

    /// `V_b = b - phi_b(rho) - phi_b'(rho)(eta(0) - rho)`, the centered rate
    /// entering the Boltzmann-Gibbs analysis.
    pub fn v_b(spec: &ModelSpec, asym: &Asymmetry, measure: &MeasureSpec) -> Self {
        let b = LocalFunction::bond_rate(spec, asym);
        let tm = phi_derivatives(&b, measure);
        let rho = measure.rho();
        let r = spec.range;
        let spec = spec.clone();
        let n = asym.n;
        LocalFunction::new("V_b", -r, r, move |w| {
            let win = crate::lattice::Window { values: w, offset: -r };
            let (br, bl) = spec.eval_rates(n, &win);
            br + bl - tm.phi - tm.phi1 * (w[r as usize] as f64 - rho)
        })
    }
}

/// `phi_f(rho)` and its first two density derivatives.
#[derive(Debug, Clone, Copy)]
pub struct TiltedMeans {
    pub phi: f64,
    pub phi1: f64,
    pub phi2: f64,
    pub method: PhiMethod,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhiMethod {
    ExactEnumeration,
    LambdaFiniteDifference,
}

/// First and second derivatives of the natural tilt `lambda(z)` at the
/// measure's own density: `lambda'(z) = 1 / c2`, `lambda''(z) = -c3 / c2^3`
/// where `c2 = sum_x Cov(eta(0), eta(x))` is the susceptibility and `c3`
/// the matching third joint cumulant sum. For product measures these are
/// the single-site cumulants; for the Markov kind the spatial sums close
/// geometrically. (The natural parameter is the exponential-tilt one; it
/// does not coincide with the lambda labeling the transfer matrix.)
fn lambda_derivatives(measure: &MeasureSpec) -> (f64, f64) {
    let x0 = LocalFunction::density_centered(measure.rho());
    let (c2, c3) = centered_sums(&x0, measure);
    (1.0 / c2, -c3 / c2.powi(3))
}

/// Centered cross-moments `S_k = sum_x E[(f - E f) prod (eta(x_i) - rho)]`
/// needed by the tilted-mean derivative formulas. For product measures the
/// spatial sums truncate exactly to the support; for the Markov kind the
/// geometric tails are summed in closed form through the rank-one structure
/// of `P^d`.
fn centered_sums(f: &LocalFunction, measure: &MeasureSpec) -> (f64, f64) {
    let rho = measure.rho();
    let mean = measure.expect_local(f);
    match measure {
        MeasureSpec::Bernoulli { .. } | MeasureSpec::ProductZrp { .. } => {
            let width = f.width();
            let mut s1 = 0.0;
            let mut s2 = 0.0;
            for w in crate::model::enumerate_windows(width, measure.enumeration_cap()) {
                let weight = measure.pattern_weight(&w);
                if weight == 0.0 {
                    continue;
                }
                let fb = f.eval(&w) - mean;
                let total: f64 = w.iter().map(|&k| k as f64 - rho).sum();
                s1 += weight * fb * total;
                s2 += weight * fb * total * total;
            }
            (s1, s2)
        }
        MeasureSpec::MarkovGibbs { chain, .. } => {
            // Window moments by enumeration; E[X_v | F_u] = r^{v-u} X_u for
            // the centered occupancy X closes every tail sum geometrically.
            let width = f.width();
            let r = chain.r;
            let geo = r / (1.0 - r);
            let pi1 = chain.pi[1];
            let mut s1_win = 0.0;
            let mut a_right = 0.0; // E[fb X_{hi}]
            let mut a_left = 0.0; // E[fb X_{lo}]
            let mut d_ww = 0.0; // sum_{x,y in W} E[fb X_x X_y]
            let mut d_wr = 0.0; // sum_{x in W} E[fb X_x X_{hi}]
            let mut d_wl = 0.0; // sum_{x in W} E[fb X_x X_{lo}]
            let mut c_lr = 0.0; // E[fb X_{lo} X_{hi}]
            for w in crate::model::enumerate_windows(width, 1) {
                let weight = chain.pattern_weight(&w);
                let fb = f.eval(&w) - mean;
                if weight == 0.0 || fb == 0.0 {
                    continue;
                }
                let xs: Vec<f64> = w.iter().map(|&k| k as f64 - pi1).collect();
                let total: f64 = xs.iter().sum();
                let (x_lo, x_hi) = (xs[0], xs[width - 1]);
                s1_win += weight * fb * total;
                a_right += weight * fb * x_hi;
                a_left += weight * fb * x_lo;
                d_ww += weight * fb * total * total;
                d_wr += weight * fb * total * x_hi;
                d_wl += weight * fb * total * x_lo;
                c_lr += weight * fb * x_lo * x_hi;
            }
            let s1 = s1_win + geo * (a_right + a_left);
            // X^2 = (1 - 2 pi1) X + pi1 (1 - pi1) and E[fb] = 0 collapse the
            // same-side diagonal terms.
            let skew1 = 1.0 - 2.0 * pi1;
            let same_side = skew1 * (geo + 2.0 * geo * geo);
            let s2 = d_ww
                + 2.0 * geo * (d_wr + d_wl)
                + same_side * (a_right + a_left)
                + 2.0 * geo * geo * c_lr;
            (s1, s2)
        }
    }
}

/// Tilted mean and derivatives at the measure's own density, by exact
/// enumeration of the covariance formulas.
pub fn phi_derivatives(f: &LocalFunction, measure: &MeasureSpec) -> TiltedMeans {
    let (l1, l2) = lambda_derivatives(measure);
    let (s1, s2) = centered_sums(f, measure);
    TiltedMeans {
        phi: measure.expect_local(f),
        phi1: l1 * s1,
        phi2: l1 * l1 * s2 + l2 * s1,
        method: PhiMethod::ExactEnumeration,
    }
}

/// Cross-validation route: centered finite differences of `z -> E_{nu_z}[f]`
/// with the tilt solved by bisection.
pub fn phi_derivatives_fd(
    f: &LocalFunction,
    measure: &MeasureSpec,
    h: f64,
) -> Result<TiltedMeans, MeasureError> {
    let z0 = measure.rho();
    let phi_at = |z: f64| -> Result<f64, MeasureError> {
        Ok(measure.tilt_to_density(z)?.expect_local(f))
    };
    let (p2, p1, p0, m1, m2) = (
        phi_at(z0 + 2.0 * h)?,
        phi_at(z0 + h)?,
        phi_at(z0)?,
        phi_at(z0 - h)?,
        phi_at(z0 - 2.0 * h)?,
    );
    Ok(TiltedMeans {
        phi: p0,
        phi1: (-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * h),
        phi2: (-p2 + 16.0 * p1 - 30.0 * p0 + 16.0 * m1 - m2) / (12.0 * h * h),
        method: PhiMethod::LambdaFiniteDifference,
    })
}

/// Perturbed product initial state with slowly varying means
/// `rho + kappa(x/n) / sqrt(n)`; returns the sample together with the exact
/// relative entropy `H(mu^n; nu_rho)` of the perturbed product law.
pub fn sample_perturbed_initial<R: RngExt + ?Sized>(
    rho: f64,
    kappa: &dyn Fn(f64) -> f64,
    n: u32,
    l: usize,
    center: i64,
    rng: &mut R,
) -> Result<(Configuration, f64), MeasureError> {
    let sqrt_n = (n as f64).sqrt();
    let mut occ = Vec::with_capacity(l);
    let mut entropy = 0.0;
    for x in 0..l {
        let u = (x as i64 - center) as f64 / n as f64;
        let p = rho + kappa(u) / sqrt_n;
        if !(0.0..=1.0).contains(&p) {
            return Err(MeasureError::BadSiteMean(p));
        }
        occ.push(u32::from(rng.random::<f64>() < p));
        entropy += bernoulli_kl(p, rho);
    }
    Ok((Configuration::new(occ), entropy))
}

fn bernoulli_kl(p: f64, q: f64) -> f64 {
    let mut kl = 0.0;
    if p > 0.0 {
        kl += p * (p / q).ln();
    }
    if p < 1.0 {
        kl += (1.0 - p) * ((1.0 - p) / (1.0 - q)).ln();
    }
    kl
}
