//! Exact linear algebra on enumerable state spaces: generator matrices,
//! stationarity and adjoint identities, canonical spectral gaps
//! `W(k, l, xi, n)`, `H_{-1,n}` norms, and equivalence-of-ensembles error
//! curves.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::lattice::Occupancies;
use crate::measures::{Marginal, MeasureSpec};
use crate::model::{Asymmetry, ModelSpec};

#[derive(Debug, Error)]
pub enum ExactError {
    #[error("state space too large: {0} states")]
    TooLarge(usize),
    #[error("vector has nonzero mean {0} on the conserved sector")]
    NotMeanZero(f64),
    #[error("dimension mismatch")]
    Dimension,
}

/// Hard cap on enumerable spaces.
pub const MAX_STATES: usize = 200_000;

fn compositions(slots: usize, total: u32, cap: u32, out: &mut Vec<Vec<u32>>, prefix: &mut Vec<u32>) {
    if slots == 1 {
        if total <= cap {
            prefix.push(total);
            out.push(prefix.clone());
            prefix.pop();
        }
        return;
    }
    let lo = total.saturating_sub(cap * (slots as u32 - 1));
    for v in lo..=total.min(cap) {
        prefix.push(v);
        compositions(slots - 1, total - v, cap, out, prefix);
        prefix.pop();
    }
}

/// Ring of `l` sites, either the full occupancy cube or one conserved
/// sector.
pub struct RingSpace {
    pub l: usize,
    pub states: Vec<Vec<u32>>,
    index: HashMap<Vec<u32>, usize>,
}

impl RingSpace {
    pub fn full(l: usize, cap: u32) -> Result<Self, ExactError> {
        let count = (cap as usize + 1).pow(l as u32);
        if count > MAX_STATES {
            return Err(ExactError::TooLarge(count));
        }
        let states: Vec<Vec<u32>> = crate::model::enumerate_windows(l, cap).collect();
        Ok(RingSpace::from_states(l, states))
    }

    pub fn sector(l: usize, k: u32, cap: u32) -> Result<Self, ExactError> {
        let mut states = Vec::new();
        compositions(l, k, cap, &mut states, &mut Vec::new());
        if states.is_empty() || states.len() > MAX_STATES {
            return Err(ExactError::TooLarge(states.len()));
        }
        Ok(RingSpace::from_states(l, states))
    }

    fn from_states(l: usize, states: Vec<Vec<u32>>) -> Self {
        let index = states.iter().cloned().enumerate().map(|(i, s)| (s, i)).collect();
        RingSpace { l, states, index }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

struct RingView<'a> {
    occ: &'a [u32],
    bond: i64,
}
impl Occupancies for RingView<'_> {
    fn at(&self, x: i64) -> u32 {
        let l = self.occ.len() as i64;
        self.occ[(self.bond + x).rem_euclid(l) as usize]
    }
}

/// Dense generator of the ring dynamics with the diffusive `n^2 p_n`,
/// `n^2 q_n` weights; rows sum to zero.
pub fn ring_generator(spec: &ModelSpec, asym: &Asymmetry, space: &RingSpace) -> DMatrix<f64> {
    let m = space.len();
    let (wr, wl) = asym.directed_weights();
    let mut gen = DMatrix::<f64>::zeros(m, m);
    for (i, state) in space.states.iter().enumerate() {
        for bond in 0..space.l {
            let view = RingView { occ: state, bond: bond as i64 };
            let (br, bl) = spec.eval_rates(asym.n, &view);
            let next = (bond + 1) % space.l;
            if br > 0.0 {
                let mut to = state.clone();
                to[bond] -= 1;
                to[next] += 1;
                if let Some(&j) = space.index.get(&to) {
                    gen[(i, j)] += wr * br;
                    gen[(i, i)] -= wr * br;
                }
            }
            if bl > 0.0 && state[next] > 0 {
                let mut to = state.clone();
                to[next] -= 1;
                to[bond] += 1;
                if let Some(&j) = space.index.get(&to) {
                    gen[(i, j)] += wl * bl;
                    gen[(i, i)] -= wl * bl;
                }
            }
        }
    }
    gen
}

/// Normalized invariant-measure vector restricted to the space.
pub fn ring_measure(measure: &MeasureSpec, space: &RingSpace) -> DVector<f64> {
    let mut v = DVector::<f64>::zeros(space.len());
    for (i, state) in space.states.iter().enumerate() {
        v[i] = match measure {
            MeasureSpec::MarkovGibbs { chain, .. } => {
                // cyclic product of transition weights = periodic Gibbs weight
                let mut w = 1.0;
                for s in 0..space.l {
                    w *= chain.p[state[s] as usize][state[(s + 1) % space.l] as usize];
                }
                w
            }
            _ => measure.pattern_weight(state),
        };
    }
    let total = v.sum();
    v / total
}

/// `max_j |(nu^T L)_j| / n^2`: stationarity residual per unit diffusive rate.
pub fn stationarity_check(gen: &DMatrix<f64>, nu: &DVector<f64>, n: u32) -> f64 {
    let res = gen.transpose() * nu;
    res.amax() / (n as f64 * n as f64)
}

/// `max |(D^{-1} L(a)^T D) - L(-a)| / n^2`: adjoint identity residual.
pub fn adjoint_check(
    spec: &ModelSpec,
    asym: &Asymmetry,
    measure: &MeasureSpec,
    space: &RingSpace,
) -> Result<f64, crate::model::ModelError> {
    let gen_a = ring_generator(spec, asym, space);
    let flipped = Asymmetry::new(-asym.a, asym.gamma, asym.n)?;
    let gen_neg = ring_generator(spec, &flipped, space);
    let nu = ring_measure(measure, space);
    let m = space.len();
    let mut worst: f64 = 0.0;
    for i in 0..m {
        for j in 0..m {
            let adj = nu[j] * gen_a[(j, i)] / nu[i];
            worst = worst.max((adj - gen_neg[(i, j)]).abs());
        }
    }
    Ok(worst / (asym.n as f64 * asym.n as f64))
}

/// Detailed-balance residual of the ring generator at `a = 0`:
/// `max |nu_i L_ij - nu_j L_ji| / n^2`.
pub fn reversibility_check(
    spec: &ModelSpec,
    n: u32,
    measure: &MeasureSpec,
    space: &RingSpace,
) -> f64 {
    let asym = Asymmetry::symmetric(n);
    let gen = ring_generator(spec, &asym, space);
    let nu = ring_measure(measure, space);
    let m = space.len();
    let mut worst: f64 = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                worst = worst.max((nu[i] * gen[(i, j)] - nu[j] * gen[(j, i)]).abs());
            }
        }
    }
    worst / (n as f64 * n as f64)
}

/// Segment `Lambda_ell = {-ell..ell}` with `k` particles and frozen outside
/// variables.
pub struct SegmentSpace {
    pub ell: i64,
    pub k: u32,
    /// occupancies at `-ell-len .. -ell-1`, nearest site last
    pub xi_left: Vec<u32>,
    /// occupancies at `ell+1 .. ell+len`, nearest site first
    pub xi_right: Vec<u32>,
    pub states: Vec<Vec<u32>>,
    index: HashMap<Vec<u32>, usize>,
}

impl SegmentSpace {
    pub fn new(
        ell: i64,
        k: u32,
        cap: u32,
        xi_left: Vec<u32>,
        xi_right: Vec<u32>,
    ) -> Result<Self, ExactError> {
        let slots = (2 * ell + 1) as usize;
        let mut states = Vec::new();
        compositions(slots, k, cap, &mut states, &mut Vec::new());
        if states.is_empty() || states.len() > MAX_STATES {
            return Err(ExactError::TooLarge(states.len()));
        }
        let index = states.iter().cloned().enumerate().map(|(i, s)| (s, i)).collect();
        Ok(SegmentSpace { ell, k, xi_left, xi_right, states, index })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

struct SegmentView<'a> {
    space: &'a SegmentSpace,
    occ: &'a [u32],
    origin: i64,
}
impl Occupancies for SegmentView<'_> {
    fn at(&self, x: i64) -> u32 {
        let pos = self.origin + x;
        let ell = self.space.ell;
        if pos < -ell {
            let i = pos + ell + self.space.xi_left.len() as i64;
            if i < 0 {
                0
            } else {
                self.space.xi_left[i as usize]
            }
        } else if pos > ell {
            let i = (pos - ell - 1) as usize;
            self.space.xi_right.get(i).copied().unwrap_or(0)
        } else {
            self.occ[(pos + ell) as usize]
        }
    }
}

/// Sparse generator rows (diagonal included).
pub struct Sparse {
    pub dim: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl Sparse {
    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        for (i, row) in self.rows.iter().enumerate() {
            let mut acc = 0.0;
            for &(j, v) in row {
                acc += v * x[j];
            }
            y[i] = acc;
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.dim, self.dim);
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, v) in row {
                m[(i, j)] += v;
            }
        }
        m
    }
}

/// Canonical symmetric generator `S` on the segment hyperplane: jumps
/// `x -> x+1` at rate `b^R_x / 2` and `x+1 -> x` at rate `b^L_x / 2` for
/// bonds inside `Lambda_ell`, with the frozen boundary supplying constraint
/// sites. Unscaled (no `n^2`); `n` enters only through the rates.
pub fn segment_generator(spec: &ModelSpec, n: u32, space: &SegmentSpace) -> Sparse {
    let m = space.len();
    let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); m];
    for (i, state) in space.states.iter().enumerate() {
        let mut diag = 0.0;
        for x in -space.ell..space.ell {
            let view = SegmentView { space, occ: state, origin: x };
            let (br, bl) = spec.eval_rates(n, &view);
            let slot = (x + space.ell) as usize;
            if br > 0.0 {
                let mut to = state.clone();
                to[slot] -= 1;
                to[slot + 1] += 1;
                let j = space.index[&to];
                rows[i].push((j, br / 2.0));
                diag -= br / 2.0;
            }
            if bl > 0.0 && state[slot + 1] > 0 {
                let mut to = state.clone();
                to[slot + 1] -= 1;
                to[slot] += 1;
                let j = space.index[&to];
                rows[i].push((j, bl / 2.0));
                diag -= bl / 2.0;
            }
        }
        rows[i].push((i, diag));
    }
    Sparse { dim: m, rows }
}

/// Canonical measure on the segment: the invariant measure conditioned on
/// the hyperplane and the frozen boundary.
pub fn segment_measure(measure: &MeasureSpec, space: &SegmentSpace) -> Vec<f64> {
    let mut w: Vec<f64> = space
        .states
        .iter()
        .map(|state| match measure {
            MeasureSpec::MarkovGibbs { chain, .. } => {
                let a = *space.xi_left.last().unwrap_or(&0) as usize;
                let b = *space.xi_right.first().unwrap_or(&0) as usize;
                let mut p = chain.p[a][state[0] as usize];
                for win in state.windows(2) {
                    p *= chain.p[win[0] as usize][win[1] as usize];
                }
                p * chain.p[state[state.len() - 1] as usize][b]
            }
            _ => measure.pattern_weight(state),
        })
        .collect();
    let total: f64 = w.iter().sum();
    for v in w.iter_mut() {
        *v /= total;
    }
    w
}

/// `max |nu_i S_ij - nu_j S_ji|`: nu-symmetry of the canonical generator,
/// condition (R2) in matrix form.
pub fn segment_symmetry_residual(s: &Sparse, nu: &[f64]) -> f64 {
    let dense = s.to_dense();
    let mut worst: f64 = 0.0;
    for i in 0..s.dim {
        for j in 0..s.dim {
            worst = worst.max((nu[i] * dense[(i, j)] - nu[j] * dense[(j, i)]).abs());
        }
    }
    worst
}

fn symmetrized(s: &Sparse, nu: &[f64]) -> Sparse {
    let rows = s
        .rows
        .iter()
        .enumerate()
        .map(|(i, row)| row.iter().map(|&(j, v)| (j, -v * (nu[i] / nu[j]).sqrt())).collect())
        .collect();
    Sparse { dim: s.dim, rows }
}

/// Spectral gap report for a canonical segment generator.
#[derive(Debug, Clone, Copy)]
pub struct GapReport {
    /// second-smallest eigenvalue of `-S` (0 is always the smallest)
    pub gap: f64,
    /// `W = 1/gap`; zero on one-state spaces, infinite when reducible
    pub w: f64,
    pub dim: usize,
}

pub const DENSE_EIG_LIMIT: usize = 1500;

/// Spectral gap of `-S` in the nu-weighted inner product: dense eigensolve
/// below [`DENSE_EIG_LIMIT`] states, deflated Lanczos above.
pub fn spectral_gap(s: &Sparse, nu: &[f64]) -> Result<GapReport, ExactError> {
    if s.dim != nu.len() {
        return Err(ExactError::Dimension);
    }
    if s.dim == 1 {
        // one state: variance always vanishes, Poincare holds with W = 0
        return Ok(GapReport { gap: f64::INFINITY, w: 0.0, dim: 1 });
    }
    let a = symmetrized(s, nu);
    let gap = if s.dim <= DENSE_EIG_LIMIT {
        let mut eigs: Vec<f64> = nalgebra::SymmetricEigen::new(a.to_dense())
            .eigenvalues
            .iter()
            .copied()
            .collect();
        eigs.sort_by(|x, y| x.partial_cmp(y).unwrap());
        eigs[1]
    } else {
        lanczos_second_smallest(&a, nu)
    };
    let w = if gap > 1e-13 { 1.0 / gap } else { f64::INFINITY };
    Ok(GapReport { gap, w, dim: s.dim })
}

/// Smallest eigenvalue of the symmetrized PSD operator on the complement of
/// the ground state `sqrt(nu)`: Lanczos with full reorthogonalization.
fn lanczos_second_smallest(a: &Sparse, nu: &[f64]) -> f64 {
    let dim = a.dim;
    let mut ground: Vec<f64> = nu.iter().map(|v| v.sqrt()).collect();
    normalize(&mut ground);
    let mut rng_state = 0x1234_5678_9abc_def0u64;
    let mut v: Vec<f64> = (0..dim)
        .map(|_| (crate::engine::splitmix64(&mut rng_state) as f64 / u64::MAX as f64) - 0.5)
        .collect();
    project_out(&mut v, &ground);
    normalize(&mut v);
    let max_iter = 400.min(dim - 1);
    let mut basis: Vec<Vec<f64>> = vec![v];
    let mut alphas: Vec<f64> = Vec::new();
    let mut betas: Vec<f64> = Vec::new();
    let mut w = vec![0.0; dim];
    let mut last_theta = f64::INFINITY;
    for it in 0..max_iter {
        a.matvec(&basis[it], &mut w);
        let alpha = dot(&basis[it], &w);
        alphas.push(alpha);
        for (wj, bj) in w.iter_mut().zip(&basis[it]) {
            *wj -= alpha * bj;
        }
        if it > 0 {
            let beta_prev = betas[it - 1];
            for (wj, bj) in w.iter_mut().zip(&basis[it - 1]) {
                *wj -= beta_prev * bj;
            }
        }
        project_out(&mut w, &ground);
        for b in &basis {
            let c = dot(&w, b);
            if c != 0.0 {
                for (wj, bj) in w.iter_mut().zip(b) {
                    *wj -= c * bj;
                }
            }
        }
        let beta = norm(&w);
        if (it + 1) % 8 == 0 || beta < 1e-12 || it + 1 == max_iter {
            let theta = tridiag_smallest(&alphas, &betas);
            if (last_theta - theta).abs() <= 1e-11 * theta.abs().max(1e-8) || beta < 1e-12 {
                return theta;
            }
            last_theta = theta;
        }
        if beta < 1e-12 {
            break;
        }
        betas.push(beta);
        basis.push(w.iter().map(|x| x / beta).collect());
    }
    tridiag_smallest(&alphas, &betas)
}

fn tridiag_smallest(alphas: &[f64], betas: &[f64]) -> f64 {
    let m = alphas.len();
    let mut t = DMatrix::<f64>::zeros(m, m);
    for i in 0..m {
        t[(i, i)] = alphas[i];
        if i + 1 < m && i < betas.len() {
            t[(i, i + 1)] = betas[i];
            t[(i + 1, i)] = betas[i];
        }
    }
    nalgebra::SymmetricEigen::new(t)
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
fn normalize(a: &mut [f64]) {
    let n = norm(a);
    for x in a.iter_mut() {
        *x /= n;
    }
}
fn project_out(v: &mut [f64], unit: &[f64]) {
    let c = dot(v, unit);
    for (x, u) in v.iter_mut().zip(unit) {
        *x -= c * u;
    }
}

/// Power-iteration oracle for the gap: finds the top of the symmetrized
/// spectrum, then the top of the shifted operator on the complement of the
/// ground state. Slow; used to cross-check the solvers.
pub fn power_iteration_gap(s: &Sparse, nu: &[f64], iters: usize) -> f64 {
    let a = symmetrized(s, nu);
    let dim = a.dim;
    let mut ground: Vec<f64> = nu.iter().map(|v| v.sqrt()).collect();
    normalize(&mut ground);
    let mut rng_state = 42u64;
    let mut v: Vec<f64> = (0..dim)
        .map(|_| crate::engine::splitmix64(&mut rng_state) as f64 / u64::MAX as f64 - 0.5)
        .collect();
    normalize(&mut v);
    let mut w = vec![0.0; dim];
    let mut lam_max = 0.0;
    for _ in 0..iters {
        a.matvec(&v, &mut w);
        lam_max = dot(&v, &w);
        std::mem::swap(&mut v, &mut w);
        normalize(&mut v);
    }
    let mut u: Vec<f64> = (0..dim)
        .map(|_| crate::engine::splitmix64(&mut rng_state) as f64 / u64::MAX as f64 - 0.5)
        .collect();
    project_out(&mut u, &ground);
    normalize(&mut u);
    let mut top = 0.0;
    for _ in 0..iters {
        a.matvec(&u, &mut w);
        for i in 0..dim {
            w[i] = lam_max * u[i] - w[i];
        }
        project_out(&mut w, &ground);
        top = dot(&u, &w);
        std::mem::swap(&mut u, &mut w);
        normalize(&mut u);
    }
    lam_max - top
}

/// `||r||_{-1,n}^2 = <r, (-S_n)^+ r>_nu` with the convention `S_n = n^2 S`;
/// the pseudo-inverse acts on the mean-zero subspace. Eigendecomposition
/// below [`DENSE_EIG_LIMIT`], conjugate gradient above.
pub fn h_minus1_norm_sq(r: &[f64], s: &Sparse, nu: &[f64], n: u32) -> Result<f64, ExactError> {
    let dim = s.dim;
    if r.len() != dim || nu.len() != dim {
        return Err(ExactError::Dimension);
    }
    let mean: f64 = r.iter().zip(nu).map(|(x, w)| x * w).sum();
    let scale: f64 = r.iter().zip(nu).map(|(x, w)| x * x * w).sum::<f64>().sqrt();
    if mean.abs() > 1e-8 * scale.max(1e-300) {
        return Err(ExactError::NotMeanZero(mean));
    }
    let a = symmetrized(s, nu);
    let rt: Vec<f64> = r.iter().zip(nu).map(|(x, w)| x * w.sqrt()).collect();
    let mut ground: Vec<f64> = nu.iter().map(|v| v.sqrt()).collect();
    normalize(&mut ground);
    let inner = if dim <= DENSE_EIG_LIMIT {
        let eig = nalgebra::SymmetricEigen::new(a.to_dense());
        let mut acc = 0.0;
        for k in 0..dim {
            let lam = eig.eigenvalues[k];
            if lam <= 1e-12 {
                continue;
            }
            let comp: f64 = (0..dim).map(|i| eig.eigenvectors[(i, k)] * rt[i]).sum();
            acc += comp * comp / lam;
        }
        acc
    } else {
        // CG for A u = r~ on the complement of the ground state
        let mut u = vec![0.0; dim];
        let mut res = rt.clone();
        project_out(&mut res, &ground);
        let mut p = res.clone();
        let mut rs_old = dot(&res, &res);
        let rhs_norm = rs_old.sqrt();
        let mut ap = vec![0.0; dim];
        for _ in 0..20_000 {
            a.matvec(&p, &mut ap);
            project_out(&mut ap, &ground);
            let alpha = rs_old / dot(&p, &ap);
            for i in 0..dim {
                u[i] += alpha * p[i];
                res[i] -= alpha * ap[i];
            }
            let rs_new = dot(&res, &res);
            if rs_new.sqrt() <= 1e-11 * rhs_norm {
                break;
            }
            let beta = rs_new / rs_old;
            for i in 0..dim {
                p[i] = res[i] + beta * p[i];
            }
            rs_old = rs_new;
        }
        dot(&rt, &u)
    };
    Ok(inner / (n as f64 * n as f64))
}

/// Equivalence-of-ensembles machinery: exact conditional expectations given
/// block densities.
pub mod ee {
    use super::*;

    /// Iterated convolutions of a marginal pmf: `convs[m]` is the pmf of a
    /// sum of `m` i.i.d. sites.
    pub fn block_pmfs(marginal: &Marginal, m_max: usize) -> Vec<Vec<f64>> {
        let base = &marginal.pmf;
        let mut out: Vec<Vec<f64>> = vec![vec![1.0]];
        for m in 1..=m_max {
            let prev = &out[m - 1];
            let mut next = vec![0.0; prev.len() + base.len() - 1];
            for (i, &p) in prev.iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                for (j, &q) in base.iter().enumerate() {
                    next[i + j] += p * q;
                }
            }
            out.push(next);
        }
        out
    }

    /// Exact `E[f | sum_{x in 1..=m} eta(x) = k]` for a local `f` supported
    /// on `1..=w` inside the block, under a product measure.
    pub fn conditional_expectation(
        f: &crate::measures::LocalFunction,
        marginal: &Marginal,
        m: usize,
        convs: &[Vec<f64>],
    ) -> Vec<f64> {
        assert!(f.lo >= 1, "f must sit inside the block starting at site 1");
        let w = f.hi as usize;
        assert!(w <= m);
        let rest = &convs[m - w];
        let total = &convs[m];
        let cap = marginal.max_occupancy();
        let mut num = vec![0.0; total.len()];
        for window in crate::model::enumerate_windows(w, cap) {
            let weight: f64 = window.iter().map(|&v| marginal.p(v)).product();
            if weight == 0.0 {
                continue;
            }
            let wsum: usize = window.iter().map(|&v| v as usize).sum();
            let fval = f.eval(&window[(f.lo as usize - 1)..]);
            if fval == 0.0 {
                continue;
            }
            for (r, &pr) in rest.iter().enumerate() {
                num[wsum + r] += weight * fval * pr;
            }
        }
        num.iter().zip(total).map(|(n, t)| if *t > 0.0 { n / t } else { 0.0 }).collect()
    }

    /// One row of an error table: `L^4` norm over the block-count law of
    /// `E[f | y] - target(y)`, with its scaled versions.
    #[derive(Debug, Clone, Copy)]
    pub struct EeRow {
        pub m: usize,
        pub l4_error: f64,
        /// `m^{3/2}`-scaled error (second-order target)
        pub scaled_32: f64,
        /// `m`-scaled error (first-order target)
        pub scaled_1: f64,
    }

    /// Error curve against the second-order target
    /// `phi''_f/2 (y^2 - sigma^2(rho)/m)`, `y = k/m - rho`, or the
    /// first-order target `phi'_f y`, for a product measure.
    pub fn error_curve(
        f: &crate::measures::LocalFunction,
        measure: &MeasureSpec,
        ms: &[usize],
        second_order: bool,
    ) -> Vec<EeRow> {
        let marginal = match measure {
            MeasureSpec::Bernoulli { marginal, .. } | MeasureSpec::ProductZrp { marginal, .. } => {
                marginal
            }
            MeasureSpec::MarkovGibbs { .. } => {
                panic!("product-measure route; see markov_conditional")
            }
        };
        let rho = measure.rho();
        let sigma2 = measure.sigma2_inf();
        let tm = crate::measures::phi_derivatives(f, measure);
        let m_max = *ms.iter().max().unwrap();
        let convs = block_pmfs(marginal, m_max);
        ms.iter()
            .map(|&m| {
                let cond = conditional_expectation(f, marginal, m, &convs);
                let law = &convs[m];
                let mut acc = 0.0;
                for (k, &pk) in law.iter().enumerate() {
                    if pk == 0.0 {
                        continue;
                    }
                    let y = k as f64 / m as f64 - rho;
                    let target = if second_order {
                        tm.phi2 / 2.0 * (y * y - sigma2 / m as f64)
                    } else {
                        tm.phi1 * y
                    };
                    acc += pk * (cond[k] - target).powi(4);
                }
                let l4 = acc.powf(0.25);
                EeRow {
                    m,
                    l4_error: l4,
                    scaled_32: l4 * (m as f64).powf(1.5),
                    scaled_1: l4 * m as f64,
                }
            })
            .collect()
    }

    /// Exact `E[f | block count over Lambda_n, eta(-n-1)=a, eta(n+1)=b]`
    /// for the two-state Markov measure, with `f` supported inside the
    /// block; transfer-matrix dynamic programming over (position, count).
    pub fn markov_conditional(
        f: &crate::measures::LocalFunction,
        chain: &crate::measures::Chain2,
        n: i64,
        a: usize,
        b: usize,
    ) -> Vec<f64> {
        assert!(f.lo >= -n && f.hi <= n);
        let len = (2 * n + 1) as usize;
        let pre_len = (f.lo + n) as usize;
        let post_len = (n - f.hi) as usize;
        // run(m, start): layer[c][e] = weight over m chain steps from
        // `start`, counting particles, ending in state e
        let run = |start: usize, m: usize| -> Vec<[f64; 2]> {
            let mut layer: Vec<[f64; 2]> = vec![[0.0; 2]; 2];
            if m == 0 {
                let mut l0 = vec![[0.0f64; 2]; 1];
                l0[0][start] = 1.0;
                return l0;
            }
            for e in 0..2usize {
                layer[e][e] = chain.p[start][e];
            }
            for _ in 1..m {
                let mut next = vec![[0.0f64; 2]; layer.len() + 1];
                for (c, states) in layer.iter().enumerate() {
                    for e in 0..2usize {
                        let w = states[e];
                        if w == 0.0 {
                            continue;
                        }
                        for e2 in 0..2usize {
                            next[c + e2][e2] += w * chain.p[e][e2];
                        }
                    }
                }
                layer = next;
            }
            layer
        };
        let width = f.width();
        let mut num = vec![0.0f64; len + 1];
        let mut den = vec![0.0f64; len + 1];
        let pre_layers = run(a, pre_len);
        for (c_pre, pre_states) in pre_layers.iter().enumerate() {
            for e_pre in 0..2usize {
                let w_pre = pre_states[e_pre];
                if w_pre == 0.0 {
                    continue;
                }
                // with zero pre sites the "current state" is the boundary a
                let from = if pre_len == 0 { a } else { e_pre };
                if pre_len == 0 && e_pre != a {
                    continue;
                }
                for window in crate::model::enumerate_windows(width, 1) {
                    let mut w_win = chain.p[from][window[0] as usize];
                    for pair in window.windows(2) {
                        w_win *= chain.p[pair[0] as usize][pair[1] as usize];
                    }
                    if w_win == 0.0 {
                        continue;
                    }
                    let c_win: usize = window.iter().map(|&v| v as usize).sum();
                    let e_win = window[width - 1] as usize;
                    let fval = f.eval(&window);
                    let post_layers = run(e_win, post_len);
                    for (c_post, post_states) in post_layers.iter().enumerate() {
                        for e_post in 0..2usize {
                            let w_post = post_states[e_post];
                            if w_post == 0.0 {
                                continue;
                            }
                            if post_len == 0 && e_post != e_win {
                                continue;
                            }
                            let final_state = if post_len == 0 { e_win } else { e_post };
                            let w_total =
                                w_pre * w_win * w_post * chain.p[final_state][b];
                            let c = c_pre + c_win + c_post;
                            num[c] += w_total * fval;
                            den[c] += w_total;
                        }
                    }
                }
            }
        }
        num.iter().zip(&den).map(|(nu, de)| if *de > 0.0 { nu / de } else { 0.0 }).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::LocalFunction;
    use crate::model::RateFn;
    use approx::assert_abs_diff_eq;

    #[test]
    fn ssep_ring_stationarity() {
        let spec = ModelSpec::simple_exclusion();
        let space = RingSpace::sector(6, 3, 1).unwrap();
        assert_eq!(space.len(), 20);
        let m = MeasureSpec::bernoulli(0.5).unwrap();
        for (a, gamma) in [(1.0, 1.0), (0.7, 0.5), (0.0, 1.0)] {
            let asym = Asymmetry::new(a, gamma, 10).unwrap();
            let gen = ring_generator(&spec, &asym, &space);
            let nu = ring_measure(&m, &space);
            assert!(stationarity_check(&gen, &nu, 10) < 1e-12);
        }
    }

    #[test]
    fn zrp_ring_stationarity() {
        let spec = ModelSpec::zero_range(RateFn::linear()).unwrap();
        let m = MeasureSpec::product_zrp(RateFn::linear(), 1.3).unwrap();
        let asym = Asymmetry::new(1.0, 0.5, 10).unwrap();
        for k in 1..=5 {
            let space = RingSpace::sector(4, k, k).unwrap();
            let gen = ring_generator(&spec, &asym, &space);
            let nu = ring_measure(&m, &space);
            assert!(stationarity_check(&gen, &nu, 10) < 1e-12, "k = {k}");
        }
    }

    #[test]
    fn kclg_and_speed_change_ring_stationarity() {
        let asym = Asymmetry::new(1.0, 0.5, 10).unwrap();
        let spec = ModelSpec::kclg(2, 1.0).unwrap();
        let m = MeasureSpec::bernoulli(0.4).unwrap();
        let space = RingSpace::full(7, 1).unwrap();
        let gen = ring_generator(&spec, &asym, &space);
        let nu = ring_measure(&m, &space);
        assert!(stationarity_check(&gen, &nu, 10) < 1e-12);

        let beta = 0.9;
        let spec = ModelSpec::speed_change_canonical(beta, 1.0);
        let m = MeasureSpec::markov_gibbs(beta, 0.0).unwrap();
        let space = RingSpace::full(6, 1).unwrap();
        let gen = ring_generator(&spec, &asym, &space);
        let nu = ring_measure(&m, &space);
        assert!(stationarity_check(&gen, &nu, 10) < 1e-12);
    }

    #[test]
    fn reversibility_at_zero_drift_matrixwise() {
        let spec = ModelSpec::simple_exclusion();
        let space = RingSpace::sector(6, 2, 1).unwrap();
        let m = MeasureSpec::bernoulli(0.35).unwrap();
        assert!(reversibility_check(&spec, 8, &m, &space) < 1e-13);
    }

    #[test]
    fn adjoint_is_drift_reversal() {
        let asym = Asymmetry::new(1.0, 0.5, 10).unwrap();
        let cases: Vec<(ModelSpec, MeasureSpec, RingSpace)> = vec![
            (
                ModelSpec::simple_exclusion(),
                MeasureSpec::bernoulli(0.5).unwrap(),
                RingSpace::sector(6, 3, 1).unwrap(),
            ),
            (
                ModelSpec::kclg(2, 1.0).unwrap(),
                MeasureSpec::bernoulli(0.3).unwrap(),
                RingSpace::full(7, 1).unwrap(),
            ),
            (
                ModelSpec::speed_change_canonical(0.8, 1.0),
                MeasureSpec::markov_gibbs(0.8, 0.0).unwrap(),
                RingSpace::full(6, 1).unwrap(),
            ),
            (
                ModelSpec::zero_range(RateFn::linear()).unwrap(),
                MeasureSpec::product_zrp(RateFn::linear(), 1.0).unwrap(),
                RingSpace::sector(4, 4, 4).unwrap(),
            ),
        ];
        for (spec, m, space) in cases {
            let resid = adjoint_check(&spec, &asym, &m, &space).unwrap();
            assert!(resid < 1e-12, "{:?}: {resid}", spec.family);
        }
    }

    #[test]
    fn ssep_three_site_gap_is_half() {
        // reflecting walk on 3 sites with edge rate 1/2
        let spec = ModelSpec::simple_exclusion();
        let space = SegmentSpace::new(1, 1, 1, vec![0], vec![0]).unwrap();
        let s = segment_generator(&spec, 1, &space);
        let m = MeasureSpec::bernoulli(0.5).unwrap();
        let nu = segment_measure(&m, &space);
        let rep = spectral_gap(&s, &nu).unwrap();
        assert_abs_diff_eq!(rep.gap, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(rep.w, 2.0, epsilon = 1e-10);
    }

    #[test]
    fn segment_generator_is_nu_symmetric() {
        for (spec, m) in [
            (ModelSpec::simple_exclusion(), MeasureSpec::bernoulli(0.4).unwrap()),
            (ModelSpec::kclg(2, 0.7).unwrap(), MeasureSpec::bernoulli(0.5).unwrap()),
            (
                ModelSpec::speed_change_canonical(1.1, 1.0),
                MeasureSpec::markov_gibbs(1.1, 0.0).unwrap(),
            ),
        ] {
            let space = SegmentSpace::new(2, 2, 1, vec![1, 0], vec![1, 1]).unwrap();
            let s = segment_generator(&spec, 10, &space);
            let nu = segment_measure(&m, &space);
            assert!(segment_symmetry_residual(&s, &nu) < 1e-12, "{:?}", spec.family);
        }
    }

    #[test]
    fn power_iteration_agrees_with_dense() {
        let spec = ModelSpec::simple_exclusion();
        let space = SegmentSpace::new(3, 3, 1, vec![0], vec![0]).unwrap();
        let s = segment_generator(&spec, 1, &space);
        let nu = segment_measure(&MeasureSpec::bernoulli(0.5).unwrap(), &space);
        let dense = spectral_gap(&s, &nu).unwrap().gap;
        let power = power_iteration_gap(&s, &nu, 40_000);
        assert!((dense - power).abs() < 1e-8, "dense {dense} vs power {power}");
    }

    #[test]
    fn lanczos_agrees_with_dense_medium_case() {
        let spec = ModelSpec::simple_exclusion();
        let space = SegmentSpace::new(4, 4, 1, vec![0], vec![0]).unwrap();
        let s = segment_generator(&spec, 1, &space);
        let nu = segment_measure(&MeasureSpec::bernoulli(0.5).unwrap(), &space);
        let dense = spectral_gap(&s, &nu).unwrap().gap;
        let a = symmetrized(&s, &nu);
        let lanc = lanczos_second_smallest(&a, &nu);
        assert!((dense - lanc).abs() < 1e-9, "dense {dense} vs lanczos {lanc}");
    }

    #[test]
    fn kclg_gap_increases_with_theta() {
        let m = MeasureSpec::bernoulli(0.5).unwrap();
        for (ell, k) in [(2i64, 3u32), (3, 4), (3, 6)] {
            let mut last = -1.0;
            for theta in [0.0, 0.5, 1.0] {
                let spec = if theta > 0.0 {
                    ModelSpec::kclg(2, theta).unwrap()
                } else {
                    ModelSpec::kclg_frozen(2)
                };
                let space = SegmentSpace::new(ell, k, 1, vec![0, 0], vec![0, 0]).unwrap();
                let s = segment_generator(&spec, 10, &space);
                let nu = segment_measure(&m, &space);
                let gap = spectral_gap(&s, &nu).unwrap().gap;
                assert!(
                    gap > last,
                    "gap not strictly increasing at ell={ell} k={k} theta={theta}: {gap} <= {last}"
                );
                last = gap;
            }
        }
    }

    #[test]
    fn h_minus1_eigenvector_and_duality() {
        let spec = ModelSpec::simple_exclusion();
        let space = SegmentSpace::new(2, 2, 1, vec![0], vec![0]).unwrap();
        let s = segment_generator(&spec, 4, &space);
        let m = MeasureSpec::bernoulli(0.5).unwrap();
        let nu = segment_measure(&m, &space);
        let n = 4u32;
        let a = symmetrized(&s, &nu);
        let eig = nalgebra::SymmetricEigen::new(a.to_dense());
        let mut idx: Vec<usize> = (0..s.dim).collect();
        idx.sort_by(|&i, &j| eig.eigenvalues[i].partial_cmp(&eig.eigenvalues[j]).unwrap());
        let k = idx[1];
        let mu = eig.eigenvalues[k];
        // r = eigenvector of -S, unit nu-norm: ||r||^2_{-1,n} = 1/(n^2 mu)
        let r: Vec<f64> = (0..s.dim).map(|i| eig.eigenvectors[(i, k)] / nu[i].sqrt()).collect();
        let got = h_minus1_norm_sq(&r, &s, &nu, n).unwrap();
        assert_abs_diff_eq!(got, 1.0 / (mu * 16.0), epsilon = 1e-10);

        let ones = vec![1.0; s.dim];
        assert!(matches!(h_minus1_norm_sq(&ones, &s, &nu, n), Err(ExactError::NotMeanZero(_))));

        // variational duality: <r, phi>^2 / ||phi||^2_{1,n} never exceeds
        // the norm, and the pseudo-inverse attains it
        let dense = s.to_dense();
        let rayleigh = |phi: &[f64]| -> Option<f64> {
            let ip: f64 = r.iter().zip(phi).zip(&nu).map(|((x, p), w)| x * p * w).sum();
            let mut s_phi = vec![0.0; s.dim];
            for i in 0..s.dim {
                for j in 0..s.dim {
                    s_phi[i] += dense[(i, j)] * phi[j];
                }
            }
            let h1: f64 = phi
                .iter()
                .zip(&s_phi)
                .zip(&nu)
                .map(|((p, sp), w)| -p * sp * w)
                .sum::<f64>()
                * (n as f64 * n as f64);
            (h1 > 1e-14).then(|| ip * ip / h1)
        };
        let mut rng_state = 7u64;
        let mut best = 0.0f64;
        for _ in 0..1000 {
            let mut phi: Vec<f64> = (0..s.dim)
                .map(|_| crate::engine::splitmix64(&mut rng_state) as f64 / u64::MAX as f64 - 0.5)
                .collect();
            let mean: f64 = phi.iter().zip(&nu).map(|(p, w)| p * w).sum();
            for p in phi.iter_mut() {
                *p -= mean;
            }
            if let Some(q) = rayleigh(&phi) {
                best = best.max(q);
            }
        }
        assert!(best <= got * (1.0 + 1e-9), "duality violated: {best} > {got}");
        // phi = (-S)^+ r attains the supremum
        let phi_star: Vec<f64> = {
            let rt: Vec<f64> = r.iter().zip(&nu).map(|(x, w)| x * w.sqrt()).collect();
            let mut acc = vec![0.0; s.dim];
            for kk in 0..s.dim {
                let lam = eig.eigenvalues[kk];
                if lam <= 1e-12 {
                    continue;
                }
                let comp: f64 = (0..s.dim).map(|i| eig.eigenvectors[(i, kk)] * rt[i]).sum();
                for i in 0..s.dim {
                    acc[i] += comp / lam * eig.eigenvectors[(i, kk)] / nu[i].sqrt();
                }
            }
            acc
        };
        let attained = rayleigh(&phi_star).unwrap();
        assert_abs_diff_eq!(attained, got, epsilon = 1e-10);
    }

    #[test]
    fn ee_pair_matches_hypergeometric_oracle() {
        // sampling without replacement: E[eta1 eta2 | k of m] = k(k-1)/(m(m-1))
        let rho = 0.4;
        let m = MeasureSpec::bernoulli(rho).unwrap();
        let marginal = Marginal::bernoulli(rho);
        let f = LocalFunction::pair_centered(rho);
        let convs = ee::block_pmfs(&marginal, 12);
        let cond = ee::conditional_expectation(&f, &marginal, 12, &convs);
        for k in 0..=12usize {
            let kf = k as f64;
            let expect = kf * (kf - 1.0) / (12.0 * 11.0) - 2.0 * rho * kf / 12.0 + rho * rho;
            assert_abs_diff_eq!(cond[k], expect, epsilon = 1e-12);
        }
        let rows = ee::error_curve(&f, &m, &[8, 12, 16, 20, 24], true);
        let vals: Vec<f64> = rows.iter().map(|r| r.scaled_32).collect();
        let spread = vals.iter().cloned().fold(f64::MIN, f64::max)
            / vals.iter().cloned().fold(f64::MAX, f64::min);
        assert!(spread < 3.0, "scaled EE error varies too much: {vals:?}");
    }

    #[test]
    fn ee_zero_function_gives_zero() {
        let m = MeasureSpec::bernoulli(0.5).unwrap();
        let f = LocalFunction::new("zero", 1, 2, |_| 0.0);
        let rows = ee::error_curve(&f, &m, &[8, 10], true);
        for r in rows {
            assert!(r.l4_error < 1e-14);
        }
    }

    #[test]
    fn ee_first_order_variant_bounded() {
        // phi_f = 0 but phi'_f != 0: error times m stays bounded
        let rho = 0.4;
        let m = MeasureSpec::bernoulli(rho).unwrap();
        let f = LocalFunction::new("pair-uncentered", 1, 2, move |w| {
            (w[0] * w[1]) as f64 - rho * rho
        });
        let tm = crate::measures::phi_derivatives(&f, &m);
        assert!(tm.phi.abs() < 1e-12);
        assert!(tm.phi1.abs() > 0.1);
        let rows = ee::error_curve(&f, &m, &[8, 12, 16, 20, 24], false);
        let vals: Vec<f64> = rows.iter().map(|r| r.scaled_1).collect();
        let spread = vals.iter().cloned().fold(f64::MIN, f64::max)
            / vals.iter().cloned().fold(f64::MAX, f64::min);
        assert!(spread < 3.0, "first-order scaled error varies too much: {vals:?}");
    }

    #[test]
    fn markov_conditional_beta_zero_matches_exchangeable() {
        let chain = match MeasureSpec::markov_gibbs(0.0, 0.0).unwrap() {
            MeasureSpec::MarkovGibbs { chain, .. } => chain,
            _ => unreachable!(),
        };
        let f = LocalFunction::new("pair01", 0, 1, |w| (w[0] * w[1]) as f64);
        let n = 4i64;
        let cond = ee::markov_conditional(&f, &chain, n, 0, 1);
        // at beta = 0 the block given its count is exchangeable over 9 sites
        for k in 0..=9usize {
            let kf = k as f64;
            let expect = kf * (kf - 1.0) / (9.0 * 8.0);
            assert_abs_diff_eq!(cond[k], expect, epsilon = 1e-12);
        }
    }
}
