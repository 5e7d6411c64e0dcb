//! Density fluctuation fields in the characteristic moving frame, mollified
//! point-mass probes, the quadratic functional of the energy condition,
//! currents and height functions.

use thiserror::Error;

use crate::engine::{Event, Observer, SimState};
use crate::lattice::Configuration;
use crate::measures::{phi_derivatives, LocalFunction, MeasureSpec};
use crate::model::{Asymmetry, ModelSpec};

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("test-function support covers {got} sites, exceeding the ring of {ring}")]
    SupportWrap { got: i64, ring: usize },
    #[error("mollifier width eps = {0} resolves fewer than two lattice sites at n = {1}")]
    EpsTooSmall(f64, u32),
    #[error("bond {0} outside the ring")]
    UntrackedBond(usize),
}

/// A smooth compactly supported test function with derivative evaluators
/// up to fourth order. Values are defined to vanish identically outside the
/// declared support, and every consumer (fields, kernels, norms) sees the
/// same truncation.
#[derive(Debug, Clone)]
pub struct TestFunction {
    kind: TfKind,
    lo: f64,
    hi: f64,
}

#[derive(Debug, Clone)]
enum TfKind {
    GaussianBump { center: f64, width: f64 },
    Hermite { z: usize },
    Tabulated { x0: f64, dx: f64, samples: Vec<f64> },
}

impl TestFunction {
    /// `exp(-(u - center)^2 / (2 width^2))`, truncated at eight widths.
    pub fn gaussian_bump(center: f64, width: f64) -> Self {
        TestFunction {
            kind: TfKind::GaussianBump { center, width },
            lo: center - 8.0 * width,
            hi: center + 8.0 * width,
        }
    }

    /// The orthonormal Hermite function `h_z`, truncated far beyond its
    /// classical turning points.
    pub fn hermite(z: usize) -> Self {
        let half = (2.0 * z as f64 + 1.0).sqrt() + 12.0;
        TestFunction { kind: TfKind::Hermite { z }, lo: -half, hi: half }
    }

    /// Samples of a smooth function on the uniform grid `x0 + k dx`,
    /// evaluated by local 9-point polynomial interpolation.
    pub fn tabulated(x0: f64, dx: f64, samples: Vec<f64>) -> Self {
        assert!(samples.len() >= 9, "tabulated test function needs at least 9 samples");
        let hi = x0 + dx * (samples.len() - 1) as f64;
        TestFunction { kind: TfKind::Tabulated { x0, dx, samples }, lo: x0, hi }
    }

    pub fn support(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    pub fn eval(&self, u: f64) -> f64 {
        self.deriv(0, u)
    }

    /// `d^k H / du^k` for `k <= 4`.
    pub fn deriv(&self, order: u32, u: f64) -> f64 {
        if u < self.lo || u > self.hi {
            return 0.0;
        }
        match &self.kind {
            TfKind::GaussianBump { center, width } => {
                let s = (u - center) / width;
                let g = (-s * s / 2.0).exp();
                // Hermite-polynomial ladder for Gaussian derivatives
                let p = match order {
                    0 => 1.0,
                    1 => -s,
                    2 => s * s - 1.0,
                    3 => 3.0 * s - s * s * s,
                    4 => s.powi(4) - 6.0 * s * s + 3.0,
                    _ => panic!("derivatives above order 4 unsupported"),
                };
                p * g / width.powi(order as i32)
            }
            TfKind::Hermite { z } => crate::hermite::deriv(*z, order, u),
            TfKind::Tabulated { x0, dx, samples } => {
                tabulated_deriv(*x0, *dx, samples, order, u)
            }
        }
    }

    /// `L^p`-type norms of the `k`-th derivative, by composite Simpson on
    /// the support.
    pub fn deriv_norm(&self, order: u32, p: f64) -> f64 {
        let n = 1 << 14;
        let h = (self.hi - self.lo) / n as f64;
        let mut acc = 0.0;
        for i in 0..=n {
            let u = self.lo + i as f64 * h;
            let w = if i == 0 || i == n {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            acc += w * self.deriv(order, u).abs().powf(p);
        }
        (acc * h / 3.0).powf(1.0 / p)
    }

    pub fn l2_norm(&self) -> f64 {
        self.deriv_norm(0, 2.0)
    }

    pub fn grad_l2_norm(&self) -> f64 {
        self.deriv_norm(1, 2.0)
    }

    pub fn grad_l1_norm(&self) -> f64 {
        self.deriv_norm(1, 1.0)
    }

    pub fn lap_l2_norm(&self) -> f64 {
        self.deriv_norm(2, 2.0)
    }
}

/// A smoothed one-sided ramp: 0 left of the support, rising to 1 over the
/// wide back edge, plateau, then dropping to 0 over the sharp front edge
/// ending at `0`, continuing as the linear decay of width `sharp`. Reading
/// the fluctuation field against it approximates the integrated current
/// through the sharp edge, which is where interface-increment skewness
/// lives; even probes see none by symmetry.
pub fn ramp_probe(wide: f64, plateau: f64, sharp: f64) -> TestFunction {
    let lo = -(wide + plateau);
    let hi = sharp;
    let profile = move |u: f64| -> f64 {
        if u <= lo || u >= hi {
            0.0
        } else if u < -plateau {
            (u - lo) / wide
        } else if u < 0.0 {
            1.0
        } else {
            1.0 - u / sharp
        }
    };
    // mollify with a Gaussian of width sharp/4 so every derivative exists
    let w = sharp / 4.0;
    let dx = sharp / 16.0;
    let x0 = lo - 5.0 * w;
    let count = (((hi + 5.0 * w) - x0) / dx).ceil() as usize + 1;
    let samples: Vec<f64> = (0..count)
        .map(|j| {
            let u = x0 + j as f64 * dx;
            let quad = 64;
            let mut acc = 0.0;
            let mut norm = 0.0;
            for q in 0..=quad {
                let s = -4.0 * w + 8.0 * w * q as f64 / quad as f64;
                let weight = (-s * s / (2.0 * w * w)).exp();
                acc += weight * profile(u - s);
                norm += weight;
            }
            acc / norm
        })
        .collect();
    TestFunction::tabulated(x0, dx, samples)
}

/// Fornberg finite-difference weights for derivative `m` at point `x`
/// on the given grid.
fn fornberg_weights(x: f64, grid: &[f64], m: usize) -> Vec<Vec<f64>> {
    let n = grid.len();
    let mut c = vec![vec![0.0; n]; m + 1];
    let mut c1 = 1.0;
    let mut c4 = grid[0] - x;
    c[0][0] = 1.0;
    for i in 1..n {
        let mn = i.min(m);
        let mut c2 = 1.0;
        let c5 = c4;
        c4 = grid[i] - x;
        for j in 0..i {
            let c3 = grid[i] - grid[j];
            c2 *= c3;
            if j == i - 1 {
                for k in (1..=mn).rev() {
                    c[k][i] = c1 * (k as f64 * c[k - 1][i - 1] - c5 * c[k][i - 1]) / c2;
                }
                c[0][i] = -c1 * c5 * c[0][i - 1] / c2;
            }
            for k in (1..=mn).rev() {
                c[k][j] = (c4 * c[k][j] - k as f64 * c[k - 1][j]) / c3;
            }
            c[0][j] = c4 * c[0][j] / c3;
        }
        c1 = c2;
    }
    c
}

fn tabulated_deriv(x0: f64, dx: f64, samples: &[f64], order: u32, u: f64) -> f64 {
    let pos = (u - x0) / dx;
    let center = pos.round() as i64;
    let lo = (center - 4).clamp(0, samples.len() as i64 - 9) as usize;
    let grid: Vec<f64> = (0..9).map(|k| x0 + (lo + k) as f64 * dx).collect();
    let w = fornberg_weights(u, &grid, order as usize);
    (0..9).map(|k| w[order as usize][k] * samples[lo + k]).sum()
}

/// Observation frame moving with the process characteristics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShiftMode {
    /// Shift along the lattice: `floor(a phi_b'(rho) t n^2 / (2 n^gamma))` sites.
    Floor,
    /// Shift along the line: the same quantity unfloored.
    Fractional,
}

#[derive(Debug, Clone, Copy)]
pub struct Frame {
    /// Characteristic velocity `a phi_b'(rho) / 2` in macroscopic units.
    pub velocity: f64,
    pub n: u32,
    pub gamma: f64,
    pub mode: ShiftMode,
}

impl Frame {
    pub fn off(n: u32) -> Self {
        Frame { velocity: 0.0, n, gamma: 1.0, mode: ShiftMode::Floor }
    }

    /// Frame with velocity `a phi_b'(rho) / 2` computed from the model's
    /// symmetrized bond rate under the given measure.
    pub fn for_model(
        spec: &ModelSpec,
        asym: &Asymmetry,
        measure: &MeasureSpec,
        mode: ShiftMode,
    ) -> Self {
        let b = LocalFunction::bond_rate(spec, asym);
        let tm = phi_derivatives(&b, measure);
        Frame { velocity: asym.a * tm.phi1 / 2.0, n: asym.n, gamma: asym.gamma, mode }
    }

    /// Lattice drift rate in sites per macro time unit,
    /// `a phi_b'(rho) n^{2 - gamma} / 2`.
    pub fn sites_per_time(&self) -> f64 {
        self.velocity * (self.n as f64).powf(2.0 - self.gamma)
    }

    /// Real-valued site shift at macro time `t`.
    pub fn shift_sites_real(&self, t: f64) -> f64 {
        self.sites_per_time() * t
    }

    /// Site shift in the frame's mode.
    pub fn shift_sites(&self, t: f64) -> f64 {
        match self.mode {
            ShiftMode::Floor => self.shift_sites_real(t).floor(),
            ShiftMode::Fractional => self.shift_sites_real(t),
        }
    }
}

/// `Y^{n,gamma}_t(H) = n^{-1/2} sum_x H((x - shift(t)) / n)(eta(x) - rho)`,
/// ring-periodized.
pub fn fluctuation_field_occ(
    occ: &[u32],
    h: &TestFunction,
    frame: &Frame,
    t: f64,
    rho: f64,
) -> Result<f64, FieldError> {
    let l = occ.len();
    let n = frame.n as f64;
    let s = frame.shift_sites(t);
    let (lo, hi) = h.support();
    let x_lo = (n * lo + s).ceil() as i64;
    let x_hi = (n * hi + s).floor() as i64;
    if x_hi - x_lo + 1 > l as i64 {
        return Err(FieldError::SupportWrap { got: x_hi - x_lo + 1, ring: l });
    }
    let mut acc = 0.0;
    for x in x_lo..=x_hi {
        let site = x.rem_euclid(l as i64) as usize;
        acc += h.eval((x as f64 - s) / n) * (occ[site] as f64 - rho);
    }
    Ok(acc / n.sqrt())
}

pub fn fluctuation_field(
    config: &Configuration,
    h: &TestFunction,
    frame: &Frame,
    t: f64,
    rho: f64,
) -> Result<f64, FieldError> {
    fluctuation_field_occ(config.occupancies(), h, frame, t, rho)
}

/// Samples one or more fluctuation fields at the probe times of a run.
pub struct FieldProbe {
    pub functions: Vec<TestFunction>,
    pub frame: Frame,
    pub rho: f64,
    /// `(t, Y_t(H_i) for each i)` at each sampled probe time.
    pub samples: Vec<(f64, Vec<f64>)>,
}

impl FieldProbe {
    pub fn new(functions: Vec<TestFunction>, frame: Frame, rho: f64) -> Self {
        FieldProbe { functions, frame, rho, samples: Vec::new() }
    }
}

impl Observer for FieldProbe {
    fn sample(&mut self, t: f64, state: &SimState) {
        let values = self
            .functions
            .iter()
            .map(|h| {
                fluctuation_field_occ(state.occupancies(), h, &self.frame, t, self.rho)
                    .expect("probe support checked at configuration time")
            })
            .collect();
        self.samples.push((t, values));
    }
}

/// Smooth compactly supported approximation `G_eps` of the point-mass
/// kernel `iota_eps(z) = (2 eps)^{-1} 1_{[-eps, eps]}(z)`, built by
/// convolving the indicator with a smooth bump of width `eps / 8`
/// (configurable fraction).
#[derive(Debug, Clone)]
pub struct Mollifier {
    pub eps: f64,
    pub kernel: SmoothingKernel,
    /// smoothing width as a fraction of eps
    pub width_fraction: f64,
    cdf: KernelCdf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SmoothingKernel {
    /// `exp(-1 / (1 - u^2))` on `(-1, 1)`, infinitely smooth.
    Bump,
    /// `(1 - u^2)^2` on `(-1, 1)`.
    Quartic,
}

#[derive(Debug, Clone)]
enum KernelCdf {
    Table(Vec<f64>),
    Quartic,
}

impl Mollifier {
    /// Shipped smoothing width `min(eps/8, eps^3)`: the fixed fraction at
    /// large eps, tapering so that `eps^{-1/2} ||G_eps - iota_eps||` stays
    /// bounded as eps shrinks.
    pub fn new(eps: f64, kernel: SmoothingKernel) -> Self {
        let frac = (1.0f64 / 8.0).min(eps * eps);
        Mollifier::with_width_fraction(eps, kernel, frac)
    }

    pub fn with_width_fraction(eps: f64, kernel: SmoothingKernel, frac: f64) -> Self {
        assert!(eps > 0.0 && eps <= 1.0);
        let cdf = match kernel {
            SmoothingKernel::Quartic => KernelCdf::Quartic,
            SmoothingKernel::Bump => {
                let n = 8192;
                let mut pdf = Vec::with_capacity(n + 1);
                for i in 0..=n {
                    let u = -1.0 + 2.0 * i as f64 / n as f64;
                    let v = if u.abs() < 1.0 { (-1.0 / (1.0 - u * u)).exp() } else { 0.0 };
                    pdf.push(v);
                }
                let mut cdf = vec![0.0; n + 1];
                for i in 1..=n {
                    cdf[i] = cdf[i - 1] + 0.5 * (pdf[i] + pdf[i - 1]);
                }
                let total = cdf[n];
                for c in cdf.iter_mut() {
                    *c /= total;
                }
                KernelCdf::Table(cdf)
            }
        };
        Mollifier { eps, kernel, width_fraction: frac, cdf }
    }

    fn unit_cdf(&self, u: f64) -> f64 {
        if u <= -1.0 {
            return 0.0;
        }
        if u >= 1.0 {
            return 1.0;
        }
        match &self.cdf {
            KernelCdf::Quartic => {
                0.5 + (15.0 / 16.0) * (u - 2.0 * u * u * u / 3.0 + u.powi(5) / 5.0)
            }
            KernelCdf::Table(t) => {
                let pos = (u + 1.0) / 2.0 * (t.len() - 1) as f64;
                let i = (pos.floor() as usize).min(t.len() - 2);
                let frac = pos - i as f64;
                t[i] * (1.0 - frac) + t[i + 1] * frac
            }
        }
    }

    /// Width of the smoothing bump.
    pub fn delta(&self) -> f64 {
        self.eps * self.width_fraction
    }

    /// `G_eps(z)`; supported on `|z| <= eps + delta`.
    pub fn eval(&self, z: f64) -> f64 {
        let d = self.delta();
        (self.unit_cdf((z + self.eps) / d) - self.unit_cdf((z - self.eps) / d))
            / (2.0 * self.eps)
    }

    pub fn support_halfwidth(&self) -> f64 {
        self.eps + self.delta()
    }

    pub fn l2_norm_sq(&self) -> f64 {
        self.quad(|z| self.eval(z).powi(2))
    }

    /// `|| G_eps - iota_eps ||_{L^2}^2`.
    pub fn l2_dist_to_indicator_sq(&self) -> f64 {
        let iota = |z: f64| if z.abs() <= self.eps { 1.0 / (2.0 * self.eps) } else { 0.0 };
        self.quad(|z| (self.eval(z) - iota(z)).powi(2))
    }

    fn quad(&self, f: impl Fn(f64) -> f64) -> f64 {
        let half = self.support_halfwidth() * 1.01;
        let n = 1 << 15;
        let h = 2.0 * half / n as f64;
        let mut acc = 0.0;
        for i in 0..=n {
            let z = -half + i as f64 * h;
            let w = if i == 0 || i == n {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            acc += w * f(z);
        }
        acc * h / 3.0
    }
}

/// One mollifier channel of the quadratic-functional probe.
struct AChannel {
    /// `G_eps(j / n)` for offsets `j in -w..=w`.
    g_tab: Vec<f64>,
    w: i64,
    /// `tau_x Y(G_eps)` for each center in the gradient window.
    y: Vec<f64>,
    /// running `sum_x grad_h[x] y[x]^2`
    s: f64,
    acc: f64,
    pub samples: Vec<(f64, f64)>,
}

/// Event-exact accumulator of
/// `A_{0,t} = int_0^t (1/n) sum_x (grad_n H)(x) [tau_x Y_u(G_eps)]^2 du`
/// for several mollifier channels on one trajectory, sharing the window
/// of `H`. The mollified fields are maintained by sliding-window updates.
pub struct AEpsProbe {
    frame: Frame,
    rho: f64,
    /// lattice site of window index 0 (absolute, follows the floor shift)
    x0: i64,
    grad_h: Vec<f64>,
    channels: Vec<AChannel>,
    next_jump: f64,
    cursor_shift: i64,
    l: usize,
    n: f64,
}

impl AEpsProbe {
    pub fn new(
        h: &TestFunction,
        frame: Frame,
        rho: f64,
        mollifiers: &[Mollifier],
        l: usize,
    ) -> Result<Self, FieldError> {
        let n = frame.n as f64;
        let (lo, hi) = h.support();
        let x_lo = (n * lo).ceil() as i64 - 1;
        let x_hi = (n * hi).floor() as i64 + 1;
        let width = (x_hi - x_lo + 1) as usize;
        let mut worst = 0i64;
        for m in mollifiers {
            if m.eps * n < 2.0 {
                return Err(FieldError::EpsTooSmall(m.eps, frame.n));
            }
            worst = worst.max((m.support_halfwidth() * n).ceil() as i64);
        }
        if (width as i64 + 2 * worst) > l as i64 {
            return Err(FieldError::SupportWrap { got: width as i64 + 2 * worst, ring: l });
        }
        let grad_h: Vec<f64> =
            (x_lo..=x_hi).map(|x| n * (h.eval((x + 1) as f64 / n) - h.eval(x as f64 / n))).collect();
        let channels = mollifiers
            .iter()
            .map(|m| {
                let w = (m.support_halfwidth() * n).ceil() as i64;
                let g_tab = (-w..=w).map(|j| m.eval(j as f64 / n)).collect();
                AChannel { g_tab, w, y: vec![0.0; width], s: 0.0, acc: 0.0, samples: Vec::new() }
            })
            .collect();
        Ok(AEpsProbe {
            frame,
            rho,
            x0: x_lo,
            grad_h,
            channels,
            next_jump: f64::INFINITY,
            cursor_shift: 0,
            l,
            n,
        })
    }

    /// `A_{0,t}` per channel at each sampled time.
    pub fn samples(&self) -> Vec<Vec<(f64, f64)>> {
        self.channels.iter().map(|c| c.samples.clone()).collect()
    }

    fn rebuild(&mut self, state: &SimState) {
        let width = self.grad_h.len();
        for ch in self.channels.iter_mut() {
            ch.s = 0.0;
            for i in 0..width {
                let center = self.x0 + i as i64;
                let mut y = 0.0;
                for (k, &g) in ch.g_tab.iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    let site = center + (k as i64 - ch.w);
                    y += g * (state.occupancy(site) as f64 - self.rho);
                }
                y /= self.n.sqrt();
                ch.y[i] = y;
                ch.s += self.grad_h[i] * y * y;
            }
        }
    }

    fn advance_shift(&mut self, state: &SimState) {
        // floor shift moved by one site; window indices relabel by one
        let dir = if self.frame.sites_per_time() >= 0.0 { 1 } else { -1 };
        self.cursor_shift += dir;
        self.x0 += dir;
        let width = self.grad_h.len();
        for ch in self.channels.iter_mut() {
            if dir > 0 {
                ch.y.rotate_left(1);
            } else {
                ch.y.rotate_right(1);
            }
            let i = if dir > 0 { width - 1 } else { 0 };
            let center = self.x0 + i as i64;
            let mut y = 0.0;
            for (k, &g) in ch.g_tab.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                y += g * (state.occupancy(center + (k as i64 - ch.w)) as f64 - self.rho);
            }
            ch.y[i] = y / self.n.sqrt();
            ch.s = ch.y.iter().zip(&self.grad_h).map(|(y, g)| g * y * y).sum();
        }
    }

    fn schedule_next_jump(&mut self) {
        let v = self.frame.sites_per_time();
        if v == 0.0 {
            self.next_jump = f64::INFINITY;
        } else {
            let k = self.cursor_shift as f64 + if v > 0.0 { 1.0 } else { 0.0 };
            self.next_jump = k / v;
        }
    }
}

impl Observer for AEpsProbe {
    fn init(&mut self, state: &SimState) {
        self.rebuild(state);
        self.schedule_next_jump();
    }

    fn elapse(&mut self, t0: f64, dt: f64, state: &SimState) {
        let mut cur = t0;
        let end = t0 + dt;
        while self.next_jump < end {
            let seg = self.next_jump - cur;
            for ch in self.channels.iter_mut() {
                ch.acc += ch.s * seg;
            }
            cur = self.next_jump;
            self.advance_shift(state);
            self.schedule_next_jump();
        }
        for ch in self.channels.iter_mut() {
            ch.acc += ch.s * (end - cur);
        }
    }

    fn apply(&mut self, ev: &Event, state: &SimState) {
        let _ = state;
        let (from, to) = (ev.from as i64, ev.to as i64);
        let inv_sqrt_n = 1.0 / self.n.sqrt();
        for ch in self.channels.iter_mut() {
            let w = ch.w;
            // centers whose mollifier window sees either changed site
            for off in -w..=w {
                for (site, delta) in [(from, -1.0f64), (to, 1.0f64)] {
                    let center = site + off;
                    let rel = (center - self.x0).rem_euclid(self.l as i64) as usize;
                    if rel >= ch.y.len() {
                        continue;
                    }
                    let g = ch.g_tab[(w - off) as usize];
                    if g == 0.0 {
                        continue;
                    }
                    let dy = delta * g * inv_sqrt_n;
                    let old = ch.y[rel];
                    ch.y[rel] = old + dy;
                    ch.s += self.grad_h[rel] * (2.0 * old * dy + dy * dy);
                }
            }
        }
    }

    fn sample(&mut self, t: f64, _state: &SimState) {
        let n = self.n;
        for ch in self.channels.iter_mut() {
            ch.samples.push((t, ch.acc / n));
        }
    }
}

/// Tracks currents and heights; verifies the discrete continuity identity
/// `J_0(t) - J_{x+1}(t) = sum_{y=0}^{x} (eta_t(y) - eta_0(y))` at samples.
pub struct CurrentHeightProbe {
    initial: Vec<u32>,
    /// `(t, J_0(t), height at tracked x)` per sample.
    pub samples: Vec<(f64, i64, Vec<i64>)>,
    pub tracked: Vec<usize>,
    pub max_identity_violation: i64,
}

impl CurrentHeightProbe {
    pub fn new(tracked: Vec<usize>) -> Self {
        CurrentHeightProbe {
            initial: Vec::new(),
            samples: Vec::new(),
            tracked,
            max_identity_violation: 0,
        }
    }

    /// The microscopic height at `x >= 0` on the ring:
    /// `J_0(t) - sum_{y=0}^{x-1} eta_t(y)` with `H(0) = J_0(t)`.
    pub fn height(state: &SimState, x: usize) -> i64 {
        let j0 = state.current_j(0);
        let partial: i64 = (0..x).map(|y| state.occupancy(y as i64) as i64).sum();
        j0 - partial
    }
}

impl Observer for CurrentHeightProbe {
    fn init(&mut self, state: &SimState) {
        self.initial = state.occupancies().to_vec();
    }

    fn sample(&mut self, t: f64, state: &SimState) {
        let j0 = state.current_j(0);
        let heights = self.tracked.iter().map(|&x| Self::height(state, x)).collect();
        // continuity identity on every interior x
        for x in 0..state.len() - 1 {
            let lhs = j0 - state.current_j(x as i64 + 1);
            let rhs: i64 = (0..=x)
                .map(|y| state.occupancy(y as i64) as i64 - self.initial[y] as i64)
                .sum();
            self.max_identity_violation = self.max_identity_violation.max((lhs - rhs).abs());
        }
        self.samples.push((t, j0, heights));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{replica_rng, Engine};
    use crate::model::ModelSpec;
    use approx::assert_abs_diff_eq;

    #[test]
    fn gaussian_derivatives_match_finite_differences() {
        let h = TestFunction::gaussian_bump(0.3, 0.7);
        let fd = |k: u32, u: f64, eps: f64| {
            (h.deriv(k - 1, u + eps) - h.deriv(k - 1, u - eps)) / (2.0 * eps)
        };
        for &u in &[-1.0, 0.0, 0.4, 2.2] {
            for k in 1..=4 {
                let exact = h.deriv(k, u);
                let approx_v = fd(k, u, 1e-5);
                assert!(
                    (exact - approx_v).abs() < 1e-6 * (1.0 + exact.abs()),
                    "order {k} at {u}: {exact} vs {approx_v}"
                );
            }
        }
    }

    #[test]
    fn tabulated_matches_underlying_function() {
        let f = |u: f64| (u * 1.3).sin() * (-u * u / 4.0).exp();
        let x0 = -6.0;
        let dx = 0.01;
        let samples: Vec<f64> = (0..1201).map(|k| f(x0 + k as f64 * dx)).collect();
        let h = TestFunction::tabulated(x0, dx, samples);
        for &u in &[-3.3, -0.07, 1.92, 4.5] {
            assert_abs_diff_eq!(h.eval(u), f(u), epsilon = 1e-9);
            let fd = (h.eval(u + 1e-5) - h.eval(u - 1e-5)) / 2e-5;
            assert!((h.deriv(1, u) - fd).abs() < 1e-6);
            let fd4 = (h.deriv(3, u + 1e-4) - h.deriv(3, u - 1e-4)) / 2e-4;
            assert!((h.deriv(4, u) - fd4).abs() < 1e-4 * (1.0 + fd4.abs()));
        }
    }

    #[test]
    fn field_single_particle() {
        let h = TestFunction::gaussian_bump(0.0, 1.0);
        let frame = Frame::off(16);
        let mut occ = vec![0u32; 512];
        occ[0] = 1;
        let y = fluctuation_field_occ(&occ, &h, &frame, 0.7, 0.0).unwrap();
        assert_abs_diff_eq!(y, h.eval(0.0) / 4.0, epsilon = 1e-14);
    }

    #[test]
    fn field_linearity() {
        let h1 = TestFunction::gaussian_bump(-0.5, 0.4);
        let h2 = TestFunction::gaussian_bump(0.3, 0.8);
        let frame = Frame::off(8);
        let occ: Vec<u32> = (0..160).map(|i| (i * 7 % 3 == 0) as u32).collect();
        let y1 = fluctuation_field_occ(&occ, &h1, &frame, 0.0, 0.4).unwrap();
        let y2 = fluctuation_field_occ(&occ, &h2, &frame, 0.0, 0.4).unwrap();
        // alpha H1 + beta H2 as a tabulated function
        let x0 = -7.0;
        let dx = 1.0 / 64.0;
        let samples: Vec<f64> =
            (0..=(14.0 / dx) as usize).map(|k| {
                let u = x0 + k as f64 * dx;
                2.0 * h1.eval(u) - 0.7 * h2.eval(u)
            }).collect();
        let hsum = TestFunction::tabulated(x0, dx, samples);
        let ysum = fluctuation_field_occ(&occ, &hsum, &frame, 0.0, 0.4).unwrap();
        assert_abs_diff_eq!(ysum, 2.0 * y1 - 0.7 * y2, epsilon = 1e-9);
    }

    #[test]
    fn frame_zero_at_zero_drift() {
        let frame = Frame { velocity: 0.0, n: 64, gamma: 0.5, mode: ShiftMode::Floor };
        assert_eq!(frame.shift_sites(3.7), 0.0);
    }

    #[test]
    fn frame_floor_vs_fractional_taylor_bound() {
        let h = TestFunction::gaussian_bump(0.0, 0.8);
        let n = 64;
        let rho = 0.5;
        let occ: Vec<u32> = (0..1024).map(|i| (i % 2) as u32).collect();
        let base = Frame { velocity: 0.35, n, gamma: 1.0, mode: ShiftMode::Floor };
        let frac = Frame { mode: ShiftMode::Fractional, ..base };
        // sup |H'| for the bump is attained at s = +-1
        let sup_grad = (h.deriv(1, 0.8)).abs().max(h.deriv(1, -0.8).abs());
        for &t in &[0.1, 0.33, 0.77] {
            let yf = fluctuation_field_occ(&occ, &h, &base, t, rho).unwrap();
            let yr = fluctuation_field_occ(&occ, &h, &frac, t, rho).unwrap();
            let mass: f64 = 0.5 * 2.0 * 8.0 * 0.8 * n as f64; // sum |eta - rho| on support
            let bound = sup_grad * (n as f64).powf(-1.5) * mass * 1.1;
            assert!(
                (yf - yr).abs() <= bound,
                "floor/fractional gap {} above Taylor bound {}",
                (yf - yr).abs(),
                bound
            );
        }
    }

    #[test]
    fn field_support_wrap_rejected() {
        let h = TestFunction::gaussian_bump(0.0, 1.0);
        let frame = Frame::off(64); // support 16 macro units = 1024 sites
        let occ = vec![0u32; 256];
        assert!(matches!(
            fluctuation_field_occ(&occ, &h, &frame, 0.0, 0.0),
            Err(FieldError::SupportWrap { .. })
        ));
    }

    #[test]
    fn mollifier_norm_conditions() {
        for kernel in [SmoothingKernel::Bump, SmoothingKernel::Quartic] {
            for &eps in &[0.4, 0.2, 0.1, 0.05] {
                let m = Mollifier::new(eps, kernel);
                let l2 = m.l2_norm_sq();
                assert!(
                    l2 <= 2.0 * (1.0 / (2.0 * eps)) + 1e-9,
                    "||G||^2 = {l2} above 2 ||iota||^2 at eps {eps}"
                );
                // eps^{-1/2} ||G - iota||_{L2} stays below 0.7 at the shipped width
                let val = m.l2_dist_to_indicator_sq().sqrt() / eps.sqrt();
                assert!(val <= 0.7, "eps^-1/2 dist = {val} at eps {eps}");
            }
            // and decreases as the smoothing width fraction shrinks
            let vals: Vec<f64> = [0.25, 0.125, 0.0625, 0.03125]
                .iter()
                .map(|&fr| {
                    let m = Mollifier::with_width_fraction(0.2, kernel, fr);
                    m.l2_dist_to_indicator_sq().sqrt() * 0.2f64.sqrt().recip()
                })
                .collect();
            for w in vals.windows(2) {
                assert!(w[1] < w[0], "trend not decreasing: {vals:?}");
            }
        }
    }

    #[test]
    fn mollifier_mass_is_one() {
        for kernel in [SmoothingKernel::Bump, SmoothingKernel::Quartic] {
            let m = Mollifier::new(0.25, kernel);
            let mass = m.quad(|z| m.eval(z));
            assert_abs_diff_eq!(mass, 1.0, epsilon = 1e-6);
        }
    }

    /// Slow reference observer recomputing the A integrand from scratch.
    struct SlowA {
        h: TestFunction,
        m: Mollifier,
        frame: Frame,
        rho: f64,
        acc: f64,
    }

    impl Observer for SlowA {
        fn elapse(&mut self, t0: f64, dt: f64, state: &SimState) {
            // no frame motion in this test
            let _ = t0;
            let n = self.frame.n as f64;
            let (lo, hi) = self.h.support();
            let x_lo = (n * lo).ceil() as i64 - 1;
            let x_hi = (n * hi).floor() as i64 + 1;
            let mut s = 0.0;
            for x in x_lo..=x_hi {
                let grad = n * (self.h.eval((x + 1) as f64 / n) - self.h.eval(x as f64 / n));
                if grad == 0.0 {
                    continue;
                }
                let w = (self.m.support_halfwidth() * n).ceil() as i64;
                let mut y = 0.0;
                for j in -w..=w {
                    y += self.m.eval(j as f64 / n)
                        * (state.occupancy(x + j) as f64 - self.rho);
                }
                y /= n.sqrt();
                s += grad * y * y;
            }
            self.acc += s * dt / n;
        }
    }

    #[test]
    fn a_eps_incremental_matches_slow_recompute() {
        let spec = ModelSpec::simple_exclusion();
        let asym = Asymmetry::new(1.0, 0.5, 16).unwrap();
        let m = crate::measures::MeasureSpec::bernoulli(0.5).unwrap();
        let init = m.sample(192, &mut replica_rng(8, 0));
        let h = TestFunction::gaussian_bump(0.0, 0.4);
        let frame = Frame { velocity: 0.0, n: 16, gamma: 0.5, mode: ShiftMode::Floor };
        let moll = Mollifier::new(0.25, SmoothingKernel::Bump);
        let mut fast = AEpsProbe::new(&h, frame, 0.5, &[moll.clone()], 192).unwrap();
        let mut slow = SlowA { h: h.clone(), m: moll, frame, rho: 0.5, acc: 0.0 };
        let mut eng = Engine::new(spec, asym, init, replica_rng(8, 1));
        let t_end = 0.02;
        let mut pair = (&mut fast, &mut slow);
        eng.run(t_end, &[t_end], &mut pair).unwrap();
        let a_fast = fast.samples()[0][0].1;
        assert!(
            (a_fast - slow.acc).abs() <= 1e-10 * (1.0 + slow.acc.abs()),
            "incremental {a_fast} vs slow {}",
            slow.acc
        );
    }

    #[test]
    fn current_identity_and_heights() {
        let spec = ModelSpec::simple_exclusion();
        let asym = Asymmetry::new(1.0, 1.0, 8).unwrap();
        let m = crate::measures::MeasureSpec::bernoulli(0.4).unwrap();
        let init = m.sample(48, &mut replica_rng(12, 0));
        let mut probe = CurrentHeightProbe::new(vec![0, 5, 20]);
        let mut eng = Engine::new(spec, asym, init, replica_rng(12, 1));
        eng.run(0.5, &[0.0, 0.1, 0.2, 0.3, 0.4, 0.5], &mut probe).unwrap();
        assert_eq!(probe.max_identity_violation, 0);
        // t = 0 sample: no crossings yet
        let (t0, j0, h0) = &probe.samples[0];
        assert_eq!(*t0, 0.0);
        assert_eq!(*j0, 0);
        assert_eq!(h0[0], 0);
    }
}
