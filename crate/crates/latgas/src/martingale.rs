//! Martingale decomposition of the fluctuation field along trajectories:
//! `Y_t = Y_0 + I + B + K + M`, with the predicted quadratic variation and
//! the realized one, plus the Boltzmann-Gibbs variance probes.
//!
//! The drift pieces use the lattice-shifted test function (shift along
//! `n^{-1} Z`), the field itself the continuously shifted one; within one
//! floor interval the two differ by a sub-site offset `chi / n` with
//! `chi in [0, 1)` linear in time. All kernels are expanded to second order
//! in `chi / n` with static per-interval tables, so every time integral is
//! evaluated in closed form between events; the truncation is `O(n^{-3})`
//! relative, far below statistical resolution.

use crate::engine::{Event, Observer, SimState};
use crate::fields::{fluctuation_field_occ, Frame, ShiftMode, TestFunction};
use crate::measures::{phi_derivatives, LocalFunction, MeasureSpec};
use crate::model::{Asymmetry, ModelSpec};

/// Centering constants of the decomposition, from the measures layer.
#[derive(Debug, Clone, Copy)]
pub struct Centering {
    pub rho: f64,
    pub phi_c: f64,
    pub phi_b: f64,
    pub phi_b1: f64,
}

impl Centering {
    pub fn for_model(spec: &ModelSpec, asym: &Asymmetry, measure: &MeasureSpec) -> Self {
        let b = LocalFunction::bond_rate(spec, asym);
        let c = LocalFunction::c_fn(spec, asym);
        let tb = phi_derivatives(&b, measure);
        let tc = phi_derivatives(&c, measure);
        Centering { rho: measure.rho(), phi_c: tc.phi, phi_b: tb.phi, phi_b1: tb.phi1 }
    }
}

/// One probe-time sample of the decomposition.
#[derive(Debug, Clone, Copy)]
pub struct DecompSample {
    pub t: f64,
    pub y: f64,
    pub i: f64,
    pub b: f64,
    pub k: f64,
    /// `M = Y_t - Y_0 - I - B - K`
    pub m: f64,
    /// predicted quadratic variation (integral of the generator carre du champ)
    pub qv_pred: f64,
    /// realized quadratic variation (sum of squared field jumps)
    pub qv_real: f64,
}

pub struct DecomposeObserver {
    h: TestFunction,
    frame: Frame,
    cent: Centering,
    spec: ModelSpec,
    n: f64,
    l: usize,
    range: i64,
    pref_i: f64,
    pref_b: f64,
    pref_k3: f64,
    qv_drift_pref: f64,
    v_site: f64,
    // per-interval kernel tables, full ring, zero outside the window
    lap: [Vec<f64>; 4],
    grad: [Vec<f64>; 4],
    k3: [Vec<f64>; 4],
    qv: [Vec<f64>; 4],
    dqv: [Vec<f64>; 4],
    window: (i64, i64),
    // configuration-derived arrays
    cvals: Vec<f64>,
    bvals: Vec<f64>,
    // maintained dot products
    dc: [f64; 4],
    eb: [f64; 4],
    g3: [f64; 4],
    q: [f64; 4],
    qc: [f64; 4],
    // integrals
    i_int: f64,
    b_int: f64,
    k_int: f64,
    qv_pred: f64,
    qv_real: f64,
    shift: i64,
    next_jump: f64,
    t_cursor: f64,
    y0: f64,
    pub samples: Vec<DecompSample>,
}

impl DecomposeObserver {
    pub fn new(
        h: TestFunction,
        spec: &ModelSpec,
        asym: &Asymmetry,
        measure: &MeasureSpec,
    ) -> Self {
        let cent = Centering::for_model(spec, asym, measure);
        let frame = Frame {
            velocity: asym.a * cent.phi_b1 / 2.0,
            n: asym.n,
            gamma: asym.gamma,
            mode: ShiftMode::Fractional,
        };
        let n = asym.n as f64;
        let pref_b = asym.a / (2.0 * n.powf(asym.gamma - 0.5));
        DecomposeObserver {
            h,
            frame,
            cent,
            spec: spec.clone(),
            n,
            l: 0,
            range: spec.range,
            pref_i: 1.0 / (2.0 * n.sqrt()),
            pref_b,
            pref_k3: pref_b * cent.phi_b1,
            qv_drift_pref: asym.a / (2.0 * n.powf(1.0 + asym.gamma)),
            v_site: 0.0,
            lap: Default::default(),
            grad: Default::default(),
            k3: Default::default(),
            qv: Default::default(),
            dqv: Default::default(),
            window: (0, 0),
            cvals: Vec::new(),
            bvals: Vec::new(),
            dc: [0.0; 4],
            eb: [0.0; 4],
            g3: [0.0; 4],
            q: [0.0; 4],
            qc: [0.0; 4],
            i_int: 0.0,
            b_int: 0.0,
            k_int: 0.0,
            qv_pred: 0.0,
            qv_real: 0.0,
            shift: 0,
            next_jump: f64::INFINITY,
            t_cursor: 0.0,
            y0: 0.0,
            samples: Vec::new(),
        }
    }

    pub fn frame(&self) -> Frame {
        self.frame
    }

    fn rebuild_tables(&mut self, state: &SimState) {
        let l = self.l as i64;
        let (lo, hi) = self.h.support();
        let x_lo = (self.n * lo).ceil() as i64 + self.shift - 3;
        let x_hi = (self.n * hi).floor() as i64 + self.shift + 3;
        assert!(x_hi - x_lo + 1 <= l, "test function wraps the ring");
        self.window = (x_lo, x_hi);
        for k in 0..4 {
            for v in self.lap[k].iter_mut() {
                *v = 0.0;
            }
            for v in self.grad[k].iter_mut() {
                *v = 0.0;
            }
            for v in self.k3[k].iter_mut() {
                *v = 0.0;
            }
            for v in self.qv[k].iter_mut() {
                *v = 0.0;
            }
            for v in self.dqv[k].iter_mut() {
                *v = 0.0;
            }
        }
        let n = self.n;
        let inv = 1.0 / n;
        for x in x_lo..=x_hi {
            let site = x.rem_euclid(l) as usize;
            let u = (x - self.shift) as f64 / n;
            for k in 0..4u32 {
                let f = |v: f64| self.h.deriv(k, v);
                let lapv = n * n * (f(u + inv) + f(u - inv) - 2.0 * f(u));
                let gradv = n * (f(u + inv) - f(u));
                self.lap[k as usize][site] = lapv;
                self.grad[k as usize][site] = gradv;
                self.k3[k as usize][site] = if k < 3 {
                    gradv - self.h.deriv(k + 1, u)
                } else {
                    gradv - self.h.deriv(4, u)
                };
            }
            let (g0, g1, g2, g3) = (
                self.grad[0][site],
                self.grad[1][site],
                self.grad[2][site],
                self.grad[3][site],
            );
            self.qv[0][site] = g0 * g0;
            self.qv[1][site] = g0 * g1;
            self.qv[2][site] = g1 * g1 + g0 * g2;
            self.qv[3][site] = g0 * g3 / 3.0 + g1 * g2;
        }
        for x in (x_lo - 1)..=(x_hi + 1) {
            let site = x.rem_euclid(l) as usize;
            let prev = (x - 1).rem_euclid(l) as usize;
            for k in 0..4 {
                self.dqv[k][site] = self.qv[k][site] - self.qv[k][prev];
            }
        }
        self.recompute_dots(state);
    }

    fn recompute_dots(&mut self, state: &SimState) {
        self.dc = [0.0; 4];
        self.eb = [0.0; 4];
        self.g3 = [0.0; 4];
        self.q = [0.0; 4];
        self.qc = [0.0; 4];
        let l = self.l as i64;
        for x in (self.window.0 - 2)..=(self.window.1 + 2) {
            let site = x.rem_euclid(l) as usize;
            let c = self.cvals[site] - self.cent.phi_c;
            let vb = self.bvals[site]
                - self.cent.phi_b
                - self.cent.phi_b1 * (state.occupancy(site as i64) as f64 - self.cent.rho);
            let eta_c = state.occupancy(site as i64) as f64 - self.cent.rho;
            for k in 0..4 {
                self.dc[k] += c * self.lap[k][site];
                self.eb[k] += vb * self.grad[k][site];
                self.g3[k] += eta_c * self.k3[k][site];
                self.q[k] += self.bvals[site] * self.qv[k][site];
                self.qc[k] += self.cvals[site] * self.dqv[k][site];
            }
        }
    }

    fn refresh_site(&mut self, site: usize, state: &SimState) {
        let view = StateBond { state, bond: site as i64 };
        let (br, bl) = self.spec.eval_rates(state.asym().n, &view);
        let new_b = br + bl;
        let new_c = {
            let view = StateAt { state, origin: site as i64 };
            self.spec.c_fn(state.asym().n, &view)
        };
        let eta_c = state.occupancy(site as i64) as f64 - self.cent.rho;
        let old_c = self.cvals[site];
        let old_b = self.bvals[site];
        let d_c = new_c - old_c;
        let d_b = new_b - old_b;
        if d_c != 0.0 || d_b != 0.0 {
            for k in 0..4 {
                self.dc[k] += d_c * self.lap[k][site];
                self.q[k] += d_b * self.qv[k][site];
                self.qc[k] += d_c * self.dqv[k][site];
                // V_b delta from the b part (eta part handled separately)
                self.eb[k] += d_b * self.grad[k][site];
            }
            self.cvals[site] = new_c;
            self.bvals[site] = new_b;
        }
        let _ = eta_c;
    }

    fn eta_changed(&mut self, site: usize, delta: f64) {
        for k in 0..4 {
            self.g3[k] += delta * self.k3[k][site];
            self.eb[k] -= self.cent.phi_b1 * delta * self.grad[k][site];
        }
    }

    fn chi(&self, t: f64) -> f64 {
        if self.v_site == 0.0 {
            0.0
        } else {
            self.v_site * t - self.shift as f64
        }
    }

    fn integrate_segment(&mut self, t1: f64, t2: f64) {
        let dt = t2 - t1;
        if dt <= 0.0 {
            return;
        }
        let n = self.n;
        let (i1, i2, i3) = if self.v_site == 0.0 {
            (0.0, 0.0, 0.0)
        } else {
            let c1 = self.chi(t1);
            let c2 = self.chi(t2);
            (
                (c2 * c2 - c1 * c1) / (2.0 * self.v_site),
                (c2 * c2 * c2 - c1 * c1 * c1) / (3.0 * self.v_site),
                (c2 * c2 * c2 * c2 - c1 * c1 * c1 * c1) / (4.0 * self.v_site),
            )
        };
        self.i_int += self.pref_i * self.dc[0] * dt;
        self.b_int += self.pref_b * self.eb[0] * dt;
        let corr = |a: &[f64; 4]| {
            -i1 / n * a[1] + i2 / (2.0 * n * n) * a[2] - i3 / (6.0 * n * n * n) * a[3]
        };
        self.k_int += self.pref_i * corr(&self.dc)
            + self.pref_b * corr(&self.eb)
            + self.pref_k3 * (self.g3[0] * dt + corr(&self.g3));
        let qv_poly = |a: &[f64; 4]| {
            a[0] * dt - 2.0 * i1 / n * a[1] + i2 / (n * n) * a[2] - i3 / (n * n * n) * a[3]
        };
        self.qv_pred +=
            qv_poly(&self.q) / (2.0 * n) + self.qv_drift_pref * qv_poly(&self.qc);
    }

    fn schedule_next_jump(&mut self) {
        if self.v_site == 0.0 {
            self.next_jump = f64::INFINITY;
        } else if self.v_site > 0.0 {
            self.next_jump = (self.shift + 1) as f64 / self.v_site;
        } else {
            self.next_jump = self.shift as f64 / self.v_site;
        }
    }
}

/// Occupancy views backed directly by the live simulation state.
struct StateBond<'a> {
    state: &'a SimState,
    bond: i64,
}
impl crate::lattice::Occupancies for StateBond<'_> {
    #[inline]
    fn at(&self, x: i64) -> u32 {
        self.state.occupancy(self.bond + x)
    }
}
struct StateAt<'a> {
    state: &'a SimState,
    origin: i64,
}
impl crate::lattice::Occupancies for StateAt<'_> {
    #[inline]
    fn at(&self, x: i64) -> u32 {
        self.state.occupancy(self.origin + x)
    }
}

impl Observer for DecomposeObserver {
    fn init(&mut self, state: &SimState) {
        self.l = state.len();
        self.v_site = self.frame.sites_per_time();
        self.shift = 0;
        for k in 0..4 {
            self.lap[k] = vec![0.0; self.l];
            self.grad[k] = vec![0.0; self.l];
            self.k3[k] = vec![0.0; self.l];
            self.qv[k] = vec![0.0; self.l];
            self.dqv[k] = vec![0.0; self.l];
        }
        self.cvals = vec![0.0; self.l];
        self.bvals = vec![0.0; self.l];
        for site in 0..self.l {
            let view = StateBond { state, bond: site as i64 };
            let (br, bl) = self.spec.eval_rates(state.asym().n, &view);
            self.bvals[site] = br + bl;
            let view = StateAt { state, origin: site as i64 };
            self.cvals[site] = self.spec.c_fn(state.asym().n, &view);
        }
        self.rebuild_tables(state);
        self.schedule_next_jump();
        self.t_cursor = 0.0;
        self.y0 = fluctuation_field_occ(state.occupancies(), &self.h, &self.frame, 0.0, self.cent.rho)
            .expect("field support must fit the ring");
    }

    fn elapse(&mut self, t0: f64, dt: f64, state: &SimState) {
        let end = t0 + dt;
        let mut cur = t0;
        while self.next_jump < end {
            let tj = self.next_jump;
            self.integrate_segment(cur, tj);
            cur = tj;
            self.shift += if self.v_site > 0.0 { 1 } else { -1 };
            self.rebuild_tables(state);
            self.schedule_next_jump();
        }
        self.integrate_segment(cur, end);
        self.t_cursor = end;
    }

    fn apply(&mut self, ev: &Event, state: &SimState) {
        // realized field jump at the event time, from the chi expansion
        let chi = self.chi(self.t_cursor);
        let site = ev.bond;
        let n = self.n;
        let chi2 = chi * chi;
        let grad_here = self.grad[0][site] - chi / n * self.grad[1][site]
            + chi2 / (2.0 * n * n) * self.grad[2][site]
            - chi2 * chi / (6.0 * n * n * n) * self.grad[3][site];
        let dy = (if ev.to_right { 1.0 } else { -1.0 }) * grad_here / (n * n.sqrt());
        self.qv_real += dy * dy;
        // rates and eta changed near the bond
        self.eta_changed(ev.from, -1.0);
        self.eta_changed(ev.to, 1.0);
        for off in -self.range..=(self.range + 1) {
            let site = state.wrap(ev.bond as i64 + off);
            self.refresh_site(site, state);
        }
    }

    fn sample(&mut self, t: f64, state: &SimState) {
        let y = fluctuation_field_occ(state.occupancies(), &self.h, &self.frame, t, self.cent.rho)
            .expect("field support must fit the ring");
        self.samples.push(DecompSample {
            t,
            y,
            i: self.i_int,
            b: self.b_int,
            k: self.k_int,
            m: y - self.y0 - self.i_int - self.b_int - self.k_int,
            qv_pred: self.qv_pred,
            qv_real: self.qv_real,
        });
    }
}

/// Which replacement the Boltzmann-Gibbs probe integrates against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BgOrder {
    /// `tau_x f - (phi''_f/2) [ (eta^{(l)}(x) - rho)^2 - sigma^2_l/(2l+1) ]`
    Second,
    /// `tau_x f - phi'_f (eta^{(l)}(x) - rho)`
    First,
    /// `tau_x f` alone (for functions already fully centered pointwise)
    Plain,
}

/// Event-exact accumulator of the Boltzmann-Gibbs integrals
/// `int_0^t sum_x h(x) [tau_x f - replacement_l(x)] ds` for a family of
/// block radii `l`, sharing one trajectory.
pub struct BgProbe {
    f: LocalFunction,
    order: BgOrder,
    coef: f64,
    rho: f64,
    h: Vec<f64>,
    x0: i64,
    ells: Vec<u32>,
    sigma2_over: Vec<f64>,
    blocks: Vec<Vec<i64>>,
    fvals: Vec<f64>,
    r_f: f64,
    r_q: Vec<f64>,
    ints: Vec<f64>,
    l: usize,
    /// per probe time: integral value for each block radius
    pub samples: Vec<(f64, Vec<f64>)>,
}

impl BgProbe {
    /// `h[i]` is the lattice weight at site `x0 + i`; `coef` is
    /// `phi''_f(rho)/2` (Second), `phi'_f(rho)` (First) or ignored (Plain).
    pub fn new(
        f: LocalFunction,
        order: BgOrder,
        coef: f64,
        measure: &MeasureSpec,
        h: Vec<f64>,
        x0: i64,
        ells: Vec<u32>,
    ) -> Self {
        let sigma2_over =
            ells.iter().map(|&l| measure.sigma2_block(l) / (2.0 * l as f64 + 1.0)).collect();
        BgProbe {
            f,
            order,
            coef,
            rho: measure.rho(),
            h,
            x0,
            ells,
            sigma2_over,
            blocks: Vec::new(),
            fvals: Vec::new(),
            r_f: 0.0,
            r_q: Vec::new(),
            ints: Vec::new(),
            l: 0,
            samples: Vec::new(),
        }
    }

    /// Lattice weights `h(x) = grad_n H(x)` of a test function.
    pub fn gradient_weights(h: &TestFunction, n: u32) -> (Vec<f64>, i64) {
        let nf = n as f64;
        let (lo, hi) = h.support();
        let x_lo = (nf * lo).ceil() as i64 - 1;
        let x_hi = (nf * hi).floor() as i64 + 1;
        let w = (x_lo..=x_hi)
            .map(|x| nf * (h.eval((x + 1) as f64 / nf) - h.eval(x as f64 / nf)))
            .collect();
        (w, x_lo)
    }

    /// The theorem's right side with unit constant:
    /// `t l / n * (sum h^2 / n) + t^2 n^2 / l^{2+alpha0} * (sum |h| / n)^2`
    /// for the second-order replacement, and
    /// `t l^2 / n * (sum h^2 / n) + t^2 n^2 / l^{1+alpha0} * (sum |h| / n)^2`
    /// for the first-order one.
    pub fn bound(&self, n: u32, ell: u32, t: f64, alpha0: f64) -> f64 {
        let nf = n as f64;
        let h2: f64 = self.h.iter().map(|v| v * v).sum::<f64>() / nf;
        let h1: f64 = self.h.iter().map(|v| v.abs()).sum::<f64>() / nf;
        let lf = ell as f64;
        match self.order {
            BgOrder::Second | BgOrder::Plain => {
                t * lf / nf * h2 + t * t * nf * nf / lf.powf(2.0 + alpha0) * h1 * h1
            }
            BgOrder::First => {
                t * lf * lf / nf * h2 + t * t * nf * nf / lf.powf(1.0 + alpha0) * h1 * h1
            }
        }
    }

    fn q_val(&self, channel: usize, center: usize) -> f64 {
        let ell = self.ells[channel];
        let m = 2.0 * ell as f64 + 1.0;
        let avg = self.blocks[channel][center] as f64 / m - self.rho;
        match self.order {
            BgOrder::Second => avg * avg - self.sigma2_over[channel],
            BgOrder::First => avg,
            BgOrder::Plain => 0.0,
        }
    }
}

impl Observer for BgProbe {
    fn init(&mut self, state: &SimState) {
        self.l = state.len();
        let width = self.h.len();
        assert!(width as i64 <= self.l as i64, "weight window wraps the ring");
        self.fvals = (0..width)
            .map(|i| {
                let x = self.x0 + i as i64;
                let w: Vec<u32> =
                    (self.f.lo..=self.f.hi).map(|j| state.occupancy(x + j)).collect();
                self.f.eval(&w)
            })
            .collect();
        self.r_f = self.h.iter().zip(&self.fvals).map(|(h, f)| h * f).sum();
        self.blocks = self
            .ells
            .iter()
            .map(|&ell| {
                (0..width)
                    .map(|i| {
                        let x = self.x0 + i as i64;
                        (-(ell as i64)..=ell as i64)
                            .map(|j| state.occupancy(x + j) as i64)
                            .sum()
                    })
                    .collect()
            })
            .collect();
        self.r_q = (0..self.ells.len())
            .map(|ch| {
                (0..width).map(|i| self.h[i] * self.q_val(ch, i)).sum()
            })
            .collect();
        self.ints = vec![0.0; self.ells.len().max(1)];
    }

    fn elapse(&mut self, _t0: f64, dt: f64, _state: &SimState) {
        if self.ells.is_empty() {
            self.ints[0] += self.r_f * dt;
            return;
        }
        for (ch, int) in self.ints.iter_mut().enumerate() {
            *int += (self.r_f - self.coef * self.r_q[ch]) * dt;
        }
    }

    fn apply(&mut self, ev: &Event, state: &SimState) {
        let width = self.h.len() as i64;
        let ring = self.l as i64;
        // tau_x f changes for x with ev site in the support window
        for (site, _delta) in [(ev.from as i64, -1i64), (ev.to as i64, 1i64)] {
            for j in self.f.lo..=self.f.hi {
                let x = site - j;
                let i = (x - self.x0).rem_euclid(ring);
                if i >= width {
                    continue;
                }
                let i = i as usize;
                let w: Vec<u32> = (self.f.lo..=self.f.hi)
                    .map(|jj| state.occupancy(self.x0 + i as i64 + jj))
                    .collect();
                let new = self.f.eval(&w);
                self.r_f += self.h[i] * (new - self.fvals[i]);
                self.fvals[i] = new;
            }
        }
        for (ch, &ell) in self.ells.iter().enumerate() {
            let ell = ell as i64;
            for (site, delta) in [(ev.from as i64, -1i64), (ev.to as i64, 1i64)] {
                for off in -ell..=ell {
                    let x = site + off;
                    let i = (x - self.x0).rem_euclid(ring);
                    if i >= width {
                        continue;
                    }
                    let i = i as usize;
                    let old_q = self.q_val(ch, i);
                    self.blocks[ch][i] += delta;
                    let new_q = self.q_val(ch, i);
                    self.r_q[ch] += self.h[i] * (new_q - old_q);
                }
            }
        }
    }

    fn sample(&mut self, t: f64, _state: &SimState) {
        self.samples.push((t, self.ints.clone()));
    }
}
