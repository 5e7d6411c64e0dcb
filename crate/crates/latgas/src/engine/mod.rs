//! Exact continuous-time simulation of the weakly asymmetric dynamics on a
//! ring, at diffusive time scale.
//!
//! Directed bond rates are `n^2 p_n b^R_x(eta)` and `n^2 q_n b^L_x(eta)`,
//! indexed by a Fenwick tree; event selection and waiting times are exact,
//! with no time discretization. Macro time already carries the `n^2`
//! speed-up, so probe times compare directly with the SPDE limits.

mod fenwick;
mod rng;

pub use fenwick::Fenwick;
pub use rng::{replica_rng, splitmix64};

use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::lattice::{Configuration, Occupancies};
use crate::model::{Asymmetry, ModelSpec};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("total jump rate is zero at t = {0}: absorbing configuration")]
    AbsorbingState(f64),
    #[error("rate index drifted from leaf rates by relative {0:.3e}")]
    RateIndexDrift(f64),
    #[error("probe times must be sorted, nonnegative and at most t_end")]
    BadProbeSchedule,
}

/// One jump: a particle moved `from -> to` across `bond` after waiting `dt`.
#[derive(Debug, Clone, Copy)]
pub struct Event {
    pub bond: usize,
    pub to_right: bool,
    pub dt: f64,
    pub from: usize,
    pub to: usize,
}

/// Default interval for the exhaustive rate revalidation in debug builds.
pub const DEBUG_CHECK_INTERVAL: u64 = 1_000_000;

pub struct SimState {
    spec: ModelSpec,
    asym: Asymmetry,
    occ: Vec<u32>,
    l: usize,
    rates: Fenwick,
    /// Net signed crossings of bond `(x, x+1)` since the run started.
    currents: Vec<i64>,
    t: f64,
    events: u64,
    w_right: f64,
    w_left: f64,
}

impl SimState {
    #[inline]
    pub fn occupancy(&self, x: i64) -> u32 {
        self.occ[self.wrap(x)]
    }

    #[inline]
    pub fn occupancies(&self) -> &[u32] {
        &self.occ
    }

    #[inline]
    pub fn wrap(&self, x: i64) -> usize {
        x.rem_euclid(self.l as i64) as usize
    }

    pub fn len(&self) -> usize {
        self.l
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn events(&self) -> u64 {
        self.events
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn asym(&self) -> &Asymmetry {
        &self.asym
    }

    pub fn total_rate(&self) -> f64 {
        self.rates.total()
    }

    pub fn config(&self) -> Configuration {
        Configuration::new(self.occ.clone())
    }

    /// Net signed particle count that crossed bond `(x, x+1)`.
    pub fn bond_current(&self, x: usize) -> i64 {
        self.currents[x]
    }

    /// The paper indexes `J_y` by the bond `(y-1, y)`.
    pub fn current_j(&self, y: i64) -> i64 {
        self.currents[self.wrap(y - 1)]
    }

    fn directed_rates(&self, bond: usize) -> (f64, f64) {
        let view = BondView { occ: &self.occ, l: self.l as i64, bond: bond as i64 };
        let (br, bl) = self.spec.eval_rates(self.asym.n, &view);
        (self.w_right * br, self.w_left * bl)
    }
}

/// Occupancies relative to a bond, with branch-based wrapping (offsets are
/// small compared to the ring).
struct BondView<'a> {
    occ: &'a [u32],
    l: i64,
    bond: i64,
}

impl Occupancies for BondView<'_> {
    #[inline]
    fn at(&self, x: i64) -> u32 {
        let mut i = self.bond + x;
        if i < 0 {
            i += self.l;
        } else if i >= self.l {
            i -= self.l;
        }
        self.occ[i as usize]
    }
}

/// Hooks through which probes watch a run. Between events (and between
/// scheduled sample times) every integrand of interest is constant, so
/// `elapse` segments add up to exact time integrals.
pub trait Observer {
    /// Called once before the first event.
    fn init(&mut self, _state: &SimState) {}
    /// A time segment `[t0, t0 + dt)` over which the configuration is fixed.
    fn elapse(&mut self, _t0: f64, _dt: f64, _state: &SimState) {}
    /// An event was applied; `state` is the configuration after the jump.
    fn apply(&mut self, _ev: &Event, _state: &SimState) {}
    /// A scheduled probe time.
    fn sample(&mut self, _t: f64, _state: &SimState) {}
}

/// No-op observer for runs that only need the final state.
pub struct NullObserver;
impl Observer for NullObserver {}

impl<O: Observer + ?Sized> Observer for &mut O {
    fn init(&mut self, state: &SimState) {
        (**self).init(state)
    }
    fn elapse(&mut self, t0: f64, dt: f64, state: &SimState) {
        (**self).elapse(t0, dt, state)
    }
    fn apply(&mut self, ev: &Event, state: &SimState) {
        (**self).apply(ev, state)
    }
    fn sample(&mut self, t: f64, state: &SimState) {
        (**self).sample(t, state)
    }
}

macro_rules! tuple_observer {
    ($($name:ident : $idx:tt),+) => {
        impl<$($name: Observer),+> Observer for ($($name,)+) {
            fn init(&mut self, state: &SimState) { $(self.$idx.init(state);)+ }
            fn elapse(&mut self, t0: f64, dt: f64, state: &SimState) { $(self.$idx.elapse(t0, dt, state);)+ }
            fn apply(&mut self, ev: &Event, state: &SimState) { $(self.$idx.apply(ev, state);)+ }
            fn sample(&mut self, t: f64, state: &SimState) { $(self.$idx.sample(t, state);)+ }
        }
    };
}
tuple_observer!(A: 0);
tuple_observer!(A: 0, B: 1);
tuple_observer!(A: 0, B: 1, C: 2);
tuple_observer!(A: 0, B: 1, C: 2, D: 3);
tuple_observer!(A: 0, B: 1, C: 2, D: 3, E: 4);

impl Observer for Vec<Box<dyn Observer>> {
    fn init(&mut self, state: &SimState) {
        for o in self.iter_mut() {
            o.init(state);
        }
    }
    fn elapse(&mut self, t0: f64, dt: f64, state: &SimState) {
        for o in self.iter_mut() {
            o.elapse(t0, dt, state);
        }
    }
    fn apply(&mut self, ev: &Event, state: &SimState) {
        for o in self.iter_mut() {
            o.apply(ev, state);
        }
    }
    fn sample(&mut self, t: f64, state: &SimState) {
        for o in self.iter_mut() {
            o.sample(t, state);
        }
    }
}

pub struct Engine {
    state: SimState,
    rng: ChaCha8Rng,
    /// Exhaustive rate revalidation interval; `None` disables it.
    pub check_interval: Option<u64>,
}

/// What a completed run reports besides its observers.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub t_end: f64,
    pub events: u64,
    pub final_config: Configuration,
}

impl Engine {
    pub fn new(spec: ModelSpec, asym: Asymmetry, init: Configuration, rng: ChaCha8Rng) -> Self {
        let l = init.len();
        let (w_right, w_left) = asym.directed_weights();
        let mut state = SimState {
            spec,
            asym,
            occ: init.occupancies().to_vec(),
            l,
            rates: Fenwick::new(vec![0.0; 2 * l]),
            currents: vec![0; l],
            t: 0.0,
            events: 0,
            w_right,
            w_left,
        };
        for bond in 0..l {
            let (r, lft) = state.directed_rates(bond);
            state.rates.set(2 * bond, r);
            state.rates.set(2 * bond + 1, lft);
        }
        state.rates.rebuild();
        let check_interval = if cfg!(debug_assertions) { Some(DEBUG_CHECK_INTERVAL) } else { None };
        Engine { state, rng, check_interval }
    }

    pub fn state(&self) -> &SimState {
        &self.state
    }

    /// Draws the next event without applying it.
    fn draw(&mut self) -> Result<Event, EngineError> {
        let total = self.state.rates.total();
        if !(total > 0.0) {
            return Err(EngineError::AbsorbingState(self.state.t));
        }
        let u1: f64 = self.rng.random();
        let dt = -(1.0 - u1).ln() / total;
        let u2: f64 = self.rng.random();
        let mut idx = self.state.rates.select(u2 * total);
        if self.state.rates.get(idx) == 0.0 {
            // float-edge fallback: first leaf with positive rate
            idx = (0..2 * self.state.l)
                .find(|&i| self.state.rates.get(i) > 0.0)
                .expect("total rate positive");
        }
        let bond = idx / 2;
        let to_right = idx % 2 == 0;
        let (from, to) = if to_right {
            (bond, self.state.wrap(bond as i64 + 1))
        } else {
            (self.state.wrap(bond as i64 + 1), bond)
        };
        Ok(Event { bond, to_right, dt, from, to })
    }

    fn apply(&mut self, ev: &Event) {
        let s = &mut self.state;
        debug_assert!(s.occ[ev.from] > 0);
        s.occ[ev.from] -= 1;
        s.occ[ev.to] += 1;
        s.currents[ev.bond] += if ev.to_right { 1 } else { -1 };
        let r = s.spec.range;
        for off in -r..=(r + 1) {
            let y = s.wrap(ev.bond as i64 + off);
            let (rr, rl) = s.directed_rates(y);
            s.rates.set(2 * y, rr);
            s.rates.set(2 * y + 1, rl);
        }
        s.t += ev.dt;
        s.events += 1;
        debug_assert!(
            (s.rates.total() - s.rates.total_from_tree()).abs()
                <= 1e-9 * s.rates.total().abs().max(1.0),
            "rate index total drifted"
        );
    }

    /// Draws and applies one event; exposed for fine-grained studies.
    pub fn step(&mut self) -> Result<Event, EngineError> {
        let ev = self.draw()?;
        self.apply(&ev);
        self.maybe_revalidate()?;
        Ok(ev)
    }

    fn maybe_revalidate(&mut self) -> Result<(), EngineError> {
        if let Some(every) = self.check_interval {
            if self.state.events % every == 0 {
                self.revalidate()?;
            }
        }
        Ok(())
    }

    /// Recomputes every directed rate from the configuration and compares
    /// with the index; rebuilds to clear float drift.
    pub fn revalidate(&mut self) -> Result<(), EngineError> {
        let mut worst: f64 = 0.0;
        for bond in 0..self.state.l {
            let (r, lft) = self.state.directed_rates(bond);
            let scale = r.abs().max(lft.abs()).max(1.0);
            worst = worst.max((self.state.rates.get(2 * bond) - r).abs() / scale);
            worst = worst.max((self.state.rates.get(2 * bond + 1) - lft).abs() / scale);
            self.state.rates.set(2 * bond, r);
            self.state.rates.set(2 * bond + 1, lft);
        }
        worst = worst.max(self.state.rates.drift());
        self.state.rates.rebuild();
        if worst > 1e-9 {
            return Err(EngineError::RateIndexDrift(worst));
        }
        Ok(())
    }

    /// Runs until `t_end`, feeding the observer exact constant-state time
    /// segments and sampling it at each probe time. Events are drawn ahead,
    /// which is sound by memorylessness of the exponential clocks.
    pub fn run(
        &mut self,
        t_end: f64,
        probe_times: &[f64],
        obs: &mut impl Observer,
    ) -> Result<RunSummary, EngineError> {
        if probe_times.windows(2).any(|w| w[0] > w[1])
            || probe_times.iter().any(|&t| t < 0.0 || t > t_end)
        {
            return Err(EngineError::BadProbeSchedule);
        }
        obs.init(&self.state);
        let mut cursor = self.state.t;
        debug_assert_eq!(cursor, 0.0);
        let mut probes = probe_times.iter().copied().peekable();
        while let Some(&tp) = probes.peek() {
            if tp > cursor {
                break;
            }
            obs.sample(tp, &self.state);
            probes.next();
        }
        loop {
            let ev = match self.draw() {
                Ok(ev) => ev,
                Err(EngineError::AbsorbingState(_)) => {
                    // nothing will ever move again; still honor the schedule
                    for tp in probes {
                        obs.elapse(cursor, tp - cursor, &self.state);
                        obs.sample(tp, &self.state);
                        cursor = tp;
                    }
                    obs.elapse(cursor, t_end - cursor, &self.state);
                    self.state.t = t_end;
                    return Err(EngineError::AbsorbingState(t_end));
                }
                Err(e) => return Err(e),
            };
            let t_event = cursor + ev.dt;
            while let Some(&tp) = probes.peek() {
                if tp > t_event || tp > t_end {
                    break;
                }
                obs.elapse(cursor, tp - cursor, &self.state);
                obs.sample(tp, &self.state);
                cursor = tp;
                probes.next();
            }
            if t_event >= t_end {
                obs.elapse(cursor, t_end - cursor, &self.state);
                self.state.t = t_end;
                break;
            }
            obs.elapse(cursor, t_event - cursor, &self.state);
            self.state.t = t_event - ev.dt; // apply() adds dt back
            self.apply(&ev);
            obs.apply(&ev, &self.state);
            cursor = t_event;
            self.maybe_revalidate()?;
        }
        Ok(RunSummary {
            t_end,
            events: self.state.events,
            final_config: self.state.config(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::MeasureSpec;
    use crate::model::RateFn;
    use crate::stats;

    fn ssep() -> ModelSpec {
        ModelSpec::simple_exclusion()
    }

    /// Integrates `f(eta)` at a fixed site over time, exactly.
    struct TimeAverage {
        f: crate::measures::LocalFunction,
        site: i64,
        acc: f64,
        total_t: f64,
    }

    impl Observer for TimeAverage {
        fn elapse(&mut self, _t0: f64, dt: f64, state: &SimState) {
            let w: Vec<u32> =
                (self.f.lo..=self.f.hi).map(|j| state.occupancy(self.site + j)).collect();
            self.acc += self.f.eval(&w) * dt;
            self.total_t += dt;
        }
    }

    #[test]
    fn determinism_bit_identical() {
        let m = MeasureSpec::bernoulli(0.4).unwrap();
        let asym = Asymmetry::new(1.0, 0.5, 16).unwrap();
        let run_once = || {
            let init = m.sample(64, &mut replica_rng(99, 0));
            let mut eng = Engine::new(ssep(), asym, init, replica_rng(99, 1));
            let mut obs = NullObserver;
            let s = eng.run(0.5, &[], &mut obs).unwrap();
            (s.events, s.final_config)
        };
        let (e1, c1) = run_once();
        let (e2, c2) = run_once();
        assert_eq!(e1, e2);
        assert_eq!(c1, c2);
    }

    #[test]
    fn conservation_of_particles() {
        let m = MeasureSpec::product_zrp(RateFn::linear(), 1.0).unwrap();
        let asym = Asymmetry::new(0.5, 1.0, 8).unwrap();
        let init = m.sample(32, &mut replica_rng(5, 0));
        let n0 = init.total_particles();
        let spec = ModelSpec::zero_range(RateFn::linear()).unwrap();
        let mut eng = Engine::new(spec, asym, init, replica_rng(5, 1));
        let s = eng.run(0.3, &[], &mut NullObserver).unwrap();
        assert_eq!(s.final_config.total_particles(), n0);
        assert!(s.events > 0);
    }

    #[test]
    fn empty_zero_range_is_absorbing() {
        let spec = ModelSpec::zero_range(RateFn::linear()).unwrap();
        let asym = Asymmetry::symmetric(4);
        let mut eng = Engine::new(spec, asym, Configuration::empty(16), replica_rng(1, 0));
        match eng.step() {
            Err(EngineError::AbsorbingState(_)) => {}
            other => panic!("expected absorbing state, got {other:?}"),
        }
    }

    #[test]
    fn two_site_ring_holding_times_are_exp1() {
        // One particle, n = 1, a = 0: two directed channels at rate 1/2 each.
        let asym = Asymmetry::symmetric(1);
        let mut eng = Engine::new(
            ssep(),
            asym,
            Configuration::new(vec![1, 0]),
            replica_rng(2024, 0),
        );
        let mut holds = Vec::with_capacity(4000);
        for _ in 0..4000 {
            holds.push(eng.step().unwrap().dt);
        }
        let d = stats::ks_one_sample(&holds, |x| 1.0 - (-x).exp());
        assert!(
            d < stats::ks_one_sample_critical(4000, 0.01),
            "KS statistic {d} too large"
        );
    }

    #[test]
    fn single_particle_msd_matches_random_walk() {
        // Mean-squared displacement of a lone symmetric walker is n^2 t.
        let asym = Asymmetry::symmetric(8);
        let t_end = 0.4;
        let replicas = 3000;
        let mut acc = 0.0;
        for rep in 0..replicas {
            let mut init = Configuration::empty(64);
            init.set(32, 1);
            let mut eng = Engine::new(ssep(), asym, init, replica_rng(7, rep));
            let mut displacement = 0i64;
            // displacement equals total signed crossings for a single walker
            let mut left = t_end;
            loop {
                let ev = match eng.draw() {
                    Ok(ev) => ev,
                    Err(_) => break,
                };
                if ev.dt > left {
                    break;
                }
                left -= ev.dt;
                eng.apply(&ev);
                displacement += if ev.to_right { 1 } else { -1 };
            }
            acc += (displacement as f64).powi(2);
        }
        let msd = acc / replicas as f64;
        let expect = 64.0 * t_end; // n^2 t
        assert!(
            (msd / expect - 1.0).abs() < 0.05,
            "msd/(n^2 t) = {}",
            msd / expect
        );
    }

    #[test]
    fn stationary_local_time_average() {
        // Ergodic average of a local function against its exact mean,
        // a trivial case of hydrodynamics.
        let rho = 0.3;
        let m = MeasureSpec::bernoulli(rho).unwrap();
        let asym = Asymmetry::new(1.0, 1.0, 16).unwrap();
        let f = crate::measures::LocalFunction::new("n0n1", 0, 1, |w| (w[0] * w[1]) as f64);
        let exact = m.expect_local(&f);
        let replicas = 48;
        let mut vals = Vec::new();
        for rep in 0..replicas {
            let init = m.sample(128, &mut replica_rng(31, 2 * rep));
            let mut eng = Engine::new(ssep(), asym, init, replica_rng(31, 2 * rep + 1));
            let mut obs = TimeAverage { f: f.clone(), site: 5, acc: 0.0, total_t: 0.0 };
            eng.run(2.0, &[], &mut obs).unwrap();
            vals.push(obs.acc / obs.total_t);
        }
        let (mean, se) = stats::mean_se(&vals);
        assert!(
            (mean - exact).abs() <= 3.0 * se,
            "time average {mean} vs exact {exact} (se {se})"
        );
    }

    #[test]
    fn reversibility_at_zero_drift() {
        // Forward/backward symmetry of a stationary two-point function:
        // E[f(eta_0) g(eta_t)] = E[g(eta_0) f(eta_t)] when a = 0.
        let rho = 0.5;
        let m = MeasureSpec::bernoulli(rho).unwrap();
        let asym = Asymmetry::symmetric(8);
        let f = |c: &SimState| c.occupancy(3) as f64;
        let g = |c: &SimState| (c.occupancy(4) * c.occupancy(5)) as f64;
        let mut fwd = Vec::new();
        let mut bwd = Vec::new();
        for rep in 0..6000 {
            let init = m.sample(32, &mut replica_rng(77, 2 * rep));
            let mut eng = Engine::new(ssep(), asym, init, replica_rng(77, 2 * rep + 1));
            let (f0, g0) = (f(eng.state()), g(eng.state()));
            eng.run(0.05, &[], &mut NullObserver).unwrap();
            fwd.push(f0 * g(eng.state()));
            bwd.push(g0 * f(eng.state()));
        }
        let diff: Vec<f64> = fwd.iter().zip(&bwd).map(|(a, b)| a - b).collect();
        let (mean, se) = stats::mean_se(&diff);
        assert!(mean.abs() <= 3.0 * se, "asymmetry {mean} vs se {se}");
    }

    #[test]
    fn revalidate_reports_clean_rates() {
        let m = MeasureSpec::bernoulli(0.5).unwrap();
        let asym = Asymmetry::new(1.0, 0.5, 8).unwrap();
        let init = m.sample(64, &mut replica_rng(3, 0));
        let mut eng = Engine::new(ssep(), asym, init, replica_rng(3, 1));
        for _ in 0..2000 {
            eng.step().unwrap();
        }
        eng.revalidate().unwrap();
    }
}
