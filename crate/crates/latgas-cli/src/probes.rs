//! Probe assembly for simulation runs: builds typed observers from config
//! blocks and flattens their samples into output records.

use latgas::engine::{Event, Observer, SimState};
use latgas::fields::{AEpsProbe, CurrentHeightProbe, FieldProbe, TestFunction};
use latgas::martingale::{BgOrder, BgProbe, DecomposeObserver};
use latgas::measures::{phi_derivatives, LocalFunction, MeasureSpec};
use serde::Serialize;

use crate::config::{ConfigError, ProbeBlock, RunConfig};

#[derive(Debug, Serialize)]
pub struct Record {
    pub replica: u64,
    pub t: f64,
    pub probe: String,
    pub value: f64,
}

pub enum Built {
    Field { id: String, probe: FieldProbe },
    AEps { id: String, eps: Vec<f64>, probe: AEpsProbe },
    Current { id: String, probe: CurrentHeightProbe },
    Decompose { id: String, obs: Box<DecomposeObserver> },
    Bg { id: String, ells: Vec<u32>, probe: Box<BgProbe> },
}

pub struct ProbeSet(pub Vec<Built>);

impl Observer for ProbeSet {
    fn init(&mut self, state: &SimState) {
        for b in self.0.iter_mut() {
            b.observer().init(state);
        }
    }
    fn elapse(&mut self, t0: f64, dt: f64, state: &SimState) {
        for b in self.0.iter_mut() {
            b.observer().elapse(t0, dt, state);
        }
    }
    fn apply(&mut self, ev: &Event, state: &SimState) {
        for b in self.0.iter_mut() {
            b.observer().apply(ev, state);
        }
    }
    fn sample(&mut self, t: f64, state: &SimState) {
        for b in self.0.iter_mut() {
            b.observer().sample(t, state);
        }
    }
}

impl Built {
    fn observer(&mut self) -> &mut dyn Observer {
        match self {
            Built::Field { probe, .. } => probe,
            Built::AEps { probe, .. } => probe,
            Built::Current { probe, .. } => probe,
            Built::Decompose { obs, .. } => obs.as_mut(),
            Built::Bg { probe, .. } => probe.as_mut(),
        }
    }

    pub fn records(&self, replica: u64, out: &mut Vec<Record>) {
        match self {
            Built::Field { id, probe } => {
                for (t, values) in &probe.samples {
                    for v in values {
                        out.push(Record { replica, t: *t, probe: id.clone(), value: *v });
                    }
                }
            }
            Built::AEps { id, eps, probe } => {
                for (channel, samples) in probe.samples().iter().enumerate() {
                    let pid = format!("{id}.eps{}", eps[channel]);
                    for (t, v) in samples {
                        out.push(Record { replica, t: *t, probe: pid.clone(), value: *v });
                    }
                }
            }
            Built::Current { id, probe } => {
                for (t, j0, heights) in &probe.samples {
                    out.push(Record {
                        replica,
                        t: *t,
                        probe: format!("{id}.j0"),
                        value: *j0 as f64,
                    });
                    for (x, h) in probe.tracked.iter().zip(heights) {
                        out.push(Record {
                            replica,
                            t: *t,
                            probe: format!("{id}.height{x}"),
                            value: *h as f64,
                        });
                    }
                }
            }
            Built::Decompose { id, obs } => {
                for s in &obs.samples {
                    for (term, v) in [
                        ("y", s.y),
                        ("i", s.i),
                        ("b", s.b),
                        ("k", s.k),
                        ("m", s.m),
                        ("qv_pred", s.qv_pred),
                        ("qv_real", s.qv_real),
                    ] {
                        out.push(Record {
                            replica,
                            t: s.t,
                            probe: format!("{id}.{term}"),
                            value: v,
                        });
                    }
                }
            }
            Built::Bg { id, ells, probe } => {
                for (t, vals) in &probe.samples {
                    for (ell, v) in ells.iter().zip(vals) {
                        out.push(Record {
                            replica,
                            t: *t,
                            probe: format!("{id}.l{ell}"),
                            value: *v,
                        });
                    }
                }
            }
        }
    }
}

pub fn build_probes(cfg: &RunConfig) -> Result<ProbeSet, ConfigError> {
    let measure = cfg.build_measure()?;
    let spec = cfg.build_model()?;
    let asym = cfg.build_asymmetry()?;
    let rho = measure.rho();
    let mut out = Vec::new();
    for p in &cfg.probes {
        match p.kind.as_str() {
            "field" => {
                let h = required_h(p)?;
                let frame = p.build_frame(cfg)?;
                out.push(Built::Field {
                    id: p.id.clone(),
                    probe: FieldProbe::new(vec![h], frame, rho),
                });
            }
            "a-eps" => {
                let h = required_h(p)?;
                let frame = p.build_frame(cfg)?;
                let mollifiers = p.build_mollifiers()?;
                let eps = mollifiers.iter().map(|m| m.eps).collect();
                let probe = AEpsProbe::new(&h, frame, rho, &mollifiers, cfg.engine.l)
                    .map_err(|e| ConfigError::Invalid(e.to_string()))?;
                out.push(Built::AEps { id: p.id.clone(), eps, probe });
            }
            "current" => {
                let bonds = p.bonds.clone().unwrap_or_else(|| vec![0]);
                out.push(Built::Current {
                    id: p.id.clone(),
                    probe: CurrentHeightProbe::new(bonds),
                });
            }
            "decompose" => {
                let h = required_h(p)?;
                out.push(Built::Decompose {
                    id: p.id.clone(),
                    obs: Box::new(DecomposeObserver::new(h, &spec, &asym, &measure)),
                });
            }
            "bg" => {
                let h = required_h(p)?;
                let ells = p.ells.clone().unwrap_or_else(|| vec![4, 8, 16]);
                let f = LocalFunction::v_b(&spec, &asym, &measure);
                let tm = phi_derivatives(&f, &measure);
                if tm.phi.abs() > 1e-8 || tm.phi1.abs() > 1e-8 {
                    return Err(ConfigError::Invalid(format!(
                        "bg probe {} needs a centered local function: phi={} phi'={}",
                        p.id, tm.phi, tm.phi1
                    )));
                }
                let (weights, x0) = BgProbe::gradient_weights(&h, asym.n);
                out.push(Built::Bg {
                    id: p.id.clone(),
                    ells: ells.clone(),
                    probe: Box::new(BgProbe::new(
                        f,
                        BgOrder::Second,
                        tm.phi2 / 2.0,
                        &measure,
                        weights,
                        x0,
                        ells,
                    )),
                });
            }
            other => return Err(ConfigError::Invalid(format!("unknown probe kind {other}"))),
        }
    }
    Ok(ProbeSet(out))
}

fn required_h(p: &ProbeBlock) -> Result<TestFunction, ConfigError> {
    p.h.as_ref()
        .ok_or_else(|| ConfigError::Invalid(format!("probe {} needs h", p.id)))?
        .build()
}

/// Convenience used by `measures moments`: the named local functions whose
/// tilted means are reported.
pub fn named_local_functions(
    spec: &latgas::model::ModelSpec,
    asym: &latgas::model::Asymmetry,
    measure: &MeasureSpec,
) -> Vec<LocalFunction> {
    let rho = measure.rho();
    vec![
        LocalFunction::bond_rate(spec, asym),
        LocalFunction::c_fn(spec, asym),
        LocalFunction::density_centered(rho),
        LocalFunction::pair_centered(rho),
    ]
}
