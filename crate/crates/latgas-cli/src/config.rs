//! Run-configuration schema, validation, and the canonical config hash.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use latgas::fields::{Frame, Mollifier, ShiftMode, SmoothingKernel, TestFunction};
use latgas::measures::MeasureSpec;
use latgas::model::{Asymmetry, ModelSpec, RateFn};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("model: {0}")]
    Model(#[from] latgas::model::ModelError),
    #[error("measure: {0}")]
    Measure(#[from] latgas::measures::MeasureError),
    #[error("{0}")]
    Invalid(String),
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelBlock,
    pub asymmetry: AsymmetryBlock,
    pub measure: MeasureBlock,
    pub engine: EngineBlock,
    #[serde(default)]
    pub probes: Vec<ProbeBlock>,
    #[serde(default)]
    pub output: OutputBlock,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelBlock {
    pub family: String,
    #[serde(default)]
    pub g: Option<String>,
    #[serde(default)]
    pub g_table: Option<Vec<f64>>,
    #[serde(default)]
    pub m: Option<u32>,
    #[serde(default)]
    pub theta: Option<f64>,
    #[serde(default)]
    pub beta: Option<f64>,
    #[serde(default)]
    pub alpha: Option<[f64; 4]>,
    #[serde(default)]
    pub scale: Option<f64>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AsymmetryBlock {
    pub a: f64,
    pub gamma: f64,
    pub n: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasureBlock {
    pub kind: String,
    #[serde(default)]
    pub rho: Option<f64>,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub beta: Option<f64>,
    #[serde(default)]
    pub lambda: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineBlock {
    pub l: usize,
    pub t_end: f64,
    #[serde(default = "default_replicas")]
    pub replicas: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub probe_times: Option<Vec<f64>>,
    /// uniform grid of this many probe times when probe_times is absent
    #[serde(default)]
    pub probe_count: Option<usize>,
    #[serde(default)]
    pub debug_checks: bool,
}

fn default_replicas() -> u64 {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeBlock {
    pub kind: String,
    pub id: String,
    #[serde(default)]
    pub h: Option<TestFunctionBlock>,
    #[serde(default)]
    pub frame: Option<String>,
    #[serde(default)]
    pub eps: Option<Vec<f64>>,
    #[serde(default)]
    pub kernel: Option<String>,
    #[serde(default)]
    pub bonds: Option<Vec<usize>>,
    #[serde(default)]
    pub ells: Option<Vec<u32>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestFunctionBlock {
    pub kind: String,
    #[serde(default)]
    pub center: Option<f64>,
    #[serde(default)]
    pub width: Option<f64>,
    #[serde(default)]
    pub z: Option<usize>,
    #[serde(default)]
    pub wide: Option<f64>,
    #[serde(default)]
    pub plateau: Option<f64>,
    #[serde(default)]
    pub sharp: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputBlock {
    #[serde(default)]
    pub dir: Option<String>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), ConfigError> {
        self.build_model()?;
        self.build_asymmetry()?;
        self.build_measure()?;
        if self.engine.l < 2 {
            return Err(invalid("engine.l must be at least 2"));
        }
        if !(self.engine.t_end > 0.0) {
            return Err(invalid("engine.t_end must be positive"));
        }
        for p in &self.probes {
            match p.kind.as_str() {
                "field" | "a-eps" | "decompose" | "bg" => {
                    if p.h.is_none() {
                        return Err(invalid(format!("probe {} needs an h block", p.id)));
                    }
                }
                "current" => {}
                other => return Err(invalid(format!("unknown probe kind {other}"))),
            }
        }
        Ok(())
    }

    pub fn build_model(&self) -> Result<ModelSpec, ConfigError> {
        let b = &self.model;
        match b.family.as_str() {
            "simple-exclusion" => Ok(ModelSpec::simple_exclusion()),
            "zero-range" => {
                let g = match (&b.g, &b.g_table) {
                    (_, Some(table)) => RateFn::tabulated(table.clone()),
                    (Some(name), None) => match name.as_str() {
                        "linear" => RateFn::linear(),
                        "indicator" => RateFn::indicator(),
                        other => return Err(invalid(format!("unknown rate function {other}"))),
                    },
                    (None, None) => return Err(invalid("zero-range model needs g or g_table")),
                };
                Ok(ModelSpec::zero_range(g)?)
            }
            "kclg" => {
                let m = b.m.ok_or_else(|| invalid("kclg needs m"))?;
                let theta = b.theta.ok_or_else(|| invalid("kclg needs theta"))?;
                Ok(ModelSpec::kclg(m, theta)?)
            }
            "speed-change" => {
                let beta = b.beta.ok_or_else(|| invalid("speed-change needs beta"))?;
                match b.alpha {
                    Some(alpha) => Ok(ModelSpec::speed_change(beta, alpha)?),
                    None => Ok(ModelSpec::speed_change_canonical(beta, b.scale.unwrap_or(1.0))),
                }
            }
            other => Err(invalid(format!("unknown model family {other}"))),
        }
    }

    pub fn build_asymmetry(&self) -> Result<Asymmetry, ConfigError> {
        Ok(Asymmetry::new(self.asymmetry.a, self.asymmetry.gamma, self.asymmetry.n)?)
    }

    pub fn build_measure(&self) -> Result<MeasureSpec, ConfigError> {
        let b = &self.measure;
        match b.kind.as_str() {
            "bernoulli" => {
                let rho = b.rho.ok_or_else(|| invalid("bernoulli needs rho"))?;
                Ok(MeasureSpec::bernoulli(rho)?)
            }
            "product-zrp" => {
                let g = match self.build_model()? {
                    ModelSpec { family: latgas::model::Family::ZeroRange { g }, .. } => g,
                    _ => return Err(invalid("product-zrp measure needs a zero-range model")),
                };
                match (b.alpha, b.rho) {
                    (Some(alpha), _) => Ok(MeasureSpec::product_zrp(g, alpha)?),
                    (None, Some(rho)) => Ok(MeasureSpec::product_zrp_by_density(g, rho)?),
                    (None, None) => Err(invalid("product-zrp needs alpha or rho")),
                }
            }
            "markov-gibbs" => {
                let beta = b.beta.ok_or_else(|| invalid("markov-gibbs needs beta"))?;
                Ok(MeasureSpec::markov_gibbs(beta, b.lambda.unwrap_or(0.0))?)
            }
            other => Err(invalid(format!("unknown measure kind {other}"))),
        }
    }

    pub fn probe_times(&self) -> Vec<f64> {
        if let Some(ts) = &self.engine.probe_times {
            return ts.clone();
        }
        let count = self.engine.probe_count.unwrap_or(10);
        (0..=count).map(|i| self.engine.t_end * i as f64 / count as f64).collect()
    }

    /// SHA-256 of the canonical (sorted-key) JSON form of the parsed
    /// config: stable under key reordering in the source file.
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let canon = serde_json::to_string(&value).expect("canonical json");
        let mut hasher = Sha256::new();
        hasher.update(canon.as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl TestFunctionBlock {
    pub fn build(&self) -> Result<TestFunction, ConfigError> {
        match self.kind.as_str() {
            "gaussian" => Ok(TestFunction::gaussian_bump(
                self.center.unwrap_or(0.0),
                self.width.ok_or_else(|| invalid("gaussian needs width"))?,
            )),
            "hermite" => Ok(TestFunction::hermite(
                self.z.ok_or_else(|| invalid("hermite needs z"))?,
            )),
            "ramp" => Ok(latgas::fields::ramp_probe(
                self.wide.unwrap_or(1.0),
                self.plateau.unwrap_or(0.5),
                self.sharp.unwrap_or(0.125),
            )),
            other => Err(invalid(format!("unknown test function kind {other}"))),
        }
    }
}

impl ProbeBlock {
    pub fn build_frame(&self, cfg: &RunConfig) -> Result<Frame, ConfigError> {
        let asym = cfg.build_asymmetry()?;
        match self.frame.as_deref().unwrap_or("off") {
            "off" => Ok(Frame::off(asym.n)),
            "floor" => Ok(Frame::for_model(
                &cfg.build_model()?,
                &asym,
                &cfg.build_measure()?,
                ShiftMode::Floor,
            )),
            "fractional" => Ok(Frame::for_model(
                &cfg.build_model()?,
                &asym,
                &cfg.build_measure()?,
                ShiftMode::Fractional,
            )),
            other => Err(invalid(format!("unknown frame mode {other}"))),
        }
    }

    pub fn build_mollifiers(&self) -> Result<Vec<Mollifier>, ConfigError> {
        let eps = self.eps.clone().unwrap_or_else(|| vec![0.2]);
        let kernel = match self.kernel.as_deref().unwrap_or("bump") {
            "bump" => SmoothingKernel::Bump,
            "quartic" => SmoothingKernel::Quartic,
            other => return Err(invalid(format!("unknown kernel {other}"))),
        };
        Ok(eps.into_iter().map(|e| Mollifier::new(e, kernel)).collect())
    }
}
