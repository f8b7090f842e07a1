//! Run configuration: a TOML or JSON document, overridden by flags. A run is
//! a pure function of the resolved config, which is also what gets hashed.

use std::collections::BTreeMap;
use std::path::Path;

use parametrix_core::coeffs::builtin_model;
use parametrix_core::parametrix::QuadConfig;
use parametrix_core::perturb::{PerturbationPair, SupGrid};
use parametrix_core::proxy::MajorantParams;
use parametrix_core::{parse_expr, BuiltinModel, Constants, DiffusionSpec, Expr};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const CONFIG_VERSION: u32 = 1;
pub const DEFAULT_SEED: u64 = 0x5eed;

fn version() -> u32 {
    CONFIG_VERSION
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "version")]
    pub config_version: u32,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default)]
    pub model: Option<ModelSection>,
    #[serde(default)]
    pub pair: Option<PairSection>,
    #[serde(default)]
    pub quad: QuadConfig,
    #[serde(default)]
    pub sup: SupGrid,
    #[serde(default)]
    pub flow: FlowSection,
    #[serde(default)]
    pub density: DensitySection,
    #[serde(default)]
    pub diff: DiffSection,
    #[serde(default)]
    pub bounds: BoundsSection,
    #[serde(default)]
    pub experiment: ExperimentSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            config_version: CONFIG_VERSION,
            seed: None,
            threads: None,
            model: None,
            pair: None,
            quad: QuadConfig::default(),
            sup: SupGrid::default(),
            flow: FlowSection::default(),
            density: DensitySection::default(),
            diff: DiffSection::default(),
            bounds: BoundsSection::default(),
            experiment: ExperimentSection::default(),
        }
    }
}

/// A diffusion given either by a built-in name or by coefficient expressions.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    #[serde(default)]
    pub dim: Option<usize>,
    #[serde(default)]
    pub drift: Option<Vec<String>>,
    /// Row-major d×d.
    #[serde(default)]
    pub diffusion: Option<Vec<String>>,
    #[serde(default)]
    pub constants: Option<Constants>,
    /// Row-major G(t) when the drift is exactly G(t)x.
    #[serde(default)]
    pub linear_drift: Option<Vec<String>>,
    #[serde(default)]
    pub breakpoints: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MuAtom {
    pub x: Vec<f64>,
    pub w: f64,
}

/// A perturbation pair: a built-in pair, or explicit base and perturbed models.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairSection {
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    #[serde(default)]
    pub base: Option<ModelSection>,
    #[serde(default)]
    pub perturbed: Option<ModelSection>,
    #[serde(default)]
    pub epsilon: Option<f64>,
    #[serde(default)]
    pub delta: Option<f64>,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub mu: Option<Vec<MuAtom>>,
    /// Diffusion level λ of the majorant.
    #[serde(default)]
    pub lambda: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowSection {
    pub t: f64,
    pub s: f64,
    pub y: Vec<f64>,
    pub nodes: usize,
}

impl Default for FlowSection {
    fn default() -> Self {
        Self {
            t: 0.0,
            s: 1.0,
            y: vec![1.0],
            nodes: 11,
        }
    }
}

/// Output points: `points` per axis, uniform on [from, to].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AxisGrid {
    pub from: f64,
    pub to: f64,
    pub points: usize,
}

impl AxisGrid {
    pub fn values(&self) -> Vec<f64> {
        if self.points <= 1 {
            return vec![self.from];
        }
        (0..self.points)
            .map(|k| self.from + (self.to - self.from) * k as f64 / (self.points - 1) as f64)
            .collect()
    }

    /// Tensor grid in `dim` dimensions, last axis fastest.
    pub fn tensor(&self, dim: usize) -> Vec<Vec<f64>> {
        let axis = self.values();
        let mut out = vec![Vec::new()];
        for _ in 0..dim {
            out = out
                .into_iter()
                .flat_map(|p| {
                    axis.iter().map(move |v| {
                        let mut q = p.clone();
                        q.push(*v);
                        q
                    })
                })
                .collect();
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensitySection {
    pub t: f64,
    pub s: f64,
    pub x: Vec<f64>,
    pub y: AxisGrid,
    pub order: usize,
}

impl Default for DensitySection {
    fn default() -> Self {
        Self {
            t: 0.0,
            s: 0.5,
            x: vec![1.0],
            y: AxisGrid {
                from: -1.0,
                to: 4.0,
                points: 81,
            },
            order: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffSection {
    pub t: f64,
    pub s: f64,
    pub order: usize,
}

impl Default for DiffSection {
    fn default() -> Self {
        Self { t: 0.0, s: 1.0, order: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundsSection {
    pub t: f64,
    pub s: f64,
    pub order: usize,
    /// Step of the (t, s) grid for the maxima.
    pub dt: f64,
    /// ε sweep for built-in pairs; empty uses the pair's own ε. The constant
    /// is calibrated on the first entry and reused for the rest.
    pub eps: Vec<f64>,
    pub linf: bool,
    pub linf_x: AxisGrid,
    pub linf_y: AxisGrid,
    pub lemmas: Vec<String>,
    pub lemma_order: usize,
    pub lemma_samples: usize,
}

impl Default for BoundsSection {
    fn default() -> Self {
        Self {
            t: 0.0,
            s: 1.0,
            order: 3,
            dt: 0.1,
            eps: Vec::new(),
            linf: true,
            linf_x: AxisGrid {
                from: -1.0,
                to: 1.0,
                points: 5,
            },
            linf_y: AxisGrid {
                from: -3.0,
                to: 3.0,
                points: 21,
            },
            lemmas: Vec::new(),
            lemma_order: 1,
            lemma_samples: 6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub eps: Vec<f64>,
    pub q: f64,
    /// Cell step; `None` uses 0.05 for ε ≤ 0.0025 and 0.1 otherwise.
    pub dt: Option<f64>,
    pub mu: Vec<f64>,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            eps: vec![1.0, 0.5, 0.2, 0.05, 0.01, 0.0025],
            q: 2.01,
            dt: None,
            mu: vec![1.0],
        }
    }
}

impl ExperimentSection {
    pub fn dt_for(&self, eps: f64) -> f64 {
        self.dt.unwrap_or(if eps <= 0.0025 { 0.05 } else { 0.1 })
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let cfg: RunConfig = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?,
            _ => toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?,
        };
        if cfg.config_version != CONFIG_VERSION {
            return Err(CliError::Config(format!(
                "config_version {} is not supported (expected {CONFIG_VERSION})",
                cfg.config_version
            )));
        }
        Ok(cfg)
    }

    /// SHA-256 of the canonical JSON form, tagged with the subcommand.
    pub fn hash(&self, command: &str) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(command.as_bytes());
        h.update([0]);
        h.update(json.as_bytes());
        hex::encode(h.finalize())
    }

    pub fn quad(&self) -> QuadConfig {
        QuadConfig {
            mc_seed: self.seed.unwrap_or(DEFAULT_SEED),
            ..self.quad
        }
    }

    pub fn single(&self) -> Result<DiffusionSpec, CliError> {
        match &self.model {
            Some(m) => m.build()?.single().map_err(CliError::from),
            None => Err(CliError::Config("a [model] section or --model is required".into())),
        }
    }

    pub fn pair_section(&self) -> Result<&PairSection, CliError> {
        self.pair
            .as_ref()
            .ok_or_else(|| CliError::Config("a [pair] section or --pair is required".into()))
    }
}

/// Accepts the short alias `oscillating`.
pub fn canonical_name(name: &str) -> &str {
    match name {
        "oscillating" => "oscillating_pair",
        other => other,
    }
}

fn exprs(src: &[String]) -> Result<Vec<Expr>, CliError> {
    src.iter().map(|s| parse_expr(s).map_err(CliError::from)).collect()
}

impl ModelSection {
    pub fn build(&self) -> Result<BuiltinModel, CliError> {
        let built = match (&self.name, &self.drift, &self.diffusion) {
            (Some(name), None, None) => builtin_model(canonical_name(name), &self.params)?,
            (None, Some(drift), Some(diffusion)) => {
                let dim = self.dim.unwrap_or(drift.len());
                let constants = self
                    .constants
                    .ok_or_else(|| CliError::Config("expression models need a constants table".into()))?;
                let mut spec = DiffusionSpec::new("custom", dim, exprs(drift)?, exprs(diffusion)?, constants)?;
                if let Some(g) = &self.linear_drift {
                    spec = spec.with_linear_drift(exprs(g)?)?;
                }
                BuiltinModel::Single(spec)
            }
            _ => {
                return Err(CliError::Config(
                    "a model needs either `name` or both `drift` and `diffusion`".into(),
                ))
            }
        };
        let patch = |spec: DiffusionSpec| -> Result<DiffusionSpec, CliError> {
            let spec = match self.constants {
                Some(c) if self.name.is_some() => spec.with_constants(c)?,
                _ => spec,
            };
            Ok(if self.breakpoints.is_empty() {
                spec
            } else {
                spec.with_time_breakpoints(self.breakpoints.clone())
            })
        };
        Ok(match built {
            BuiltinModel::Single(s) => BuiltinModel::Single(patch(s)?),
            BuiltinModel::Pair {
                base,
                perturbed,
                epsilon,
            } => BuiltinModel::Pair {
                base: patch(base)?,
                perturbed: patch(perturbed)?,
                epsilon,
            },
        })
    }
}

impl PairSection {
    /// Builds the pair; `eps` overrides the built-in ε (and the label of
    /// explicit pairs).
    pub fn build(&self, eps: Option<f64>) -> Result<PerturbationPair, CliError> {
        let (base, perturbed, epsilon) = match (&self.name, &self.base, &self.perturbed) {
            (Some(name), None, None) => {
                let mut params = self.params.clone();
                if let Some(e) = eps {
                    params.insert("eps".into(), e);
                }
                builtin_model(canonical_name(name), &params)?.pair()?
            }
            (None, Some(b), Some(p)) => {
                let e = eps
                    .or(self.epsilon)
                    .ok_or_else(|| CliError::Config("explicit pairs need `epsilon`".into()))?;
                (b.build()?.single()?, p.build()?.single()?, e)
            }
            _ => {
                return Err(CliError::Config(
                    "a pair needs either `name` or both `base` and `perturbed`".into(),
                ))
            }
        };
        let mut pair = PerturbationPair::new(base, perturbed, epsilon)?;
        if let Some(d) = self.delta {
            pair = pair.with_delta(d)?;
        }
        if let Some(a) = self.alpha {
            pair = pair.with_alpha(a)?;
        }
        if let Some(mu) = &self.mu {
            pair = pair.with_mu(mu.iter().map(|a| (a.x.clone(), a.w)).collect())?;
        }
        if let Some(l) = self.lambda {
            pair = pair.with_majorant(MajorantParams::with_lambda(l))?;
        }
        Ok(pair)
    }
}
