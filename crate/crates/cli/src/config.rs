//! Scenario configuration: a single JSON file describing the plant, the
//! excitation, the data grid, the learner weights and the optional
//! distributed-synthesis stage. Matrices are row-major nested arrays.

use std::fmt;
use std::path::PathBuf;

use nalgebra::DMatrix;
use serde::Deserialize;

use relqr::adp::LearnerConfig;
use relqr::distributed::SdpConfig;
use relqr::sysmodel::{BlockPartition, InteractionGraph, LtiSystem, ModelError, MultiAgentSystem};

#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for ConfigError {}

impl From<ModelError> for ConfigError {
    fn from(e: ModelError) -> Self {
        ConfigError(e.to_string())
    }
}

fn default_amplitude() -> f64 {
    1.0
}

fn default_freq_min() -> f64 {
    relqr::simulate::DEFAULT_FREQUENCY_RANGE.0
}

fn default_freq_max() -> f64 {
    relqr::simulate::DEFAULT_FREQUENCY_RANGE.1
}

fn default_x0_scale() -> f64 {
    1.0
}

fn default_sigma() -> f64 {
    relqr::adp::DEFAULT_SIGMA
}

fn default_epsilon() -> f64 {
    relqr::adp::DEFAULT_EPSILON
}

fn default_safety() -> f64 {
    relqr::distributed::DEFAULT_SAFETY
}

fn default_enabled() -> bool {
    true
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub plant: PlantSection,
    pub excitation: ExcitationSection,
    pub data: DataSection,
    pub learner: LearnerSection,
    #[serde(default)]
    pub distributed: Option<DistributedSection>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub verify: bool,
}

/// Exactly one plant form must be present.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantSection {
    #[serde(default)]
    pub lti: Option<LtiSection>,
    #[serde(default)]
    pub multi_agent: Option<MultiAgentSection>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LtiSection {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultiAgentSection {
    pub state_dims: Vec<usize>,
    pub input_dims: Vec<usize>,
    /// Undirected edges as 0-based agent index pairs.
    pub edges: Vec<(usize, usize)>,
    pub a_blocks: Vec<CouplingBlockSection>,
    /// One input block per agent, in agent order.
    pub b_blocks: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CouplingBlockSection {
    pub i: usize,
    pub j: usize,
    pub values: Vec<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExcitationSection {
    pub seed: u64,
    #[serde(default)]
    pub frequency_count: Option<usize>,
    #[serde(default = "default_amplitude")]
    pub amplitude: f64,
    #[serde(default = "default_freq_min")]
    pub frequency_min: f64,
    #[serde(default = "default_freq_max")]
    pub frequency_max: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub dt: f64,
    /// Number of sampling intervals Z.
    pub intervals: usize,
    pub fine_step: f64,
    /// Initial state for a single continuous record; defaults to 0.1 on
    /// every component.
    #[serde(default)]
    pub x0: Option<Vec<f64>>,
    /// Restart from a fresh random state for every interval instead of one
    /// continuous record. Keeps unstable plants well scaled.
    #[serde(default)]
    pub restart_per_interval: bool,
    #[serde(default = "default_x0_scale")]
    pub x0_scale: f64,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
pub enum AlphaSpec {
    Value(f64),
    Keyword(String),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearnerSection {
    pub q: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
    /// Initial damping, or "auto" for the data-driven doubling search.
    pub alpha0: AlphaSpec,
    /// Step size; exactly one of `eta` and `steps` must be given.
    #[serde(default)]
    pub eta: Option<f64>,
    #[serde(default)]
    pub steps: Option<u32>,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistributedSection {
    #[serde(default = "default_enabled")]
    pub enabled: bool,
    pub c: f64,
    pub r_prime: Vec<Vec<f64>>,
    #[serde(default = "default_safety")]
    pub safety: f64,
}

/// Validated, assembled scenario ready to execute.
pub struct Scenario {
    pub sys: LtiSystem,
    pub topology: Option<(BlockPartition, InteractionGraph)>,
    pub excitation: ExcitationSection,
    pub data: DataSection,
    pub x0: Vec<f64>,
    pub alpha0: Option<f64>,
    pub eta: Option<f64>,
    pub steps: Option<u32>,
    pub learner_template: LearnerConfig,
    pub distributed: Option<SdpConfig>,
    pub output_dir: PathBuf,
    pub verify: bool,
}

fn to_matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>, ConfigError> {
    if rows.is_empty() || rows[0].is_empty() {
        return Err(ConfigError(format!("{what}: matrix must be nonempty")));
    }
    let ncols = rows[0].len();
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(ConfigError(format!("{what}: ragged rows")));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(DMatrix::from_row_slice(rows.len(), ncols, &flat))
}

impl ScenarioConfig {
    pub fn load(path: &std::path::Path) -> Result<(Self, Vec<u8>), ConfigError> {
        let bytes = std::fs::read(path)
            .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
        let config: ScenarioConfig = serde_json::from_slice(&bytes)
            .map_err(|e| ConfigError(format!("cannot parse {}: {e}", path.display())))?;
        Ok((config, bytes))
    }

    pub fn validate(self) -> Result<Scenario, ConfigError> {
        let (sys, topology) = match (&self.plant.lti, &self.plant.multi_agent) {
            (Some(lti), None) => {
                let a = to_matrix(&lti.a, "plant.lti.a")?;
                let b = to_matrix(&lti.b, "plant.lti.b")?;
                (LtiSystem::new(a, b)?, None)
            }
            (None, Some(mas)) => {
                let partition =
                    BlockPartition::new(mas.state_dims.clone(), mas.input_dims.clone())?;
                let graph = InteractionGraph::new(partition.agent_count(), &mas.edges)?;
                let coupling = mas
                    .a_blocks
                    .iter()
                    .map(|blk| {
                        Ok((
                            (blk.i, blk.j),
                            to_matrix(&blk.values, &format!("a_blocks ({},{})", blk.i, blk.j))?,
                        ))
                    })
                    .collect::<Result<Vec<_>, ConfigError>>()?;
                let inputs = mas
                    .b_blocks
                    .iter()
                    .enumerate()
                    .map(|(i, blk)| to_matrix(blk, &format!("b_blocks[{i}]")))
                    .collect::<Result<Vec<_>, ConfigError>>()?;
                let assembled =
                    MultiAgentSystem::new(partition.clone(), graph.clone(), coupling, inputs)?;
                (assembled.assemble(), Some((partition, graph)))
            }
            _ => {
                return Err(ConfigError(
                    "exactly one of plant.lti and plant.multi_agent must be present".into(),
                ))
            }
        };
        let n = sys.state_dim();
        let m = sys.input_dim();

        for (name, value) in [
            ("data.dt", self.data.dt),
            ("data.fine_step", self.data.fine_step),
            ("excitation.amplitude", self.excitation.amplitude),
            ("learner.sigma", self.learner.sigma),
            ("learner.epsilon", self.learner.epsilon),
        ] {
            if value <= 0.0 || value.is_nan() {
                return Err(ConfigError(format!("{name} must be positive")));
            }
        }
        if self.data.intervals == 0 {
            return Err(ConfigError("data.intervals must be positive".into()));
        }
        if self.excitation.frequency_min <= 0.0
            || self.excitation.frequency_max <= self.excitation.frequency_min
        {
            return Err(ConfigError("excitation frequency band is empty".into()));
        }

        let q = to_matrix(&self.learner.q, "learner.q")?;
        let r = to_matrix(&self.learner.r, "learner.r")?;
        if q.shape() != (n, n) || r.shape() != (m, m) {
            return Err(ConfigError(format!(
                "learner weights must be {n}x{n} and {m}x{m}"
            )));
        }

        let alpha0 = match &self.learner.alpha0 {
            AlphaSpec::Value(v) if *v > 0.0 => Some(*v),
            AlphaSpec::Value(v) => {
                return Err(ConfigError(format!(
                    "learner.alpha0 must be positive, got {v}"
                )))
            }
            AlphaSpec::Keyword(word) if word == "auto" => None,
            AlphaSpec::Keyword(word) => {
                return Err(ConfigError(format!(
                    "learner.alpha0 must be a number or \"auto\", got \"{word}\""
                )))
            }
        };
        match (self.learner.eta, self.learner.steps) {
            (Some(eta), None) if eta > 0.0 => {}
            (None, Some(steps)) if steps > 0 => {}
            _ => {
                return Err(ConfigError(
                    "exactly one of learner.eta and learner.steps must be given and positive"
                        .into(),
                ))
            }
        }

        let x0 = match &self.data.x0 {
            Some(values) => {
                if values.len() != n {
                    return Err(ConfigError(format!("data.x0 must have {n} entries")));
                }
                values.clone()
            }
            None => vec![0.1; n],
        };

        let distributed = match &self.distributed {
            Some(section) if section.enabled => {
                if topology.is_none() {
                    return Err(ConfigError(
                        "distributed synthesis requires a multi_agent plant".into(),
                    ));
                }
                if section.c <= 0.0 || section.safety < 1.0 || section.c.is_nan() || section.safety.is_nan() {
                    return Err(ConfigError(
                        "distributed.c must be positive and safety >= 1".into(),
                    ));
                }
                let r_prime = to_matrix(&section.r_prime, "distributed.r_prime")?;
                if r_prime.shape() != (m, m) {
                    return Err(ConfigError(format!("distributed.r_prime must be {m}x{m}")));
                }
                let mut cfg = SdpConfig::new(section.c, r_prime);
                cfg.safety = section.safety;
                Some(cfg)
            }
            _ => None,
        };

        // alpha0/step_count are resolved at run time (alpha0 may be "auto");
        // the template carries the weights and thresholds.
        let mut learner_template = LearnerConfig::new(q, r, 1.0, 1);
        learner_template.sigma = self.learner.sigma;
        learner_template.epsilon = self.learner.epsilon;

        let output_dir = self
            .output_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from("out"));
        Ok(Scenario {
            sys,
            topology,
            excitation: self.excitation,
            data: self.data,
            x0,
            alpha0,
            eta: self.learner.eta,
            steps: self.learner.steps,
            learner_template,
            distributed,
            output_dir,
            verify: self.verify,
        })
    }
}
