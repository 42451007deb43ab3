//! Experiment configuration: JSON schema, defaults and validation.

use std::path::{Path, PathBuf};

use mor_core::{Activation, FaultMode, GateMode, ModelSpec, OptimizerKind, TaskSpec, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const ENV_OUT: &str = "MOR_KIT_OUT";
pub const ENV_SEED: &str = "MOR_KIT_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BaseInit {
    /// The frozen weight is the task's shared map (single-layer models).
    #[default]
    Task,
    Kaiming,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub layers: usize,
    /// Width of the hidden activations between layers.
    pub hidden_dim: usize,
    pub n_experts: usize,
    pub n_routers: usize,
    pub k_experts: usize,
    pub k_routers: usize,
    pub rank: usize,
    pub alpha: f64,
    pub mode: GateMode,
    pub activation: Activation,
    pub base_init: BaseInit,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            layers: 1,
            hidden_dim: 16,
            n_experts: 8,
            n_routers: 2,
            k_experts: 2,
            k_routers: 2,
            rank: 8,
            alpha: 16.0,
            mode: GateMode::Mor,
            activation: Activation::Tanh,
            base_init: BaseInit::Task,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    pub lambda_expert: f64,
    pub lambda_router: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            optimizer: t.optimizer,
            weight_decay: t.weight_decay,
            lambda_expert: t.lambda_expert,
            lambda_router: t.lambda_router,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSection {
    pub n_clusters: usize,
    pub d_in: usize,
    pub d_out: usize,
    pub noise_sigma: f64,
    pub center_scale: f64,
    pub min_center_distance: f64,
    pub perturb_rank: usize,
    pub perturb_scale: f64,
    pub n_train: usize,
}

impl Default for TaskSection {
    fn default() -> Self {
        let t = TaskSpec::default();
        Self {
            n_clusters: t.n_clusters,
            d_in: t.d_in,
            d_out: t.d_out,
            noise_sigma: t.noise_sigma,
            center_scale: t.center_scale,
            min_center_distance: t.min_center_distance,
            perturb_rank: t.perturb_rank,
            perturb_scale: t.perturb_scale,
            n_train: 4000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    /// Formats for reports; checkpoints are always JSON and logs CSV.
    pub formats: Vec<Format>,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("mor-kit-out"),
            formats: vec![Format::Json, Format::Csv],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub routers: Vec<usize>,
    /// Tokens timed per model when measuring forward latency.
    pub latency_tokens: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            routers: vec![1, 2, 3, 4],
            latency_tokens: 4096,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    /// Width of the benchmarked square layer.
    pub dim: usize,
    pub routers: Vec<usize>,
    pub block_tokens: usize,
    pub blocks: usize,
    pub warmup: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            dim: 64,
            routers: vec![1, 2, 3, 4],
            block_tokens: 256,
            blocks: 60,
            warmup: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FaultSection {
    pub sigmas: Vec<f64>,
    pub mode: FaultMode,
    pub target_router: usize,
    /// Sub-routers of the MoR arm; the other arm has a single router.
    pub mor_routers: usize,
    /// Paired seeds, starting at the experiment seed.
    pub seeds: usize,
    pub n_inputs: usize,
    /// Whether both arms are trained before faulting.
    pub train: bool,
    pub confidence: f64,
}

impl Default for FaultSection {
    fn default() -> Self {
        Self {
            sigmas: vec![0.5, 1.0],
            mode: FaultMode::LogitNoise,
            target_router: 0,
            mor_routers: 2,
            seeds: 20,
            n_inputs: 10_000,
            train: true,
            confidence: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub model: ModelSection,
    pub train: TrainSection,
    pub task: TaskSection,
    pub output: OutputSection,
    pub sweep: SweepSection,
    pub bench: BenchSection,
    pub fault: FaultSection,
}

/// Command-line and environment overrides, applied after parsing.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

impl Overrides {
    /// Explicit values win over the environment.
    pub fn with_env(mut self) -> Result<Self, CliError> {
        if self.seed.is_none() {
            if let Ok(v) = std::env::var(ENV_SEED) {
                let seed = v
                    .trim()
                    .parse()
                    .map_err(|_| CliError::Config(format!("{ENV_SEED}: expected an unsigned integer, got {v:?}")))?;
                self.seed = Some(seed);
            }
        }
        if self.out.is_none() {
            if let Some(v) = std::env::var_os(ENV_OUT) {
                self.out = Some(PathBuf::from(v));
            }
        }
        Ok(self)
    }
}

fn invalid(path: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{path}: {msg}"))
}

impl ExperimentConfig {
    /// Parses JSON text; unknown or mistyped keys are reported with their
    /// path.
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let path = if path == "." { "<root>".to_string() } else { path };
            CliError::Config(format!("{path}: {}", e.inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(d) = &o.out {
            self.output.dir = d.clone();
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    /// Semantic checks; the error names the first offending key.
    pub fn validate(&self) -> Result<(), CliError> {
        let m = &self.model;
        if m.layers == 0 {
            return Err(invalid("model.layers", "must be at least 1"));
        }
        if m.layers > 1 && m.hidden_dim == 0 {
            return Err(invalid("model.hidden_dim", "must be at least 1"));
        }
        if m.n_experts == 0 {
            return Err(invalid("model.n_experts", "must be at least 1"));
        }
        if m.k_experts == 0 || m.k_experts > m.n_experts {
            return Err(invalid(
                "model.k_experts",
                format!("must be between 1 and model.n_experts ({}), got {}", m.n_experts, m.k_experts),
            ));
        }
        if m.n_routers == 0 {
            return Err(invalid("model.n_routers", "must be at least 1"));
        }
        if m.mode == GateMode::Single && m.n_routers != 1 {
            return Err(invalid("model.n_routers", "single mode has exactly one router"));
        }
        if m.k_routers == 0 || m.k_routers > m.n_routers {
            return Err(invalid(
                "model.k_routers",
                format!("must be between 1 and model.n_routers ({}), got {}", m.n_routers, m.k_routers),
            ));
        }
        if m.rank == 0 {
            return Err(invalid("model.rank", "must be at least 1"));
        }
        let dims = self.dims();
        if let Some(w) = dims.windows(2).find(|w| m.rank > w[0].min(w[1])) {
            return Err(invalid(
                "model.rank",
                format!("must not exceed the layer widths ({}x{}), got {}", w[1], w[0], m.rank),
            ));
        }
        if !(m.alpha > 0.0 && m.alpha.is_finite()) {
            return Err(invalid("model.alpha", "must be positive"));
        }
        if m.base_init == BaseInit::Task && m.layers != 1 {
            return Err(invalid("model.base_init", "\"task\" requires model.layers = 1"));
        }

        let t = &self.train;
        if t.epochs == 0 {
            return Err(invalid("train.epochs", "must be at least 1"));
        }
        if t.batch_size == 0 {
            return Err(invalid("train.batch_size", "must be at least 1"));
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return Err(invalid("train.lr", "must be positive"));
        }
        if let OptimizerKind::Adam { beta1, beta2, eps } = t.optimizer {
            if !(0.0..1.0).contains(&beta1) {
                return Err(invalid("train.optimizer.beta1", "must lie in [0, 1)"));
            }
            if !(0.0..1.0).contains(&beta2) {
                return Err(invalid("train.optimizer.beta2", "must lie in [0, 1)"));
            }
            if !(eps > 0.0) {
                return Err(invalid("train.optimizer.eps", "must be positive"));
            }
        }
        if !(t.weight_decay >= 0.0 && t.weight_decay.is_finite()) {
            return Err(invalid("train.weight_decay", "must be non-negative"));
        }
        if !(t.lambda_expert >= 0.0 && t.lambda_expert.is_finite()) {
            return Err(invalid("train.lambda_expert", "must be non-negative"));
        }
        if !(t.lambda_router >= 0.0 && t.lambda_router.is_finite()) {
            return Err(invalid("train.lambda_router", "must be non-negative"));
        }

        let k = &self.task;
        for (name, v) in [("task.n_clusters", k.n_clusters), ("task.d_in", k.d_in), ("task.d_out", k.d_out), ("task.n_train", k.n_train)] {
            if v == 0 {
                return Err(invalid(name, "must be at least 1"));
            }
        }
        for (name, v) in [
            ("task.noise_sigma", k.noise_sigma),
            ("task.center_scale", k.center_scale),
            ("task.min_center_distance", k.min_center_distance),
            ("task.perturb_scale", k.perturb_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(name, "must be finite and non-negative"));
            }
        }

        if self.output.formats.is_empty() {
            return Err(invalid("output.formats", "must list at least one format"));
        }
        if self.output.dir.as_os_str().is_empty() {
            return Err(invalid("output.dir", "must not be empty"));
        }

        check_router_list("sweep.routers", &self.sweep.routers)?;
        if self.sweep.latency_tokens == 0 {
            return Err(invalid("sweep.latency_tokens", "must be at least 1"));
        }

        let b = &self.bench;
        check_router_list("bench.routers", &b.routers)?;
        if b.dim < m.rank {
            return Err(invalid("bench.dim", format!("must be at least model.rank ({})", m.rank)));
        }
        for (name, v) in [("bench.block_tokens", b.block_tokens), ("bench.blocks", b.blocks), ("bench.warmup", b.warmup)] {
            if v == 0 {
                return Err(invalid(name, "must be at least 1"));
            }
        }

        let f = &self.fault;
        if f.sigmas.is_empty() {
            return Err(invalid("fault.sigmas", "must not be empty"));
        }
        if let Some(s) = f.sigmas.iter().find(|s| !(**s >= 0.0 && s.is_finite())) {
            return Err(invalid("fault.sigmas", format!("must be finite and non-negative, got {s}")));
        }
        if f.mor_routers < 2 {
            return Err(invalid("fault.mor_routers", "must be at least 2"));
        }
        if f.target_router >= f.mor_routers {
            return Err(invalid(
                "fault.target_router",
                format!("must be below fault.mor_routers ({})", f.mor_routers),
            ));
        }
        if f.seeds < 2 {
            return Err(invalid("fault.seeds", "must be at least 2 for a confidence interval"));
        }
        if f.n_inputs == 0 {
            return Err(invalid("fault.n_inputs", "must be at least 1"));
        }
        if !(f.confidence > 0.0 && f.confidence < 1.0) {
            return Err(invalid("fault.confidence", "must lie in (0, 1)"));
        }
        Ok(())
    }

    /// Layer widths from input to output.
    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.task.d_in];
        dims.extend(std::iter::repeat_n(self.model.hidden_dim, self.model.layers - 1));
        dims.push(self.task.d_out);
        dims
    }

    pub fn model_spec(&self) -> ModelSpec {
        let m = &self.model;
        ModelSpec {
            dims: self.dims(),
            n_experts: m.n_experts,
            n_routers: m.n_routers,
            k_experts: m.k_experts,
            k_routers: m.k_routers,
            rank: m.rank,
            alpha: m.alpha,
            mode: m.mode,
            activation: m.activation,
        }
    }

    pub fn task_spec(&self) -> TaskSpec {
        let k = &self.task;
        TaskSpec {
            n_clusters: k.n_clusters,
            d_in: k.d_in,
            d_out: k.d_out,
            noise_sigma: k.noise_sigma,
            center_scale: k.center_scale,
            min_center_distance: k.min_center_distance,
            perturb_rank: k.perturb_rank,
            perturb_scale: k.perturb_scale,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            optimizer: t.optimizer,
            weight_decay: t.weight_decay,
            seed: self.seed,
            lambda_expert: t.lambda_expert,
            lambda_router: t.lambda_router,
        }
    }

    pub fn wants(&self, f: Format) -> bool {
        self.output.formats.contains(&f)
    }

    /// Copy with `r` sub-routers; all of them are retained when the
    /// original config retains all of its own.
    pub fn with_routers(&self, r: usize) -> Self {
        let mut c = self.clone();
        let keep_all = c.model.k_routers == c.model.n_routers;
        c.model.n_routers = r;
        c.model.k_routers = if keep_all { r } else { c.model.k_routers.min(r) };
        if r == 1 && c.model.mode == GateMode::Single {
            c.model.k_routers = 1;
        }
        c
    }
}

fn check_router_list(path: &str, list: &[usize]) -> Result<(), CliError> {
    if list.is_empty() {
        return Err(invalid(path, "must not be empty"));
    }
    if list.contains(&0) {
        return Err(invalid(path, "router counts must be at least 1"));
    }
    Ok(())
}

/// Parses a comma-separated list such as `1,2,3`.
pub fn parse_list<T: std::str::FromStr>(flag: &str, s: &str) -> Result<Vec<T>, CliError> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| CliError::Config(format!("--{flag}: cannot parse {v:?}")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let back = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(ExperimentConfig::from_json("{}").unwrap(), cfg);
    }

    #[test]
    fn unknown_key_named_with_path() {
        let err = ExperimentConfig::from_json(r#"{"model": {"n_expert": 4}}"#).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("model.n_expert"), "{msg}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn k_experts_above_n_experts_rejected() {
        let err = ExperimentConfig::from_json(r#"{"model": {"n_experts": 4, "k_experts": 5}}"#).unwrap_err();
        assert!(err.to_string().starts_with("model.k_experts"), "{err}");
    }

    #[test]
    fn type_errors_name_field() {
        let err = ExperimentConfig::from_json(r#"{"train": {"lr": "fast"}}"#).unwrap_err();
        assert!(err.to_string().contains("train.lr"), "{err}");
    }

    #[test]
    fn single_mode_needs_one_router() {
        let err = ExperimentConfig::from_json(r#"{"model": {"mode": "single", "n_routers": 2, "k_routers": 1}}"#).unwrap_err();
        assert!(err.to_string().starts_with("model.n_routers"), "{err}");
        ExperimentConfig::from_json(r#"{"model": {"mode": "single", "n_routers": 1, "k_routers": 1}}"#).unwrap();
    }

    #[test]
    fn overrides_apply() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply(&Overrides {
            seed: Some(9),
            out: Some("elsewhere".into()),
        });
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.output.dir, PathBuf::from("elsewhere"));
    }

    #[test]
    fn dims_and_router_copies() {
        let mut cfg = ExperimentConfig::default();
        cfg.model.layers = 3;
        cfg.model.hidden_dim = 12;
        cfg.model.base_init = BaseInit::Kaiming;
        assert_eq!(cfg.dims(), vec![16, 12, 12, 16]);
        let c = cfg.with_routers(4);
        assert_eq!((c.model.n_routers, c.model.k_routers), (4, 4));
    }

    #[test]
    fn list_parsing() {
        assert_eq!(parse_list::<usize>("routers", "1, 2,3").unwrap(), vec![1, 2, 3]);
        assert!(parse_list::<f64>("sigma", "0.5,x").is_err());
    }
}
