//! Experiment configuration file.
//!
//! Flat structured text, one `key = value` per line, with dotted section
//! prefixes (`env.*`, `data.*`, `model.*`, `train.*`, `plan.*`, `eval.*`)
//! plus the top-level `out_dir`. Every key has a documented default (the
//! struct defaults below); unknown keys are errors, as are malformed values.
//! `#` starts a comment.

use std::collections::BTreeSet;
use std::path::PathBuf;

use ddc_core::env::{AgentShape, EnvConfig};
use ddc_core::model::HyperConfig;
use ddc_core::train::TrainConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("config io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: bad value for `{key}`: {message}")]
    BadValue {
        line: usize,
        key: String,
        message: String,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Dataset sizes and the generation seed.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub n_x: usize,
    pub n_y: usize,
    pub n_x_eval: usize,
    pub n_y_eval_pairs: usize,
    pub n_y_eval_triples: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_x: 8000,
            n_y: 2000,
            n_x_eval: 500,
            n_y_eval_pairs: 500,
            n_y_eval_triples: 500,
            seed: 7,
        }
    }
}

/// Planner settings used by `plan` and by the planning evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanConfig {
    pub horizon: usize,
    pub max_iters: usize,
    pub tol: f64,
    /// Latent-state cost scale: Q = q_scale * I.
    pub q_scale: f64,
    /// Action cost scale: R = r_scale * I.
    pub r_scale: f64,
    /// 0 disables receding-horizon execution (open loop).
    pub replan_every: usize,
}

impl Default for PlanConfig {
    fn default() -> Self {
        PlanConfig {
            horizon: 40,
            max_iters: 50,
            tol: 1e-4,
            q_scale: 1.0,
            r_scale: 0.1,
            replan_every: 0,
        }
    }
}

/// Evaluation settings: episode counts, success radius, the normalized
/// true-state cost scales, and artifact sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub n_runs: usize,
    pub seed: u64,
    pub goal_radius: f64,
    pub corner_box: f64,
    /// True-state Q = state_cost_scale / arena^2 * I.
    pub state_cost_scale: f64,
    /// True-state R = action_cost_scale / (2 u_max^2) * I.
    pub action_cost_scale: f64,
    pub map_grid: usize,
    pub filmstrip_actions: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_runs: 20,
            seed: 99,
            goal_radius: 2.0,
            corner_box: 6.0,
            state_cost_scale: 1.0,
            action_cost_scale: 1.0,
            map_grid: 10,
            filmstrip_actions: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub env: EnvConfig,
    pub data: DataConfig,
    pub hyper: HyperConfig,
    pub train: TrainConfig,
    pub plan: PlanConfig,
    pub eval: EvalConfig,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            env: EnvConfig::default(),
            data: DataConfig::default(),
            hyper: HyperConfig::default(),
            train: TrainConfig::default(),
            plan: PlanConfig::default(),
            eval: EvalConfig::default(),
            out_dir: PathBuf::from("runs/planar"),
        }
    }
}

fn parse_num<T: core::str::FromStr>(
    key: &str,
    value: &str,
    line: usize,
) -> Result<T, ConfigError> {
    value.trim().parse().map_err(|_| ConfigError::BadValue {
        line,
        key: key.into(),
        message: format!("cannot parse `{}`", value.trim()),
    })
}

fn parse_bool(key: &str, value: &str, line: usize) -> Result<bool, ConfigError> {
    match value.trim() {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(ConfigError::BadValue {
            line,
            key: key.into(),
            message: format!("expected true/false, got `{}`", other),
        }),
    }
}

fn parse_shape(key: &str, value: &str, line: usize) -> Result<AgentShape, ConfigError> {
    AgentShape::parse(value.trim()).ok_or_else(|| ConfigError::BadValue {
        line,
        key: key.into(),
        message: format!(
            "expected one of disc/square/cross/triangle, got `{}`",
            value.trim()
        ),
    })
}

fn parse_centers(key: &str, value: &str, line: usize) -> Result<Vec<[f64; 2]>, ConfigError> {
    let v = value.trim();
    if v.is_empty() || v == "none" {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for pair in v.split(';') {
        let coords: Vec<&str> = pair.split(',').map(str::trim).collect();
        if coords.len() != 2 {
            return Err(ConfigError::BadValue {
                line,
                key: key.into(),
                message: format!("expected `x,y` pairs separated by `;`, got `{}`", pair),
            });
        }
        let x = parse_num::<f64>(key, coords[0], line)?;
        let y = parse_num::<f64>(key, coords[1], line)?;
        out.push([x, y]);
    }
    Ok(out)
}

fn parse_channels(key: &str, value: &str, line: usize) -> Result<Vec<usize>, ConfigError> {
    value
        .split(',')
        .map(|c| parse_num::<usize>(key, c, line))
        .collect()
}

impl ExperimentConfig {
    /// Parse a config file body over the defaults.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = ExperimentConfig::default();
        let mut seen = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            };
            let content = content.trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line,
                text: content.into(),
            })?;
            let key = key.trim();
            let value = value.trim();
            if !seen.insert(key.to_string()) {
                return Err(ConfigError::BadValue {
                    line,
                    key: key.into(),
                    message: "duplicate key".into(),
                });
            }
            cfg.apply(key, value, line)?;
        }
        cfg.finish()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    fn apply(&mut self, key: &str, value: &str, line: usize) -> Result<(), ConfigError> {
        match key {
            "out_dir" => self.out_dir = PathBuf::from(value),
            "env.arena_size" => self.env.arena_size = parse_num(key, value, line)?,
            "env.obstacle_centers" => self.env.obstacle_centers = parse_centers(key, value, line)?,
            "env.obstacle_radius" => self.env.obstacle_radius = parse_num(key, value, line)?,
            "env.agent_radius" => self.env.agent_radius = parse_num(key, value, line)?,
            "env.shape_x" => self.env.shape_x = parse_shape(key, value, line)?,
            "env.shape_y" => self.env.shape_y = parse_shape(key, value, line)?,
            "env.u_max" => self.env.u_max = parse_num(key, value, line)?,
            "env.state_noise_std" => self.env.state_noise_std = parse_num(key, value, line)?,
            "data.n_x" => self.data.n_x = parse_num(key, value, line)?,
            "data.n_y" => self.data.n_y = parse_num(key, value, line)?,
            "data.n_x_eval" => self.data.n_x_eval = parse_num(key, value, line)?,
            "data.n_y_eval_pairs" => self.data.n_y_eval_pairs = parse_num(key, value, line)?,
            "data.n_y_eval_triples" => self.data.n_y_eval_triples = parse_num(key, value, line)?,
            "data.seed" => self.data.seed = parse_num(key, value, line)?,
            "model.latent_dim" => self.hyper.latent_dim = parse_num(key, value, line)?,
            "model.content_dim" => self.hyper.content_dim = parse_num(key, value, line)?,
            "model.conv_channels" => self.hyper.conv_channels = parse_channels(key, value, line)?,
            "model.enc_hidden" => self.hyper.enc_hidden = parse_num(key, value, line)?,
            "model.dec_hidden" => self.hyper.dec_hidden = parse_num(key, value, line)?,
            "model.trans_hidden" => self.hyper.trans_hidden = parse_num(key, value, line)?,
            "model.sigma_floor" => self.hyper.sigma_floor = parse_num(key, value, line)?,
            "model.trans_rank" => self.hyper.trans_rank = parse_num(key, value, line)?,
            "model.det_floor" => self.hyper.det_floor = parse_num(key, value, line)?,
            "model.beta_y" => self.hyper.beta_y = parse_num(key, value, line)?,
            "model.tie_y_encoder" => self.hyper.tie_y_encoder = parse_bool(key, value, line)?,
            "model.symmetric_prior_flow" => {
                self.hyper.symmetric_prior_flow = parse_bool(key, value, line)?
            }
            "train.epochs" => self.train.epochs = parse_num(key, value, line)?,
            "train.batch_size_x" => self.train.batch_size_x = parse_num(key, value, line)?,
            "train.batch_size_y" => self.train.batch_size_y = parse_num(key, value, line)?,
            "train.learning_rate" => self.train.learning_rate = parse_num(key, value, line)?,
            "train.lr_decay" => self.train.lr_decay = parse_num(key, value, line)?,
            "train.seed" => self.train.seed = parse_num(key, value, line)?,
            "train.checkpoint_every" => self.train.checkpoint_every = parse_num(key, value, line)?,
            "train.grad_clip" => self.train.grad_clip = parse_num(key, value, line)?,
            "plan.horizon" => self.plan.horizon = parse_num(key, value, line)?,
            "plan.max_iters" => self.plan.max_iters = parse_num(key, value, line)?,
            "plan.tol" => self.plan.tol = parse_num(key, value, line)?,
            "plan.q_scale" => self.plan.q_scale = parse_num(key, value, line)?,
            "plan.r_scale" => self.plan.r_scale = parse_num(key, value, line)?,
            "plan.replan_every" => self.plan.replan_every = parse_num(key, value, line)?,
            "eval.n_runs" => self.eval.n_runs = parse_num(key, value, line)?,
            "eval.seed" => self.eval.seed = parse_num(key, value, line)?,
            "eval.goal_radius" => self.eval.goal_radius = parse_num(key, value, line)?,
            "eval.corner_box" => self.eval.corner_box = parse_num(key, value, line)?,
            "eval.state_cost_scale" => self.eval.state_cost_scale = parse_num(key, value, line)?,
            "eval.action_cost_scale" => self.eval.action_cost_scale = parse_num(key, value, line)?,
            "eval.map_grid" => self.eval.map_grid = parse_num(key, value, line)?,
            "eval.filmstrip_actions" => self.eval.filmstrip_actions = parse_num(key, value, line)?,
            _ => {
                return Err(ConfigError::UnknownKey {
                    line,
                    key: key.into(),
                })
            }
        }
        Ok(())
    }

    /// Cross-field consistency: the model's input size always follows the
    /// arena, and the pieces must pass their own validators.
    fn finish(&mut self) -> Result<(), ConfigError> {
        self.hyper.image_size = self.env.arena_size;
        self.env
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.hyper
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.eval.n_runs == 0 || self.eval.map_grid == 0 {
            return Err(ConfigError::Invalid(
                "eval.n_runs and eval.map_grid must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_all_defaults() {
        let cfg = ExperimentConfig::parse("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.hyper.image_size, cfg.env.arena_size);
    }

    #[test]
    fn keys_override_defaults_and_comments_are_ignored() {
        let cfg = ExperimentConfig::parse(
            "# full run\n\
             data.n_x = 8000   # paper size\n\
             train.epochs = 300\n\
             env.shape_y = cross\n\
             model.conv_channels = 8,16,32\n\
             out_dir = runs/full\n",
        )
        .unwrap();
        assert_eq!(cfg.data.n_x, 8000);
        assert_eq!(cfg.train.epochs, 300);
        assert_eq!(cfg.env.shape_y, AgentShape::Cross);
        assert_eq!(cfg.hyper.conv_channels, vec![8, 16, 32]);
        assert_eq!(cfg.out_dir, PathBuf::from("runs/full"));
    }

    #[test]
    fn unknown_key_is_an_error() {
        let err = ExperimentConfig::parse("train.momentum = 0.9\n").unwrap_err();
        assert!(matches!(err, ConfigError::UnknownKey { .. }), "{}", err);
    }

    #[test]
    fn bad_values_and_syntax_are_errors() {
        assert!(matches!(
            ExperimentConfig::parse("train.epochs = many\n"),
            Err(ConfigError::BadValue { .. })
        ));
        assert!(matches!(
            ExperimentConfig::parse("just a line\n"),
            Err(ConfigError::Syntax { .. })
        ));
        assert!(matches!(
            ExperimentConfig::parse("env.shape_x = blob\n"),
            Err(ConfigError::BadValue { .. })
        ));
        assert!(matches!(
            ExperimentConfig::parse("data.n_x = 5\ndata.n_x = 6\n"),
            Err(ConfigError::BadValue { .. })
        ));
    }

    #[test]
    fn cross_field_validation_fires() {
        // equal shapes rejected by the env validator
        let err = ExperimentConfig::parse("env.shape_y = disc\n").unwrap_err();
        assert!(matches!(err, ConfigError::Invalid(_)));
        // arena must match the conv stack depth
        let err = ExperimentConfig::parse("env.arena_size = 42\n").unwrap_err();
        assert!(matches!(err, ConfigError::Invalid(_)));
    }

    #[test]
    fn obstacle_centers_parse_round_trip() {
        let cfg =
            ExperimentConfig::parse("env.obstacle_centers = 13.3,10; 13.3,20; 13.3,30; 26.7,10; 26.7,20; 26.7,30\n")
                .unwrap();
        assert_eq!(cfg.env.obstacle_centers.len(), 6);
        assert_eq!(cfg.env.obstacle_centers[3], [26.7, 10.0]);
    }
}
