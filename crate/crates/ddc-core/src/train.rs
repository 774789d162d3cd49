//! Deterministic seeded training loop.
//!
//! The loop owns no IO: logging, checkpoint persistence, and wall-clock
//! readings go through [`TrainHooks`], implemented by the CLI crate. All
//! randomness (shuffles, reparameterization noise) is derived from
//! `(seed, epoch)` and `(seed, step)` streams, so the parameter trajectory is
//! a pure function of `(config, hyperparameters, datasets)` and training can
//! resume from a checkpoint bit-exactly.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::{PairedRecord, TripleRecord};
use crate::model::{HyperConfig, ModelError, ModelParams};
use crate::objective::{self, ElboBreakdown, Gradients, ObjectiveError};
use crate::rng::{self, Stream};

const TAG_SHUFFLE: u64 = 0x5348;
const TAG_STEP_NOISE: u64 = 0x4e4f;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size_x: usize,
    pub batch_size_y: usize,
    pub learning_rate: f64,
    /// Multiplicative per-epoch step-size decay; 1.0 disables it.
    pub lr_decay: f64,
    pub seed: u64,
    /// Write a checkpoint every this many epochs (0: only the final one).
    pub checkpoint_every: usize,
    /// Global gradient-norm clip threshold.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size_x: 128,
            batch_size_y: 32,
            learning_rate: 1e-4,
            lr_decay: 1.0,
            seed: 0,
            checkpoint_every: 0,
            grad_clip: 10.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 || self.batch_size_x == 0 || self.batch_size_y == 0 {
            return Err(TrainError::InvalidConfig(
                "epochs and batch sizes must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0) || !(self.lr_decay > 0.0) {
            return Err(TrainError::InvalidConfig(
                "learning rate and decay must be positive".into(),
            ));
        }
        if !(self.grad_clip > 0.0) {
            return Err(TrainError::InvalidConfig("grad_clip must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainError {
    InvalidConfig(String),
    EmptyDataset,
    Model(ModelError),
    Objective(ObjectiveError),
    /// Training aborted on a non-finite loss; carries the offending term and
    /// the identifier of the last checkpoint the hooks reported.
    NonFinite {
        step: u64,
        term: &'static str,
        last_checkpoint: Option<String>,
    },
}

impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        TrainError::Model(e)
    }
}

impl core::fmt::Display for TrainError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            TrainError::InvalidConfig(m) => write!(f, "invalid train config: {}", m),
            TrainError::EmptyDataset => write!(f, "training requires non-empty datasets"),
            TrainError::Model(e) => write!(f, "{}", e),
            TrainError::Objective(e) => write!(f, "{}", e),
            TrainError::NonFinite {
                step,
                term,
                last_checkpoint,
            } => write!(
                f,
                "non-finite loss at step {} (term `{}`); last good checkpoint: {}",
                step,
                term,
                last_checkpoint.as_deref().unwrap_or("none")
            ),
        }
    }
}

impl core::error::Error for TrainError {}

/// Adam moment buffers, shaped like the parameter blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    /// Number of updates applied.
    pub t: u64,
}

impl AdamState {
    pub fn zeros_like(params: &ModelParams) -> Self {
        let shape = |_: ()| -> Vec<Vec<f64>> {
            params.specs().iter().map(|s| vec![0.0; s.len]).collect()
        };
        AdamState {
            m: shape(()),
            v: shape(()),
            t: 0,
        }
    }

    /// One Adam update with bias correction.
    pub fn update(&mut self, params: &mut ModelParams, grads: &Gradients, lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let c1 = 1.0 - crate::math::exp(self.t as f64 * crate::math::ln(B1));
        let c2 = 1.0 - crate::math::exp(self.t as f64 * crate::math::ln(B2));
        for bi in 0..grads.blocks.len() {
            let g = &grads.blocks[bi];
            let m = &mut self.m[bi];
            let v = &mut self.v[bi];
            let p = params.block_mut(bi);
            for i in 0..g.len() {
                m[i] = B1 * m[i] + (1.0 - B1) * g[i];
                v[i] = B2 * v[i] + (1.0 - B2) * g[i] * g[i];
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p[i] -= lr * mhat / (crate::math::sqrt(vhat) + EPS);
            }
        }
    }
}

/// Rescale gradients in place so the global norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_gradients(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub opt: AdamState,
    /// Global optimizer steps applied so far.
    pub step: u64,
    /// Completed epochs.
    pub epoch: usize,
}

impl TrainState {
    pub fn fresh(params: ModelParams) -> Self {
        let opt = AdamState::zeros_like(&params);
        TrainState {
            params,
            opt,
            step: 0,
            epoch: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean: ElboBreakdown,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochSummary>,
    pub wall_time_secs: f64,
    pub final_step: u64,
    pub final_checkpoint: Option<String>,
}

/// Side-channel for logging, checkpointing, and timing. Default methods do
/// nothing, so the loop runs unchanged without any IO attached.
pub trait TrainHooks {
    fn on_step(&mut self, _step: u64, _epoch: usize, _loss: f64, _terms: &ElboBreakdown) {}
    fn on_epoch(&mut self, _summary: &EpochSummary) {}
    /// Persist a checkpoint of `state`; the returned identifier lands in the
    /// report and in abort diagnostics.
    fn on_checkpoint(&mut self, _state: &TrainState, _is_final: bool) -> Option<String> {
        None
    }
    /// Monotonic seconds for wall-time reporting; the core has no clock.
    fn now_secs(&mut self) -> f64 {
        0.0
    }
}

/// Hook implementation that does nothing.
pub struct NoHooks;

impl TrainHooks for NoHooks {}

/// Initialize model parameters for training; see `ModelParams::init` for the
/// layout (zeroed transition head, fan-in-scaled weights).
pub fn init_params(hyper: &HyperConfig, seed: u64) -> Result<ModelParams, ModelError> {
    ModelParams::init(hyper.clone(), seed)
}

fn shuffled_indices(n: usize, rng: &mut Stream) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = (rng::uniform(rng) * (i + 1) as f64) as usize;
        idx.swap(i, j.min(i));
    }
    idx
}

/// Train from a fresh initialization.
pub fn train(
    cfg: &TrainConfig,
    hyper: &HyperConfig,
    data_x: &[TripleRecord],
    data_y: &[PairedRecord],
    hooks: &mut dyn TrainHooks,
) -> Result<(TrainState, TrainReport), TrainError> {
    cfg.validate()?;
    let params = init_params(hyper, cfg.seed)?;
    let state = TrainState::fresh(params);
    run(state, cfg, data_x, data_y, hooks)
}

/// Continue a run from a saved state. With the same config, seed, and
/// datasets, `train(n)` and `train(k) + resume(n)` produce identical bits.
pub fn resume(
    state: TrainState,
    cfg: &TrainConfig,
    data_x: &[TripleRecord],
    data_y: &[PairedRecord],
    hooks: &mut dyn TrainHooks,
) -> Result<(TrainState, TrainReport), TrainError> {
    cfg.validate()?;
    if state.epoch > cfg.epochs {
        return Err(TrainError::InvalidConfig(format!(
            "checkpoint is at epoch {}, beyond the configured {}",
            state.epoch, cfg.epochs
        )));
    }
    let expected = crate::model::block_specs(&state.params.hyper);
    if expected != *state.params.specs() {
        return Err(TrainError::Model(ModelError::ShapeMismatch(
            "checkpoint block layout does not match its hyperparameters".into(),
        )));
    }
    run(state, cfg, data_x, data_y, hooks)
}

fn run(
    mut state: TrainState,
    cfg: &TrainConfig,
    data_x: &[TripleRecord],
    data_y: &[PairedRecord],
    hooks: &mut dyn TrainHooks,
) -> Result<(TrainState, TrainReport), TrainError> {
    if data_x.is_empty() || data_y.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let t_start = hooks.now_secs();
    let hyper = state.params.hyper.clone();
    let n_x = data_x.len();
    let n_y = data_y.len();
    let steps_per_epoch = n_x.div_ceil(cfg.batch_size_x);
    let mut report = TrainReport::default();
    let mut last_checkpoint: Option<String> = None;

    for epoch in state.epoch..cfg.epochs {
        let lr = cfg.learning_rate
            * crate::math::exp(epoch as f64 * crate::math::ln(cfg.lr_decay));
        let mut rx = rng::derive(cfg.seed, &[TAG_SHUFFLE, epoch as u64, 0]);
        let mut ry = rng::derive(cfg.seed, &[TAG_SHUFFLE, epoch as u64, 1]);
        let order_x = shuffled_indices(n_x, &mut rx);
        let order_y = shuffled_indices(n_y, &mut ry);
        let mut epoch_mean = ElboBreakdown::default();
        let mut epoch_loss = 0.0;

        for s in 0..steps_per_epoch {
            let lo = s * cfg.batch_size_x;
            let hi = ((s + 1) * cfg.batch_size_x).min(n_x);
            let batch_x: Vec<TripleRecord> =
                order_x[lo..hi].iter().map(|&i| data_x[i].clone()).collect();
            // Y records tile the epoch in shuffled order.
            let batch_y: Vec<PairedRecord> = (0..cfg.batch_size_y)
                .map(|j| data_y[order_y[(s * cfg.batch_size_y + j) % n_y]].clone())
                .collect();
            let mut noise_rng = rng::derive(cfg.seed, &[TAG_STEP_NOISE, state.step]);
            let eps_x = objective::draw_x_noise(&hyper, batch_x.len(), &mut noise_rng);
            let eps_y = objective::draw_y_noise(&hyper, batch_y.len(), &mut noise_rng);
            let (loss, terms, mut grads) = match objective::loss_and_grad(
                &batch_x,
                &batch_y,
                &state.params,
                hyper.beta_y,
                &eps_x,
                &eps_y,
            ) {
                Ok(out) => out,
                Err(ObjectiveError::NonFiniteTerm { term }) => {
                    return Err(TrainError::NonFinite {
                        step: state.step,
                        term,
                        last_checkpoint,
                    });
                }
                Err(e) => return Err(TrainError::Objective(e)),
            };
            if !grads.is_finite() {
                return Err(TrainError::NonFinite {
                    step: state.step,
                    term: "gradient",
                    last_checkpoint,
                });
            }
            clip_gradients(&mut grads, cfg.grad_clip);
            state.opt.update(&mut state.params, &grads, lr);
            state.step += 1;
            hooks.on_step(state.step, epoch, loss, &terms);
            epoch_mean.accumulate(&terms, 1.0 / steps_per_epoch as f64);
            epoch_loss += loss / steps_per_epoch as f64;
        }

        state.epoch = epoch + 1;
        let summary = EpochSummary {
            epoch,
            mean_loss: epoch_loss,
            mean: epoch_mean,
        };
        hooks.on_epoch(&summary);
        report.epochs.push(summary);
        let due = cfg.checkpoint_every > 0 && state.epoch % cfg.checkpoint_every == 0;
        if due && state.epoch < cfg.epochs {
            if let Some(id) = hooks.on_checkpoint(&state, false) {
                last_checkpoint = Some(id);
            }
        }
    }

    if let Some(id) = hooks.on_checkpoint(&state, true) {
        last_checkpoint = Some(id);
    }
    report.final_checkpoint = last_checkpoint;
    report.final_step = state.step;
    report.wall_time_secs = hooks.now_secs() - t_start;
    Ok((state, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data;
    use crate::env::{AgentShape, EnvConfig};
    use crate::rng::derive;

    fn tiny_world() -> (EnvConfig, HyperConfig) {
        let h = HyperConfig::tiny();
        let cfg = EnvConfig {
            arena_size: h.image_size,
            obstacle_centers: Vec::new(),
            obstacle_radius: 0.5,
            agent_radius: 1.0,
            shape_x: AgentShape::Disc,
            shape_y: AgentShape::Square,
            u_max: 1.0,
            state_noise_std: 0.0,
        };
        (cfg, h)
    }

    fn tiny_data(cfg: &EnvConfig, nx: usize, ny: usize) -> (Vec<TripleRecord>, Vec<PairedRecord>) {
        let mut r = derive(1, &[50]);
        (
            data::generate_x(cfg, nx, &mut r).unwrap(),
            data::generate_y(cfg, ny, &mut r).unwrap(),
        )
    }

    #[test]
    fn init_params_reproducible() {
        let (_, h) = tiny_world();
        assert_eq!(init_params(&h, 3).unwrap(), init_params(&h, 3).unwrap());
        assert_ne!(init_params(&h, 3).unwrap(), init_params(&h, 4).unwrap());
    }

    #[test]
    fn one_epoch_produces_one_summary() {
        let (cfg, h) = tiny_world();
        let (dx, dy) = tiny_data(&cfg, 16, 8);
        let tc = TrainConfig {
            epochs: 1,
            batch_size_x: 8,
            batch_size_y: 4,
            learning_rate: 1e-3,
            ..TrainConfig::default()
        };
        let (state, report) = train(&tc, &h, &dx, &dy, &mut NoHooks).unwrap();
        assert_eq!(report.epochs.len(), 1);
        assert_eq!(report.final_step, 2);
        assert_eq!(state.step, 2);
        assert!(report.epochs[0].mean_loss.is_finite());
    }

    #[test]
    fn loss_decreases_on_small_problem() {
        let (cfg, h) = tiny_world();
        let (dx, dy) = tiny_data(&cfg, 24, 12);
        let tc = TrainConfig {
            epochs: 12,
            batch_size_x: 12,
            batch_size_y: 6,
            learning_rate: 3e-3,
            seed: 2,
            ..TrainConfig::default()
        };
        let (_, report) = train(&tc, &h, &dx, &dy, &mut NoHooks).unwrap();
        let first = report.epochs.first().unwrap().mean_loss;
        let last = report.epochs.last().unwrap().mean_loss;
        assert!(last < first, "loss {} -> {}", first, last);
    }

    #[test]
    fn training_is_bit_reproducible() {
        let (cfg, h) = tiny_world();
        let (dx, dy) = tiny_data(&cfg, 12, 6);
        let tc = TrainConfig {
            epochs: 3,
            batch_size_x: 6,
            batch_size_y: 3,
            learning_rate: 1e-3,
            seed: 9,
            ..TrainConfig::default()
        };
        let (sa, ra) = train(&tc, &h, &dx, &dy, &mut NoHooks).unwrap();
        let (sb, rb) = train(&tc, &h, &dx, &dy, &mut NoHooks).unwrap();
        assert_eq!(sa.params, sb.params);
        assert_eq!(ra.epochs, rb.epochs);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let (cfg, h) = tiny_world();
        let (dx, dy) = tiny_data(&cfg, 12, 6);
        let mk = |epochs| TrainConfig {
            epochs,
            batch_size_x: 6,
            batch_size_y: 3,
            learning_rate: 1e-3,
            seed: 11,
            ..TrainConfig::default()
        };
        let (full, _) = train(&mk(4), &h, &dx, &dy, &mut NoHooks).unwrap();
        let (half, _) = train(&mk(2), &h, &dx, &dy, &mut NoHooks).unwrap();
        let (resumed, _) = resume(half, &mk(4), &dx, &dy, &mut NoHooks).unwrap();
        assert_eq!(full.params, resumed.params);
        assert_eq!(full.opt, resumed.opt);
        assert_eq!(full.step, resumed.step);
    }

    #[test]
    fn resume_rejects_mismatched_shapes() {
        let (cfg, h) = tiny_world();
        let (dx, dy) = tiny_data(&cfg, 8, 4);
        let tc = TrainConfig {
            epochs: 1,
            batch_size_x: 4,
            batch_size_y: 2,
            ..TrainConfig::default()
        };
        let (mut state, _) = train(&tc, &h, &dx, &dy, &mut NoHooks).unwrap();
        // Claim a different latent dimension: the stored blocks no longer
        // match the layout derived from the hyperparameters.
        state.params.hyper.latent_dim = 3;
        let tc2 = TrainConfig { epochs: 2, ..tc };
        assert!(matches!(
            resume(state, &tc2, &dx, &dy, &mut NoHooks),
            Err(TrainError::Model(ModelError::ShapeMismatch(_)))
        ));
    }

    #[test]
    fn clipping_never_increases_norm() {
        let (_, h) = tiny_world();
        let p = init_params(&h, 5).unwrap();
        let mut r = derive(3, &[51]);
        for _ in 0..50 {
            let mut g = Gradients::zeros_like(&p);
            for b in g.blocks.iter_mut() {
                for v in b.iter_mut() {
                    *v = 5.0 * crate::rng::normal(&mut r);
                }
            }
            let before = g.global_norm();
            let reported = clip_gradients(&mut g, 10.0);
            let after = g.global_norm();
            assert!((reported - before).abs() < 1e-9);
            assert!(after <= before + 1e-12);
            assert!(after <= 10.0 + 1e-9);
        }
    }

    #[test]
    fn poisoned_params_abort_with_provenance() {
        let (cfg, h) = tiny_world();
        let (dx, dy) = tiny_data(&cfg, 8, 4);
        let tc = TrainConfig {
            epochs: 1,
            batch_size_x: 4,
            batch_size_y: 2,
            ..TrainConfig::default()
        };
        let mut params = init_params(&h, 6).unwrap();
        let idx = params.block_index("enc_dyn.fc.w").unwrap();
        params.block_mut(idx)[0] = f64::NAN;
        let state = TrainState::fresh(params);
        match run(state, &tc, &dx, &dy, &mut NoHooks) {
            Err(TrainError::NonFinite { step, term, .. }) => {
                assert_eq!(step, 0);
                assert!(!term.is_empty());
            }
            other => panic!("expected non-finite abort, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn checkpoint_hook_cadence() {
        struct Counter {
            mid: usize,
            fin: usize,
        }
        impl TrainHooks for Counter {
            fn on_checkpoint(&mut self, state: &TrainState, is_final: bool) -> Option<String> {
                if is_final {
                    self.fin += 1;
                } else {
                    self.mid += 1;
                }
                Some(format!("ckpt-{}", state.epoch))
            }
        }
        let (cfg, h) = tiny_world();
        let (dx, dy) = tiny_data(&cfg, 8, 4);
        let tc = TrainConfig {
            epochs: 4,
            batch_size_x: 8,
            batch_size_y: 4,
            checkpoint_every: 2,
            ..TrainConfig::default()
        };
        let mut hooks = Counter { mid: 0, fin: 0 };
        let (_, report) = train(&tc, &h, &dx, &dy, &mut hooks).unwrap();
        assert_eq!(hooks.mid, 1, "epoch 2 checkpoint only (epoch 4 is final)");
        assert_eq!(hooks.fin, 1);
        assert_eq!(report.final_checkpoint.as_deref(), Some("ckpt-4"));
    }
}
