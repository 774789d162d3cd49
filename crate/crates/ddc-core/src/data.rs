//! Generation of the two observation sets.
//!
//! Set X holds action-labeled triples `(x_t, u_t, x_next)`; set Y holds
//! state-aligned pairs `(y_t, x_t)` rendered from the same sampled state.
//! Ground-truth states ride along for evaluation only: they are reachable
//! exclusively through the explicitly named `ground_truth_*` accessors, and
//! everything model-facing goes through the image/action fields.

use alloc::vec::Vec;

use crate::env::{
    self, ActionInput, AgentShape, EnvConfig, EnvError, Image, PlanarState,
};
use crate::rng::{self, Stream};

/// One X-sample: observation, action, next observation.
#[derive(Debug, Clone, PartialEq)]
pub struct TripleRecord {
    pub x_t: Image,
    pub u_t: ActionInput,
    pub x_next: Image,
    state_t: PlanarState,
    state_next: PlanarState,
}

impl TripleRecord {
    pub fn with_ground_truth(
        x_t: Image,
        u_t: ActionInput,
        x_next: Image,
        state_t: PlanarState,
        state_next: PlanarState,
    ) -> Self {
        TripleRecord {
            x_t,
            u_t,
            x_next,
            state_t,
            state_next,
        }
    }

    /// Evaluation-only accessor; never used on a model-facing path.
    pub fn ground_truth_t(&self) -> PlanarState {
        self.state_t
    }

    /// Evaluation-only accessor; never used on a model-facing path.
    pub fn ground_truth_next(&self) -> PlanarState {
        self.state_next
    }
}

/// One Y-sample: the Y-view plus its state-aligned X-view. No action.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedRecord {
    pub y_t: Image,
    pub x_t: Image,
    state_t: PlanarState,
}

impl PairedRecord {
    pub fn with_ground_truth(y_t: Image, x_t: Image, state_t: PlanarState) -> Self {
        PairedRecord { y_t, x_t, state_t }
    }

    /// Evaluation-only accessor; never used on a model-facing path.
    pub fn ground_truth_t(&self) -> PlanarState {
        self.state_t
    }
}

/// Draw `n` independent triples: state uniform over the free region, action
/// uniform on the action box, next state through the true dynamics.
/// `shape` selects the render style (set X uses `config.shape_x`; the
/// evaluation harness also generates action-labeled Y-style triples).
pub fn generate_triples(
    config: &EnvConfig,
    shape: AgentShape,
    n: usize,
    rng: &mut Stream,
) -> Result<Vec<TripleRecord>, EnvError> {
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let state_t = env::sample_free_state(config, rng)?;
        let u_t = env::sample_action(config, rng);
        let state_next = env::step(&state_t, &u_t, config, rng)?;
        out.push(TripleRecord {
            x_t: env::render(&state_t, shape, config),
            u_t,
            x_next: env::render(&state_next, shape, config),
            state_t,
            state_next,
        });
    }
    Ok(out)
}

/// The action-labeled set X.
pub fn generate_x(
    config: &EnvConfig,
    n: usize,
    rng: &mut Stream,
) -> Result<Vec<TripleRecord>, EnvError> {
    generate_triples(config, config.shape_x, n, rng)
}

/// The action-free set Y: both views rendered from the same sampled state.
pub fn generate_y(
    config: &EnvConfig,
    n: usize,
    rng: &mut Stream,
) -> Result<Vec<PairedRecord>, EnvError> {
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let state_t = env::sample_free_state(config, rng)?;
        out.push(PairedRecord {
            y_t: env::render(&state_t, config.shape_y, config),
            x_t: env::render(&state_t, config.shape_x, config),
            state_t,
        });
    }
    Ok(out)
}

/// Re-check the generative invariants of a triple against a config. Only
/// meaningful for noise-free configs, where regeneration is deterministic.
pub fn triple_invariants_hold(rec: &TripleRecord, shape: AgentShape, config: &EnvConfig) -> bool {
    let mut scratch = rng::derive(0, &[0]);
    if env::render(&rec.state_t, shape, config) != rec.x_t {
        return false;
    }
    if env::render(&rec.state_next, shape, config) != rec.x_next {
        return false;
    }
    match env::step(&rec.state_t, &rec.u_t, config, &mut scratch) {
        Ok(s) => s == rec.state_next,
        Err(_) => false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math;
    use crate::rng::derive;

    #[test]
    fn x_generation_invariants_sweep() {
        let cfg = EnvConfig::default();
        let mut rng = derive(42, &[100]);
        let recs = generate_x(&cfg, 200, &mut rng).unwrap();
        assert_eq!(recs.len(), 200);
        for rec in &recs {
            assert!(triple_invariants_hold(rec, cfg.shape_x, &cfg));
            assert!(rec.u_t.in_bounds(cfg.u_max));
        }
    }

    #[test]
    fn single_noise_free_triple_matches_definition() {
        let cfg = EnvConfig::default();
        let mut rng = derive(43, &[101]);
        let rec = &generate_x(&cfg, 1, &mut rng).unwrap()[0];
        let mut scratch = derive(0, &[0]);
        let next = env::step(&rec.ground_truth_t(), &rec.u_t, &cfg, &mut scratch).unwrap();
        assert_eq!(rec.x_next, env::render(&next, cfg.shape_x, &cfg));
    }

    #[test]
    fn y_views_share_the_state() {
        let cfg = EnvConfig::default();
        let mut rng = derive(44, &[102]);
        let recs = generate_y(&cfg, 100, &mut rng).unwrap();
        assert_eq!(recs.len(), 100);
        for rec in &recs {
            let cx = env::agent_centroid(&rec.x_t, &cfg).unwrap();
            let cy = env::agent_centroid(&rec.y_t, &cfg).unwrap();
            assert!(math::hypot(cx[0] - cy[0], cx[1] - cy[1]) <= 1.0);
        }
    }

    #[test]
    fn generation_is_reproducible() {
        let cfg = EnvConfig::default();
        let a = generate_x(&cfg, 50, &mut derive(7, &[103])).unwrap();
        let b = generate_x(&cfg, 50, &mut derive(7, &[103])).unwrap();
        assert_eq!(a, b);
        let c = generate_x(&cfg, 50, &mut derive(8, &[103])).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn action_marginals_are_uniform() {
        // KS test per component on the rescaled actions.
        let cfg = EnvConfig::default();
        let mut rng = derive(45, &[104]);
        let recs = generate_x(&cfg, 2000, &mut rng).unwrap();
        for comp in 0..2 {
            let mut us: Vec<f64> = recs
                .iter()
                .map(|r| (r.u_t.u[comp] + cfg.u_max) / (2.0 * cfg.u_max))
                .collect();
            us.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let n = us.len();
            let mut d: f64 = 0.0;
            for (i, v) in us.iter().enumerate() {
                d = d
                    .max(math::abs((i + 1) as f64 / n as f64 - v))
                    .max(math::abs(v - i as f64 / n as f64));
            }
            assert!(d < 1.63 / math::sqrt(n as f64), "KS statistic {}", d);
        }
    }
}
