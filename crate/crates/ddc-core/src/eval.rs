//! Evaluation: reconstruction/prediction/planning metrics, latent maps, and
//! prediction filmstrips.
//!
//! Ground-truth states enter only through the explicitly named
//! `ground_truth_*` accessors, and only for scoring executed trajectories
//! and labeling latent-map points; every model-facing computation here goes
//! through images and actions alone.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::{PairedRecord, TripleRecord};
use crate::env::{self, EnvConfig, EnvError, Image, PlanarState};
use crate::math::{self, Mat};
use crate::model::{self, ModelError, ModelParams, View};
use crate::planner::{self, CostWeights, PlanError, PlannerOpts};
use crate::rng::{self, Stream};

const TAG_EPISODE: u64 = 0x45;
const TAG_FILMSTRIP: u64 = 0x46;

#[derive(Debug, Clone, PartialEq)]
pub enum EvalError {
    EmptySplit,
    Model(ModelError),
    Env(EnvError),
    Plan(PlanError),
    Invalid(String),
}

impl From<ModelError> for EvalError {
    fn from(e: ModelError) -> Self {
        EvalError::Model(e)
    }
}

impl From<EnvError> for EvalError {
    fn from(e: EnvError) -> Self {
        EvalError::Env(e)
    }
}

impl From<PlanError> for EvalError {
    fn from(e: PlanError) -> Self {
        EvalError::Plan(e)
    }
}

impl core::fmt::Display for EvalError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            EvalError::EmptySplit => write!(f, "evaluation split is empty"),
            EvalError::Model(e) => write!(f, "{}", e),
            EvalError::Env(e) => write!(f, "{}", e),
            EvalError::Plan(e) => write!(f, "{}", e),
            EvalError::Invalid(m) => write!(f, "{}", m),
        }
    }
}

impl core::error::Error for EvalError {}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn from_samples(xs: &[f64]) -> Self {
        let (mean, std) = math::mean_std(xs);
        MeanStd {
            mean,
            std,
            n: xs.len(),
        }
    }
}

/// Per-image sum of squared pixel errors.
pub fn sum_squared_error(img: &Image, recon: &[f64]) -> f64 {
    debug_assert_eq!(img.pixels.len(), recon.len());
    let mut acc = 0.0;
    for (&x, &m) in img.pixels.iter().zip(recon) {
        acc += (x - m) * (x - m);
    }
    acc
}

/// Mean and std of per-image squared error under an arbitrary
/// reconstructor; the model-bound metrics below plug the encoder/decoder in
/// here, tests plug reference functions.
pub fn reconstruction_stats<'a>(
    images: impl Iterator<Item = &'a Image>,
    mut reconstruct: impl FnMut(&Image) -> Result<Vec<f64>, EvalError>,
) -> Result<MeanStd, EvalError> {
    let mut losses = Vec::new();
    for img in images {
        let recon = reconstruct(img)?;
        losses.push(sum_squared_error(img, &recon));
    }
    if losses.is_empty() {
        return Err(EvalError::EmptySplit);
    }
    Ok(MeanStd::from_samples(&losses))
}

/// Encode-decode an image with posterior means.
pub fn model_reconstruct(
    img: &Image,
    view: View,
    params: &ModelParams,
) -> Result<Vec<f64>, EvalError> {
    let z = model::encode_dynamics_view(img, view, params)?.mean;
    let w = model::encode_content(img, params)?.mean;
    Ok(model::decode(&z, &w, params)?)
}

/// Reconstruction loss over the current frames of an X split.
pub fn eval_reconstruction_x(
    dataset: &[TripleRecord],
    params: &ModelParams,
) -> Result<MeanStd, EvalError> {
    reconstruction_stats(dataset.iter().map(|r| &r.x_t), |img| {
        model_reconstruct(img, View::X, params)
    })
}

/// Reconstruction loss over the Y frames of a paired split.
pub fn eval_reconstruction_y(
    dataset: &[PairedRecord],
    params: &ModelParams,
) -> Result<MeanStd, EvalError> {
    reconstruction_stats(dataset.iter().map(|r| &r.y_t), |img| {
        model_reconstruct(img, View::Y, params)
    })
}

/// One-step prediction loss on action-labeled triples: encode the current
/// frame, push the posterior mean through the local dynamics, decode with
/// the current frame's content, and score against the next frame.
pub fn eval_prediction(
    triples: &[TripleRecord],
    view: View,
    params: &ModelParams,
) -> Result<MeanStd, EvalError> {
    if triples.is_empty() {
        return Err(EvalError::EmptySplit);
    }
    let mut losses = Vec::with_capacity(triples.len());
    for rec in triples {
        let z = model::encode_dynamics_view(&rec.x_t, view, params)?.mean;
        let w = model::encode_content(&rec.x_t, params)?.mean;
        let tp = model::transition_params(&z, params)?;
        let z_next = model::forward_transition(&z, &rec.u_t.u, &tp);
        let pred = model::decode(&z_next, &w, params)?;
        losses.push(sum_squared_error(&rec.x_next, &pred));
    }
    Ok(MeanStd::from_samples(&losses))
}

/// Settings for the planning evaluation episodes.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanEvalConfig {
    pub n_runs: usize,
    pub horizon: usize,
    /// Success radius in true-state pixels.
    pub goal_radius: f64,
    /// Side of the corner sampling boxes.
    pub corner_box: f64,
    pub seed: u64,
    pub w_latent: CostWeights,
    pub w_true: CostWeights,
    pub opts: PlannerOpts,
}

impl PlanEvalConfig {
    pub fn defaults(latent_dim: usize, env_cfg: &EnvConfig, seed: u64) -> Self {
        let n = env_cfg.arena_size as f64;
        // True-state loss in normalized units: positions scaled by the
        // arena side, actions by the action bound; see the README note on
        // loss conventions.
        let w_true = CostWeights::scaled_identity(
            2,
            1.0 / (n * n),
            0.5 / (env_cfg.u_max * env_cfg.u_max),
        )
        .unwrap();
        PlanEvalConfig {
            n_runs: 20,
            horizon: 40,
            goal_radius: 2.0,
            corner_box: 6.0,
            seed,
            w_latent: CostWeights::latent_defaults(latent_dim),
            w_true,
            opts: PlannerOpts {
                u_max: env_cfg.u_max,
                ..PlannerOpts::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub start: PlanarState,
    pub goal: PlanarState,
    pub states: Vec<PlanarState>,
    pub actions: Vec<[f64; 2]>,
    pub loss: f64,
    pub success: bool,
    /// Planning failed outright (solver abort); counted as a failure.
    pub planner_failed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanningEval {
    pub loss: MeanStd,
    pub success_rate: f64,
    pub episodes: Vec<EpisodeRecord>,
}

/// Reached the goal by some step and stayed within the radius afterwards.
pub fn success_predicate(states: &[PlanarState], goal: &PlanarState, radius: f64) -> bool {
    let dist = |s: &PlanarState| {
        math::hypot(
            s.position[0] - goal.position[0],
            s.position[1] - goal.position[1],
        )
    };
    match states.iter().position(|s| dist(s) <= radius) {
        Some(first) => states[first..].iter().all(|s| dist(s) <= radius),
        None => false,
    }
}

/// Execute a fixed action sequence from `start` and score it.
pub fn run_episode(
    env_cfg: &EnvConfig,
    start: &PlanarState,
    goal: &PlanarState,
    actions: &[crate::env::ActionInput],
    w_true: &CostWeights,
    goal_radius: f64,
    rng: &mut Stream,
) -> Result<EpisodeRecord, EvalError> {
    let mut states = vec![*start];
    for a in actions {
        let next = env::step(states.last().unwrap(), a, env_cfg, rng)?;
        states.push(next);
    }
    let traj: Vec<Vec<f64>> = states.iter().map(|s| s.position.to_vec()).collect();
    let acts: Vec<Vec<f64>> = actions.iter().map(|a| a.u.to_vec()).collect();
    let loss = planner::trajectory_cost(&traj, &acts, &goal.position, w_true);
    let success = success_predicate(&states, goal, goal_radius);
    Ok(EpisodeRecord {
        start: *start,
        goal: *goal,
        states,
        actions: actions.iter().map(|a| a.u).collect(),
        loss,
        success,
        planner_failed: false,
    })
}

fn sample_in_box(
    env_cfg: &EnvConfig,
    lo: [f64; 2],
    hi: [f64; 2],
    rng: &mut Stream,
) -> Result<PlanarState, EvalError> {
    for _ in 0..100_000 {
        let s = PlanarState::new(
            rng::uniform_in(rng, lo[0], hi[0]),
            rng::uniform_in(rng, lo[1], hi[1]),
        );
        if env::is_valid(&s, env_cfg) {
            return Ok(s);
        }
    }
    Err(EvalError::Env(EnvError::SamplingExhausted))
}

/// Corner-to-corner planning episodes for one observation set: sample start
/// and goal in opposite corner boxes, render with the set's shape, plan with
/// the learned model, execute open loop, and score in true state space.
pub fn eval_planning(
    env_cfg: &EnvConfig,
    params: &ModelParams,
    view: View,
    cfg: &PlanEvalConfig,
) -> Result<PlanningEval, EvalError> {
    if cfg.n_runs == 0 {
        return Err(EvalError::Invalid("n_runs must be positive".into()));
    }
    let shape = match view {
        View::X => env_cfg.shape_x,
        View::Y => env_cfg.shape_y,
    };
    let (lo, hi) = env_cfg.margin();
    let view_tag = match view {
        View::X => 0,
        View::Y => 1,
    };
    let mut episodes = Vec::with_capacity(cfg.n_runs);
    for i in 0..cfg.n_runs {
        let mut erng = rng::derive(cfg.seed, &[TAG_EPISODE, view_tag, i as u64]);
        let start = sample_in_box(
            env_cfg,
            [lo, lo],
            [lo + cfg.corner_box, lo + cfg.corner_box],
            &mut erng,
        )?;
        let goal = sample_in_box(
            env_cfg,
            [hi - cfg.corner_box, hi - cfg.corner_box],
            [hi, hi],
            &mut erng,
        )?;
        let x_init = env::render(&start, shape, env_cfg);
        let x_goal = env::render(&goal, shape, env_cfg);
        let plan = {
            let z0 = model::encode_dynamics_view(&x_init, view, params)?.mean;
            let zg = model::encode_dynamics_view(&x_goal, view, params)?.mean;
            let dynamics = planner::ModelDynamics { params };
            planner::ilqr_plan_latent(
                &dynamics,
                &z0,
                &zg,
                cfg.horizon,
                &cfg.w_latent,
                &cfg.opts,
            )
        };
        match plan {
            Ok(plan) => {
                let mut record = run_episode(
                    env_cfg,
                    &start,
                    &goal,
                    &plan.actions,
                    &cfg.w_true,
                    cfg.goal_radius,
                    &mut erng,
                )?;
                record.planner_failed = false;
                episodes.push(record);
            }
            Err(_) => episodes.push(EpisodeRecord {
                start,
                goal,
                states: vec![start],
                actions: Vec::new(),
                loss: f64::NAN,
                success: false,
                planner_failed: true,
            }),
        }
    }
    let losses: Vec<f64> = episodes
        .iter()
        .filter(|e| !e.planner_failed)
        .map(|e| e.loss)
        .collect();
    let loss = if losses.is_empty() {
        MeanStd::default()
    } else {
        MeanStd::from_samples(&losses)
    };
    let success_rate =
        episodes.iter().filter(|e| e.success).count() as f64 / episodes.len() as f64;
    Ok(PlanningEval {
        loss,
        success_rate,
        episodes,
    })
}

/// One (true state, latent mean) pair of a latent map.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentMapPoint {
    pub state: [f64; 2],
    pub latent: Vec<f64>,
}

/// Encode a lattice of valid states rendered with the set's shape.
pub fn latent_map(
    params: &ModelParams,
    env_cfg: &EnvConfig,
    grid_n: usize,
    view: View,
) -> Result<Vec<LatentMapPoint>, EvalError> {
    if grid_n == 0 {
        return Err(EvalError::Invalid("grid_n must be positive".into()));
    }
    let shape = match view {
        View::X => env_cfg.shape_x,
        View::Y => env_cfg.shape_y,
    };
    let (lo, hi) = env_cfg.margin();
    let mut points = Vec::new();
    for iy in 0..grid_n {
        for ix in 0..grid_n {
            let fx = (ix as f64 + 0.5) / grid_n as f64;
            let fy = (iy as f64 + 0.5) / grid_n as f64;
            let s = PlanarState::new(lo + fx * (hi - lo), lo + fy * (hi - lo));
            if !env::is_valid(&s, env_cfg) {
                continue;
            }
            let img = env::render(&s, shape, env_cfg);
            let latent = model::encode_dynamics_view(&img, view, params)?.mean;
            points.push(LatentMapPoint {
                state: s.position,
                latent,
            });
        }
    }
    if points.is_empty() {
        return Err(EvalError::EmptySplit);
    }
    Ok(points)
}

/// Best similarity transform (rotation/reflection, isotropic scale,
/// translation) mapping `source` onto `target`, with its residual.
#[derive(Debug, Clone)]
pub struct ProcrustesFit {
    pub rotation: Mat,
    pub scale: f64,
    pub translation: Vec<f64>,
    /// Root-mean-square alignment error.
    pub residual: f64,
    /// Residual divided by the target point set's diameter.
    pub relative_residual: f64,
    /// Source or target collapsed to (nearly) a single point.
    pub degenerate: bool,
}

impl ProcrustesFit {
    pub fn apply(&self, p: &[f64]) -> Vec<f64> {
        let rp = self.rotation.matvec(p);
        rp.iter()
            .zip(&self.translation)
            .map(|(v, t)| self.scale * v + t)
            .collect()
    }
}

fn centroid(points: &[Vec<f64>]) -> Vec<f64> {
    let d = points[0].len();
    let mut c = vec![0.0; d];
    for p in points {
        for i in 0..d {
            c[i] += p[i];
        }
    }
    for v in c.iter_mut() {
        *v /= points.len() as f64;
    }
    c
}

fn diameter(points: &[Vec<f64>]) -> f64 {
    let mut best = 0.0;
    for i in 0..points.len() {
        for j in (i + 1)..points.len() {
            let mut acc = 0.0;
            for k in 0..points[i].len() {
                let d = points[i][k] - points[j][k];
                acc += d * d;
            }
            best = f64::max(best, acc);
        }
    }
    math::sqrt(best)
}

/// Least-squares similarity alignment (reflections allowed).
pub fn procrustes(source: &[Vec<f64>], target: &[Vec<f64>]) -> Result<ProcrustesFit, EvalError> {
    if source.len() != target.len() || source.is_empty() {
        return Err(EvalError::Invalid(
            "procrustes needs matching non-empty point sets".into(),
        ));
    }
    let n = source.len() as f64;
    let d = source[0].len();
    let cs = centroid(source);
    let ct = centroid(target);
    let mut var_s = 0.0;
    let mut cov = Mat::zeros(d, d);
    for (s, t) in source.iter().zip(target) {
        let ds: Vec<f64> = s.iter().zip(&cs).map(|(a, b)| a - b).collect();
        let dt: Vec<f64> = t.iter().zip(&ct).map(|(a, b)| a - b).collect();
        var_s += math::dot(&ds, &ds);
        for r in 0..d {
            for c in 0..d {
                *cov.at_mut(r, c) += dt[r] * ds[c];
            }
        }
    }
    var_s /= n;
    cov = cov.scale(1.0 / n);
    let target_diam = diameter(target);
    let degenerate = var_s < 1e-12 || target_diam < 1e-12;
    let (rotation, scale) = if degenerate {
        (Mat::identity(d), 1.0)
    } else {
        let (u, svals, v) = cov.svd();
        let rotation = u.matmul(&v.transpose());
        let scale = svals.iter().sum::<f64>() / var_s;
        (rotation, scale)
    };
    let rc = rotation.matvec(&cs);
    let translation: Vec<f64> = ct.iter().zip(&rc).map(|(t, r)| t - scale * r).collect();
    let fit = ProcrustesFit {
        rotation,
        scale,
        translation,
        residual: 0.0,
        relative_residual: 0.0,
        degenerate,
    };
    let mut err = 0.0;
    for (s, t) in source.iter().zip(target) {
        let mapped = fit.apply(s);
        for i in 0..d {
            let e = mapped[i] - t[i];
            err += e * e;
        }
    }
    let residual = math::sqrt(err / n);
    let relative = if target_diam > 0.0 {
        residual / target_diam
    } else {
        f64::INFINITY
    };
    Ok(ProcrustesFit {
        residual,
        relative_residual: relative,
        ..fit
    })
}

/// Alignment score between the latent maps of the two observation sets,
/// computed on the states both maps kept.
pub fn latent_map_alignment(
    map_x: &[LatentMapPoint],
    map_y: &[LatentMapPoint],
) -> Result<ProcrustesFit, EvalError> {
    let mut src = Vec::new();
    let mut dst = Vec::new();
    for px in map_x {
        if let Some(py) = map_y.iter().find(|p| p.state == px.state) {
            src.push(py.latent.clone());
            dst.push(px.latent.clone());
        }
    }
    procrustes(&src, &dst)
}

/// True frames and open-loop latent predictions for a random action
/// sequence: index 0 is the start frame (reconstruction), later frames feed
/// each prediction back through the transition.
pub fn filmstrip_frames(
    params: &ModelParams,
    env_cfg: &EnvConfig,
    view: View,
    n_actions: usize,
    seed: u64,
) -> Result<(Vec<Image>, Vec<Image>), EvalError> {
    let shape = match view {
        View::X => env_cfg.shape_x,
        View::Y => env_cfg.shape_y,
    };
    let view_tag = match view {
        View::X => 0,
        View::Y => 1,
    };
    let mut r = rng::derive(seed, &[TAG_FILMSTRIP, view_tag]);
    let start = env::sample_free_state(env_cfg, &mut r)?;
    let mut true_states = vec![start];
    let mut actions = Vec::with_capacity(n_actions);
    for _ in 0..n_actions {
        let u = env::sample_action(env_cfg, &mut r);
        let next = env::step(true_states.last().unwrap(), &u, env_cfg, &mut r)?;
        actions.push(u);
        true_states.push(next);
    }
    let true_frames: Vec<Image> = true_states
        .iter()
        .map(|s| env::render(s, shape, env_cfg))
        .collect();
    let first = &true_frames[0];
    let mut z = model::encode_dynamics_view(first, view, params)?.mean;
    let w = model::encode_content(first, params)?.mean;
    let mut predicted = Vec::with_capacity(n_actions + 1);
    predicted.push(decoded_image(&z, &w, params, env_cfg.arena_size)?);
    for u in &actions {
        let tp = model::transition_params(&z, params)?;
        z = model::forward_transition(&z, &u.u, &tp);
        predicted.push(decoded_image(&z, &w, params, env_cfg.arena_size)?);
    }
    Ok((true_frames, predicted))
}

fn decoded_image(
    z: &[f64],
    w: &[f64],
    params: &ModelParams,
    size: usize,
) -> Result<Image, EvalError> {
    let means = model::decode(z, w, params)?;
    Ok(Image {
        width: size,
        height: size,
        pixels: means,
    })
}

/// Compose rows of equal-sized frames into one image with a 1-px separator.
pub fn compose_grid(rows: &[Vec<Image>]) -> Image {
    let pad = 1;
    let fh = rows[0][0].height;
    let fw = rows[0][0].width;
    let n_cols = rows.iter().map(|r| r.len()).max().unwrap_or(0);
    let height = rows.len() * (fh + pad) + pad;
    let width = n_cols * (fw + pad) + pad;
    let mut out = Image::zeros(width, height);
    // separators at half intensity
    for p in out.pixels.iter_mut() {
        *p = 0.5;
    }
    for (ri, row) in rows.iter().enumerate() {
        for (ci, frame) in row.iter().enumerate() {
            let oy = pad + ri * (fh + pad);
            let ox = pad + ci * (fw + pad);
            for y in 0..fh {
                for x in 0..fw {
                    out.set(oy + y, ox + x, frame.at(y, x));
                }
            }
        }
    }
    out
}

/// Table-1-style metrics for one observation set.
#[derive(Debug, Clone, PartialEq)]
pub struct SetMetrics {
    pub reconstruction: MeanStd,
    pub prediction: MeanStd,
    pub planning_loss: MeanStd,
    pub success_rate: f64,
    pub planning_runs: usize,
}

/// The full evaluation artifact for both sets.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub x: SetMetrics,
    pub y: SetMetrics,
    pub eval_seed: u64,
}
