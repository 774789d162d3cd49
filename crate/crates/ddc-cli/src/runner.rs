//! Command implementations behind the CLI.
//!
//! Every command reads an [`ExperimentConfig`] and works under its output
//! directory:
//!
//! ```text
//! out_dir/
//!   datasets/{x_train,y_train,x_eval,y_eval_pairs,y_eval_triples}.ddc
//!   checkpoints/ckpt_epoch_NNNN.ddck, checkpoints/final.ddck
//!   train_log.txt, train_report.txt
//!   metrics.txt, episodes_x.txt, episodes_y.txt
//!   map_x.txt, map_y.txt, map_x.png, map_y.png, map_alignment.txt
//!   filmstrip_x.png, filmstrip_y.png
//!   plan_x.txt, plan_y.txt
//! ```

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ddc_core::data;
use ddc_core::env::{self, EnvConfig, PlanarState};
use ddc_core::eval::{
    self, EpisodeRecord, MetricsReport, PlanEvalConfig, PlanningEval, SetMetrics,
};
use ddc_core::model::{ModelParams, View};
use ddc_core::objective::ElboBreakdown;
use ddc_core::planner::{self, CostWeights, PlanError, PlannerOpts};
use ddc_core::rng;
use ddc_core::train::{self, EpochSummary, TrainHooks, TrainReport, TrainState};

use crate::checkpoint::{self, CheckpointError};
use crate::config::{ConfigError, ExperimentConfig, PlanConfig};
use crate::container::{self, ContainerError, Dataset};
use crate::plot::{self, PlotError};
use crate::report::{self, ReportError};

const TAG_GEN: u64 = 0x4745;

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("{0}")]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Dataset(#[from] ContainerError),
    #[error("missing dataset `{0}` (run `ddc gen-data` first)")]
    MissingDataset(PathBuf),
    #[error("{0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("missing checkpoint `{0}` (run `ddc train` first)")]
    MissingCheckpoint(PathBuf),
    #[error("missing artifact `{0}` (run `ddc eval` first)")]
    MissingArtifact(PathBuf),
    #[error("training: {0}")]
    Train(ddc_core::train::TrainError),
    #[error("evaluation: {0}")]
    Eval(ddc_core::eval::EvalError),
    #[error("planning: {0}")]
    Plan(PlanError),
    #[error("{0}")]
    Plot(#[from] PlotError),
    #[error("{0}")]
    Report(#[from] ReportError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("environment: {0}")]
    Env(ddc_core::env::EnvError),
}

impl From<ddc_core::train::TrainError> for RunError {
    fn from(e: ddc_core::train::TrainError) -> Self {
        RunError::Train(e)
    }
}

impl From<ddc_core::eval::EvalError> for RunError {
    fn from(e: ddc_core::eval::EvalError) -> Self {
        RunError::Eval(e)
    }
}

impl From<PlanError> for RunError {
    fn from(e: PlanError) -> Self {
        RunError::Plan(e)
    }
}

impl From<ddc_core::env::EnvError> for RunError {
    fn from(e: ddc_core::env::EnvError) -> Self {
        RunError::Env(e)
    }
}

impl RunError {
    /// Stable process exit codes: 3 config, 4 dataset/artifact,
    /// 5 checkpoint, 6 runtime. (2 is reserved by the argument parser.)
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 3,
            RunError::Dataset(_) | RunError::MissingDataset(_) | RunError::MissingArtifact(_) => 4,
            RunError::Checkpoint(_) | RunError::MissingCheckpoint(_) => 5,
            _ => 6,
        }
    }
}

/// All artifact paths under one output directory.
pub struct RunPaths {
    pub out_dir: PathBuf,
}

impl RunPaths {
    pub fn new(out_dir: &Path) -> Self {
        RunPaths {
            out_dir: out_dir.to_path_buf(),
        }
    }

    pub fn x_train(&self) -> PathBuf {
        self.out_dir.join("datasets/x_train.ddc")
    }
    pub fn y_train(&self) -> PathBuf {
        self.out_dir.join("datasets/y_train.ddc")
    }
    pub fn x_eval(&self) -> PathBuf {
        self.out_dir.join("datasets/x_eval.ddc")
    }
    pub fn y_eval_pairs(&self) -> PathBuf {
        self.out_dir.join("datasets/y_eval_pairs.ddc")
    }
    pub fn y_eval_triples(&self) -> PathBuf {
        self.out_dir.join("datasets/y_eval_triples.ddc")
    }
    pub fn final_checkpoint(&self) -> PathBuf {
        self.out_dir.join("checkpoints/final.ddck")
    }
    pub fn epoch_checkpoint(&self, epoch: usize) -> PathBuf {
        self.out_dir
            .join(format!("checkpoints/ckpt_epoch_{:04}.ddck", epoch))
    }
    pub fn train_log(&self) -> PathBuf {
        self.out_dir.join("train_log.txt")
    }
    pub fn train_report(&self) -> PathBuf {
        self.out_dir.join("train_report.txt")
    }
    pub fn metrics(&self) -> PathBuf {
        self.out_dir.join("metrics.txt")
    }
    pub fn episodes(&self, view: View) -> PathBuf {
        self.out_dir.join(match view {
            View::X => "episodes_x.txt",
            View::Y => "episodes_y.txt",
        })
    }
    pub fn map_txt(&self, view: View) -> PathBuf {
        self.out_dir.join(match view {
            View::X => "map_x.txt",
            View::Y => "map_y.txt",
        })
    }
    pub fn map_png(&self, view: View) -> PathBuf {
        self.out_dir.join(match view {
            View::X => "map_x.png",
            View::Y => "map_y.png",
        })
    }
    pub fn map_alignment(&self) -> PathBuf {
        self.out_dir.join("map_alignment.txt")
    }
    pub fn filmstrip(&self, view: View) -> PathBuf {
        self.out_dir.join(match view {
            View::X => "filmstrip_x.png",
            View::Y => "filmstrip_y.png",
        })
    }
    pub fn plan_txt(&self, view: View) -> PathBuf {
        self.out_dir.join(match view {
            View::X => "plan_x.txt",
            View::Y => "plan_y.txt",
        })
    }
}

fn require(path: PathBuf, kind: fn(PathBuf) -> RunError) -> Result<PathBuf, RunError> {
    if path.exists() {
        Ok(path)
    } else {
        Err(kind(path))
    }
}

// ---- gen-data -------------------------------------------------------------

pub struct GenSummary {
    pub files: Vec<(PathBuf, usize, String)>,
}

/// Generate and persist the five datasets: the training sets, the held-out
/// X triples, the held-out Y pairs, and the evaluation-only action-labeled
/// Y triples used for the Y prediction metric.
pub fn gen_data(cfg: &ExperimentConfig) -> Result<GenSummary, RunError> {
    let paths = RunPaths::new(&cfg.out_dir);
    let env = &cfg.env;
    let seed = cfg.data.seed;
    let mut files = Vec::new();
    let jobs: Vec<(PathBuf, u64, Dataset)> = vec![
        (paths.x_train(), 0, {
            let mut r = rng::derive(seed, &[TAG_GEN, 0]);
            Dataset::XTriples(data::generate_x(env, cfg.data.n_x, &mut r)?)
        }),
        (paths.y_train(), 1, {
            let mut r = rng::derive(seed, &[TAG_GEN, 1]);
            Dataset::YPairs(data::generate_y(env, cfg.data.n_y, &mut r)?)
        }),
        (paths.x_eval(), 2, {
            let mut r = rng::derive(seed, &[TAG_GEN, 2]);
            Dataset::XTriples(data::generate_x(env, cfg.data.n_x_eval, &mut r)?)
        }),
        (paths.y_eval_pairs(), 3, {
            let mut r = rng::derive(seed, &[TAG_GEN, 3]);
            Dataset::YPairs(data::generate_y(env, cfg.data.n_y_eval_pairs, &mut r)?)
        }),
        (paths.y_eval_triples(), 4, {
            let mut r = rng::derive(seed, &[TAG_GEN, 4]);
            Dataset::XTriples(data::generate_triples(
                env,
                env.shape_y,
                cfg.data.n_y_eval_triples,
                &mut r,
            )?)
        }),
    ];
    for (path, sub, ds) in jobs {
        container::save(&ds, seed.wrapping_add(sub), &path)?;
        let bytes = std::fs::read(&path)?;
        let (manifest, _) = container::decode(&bytes)?;
        files.push((path, ds.len(), manifest.payload_sha256));
    }
    Ok(GenSummary { files })
}

// ---- train ----------------------------------------------------------------

struct FileHooks {
    log: std::io::BufWriter<std::fs::File>,
    paths: RunPaths,
    started: Instant,
}

impl FileHooks {
    fn new(paths: RunPaths, append: bool) -> Result<Self, RunError> {
        std::fs::create_dir_all(&paths.out_dir)?;
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(append)
            .write(true)
            .truncate(!append)
            .open(paths.train_log())?;
        Ok(FileHooks {
            log: std::io::BufWriter::new(file),
            paths,
            started: Instant::now(),
        })
    }
}

fn log_line(step: u64, epoch: usize, loss: f64, t: &ElboBreakdown) -> String {
    format!(
        "step={} epoch={} loss={:?} recon_x={:?} kl_zbar={:?} entropy_zhat={:?} logp_zt={:?} kl_wx={:?} recon_y={:?} kl_v={:?} kl_wy={:?} total={:?}",
        step, epoch, loss, t.recon_x, t.kl_zbar, t.entropy_zhat, t.logp_zt, t.kl_wx,
        t.recon_y, t.kl_v, t.kl_wy, t.total,
    )
}

impl TrainHooks for FileHooks {
    fn on_step(&mut self, step: u64, epoch: usize, loss: f64, terms: &ElboBreakdown) {
        let _ = writeln!(self.log, "{}", log_line(step, epoch, loss, terms));
    }

    fn on_epoch(&mut self, summary: &EpochSummary) {
        let _ = self.log.flush();
        eprintln!(
            "epoch {:>4}  loss {:>12.3}  recon_x {:>10.3}  recon_y {:>10.3}",
            summary.epoch, summary.mean_loss, summary.mean.recon_x, summary.mean.recon_y
        );
    }

    fn on_checkpoint(&mut self, state: &TrainState, is_final: bool) -> Option<String> {
        let path = if is_final {
            self.paths.final_checkpoint()
        } else {
            self.paths.epoch_checkpoint(state.epoch)
        };
        match checkpoint::save(state, &path) {
            Ok(()) => Some(path.display().to_string()),
            Err(e) => {
                eprintln!("warning: failed to write checkpoint {}: {}", path.display(), e);
                None
            }
        }
    }

    fn now_secs(&mut self) -> f64 {
        self.started.elapsed().as_secs_f64()
    }
}

fn render_train_report(report: &TrainReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "final_step: {}", report.final_step);
    let _ = writeln!(
        out,
        "final_checkpoint: {}",
        report.final_checkpoint.as_deref().unwrap_or("none")
    );
    let _ = writeln!(out, "wall_time_secs: {:.1}", report.wall_time_secs);
    for e in &report.epochs {
        let _ = writeln!(
            out,
            "epoch {:>4}: loss={:?} x_total={:?} y_total={:?}",
            e.epoch,
            e.mean_loss,
            e.mean.x_total(),
            e.mean.y_total(),
        );
    }
    out
}

pub fn train(cfg: &ExperimentConfig, resume_from: Option<&Path>) -> Result<TrainReport, RunError> {
    let paths = RunPaths::new(&cfg.out_dir);
    let dx = container::load_triples(&require(paths.x_train(), RunError::MissingDataset)?)?;
    let dy = container::load_pairs(&require(paths.y_train(), RunError::MissingDataset)?)?;
    let mut hooks = FileHooks::new(RunPaths::new(&cfg.out_dir), resume_from.is_some())?;
    let (_, report) = match resume_from {
        None => train::train(&cfg.train, &cfg.hyper, &dx, &dy, &mut hooks)?,
        Some(path) => {
            let state =
                checkpoint::load(&require(path.to_path_buf(), RunError::MissingCheckpoint)?)?;
            train::resume(state, &cfg.train, &dx, &dy, &mut hooks)?
        }
    };
    std::fs::write(paths.train_report(), render_train_report(&report))?;
    Ok(report)
}

// ---- eval -----------------------------------------------------------------

fn load_params(cfg: &ExperimentConfig, checkpoint_path: Option<&Path>) -> Result<ModelParams, RunError> {
    let paths = RunPaths::new(&cfg.out_dir);
    let path = match checkpoint_path {
        Some(p) => require(p.to_path_buf(), RunError::MissingCheckpoint)?,
        None => require(paths.final_checkpoint(), RunError::MissingCheckpoint)?,
    };
    Ok(checkpoint::load(&path)?.params)
}

/// Planner options and cost weights from the config sections.
pub fn planning_setup(
    env: &EnvConfig,
    plan: &PlanConfig,
    eval_cfg: &crate::config::EvalConfig,
    latent_dim: usize,
) -> Result<(PlanEvalConfig, PlannerOpts), RunError> {
    let n = env.arena_size as f64;
    let w_latent = CostWeights::scaled_identity(latent_dim, plan.q_scale, plan.r_scale)?;
    let w_true = CostWeights::scaled_identity(
        2,
        eval_cfg.state_cost_scale / (n * n),
        eval_cfg.action_cost_scale * 0.5 / (env.u_max * env.u_max),
    )?;
    let opts = PlannerOpts {
        max_iters: plan.max_iters,
        tol: plan.tol,
        u_max: env.u_max,
        ..PlannerOpts::default()
    };
    Ok((
        PlanEvalConfig {
            n_runs: eval_cfg.n_runs,
            horizon: plan.horizon,
            goal_radius: eval_cfg.goal_radius,
            corner_box: eval_cfg.corner_box,
            seed: eval_cfg.seed,
            w_latent,
            w_true,
            opts: opts.clone(),
        },
        opts,
    ))
}

fn render_episodes(eval: &PlanningEval) -> String {
    let mut out = String::new();
    for (i, e) in eval.episodes.iter().enumerate() {
        let _ = write!(
            out,
            "episode {}: start={:.3},{:.3} goal={:.3},{:.3} success={} planner_failed={} loss={:?} states=",
            i,
            e.start.position[0],
            e.start.position[1],
            e.goal.position[0],
            e.goal.position[1],
            e.success,
            e.planner_failed,
            e.loss,
        );
        for (j, s) in e.states.iter().enumerate() {
            if j > 0 {
                out.push(';');
            }
            let _ = write!(out, "{:.4},{:.4}", s.position[0], s.position[1]);
        }
        out.push('\n');
    }
    out
}

/// Parse persisted episodes back into (goal, success flag, trajectory), for
/// re-checking the success predicate from the artifact.
pub fn parse_episodes(text: &str) -> Result<Vec<(PlanarState, bool, Vec<PlanarState>)>, ReportError> {
    let mut out = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let grab = |name: &str| -> Result<&str, ReportError> {
            let tag = format!("{}=", name);
            let start = line
                .find(&tag)
                .ok_or_else(|| ReportError::Malformed(format!("missing `{}`", name)))?
                + tag.len();
            let rest = &line[start..];
            Ok(rest.split_whitespace().next().unwrap_or(rest))
        };
        let goal: Vec<f64> = grab("goal")?
            .split(',')
            .map(|v| v.parse::<f64>().map_err(|_| ReportError::Malformed("bad goal".into())))
            .collect::<Result<_, _>>()?;
        let success: bool = grab("success")?
            .parse()
            .map_err(|_| ReportError::Malformed("bad success".into()))?;
        let states: Vec<PlanarState> = grab("states")?
            .split(';')
            .map(|pair| {
                let mut it = pair.split(',');
                let x: f64 = it.next().unwrap_or("x").parse().map_err(|_| {
                    ReportError::Malformed("bad state".into())
                })?;
                let y: f64 = it.next().unwrap_or("y").parse().map_err(|_| {
                    ReportError::Malformed("bad state".into())
                })?;
                Ok(PlanarState::new(x, y))
            })
            .collect::<Result<_, ReportError>>()?;
        out.push((PlanarState::new(goal[0], goal[1]), success, states));
    }
    Ok(out)
}

/// Full evaluation: the four metrics for both observation sets, persisted
/// episode trajectories, and `metrics.txt`.
pub fn eval(cfg: &ExperimentConfig, checkpoint_path: Option<&Path>) -> Result<MetricsReport, RunError> {
    let paths = RunPaths::new(&cfg.out_dir);
    let params = load_params(cfg, checkpoint_path)?;
    let x_eval = container::load_triples(&require(paths.x_eval(), RunError::MissingDataset)?)?;
    let y_pairs =
        container::load_pairs(&require(paths.y_eval_pairs(), RunError::MissingDataset)?)?;
    let y_triples =
        container::load_triples(&require(paths.y_eval_triples(), RunError::MissingDataset)?)?;
    let (plan_eval, _) = planning_setup(&cfg.env, &cfg.plan, &cfg.eval, params.hyper.latent_dim)?;

    let x_recon = eval::eval_reconstruction_x(&x_eval, &params)?;
    let y_recon = eval::eval_reconstruction_y(&y_pairs, &params)?;
    let x_pred = eval::eval_prediction(&x_eval, View::X, &params)?;
    let y_pred = eval::eval_prediction(&y_triples, View::Y, &params)?;
    let x_plan = eval::eval_planning(&cfg.env, &params, View::X, &plan_eval)?;
    let y_plan = eval::eval_planning(&cfg.env, &params, View::Y, &plan_eval)?;

    std::fs::write(paths.episodes(View::X), render_episodes(&x_plan))?;
    std::fs::write(paths.episodes(View::Y), render_episodes(&y_plan))?;

    let report = MetricsReport {
        x: SetMetrics {
            reconstruction: x_recon,
            prediction: x_pred,
            planning_loss: x_plan.loss,
            success_rate: x_plan.success_rate,
            planning_runs: x_plan.episodes.len(),
        },
        y: SetMetrics {
            reconstruction: y_recon,
            prediction: y_pred,
            planning_loss: y_plan.loss,
            success_rate: y_plan.success_rate,
            planning_runs: y_plan.episodes.len(),
        },
        eval_seed: cfg.eval.seed,
    };
    report::write_metrics(&report, &paths.metrics())?;
    Ok(report)
}

// ---- plan -----------------------------------------------------------------

fn render_plan(
    plan: &ddc_core::planner::Plan,
    episode: &EpisodeRecord,
) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "start: {:.4},{:.4}",
        episode.start.position[0], episode.start.position[1]
    );
    let _ = writeln!(
        out,
        "goal: {:.4},{:.4}",
        episode.goal.position[0], episode.goal.position[1]
    );
    let _ = writeln!(out, "iterations: {}", plan.iterations);
    let _ = writeln!(out, "converged: {}", plan.converged);
    let _ = writeln!(out, "latent_cost: {:?}", plan.final_cost);
    let _ = writeln!(out, "true_loss: {:?}", episode.loss);
    let _ = writeln!(out, "success: {}", episode.success);
    for (i, a) in plan.actions.iter().enumerate() {
        let _ = writeln!(out, "action {}: {:.6},{:.6}", i, a.u[0], a.u[1]);
    }
    for (i, s) in episode.states.iter().enumerate() {
        let _ = writeln!(out, "state {}: {:.4},{:.4}", i, s.position[0], s.position[1]);
    }
    out
}

/// One demonstration episode per observation set, written as text plans.
pub fn plan(cfg: &ExperimentConfig, checkpoint_path: Option<&Path>) -> Result<(), RunError> {
    let paths = RunPaths::new(&cfg.out_dir);
    let params = load_params(cfg, checkpoint_path)?;
    let (plan_eval, opts) = planning_setup(&cfg.env, &cfg.plan, &cfg.eval, params.hyper.latent_dim)?;
    for view in [View::X, View::Y] {
        let shape = match view {
            View::X => cfg.env.shape_x,
            View::Y => cfg.env.shape_y,
        };
        let tag = match view {
            View::X => 0,
            View::Y => 1,
        };
        let mut erng = rng::derive(cfg.eval.seed, &[0x504c, tag]);
        let (lo, hi) = cfg.env.margin();
        let start = loop {
            let s = PlanarState::new(
                rng::uniform_in(&mut erng, lo, lo + cfg.eval.corner_box),
                rng::uniform_in(&mut erng, lo, lo + cfg.eval.corner_box),
            );
            if env::is_valid(&s, &cfg.env) {
                break s;
            }
        };
        let goal = loop {
            let s = PlanarState::new(
                rng::uniform_in(&mut erng, hi - cfg.eval.corner_box, hi),
                rng::uniform_in(&mut erng, hi - cfg.eval.corner_box, hi),
            );
            if env::is_valid(&s, &cfg.env) {
                break s;
            }
        };
        let x_init = env::render(&start, shape, &cfg.env);
        let x_goal = env::render(&goal, shape, &cfg.env);
        let z0 = ddc_core::model::encode_dynamics_view(&x_init, view, &params)
            .map_err(ddc_core::eval::EvalError::Model)?
            .mean;
        let zg = ddc_core::model::encode_dynamics_view(&x_goal, view, &params)
            .map_err(ddc_core::eval::EvalError::Model)?
            .mean;
        let dynamics = planner::ModelDynamics { params: &params };
        let the_plan = planner::ilqr_plan_latent(
            &dynamics,
            &z0,
            &zg,
            cfg.plan.horizon,
            &plan_eval.w_latent,
            &opts,
        )?;
        let episode = eval::run_episode(
            &cfg.env,
            &start,
            &goal,
            &the_plan.actions,
            &plan_eval.w_true,
            cfg.eval.goal_radius,
            &mut erng,
        )?;
        std::fs::create_dir_all(&cfg.out_dir)?;
        std::fs::write(paths.plan_txt(view), render_plan(&the_plan, &episode))?;
    }
    Ok(())
}

// ---- map ------------------------------------------------------------------

fn render_map(points: &[eval::LatentMapPoint]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# state_x state_y latent...");
    for p in points {
        let _ = write!(out, "{:.4} {:.4}", p.state[0], p.state[1]);
        for v in &p.latent {
            let _ = write!(out, " {:?}", v);
        }
        out.push('\n');
    }
    out
}

/// Latent maps for both sets plus their alignment score.
pub fn map(cfg: &ExperimentConfig, checkpoint_path: Option<&Path>) -> Result<f64, RunError> {
    let paths = RunPaths::new(&cfg.out_dir);
    let params = load_params(cfg, checkpoint_path)?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let mut maps = Vec::new();
    for view in [View::X, View::Y] {
        let points = eval::latent_map(&params, &cfg.env, cfg.eval.map_grid, view)?;
        std::fs::write(paths.map_txt(view), render_map(&points))?;
        plot::save_latent_map(&points, cfg.env.arena_size as f64, &paths.map_png(view))?;
        maps.push(points);
    }
    let fit = eval::latent_map_alignment(&maps[0], &maps[1])?;
    let text = format!(
        "residual: {:?}\nrelative_residual: {:?}\nscale: {:?}\ndegenerate: {}\n",
        fit.residual, fit.relative_residual, fit.scale, fit.degenerate
    );
    std::fs::write(paths.map_alignment(), text)?;
    Ok(fit.relative_residual)
}

// ---- filmstrip ------------------------------------------------------------

/// True-vs-predicted open-loop strips for both sets.
pub fn filmstrip(cfg: &ExperimentConfig, checkpoint_path: Option<&Path>) -> Result<(), RunError> {
    let paths = RunPaths::new(&cfg.out_dir);
    let params = load_params(cfg, checkpoint_path)?;
    for view in [View::X, View::Y] {
        let (truth, predicted) = eval::filmstrip_frames(
            &params,
            &cfg.env,
            view,
            cfg.eval.filmstrip_actions,
            cfg.eval.seed,
        )?;
        let composed = eval::compose_grid(&[truth, predicted]);
        plot::save_grayscale(&composed, &paths.filmstrip(view))?;
    }
    Ok(())
}

// ---- report ---------------------------------------------------------------

pub fn report(cfg: &ExperimentConfig) -> Result<String, RunError> {
    let paths = RunPaths::new(&cfg.out_dir);
    let path = require(paths.metrics(), RunError::MissingArtifact)?;
    let metrics = report::read_metrics(&path)?;
    Ok(report::format_table(&metrics))
}
