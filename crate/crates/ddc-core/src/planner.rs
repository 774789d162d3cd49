//! Trajectory optimization in the learned latent space.
//!
//! iLQR over the locally-linear latent dynamics: linearize along the current
//! nominal using the transition network's own (A, B) matrices, run a
//! regularized Riccati backward pass, and roll forward with a backtracking
//! line search. The quadratic cost penalizes distance to the latent encoding
//! of the goal observation plus control effort; the same quadratic form is
//! re-evaluated in the true state space when plans are executed through the
//! simulator.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::env::{self, ActionInput, AgentShape, EnvConfig, EnvError, Image, PlanarState};
use crate::math::{self, Mat};
use crate::model::{self, ModelError, ModelParams, ACTION_DIM};
use crate::rng::Stream;

#[derive(Debug, Clone, PartialEq)]
pub enum PlanError {
    Model(ModelError),
    Env(EnvError),
    InvalidWeights(String),
    Invalid(String),
    /// Dynamics or cost went non-finite while rolling out iteration `iter`.
    NonFinite { iter: usize },
    /// The regularization ladder hit its ceiling without a usable backward
    /// pass or accepted step.
    RegulationExceeded { iter: usize },
}

impl From<ModelError> for PlanError {
    fn from(e: ModelError) -> Self {
        PlanError::Model(e)
    }
}

impl From<EnvError> for PlanError {
    fn from(e: EnvError) -> Self {
        PlanError::Env(e)
    }
}

impl core::fmt::Display for PlanError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            PlanError::Model(e) => write!(f, "{}", e),
            PlanError::Env(e) => write!(f, "{}", e),
            PlanError::InvalidWeights(m) => write!(f, "invalid cost weights: {}", m),
            PlanError::Invalid(m) => write!(f, "invalid plan request: {}", m),
            PlanError::NonFinite { iter } => {
                write!(f, "non-finite trajectory at iLQR iteration {}", iter)
            }
            PlanError::RegulationExceeded { iter } => {
                write!(f, "regularization ladder exhausted at iteration {}", iter)
            }
        }
    }
}

impl core::error::Error for PlanError {}

/// Quadratic cost weights: Q positive semidefinite on the state error,
/// R positive definite on actions. Both checked at construction.
#[derive(Debug, Clone, PartialEq)]
#[allow(non_snake_case)]
pub struct CostWeights {
    pub Q: Mat,
    pub R: Mat,
}

impl CostWeights {
    pub fn new(q: Mat, r: Mat) -> Result<Self, PlanError> {
        if !q.is_symmetric(1e-9) {
            return Err(PlanError::InvalidWeights("Q must be symmetric".into()));
        }
        if !r.is_symmetric(1e-9) {
            return Err(PlanError::InvalidWeights("R must be symmetric".into()));
        }
        if q.symmetrize().min_eigenvalue() < -1e-9 {
            return Err(PlanError::InvalidWeights(
                "Q must be positive semidefinite".into(),
            ));
        }
        if r.cholesky(0.0).is_none() {
            return Err(PlanError::InvalidWeights(
                "R must be positive definite".into(),
            ));
        }
        Ok(CostWeights { Q: q, R: r })
    }

    /// `Q = q_scale I_d`, `R = r_scale I_m`.
    pub fn scaled_identity(d: usize, q_scale: f64, r_scale: f64) -> Result<Self, PlanError> {
        CostWeights::new(
            Mat::identity(d).scale(q_scale),
            Mat::identity(ACTION_DIM).scale(r_scale),
        )
    }

    /// Planner defaults for a d-dimensional latent.
    pub fn latent_defaults(d: usize) -> Self {
        CostWeights::scaled_identity(d, 1.0, 0.1).unwrap()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlannerOpts {
    pub max_iters: usize,
    /// Convergence threshold on relative cost improvement.
    pub tol: f64,
    /// Componentwise action clamp applied in every forward pass.
    pub u_max: f64,
    /// Levenberg regularization ladder, multiplied by 10 on failure.
    pub reg_init: f64,
    pub reg_max: f64,
}

impl Default for PlannerOpts {
    fn default() -> Self {
        PlannerOpts {
            max_iters: 50,
            tol: 1e-4,
            u_max: f64::INFINITY,
            reg_init: 1e-6,
            reg_max: 1e3,
        }
    }
}

/// A horizon-T action sequence with its nominal latent trajectory and
/// solver diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub actions: Vec<ActionInput>,
    pub latent_trajectory: Vec<Vec<f64>>,
    /// Latent encoding of the goal observation.
    pub goal: Vec<f64>,
    pub iterations: usize,
    pub final_cost: f64,
    pub converged: bool,
    /// Nominal cost after each accepted iteration, starting with the
    /// initial rollout. Never increasing.
    pub cost_trace: Vec<f64>,
}

/// Dynamics the planner optimizes through: a step plus its local
/// linearization at the evaluation point.
pub trait LatentDynamics {
    fn dim(&self) -> usize;
    #[allow(non_snake_case)]
    fn step(&self, z: &[f64], u: &[f64]) -> Result<(Vec<f64>, Mat, Mat), PlanError>;
}

/// The learned model: local matrices come straight from the transition
/// network evaluated at the current latent.
pub struct ModelDynamics<'a> {
    pub params: &'a ModelParams,
}

impl LatentDynamics for ModelDynamics<'_> {
    fn dim(&self) -> usize {
        self.params.hyper.latent_dim
    }

    fn step(&self, z: &[f64], u: &[f64]) -> Result<(Vec<f64>, Mat, Mat), PlanError> {
        let tp = model::transition_params(z, self.params)?;
        let next = model::forward_transition(z, u, &tp);
        Ok((next, tp.A, tp.B))
    }
}

/// Fixed affine dynamics, used by tests and oracle comparisons.
#[derive(Debug, Clone)]
#[allow(non_snake_case)]
pub struct LinearDynamics {
    pub A: Mat,
    pub B: Mat,
    pub c: Vec<f64>,
}

impl LatentDynamics for LinearDynamics {
    fn dim(&self) -> usize {
        self.A.rows
    }

    fn step(&self, z: &[f64], u: &[f64]) -> Result<(Vec<f64>, Mat, Mat), PlanError> {
        let mut next = self.A.matvec(z);
        let bu = self.B.matvec(u);
        for i in 0..next.len() {
            next[i] += bu[i] + self.c[i];
        }
        Ok((next, self.A.clone(), self.B.clone()))
    }
}

fn clamp_action(u: &mut [f64], u_max: f64) {
    for v in u.iter_mut() {
        *v = math::clamp(*v, -u_max, u_max);
    }
}

/// Finite-horizon quadratic cost: state error terms for t = 1..T plus
/// control effort for every action.
pub fn trajectory_cost(traj: &[Vec<f64>], actions: &[Vec<f64>], goal: &[f64], w: &CostWeights) -> f64 {
    debug_assert_eq!(traj.len(), actions.len() + 1);
    let mut cost = 0.0;
    for z in traj.iter().skip(1) {
        let e: Vec<f64> = z.iter().zip(goal).map(|(a, b)| a - b).collect();
        cost += math::dot(&e, &w.Q.matvec(&e));
    }
    for u in actions {
        cost += math::dot(u, &w.R.matvec(u));
    }
    cost
}

struct Nominal {
    traj: Vec<Vec<f64>>,
    lins: Vec<(Mat, Mat)>,
    cost: f64,
}

fn rollout<D: LatentDynamics + ?Sized>(
    dynamics: &D,
    z0: &[f64],
    actions: &[Vec<f64>],
    goal: &[f64],
    w: &CostWeights,
) -> Result<Nominal, PlanError> {
    let mut traj = Vec::with_capacity(actions.len() + 1);
    let mut lins = Vec::with_capacity(actions.len());
    traj.push(z0.to_vec());
    for u in actions {
        let (next, a, b) = dynamics.step(traj.last().unwrap(), u)?;
        lins.push((a, b));
        traj.push(next);
    }
    let cost = trajectory_cost(&traj, actions, goal, w);
    Ok(Nominal { traj, lins, cost })
}

struct BackwardPass {
    k_ff: Vec<Vec<f64>>,
    k_fb: Vec<Mat>,
}

/// Riccati sweep over the linearizations. Fails (None) when the regularized
/// control Hessian is not positive definite or a value matrix loses positive
/// semidefiniteness.
fn backward_pass(
    nominal: &Nominal,
    actions: &[Vec<f64>],
    goal: &[f64],
    w: &CostWeights,
    reg: f64,
) -> Option<BackwardPass> {
    let horizon = nominal.lins.len();
    let d = goal.len();
    let m = w.R.rows;
    // Terminal value: (z - g)^T Q (z - g).
    let err_t: Vec<f64> = nominal.traj[horizon]
        .iter()
        .zip(goal)
        .map(|(a, b)| a - b)
        .collect();
    let mut v_x: Vec<f64> = w.Q.matvec(&err_t).iter().map(|v| 2.0 * v).collect();
    let mut v_xx = w.Q.scale(2.0);
    let mut k_ff = vec![vec![0.0; m]; horizon];
    let mut k_fb = vec![Mat::zeros(m, d); horizon];
    for t in (0..horizon).rev() {
        #[allow(non_snake_case)]
        let (A, B) = &nominal.lins[t];
        let at = A.transpose();
        let bt = B.transpose();
        // Stage cost derivatives at the nominal; the state term applies
        // from t = 1 on (the initial state is fixed).
        let (l_x, l_xx) = if t >= 1 {
            let e: Vec<f64> = nominal.traj[t].iter().zip(goal).map(|(a, b)| a - b).collect();
            (
                w.Q.matvec(&e).iter().map(|v| 2.0 * v).collect::<Vec<f64>>(),
                w.Q.scale(2.0),
            )
        } else {
            (vec![0.0; d], Mat::zeros(d, d))
        };
        let l_u: Vec<f64> = w.R.matvec(&actions[t]).iter().map(|v| 2.0 * v).collect();
        let l_uu = w.R.scale(2.0);

        let q_x: Vec<f64> = l_x
            .iter()
            .zip(at.matvec(&v_x))
            .map(|(a, b)| a + b)
            .collect();
        let q_u: Vec<f64> = l_u
            .iter()
            .zip(bt.matvec(&v_x))
            .map(|(a, b)| a + b)
            .collect();
        let q_xx = l_xx.add(&at.matmul(&v_xx).matmul(A));
        let mut q_uu = l_uu.add(&bt.matmul(&v_xx).matmul(B));
        for i in 0..m {
            *q_uu.at_mut(i, i) += reg;
        }
        let q_uu = q_uu.symmetrize();
        let q_ux = bt.matmul(&v_xx).matmul(A);
        // Positive-definite control Hessian is required for a valid step.
        q_uu.cholesky(0.0)?;
        let k: Vec<f64> = q_uu.solve(&q_u)?.iter().map(|v| -v).collect();
        let mut kmat = Mat::zeros(m, d);
        for col in 0..d {
            let rhs: Vec<f64> = (0..m).map(|r| q_ux.at(r, col)).collect();
            let sol = q_uu.solve(&rhs)?;
            for r in 0..m {
                *kmat.at_mut(r, col) = -sol[r];
            }
        }
        // V_x = Q_x + K^T Q_uu k + K^T Q_u + Q_ux^T k
        let kt = kmat.transpose();
        let quu_k = q_uu.matvec(&k);
        let term1 = kt.matvec(&quu_k);
        let term2 = kt.matvec(&q_u);
        let term3 = q_ux.transpose().matvec(&k);
        v_x = (0..d)
            .map(|i| q_x[i] + term1[i] + term2[i] + term3[i])
            .collect();
        // V_xx = Q_xx + K^T Q_uu K + K^T Q_ux + Q_ux^T K
        let v_new = q_xx
            .add(&kt.matmul(&q_uu).matmul(&kmat))
            .add(&kt.matmul(&q_ux))
            .add(&q_ux.transpose().matmul(&kmat))
            .symmetrize();
        if v_new.min_eigenvalue() < -1e-8 {
            return None;
        }
        v_xx = v_new;
        k_ff[t] = k;
        k_fb[t] = kmat;
    }
    Some(BackwardPass { k_ff, k_fb })
}

/// iLQR in a generic latent space. Starts from a zero-action nominal,
/// alternates backward passes and line-searched forward passes, and returns
/// the best plan found.
pub fn ilqr_plan_latent<D: LatentDynamics + ?Sized>(
    dynamics: &D,
    z0: &[f64],
    z_goal: &[f64],
    horizon: usize,
    w: &CostWeights,
    opts: &PlannerOpts,
) -> Result<Plan, PlanError> {
    if horizon == 0 {
        return Err(PlanError::Invalid("horizon must be at least 1".into()));
    }
    if w.Q.rows != z0.len() || z0.len() != z_goal.len() {
        return Err(PlanError::Invalid(format!(
            "dimension mismatch: z0 {}, goal {}, Q {}",
            z0.len(),
            z_goal.len(),
            w.Q.rows
        )));
    }
    let m = w.R.rows;
    let mut actions: Vec<Vec<f64>> = vec![vec![0.0; m]; horizon];
    let mut nominal = rollout(dynamics, z0, &actions, z_goal, w)?;
    if !nominal.cost.is_finite() {
        return Err(PlanError::NonFinite { iter: 0 });
    }
    let mut cost_trace = vec![nominal.cost];
    let mut reg = 0.0;
    let mut converged = false;
    let mut iterations = 0;

    'outer: for iter in 0..opts.max_iters {
        iterations = iter + 1;
        // Backward pass; escalate the ladder on failure.
        let bp = loop {
            match backward_pass(&nominal, &actions, z_goal, w, reg) {
                Some(bp) => break bp,
                None => {
                    reg = if reg == 0.0 { opts.reg_init } else { reg * 10.0 };
                    if reg > opts.reg_max {
                        return Err(PlanError::RegulationExceeded { iter });
                    }
                }
            }
        };
        // Line-searched forward pass.
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..12 {
            let mut cand_actions = Vec::with_capacity(horizon);
            let mut z = z0.to_vec();
            let mut traj = vec![z.clone()];
            let mut lins = Vec::with_capacity(horizon);
            let mut finite = true;
            for t in 0..horizon {
                let dz: Vec<f64> = z
                    .iter()
                    .zip(&nominal.traj[t])
                    .map(|(a, b)| a - b)
                    .collect();
                let fb = bp.k_fb[t].matvec(&dz);
                let mut u: Vec<f64> = (0..m)
                    .map(|i| actions[t][i] + alpha * bp.k_ff[t][i] + fb[i])
                    .collect();
                clamp_action(&mut u, opts.u_max);
                let (next, a_lin, b_lin) = dynamics.step(&z, &u)?;
                if next.iter().any(|v| !v.is_finite()) {
                    finite = false;
                    break;
                }
                cand_actions.push(u);
                lins.push((a_lin, b_lin));
                traj.push(next.clone());
                z = next;
            }
            if finite {
                let cost = trajectory_cost(&traj, &cand_actions, z_goal, w);
                if cost.is_finite() && cost < nominal.cost {
                    let improvement = (nominal.cost - cost) / nominal.cost.abs().max(1e-12);
                    actions = cand_actions;
                    nominal = Nominal { traj, lins, cost };
                    cost_trace.push(cost);
                    if reg > 0.0 {
                        reg /= 10.0;
                        if reg < opts.reg_init {
                            reg = 0.0;
                        }
                    }
                    accepted = true;
                    if improvement < opts.tol {
                        converged = true;
                        break 'outer;
                    }
                    break;
                }
            }
            alpha *= 0.5;
        }
        if !accepted {
            reg = if reg == 0.0 { opts.reg_init } else { reg * 10.0 };
            if reg > opts.reg_max {
                // No direction improves the nominal within the ladder:
                // treat the current nominal as the answer.
                converged = true;
                break;
            }
        }
    }
    Ok(Plan {
        actions: actions
            .iter()
            .map(|u| ActionInput::new(u[0], u[1.min(u.len() - 1)]))
            .collect(),
        latent_trajectory: nominal.traj,
        goal: z_goal.to_vec(),
        iterations,
        final_cost: nominal.cost,
        converged,
        cost_trace,
    })
}

/// Plan between two observations with the learned model: encode both,
/// optimize in latent space.
pub fn ilqr_plan(
    x_init: &Image,
    x_goal: &Image,
    horizon: usize,
    params: &ModelParams,
    w: &CostWeights,
    opts: &PlannerOpts,
) -> Result<Plan, PlanError> {
    let z0 = model::encode_dynamics(x_init, params)?.mean;
    let zg = model::encode_dynamics(x_goal, params)?.mean;
    let dynamics = ModelDynamics { params };
    ilqr_plan_latent(&dynamics, &z0, &zg, horizon, w, opts)
}

/// Execute a plan through the true simulator and score it with the quadratic
/// loss in the true state space (goal = `s_goal`).
pub fn rollout_true(
    env_cfg: &EnvConfig,
    s0: &PlanarState,
    s_goal: &PlanarState,
    plan: &Plan,
    w: &CostWeights,
    rng: &mut Stream,
) -> Result<(Vec<PlanarState>, f64), PlanError> {
    let mut states = vec![*s0];
    for a in &plan.actions {
        let next = env::step(states.last().unwrap(), a, env_cfg, rng)?;
        states.push(next);
    }
    let traj: Vec<Vec<f64>> = states.iter().map(|s| s.position.to_vec()).collect();
    let actions: Vec<Vec<f64>> = plan.actions.iter().map(|a| a.u.to_vec()).collect();
    let loss = trajectory_cost(&traj, &actions, &s_goal.position, w);
    Ok((states, loss))
}

/// Receding-horizon execution: replan over the full horizon from a fresh
/// observation every `replan_every` steps, execute that many actions, and
/// stop after `horizon` total steps. `replan_every = horizon` is exactly the
/// open-loop rollout.
#[derive(Debug, Clone)]
pub struct MpcOutcome {
    pub states: Vec<PlanarState>,
    pub actions: Vec<ActionInput>,
    pub planning_loss: f64,
    pub replan_count: usize,
}

#[allow(clippy::too_many_arguments)]
pub fn mpc_execute<D: LatentDynamics + ?Sized>(
    env_cfg: &EnvConfig,
    s0: &PlanarState,
    s_goal: &PlanarState,
    mut observe: impl FnMut(&PlanarState) -> Image,
    encode: impl Fn(&Image) -> Result<Vec<f64>, PlanError>,
    z_goal: &[f64],
    dynamics: &D,
    horizon: usize,
    replan_every: usize,
    w_latent: &CostWeights,
    w_true: &CostWeights,
    opts: &PlannerOpts,
    rng: &mut Stream,
) -> Result<MpcOutcome, PlanError> {
    if replan_every == 0 {
        return Err(PlanError::Invalid("replan_every must be at least 1".into()));
    }
    let mut states = vec![*s0];
    let mut actions: Vec<ActionInput> = Vec::with_capacity(horizon);
    let mut replan_count = 0;
    while actions.len() < horizon {
        let current = *states.last().unwrap();
        let obs = observe(&current);
        let z0 = encode(&obs)?;
        let plan = ilqr_plan_latent(dynamics, &z0, z_goal, horizon, w_latent, opts)?;
        replan_count += 1;
        let take = replan_every.min(horizon - actions.len());
        for a in plan.actions.iter().take(take) {
            let next = env::step(states.last().unwrap(), a, env_cfg, rng)?;
            states.push(next);
            actions.push(*a);
        }
    }
    let traj: Vec<Vec<f64>> = states.iter().map(|s| s.position.to_vec()).collect();
    let act: Vec<Vec<f64>> = actions.iter().map(|a| a.u.to_vec()).collect();
    let planning_loss = trajectory_cost(&traj, &act, &s_goal.position, w_true);
    Ok(MpcOutcome {
        states,
        actions,
        planning_loss,
        replan_count,
    })
}

/// Render-based observation provider for the standard pipeline.
pub fn render_provider(
    shape: AgentShape,
    cfg: EnvConfig,
) -> impl FnMut(&PlanarState) -> Image {
    move |s: &PlanarState| env::render(s, shape, &cfg)
}
