//! iLQR against an independently derived finite-horizon LQR solution.
//!
//! The oracle solves the affine-dynamics tracking problem by dynamic
//! programming over full quadratic value functions V(z) = z'Pz + 2q'z + r in
//! absolute coordinates — a different recursion from the planner's
//! deviation-based backward pass — and rolls the resulting policy forward to
//! get the optimal action sequence.

use ddc_core::math::Mat;
use ddc_core::planner::{ilqr_plan_latent, CostWeights, LinearDynamics, PlannerOpts};
use ddc_core::rng;

struct Affine {
    a: Mat,
    b: Mat,
    c: Vec<f64>,
}

fn vec_add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Optimal actions for: minimize sum_{t=1..T} (z_t - g)'Q(z_t - g) + u_t'Ru_t
/// subject to z_{t+1} = A z_t + B u_t + c, from initial state z0.
fn lqr_reference(sys: &Affine, z0: &[f64], goal: &[f64], horizon: usize, w: &CostWeights) -> Vec<Vec<f64>> {
    let d = z0.len();
    let m = w.R.rows;
    // Value at the horizon: (z-g)'Q(z-g).
    let mut p = w.Q.clone();
    let mut q: Vec<f64> = w.Q.matvec(goal).iter().map(|v| -v).collect();
    // Policy for each stage, filled backwards: u = K z + k.
    let mut gains: Vec<(Mat, Vec<f64>)> = Vec::with_capacity(horizon);
    for t in (0..horizon).rev() {
        let bt = sys.b.transpose();
        let at = sys.a.transpose();
        // M = R + B'PB, W = B'PA, w0 = B'Pc + B'q
        let mmat = w.R.add(&bt.matmul(&p).matmul(&sys.b)).symmetrize();
        let wmat = bt.matmul(&p).matmul(&sys.a);
        let w0 = vec_add(&bt.matvec(&p.matvec(&sys.c)), &bt.matvec(&q));
        // K = -M^{-1} W, k = -M^{-1} w0
        let mut kmat = Mat::zeros(m, d);
        for col in 0..d {
            let rhs: Vec<f64> = (0..m).map(|r| wmat.at(r, col)).collect();
            let sol = mmat.solve(&rhs).expect("M is PD");
            for r in 0..m {
                *kmat.at_mut(r, col) = -sol[r];
            }
        }
        let kvec: Vec<f64> = mmat
            .solve(&w0)
            .expect("M is PD")
            .iter()
            .map(|v| -v)
            .collect();
        // Value recursion:
        // P_t = [t>=1]Q + A'PA - W'M^{-1}W
        // q_t = [t>=1](-Qg) + A'Pc + A'q - W'M^{-1}w0
        let minv_w = {
            let mut out = Mat::zeros(m, d);
            for col in 0..d {
                let rhs: Vec<f64> = (0..m).map(|r| wmat.at(r, col)).collect();
                let sol = mmat.solve(&rhs).unwrap();
                for r in 0..m {
                    *out.at_mut(r, col) = sol[r];
                }
            }
            out
        };
        let minv_w0 = mmat.solve(&w0).unwrap();
        let mut p_new = at.matmul(&p).matmul(&sys.a).add(&wmat.transpose().matmul(&minv_w).scale(-1.0));
        let mut q_new = vec_add(&at.matvec(&p.matvec(&sys.c)), &at.matvec(&q));
        let corr = wmat.transpose().matvec(&minv_w0);
        for i in 0..d {
            q_new[i] -= corr[i];
        }
        if t >= 1 {
            p_new = p_new.add(&w.Q);
            let qg = w.Q.matvec(goal);
            for i in 0..d {
                q_new[i] -= qg[i];
            }
        }
        p = p_new.symmetrize();
        q = q_new;
        gains.push((kmat, kvec));
    }
    gains.reverse();
    // Roll the policy forward.
    let mut z = z0.to_vec();
    let mut actions = Vec::with_capacity(horizon);
    for (kmat, kvec) in &gains {
        let u = vec_add(&kmat.matvec(&z), kvec);
        let mut next = sys.a.matvec(&z);
        let bu = sys.b.matvec(&u);
        for i in 0..z.len() {
            next[i] += bu[i] + sys.c[i];
        }
        actions.push(u);
        z = next;
    }
    actions
}

fn assert_matches_oracle(sys: &Affine, z0: &[f64], goal: &[f64], horizon: usize, w: &CostWeights, max_iters: usize) {
    let oracle = lqr_reference(sys, z0, goal, horizon, w);
    let dynamics = LinearDynamics {
        A: sys.a.clone(),
        B: sys.b.clone(),
        c: sys.c.clone(),
    };
    let opts = PlannerOpts {
        max_iters,
        tol: 1e-12,
        ..PlannerOpts::default()
    };
    let plan = ilqr_plan_latent(&dynamics, z0, goal, horizon, w, &opts).unwrap();
    assert_eq!(plan.actions.len(), oracle.len());
    for (t, (got, want)) in plan.actions.iter().zip(&oracle).enumerate() {
        for i in 0..want.len() {
            assert!(
                (got.u[i] - want[i]).abs() < 1e-6,
                "action {} component {}: {} vs {}",
                t,
                i,
                got.u[i],
                want[i]
            );
        }
    }
    for pair in plan.cost_trace.windows(2) {
        assert!(pair[1] <= pair[0], "accepted iteration increased cost");
    }
}

#[test]
fn matches_reference_on_fixed_instance() {
    // The acceptance instance: d = 2, T = 10.
    let sys = Affine {
        a: Mat::from_rows(2, 2, vec![1.0, 0.1, -0.05, 0.95]),
        b: Mat::from_rows(2, 2, vec![1.0, 0.0, 0.2, 0.8]),
        c: vec![0.05, -0.02],
    };
    let w = CostWeights::scaled_identity(2, 1.0, 0.1).unwrap();
    assert_matches_oracle(&sys, &[0.0, 0.0], &[1.0, 0.0], 10, &w, 50);
}

#[test]
fn one_iteration_from_zero_nominal_reproduces_lqr() {
    // On a globally linear system the first accepted iLQR step is the
    // exact LQR solution.
    let sys = Affine {
        a: Mat::identity(2),
        b: Mat::identity(2),
        c: vec![0.0, 0.0],
    };
    let w = CostWeights::scaled_identity(2, 1.0, 0.1).unwrap();
    assert_matches_oracle(&sys, &[0.0, 0.0], &[1.0, 0.0], 10, &w, 1);
}

#[test]
fn matches_reference_on_random_instances() {
    let mut r = rng::derive(42, &[1]);
    for case in 0..10 {
        // Keep A near identity so horizons stay well conditioned.
        let mut a = Mat::identity(2);
        for v in a.data.iter_mut() {
            *v += 0.2 * rng::normal(&mut r);
        }
        let b = Mat::from_rows(2, 2, (0..4).map(|_| 0.5 + 0.5 * rng::uniform(&mut r)).collect());
        let c = vec![0.1 * rng::normal(&mut r), 0.1 * rng::normal(&mut r)];
        let sys = Affine { a, b, c };
        let w = CostWeights::scaled_identity(2, 1.0, 0.2).unwrap();
        let z0 = vec![rng::normal(&mut r), rng::normal(&mut r)];
        let goal = vec![rng::normal(&mut r), rng::normal(&mut r)];
        let horizon = 6 + (case % 3) * 3;
        assert_matches_oracle(&sys, &z0, &goal, horizon, &w, 60);
    }
}
