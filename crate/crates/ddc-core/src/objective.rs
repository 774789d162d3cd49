//! The variational training objective.
//!
//! For an X-triple the bound combines five terms: the reconstruction
//! log-likelihood of the next frame, the KL between the backward posterior
//! and the tied prior at the current frame, the entropy of the next-frame
//! posterior, the log-density of the recovered current latent under the tied
//! prior, and the content KL against its learned-mean prior. For a
//! Y-observation it combines reconstruction, the KL of the Y dynamics
//! posterior against the tied X-encoder prior at the paired frame (the term
//! that transfers the dynamics), and the Y content KL.
//!
//! All stochastic expectations use one reparameterized sample per term per
//! evaluation; noise is always passed in explicitly, so identical
//! `(record, params, noise)` evaluate to identical bits.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{self, NodeId};
use crate::data::{PairedRecord, TripleRecord};
use crate::env::Image;
use crate::model::{GaussianLatent, HyperConfig, ModelError, ModelGraph, ModelParams, View};
use crate::rng::{self, Stream};

#[derive(Debug, Clone, PartialEq)]
pub enum ObjectiveError {
    DimMismatch { q: usize, p: usize },
    EmptyBatch,
    NoiseCount { expected: usize, got: usize },
    Model(ModelError),
    NonFiniteTerm { term: &'static str },
}

impl From<ModelError> for ObjectiveError {
    fn from(e: ModelError) -> Self {
        ObjectiveError::Model(e)
    }
}

impl core::fmt::Display for ObjectiveError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            ObjectiveError::DimMismatch { q, p } => {
                write!(f, "dimension mismatch: q has {}, p has {}", q, p)
            }
            ObjectiveError::EmptyBatch => write!(f, "empty batch"),
            ObjectiveError::NoiseCount { expected, got } => {
                write!(f, "expected {} noise draws, got {}", expected, got)
            }
            ObjectiveError::Model(e) => write!(f, "{}", e),
            ObjectiveError::NonFiniteTerm { term } => {
                write!(f, "non-finite objective term `{}`", term)
            }
        }
    }
}

impl core::error::Error for ObjectiveError {}

/// Per-term view of the bound. `total` is always the signed sum of the eight
/// terms; the Y-batch weight is applied only when forming the training loss.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ElboBreakdown {
    pub recon_x: f64,
    pub kl_zbar: f64,
    pub entropy_zhat: f64,
    pub logp_zt: f64,
    pub kl_wx: f64,
    pub recon_y: f64,
    pub kl_v: f64,
    pub kl_wy: f64,
    pub total: f64,
}

impl ElboBreakdown {
    pub fn signed_sum(&self) -> f64 {
        self.recon_x - self.kl_zbar + self.entropy_zhat + self.logp_zt - self.kl_wx
            + self.recon_y
            - self.kl_v
            - self.kl_wy
    }

    pub fn x_total(&self) -> f64 {
        self.recon_x - self.kl_zbar + self.entropy_zhat + self.logp_zt - self.kl_wx
    }

    pub fn y_total(&self) -> f64 {
        self.recon_y - self.kl_v - self.kl_wy
    }

    pub fn accumulate(&mut self, other: &ElboBreakdown, w: f64) {
        self.recon_x += w * other.recon_x;
        self.kl_zbar += w * other.kl_zbar;
        self.entropy_zhat += w * other.entropy_zhat;
        self.logp_zt += w * other.logp_zt;
        self.kl_wx += w * other.kl_wx;
        self.recon_y += w * other.recon_y;
        self.kl_v += w * other.kl_v;
        self.kl_wy += w * other.kl_wy;
        self.total += w * other.total;
    }

    pub fn is_finite(&self) -> bool {
        [
            self.recon_x,
            self.kl_zbar,
            self.entropy_zhat,
            self.logp_zt,
            self.kl_wx,
            self.recon_y,
            self.kl_v,
            self.kl_wy,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    /// Name of the first non-finite term, for abort diagnostics.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        let named = [
            ("recon_x", self.recon_x),
            ("kl_zbar", self.kl_zbar),
            ("entropy_zhat", self.entropy_zhat),
            ("logp_zt", self.logp_zt),
            ("kl_wx", self.kl_wx),
            ("recon_y", self.recon_y),
            ("kl_v", self.kl_v),
            ("kl_wy", self.kl_wy),
        ];
        named.iter().find(|(_, v)| !v.is_finite()).map(|(n, _)| *n)
    }
}

/// KL(q || p) between diagonal Gaussians, in closed form.
pub fn gaussian_kl(q: &GaussianLatent, p: &GaussianLatent) -> Result<f64, ObjectiveError> {
    if q.dim() != p.dim() {
        return Err(ObjectiveError::DimMismatch {
            q: q.dim(),
            p: p.dim(),
        });
    }
    Ok(autodiff::gaussian_kl_value(
        &q.mean, &q.stddev, &p.mean, &p.stddev,
    ))
}

/// Differential entropy of a diagonal Gaussian.
pub fn gaussian_entropy(q: &GaussianLatent) -> f64 {
    autodiff::gaussian_entropy_value(&q.stddev)
}

/// `sum_i x_i ln m_i + (1 - x_i) ln(1 - m_i)` with pixels as soft targets.
pub fn bernoulli_loglik(img: &Image, means: &[f64]) -> f64 {
    assert_eq!(img.pixels.len(), means.len());
    let mut acc = 0.0;
    for (&x, &m) in img.pixels.iter().zip(means) {
        acc += x * crate::math::ln(m) + (1.0 - x) * crate::math::ln(1.0 - m);
    }
    acc
}

/// Noise draws for one X-triple evaluation, in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct XNoise {
    pub z_next: Vec<f64>,
    pub w: Vec<f64>,
    pub z_bar: Vec<f64>,
}

impl XNoise {
    pub fn draw(h: &HyperConfig, rng: &mut Stream) -> Self {
        XNoise {
            z_next: rng::normal_vec(rng, h.latent_dim),
            w: rng::normal_vec(rng, h.content_dim),
            z_bar: rng::normal_vec(rng, h.latent_dim),
        }
    }

    pub fn zeros(h: &HyperConfig) -> Self {
        XNoise {
            z_next: vec![0.0; h.latent_dim],
            w: vec![0.0; h.content_dim],
            z_bar: vec![0.0; h.latent_dim],
        }
    }
}

/// Noise draws for one Y-observation evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct YNoise {
    pub v: Vec<f64>,
    pub w: Vec<f64>,
}

impl YNoise {
    pub fn draw(h: &HyperConfig, rng: &mut Stream) -> Self {
        YNoise {
            v: rng::normal_vec(rng, h.latent_dim),
            w: rng::normal_vec(rng, h.content_dim),
        }
    }

    pub fn zeros(h: &HyperConfig) -> Self {
        YNoise {
            v: vec![0.0; h.latent_dim],
            w: vec![0.0; h.content_dim],
        }
    }
}

struct XTerms {
    recon: NodeId,
    kl_zbar: NodeId,
    entropy: NodeId,
    logp: NodeId,
    kl_w: NodeId,
    total: NodeId,
}

fn build_elbo_x<'a>(
    g: &mut ModelGraph<'a>,
    x_t: &'a Image,
    u: &'a [f64],
    x_next: &'a Image,
    eps: &'a XNoise,
) -> Result<XTerms, ObjectiveError> {
    let xt = g.image_input(x_t);
    let xn = g.image_input(x_next);
    let un = g.tape.input(u);
    // Next-frame posteriors and their samples.
    let (mu_zhat, sd_zhat) = g.encode_dynamics(xn, View::X);
    let (mu_wx, sd_wx) = g.encode_content(xn);
    let z_hat = g.sample(mu_zhat, sd_zhat, &eps.z_next);
    let w_x = g.sample(mu_wx, sd_wx, &eps.w);
    // Reconstruction of the next frame.
    let logits = g.decode_logits(z_hat, w_x);
    let recon = g.tape.bernoulli_from_logits(logits, xn);
    // Backward posterior against the tied prior at the current frame.
    let (mu_zb, sd_zb) = g.backward_encode(xt, z_hat);
    let (mu_prior, sd_prior) = g.encode_dynamics(xt, View::X);
    let kl_zbar = g.tape.gaussian_kl(mu_zb, sd_zb, mu_prior, sd_prior);
    let entropy = g.tape.gaussian_entropy(sd_zhat);
    // Recover the current latent through the inverted local dynamics.
    let z_bar = g.sample(mu_zb, sd_zb, &eps.z_bar);
    let tn = g.transition(z_bar)?;
    let z_t = g.inverse_transition(z_hat, un, &tn);
    let logp = g.tape.gaussian_log_density(z_t, mu_prior, sd_prior);
    // Content KL against the learned-mean unit-covariance prior.
    let mu_wx_prior = g.leaf_by_name("prior.mu_wx");
    let k = g.params().hyper.content_dim;
    let ones = g.tape.constant(vec![1.0; k]);
    let kl_w = g.tape.gaussian_kl(mu_wx, sd_wx, mu_wx_prior, ones);
    // total = recon - kl_zbar + entropy + logp - kl_w
    let t = g.tape.sub(recon, kl_zbar);
    let t = g.tape.add(t, entropy);
    let t = g.tape.add(t, logp);
    let total = g.tape.sub(t, kl_w);
    Ok(XTerms {
        recon,
        kl_zbar,
        entropy,
        logp,
        kl_w,
        total,
    })
}

struct YTerms {
    recon: NodeId,
    kl_v: NodeId,
    kl_w: NodeId,
    total: NodeId,
}

fn build_elbo_y<'a>(
    g: &mut ModelGraph<'a>,
    y_t: &'a Image,
    x_t: &'a Image,
    eps: &'a YNoise,
) -> Result<YTerms, ObjectiveError> {
    let yn = g.image_input(y_t);
    let xn = g.image_input(x_t);
    let (mu_v, sd_v) = g.encode_dynamics(yn, View::Y);
    let (mu_wy, sd_wy) = g.encode_content(yn);
    let v = g.sample(mu_v, sd_v, &eps.v);
    let w_y = g.sample(mu_wy, sd_wy, &eps.w);
    let logits = g.decode_logits(v, w_y);
    let recon = g.tape.bernoulli_from_logits(logits, yn);
    // Tied prior: the X dynamics posterior at the state-aligned frame.
    // Gradient flow into the prior side is blocked unless the symmetric
    // ablation is switched on, so Y updates cannot drag the X embedding.
    let (mu_p_raw, sd_p_raw) = g.encode_dynamics(xn, View::X);
    let (mu_p, sd_p) = if g.params().hyper.symmetric_prior_flow {
        (mu_p_raw, sd_p_raw)
    } else {
        (g.tape.detach(mu_p_raw), g.tape.detach(sd_p_raw))
    };
    let kl_v = g.tape.gaussian_kl(mu_v, sd_v, mu_p, sd_p);
    let mu_wy_prior = g.leaf_by_name("prior.mu_wy");
    let k = g.params().hyper.content_dim;
    let ones = g.tape.constant(vec![1.0; k]);
    let kl_w = g.tape.gaussian_kl(mu_wy, sd_wy, mu_wy_prior, ones);
    // total = recon - kl_v - kl_w
    let t = g.tape.sub(recon, kl_v);
    let total = g.tape.sub(t, kl_w);
    Ok(YTerms {
        recon,
        kl_v,
        kl_w,
        total,
    })
}

fn x_breakdown(g: &ModelGraph<'_>, t: &XTerms) -> ElboBreakdown {
    ElboBreakdown {
        recon_x: g.tape.scalar(t.recon),
        kl_zbar: g.tape.scalar(t.kl_zbar),
        entropy_zhat: g.tape.scalar(t.entropy),
        logp_zt: g.tape.scalar(t.logp),
        kl_wx: g.tape.scalar(t.kl_w),
        total: g.tape.scalar(t.total),
        ..ElboBreakdown::default()
    }
}

fn y_breakdown(g: &ModelGraph<'_>, t: &YTerms) -> ElboBreakdown {
    ElboBreakdown {
        recon_y: g.tape.scalar(t.recon),
        kl_v: g.tape.scalar(t.kl_v),
        kl_wy: g.tape.scalar(t.kl_w),
        total: g.tape.scalar(t.total),
        ..ElboBreakdown::default()
    }
}

fn check_finite(b: &ElboBreakdown) -> Result<(), ObjectiveError> {
    if b.is_finite() {
        Ok(())
    } else {
        Err(ObjectiveError::NonFiniteTerm {
            term: b.first_non_finite().unwrap_or("total"),
        })
    }
}

/// The bound terms for one X-triple under fixed noise.
pub fn elbo_x(
    triple: &TripleRecord,
    params: &ModelParams,
    eps: &XNoise,
) -> Result<ElboBreakdown, ObjectiveError> {
    let mut g = ModelGraph::new(params);
    let terms = build_elbo_x(&mut g, &triple.x_t, &triple.u_t.u, &triple.x_next, eps)?;
    let b = x_breakdown(&g, &terms);
    check_finite(&b)?;
    Ok(b)
}

/// The bound terms for one Y-observation under fixed noise.
pub fn elbo_y(
    pair: &PairedRecord,
    params: &ModelParams,
    eps: &YNoise,
) -> Result<ElboBreakdown, ObjectiveError> {
    let mut g = ModelGraph::new(params);
    let terms = build_elbo_y(&mut g, &pair.y_t, &pair.x_t, eps)?;
    let b = y_breakdown(&g, &terms);
    check_finite(&b)?;
    Ok(b)
}

/// Per-block gradient buffers aligned with `ModelParams` blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub blocks: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Gradients {
            blocks: params.specs().iter().map(|s| vec![0.0; s.len]).collect(),
        }
    }

    fn add_scaled(&mut self, other: &[Vec<f64>], w: f64) {
        for (dst, src) in self.blocks.iter_mut().zip(other) {
            if src.is_empty() {
                continue;
            }
            for (d, s) in dst.iter_mut().zip(src) {
                *d += w * s;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        let mut acc = 0.0;
        for b in &self.blocks {
            for v in b {
                acc += v * v;
            }
        }
        crate::math::sqrt(acc)
    }

    pub fn scale(&mut self, s: f64) {
        for b in self.blocks.iter_mut() {
            for v in b.iter_mut() {
                *v *= s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.blocks.iter().flatten().all(|v| v.is_finite())
    }
}

/// Training loss over a pair of batches:
/// `-( mean elbo_x + beta_y * mean elbo_y )`, plus the mean per-term
/// breakdown (whose `total` stays the unweighted signed sum).
pub fn total_loss(
    batch_x: &[TripleRecord],
    batch_y: &[PairedRecord],
    params: &ModelParams,
    beta_y: f64,
    eps_x: &[XNoise],
    eps_y: &[YNoise],
) -> Result<(f64, ElboBreakdown), ObjectiveError> {
    let (loss, breakdown, _) = loss_impl(batch_x, batch_y, params, beta_y, eps_x, eps_y, false)?;
    Ok((loss, breakdown))
}

/// Training loss plus its gradient with respect to every parameter block.
pub fn loss_and_grad(
    batch_x: &[TripleRecord],
    batch_y: &[PairedRecord],
    params: &ModelParams,
    beta_y: f64,
    eps_x: &[XNoise],
    eps_y: &[YNoise],
) -> Result<(f64, ElboBreakdown, Gradients), ObjectiveError> {
    let (loss, breakdown, grads) = loss_impl(batch_x, batch_y, params, beta_y, eps_x, eps_y, true)?;
    Ok((loss, breakdown, grads.expect("gradients requested")))
}

fn loss_impl(
    batch_x: &[TripleRecord],
    batch_y: &[PairedRecord],
    params: &ModelParams,
    beta_y: f64,
    eps_x: &[XNoise],
    eps_y: &[YNoise],
    want_grad: bool,
) -> Result<(f64, ElboBreakdown, Option<Gradients>), ObjectiveError> {
    if batch_x.is_empty() && batch_y.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    if eps_x.len() != batch_x.len() {
        return Err(ObjectiveError::NoiseCount {
            expected: batch_x.len(),
            got: eps_x.len(),
        });
    }
    if eps_y.len() != batch_y.len() {
        return Err(ObjectiveError::NoiseCount {
            expected: batch_y.len(),
            got: eps_y.len(),
        });
    }
    let n_blocks = params.n_blocks();
    let mut grads = want_grad.then(|| Gradients::zeros_like(params));
    let mut mean = ElboBreakdown::default();
    let mut x_mean_total = 0.0;
    let mut y_mean_total = 0.0;
    let wx = if batch_x.is_empty() {
        0.0
    } else {
        1.0 / batch_x.len() as f64
    };
    let wy = if batch_y.is_empty() {
        0.0
    } else {
        1.0 / batch_y.len() as f64
    };
    for (rec, eps) in batch_x.iter().zip(eps_x) {
        let mut g = ModelGraph::new(params);
        let terms = build_elbo_x(&mut g, &rec.x_t, &rec.u_t.u, &rec.x_next, eps)?;
        let b = x_breakdown(&g, &terms);
        check_finite(&b)?;
        mean.accumulate(&b, wx);
        x_mean_total += wx * b.total;
        if let Some(acc) = grads.as_mut() {
            let record_grads = g.tape.backward(terms.total, n_blocks);
            acc.add_scaled(&record_grads, -wx);
        }
    }
    for (rec, eps) in batch_y.iter().zip(eps_y) {
        let mut g = ModelGraph::new(params);
        let terms = build_elbo_y(&mut g, &rec.y_t, &rec.x_t, eps)?;
        let b = y_breakdown(&g, &terms);
        check_finite(&b)?;
        mean.accumulate(&b, wy);
        y_mean_total += wy * b.total;
        if let Some(acc) = grads.as_mut() {
            let record_grads = g.tape.backward(terms.total, n_blocks);
            acc.add_scaled(&record_grads, -beta_y * wy);
        }
    }
    let loss = -(x_mean_total + beta_y * y_mean_total);
    if !loss.is_finite() {
        return Err(ObjectiveError::NonFiniteTerm { term: "total" });
    }
    Ok((loss, mean, grads))
}

/// Draw per-record noise for an X batch from a stream, in record order.
pub fn draw_x_noise(h: &HyperConfig, n: usize, rng: &mut Stream) -> Vec<XNoise> {
    (0..n).map(|_| XNoise::draw(h, rng)).collect()
}

/// Draw per-record noise for a Y batch from a stream, in record order.
pub fn draw_y_noise(h: &HyperConfig, n: usize, rng: &mut Stream) -> Vec<YNoise> {
    (0..n).map(|_| YNoise::draw(h, rng)).collect()
}

/// Relative-error report for one parameter block of the finite-difference
/// gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckBlock {
    pub name: String,
    pub rel_error: f64,
    pub analytic_norm: f64,
    pub fd_norm: f64,
}

/// Compare analytic gradients of the batch loss against central finite
/// differences with the given step, per parameter block. The relative error
/// is `|g_fd - g| / max(|g_fd|, |g|, eps)` in the L2 sense.
pub fn gradient_check(
    batch_x: &[TripleRecord],
    batch_y: &[PairedRecord],
    params: &ModelParams,
    beta_y: f64,
    eps_x: &[XNoise],
    eps_y: &[YNoise],
    step: f64,
) -> Result<Vec<GradCheckBlock>, ObjectiveError> {
    let (_, _, grads) = loss_impl(batch_x, batch_y, params, beta_y, eps_x, eps_y, true)?;
    let grads = grads.unwrap();
    let mut work = params.clone();
    let mut out = Vec::new();
    for (bi, spec) in params.specs().to_vec().iter().enumerate() {
        let mut err2 = 0.0;
        let mut fd2 = 0.0;
        let mut an2 = 0.0;
        for i in 0..spec.len {
            let orig = work.block(bi)[i];
            work.block_mut(bi)[i] = orig + step;
            let (fp, _, _) = loss_impl(batch_x, batch_y, &work, beta_y, eps_x, eps_y, false)?;
            work.block_mut(bi)[i] = orig - step;
            let (fm, _, _) = loss_impl(batch_x, batch_y, &work, beta_y, eps_x, eps_y, false)?;
            work.block_mut(bi)[i] = orig;
            let fd = (fp - fm) / (2.0 * step);
            let an = grads.blocks[bi][i];
            err2 += (fd - an) * (fd - an);
            fd2 += fd * fd;
            an2 += an * an;
        }
        let fd_norm = crate::math::sqrt(fd2);
        let analytic_norm = crate::math::sqrt(an2);
        let rel_error = crate::math::sqrt(err2) / fd_norm.max(analytic_norm).max(1e-8);
        out.push(GradCheckBlock {
            name: spec.name.clone(),
            rel_error,
            analytic_norm,
            fd_norm,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data;
    use crate::env::{AgentShape, EnvConfig};
    use crate::math;
    use crate::model::{HyperConfig, ModelParams};
    use crate::rng::derive;

    // ---- quadrature oracles -------------------------------------------

    /// Simpson integration of f over [a, b].
    fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let n = n + n % 2;
        let h = (b - a) / n as f64;
        let mut acc = f(a) + f(b);
        for i in 1..n {
            let x = a + i as f64 * h;
            acc += f(x) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        acc * h / 3.0
    }

    fn normal_pdf(x: f64, mu: f64, sigma: f64) -> f64 {
        let z = (x - mu) / sigma;
        math::exp(-0.5 * z * z) / (sigma * math::sqrt(2.0 * core::f64::consts::PI))
    }

    fn normal_log_pdf(x: f64, mu: f64, sigma: f64) -> f64 {
        let z = (x - mu) / sigma;
        -0.5 * z * z - math::ln(sigma) - 0.5 * math::ln(2.0 * core::f64::consts::PI)
    }

    /// KL between 1-D Gaussians by numeric quadrature of q (ln q - ln p),
    /// with the log densities evaluated in log space so narrow references
    /// cannot underflow inside the integrand.
    fn quadrature_kl_1d(mu_q: f64, s_q: f64, mu_p: f64, s_p: f64) -> f64 {
        let lo = mu_q - 14.0 * s_q;
        let hi = mu_q + 14.0 * s_q;
        simpson(
            |x| {
                let q = normal_pdf(x, mu_q, s_q);
                if q <= 0.0 {
                    0.0
                } else {
                    q * (normal_log_pdf(x, mu_q, s_q) - normal_log_pdf(x, mu_p, s_p))
                }
            },
            lo,
            hi,
            20_000,
        )
    }

    /// Entropy of a 1-D Gaussian by numeric quadrature of -q ln q.
    fn quadrature_entropy_1d(sigma: f64) -> f64 {
        simpson(
            |x| {
                let q = normal_pdf(x, 0.0, sigma);
                if q <= 0.0 {
                    0.0
                } else {
                    -q * math::ln(q)
                }
            },
            -14.0 * sigma,
            14.0 * sigma,
            20_000,
        )
    }

    fn g1(mu: f64, s: f64) -> GaussianLatent {
        GaussianLatent::new(vec![mu], vec![s])
    }

    // ---- closed forms --------------------------------------------------

    #[test]
    fn kl_identical_distributions_is_zero() {
        let q = GaussianLatent::new(vec![0.3, -1.0], vec![0.7, 2.0]);
        assert_eq!(gaussian_kl(&q, &q).unwrap(), 0.0);
    }

    #[test]
    fn kl_matches_quadrature_and_frozen_values() {
        // mean shift of one: 0.5 exactly
        let v = gaussian_kl(&g1(0.0, 1.0), &g1(1.0, 1.0)).unwrap();
        assert!((v - 0.5).abs() < 1e-12);
        assert!((v - quadrature_kl_1d(0.0, 1.0, 1.0, 1.0)).abs() < 1e-7);
        // doubled scale: 2 - 1/2 - ln 2
        let v = gaussian_kl(&g1(0.0, 2.0), &g1(0.0, 1.0)).unwrap();
        let frozen = 2.0 - 0.5 - math::ln(2.0);
        assert!((v - frozen).abs() < 1e-12);
        assert!((frozen - 0.8068528194400547).abs() < 1e-15);
        assert!((v - quadrature_kl_1d(0.0, 2.0, 0.0, 1.0)).abs() < 1e-7);
        // a batch of random instances against quadrature
        let mut r = derive(77, &[0]);
        for _ in 0..25 {
            let (mq, sq) = (rng::normal(&mut r), 0.3 + rng::uniform(&mut r));
            let (mp, sp) = (rng::normal(&mut r), 0.3 + rng::uniform(&mut r));
            let closed = gaussian_kl(&g1(mq, sq), &g1(mp, sp)).unwrap();
            let quad = quadrature_kl_1d(mq, sq, mp, sp);
            assert!((closed - quad).abs() < 1e-6, "{} vs {}", closed, quad);
            assert!(closed >= 0.0);
        }
    }

    #[test]
    fn kl_rejects_dimension_mismatch() {
        let q = GaussianLatent::new(vec![0.0, 0.0], vec![1.0, 1.0]);
        let p = g1(0.0, 1.0);
        assert!(matches!(
            gaussian_kl(&q, &p),
            Err(ObjectiveError::DimMismatch { q: 2, p: 1 })
        ));
    }

    #[test]
    fn entropy_matches_quadrature_and_identities() {
        let h1 = gaussian_entropy(&g1(0.0, 1.0));
        assert!((h1 - 1.4189385332046727).abs() < 1e-12);
        assert!((h1 - quadrature_entropy_1d(1.0)).abs() < 1e-7);
        // doubling one sigma adds ln 2
        let h2 = gaussian_entropy(&g1(5.0, 2.0));
        assert!((h2 - (h1 + math::ln(2.0))).abs() < 1e-12);
        // additivity across dimensions
        let h2d = gaussian_entropy(&GaussianLatent::new(vec![0.0, 0.0], vec![1.0, 1.0]));
        assert!((h2d - 2.0 * h1).abs() < 1e-12);
    }

    #[test]
    fn bernoulli_loglik_cases() {
        let mut img = Image::zeros(40, 40);
        let means = vec![0.5; 1600];
        img.pixels.iter_mut().for_each(|p| *p = 0.5);
        let v = bernoulli_loglik(&img, &means);
        assert!((v - 1600.0 * math::ln(0.5)).abs() < 1e-9);
        // binary image with means clamped onto the targets: tiny negative
        let mut img = Image::zeros(4, 4);
        img.pixels[3] = 1.0;
        img.pixels[7] = 1.0;
        let means: Vec<f64> = img
            .pixels
            .iter()
            .map(|&x| if x > 0.5 { 1.0 - 1e-12 } else { 1e-12 })
            .collect();
        let v = bernoulli_loglik(&img, &means);
        assert!(v < 0.0 && v > -1e-9, "{}", v);
        // random case against an independently ordered accumulation
        let mut r = derive(78, &[1]);
        let mut img = Image::zeros(8, 8);
        img.pixels.iter_mut().for_each(|p| *p = rng::uniform(&mut r));
        let means: Vec<f64> = (0..64).map(|_| 0.05 + 0.9 * rng::uniform(&mut r)).collect();
        let got = bernoulli_loglik(&img, &means);
        let mut terms: Vec<f64> = img
            .pixels
            .iter()
            .zip(&means)
            .map(|(&x, &m)| x * math::ln(m) + (1.0 - x) * math::ln(1.0 - m))
            .collect();
        terms.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let oracle: f64 = terms.iter().sum();
        assert!((got - oracle).abs() < 1e-10);
    }

    // ---- elbo pipelines -------------------------------------------------

    fn tiny_setup(seed: u64) -> (EnvConfig, HyperConfig, ModelParams) {
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
        let p = ModelParams::init(h.clone(), seed).unwrap();
        (cfg, h, p)
    }

    fn tiny_batches(
        cfg: &EnvConfig,
        nx: usize,
        ny: usize,
        seed: u64,
    ) -> (Vec<TripleRecord>, Vec<PairedRecord>) {
        let mut r = derive(seed, &[9]);
        let xs = data::generate_x(cfg, nx, &mut r).unwrap();
        let ys = data::generate_y(cfg, ny, &mut r).unwrap();
        (xs, ys)
    }

    #[test]
    fn elbo_x_total_is_signed_sum_and_deterministic() {
        let (cfg, h, p) = tiny_setup(3);
        let (xs, _) = tiny_batches(&cfg, 3, 0, 11);
        let mut r = derive(5, &[2]);
        for rec in &xs {
            let eps = XNoise::draw(&h, &mut r);
            let a = elbo_x(rec, &p, &eps).unwrap();
            let b = elbo_x(rec, &p, &eps).unwrap();
            assert_eq!(a, b, "frozen noise must give identical bits");
            let recomputed = a.recon_x - a.kl_zbar + a.entropy_zhat + a.logp_zt - a.kl_wx;
            assert!((a.total - recomputed).abs() < 1e-12);
            assert!(a.kl_zbar >= 0.0 && a.kl_wx >= 0.0);
        }
    }

    #[test]
    fn elbo_y_total_is_signed_sum_and_kl_nonnegative() {
        let (cfg, h, p) = tiny_setup(4);
        let (_, ys) = tiny_batches(&cfg, 0, 3, 12);
        let mut r = derive(6, &[3]);
        for rec in &ys {
            let eps = YNoise::draw(&h, &mut r);
            let a = elbo_y(rec, &p, &eps).unwrap();
            let b = elbo_y(rec, &p, &eps).unwrap();
            assert_eq!(a, b);
            assert!((a.total - (a.recon_y - a.kl_v - a.kl_wy)).abs() < 1e-12);
            assert!(a.kl_v >= 0.0 && a.kl_wy >= 0.0);
        }
    }

    #[test]
    fn total_loss_single_records_match_elbo_sum() {
        let (cfg, h, p) = tiny_setup(5);
        let (xs, ys) = tiny_batches(&cfg, 1, 1, 13);
        let mut r = derive(7, &[4]);
        let ex = vec![XNoise::draw(&h, &mut r)];
        let ey = vec![YNoise::draw(&h, &mut r)];
        let beta = 0.7;
        let (loss, agg) = total_loss(&xs, &ys, &p, beta, &ex, &ey).unwrap();
        let bx = elbo_x(&xs[0], &p, &ex[0]).unwrap();
        let by = elbo_y(&ys[0], &p, &ey[0]).unwrap();
        assert!((loss - -(bx.total + beta * by.total)).abs() < 1e-12);
        assert!((agg.recon_x - bx.recon_x).abs() < 1e-12);
        assert!((agg.recon_y - by.recon_y).abs() < 1e-12);
    }

    #[test]
    fn beta_zero_blanks_y_gradients_of_unshared_blocks() {
        let (cfg, h, p) = tiny_setup(6);
        let (xs, ys) = tiny_batches(&cfg, 2, 2, 14);
        let mut r = derive(8, &[5]);
        let ex = draw_x_noise(&h, 2, &mut r);
        let ey = draw_y_noise(&h, 2, &mut r);
        let (loss, _, grads) = loss_and_grad(&xs, &ys, &p, 0.0, &ex, &ey).unwrap();
        // Y-only parameter: the Y content prior mean.
        let idx = p.block_index("prior.mu_wy").unwrap();
        assert!(grads.blocks[idx].iter().all(|&v| v == 0.0));
        let idx_x = p.block_index("prior.mu_wx").unwrap();
        assert!(grads.blocks[idx_x].iter().any(|&v| v != 0.0));
        // loss equals the pure X loss
        let (loss_x_only, _) = total_loss(&xs, &[], &p, 0.0, &ex, &[]).unwrap();
        assert!((loss - loss_x_only).abs() < 1e-12);
    }

    #[test]
    fn prior_flow_block_controls_x_encoder_gradients_from_y() {
        let (cfg, h, p_blocked) = tiny_setup(7);
        let (_, ys) = tiny_batches(&cfg, 0, 2, 15);
        let mut r = derive(9, &[6]);
        let ey = draw_y_noise(&h, 2, &mut r);
        let (_, _, g_blocked) = loss_and_grad(&[], &ys, &p_blocked, 1.0, &[], &ey).unwrap();
        let mut sym = p_blocked.clone();
        sym.hyper.symmetric_prior_flow = true;
        let (_, _, g_sym) = loss_and_grad(&[], &ys, &sym, 1.0, &[], &ey).unwrap();
        // Same records, same noise: any difference in the shared encoder
        // gradient comes from the prior-side path, present only in the
        // symmetric run.
        let idx = p_blocked.block_index("enc_dyn.head.w").unwrap();
        let diff: f64 = g_blocked.blocks[idx]
            .iter()
            .zip(&g_sym.blocks[idx])
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 0.0, "symmetric flow should change the prior gradient");
        // A Y-only batch never touches the backward encoder.
        let idx_back = p_blocked.block_index("enc_back.fc.w").unwrap();
        assert!(g_blocked.blocks[idx_back].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_batches_error() {
        let (_, _, p) = tiny_setup(8);
        assert!(matches!(
            total_loss(&[], &[], &p, 1.0, &[], &[]),
            Err(ObjectiveError::EmptyBatch)
        ));
    }

    #[test]
    fn tiny_model_gradient_check() {
        // Central differences at the spec step over every block on the
        // 4x4 model with frozen noise; the acceptance suite repeats this
        // at full strictness. Finite differences probe the loss as a plain
        // function, so the Y check runs with symmetric prior flow — under
        // the default blocked flow the analytic gradient differs from the
        // raw finite difference on the prior path by construction, which
        // `prior_flow_block_controls_x_encoder_gradients_from_y` covers.
        let (cfg, h, mut p) = tiny_setup(9);
        let (xs, ys) = tiny_batches(&cfg, 1, 1, 16);
        let mut r = derive(10, &[7]);
        let ex = draw_x_noise(&h, 1, &mut r);
        let ey = draw_y_noise(&h, 1, &mut r);
        // X-only pass under the default configuration.
        let report = gradient_check(&xs, &[], &p, 1.0, &ex, &[], 1e-4).unwrap();
        for block in &report {
            assert!(
                block.rel_error < 1e-3,
                "x-only block {} rel error {:e}",
                block.name,
                block.rel_error
            );
        }
        // Joint pass with the prior path differentiable.
        p.hyper.symmetric_prior_flow = true;
        let report = gradient_check(&xs, &ys, &p, 1.0, &ex, &ey, 1e-4).unwrap();
        for block in &report {
            assert!(
                block.rel_error < 1e-3,
                "joint block {} rel error {:e}",
                block.name,
                block.rel_error
            );
        }
    }

    #[test]
    fn monte_carlo_average_is_consistent() {
        // The 1000-sample mean of the stochastic bound must sit within
        // three standard errors of a high-sample estimate.
        let (cfg, h, p) = tiny_setup(10);
        let (xs, _) = tiny_batches(&cfg, 1, 0, 17);
        let rec = &xs[0];
        let mut r = derive(11, &[8]);
        let big_n = 100_000;
        let mut totals = Vec::with_capacity(big_n);
        for _ in 0..big_n {
            let eps = XNoise::draw(&h, &mut r);
            totals.push(elbo_x(rec, &p, &eps).unwrap().total);
        }
        let (big_mean, big_std) = math::mean_std(&totals);
        let small: Vec<f64> = totals[..1000].to_vec();
        let (small_mean, _) = math::mean_std(&small);
        let se = big_std / math::sqrt(1000.0);
        assert!(
            (small_mean - big_mean).abs() <= 3.0 * se,
            "{} vs {} (se {})",
            small_mean,
            big_mean,
            se
        );
    }
}
