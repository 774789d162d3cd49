//! Networks of the latent model.
//!
//! Five parameterized pieces share one parameter store:
//!
//! * dynamics encoder — image to a diagonal Gaussian over the dynamics
//!   latent; one set of weights serves the next-observation posterior, the
//!   two current-observation priors, and (by default) the Y-view posterior,
//!   so the hard tying of those conditionals holds by construction;
//! * content encoder — image to a Gaussian over the content latent, shared
//!   across both observation sets;
//! * decoder — (dynamics latent, content latent) to per-pixel Bernoulli
//!   means;
//! * backward encoder — (previous image, next dynamics latent) to a Gaussian
//!   over the pre-transition latent;
//! * transition network — pre-transition latent to the local affine dynamics
//!   (A, B, c) with A a guarded rank-one perturbation of the identity, so it
//!   is always invertible and cheap to invert.
//!
//! All evaluation goes through the [`ModelGraph`] tape builder; the public
//! functions wrap it and return plain values.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{NodeId, Tape};
use crate::env::Image;
use crate::math::{self, Mat};
use crate::rng;

pub const ACTION_DIM: usize = 2;

/// Decoder means are clamped this far inside (0, 1) so log-likelihoods of
/// hard binary targets stay finite.
pub const DECODER_MEAN_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub enum ModelError {
    InvalidHyper(String),
    NonFinite { op: &'static str, node: usize },
    ShapeMismatch(String),
    Unsupported(String),
}

impl core::fmt::Display for ModelError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            ModelError::InvalidHyper(m) => write!(f, "invalid hyperparameters: {}", m),
            ModelError::NonFinite { op, node } => {
                write!(f, "non-finite value produced by op `{}` (node {})", op, node)
            }
            ModelError::ShapeMismatch(m) => write!(f, "shape mismatch: {}", m),
            ModelError::Unsupported(m) => write!(f, "unsupported configuration: {}", m),
        }
    }
}

impl core::error::Error for ModelError {}

/// Diagonal Gaussian over a latent vector.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianLatent {
    pub mean: Vec<f64>,
    pub stddev: Vec<f64>,
}

impl GaussianLatent {
    pub fn new(mean: Vec<f64>, stddev: Vec<f64>) -> Self {
        assert_eq!(mean.len(), stddev.len());
        debug_assert!(stddev.iter().all(|&s| s > 0.0));
        GaussianLatent { mean, stddev }
    }

    /// Unit-covariance Gaussian with the given mean.
    pub fn unit(mean: Vec<f64>) -> Self {
        let stddev = vec![1.0; mean.len()];
        GaussianLatent { mean, stddev }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Reparameterized sample `mean + stddev .* eps`.
    pub fn sample(&self, eps: &[f64]) -> Vec<f64> {
        assert_eq!(eps.len(), self.mean.len());
        self.mean
            .iter()
            .zip(&self.stddev)
            .zip(eps)
            .map(|((m, s), e)| m + s * e)
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.mean.iter().chain(&self.stddev).all(|v| v.is_finite())
    }
}

/// Local affine latent dynamics `z' = A z + B u + c`.
#[derive(Debug, Clone, PartialEq)]
#[allow(non_snake_case)]
pub struct TransitionParams {
    pub A: Mat,
    pub B: Mat,
    pub c: Vec<f64>,
}

impl TransitionParams {
    pub fn latent_dim(&self) -> usize {
        self.A.rows
    }
}

/// Architecture and objective hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperConfig {
    /// Dynamics latent dimension d.
    pub latent_dim: usize,
    /// Content latent dimension k.
    pub content_dim: usize,
    /// Square input image side; must be divisible by 2^depth.
    pub image_size: usize,
    /// Channels of the strided conv stack; the decoder mirrors it.
    pub conv_channels: Vec<usize>,
    pub enc_hidden: usize,
    pub dec_hidden: usize,
    pub trans_hidden: usize,
    /// Floor added to softplus-transformed standard deviations.
    pub sigma_floor: f64,
    /// Rank of the identity perturbation in A.
    pub trans_rank: usize,
    /// Lower bound enforced on |det A|.
    pub det_floor: f64,
    /// Weight of the Y-set terms in the training loss.
    pub beta_y: f64,
    /// Share the dynamics encoder between the X and Y views.
    pub tie_y_encoder: bool,
    /// Let gradients flow into the tied prior during Y updates (ablation).
    pub symmetric_prior_flow: bool,
}

impl Default for HyperConfig {
    fn default() -> Self {
        HyperConfig {
            latent_dim: 2,
            content_dim: 2,
            image_size: 40,
            conv_channels: vec![4, 8, 16],
            enc_hidden: 64,
            dec_hidden: 64,
            trans_hidden: 32,
            sigma_floor: 1e-3,
            trans_rank: 1,
            det_floor: 1e-2,
            beta_y: 1.0,
            tie_y_encoder: true,
            symmetric_prior_flow: false,
        }
    }
}

impl HyperConfig {
    /// Small configuration for fast gradient checks: 4x4 images, one conv
    /// level, d=2, k=1.
    pub fn tiny() -> Self {
        HyperConfig {
            latent_dim: 2,
            content_dim: 1,
            image_size: 4,
            conv_channels: vec![3],
            enc_hidden: 10,
            dec_hidden: 10,
            trans_hidden: 8,
            ..HyperConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.latent_dim < 2 {
            return Err(ModelError::InvalidHyper("latent_dim must be >= 2".into()));
        }
        if self.content_dim < 1 {
            return Err(ModelError::InvalidHyper("content_dim must be >= 1".into()));
        }
        if !(self.sigma_floor > 0.0) {
            return Err(ModelError::InvalidHyper("sigma_floor must be > 0".into()));
        }
        if self.conv_channels.is_empty() {
            return Err(ModelError::InvalidHyper(
                "conv_channels must have at least one layer".into(),
            ));
        }
        let depth = self.conv_channels.len();
        if self.image_size == 0 || self.image_size % (1usize << depth) != 0 {
            return Err(ModelError::InvalidHyper(format!(
                "image_size {} must be divisible by 2^{}",
                self.image_size, depth
            )));
        }
        if self.trans_rank < 1 {
            return Err(ModelError::InvalidHyper("trans_rank must be >= 1".into()));
        }
        if !(self.det_floor > 0.0 && self.det_floor < 1.0) {
            return Err(ModelError::InvalidHyper("det_floor must be in (0,1)".into()));
        }
        if self.enc_hidden == 0 || self.dec_hidden == 0 || self.trans_hidden == 0 {
            return Err(ModelError::InvalidHyper("hidden widths must be > 0".into()));
        }
        Ok(())
    }

    /// Spatial sizes after each conv layer, starting with the input size.
    pub fn conv_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.image_size];
        for _ in &self.conv_channels {
            let n = *sizes.last().unwrap();
            sizes.push((n - 1) / 2 + 1);
        }
        sizes
    }

    /// Flattened feature length after the conv stack.
    pub fn conv_flat(&self) -> usize {
        self.conv_channels.last().unwrap() * {
            let s = *self.conv_sizes().last().unwrap();
            s * s
        }
    }

    pub fn pixels(&self) -> usize {
        self.image_size * self.image_size
    }

    /// Length of the transition network output: rank*(2d) for the
    /// perturbation vector pairs, d*m for B, d for c.
    pub fn trans_out(&self) -> usize {
        let d = self.latent_dim;
        self.trans_rank * 2 * d + d * ACTION_DIM + d
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    FanIn(usize),
    Zero,
    Const(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockSpec {
    pub name: String,
    pub len: usize,
    init: Init,
}

fn encoder_specs(prefix: &str, h: &HyperConfig, in_extra: usize, out_dim: usize) -> Vec<BlockSpec> {
    let mut specs = Vec::new();
    let mut cin = 1;
    for (i, &cout) in h.conv_channels.iter().enumerate() {
        specs.push(BlockSpec {
            name: format!("{}.conv{}.w", prefix, i + 1),
            len: cout * cin * 9,
            init: Init::FanIn(cin * 9),
        });
        specs.push(BlockSpec {
            name: format!("{}.conv{}.b", prefix, i + 1),
            len: cout,
            init: Init::Zero,
        });
        cin = cout;
    }
    let flat = h.conv_flat() + in_extra;
    specs.push(BlockSpec {
        name: format!("{}.fc.w", prefix),
        len: h.enc_hidden * flat,
        init: Init::FanIn(flat),
    });
    specs.push(BlockSpec {
        name: format!("{}.fc.b", prefix),
        len: h.enc_hidden,
        init: Init::Zero,
    });
    specs.push(BlockSpec {
        name: format!("{}.head.w", prefix),
        len: 2 * out_dim * h.enc_hidden,
        init: Init::FanIn(h.enc_hidden),
    });
    specs.push(BlockSpec {
        name: format!("{}.head.b", prefix),
        len: 2 * out_dim,
        init: Init::Zero,
    });
    specs
}

/// The full ordered parameter layout for a hyperparameter setting. This is
/// the single source of truth consulted by initialization, checkpointing,
/// and the optimizer.
pub fn block_specs(h: &HyperConfig) -> Vec<BlockSpec> {
    let d = h.latent_dim;
    let k = h.content_dim;
    let mut specs = Vec::new();
    specs.extend(encoder_specs("enc_dyn", h, 0, d));
    specs.extend(encoder_specs("enc_con", h, 0, k));
    specs.extend(encoder_specs("enc_back", h, d, d));
    if !h.tie_y_encoder {
        specs.extend(encoder_specs("enc_dyn_y", h, 0, d));
    }
    // Decoder: dense stem then mirrored transposed convs.
    let flat = h.conv_flat();
    specs.push(BlockSpec {
        name: "dec.fc1.w".into(),
        len: h.dec_hidden * (d + k),
        init: Init::FanIn(d + k),
    });
    specs.push(BlockSpec {
        name: "dec.fc1.b".into(),
        len: h.dec_hidden,
        init: Init::Zero,
    });
    specs.push(BlockSpec {
        name: "dec.fc2.w".into(),
        len: flat * h.dec_hidden,
        init: Init::FanIn(h.dec_hidden),
    });
    specs.push(BlockSpec {
        name: "dec.fc2.b".into(),
        len: flat,
        init: Init::Zero,
    });
    let mut chans: Vec<usize> = h.conv_channels.clone();
    chans.reverse();
    chans.push(1);
    for i in 0..chans.len() - 1 {
        let (cin, cout) = (chans[i], chans[i + 1]);
        specs.push(BlockSpec {
            name: format!("dec.deconv{}.w", i + 1),
            len: cin * cout * 9,
            init: Init::FanIn(cin * 3),
        });
        specs.push(BlockSpec {
            name: format!("dec.deconv{}.b", i + 1),
            len: cout,
            init: Init::Zero,
        });
    }
    // Transition network; the head starts at zero so the initial dynamics
    // are the identity map (A = I, B = 0, c = 0).
    specs.push(BlockSpec {
        name: "trans.fc1.w".into(),
        len: h.trans_hidden * d,
        init: Init::FanIn(d),
    });
    specs.push(BlockSpec {
        name: "trans.fc1.b".into(),
        len: h.trans_hidden,
        init: Init::Zero,
    });
    specs.push(BlockSpec {
        name: "trans.fc2.w".into(),
        len: h.trans_hidden * h.trans_hidden,
        init: Init::FanIn(h.trans_hidden),
    });
    specs.push(BlockSpec {
        name: "trans.fc2.b".into(),
        len: h.trans_hidden,
        init: Init::Zero,
    });
    specs.push(BlockSpec {
        name: "trans.head.w".into(),
        len: h.trans_out() * h.trans_hidden,
        init: Init::Zero,
    });
    specs.push(BlockSpec {
        name: "trans.head.b".into(),
        len: h.trans_out(),
        init: Init::Zero,
    });
    // Content prior means, one per observation set.
    specs.push(BlockSpec {
        name: "prior.mu_wx".into(),
        len: k,
        init: Init::Const(1.0),
    });
    specs.push(BlockSpec {
        name: "prior.mu_wy".into(),
        len: k,
        init: Init::Const(-1.0),
    });
    specs
}

/// All weights of the model, stored as named flat blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub hyper: HyperConfig,
    specs: Vec<BlockSpec>,
    blocks: Vec<Vec<f64>>,
}

impl ModelParams {
    /// Deterministic initialization: fan-in-scaled Gaussian weights, zero
    /// biases, zero transition head, content prior means at +-1.
    pub fn init(hyper: HyperConfig, seed: u64) -> Result<Self, ModelError> {
        hyper.validate()?;
        let specs = block_specs(&hyper);
        let mut blocks = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            let block = match spec.init {
                Init::Zero => vec![0.0; spec.len],
                Init::Const(c) => vec![c; spec.len],
                Init::FanIn(fan) => {
                    let scale = 1.0 / math::sqrt(fan as f64);
                    let mut r = rng::derive(seed, &[0x1217, i as u64]);
                    (0..spec.len).map(|_| scale * rng::normal(&mut r)).collect()
                }
            };
            blocks.push(block);
        }
        Ok(ModelParams {
            hyper,
            specs,
            blocks,
        })
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn specs(&self) -> &[BlockSpec] {
        &self.specs
    }

    pub fn block_index(&self, name: &str) -> Option<usize> {
        self.specs.iter().position(|s| s.name == name)
    }

    pub fn block(&self, idx: usize) -> &[f64] {
        &self.blocks[idx]
    }

    pub fn block_by_name(&self, name: &str) -> Option<&[f64]> {
        self.block_index(name).map(|i| self.block(i))
    }

    pub fn block_mut(&mut self, idx: usize) -> &mut Vec<f64> {
        &mut self.blocks[idx]
    }

    pub fn named_blocks(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.specs
            .iter()
            .zip(&self.blocks)
            .map(|(s, b)| (s.name.as_str(), b.as_slice()))
    }

    /// Rebuild a parameter set from named blocks (checkpoint loading).
    /// Reports every absent or mis-shaped block by name.
    pub fn from_named_blocks(
        hyper: HyperConfig,
        named: &[(String, Vec<f64>)],
    ) -> Result<Self, ModelError> {
        hyper.validate()?;
        let specs = block_specs(&hyper);
        let mut blocks = Vec::with_capacity(specs.len());
        let mut problems = Vec::new();
        for spec in &specs {
            match named.iter().find(|(n, _)| n == &spec.name) {
                Some((_, data)) if data.len() == spec.len => blocks.push(data.clone()),
                Some((_, data)) => {
                    problems.push(format!(
                        "{}: expected {} values, found {}",
                        spec.name,
                        spec.len,
                        data.len()
                    ));
                    blocks.push(vec![0.0; spec.len]);
                }
                None => {
                    problems.push(format!("{}: missing", spec.name));
                    blocks.push(vec![0.0; spec.len]);
                }
            }
        }
        for (name, _) in named {
            if !specs.iter().any(|s| &s.name == name) {
                problems.push(format!("{}: unexpected block", name));
            }
        }
        if !problems.is_empty() {
            return Err(ModelError::ShapeMismatch(problems.join("; ")));
        }
        Ok(ModelParams {
            hyper,
            specs,
            blocks,
        })
    }

    pub fn total_len(&self) -> usize {
        self.blocks.iter().map(|b| b.len()).sum()
    }
}

/// Which observation set an image comes from; selects the dynamics encoder
/// when the Y view is configured with its own weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum View {
    X,
    Y,
}

/// Tape-level handles to the guarded transition quantities.
pub struct TransitionNodes {
    /// Guarded perturbation column (rank 1).
    pub v: NodeId,
    /// Perturbation row.
    pub r: NodeId,
    /// Flat d x m control matrix.
    pub b: NodeId,
    /// Offset.
    pub c: NodeId,
    /// Determinant of A after guarding.
    pub det: NodeId,
}

/// Builds model evaluations on a [`Tape`], reusing one leaf per parameter
/// block so tied conditionals literally share nodes.
pub struct ModelGraph<'a> {
    pub tape: Tape<'a>,
    params: &'a ModelParams,
    leaves: Vec<Option<NodeId>>,
}

impl<'a> ModelGraph<'a> {
    pub fn new(params: &'a ModelParams) -> Self {
        ModelGraph {
            tape: Tape::new(),
            params,
            leaves: vec![None; params.n_blocks()],
        }
    }

    pub fn params(&self) -> &ModelParams {
        self.params
    }

    /// Leaf node for a block, created on first use and shared afterwards.
    pub fn leaf(&mut self, idx: usize) -> NodeId {
        if let Some(id) = self.leaves[idx] {
            return id;
        }
        let id = self.tape.param(self.params.block(idx), idx);
        self.leaves[idx] = Some(id);
        id
    }

    pub fn leaf_by_name(&mut self, name: &str) -> NodeId {
        let idx = self
            .params
            .block_index(name)
            .unwrap_or_else(|| panic!("unknown block {}", name));
        self.leaf(idx)
    }

    /// Leaf id if the block was already consulted on this tape.
    pub fn existing_leaf(&self, name: &str) -> Option<NodeId> {
        self.params.block_index(name).and_then(|i| self.leaves[i])
    }

    pub fn image_input(&mut self, img: &'a Image) -> NodeId {
        assert_eq!(
            img.pixels.len(),
            self.params.hyper.pixels(),
            "image size mismatch"
        );
        self.tape.input(&img.pixels)
    }

    fn dense(&mut self, prefix: &str, x: NodeId) -> NodeId {
        let w = self.leaf_by_name(&format!("{}.w", prefix));
        let b = self.leaf_by_name(&format!("{}.b", prefix));
        let wx = self.tape.matvec(w, x);
        self.tape.add(wx, b)
    }

    fn conv_stack(&mut self, prefix: &str, img: NodeId) -> NodeId {
        let h = &self.params.hyper;
        let sizes = h.conv_sizes();
        let channels = h.conv_channels.clone();
        let mut x = img;
        let mut cin = 1;
        for (i, &cout) in channels.iter().enumerate() {
            let w = self.leaf_by_name(&format!("{}.conv{}.w", prefix, i + 1));
            let b = self.leaf_by_name(&format!("{}.conv{}.b", prefix, i + 1));
            let y = self.tape.conv2d(x, w, b, cin, cout, sizes[i], sizes[i]);
            x = self.tape.tanh(y);
            cin = cout;
        }
        x
    }

    /// Gaussian head: dense features -> (mean, stddev) with the softplus
    /// floor on the stddev half.
    fn gaussian_head(&mut self, prefix: &str, feats: NodeId, out_dim: usize) -> (NodeId, NodeId) {
        let floor = self.params.hyper.sigma_floor;
        let pre = self.dense(prefix, feats);
        let mean = self.tape.slice(pre, 0, out_dim);
        let raw = self.tape.slice(pre, out_dim, out_dim);
        let std = self.tape.softplus_floor(raw, floor);
        (mean, std)
    }

    fn encoder(&mut self, prefix: &str, img: NodeId, out_dim: usize) -> (NodeId, NodeId) {
        let feats = self.conv_stack(prefix, img);
        let hid = self.dense(&format!("{}.fc", prefix), feats);
        let hid = self.tape.tanh(hid);
        self.gaussian_head(&format!("{}.head", prefix), hid, out_dim)
    }

    /// Dynamics encoder for an image node: `(mean, stddev)` of dimension d.
    pub fn encode_dynamics(&mut self, img: NodeId, view: View) -> (NodeId, NodeId) {
        let prefix = match view {
            View::X => "enc_dyn",
            View::Y if self.params.hyper.tie_y_encoder => "enc_dyn",
            View::Y => "enc_dyn_y",
        };
        let d = self.params.hyper.latent_dim;
        self.encoder(prefix, img, d)
    }

    /// Content encoder, shared across views: `(mean, stddev)` of dimension k.
    pub fn encode_content(&mut self, img: NodeId) -> (NodeId, NodeId) {
        let k = self.params.hyper.content_dim;
        self.encoder("enc_con", img, k)
    }

    /// Backward encoder conditioning on the previous image and the sampled
    /// next latent.
    pub fn backward_encode(&mut self, img: NodeId, z_next: NodeId) -> (NodeId, NodeId) {
        let feats = self.conv_stack("enc_back", img);
        let joint = self.tape.concat(feats, z_next);
        let hid = self.dense("enc_back.fc", joint);
        let hid = self.tape.tanh(hid);
        let d = self.params.hyper.latent_dim;
        self.gaussian_head("enc_back.head", hid, d)
    }

    /// Decoder logits for (dynamics latent, content latent).
    pub fn decode_logits(&mut self, z: NodeId, w: NodeId) -> NodeId {
        let h = self.params.hyper.clone();
        let joint = self.tape.concat(z, w);
        let hid = self.dense("dec.fc1", joint);
        let hid = self.tape.tanh(hid);
        let stem = self.dense("dec.fc2", hid);
        let mut x = self.tape.tanh(stem);
        let mut chans: Vec<usize> = h.conv_channels.clone();
        chans.reverse();
        chans.push(1);
        let mut size = *h.conv_sizes().last().unwrap();
        for i in 0..chans.len() - 1 {
            let (cin, cout) = (chans[i], chans[i + 1]);
            let w = self.leaf_by_name(&format!("dec.deconv{}.w", i + 1));
            let b = self.leaf_by_name(&format!("dec.deconv{}.b", i + 1));
            let y = self.tape.conv_t2d(x, w, b, cin, cout, size, size);
            size *= 2;
            x = if i + 2 == chans.len() {
                y // final layer emits logits
            } else {
                self.tape.tanh(y)
            };
        }
        debug_assert_eq!(size, h.image_size);
        x
    }

    /// Transition network at a pre-transition latent, with the determinant
    /// guard applied to the perturbation. The tape path supports rank 1 (the
    /// shipped configuration); higher ranks go through the dense public path.
    pub fn transition(&mut self, z_bar: NodeId) -> Result<TransitionNodes, ModelError> {
        let h = &self.params.hyper;
        if h.trans_rank != 1 {
            return Err(ModelError::Unsupported(
                "tape transition path requires trans_rank = 1".into(),
            ));
        }
        let d = h.latent_dim;
        let det_floor = h.det_floor;
        let hid = self.dense("trans.fc1", z_bar);
        let hid = self.tape.tanh(hid);
        let hid = self.dense("trans.fc2", hid);
        let hid = self.tape.tanh(hid);
        let out = self.dense("trans.head", hid);
        let v_raw = self.tape.slice(out, 0, d);
        let r = self.tape.slice(out, d, d);
        let b = self.tape.slice(out, 2 * d, d * ACTION_DIM);
        let c = self.tape.slice(out, 2 * d + d * ACTION_DIM, d);
        // det(I + v r^T) = 1 + r . v, floored by rescaling v.
        let rv = self.tape.dot(r, v_raw);
        let det_raw = self.tape.add_const(rv, 1.0);
        let alpha = self.tape.guard_scale(det_raw, det_floor);
        let v = self.tape.scale_vec(v_raw, alpha);
        let rv_guarded = self.tape.dot(r, v);
        let det = self.tape.add_const(rv_guarded, 1.0);
        Ok(TransitionNodes { v, r, b, c, det })
    }

    /// `z' = A z + B u + c` with `A = I + v r^T`, composed without
    /// materializing A.
    pub fn forward_transition(&mut self, z: NodeId, u: NodeId, tn: &TransitionNodes) -> NodeId {
        let rz = self.tape.dot(tn.r, z);
        let vrz = self.tape.scale_vec(tn.v, rz);
        let bu = self.tape.matvec(tn.b, u);
        let s = self.tape.add(z, vrz);
        let s = self.tape.add(s, bu);
        self.tape.add(s, tn.c)
    }

    /// Exact inverse of [`Self::forward_transition`] by the
    /// Sherman-Morrison identity:
    /// `A^{-1} m = m - v (r . m) / (1 + r . v)`.
    pub fn inverse_transition(&mut self, z_next: NodeId, u: NodeId, tn: &TransitionNodes) -> NodeId {
        let bu = self.tape.matvec(tn.b, u);
        let m = self.tape.sub(z_next, bu);
        let m = self.tape.sub(m, tn.c);
        let rm = self.tape.dot(tn.r, m);
        let ratio = self.tape.scalar_ratio(rm, tn.det);
        let corr = self.tape.scale_vec(tn.v, ratio);
        self.tape.sub(m, corr)
    }

    /// Reparameterized sample node from `(mean, std)` and fixed noise.
    pub fn sample(&mut self, mean: NodeId, std: NodeId, eps: &'a [f64]) -> NodeId {
        let e = self.tape.input(eps);
        let scaled = self.tape.mul(std, e);
        self.tape.add(mean, scaled)
    }

    fn extract_gaussian(&self, mean: NodeId, std: NodeId) -> Result<GaussianLatent, ModelError> {
        let g = GaussianLatent {
            mean: self.tape.value(mean).to_vec(),
            stddev: self.tape.value(std).to_vec(),
        };
        if g.is_finite() {
            Ok(g)
        } else {
            Err(ModelError::NonFinite {
                op: "gaussian head",
                node: mean,
            })
        }
    }
}

/// Encode an image with the dynamics encoder.
pub fn encode_dynamics(img: &Image, params: &ModelParams) -> Result<GaussianLatent, ModelError> {
    encode_dynamics_view(img, View::X, params)
}

pub fn encode_dynamics_view(
    img: &Image,
    view: View,
    params: &ModelParams,
) -> Result<GaussianLatent, ModelError> {
    let mut g = ModelGraph::new(params);
    let x = g.image_input(img);
    let (mean, std) = g.encode_dynamics(x, view);
    g.extract_gaussian(mean, std)
}

/// Encode an image with the content encoder.
pub fn encode_content(img: &Image, params: &ModelParams) -> Result<GaussianLatent, ModelError> {
    let mut g = ModelGraph::new(params);
    let x = g.image_input(img);
    let (mean, std) = g.encode_content(x);
    g.extract_gaussian(mean, std)
}

/// Backward-encode the pre-transition latent from the previous image and
/// the next dynamics latent.
pub fn backward_encode(
    x_t: &Image,
    z_next: &[f64],
    params: &ModelParams,
) -> Result<GaussianLatent, ModelError> {
    let mut g = ModelGraph::new(params);
    let x = g.image_input(x_t);
    let z = g.tape.constant(z_next.to_vec());
    let (mean, std) = g.backward_encode(x, z);
    g.extract_gaussian(mean, std)
}

/// Decode a latent pair to per-pixel Bernoulli means, strictly inside (0, 1).
pub fn decode(z: &[f64], w: &[f64], params: &ModelParams) -> Result<Vec<f64>, ModelError> {
    let logits = decode_logits(z, w, params)?;
    Ok(logits
        .iter()
        .map(|&l| math::clamp(math::sigmoid(l), DECODER_MEAN_CLAMP, 1.0 - DECODER_MEAN_CLAMP))
        .collect())
}

pub fn decode_logits(z: &[f64], w: &[f64], params: &ModelParams) -> Result<Vec<f64>, ModelError> {
    let mut g = ModelGraph::new(params);
    let zn = g.tape.constant(z.to_vec());
    let wn = g.tape.constant(w.to_vec());
    let out = g.decode_logits(zn, wn);
    let vals = g.tape.value(out);
    if vals.iter().all(|v| v.is_finite()) {
        Ok(vals.to_vec())
    } else {
        Err(ModelError::NonFinite {
            op: "decoder",
            node: out,
        })
    }
}

/// Evaluate the transition network and materialize the local dynamics.
/// The returned A is `I + sum_i v_i r_i^T` with the perturbation rescaled
/// whenever the matrix-determinant-lemma value falls below the floor.
pub fn transition_params(
    z_bar: &[f64],
    params: &ModelParams,
) -> Result<TransitionParams, ModelError> {
    let h = &params.hyper;
    let d = h.latent_dim;
    if z_bar.len() != d {
        return Err(ModelError::ShapeMismatch(format!(
            "z_bar has length {}, expected {}",
            z_bar.len(),
            d
        )));
    }
    let raw = transition_net_raw(z_bar, params)?;
    let rank = h.trans_rank;
    // Columns v_i and rows r_i of the perturbation.
    let vs: Vec<&[f64]> = (0..rank).map(|i| &raw[i * d..(i + 1) * d]).collect();
    let rs: Vec<&[f64]> = (0..rank)
        .map(|i| &raw[(rank + i) * d..(rank + i + 1) * d])
        .collect();
    let alpha = perturbation_guard(&vs, &rs, h.det_floor);
    #[allow(non_snake_case)]
    let mut A = Mat::identity(d);
    for i in 0..rank {
        for r in 0..d {
            for c in 0..d {
                *A.at_mut(r, c) += alpha * vs[i][r] * rs[i][c];
            }
        }
    }
    let b_off = 2 * rank * d;
    #[allow(non_snake_case)]
    let B = Mat::from_rows(d, ACTION_DIM, raw[b_off..b_off + d * ACTION_DIM].to_vec());
    let c = raw[b_off + d * ACTION_DIM..].to_vec();
    Ok(TransitionParams { A, B, c })
}

fn transition_net_raw(z_bar: &[f64], params: &ModelParams) -> Result<Vec<f64>, ModelError> {
    let mut g = ModelGraph::new(params);
    let z = g.tape.constant(z_bar.to_vec());
    let hid = g.dense("trans.fc1", z);
    let hid = g.tape.tanh(hid);
    let hid = g.dense("trans.fc2", hid);
    let hid = g.tape.tanh(hid);
    let out = g.dense("trans.head", hid);
    let vals = g.tape.value(out);
    if vals.iter().all(|v| v.is_finite()) {
        Ok(vals.to_vec())
    } else {
        Err(ModelError::NonFinite {
            op: "transition net",
            node: out,
        })
    }
}

/// Scale factor for the identity perturbation so |det A| stays at or above
/// the floor. Rank one has the closed form used on the tape; higher ranks
/// bisect on the scale.
fn perturbation_guard(vs: &[&[f64]], rs: &[&[f64]], det_floor: f64) -> f64 {
    let det_at = |alpha: f64| -> f64 {
        let rank = vs.len();
        let mut g = Mat::identity(rank);
        for i in 0..rank {
            for j in 0..rank {
                *g.at_mut(i, j) += alpha * math::dot(rs[i], vs[j]);
            }
        }
        g.determinant()
    };
    if vs.len() == 1 {
        let g0 = 1.0 + math::dot(rs[0], vs[0]);
        return crate::autodiff::guard_scale_value(g0, det_floor);
    }
    if math::abs(det_at(1.0)) >= det_floor {
        return 1.0;
    }
    let mut lo = 0.0;
    let mut hi = 1.0;
    for _ in 0..64 {
        let mid = 0.5 * (lo + hi);
        if math::abs(det_at(mid)) >= det_floor {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

/// `A z + B u + c`.
pub fn forward_transition(z: &[f64], u: &[f64], tp: &TransitionParams) -> Vec<f64> {
    let mut out = tp.A.matvec(z);
    let bu = tp.B.matvec(u);
    for i in 0..out.len() {
        out[i] += bu[i] + tp.c[i];
    }
    out
}

/// Result of inverting the local dynamics.
#[derive(Debug, Clone, PartialEq)]
pub struct InverseOutcome {
    pub z: Vec<f64>,
    /// Set when the condition estimate of A exceeds the heuristic bound
    /// `1 / det_floor`; the solve result is still returned.
    pub ill_conditioned: bool,
}

/// `A^{-1} (z_next - B u - c)`, the exact inverse of [`forward_transition`].
/// `det_floor` feeds the conditioning diagnostic only; invertibility is
/// structural.
pub fn inverse_transition(
    z_next: &[f64],
    u: &[f64],
    tp: &TransitionParams,
    det_floor: f64,
) -> Result<InverseOutcome, ModelError> {
    let bu = tp.B.matvec(u);
    let m: Vec<f64> = z_next
        .iter()
        .zip(&bu)
        .zip(&tp.c)
        .map(|((zn, b), c)| zn - b - c)
        .collect();
    let z = tp
        .A
        .solve(&m)
        .ok_or_else(|| ModelError::ShapeMismatch("singular transition matrix".into()))?;
    let ill_conditioned = tp.A.condition_estimate() > 1.0 / det_floor;
    Ok(InverseOutcome { z, ill_conditioned })
}
