//! Ground-truth planar navigation system.
//!
//! An agent moves in a bounded arena with six circular obstacles under
//! single-integrator dynamics with optional isotropic state noise. The system
//! is observed only through top-down grayscale renders; two render styles
//! (agent shapes) produce the two observation sets. The true state is used by
//! the simulator and by evaluation, never by the model.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::rng::{self, Stream};

/// Rejection budget for free-state sampling before a config is declared
/// degenerate.
const MAX_SAMPLE_REJECTIONS: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AgentShape {
    Disc,
    Square,
    Cross,
    Triangle,
}

impl AgentShape {
    pub fn name(&self) -> &'static str {
        match self {
            AgentShape::Disc => "disc",
            AgentShape::Square => "square",
            AgentShape::Cross => "cross",
            AgentShape::Triangle => "triangle",
        }
    }

    pub fn parse(s: &str) -> Option<AgentShape> {
        match s {
            "disc" => Some(AgentShape::Disc),
            "square" => Some(AgentShape::Square),
            "cross" => Some(AgentShape::Cross),
            "triangle" => Some(AgentShape::Triangle),
            _ => None,
        }
    }

    /// Shape membership test for a point at offset `(dx, dy)` from the agent
    /// center, in pixels. All shapes are centered on their centroid and sized
    /// from the agent radius so that collision geometry stays shape-agnostic.
    fn contains(&self, dx: f64, dy: f64, radius: f64) -> bool {
        match self {
            AgentShape::Disc => dx * dx + dy * dy <= radius * radius,
            AgentShape::Square => {
                // Same area as the disc: side = radius * sqrt(pi).
                let half = 0.5 * radius * math::sqrt(core::f64::consts::PI);
                math::abs(dx) <= half && math::abs(dy) <= half
            }
            AgentShape::Cross => {
                let halfw = 0.25 * radius;
                let halfl = 1.25 * radius;
                (math::abs(dx) <= halfw && math::abs(dy) <= halfl)
                    || (math::abs(dy) <= halfw && math::abs(dx) <= halfl)
            }
            AgentShape::Triangle => {
                // Equilateral triangle, centroid at the origin, apex up
                // (negative dy is up in image coordinates).
                let r = 1.4 * radius;
                let v = [
                    (0.0, -r),
                    (r * math::cos(core::f64::consts::PI / 6.0), 0.5 * r),
                    (-r * math::cos(core::f64::consts::PI / 6.0), 0.5 * r),
                ];
                let sign = |a: (f64, f64), b: (f64, f64)| -> f64 {
                    (b.0 - a.0) * (dy - a.1) - (b.1 - a.1) * (dx - a.0)
                };
                let d0 = sign(v[0], v[1]);
                let d1 = sign(v[1], v[2]);
                let d2 = sign(v[2], v[0]);
                (d0 >= 0.0 && d1 >= 0.0 && d2 >= 0.0) || (d0 <= 0.0 && d1 <= 0.0 && d2 <= 0.0)
            }
        }
    }
}

/// Configuration of the planar system: arena, obstacle layout, agent
/// geometry, render styles for the two observation sets, and dynamics noise.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvConfig {
    pub arena_size: usize,
    pub obstacle_centers: Vec<[f64; 2]>,
    pub obstacle_radius: f64,
    pub agent_radius: f64,
    pub shape_x: AgentShape,
    pub shape_y: AgentShape,
    pub u_max: f64,
    pub state_noise_std: f64,
}

impl Default for EnvConfig {
    /// Two columns of three obstacles, disc agent for set X and an
    /// equal-area square for set Y.
    fn default() -> Self {
        EnvConfig {
            arena_size: 40,
            obstacle_centers: vec![
                [13.3, 10.0],
                [13.3, 20.0],
                [13.3, 30.0],
                [26.7, 10.0],
                [26.7, 20.0],
                [26.7, 30.0],
            ],
            obstacle_radius: 2.5,
            agent_radius: 2.0,
            shape_x: AgentShape::Disc,
            shape_y: AgentShape::Square,
            u_max: 3.0,
            state_noise_std: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EnvError {
    InvalidConfig(String),
    InvalidState(String),
    SamplingExhausted,
}

impl core::fmt::Display for EnvError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            EnvError::InvalidConfig(msg) => write!(f, "invalid environment config: {}", msg),
            EnvError::InvalidState(msg) => write!(f, "invalid state: {}", msg),
            EnvError::SamplingExhausted => {
                write!(f, "free-state sampling exhausted its rejection budget")
            }
        }
    }
}

impl core::error::Error for EnvError {}

impl EnvConfig {
    /// Margin box the agent center must stay inside.
    pub fn margin(&self) -> (f64, f64) {
        (self.agent_radius, self.arena_size as f64 - self.agent_radius)
    }

    /// Validate the standard-experiment invariants. Degenerate configs (no
    /// obstacles, overlapping obstacles) can still be constructed directly
    /// for tests and sanity baselines; the experiment path goes through here.
    pub fn validate(&self) -> Result<(), EnvError> {
        if self.arena_size == 0 {
            return Err(EnvError::InvalidConfig("arena_size must be positive".into()));
        }
        if self.obstacle_centers.len() != 6 {
            return Err(EnvError::InvalidConfig(format!(
                "expected exactly six obstacles, got {}",
                self.obstacle_centers.len()
            )));
        }
        let n = self.arena_size as f64;
        for (i, c) in self.obstacle_centers.iter().enumerate() {
            if c[0] - self.obstacle_radius < 0.0
                || c[0] + self.obstacle_radius > n
                || c[1] - self.obstacle_radius < 0.0
                || c[1] + self.obstacle_radius > n
            {
                return Err(EnvError::InvalidConfig(format!(
                    "obstacle {} not fully inside the arena",
                    i
                )));
            }
        }
        for i in 0..self.obstacle_centers.len() {
            for j in (i + 1)..self.obstacle_centers.len() {
                let a = self.obstacle_centers[i];
                let b = self.obstacle_centers[j];
                if math::hypot(a[0] - b[0], a[1] - b[1]) < 2.0 * self.obstacle_radius {
                    return Err(EnvError::InvalidConfig(format!(
                        "obstacles {} and {} overlap",
                        i, j
                    )));
                }
            }
        }
        if self.shape_x == self.shape_y {
            return Err(EnvError::InvalidConfig(
                "shape_x and shape_y must differ".into(),
            ));
        }
        if !(self.u_max > 0.0) {
            return Err(EnvError::InvalidConfig("u_max must be positive".into()));
        }
        if !(self.state_noise_std >= 0.0) {
            return Err(EnvError::InvalidConfig(
                "state_noise_std must be non-negative".into(),
            ));
        }
        let (lo, hi) = self.margin();
        if lo >= hi {
            return Err(EnvError::InvalidConfig(
                "agent radius leaves no free margin box".into(),
            ));
        }
        Ok(())
    }
}

/// True 2-D agent position, hidden from the model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanarState {
    pub position: [f64; 2],
}

impl PlanarState {
    pub fn new(x: f64, y: f64) -> Self {
        PlanarState { position: [x, y] }
    }
}

/// Two-dimensional action; each component bounded by the config's `u_max`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActionInput {
    pub u: [f64; 2],
}

impl ActionInput {
    pub fn new(ux: f64, uy: f64) -> Self {
        ActionInput { u: [ux, uy] }
    }

    pub fn clamped(ux: f64, uy: f64, u_max: f64) -> Self {
        ActionInput {
            u: [math::clamp(ux, -u_max, u_max), math::clamp(uy, -u_max, u_max)],
        }
    }

    pub fn in_bounds(&self, u_max: f64) -> bool {
        math::abs(self.u[0]) <= u_max && math::abs(self.u[1]) <= u_max
    }
}

/// Grayscale image with pixel values in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn zeros(width: usize, height: usize) -> Self {
        Image {
            width,
            height,
            pixels: vec![0.0; width * height],
        }
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.pixels[row * self.width + col] = v;
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    /// Intensity-weighted centroid `(x, y)` of all lit pixels, `None` if the
    /// image is entirely dark.
    pub fn centroid(&self) -> Option<[f64; 2]> {
        let mut wsum = 0.0;
        let mut cx = 0.0;
        let mut cy = 0.0;
        for r in 0..self.height {
            for c in 0..self.width {
                let v = self.at(r, c);
                if v > 0.0 {
                    wsum += v;
                    cx += v * (c as f64 + 0.5);
                    cy += v * (r as f64 + 0.5);
                }
            }
        }
        if wsum > 0.0 {
            Some([cx / wsum, cy / wsum])
        } else {
            None
        }
    }
}

/// Is the position inside the margin box and clear of every obstacle?
/// The clearance condition is closed: touching exactly at
/// `obstacle_radius + agent_radius` is still valid.
pub fn is_valid(state: &PlanarState, config: &EnvConfig) -> bool {
    let (lo, hi) = config.margin();
    let [x, y] = state.position;
    if !(x >= lo && x <= hi && y >= lo && y <= hi) {
        return false;
    }
    let min_dist = config.obstacle_radius + config.agent_radius;
    for c in &config.obstacle_centers {
        if math::hypot(x - c[0], y - c[1]) < min_dist {
            return false;
        }
    }
    true
}

/// One step of the true dynamics: move by the action plus isotropic Gaussian
/// noise, clip to the margin box, and reject the whole move on collision.
pub fn step(
    state: &PlanarState,
    action: &ActionInput,
    config: &EnvConfig,
    rng: &mut Stream,
) -> Result<PlanarState, EnvError> {
    if !is_valid(state, config) {
        return Err(EnvError::InvalidState(format!(
            "step from invalid state ({}, {})",
            state.position[0], state.position[1]
        )));
    }
    let (lo, hi) = config.margin();
    let mut candidate = [0.0; 2];
    for i in 0..2 {
        let noise = if config.state_noise_std > 0.0 {
            config.state_noise_std * rng::normal(rng)
        } else {
            0.0
        };
        candidate[i] = math::clamp(state.position[i] + action.u[i] + noise, lo, hi);
    }
    let next = PlanarState { position: candidate };
    if is_valid(&next, config) {
        Ok(next)
    } else {
        Ok(*state)
    }
}

/// Nearest pixel-center to a continuous coordinate, as a pixel index.
fn snap_index(coord: f64, n: usize) -> i64 {
    let idx = math::floor(coord) as i64;
    idx.clamp(0, n as i64 - 1)
}

/// Render the six obstacles only. Useful for isolating agent pixels.
pub fn render_obstacles(config: &EnvConfig) -> Image {
    let n = config.arena_size;
    let mut img = Image::zeros(n, n);
    let r2 = config.obstacle_radius * config.obstacle_radius;
    for row in 0..n {
        for col in 0..n {
            let px = col as f64 + 0.5;
            let py = row as f64 + 0.5;
            for c in &config.obstacle_centers {
                let dx = px - c[0];
                let dy = py - c[1];
                if dx * dx + dy * dy <= r2 {
                    img.set(row, col, 1.0);
                    break;
                }
            }
        }
    }
    img
}

/// Top-down binary render: obstacles as filled discs, the agent as the
/// requested shape. The agent center is snapped to the nearest pixel center
/// before stenciling, so the agent mask is a fixed pattern translated across
/// the grid and the lit-pixel count does not depend on sub-pixel position.
pub fn render(state: &PlanarState, shape: AgentShape, config: &EnvConfig) -> Image {
    let n = config.arena_size;
    let mut img = render_obstacles(config);
    let cx = snap_index(state.position[0], n);
    let cy = snap_index(state.position[1], n);
    let reach = (config.agent_radius * 1.5) as i64 + 2;
    for dy in -reach..=reach {
        for dx in -reach..=reach {
            if !shape.contains(dx as f64, dy as f64, config.agent_radius) {
                continue;
            }
            let col = cx + dx;
            let row = cy + dy;
            if col >= 0 && col < n as i64 && row >= 0 && row < n as i64 {
                img.set(row as usize, col as usize, 1.0);
            }
        }
    }
    img
}

/// Rejection-sample a state uniformly over the collision-free region.
pub fn sample_free_state(config: &EnvConfig, rng: &mut Stream) -> Result<PlanarState, EnvError> {
    let (lo, hi) = config.margin();
    for _ in 0..MAX_SAMPLE_REJECTIONS {
        let s = PlanarState::new(rng::uniform_in(rng, lo, hi), rng::uniform_in(rng, lo, hi));
        if is_valid(&s, config) {
            return Ok(s);
        }
    }
    Err(EnvError::SamplingExhausted)
}

/// Uniform action on the `[-u_max, u_max]` box.
pub fn sample_action(config: &EnvConfig, rng: &mut Stream) -> ActionInput {
    ActionInput::new(
        rng::uniform_in(rng, -config.u_max, config.u_max),
        rng::uniform_in(rng, -config.u_max, config.u_max),
    )
}

/// Centroid of the agent pixels only (lit pixels not covered by the
/// obstacle-only render).
pub fn agent_centroid(img: &Image, config: &EnvConfig) -> Option<[f64; 2]> {
    let obstacles = render_obstacles(config);
    let mut agent_only = Image::zeros(img.width, img.height);
    for i in 0..img.pixels.len() {
        if img.pixels[i] > 0.5 && obstacles.pixels[i] <= 0.5 {
            agent_only.pixels[i] = img.pixels[i];
        }
    }
    agent_only.centroid()
}
