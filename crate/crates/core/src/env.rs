//! A small dSprites-style gridworld.
//!
//! One shape (square, ellipse or heart) lives on an 8-pixel lattice inside
//! a 64×64 reference image. Each action moves it 8 pixels. The episode ends
//! when the shape crosses the bottom line (`y ≥ 32`) or after `max_cycles`
//! actions. Squares pay off towards the left corner and the other shapes
//! towards the right one.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

/// Side of the reference image all geometry is expressed in.
pub const REFERENCE_SIZE: usize = 64;
/// Pixels moved per action.
pub const MOVE_STEP: i32 = 8;
/// Largest lattice coordinate (the lattice is `0, 8, ..., 56`).
pub const MAX_POS: i32 = 56;
/// Crossing this row ends the episode.
pub const BOTTOM_LINE: i32 = 32;
/// Half the side of a shape's bounding box, in reference pixels.
pub const SHAPE_HALF_SIZE: f64 = 8.0;
pub const NUM_ACTIONS: usize = 4;
pub const SUPPORTED_RESOLUTIONS: [usize; 4] = [8, 16, 32, 64];

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("episode is finished; call reset first")]
    EpisodeFinished,
    #[error("unsupported resolution {0} (expected one of 8, 16, 32, 64)")]
    Resolution(usize),
    #[error("invalid environment config: {0}")]
    Config(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Square,
    Ellipse,
    Heart,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Ellipse, Shape::Heart];

    /// Whether the reference-pixel offset `(dx, dy)` from the shape's centre
    /// is covered. `dy` grows downwards.
    fn covers(self, dx: f64, dy: f64) -> bool {
        let r = SHAPE_HALF_SIZE;
        match self {
            Shape::Square => dx.abs() < r && dy.abs() < r,
            Shape::Ellipse => dx * dx + dy * dy < r * r,
            Shape::Heart => {
                let (u, v) = (dx / r, dy / r);
                let lobe = |cx: f64| (u - cx).powi(2) + (v + 0.35).powi(2) < 0.25;
                let point = (-0.35..1.0).contains(&v) && u.abs() < (1.0 - v) / 1.35;
                lobe(-0.5) || lobe(0.5) || point
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
}

impl Action {
    pub const ALL: [Action; 4] = [Action::Up, Action::Down, Action::Left, Action::Right];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Self::ALL.get(i).copied()
    }

    fn delta(self) -> (i32, i32) {
        match self {
            Action::Up => (0, -MOVE_STEP),
            Action::Down => (0, MOVE_STEP),
            Action::Left => (-MOVE_STEP, 0),
            Action::Right => (MOVE_STEP, 0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub resolution: usize,
    pub frame_stack: usize,
    pub max_cycles: u32,
    /// Falls back to the training seed when absent.
    pub seed: Option<u64>,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            resolution: 16,
            frame_stack: 3,
            max_cycles: 50,
            seed: None,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        if !SUPPORTED_RESOLUTIONS.contains(&self.resolution) {
            return Err(EnvError::Resolution(self.resolution));
        }
        if self.frame_stack == 0 {
            return Err(EnvError::Config("frame_stack must be at least 1".into()));
        }
        if self.max_cycles == 0 {
            return Err(EnvError::Config("max_cycles must be at least 1".into()));
        }
        Ok(())
    }

    /// Flattened observation width.
    pub fn obs_dim(&self) -> usize {
        self.resolution * self.resolution * self.frame_stack
    }

    pub fn frame_dim(&self) -> usize {
        self.resolution * self.resolution
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvState {
    pub shape: Shape,
    /// Lattice coordinates in reference pixels; the shape is centred at
    /// `(x + 4, y + 4)`.
    pub x: i32,
    pub y: i32,
    pub cycle_count: u32,
}

/// A stack of binary frames, oldest first.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observation {
    resolution: usize,
    frame_stack: usize,
    pixels: Vec<u8>,
}

impl Observation {
    pub fn from_frames<'a>(resolution: usize, frames: impl IntoIterator<Item = &'a [u8]>) -> Self {
        let mut pixels = Vec::new();
        let mut n = 0;
        for f in frames {
            debug_assert_eq!(f.len(), resolution * resolution);
            pixels.extend_from_slice(f);
            n += 1;
        }
        Self {
            resolution,
            frame_stack: n,
            pixels,
        }
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn frame_stack(&self) -> usize {
        self.frame_stack
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn frame(&self, i: usize) -> &[u8] {
        let n = self.resolution * self.resolution;
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn latest_frame(&self) -> &[u8] {
        self.frame(self.frame_stack - 1)
    }

    pub fn dim(&self) -> usize {
        self.pixels.len()
    }

    /// Appends the flattened pixels as `f64` to `out`.
    pub fn extend_f64(&self, out: &mut Vec<f64>) {
        out.extend(self.pixels.iter().map(|&p| f64::from(p)));
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub observation: Observation,
    pub reward: f64,
    pub done: bool,
}

/// Terminal reward: corner-linear on crossing, −1 on timeout, else 0.
/// Clipped to `[-1, 1]`.
pub fn compute_reward(state: &EnvState, crossed: bool, max_cycles: u32) -> f64 {
    let x = f64::from(state.x);
    let r = if crossed {
        match state.shape {
            Shape::Square => (15.5 - x) / 16.0,
            Shape::Ellipse | Shape::Heart => (x - 15.5) / 16.0,
        }
    } else if state.cycle_count >= max_cycles {
        -1.0
    } else {
        0.0
    };
    r.clamp(-1.0, 1.0)
}

fn check_resolution(resolution: usize) -> Result<usize, EnvError> {
    if SUPPORTED_RESOLUTIONS.contains(&resolution) {
        Ok(REFERENCE_SIZE / resolution)
    } else {
        Err(EnvError::Resolution(resolution))
    }
}

fn covered(state: &EnvState, px: usize, py: usize) -> bool {
    let cx = f64::from(state.x) + f64::from(MOVE_STEP) / 2.0;
    let cy = f64::from(state.y) + f64::from(MOVE_STEP) / 2.0;
    state.shape.covers(px as f64 + 0.5 - cx, py as f64 + 0.5 - cy)
}

/// Rasterizes the state at `resolution`. A pixel is on when at least half
/// of the reference pixels it spans are covered by the shape.
pub fn render(state: &EnvState, resolution: usize) -> Result<Vec<u8>, EnvError> {
    let scale = check_resolution(resolution)?;
    let mut img = vec![0u8; resolution * resolution];
    for row in 0..resolution {
        for col in 0..resolution {
            let mut hits = 0;
            for sy in 0..scale {
                for sx in 0..scale {
                    if covered(state, col * scale + sx, row * scale + sy) {
                        hits += 1;
                    }
                }
            }
            img[row * resolution + col] = u8::from(2 * hits >= scale * scale);
        }
    }
    Ok(img)
}

/// Block-majority downsampling of a 64×64 binary image.
pub fn downsample(reference: &[u8], resolution: usize) -> Result<Vec<u8>, EnvError> {
    let scale = check_resolution(resolution)?;
    let mut out = vec![0u8; resolution * resolution];
    for (i, o) in out.iter_mut().enumerate() {
        let (row, col) = (i / resolution, i % resolution);
        let mut hits = 0usize;
        for sy in 0..scale {
            let base = (row * scale + sy) * REFERENCE_SIZE + col * scale;
            hits += reference[base..base + scale].iter().map(|&p| usize::from(p)).sum::<usize>();
        }
        *o = u8::from(2 * hits >= scale * scale);
    }
    Ok(out)
}

/// The environment. Independent instances may live on different threads.
#[derive(Clone, Debug)]
pub struct DSpritesEnv {
    config: EnvConfig,
    state: EnvState,
    frames: VecDeque<Vec<u8>>,
    done: bool,
}

impl DSpritesEnv {
    pub fn new(config: EnvConfig) -> Result<Self, EnvError> {
        config.validate()?;
        Ok(Self {
            config,
            state: EnvState {
                shape: Shape::Square,
                x: 0,
                y: 0,
                cycle_count: 0,
            },
            frames: VecDeque::new(),
            done: true,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Starts an episode from a uniformly drawn shape and lattice position
    /// above the bottom line.
    pub fn reset(&mut self, rng: &mut impl Rng) -> Observation {
        let shape = Shape::ALL[rng.random_range(0..Shape::ALL.len())];
        let x = rng.random_range(0..=MAX_POS / MOVE_STEP) * MOVE_STEP;
        let y = rng.random_range(0..BOTTOM_LINE / MOVE_STEP) * MOVE_STEP;
        self.reset_to(EnvState {
            shape,
            x,
            y,
            cycle_count: 0,
        })
    }

    /// Starts an episode from an explicit state.
    pub fn reset_to(&mut self, state: EnvState) -> Observation {
        self.state = state;
        let frame = render(&state, self.config.resolution).expect("validated resolution");
        self.frames = std::iter::repeat_n(frame, self.config.frame_stack).collect();
        self.done = false;
        self.observation()
    }

    pub fn observation(&self) -> Observation {
        Observation::from_frames(self.config.resolution, self.frames.iter().map(Vec::as_slice))
    }

    pub fn step(&mut self, action: Action) -> Result<StepResult, EnvError> {
        if self.done {
            return Err(EnvError::EpisodeFinished);
        }
        let (dx, dy) = action.delta();
        self.state.x = (self.state.x + dx).clamp(0, MAX_POS);
        self.state.y = (self.state.y + dy).clamp(0, MAX_POS);
        self.state.cycle_count += 1;
        let crossed = self.state.y >= BOTTOM_LINE;
        let reward = compute_reward(&self.state, crossed, self.config.max_cycles);
        self.done = crossed || self.state.cycle_count >= self.config.max_cycles;

        let frame = render(&self.state, self.config.resolution).expect("validated resolution");
        self.frames.pop_front();
        self.frames.push_back(frame);
        Ok(StepResult {
            observation: self.observation(),
            reward,
            done: self.done,
        })
    }
}
