//! Deterministic mini-games with an emulator-shaped interface, plus the
//! frame preprocessing that turns their RGB output into network input.

mod games;
mod preprocess;

pub use games::{MiniCatch, MiniEnduro, MiniPong};
pub use preprocess::{bytes_to_unit, luma, resize_bilinear, FrameStack, Preprocessor};

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Size of the shared action space.
pub const ACTION_COUNT: usize = 18;

/// Native render extent of the built-in games.
pub const NATIVE_SIZE: usize = 84;

/// Registry names of the built-in games.
pub const ENV_NAMES: [&str; 3] = ["minipong", "minicatch", "minienduro"];

/// An RGB frame, row-major `[height, width, 3]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawObservation {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl RawObservation {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::dim("raw_observation", "pixel count", height * width * 3, data.len()));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        let data = rgb.iter().copied().cycle().take(height * width * 3).collect();
        Self { height, width, data }
    }

    /// Writes the frame as a binary PPM image.
    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        write!(f, "P6\n{} {}\n255\n", self.width, self.height)?;
        f.write_all(&self.data)?;
        f.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvStepResult {
    pub observation: RawObservation,
    pub reward: f32,
    pub terminal: bool,
}

pub trait Env: Send {
    fn name(&self) -> &'static str;

    /// Starts a new episode and returns its first frame.
    fn reset(&mut self) -> RawObservation;

    /// Advances one step. Stepping a finished episode is a protocol error.
    fn step(&mut self, action: usize) -> Result<EnvStepResult>;

    fn is_terminal(&self) -> bool;

    /// Complete internal state, including the game's random stream.
    fn save_state(&self) -> Result<serde_json::Value>;

    fn load_state(&mut self, state: &serde_json::Value) -> Result<()>;
}

/// Horizontal component of an action: -1 left, 0 none, +1 right.
pub fn horizontal(action: usize) -> i32 {
    match action {
        3 | 6 | 8 | 11 | 14 | 16 => 1,
        4 | 7 | 9 | 12 | 15 | 17 => -1,
        _ => 0,
    }
}

/// Vertical component of an action: -1 up, 0 none, +1 down.
pub fn vertical(action: usize) -> i32 {
    match action {
        2 | 6 | 7 | 10 | 14 | 15 => -1,
        5 | 8 | 9 | 13 | 16 | 17 => 1,
        _ => 0,
    }
}

pub(crate) fn check_action(action: usize) -> Result<()> {
    if action >= ACTION_COUNT {
        return Err(Error::dim("env_step", "action index", ACTION_COUNT, action));
    }
    Ok(())
}

/// Repeats each action `skip` times, summing rewards.
pub struct FrameSkip {
    inner: Box<dyn Env>,
    skip: usize,
}

impl FrameSkip {
    pub fn new(inner: Box<dyn Env>, skip: usize) -> Self {
        Self { inner, skip: skip.max(1) }
    }
}

impl Env for FrameSkip {
    fn name(&self) -> &'static str {
        self.inner.name()
    }

    fn reset(&mut self) -> RawObservation {
        self.inner.reset()
    }

    fn step(&mut self, action: usize) -> Result<EnvStepResult> {
        let mut total = 0.0;
        let mut last = self.inner.step(action)?;
        total += last.reward;
        for _ in 1..self.skip {
            if last.terminal {
                break;
            }
            last = self.inner.step(action)?;
            total += last.reward;
        }
        last.reward = total;
        Ok(last)
    }

    fn is_terminal(&self) -> bool {
        self.inner.is_terminal()
    }

    fn save_state(&self) -> Result<serde_json::Value> {
        self.inner.save_state()
    }

    fn load_state(&mut self, state: &serde_json::Value) -> Result<()> {
        self.inner.load_state(state)
    }
}

/// Builds a registered game seeded with `seed`.
pub fn make_env(name: &str, seed: u64, frame_skip: usize) -> Result<Box<dyn Env>> {
    let env: Box<dyn Env> = match name {
        "minipong" => Box::new(MiniPong::new(seed)),
        "minicatch" => Box::new(MiniCatch::new(seed)),
        "minienduro" => Box::new(MiniEnduro::new(seed)),
        other => return Err(Error::Config(format!("unknown environment `{other}`"))),
    };
    Ok(if frame_skip > 1 { Box::new(FrameSkip::new(env, frame_skip)) } else { env })
}
