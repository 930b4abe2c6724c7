use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::envs::{check_action, horizontal, vertical, Env, EnvStepResult, RawObservation, NATIVE_SIZE};
use crate::error::{Error, Result};

const BLACK: [u8; 3] = [0, 0, 0];
const WHITE: [u8; 3] = [236, 236, 236];

struct Canvas(Vec<u8>);

impl Canvas {
    fn new(bg: [u8; 3]) -> Self {
        Canvas(bg.iter().copied().cycle().take(NATIVE_SIZE * NATIVE_SIZE * 3).collect())
    }

    fn rect(&mut self, x: i32, y: i32, w: i32, h: i32, rgb: [u8; 3]) {
        let n = NATIVE_SIZE as i32;
        for yy in y.max(0)..(y + h).min(n) {
            for xx in x.max(0)..(x + w).min(n) {
                let i = ((yy * n + xx) * 3) as usize;
                self.0[i..i + 3].copy_from_slice(&rgb);
            }
        }
    }

    fn finish(self) -> RawObservation {
        RawObservation { height: NATIVE_SIZE, width: NATIVE_SIZE, data: self.0 }
    }
}

fn finished(name: &str) -> Error {
    Error::Protocol(format!("{name}: step called on a finished episode; call reset first"))
}

macro_rules! state_io {
    () => {
        fn save_state(&self) -> Result<serde_json::Value> {
            serde_json::to_value(self).map_err(|e| Error::Config(e.to_string()))
        }

        fn load_state(&mut self, state: &serde_json::Value) -> Result<()> {
            *self = Self::deserialize(state).map_err(|e| Error::Config(format!("{}: {e}", self.name())))?;
            Ok(())
        }
    };
}

/// Breakout stand-in: catch falling bricks with a paddle; a miss ends the
/// episode.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MiniCatch {
    rng: ChaCha8Rng,
    ball_col: i32,
    ball_row: i32,
    paddle: i32,
    catches: u32,
    terminal: bool,
}

impl MiniCatch {
    pub const COLUMNS: i32 = 7;
    pub const ROWS: i32 = 7;
    pub const MAX_CATCHES: u32 = 20;
    const CELL: i32 = 12;

    pub fn new(seed: u64) -> Self {
        let mut env = Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            ball_col: 0,
            ball_row: 0,
            paddle: Self::COLUMNS / 2,
            catches: 0,
            terminal: true,
        };
        env.reset();
        env
    }

    pub fn ball_column(&self) -> i32 {
        self.ball_col
    }

    pub fn paddle_column(&self) -> i32 {
        self.paddle
    }

    fn spawn(&mut self) {
        self.ball_col = self.rng.gen_range(0..Self::COLUMNS);
        self.ball_row = 0;
    }

    fn render(&self) -> RawObservation {
        let mut c = Canvas::new(BLACK);
        let cell = Self::CELL;
        c.rect(self.ball_col * cell + 2, self.ball_row * cell + 2, cell - 4, cell - 4, WHITE);
        c.rect(self.paddle * cell, Self::ROWS * cell - 5, cell, 5, [92, 186, 92]);
        c.finish()
    }
}

impl Env for MiniCatch {
    fn name(&self) -> &'static str {
        "minicatch"
    }

    fn reset(&mut self) -> RawObservation {
        self.paddle = Self::COLUMNS / 2;
        self.catches = 0;
        self.terminal = false;
        self.spawn();
        self.render()
    }

    fn step(&mut self, action: usize) -> Result<EnvStepResult> {
        check_action(action)?;
        if self.terminal {
            return Err(finished(self.name()));
        }
        self.paddle = (self.paddle + horizontal(action)).clamp(0, Self::COLUMNS - 1);
        self.ball_row += 1;
        let mut reward = 0.0;
        if self.ball_row == Self::ROWS - 1 {
            if self.ball_col == self.paddle {
                reward = 1.0;
                self.catches += 1;
                if self.catches >= Self::MAX_CATCHES {
                    self.terminal = true;
                } else {
                    self.spawn();
                }
            } else {
                self.terminal = true;
            }
        }
        Ok(EnvStepResult { observation: self.render(), reward, terminal: self.terminal })
    }

    fn is_terminal(&self) -> bool {
        self.terminal
    }

    state_io!();
}

/// Pong stand-in: the agent's paddle on the right against a scripted
/// opponent that follows the ball with probability 0.7 per step. First to
/// five points ends the episode.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MiniPong {
    rng: ChaCha8Rng,
    ball: (i32, i32),
    vel: (i32, i32),
    agent: i32,
    opponent: i32,
    score: (u32, u32),
    steps: u32,
    terminal: bool,
}

impl MiniPong {
    pub const GRID: i32 = 14;
    pub const PADDLE: i32 = 3;
    pub const POINTS: u32 = 5;
    pub const MAX_STEPS: u32 = 1500;
    pub const OPPONENT_SKILL: f64 = 0.7;
    const CELL: i32 = 6;

    pub fn new(seed: u64) -> Self {
        let mut env = Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            ball: (0, 0),
            vel: (1, 0),
            agent: 0,
            opponent: 0,
            score: (0, 0),
            steps: 0,
            terminal: true,
        };
        env.reset();
        env
    }

    /// `(agent, opponent)` points.
    pub fn score(&self) -> (u32, u32) {
        self.score
    }

    fn serve(&mut self) {
        let g = Self::GRID;
        self.ball = (g / 2, self.rng.gen_range(2..g - 2));
        self.vel = (if self.rng.gen_bool(0.5) { 1 } else { -1 }, if self.rng.gen_bool(0.5) { 1 } else { -1 });
    }

    fn covers(paddle: i32, y: i32) -> Option<i32> {
        let off = y - paddle;
        (0..Self::PADDLE).contains(&off).then_some(off - 1)
    }

    fn render(&self) -> RawObservation {
        let mut c = Canvas::new(BLACK);
        let cell = Self::CELL;
        let g = Self::GRID;
        c.rect(0, self.opponent * cell, cell, Self::PADDLE * cell, [213, 130, 74]);
        c.rect((g - 1) * cell, self.agent * cell, cell, Self::PADDLE * cell, [92, 186, 92]);
        c.rect(self.ball.0 * cell, self.ball.1 * cell, cell, cell, WHITE);
        c.finish()
    }
}

impl Env for MiniPong {
    fn name(&self) -> &'static str {
        "minipong"
    }

    fn reset(&mut self) -> RawObservation {
        let mid = (Self::GRID - Self::PADDLE) / 2;
        self.agent = mid;
        self.opponent = mid;
        self.score = (0, 0);
        self.steps = 0;
        self.terminal = false;
        self.serve();
        self.render()
    }

    fn step(&mut self, action: usize) -> Result<EnvStepResult> {
        check_action(action)?;
        if self.terminal {
            return Err(finished(self.name()));
        }
        let g = Self::GRID;
        let top = g - Self::PADDLE;
        self.steps += 1;
        self.agent = (self.agent + vertical(action)).clamp(0, top);
        if self.rng.gen_bool(Self::OPPONENT_SKILL) {
            let centre = self.opponent + 1;
            self.opponent = (self.opponent + (self.ball.1 - centre).signum()).clamp(0, top);
        }

        let (mut x, mut y) = self.ball;
        let (mut vx, mut vy) = self.vel;
        y += vy;
        if y < 0 {
            y = -y;
            vy = 1;
        } else if y > g - 1 {
            y = 2 * (g - 1) - y;
            vy = -1;
        }
        x += vx;
        let mut reward = 0.0;
        if x == g - 1 {
            match Self::covers(self.agent, y) {
                Some(dy) => {
                    x = g - 3;
                    vx = -1;
                    vy = if dy == 0 { vy } else { dy };
                }
                None => {
                    reward = -1.0;
                    self.score.1 += 1;
                }
            }
        } else if x == 0 {
            match Self::covers(self.opponent, y) {
                Some(dy) => {
                    x = 2;
                    vx = 1;
                    vy = if dy == 0 { vy } else { dy };
                }
                None => {
                    reward = 1.0;
                    self.score.0 += 1;
                }
            }
        }
        if reward != 0.0 {
            self.serve();
        } else {
            self.ball = (x, y);
            self.vel = (vx, vy);
        }
        self.terminal =
            self.score.0 >= Self::POINTS || self.score.1 >= Self::POINTS || self.steps >= Self::MAX_STEPS;
        Ok(EnvStepResult { observation: self.render(), reward, terminal: self.terminal })
    }

    fn is_terminal(&self) -> bool {
        self.terminal
    }

    state_io!();
}

/// Enduro stand-in: a three-lane road with oncoming traffic; +1 for every car
/// that passes without a collision. Episodes last a fixed number of steps.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MiniEnduro {
    rng: ChaCha8Rng,
    lane: i32,
    /// `(lane, row)` of every other car.
    cars: Vec<(i32, i32)>,
    steps: u32,
    terminal: bool,
}

impl MiniEnduro {
    pub const LANES: i32 = 3;
    pub const ROWS: i32 = 12;
    pub const HORIZON: u32 = 400;
    pub const SPAWN_PROB: f64 = 0.25;

    pub fn new(seed: u64) -> Self {
        let mut env = Self { rng: ChaCha8Rng::seed_from_u64(seed), lane: 1, cars: Vec::new(), steps: 0, terminal: true };
        env.reset();
        env
    }

    fn render(&self) -> RawObservation {
        let mut c = Canvas::new([90, 90, 90]);
        let lane_w = NATIVE_SIZE as i32 / Self::LANES;
        let row_h = NATIVE_SIZE as i32 / Self::ROWS;
        for l in 1..Self::LANES {
            c.rect(l * lane_w - 1, 0, 2, NATIVE_SIZE as i32, [200, 200, 80]);
        }
        for &(l, r) in &self.cars {
            c.rect(l * lane_w + 6, r * row_h, lane_w - 12, row_h, [200, 40, 40]);
        }
        c.rect(self.lane * lane_w + 6, (Self::ROWS - 1) * row_h, lane_w - 12, row_h, [60, 120, 230]);
        c.finish()
    }
}

impl Env for MiniEnduro {
    fn name(&self) -> &'static str {
        "minienduro"
    }

    fn reset(&mut self) -> RawObservation {
        self.lane = Self::LANES / 2;
        self.cars.clear();
        self.steps = 0;
        self.terminal = false;
        self.render()
    }

    fn step(&mut self, action: usize) -> Result<EnvStepResult> {
        check_action(action)?;
        if self.terminal {
            return Err(finished(self.name()));
        }
        self.steps += 1;
        self.lane = (self.lane + horizontal(action)).clamp(0, Self::LANES - 1);
        let mut reward = 0.0;
        let lane = self.lane;
        self.cars.retain_mut(|(l, r)| {
            *r += 1;
            if *r == Self::ROWS - 1 {
                if *l != lane {
                    reward += 1.0;
                }
                false
            } else {
                true
            }
        });
        if self.rng.gen_bool(Self::SPAWN_PROB) {
            let l = self.rng.gen_range(0..Self::LANES);
            if !self.cars.iter().any(|&(_, r)| r < 2) {
                self.cars.push((l, 0));
            }
        }
        self.terminal = self.steps >= Self::HORIZON;
        Ok(EnvStepResult { observation: self.render(), reward, terminal: self.terminal })
    }

    fn is_terminal(&self) -> bool {
        self.terminal
    }

    state_io!();
}
