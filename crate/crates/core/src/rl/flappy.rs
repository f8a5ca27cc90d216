//! A small deterministic FlappyBird clone rendered to an 84×84 binary frame.
//!
//! Integer physics: altitude is measured in pixels up from the floor. Action 0
//! lets gravity pull the bird down one more pixel per step each step, action 1
//! replaces the vertical velocity with a fixed upward impulse. Pipes scroll left
//! at a constant speed.

use std::io::{self, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::Tensor;

use super::{Environment, Step};

pub const SIZE: i32 = 84;
pub const BIRD: i32 = 6;
pub const BIRD_X: i32 = 20;
pub const PIPE_WIDTH: i32 = 10;
pub const PIPE_GAP: i32 = 30;
pub const PIPE_SPACING: i32 = 40;
const FIRST_PIPE_X: i32 = 50;
const SCROLL: i32 = 2;
const GRAVITY: i32 = 1;
const IMPULSE: i32 = 5;
const MAX_FALL: i32 = 8;
const START_ALTITUDE: i32 = (SIZE - BIRD) / 2;
const TOP: i32 = SIZE - BIRD;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pipe {
    /// Left edge, in pixels from the left of the frame.
    pub x: i32,
    /// Altitude of the gap center.
    pub gap_center: i32,
    pub passed: bool,
}

impl Pipe {
    fn blocks(&self, altitude_lo: i32, altitude_hi: i32) -> bool {
        let gap_lo = self.gap_center - PIPE_GAP / 2;
        let gap_hi = self.gap_center + PIPE_GAP / 2;
        altitude_lo < gap_lo || altitude_hi > gap_hi
    }
}

#[derive(Debug, Clone)]
pub struct FlappyEnv {
    altitude: i32,
    velocity: i32,
    pipes: Vec<Pipe>,
    rng: ChaCha8Rng,
    steps: usize,
    max_steps: usize,
    done: bool,
}

impl FlappyEnv {
    pub fn new(max_steps: usize) -> Self {
        let mut env = Self {
            altitude: START_ALTITUDE,
            velocity: 0,
            pipes: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(0),
            steps: 0,
            max_steps,
            done: false,
        };
        env.reset(0);
        env
    }

    pub fn altitude(&self) -> i32 {
        self.altitude
    }

    pub fn velocity(&self) -> i32 {
        self.velocity
    }

    pub fn pipes(&self) -> &[Pipe] {
        &self.pipes
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    fn spawn(&mut self, x: i32) {
        let margin = 8;
        let lo = PIPE_GAP / 2 + margin;
        let hi = SIZE - PIPE_GAP / 2 - margin;
        let gap_center = self.rng.random_range(lo..=hi);
        self.pipes.push(Pipe {
            x,
            gap_center,
            passed: false,
        });
    }

    fn collides(&self) -> bool {
        let (lo, hi) = (self.altitude, self.altitude + BIRD);
        self.pipes
            .iter()
            .any(|p| p.x < BIRD_X + BIRD && p.x + PIPE_WIDTH > BIRD_X && p.blocks(lo, hi))
    }

    /// Number of lit pixels the pipes contribute to the current frame.
    pub fn pipe_pixels(&self) -> usize {
        let frame = self.render_layers(false, true);
        frame.iter().filter(|&&v| v == 1.0).count()
    }

    pub fn render(&self) -> Tensor {
        Tensor::new(vec![1, SIZE as usize, SIZE as usize], self.render_layers(true, true)).expect("frame size")
    }

    fn render_layers(&self, bird: bool, pipes: bool) -> Vec<f64> {
        let n = SIZE as usize;
        let mut frame = vec![0.0; n * n];
        // Altitude a occupies frame row SIZE - 1 - a.
        let mut fill = |x0: i32, x1: i32, a0: i32, a1: i32| {
            for a in a0.max(0)..a1.min(SIZE) {
                let row = (SIZE - 1 - a) as usize;
                for x in x0.max(0)..x1.min(SIZE) {
                    frame[row * n + x as usize] = 1.0;
                }
            }
        };
        if pipes {
            for p in &self.pipes {
                fill(p.x, p.x + PIPE_WIDTH, 0, p.gap_center - PIPE_GAP / 2);
                fill(p.x, p.x + PIPE_WIDTH, p.gap_center + PIPE_GAP / 2, SIZE);
            }
        }
        if bird {
            fill(BIRD_X, BIRD_X + BIRD, self.altitude, self.altitude + BIRD);
        }
        frame
    }
}

impl Environment for FlappyEnv {
    fn reset(&mut self, seed: u64) -> Tensor {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.altitude = START_ALTITUDE;
        self.velocity = 0;
        self.steps = 0;
        self.done = false;
        self.pipes.clear();
        let mut x = FIRST_PIPE_X;
        while x < SIZE + PIPE_SPACING {
            self.spawn(x);
            x += PIPE_SPACING;
        }
        self.render()
    }

    fn step(&mut self, action: usize) -> Result<Step> {
        if self.done {
            return Err(Error::Contract("flappy step after episode end".into()));
        }
        if action > 1 {
            return Err(Error::Index { index: action, bound: 2 });
        }
        self.velocity = if action == 1 {
            IMPULSE
        } else {
            (self.velocity - GRAVITY).max(-MAX_FALL)
        };
        self.altitude += self.velocity;
        if self.altitude > TOP {
            self.altitude = TOP;
            self.velocity = 0;
        }
        for p in &mut self.pipes {
            p.x -= SCROLL;
        }
        self.pipes.retain(|p| p.x + PIPE_WIDTH > 0);
        let last = self.pipes.last().map_or(SIZE, |p| p.x);
        if last + PIPE_SPACING < SIZE + PIPE_SPACING {
            self.spawn(last + PIPE_SPACING);
        }
        self.steps += 1;

        let mut reward = 0.1;
        if self.altitude <= 0 || self.collides() {
            self.altitude = self.altitude.max(0);
            self.done = true;
            reward = -1.0;
        } else {
            for p in &mut self.pipes {
                if !p.passed && p.x + PIPE_WIDTH <= BIRD_X {
                    p.passed = true;
                    reward += 1.0;
                }
            }
            if self.steps >= self.max_steps {
                self.done = true;
            }
        }
        Ok(Step {
            observation: self.render(),
            reward,
            done: self.done,
        })
    }

    fn action_count(&self) -> usize {
        2
    }

    fn observation_shape(&self) -> Vec<usize> {
        vec![1, SIZE as usize, SIZE as usize]
    }
}

/// Writes a binary frame as a P5 PGM (maxval 255).
pub fn write_pgm(frame: &Tensor, mut out: impl Write) -> io::Result<()> {
    let (h, w) = match frame.shape() {
        [1, h, w] | [h, w] => (*h, *w),
        s => return Err(io::Error::new(io::ErrorKind::InvalidInput, format!("frame shape {s:?}"))),
    };
    write!(out, "P5\n{w} {h}\n255\n")?;
    let bytes: Vec<u8> = frame.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    out.write_all(&bytes)
}
