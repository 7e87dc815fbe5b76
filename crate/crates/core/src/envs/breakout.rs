//! Breakout: channels paddle, ball, trail, brick.

use super::{NativeAction, Observation, GRID};
use rand::Rng;

const PADDLE: usize = 0;
const BALL: usize = 1;
const TRAIL: usize = 2;
const BRICK: usize = 3;

// Ball directions: 0 up-left, 1 up-right, 2 down-right, 3 down-left.
const BOUNCE_X: [u8; 4] = [1, 0, 3, 2];
const BOUNCE_Y: [u8; 4] = [3, 2, 1, 0];
const PADDLE_EDGE: [u8; 4] = [2, 3, 0, 1];

#[derive(Debug, Clone)]
pub(super) struct Breakout {
    ball_x: i32,
    ball_y: i32,
    ball_dir: u8,
    pos: i32,
    bricks: [[bool; GRID]; GRID],
    strike: bool,
    last_x: i32,
    last_y: i32,
}

fn fresh_bricks(b: &mut [[bool; GRID]; GRID]) {
    for row in b.iter_mut().take(4).skip(1) {
        row.iter_mut().for_each(|c| *c = true);
    }
}

impl Breakout {
    pub(super) fn new<R: Rng>(rng: &mut R) -> Self {
        let (ball_x, ball_dir) = if rng.random_bool(0.5) { (9, 3) } else { (0, 2) };
        let mut bricks = [[false; GRID]; GRID];
        fresh_bricks(&mut bricks);
        Self {
            ball_x,
            ball_y: 3,
            ball_dir,
            pos: 4,
            bricks,
            strike: false,
            last_x: ball_x,
            last_y: 3,
        }
    }

    pub(super) fn step(&mut self, a: NativeAction) -> (f64, bool) {
        let mut reward = 0.0;
        let mut terminal = false;
        match a {
            NativeAction::Left => self.pos = (self.pos - 1).max(0),
            NativeAction::Right => self.pos = (self.pos + 1).min(9),
            _ => {}
        }
        self.last_x = self.ball_x;
        self.last_y = self.ball_y;
        let (mut nx, mut ny) = match self.ball_dir {
            0 => (self.ball_x - 1, self.ball_y - 1),
            1 => (self.ball_x + 1, self.ball_y - 1),
            2 => (self.ball_x + 1, self.ball_y + 1),
            _ => (self.ball_x - 1, self.ball_y + 1),
        };
        let mut strike_toggle = false;
        if !(0..=9).contains(&nx) {
            nx = nx.clamp(0, 9);
            self.ball_dir = BOUNCE_X[self.ball_dir as usize];
        }
        if ny < 0 {
            ny = 0;
            self.ball_dir = BOUNCE_Y[self.ball_dir as usize];
        } else if self.bricks[ny as usize][nx as usize] {
            strike_toggle = true;
            if !self.strike {
                reward += 1.0;
                self.strike = true;
                self.bricks[ny as usize][nx as usize] = false;
                ny = self.last_y;
                self.ball_dir = BOUNCE_Y[self.ball_dir as usize];
            }
        } else if ny == 9 {
            if self.bricks.iter().flatten().all(|&b| !b) {
                fresh_bricks(&mut self.bricks);
            }
            if self.ball_x == self.pos {
                self.ball_dir = BOUNCE_Y[self.ball_dir as usize];
                ny = self.last_y;
            } else if nx == self.pos {
                self.ball_dir = PADDLE_EDGE[self.ball_dir as usize];
                ny = self.last_y;
            } else {
                terminal = true;
            }
        }
        if !strike_toggle {
            self.strike = false;
        }
        self.ball_x = nx;
        self.ball_y = ny;
        (reward, terminal)
    }

    pub(super) fn observation(&self) -> Observation {
        let mut o = Observation::empty(4);
        o.set(self.ball_y as usize, self.ball_x as usize, BALL);
        o.set(9, self.pos as usize, PADDLE);
        o.set(self.last_y as usize, self.last_x as usize, TRAIL);
        for (y, row) in self.bricks.iter().enumerate() {
            for (x, &b) in row.iter().enumerate() {
                if b {
                    o.set(y, x, BRICK);
                }
            }
        }
        o
    }

    #[cfg(test)]
    pub(super) fn brick_count(&self) -> usize {
        self.bricks.iter().flatten().filter(|&&b| b).count()
    }
}
