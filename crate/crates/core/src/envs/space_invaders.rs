//! SpaceInvaders: channels cannon, alien, alien_left, alien_right,
//! friendly_bullet, enemy_bullet. Fully deterministic.

use super::{NativeAction, Observation, GRID};

const CANNON: usize = 0;
const ALIEN: usize = 1;
const ALIEN_LEFT: usize = 2;
const ALIEN_RIGHT: usize = 3;
const FRIENDLY_BULLET: usize = 4;
const ENEMY_BULLET: usize = 5;

const SHOT_COOL_DOWN: u32 = 5;
const ENEMY_MOVE_INTERVAL: u32 = 12;
const ENEMY_SHOT_INTERVAL: u32 = 10;

type Grid = [[bool; GRID]; GRID];

fn fresh_aliens() -> Grid {
    let mut g = [[false; GRID]; GRID];
    for row in g.iter_mut().take(4) {
        row[2..8].iter_mut().for_each(|c| *c = true);
    }
    g
}

/// Cyclic shift of rows by `k` (positive moves content down).
fn roll_rows(g: &Grid, k: i32) -> Grid {
    let mut out = [[false; GRID]; GRID];
    for (y, row) in g.iter().enumerate() {
        let ny = (y as i32 + k).rem_euclid(GRID as i32) as usize;
        out[ny] = *row;
    }
    out
}

/// Cyclic shift of columns by `k` (positive moves content right).
fn roll_cols(g: &Grid, k: i32) -> Grid {
    let mut out = [[false; GRID]; GRID];
    for (y, row) in g.iter().enumerate() {
        for (x, &v) in row.iter().enumerate() {
            let nx = (x as i32 + k).rem_euclid(GRID as i32) as usize;
            out[y][nx] = v;
        }
    }
    out
}

#[derive(Debug, Clone)]
pub(super) struct SpaceInvaders {
    pos: usize,
    f_bullets: Grid,
    e_bullets: Grid,
    aliens: Grid,
    alien_dir: i32,
    alien_move_timer: u32,
    alien_shot_timer: u32,
    shot_timer: u32,
}

impl SpaceInvaders {
    pub(super) fn new() -> Self {
        Self {
            pos: 5,
            f_bullets: [[false; GRID]; GRID],
            e_bullets: [[false; GRID]; GRID],
            aliens: fresh_aliens(),
            alien_dir: -1,
            alien_move_timer: ENEMY_MOVE_INTERVAL,
            alien_shot_timer: ENEMY_SHOT_INTERVAL,
            shot_timer: 0,
        }
    }

    fn alien_count(&self) -> usize {
        self.aliens.iter().flatten().filter(|&&a| a).count()
    }

    /// Lowest alien in the occupied column closest to the cannon, ties to
    /// the left.
    fn nearest_alien(&self) -> Option<(usize, usize)> {
        let mut cols: Vec<usize> = (0..GRID).collect();
        cols.sort_by_key(|&x| (x as i32 - self.pos as i32).abs());
        cols.into_iter().find_map(|x| (0..GRID).rev().find(|&y| self.aliens[y][x]).map(|y| (y, x)))
    }

    pub(super) fn step(&mut self, a: NativeAction) -> (f64, bool) {
        let mut terminal = false;
        match a {
            NativeAction::Fire if self.shot_timer == 0 => {
                self.f_bullets[9][self.pos] = true;
                self.shot_timer = SHOT_COOL_DOWN;
            }
            NativeAction::Left => self.pos = self.pos.saturating_sub(1),
            NativeAction::Right => self.pos = (self.pos + 1).min(9),
            _ => {}
        }

        self.f_bullets = roll_rows(&self.f_bullets, -1);
        self.f_bullets[9] = [false; GRID];
        self.e_bullets = roll_rows(&self.e_bullets, 1);
        self.e_bullets[0] = [false; GRID];
        if self.e_bullets[9][self.pos] {
            terminal = true;
        }

        if self.aliens[9][self.pos] {
            terminal = true;
        }
        if self.alien_move_timer == 0 {
            self.alien_move_timer = (self.alien_count() as u32).min(ENEMY_MOVE_INTERVAL);
            let left_edge = self.aliens.iter().any(|r| r[0]);
            let right_edge = self.aliens.iter().any(|r| r[9]);
            if (left_edge && self.alien_dir < 0) || (right_edge && self.alien_dir > 0) {
                self.alien_dir = -self.alien_dir;
                if self.aliens[9].iter().any(|&a| a) {
                    terminal = true;
                }
                self.aliens = roll_rows(&self.aliens, 1);
            } else {
                self.aliens = roll_cols(&self.aliens, self.alien_dir);
            }
            if self.aliens[9][self.pos] {
                terminal = true;
            }
        }
        if self.alien_shot_timer == 0 {
            self.alien_shot_timer = ENEMY_SHOT_INTERVAL;
            if let Some((y, x)) = self.nearest_alien() {
                self.e_bullets[y][x] = true;
            }
        }

        let mut reward = 0.0;
        for y in 0..GRID {
            for x in 0..GRID {
                if self.aliens[y][x] && self.f_bullets[y][x] {
                    self.aliens[y][x] = false;
                    self.f_bullets[y][x] = false;
                    reward += 1.0;
                }
            }
        }

        self.shot_timer = self.shot_timer.saturating_sub(1);
        // both timers are reset above before they could underflow
        self.alien_move_timer -= 1;
        self.alien_shot_timer -= 1;
        if self.alien_count() == 0 {
            self.aliens = fresh_aliens();
        }
        (reward, terminal)
    }

    pub(super) fn observation(&self) -> Observation {
        let mut o = Observation::empty(6);
        o.set(9, self.pos, CANNON);
        let dir_channel = if self.alien_dir < 0 { ALIEN_LEFT } else { ALIEN_RIGHT };
        for y in 0..GRID {
            for x in 0..GRID {
                if self.aliens[y][x] {
                    o.set(y, x, ALIEN);
                    o.set(y, x, dir_channel);
                }
                if self.f_bullets[y][x] {
                    o.set(y, x, FRIENDLY_BULLET);
                }
                if self.e_bullets[y][x] {
                    o.set(y, x, ENEMY_BULLET);
                }
            }
        }
        o
    }
}
