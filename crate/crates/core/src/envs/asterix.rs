//! Asterix: channels player, enemy, trail, gold.

use super::{NativeAction, Observation, GRID};
use rand::Rng;

const PLAYER: usize = 0;
const ENEMY: usize = 1;
const TRAIL: usize = 2;
const GOLD: usize = 3;

const SPAWN_SPEED: u32 = 10;
const MOVE_INTERVAL: u32 = 5;
const SLOTS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
struct Entity {
    x: i32,
    y: i32,
    moving_right: bool,
    gold: bool,
}

#[derive(Debug, Clone)]
pub(super) struct Asterix {
    player_x: i32,
    player_y: i32,
    entities: [Option<Entity>; SLOTS],
    spawn_timer: u32,
    move_timer: u32,
}

impl Asterix {
    pub(super) fn new() -> Self {
        Self {
            player_x: 5,
            player_y: 5,
            entities: [None; SLOTS],
            spawn_timer: SPAWN_SPEED,
            move_timer: MOVE_INTERVAL,
        }
    }

    fn spawn<R: Rng>(&mut self, rng: &mut R) {
        let moving_right = rng.random_bool(0.5);
        let gold = rng.random_bool(1.0 / 3.0);
        let free: Vec<usize> = (0..SLOTS).filter(|&i| self.entities[i].is_none()).collect();
        if free.is_empty() {
            return;
        }
        let slot = free[rng.random_range(0..free.len())];
        self.entities[slot] = Some(Entity {
            x: if moving_right { 0 } else { 9 },
            y: slot as i32 + 1,
            moving_right,
            gold,
        });
    }

    /// Resolves contact between the player and entity `i`.
    fn collide(&mut self, i: usize, reward: &mut f64, terminal: &mut bool) {
        if let Some(e) = self.entities[i] {
            if e.x == self.player_x && e.y == self.player_y {
                if e.gold {
                    self.entities[i] = None;
                    *reward += 1.0;
                } else {
                    *terminal = true;
                }
            }
        }
    }

    pub(super) fn step<R: Rng>(&mut self, a: NativeAction, rng: &mut R) -> (f64, bool) {
        let mut reward = 0.0;
        let mut terminal = false;
        if self.spawn_timer == 0 {
            self.spawn(rng);
            self.spawn_timer = SPAWN_SPEED;
        }
        match a {
            NativeAction::Left => self.player_x = (self.player_x - 1).max(0),
            NativeAction::Right => self.player_x = (self.player_x + 1).min(9),
            NativeAction::Up => self.player_y = (self.player_y - 1).max(1),
            NativeAction::Down => self.player_y = (self.player_y + 1).min(8),
            _ => {}
        }
        for i in 0..SLOTS {
            self.collide(i, &mut reward, &mut terminal);
        }
        if self.move_timer == 0 {
            self.move_timer = MOVE_INTERVAL;
            for i in 0..SLOTS {
                if let Some(e) = self.entities[i].as_mut() {
                    e.x += if e.moving_right { 1 } else { -1 };
                    if !(0..GRID as i32).contains(&e.x) {
                        self.entities[i] = None;
                        continue;
                    }
                }
                self.collide(i, &mut reward, &mut terminal);
            }
        }
        self.spawn_timer -= 1;
        self.move_timer -= 1;
        (reward, terminal)
    }

    pub(super) fn observation(&self) -> Observation {
        let mut o = Observation::empty(4);
        o.set(self.player_y as usize, self.player_x as usize, PLAYER);
        for e in self.entities.iter().flatten() {
            let c = if e.gold { GOLD } else { ENEMY };
            o.set(e.y as usize, e.x as usize, c);
            let back = if e.moving_right { e.x - 1 } else { e.x + 1 };
            if (0..GRID as i32).contains(&back) {
                o.set(e.y as usize, back as usize, TRAIL);
            }
        }
        o
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quiet_noop_frame() {
        let mut g = Asterix::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (r, done) = g.step(NativeAction::Noop, &mut rng);
        assert_eq!(r, 0.0);
        assert!(!done);
        assert_eq!(g.observation().channel_sum(PLAYER), 1);
    }

    #[test]
    fn player_clamped_to_rows_1_to_8() {
        let mut g = Asterix::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10 {
            g.step(NativeAction::Up, &mut rng);
        }
        assert_eq!(g.player_y, 1);
        for _ in 0..10 {
            g.step(NativeAction::Down, &mut rng);
        }
        assert_eq!(g.player_y, 8);
    }

    #[test]
    fn gold_scores_enemy_kills() {
        let mut g = Asterix::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        g.entities[4] = Some(Entity { x: 4, y: 5, moving_right: true, gold: true });
        let (r, done) = g.step(NativeAction::Left, &mut rng);
        assert_eq!((r, done), (1.0, false));
        assert!(g.entities[4].is_none());

        let mut g = Asterix::new();
        g.entities[4] = Some(Entity { x: 6, y: 5, moving_right: false, gold: false });
        let (_, done) = g.step(NativeAction::Right, &mut rng);
        assert!(done);
    }

    #[test]
    fn entities_move_and_leave() {
        let mut g = Asterix::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        g.player_y = 1;
        g.entities[7] = Some(Entity { x: 9, y: 8, moving_right: true, gold: false });
        g.move_timer = 0;
        g.spawn_timer = 100;
        g.step(NativeAction::Noop, &mut rng);
        assert!(g.entities[7].is_none());
    }

    #[test]
    fn spawns_fill_rows_with_trail() {
        let mut g = Asterix::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        g.player_y = 1;
        g.player_x = 0;
        let mut saw_trail = false;
        for _ in 0..40 {
            g.step(NativeAction::Noop, &mut rng);
            let o = g.observation();
            saw_trail |= o.channel_sum(TRAIL) > 0;
            for e in g.entities.iter().flatten() {
                assert!((1..=8).contains(&e.y));
            }
        }
        assert!(saw_trail);
    }
}
