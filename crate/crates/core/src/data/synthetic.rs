//! Event generator whose next item depends on the elapsed time.
//!
//! Items form `categories` groups of `per_category`. Each event is followed
//! by a short gap (minutes) or a long gap (days), chosen at random. The gap
//! that preceded the current event decides the next event's category: short
//! keeps the category, long moves to the next one (cyclically). Inside the
//! chosen category the next item is the successor of the current item's
//! slot with probability `p_successor`, otherwise uniform.
//!
//! A model that sees the gaps can place all its top-10 mass in the right
//! category; one that ignores time cannot tell the two regimes apart.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ingest::{Event, EventLog};

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub users: usize,
    pub categories: usize,
    pub per_category: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub p_successor: f64,
    pub p_long_gap: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            users: 500,
            categories: 20,
            per_category: 10,
            min_len: 10,
            max_len: 30,
            p_successor: 0.6,
            p_long_gap: 0.5,
            seed: 7,
        }
    }
}

const SHORT: (i64, i64) = (60, 1_800);
const LONG: (i64, i64) = (2 * 86_400, 10 * 86_400);

pub fn generate(cfg: &SyntheticConfig) -> EventLog {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut events = Vec::new();
    let (nc, np) = (cfg.categories.max(1), cfg.per_category.max(1));
    for u in 0..cfg.users {
        let len = rng.random_range(cfg.min_len..=cfg.max_len.max(cfg.min_len));
        let mut cat = rng.random_range(0..nc);
        let mut slot = rng.random_range(0..np);
        let mut ts: i64 = 1_500_000_000 + rng.random_range(0..86_400 * 365);
        // the first event has no observable gap; treat it as short
        let mut long = false;
        for k in 0..len {
            if k > 0 {
                if long {
                    cat = (cat + 1) % nc;
                }
                slot = if rng.random::<f64>() < cfg.p_successor {
                    (slot + 1) % np
                } else {
                    rng.random_range(0..np)
                };
                long = rng.random::<f64>() < cfg.p_long_gap;
                let (lo, hi) = if long { LONG } else { SHORT };
                ts += rng.random_range(lo..=hi);
            }
            events.push(Event {
                user: format!("u{u}"),
                item: format!("i{}", cat * np + slot),
                ts,
            });
        }
    }
    EventLog::from_events(events, "synthetic")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regime_follows_gap() {
        let log = generate(&SyntheticConfig { users: 50, ..Default::default() });
        let cat = |e: &Event| e.item[1..].parse::<usize>().unwrap() / 10;
        let mut checked = 0;
        for w in log.events.windows(3) {
            if w[0].user != w[2].user {
                continue;
            }
            let gap = w[1].ts - w[0].ts;
            let step = (cat(&w[2]) + 20 - cat(&w[1])) % 20;
            assert_eq!(step, usize::from(gap > SHORT.1));
            checked += 1;
        }
        assert!(checked > 500);
    }

    #[test]
    fn deterministic() {
        let c = SyntheticConfig { users: 5, ..Default::default() };
        assert_eq!(generate(&c), generate(&c));
    }
}
