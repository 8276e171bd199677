//! Seedable random streams.
//!
//! Every random draw in the crate comes from a [`ChaCha8Rng`]. A run has one
//! root seed; independent consumers get their own ChaCha stream derived from
//! that seed, so adding draws in one place never shifts the numbers seen by
//! another. The stream id is `fnv1a32(name) << 32 | (epoch & 0xffff_ffff)`:
//! one child stream per named consumer (a dropout site, the shuffler, the
//! weight initializer) per epoch.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// 32-bit FNV-1a.
pub fn fnv1a32(name: &str) -> u32 {
    let mut h: u32 = 0x811c_9dc5;
    for b in name.bytes() {
        h ^= b as u32;
        h = h.wrapping_mul(0x0100_0193);
    }
    h
}

pub fn stream_id(name: &str, epoch: u64) -> u64 {
    ((fnv1a32(name) as u64) << 32) | (epoch & 0xffff_ffff)
}

/// Child stream `name`/`epoch` of the root `seed`.
pub fn child(seed: u64, name: &str, epoch: u64) -> Rng {
    let mut rng = seeded(seed);
    rng.set_stream(stream_id(name, epoch));
    rng
}

/// Lazily created per-layer dropout streams for one epoch.
#[derive(Debug, Clone)]
pub struct DropoutStreams {
    seed: u64,
    epoch: u64,
    streams: BTreeMap<String, Rng>,
}

impl DropoutStreams {
    pub fn new(seed: u64, epoch: u64) -> Self {
        Self {
            seed,
            epoch,
            streams: BTreeMap::new(),
        }
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn stream(&mut self, layer: &str) -> &mut Rng {
        let (seed, epoch) = (self.seed, self.epoch);
        self.streams
            .entry(layer.to_string())
            .or_insert_with(|| child(seed, &format!("dropout/{layer}"), epoch))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn streams_are_independent_and_reproducible() {
        let a: Vec<u64> = (0..4).map(|_| child(7, "x", 0).random()).collect();
        assert!(a.windows(2).all(|w| w[0] == w[1]));
        let mut x = child(7, "x", 0);
        let mut y = child(7, "y", 0);
        let mut z = child(7, "x", 1);
        let (vx, vy, vz): (u64, u64, u64) = (x.random(), y.random(), z.random());
        assert_ne!(vx, vy);
        assert_ne!(vx, vz);
    }

    #[test]
    fn fnv_known_value() {
        assert_eq!(fnv1a32(""), 0x811c_9dc5);
        assert_eq!(fnv1a32("a"), 0xe40c_292c);
    }
}
