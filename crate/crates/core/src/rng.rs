//! Counter-based random numbers.
//!
//! Every draw is a pure function of `(seed, key, iteration, stream)`, where
//! the key is derived from an agent's global id. Nothing rank-local enters the
//! computation, so an agent draws the same numbers on whichever rank hosts it.

use crate::geom::Vec3;
use crate::ids::GlobalAgentId;

/// Stream tags separating independent uses of randomness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Stream {
    MoveTheta = 1,
    MovePhi = 2,
    Infect = 3,
    Recover = 4,
    DivideTheta = 5,
    DividePhi = 6,
    SeparateTheta = 7,
    SeparatePhi = 8,
    InitX = 9,
    InitY = 10,
    InitZ = 11,
    InitKind = 12,
}

/// SplitMix64 finalizer.
#[inline]
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[inline]
fn to_unit(h: u64) -> f64 {
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

#[derive(Debug, Clone, Copy)]
pub struct CounterRng {
    seed: u64,
}

impl CounterRng {
    pub fn new(seed: u64) -> Self {
        CounterRng { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    #[inline]
    pub fn bits_keyed(&self, key: u64, iteration: u64, stream: u64) -> u64 {
        let mut h = mix(self.seed ^ 0xD1B5_4A32_D192_ED03);
        h = mix(h ^ key);
        h = mix(h ^ iteration.wrapping_mul(0xA24B_AED4_963E_E407));
        mix(h ^ stream.wrapping_mul(0x9FB2_1C65_1E98_DF25))
    }

    /// Uniform draw in `[0, 1)` keyed by an arbitrary 64-bit key.
    #[inline]
    pub fn uniform_keyed(&self, key: u64, iteration: u64, stream: Stream) -> f64 {
        to_unit(self.bits_keyed(key, iteration, stream as u64))
    }

    /// Uniform draw in `[0, 1)` for an agent.
    #[inline]
    pub fn uniform(&self, id: GlobalAgentId, iteration: u64, stream: Stream) -> f64 {
        self.uniform_keyed(id.as_u64_key(), iteration, stream)
    }

    /// Uniformly distributed unit vector from two streams.
    pub fn unit_vector(&self, key: u64, iteration: u64, theta: Stream, phi: Stream) -> Vec3 {
        let u = self.uniform_keyed(key, iteration, theta);
        let v = self.uniform_keyed(key, iteration, phi);
        let z = 1.0 - 2.0 * u;
        let r = (1.0 - z * z).max(0.0).sqrt();
        let ang = 2.0 * std::f64::consts::PI * v;
        Vec3::new(r * ang.cos(), r * ang.sin(), z)
    }
}
