//! Small 3D vector and axis-aligned box types.

use serde::{Deserialize, Serialize};
use std::ops::{Add, AddAssign, Mul, Neg, Sub};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec3(pub [f64; 3]);

impl Vec3 {
    pub const ZERO: Vec3 = Vec3([0.0; 3]);

    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3([x, y, z])
    }

    #[inline]
    pub fn dot(self, other: Vec3) -> f64 {
        self.0[0] * other.0[0] + self.0[1] * other.0[1] + self.0[2] * other.0[2]
    }

    #[inline]
    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    #[inline]
    pub fn norm(self) -> f64 {
        self.norm_sq().sqrt()
    }

    #[inline]
    pub fn distance_sq(self, other: Vec3) -> f64 {
        (self - other).norm_sq()
    }

    #[inline]
    pub fn distance(self, other: Vec3) -> f64 {
        self.distance_sq(other).sqrt()
    }

    pub fn x(self) -> f64 {
        self.0[0]
    }
    pub fn y(self) -> f64 {
        self.0[1]
    }
    pub fn z(self) -> f64 {
        self.0[2]
    }

    /// Bit pattern of each component; used for exact comparisons.
    pub fn to_bits(self) -> [u64; 3] {
        [self.0[0].to_bits(), self.0[1].to_bits(), self.0[2].to_bits()]
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    #[inline]
    fn add(self, o: Vec3) -> Vec3 {
        Vec3([self.0[0] + o.0[0], self.0[1] + o.0[1], self.0[2] + o.0[2]])
    }
}

impl AddAssign for Vec3 {
    #[inline]
    fn add_assign(&mut self, o: Vec3) {
        *self = *self + o;
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    #[inline]
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3([self.0[0] - o.0[0], self.0[1] - o.0[1], self.0[2] - o.0[2]])
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    #[inline]
    fn mul(self, s: f64) -> Vec3 {
        Vec3([self.0[0] * s, self.0[1] * s, self.0[2] * s])
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3([-self.0[0], -self.0[1], -self.0[2]])
    }
}

impl From<[f64; 3]> for Vec3 {
    fn from(a: [f64; 3]) -> Self {
        Vec3(a)
    }
}

/// Axis-aligned box. Containment is half-open: `lo <= p < hi`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub lo: [f64; 3],
    pub hi: [f64; 3],
}

impl Aabb {
    pub fn new(lo: [f64; 3], hi: [f64; 3]) -> Self {
        Aabb { lo, hi }
    }

    pub fn extent(&self) -> [f64; 3] {
        [
            self.hi[0] - self.lo[0],
            self.hi[1] - self.lo[1],
            self.hi[2] - self.lo[2],
        ]
    }

    pub fn volume(&self) -> f64 {
        let e = self.extent();
        e[0].max(0.0) * e[1].max(0.0) * e[2].max(0.0)
    }

    pub fn contains_half_open(&self, p: Vec3) -> bool {
        (0..3).all(|a| p.0[a] >= self.lo[a] && p.0[a] < self.hi[a])
    }

    pub fn contains_closed(&self, p: Vec3) -> bool {
        (0..3).all(|a| p.0[a] >= self.lo[a] && p.0[a] <= self.hi[a])
    }

    pub fn intersection(&self, other: &Aabb) -> Option<Aabb> {
        let mut lo = [0.0; 3];
        let mut hi = [0.0; 3];
        for a in 0..3 {
            lo[a] = self.lo[a].max(other.lo[a]);
            hi[a] = self.hi[a].min(other.hi[a]);
            if hi[a] <= lo[a] {
                return None;
            }
        }
        Some(Aabb { lo, hi })
    }

    /// Euclidean distance from `p` to the closed box (0 when inside).
    pub fn distance_to(&self, p: Vec3) -> f64 {
        let mut d2 = 0.0;
        for a in 0..3 {
            let v = p.0[a];
            let d = if v < self.lo[a] {
                self.lo[a] - v
            } else if v > self.hi[a] {
                v - self.hi[a]
            } else {
                0.0
            };
            d2 += d * d;
        }
        d2.sqrt()
    }

    pub fn is_degenerate(&self) -> bool {
        (0..3).any(|a| self.hi[a] <= self.lo[a])
    }
}

/// Folds a coordinate back into `[lo, hi]` by mirror reflection at the walls.
pub fn reflect_into(v: f64, lo: f64, hi: f64) -> f64 {
    let len = hi - lo;
    if len <= 0.0 {
        return lo;
    }
    if v >= lo && v <= hi {
        return v;
    }
    let period = 2.0 * len;
    let mut y = (v - lo).rem_euclid(period);
    if y > len {
        y = period - y;
    }
    (lo + y).clamp(lo, hi)
}
