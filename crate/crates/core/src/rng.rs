//! Counter-based keyed random numbers.
//!
//! Draws are pure functions of `(seed, a, b, c)` rather than of generator
//! state, so any single increment is addressable: the same key always yields
//! the same number no matter how many other draws happened. That is what
//! makes common-random-number reruns and scrambled-tail adaptedness tests
//! cheap. The mixer is the splitmix64 finalizer applied to a short chain of
//! golden-ratio keyed absorptions.

const GOLDEN: u64 = 0x9e3779b97f4a7c15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

#[inline]
fn absorb(state: u64, word: u64) -> u64 {
    mix64(state ^ word.wrapping_mul(GOLDEN).wrapping_add(0x2545f4914f6cdd1d))
}

/// Keyed 64-bit word for key `(seed, a, b, c)` and subdraw index `lane`.
#[inline]
pub fn keyed_u64(seed: u64, a: u64, b: u64, c: u64, lane: u64) -> u64 {
    let mut s = mix64(seed ^ GOLDEN);
    s = absorb(s, a);
    s = absorb(s, b);
    s = absorb(s, c);
    mix64(s ^ lane.wrapping_mul(GOLDEN))
}

/// Uniform in (0, 1], never zero (safe under log).
#[inline]
pub fn keyed_uniform_open(seed: u64, a: u64, b: u64, c: u64, lane: u64) -> f64 {
    let bits = keyed_u64(seed, a, b, c, lane) >> 11;
    (bits as f64 + 1.0) / 9007199254740992.0
}

/// Uniform in [-1, 1).
#[inline]
pub fn keyed_uniform_sym(seed: u64, a: u64, b: u64, c: u64, lane: u64) -> f64 {
    let bits = keyed_u64(seed, a, b, c, lane) >> 11;
    bits as f64 / 4503599627370496.0 - 1.0
}

/// Standard normal via Box-Muller on two keyed uniforms.
#[inline]
pub fn keyed_normal(seed: u64, a: u64, b: u64, c: u64) -> f64 {
    let u1 = keyed_uniform_open(seed, a, b, c, 0);
    let u2 = keyed_uniform_open(seed, a, b, c, 1);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
