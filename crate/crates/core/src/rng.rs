//! Seeded randomness: named substreams of one master seed, and Laplace noise.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Exp};

pub type SimRng = ChaCha12Rng;

/// Independent streams derived from the same master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Benign,
    Attacker,
    Noise,
    Counterexample,
}

pub fn substream(master: u64, stream: Stream) -> SimRng {
    let mut rng = SimRng::seed_from_u64(master);
    rng.set_stream(stream as u64 + 1);
    rng
}

/// One draw from Laplace(0, scale): an exponential magnitude with a random sign.
pub fn laplace<R: Rng + ?Sized>(rng: &mut R, scale: f64) -> f64 {
    assert!(scale > 0.0, "laplace scale must be positive");
    let mag = Exp::new(1.0 / scale).expect("positive rate").sample(rng);
    if rng.random::<bool>() {
        mag
    } else {
        -mag
    }
}

/// Pr[Z ≥ z] for Z ~ Laplace(0, scale).
pub fn laplace_upper_tail(z: f64, scale: f64) -> f64 {
    if z >= 0.0 {
        0.5 * (-z / scale).exp()
    } else {
        1.0 - 0.5 * (z / scale).exp()
    }
}
