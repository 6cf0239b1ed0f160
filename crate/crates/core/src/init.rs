//! Seeded parameter initialisation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use spast_tensor::{Param, ParamSet};

/// Deterministic RNG for a `(seed, purpose)` pair, so that independent
/// components drawn from one seed do not share a stream.
pub fn rng_for(seed: u64, purpose: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tag = purpose.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    });
    rng.set_stream(tag);
    rng
}

pub fn normal_vec(rng: &mut impl Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// He-normal convolution kernel plus zero bias under `name.weight` / `name.bias`.
pub fn conv(set: &mut ParamSet, rng: &mut impl Rng, name: &str, out: usize, inp: usize, k: usize, gain: f64) {
    let fan_in = (inp * k * k) as f64;
    let std = gain * (2.0 / fan_in).sqrt();
    set.insert(
        format!("{name}.weight"),
        Param::new(&[out, inp, k, k], normal_vec(rng, out * inp * k * k, std)),
    );
    set.insert(format!("{name}.bias"), Param::new(&[out], vec![0.0; out]));
}

/// `1×1` projection initialised to the identity plus Gaussian jitter.
pub fn near_identity(set: &mut ParamSet, rng: &mut impl Rng, name: &str, channels: usize, jitter: f64) {
    let mut w = normal_vec(rng, channels * channels, jitter);
    for i in 0..channels {
        w[i * channels + i] += 1.0;
    }
    set.insert(format!("{name}.weight"), Param::new(&[channels, channels, 1, 1], w));
    set.insert(format!("{name}.bias"), Param::new(&[channels], vec![0.0; channels]));
}

/// Dense `out×inp` matrix with `1/sqrt(inp)` scaling and zero bias.
pub fn linear(set: &mut ParamSet, rng: &mut impl Rng, name: &str, out: usize, inp: usize) {
    let std = 1.0 / (inp as f64).sqrt();
    set.insert(format!("{name}.weight"), Param::new(&[out, inp], normal_vec(rng, out * inp, std)));
    set.insert(format!("{name}.bias"), Param::new(&[out], vec![0.0; out]));
}
