//! Seeded generators. Every stochastic component owns a `ChaCha8Rng`
//! derived from the run seed, so runs are reproducible bit for bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::networks::StateDict;

pub type Rng = ChaCha8Rng;

/// Independent generator for a named purpose under a run seed.
pub fn derive(seed: u64, purpose: &str) -> Rng {
    // FNV-1a over the purpose label keeps streams stable across builds.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in purpose.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(h);
    rng
}

pub fn write_state(rng: &Rng, d: &mut StateDict, prefix: &str) {
    let seed = rng.get_seed();
    for (i, chunk) in seed.chunks(8).enumerate() {
        d.put_scalar(
            format!("{prefix}.seed.{i}"),
            u64::from_le_bytes(chunk.try_into().unwrap()),
        );
    }
    d.put_scalar(format!("{prefix}.stream"), rng.get_stream());
    let pos = rng.get_word_pos();
    d.put_scalar(format!("{prefix}.pos_lo"), pos as u64);
    d.put_scalar(format!("{prefix}.pos_hi"), (pos >> 64) as u64);
}

pub fn read_state(d: &StateDict, prefix: &str) -> Result<Rng> {
    let mut seed = [0u8; 32];
    for i in 0..4 {
        let v = d.scalar(&format!("{prefix}.seed.{i}"))?;
        seed[i * 8..(i + 1) * 8].copy_from_slice(&v.to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(d.scalar(&format!("{prefix}.stream"))?);
    let pos = u128::from(d.scalar(&format!("{prefix}.pos_lo"))?)
        | (u128::from(d.scalar(&format!("{prefix}.pos_hi"))?) << 64);
    rng.set_word_pos(pos);
    Ok(rng)
}
