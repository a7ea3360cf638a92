//! Seeded randomness. Every random draw in the crate goes through a
//! [`ChaCha8Rng`] built here, so results are reproducible across runs.

use rand::SeedableRng;
pub use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 finaliser; mixes `salt` into `seed`.
pub fn mix(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a of `id`, stable across platforms and toolchains.
fn fnv1a(id: &str) -> u64 {
    id.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// A generator keyed by `(seed, id)`, independent of processing order.
pub fn for_id(seed: u64, id: &str) -> ChaCha8Rng {
    seeded(mix(seed, fnv1a(id)))
}

/// Text form of a generator's position: `seed=<hex>`, `stream=`, `word_pos=`.
pub fn state_to_text(rng: &ChaCha8Rng) -> String {
    let seed: String = rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
    format!(
        "seed={seed}\nstream={}\nword_pos={}\n",
        rng.get_stream(),
        rng.get_word_pos()
    )
}

pub fn state_from_text(text: &str) -> Result<ChaCha8Rng> {
    let bad = |m: &str| Error::Checkpoint(format!("rng state: {m}"));
    let mut seed = None;
    let mut stream = None;
    let mut word_pos = None;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line.split_once('=').ok_or_else(|| bad("expected key=value"))?;
        match k.trim() {
            "seed" => {
                let v = v.trim();
                if v.len() != 64 {
                    return Err(bad("seed must be 64 hex digits"));
                }
                let mut s = [0u8; 32];
                for (i, b) in s.iter_mut().enumerate() {
                    *b = u8::from_str_radix(&v[2 * i..2 * i + 2], 16).map_err(|_| bad("bad hex"))?;
                }
                seed = Some(s);
            }
            "stream" => stream = Some(v.trim().parse::<u64>().map_err(|_| bad("bad stream"))?),
            "word_pos" => word_pos = Some(v.trim().parse::<u128>().map_err(|_| bad("bad word_pos"))?),
            other => return Err(bad(&format!("unknown key {other}"))),
        }
    }
    let mut rng = ChaCha8Rng::from_seed(seed.ok_or_else(|| bad("missing seed"))?);
    rng.set_stream(stream.ok_or_else(|| bad("missing stream"))?);
    rng.set_word_pos(word_pos.ok_or_else(|| bad("missing word_pos"))?);
    Ok(rng)
}
