use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic generator for the named sub-stream of a run seed
/// (`"init"`, `"data"`, `"augment"`, ...).
pub fn substream(seed: u64, name: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(name.as_bytes()));
    rng
}

/// Sub-stream keyed by a name and an index, e.g. one per training step.
pub fn indexed_substream(seed: u64, name: &str, index: u64) -> ChaCha8Rng {
    let mut out = ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    out.set_stream(fnv1a(name.as_bytes()) ^ index.rotate_left(32));
    out
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}
