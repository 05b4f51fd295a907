use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent generator for sub-stream `id` of `seed`.
pub fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}
