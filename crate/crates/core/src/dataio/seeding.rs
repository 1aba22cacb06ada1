use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent ChaCha streams for the consumers of a user seed, so that a
/// dataset and a model built from the same seed share no random draws.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RngStream {
    Synthetic = 1,
    Split = 2,
    Training = 3,
}

pub fn stream_rng(seed: u64, stream: RngStream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}
