//! Every consumer of a run seed draws from its own ChaCha stream, so that
//! using one seed for the model, the data and the shuffler does not hand them
//! the same random numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy)]
pub(crate) enum Stream {
    Init = 0,
    GroupLasso = 1,
    Blobs = 2,
    Shuffle = 3,
    Probe = 4,
    ZeroTrials = 5,
}

pub(crate) fn rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream as u64);
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_differ_for_one_seed() {
        let a: u64 = rng(9, Stream::Init).random();
        let b: u64 = rng(9, Stream::Blobs).random();
        assert_ne!(a, b);
        assert_eq!(a, rng(9, Stream::Init).random::<u64>());
    }
}
