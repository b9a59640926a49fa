//! Named random substreams derived from a single root seed.
//!
//! Every consumer of randomness (splitting, initialization, triple sampling,
//! reparameterization noise, k-means seeding, feature augmentation) draws from
//! its own ChaCha stream, so disabling one source of noise never shifts the
//! values seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stream {
    Split,
    Init,
    Triples,
    Reparam,
    Kmeans,
    Augment,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Split => 1,
            Stream::Init => 2,
            Stream::Triples => 3,
            Stream::Reparam => 4,
            Stream::Kmeans => 5,
            Stream::Augment => 6,
        }
    }
}

/// Returns the generator for `stream` under `root`.
pub fn substream(root: u64, stream: Stream) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(root);
    rng.set_stream(stream.id());
    rng
}
