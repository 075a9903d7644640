//! Counter-based noise streams: every `(seed, stream)` pair addresses an
//! independent ChaCha20 keystream, so draws never depend on call order.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::field::{Field, Shape};

/// Stream-id namespaces, kept disjoint so that different consumers of the
/// same seed never read overlapping keystreams.
pub mod purpose {
    pub const RECONSTRUCTION: u64 = 0;
    pub const SAMPLING: u64 = 1 << 40;
    pub const INIT: u64 = 2 << 40;
    pub const TRAINING: u64 = 3 << 40;
    pub const DATA: u64 = 4 << 40;
}

pub fn stream(seed: u64, stream_id: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream_id);
    rng
}

/// Standard normal field drawn from stream `(seed, stream_id)`.
pub fn normal_field(seed: u64, stream_id: u64, shape: Shape) -> Field {
    let mut rng = stream(seed, stream_id);
    Field::from_fn(shape, |_, _, _| StandardNormal.sample(&mut rng))
}
