//! Seeded random streams.
//!
//! Every random quantity in the crate is drawn from a ChaCha20 stream. A run
//! is identified by one master seed; independent sub-streams are obtained by
//! keeping the key derived from the master seed and selecting a different
//! ChaCha stream id. Stream ids in use:
//!
//! | stream id                  | consumer                              |
//! |----------------------------|---------------------------------------|
//! | `k` (chain index)          | chain `k` of a fit                    |
//! | `VERIFY_BASE + j`          | replicate block `j` of an MC verifier |
//! | `SIMULATE`                 | synthetic data generation             |
//! | `GEWEKE_MARGINAL`/`_SUCCESSIVE` | the two halves of a Geweke test  |

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

pub type Stream = ChaCha20Rng;

pub const VERIFY_BASE: u64 = 1 << 32;
pub const SIMULATE: u64 = 1 << 40;
pub const GEWEKE_MARGINAL: u64 = (1 << 41) + 1;
pub const GEWEKE_SUCCESSIVE: u64 = (1 << 41) + 2;

/// Sub-stream `stream` of the master seed `seed`.
pub fn substream(seed: u64, stream: u64) -> Stream {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
