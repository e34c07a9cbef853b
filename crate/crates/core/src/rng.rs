//! Reproducible random substreams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent generator for item `index` under `master_seed`. Each index maps
/// to its own ChaCha stream, so results never depend on which thread draws
/// which item.
pub fn substream(master_seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(index);
    rng
}
