/// Sub-seeds derived from one user seed by fixed offsets, one per consumer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedPlan {
    pub init: u64,
    pub shuffle: u64,
    pub dropout: u64,
    pub split: u64,
}

impl SeedPlan {
    pub fn new(seed: u64) -> Self {
        SeedPlan {
            init: seed,
            shuffle: seed.wrapping_add(1),
            dropout: seed.wrapping_add(2),
            split: seed.wrapping_add(3),
        }
    }
}
