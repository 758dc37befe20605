//! Deterministic seed derivation. One master seed flows through the
//! pipeline; stage and per-task seeds come from a fixed integer mix
//! (splitmix64) so results are reproducible across platforms and releases.

/// splitmix64 finalizer; a fixed bijection on u64.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for a named pipeline stage.
pub fn stage_seed(master: u64, stage: &str) -> u64 {
    // FNV-1a over the stage name, mixed with the master seed
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for b in stage.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    splitmix64(master ^ h)
}

/// Seed for task `index` within a stage (bootstrap member, event, chain, ...).
pub fn task_seed(stage_seed: u64, index: u64) -> u64 {
    splitmix64(stage_seed ^ splitmix64(index.wrapping_add(1)))
}
