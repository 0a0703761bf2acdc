//! Stable seed derivation. Values must not change across platforms or
//! toolchains, so this avoids `std::hash`.

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Derive a child seed from a parent seed and a sequence of labels.
pub fn derive(seed: u64, parts: &[&[u8]]) -> u64 {
    let mut h = FNV_OFFSET;
    for b in seed.to_le_bytes() {
        h = (h ^ b as u64).wrapping_mul(FNV_PRIME);
    }
    for part in parts {
        for &b in *part {
            h = (h ^ b as u64).wrapping_mul(FNV_PRIME);
        }
        // separator so ["ab","c"] != ["a","bc"]
        h = (h ^ 0xff).wrapping_mul(FNV_PRIME);
    }
    splitmix(h)
}

/// Per-sample seed for a run.
pub fn sample_seed(run_seed: u64, sample_id: &str) -> u64 {
    derive(run_seed, &[b"sample", sample_id.as_bytes()])
}

pub fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Map a seed to a uniform value in `[0, 1)`.
pub fn unit(seed: u64) -> f64 {
    (seed >> 11) as f64 / (1u64 << 53) as f64
}
