//! Stream seeds derived from a global seed and string/index keys.

/// Environment variable that overrides the global seed.
pub const SEED_ENV: &str = "AQE_SEED";

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for one (key, index) stream under `global`. Stable across platforms and releases.
pub fn derive_seed(global: u64, key: &str, index: u64) -> u64 {
    splitmix(splitmix(global ^ fnv1a(key.as_bytes())) ^ index)
}

/// `AQE_SEED` when set and parseable, otherwise `fallback`.
pub fn seed_from_env(fallback: u64) -> Result<u64, String> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| format!("{SEED_ENV}={v:?} is not an unsigned integer")),
        Err(_) => Ok(fallback),
    }
}
