//! Seed derivation. Every random stream in a run is a pure function of the
//! run seed and a few small integers (client, round, epoch, purpose).

/// SplitMix64 finalizer.
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from `base` and a stream index.
pub fn mix(base: u64, stream: u64) -> u64 {
    splitmix(splitmix(base) ^ stream.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

/// Derives a seed from `base` and a sequence of stream indices.
pub fn mix_all(base: u64, streams: &[u64]) -> u64 {
    streams.iter().fold(base, |acc, &s| mix(acc, s))
}
