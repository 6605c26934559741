const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// FNV-1a, 64-bit.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, b| (h ^ u64::from(*b)).wrapping_mul(FNV_PRIME))
}

/// Reduce bucket for `key`; stable across nodes and runs.
pub fn partition(key: &[u8], reducers: u32) -> u32 {
    assert!(reducers >= 1, "at least one reducer");
    (fnv1a64(key) % u64::from(reducers)) as u32
}
