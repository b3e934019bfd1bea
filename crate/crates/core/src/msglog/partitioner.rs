//! Keyed routing of messages to partitions.

const FNV_OFFSET_BASIS: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a hash.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET_BASIS, |hash, &b| {
        (hash ^ u64::from(b)).wrapping_mul(FNV_PRIME)
    })
}

/// Partition a key is routed to: `fnv1a64(key) mod partition_count`.
///
/// Pure, so stable across processes and restarts.
///
/// # Panics
/// If `partition_count` is zero.
pub fn partition_for(key: &[u8], partition_count: u32) -> u32 {
    assert!(partition_count >= 1, "partition count must be at least 1");
    (fnv1a64(key) % u64::from(partition_count)) as u32
}
