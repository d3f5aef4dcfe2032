//! Small internal helpers shared across modules.

/// One round of the splitmix64 output function.
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a stream-independent sub-seed from a master seed and a path of
/// identifying words. Used so that every (experiment, target, init, ...)
/// job gets its own seed regardless of scheduling order.
pub(crate) fn seed_mix(master: u64, path: &[u64]) -> u64 {
    let mut state = master ^ 0x5851_f42d_4c95_7f2d;
    let mut out = splitmix64(&mut state);
    for &word in path {
        state ^= word.wrapping_mul(0x2545_f491_4f6c_dd1d);
        out ^= splitmix64(&mut state);
    }
    out
}
