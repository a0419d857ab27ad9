//! Seeded generator used by the search.
//!
//! The generator is SplitMix64 (Steele, Lea and Flood; the reference C code is
//! published alongside xoshiro by Vigna). Each field cell owns an independent
//! stream whose initial state is `seed ^ cell_index`, so results never depend
//! on how cells are split across threads. Bounded integers come from
//! rejection sampling: draws below `2^64 mod n` are discarded, the rest are
//! reduced with `% n`.

const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(state: u64) -> Self {
        SplitMix64 { state }
    }

    /// Stream for one field cell.
    pub fn for_cell(seed: u64, cell_index: usize) -> Self {
        SplitMix64::new(seed ^ cell_index as u64)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    /// Uniform integer in `0..bound`. Panics if `bound` is zero.
    pub fn below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0, "empty range");
        let threshold = bound.wrapping_neg() % bound;
        loop {
            let draw = self.next_u64();
            if draw >= threshold {
                return draw % bound;
            }
        }
    }
}
