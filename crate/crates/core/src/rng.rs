//! Deterministic counter-based random streams.
//!
//! This is SplitMix64 driven in counter mode: a stream is a `(key, counter)`
//! pair and the `i`-th output is `mix(key + i * GOLDEN)` where `mix` is the
//! SplitMix64 finalizer. Because outputs depend only on the pair, a stream's
//! position is two words of state, trivially checkpointable, and immune to
//! "someone consumed one extra draw" bugs spreading across subsystems.
//!
//! Subsystems never share a stream. They derive children by label
//! ([`Stream::child`]) or by index ([`Stream::child_index`]); derivation mixes
//! the label hash (FNV-1a) or index into the parent key under distinct tags,
//! so `child("a").child_index(0)` and `child("a0")` are unrelated streams.
//! Deriving a child does not disturb the parent. Identical seed plus identical
//! derivation path yields identical draws, no matter what other code does in
//! between — that property is what every reproducibility guarantee in this
//! crate rests on.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;
const LABEL_TAG: u64 = 0xA076_1D64_78BD_642F;
const INDEX_TAG: u64 = 0xE703_7ED1_A0B4_28DB;
const SEED_TAG: u64 = 0x5851_F42D_4C95_7F2D;

/// SplitMix64 finalizer.
#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[inline]
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xCBF2_9CE4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// A deterministic random stream. Cheap to clone; clones continue
/// independently from the same position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stream {
    key: u64,
    counter: u64,
}

impl Stream {
    /// Root stream for a user-facing seed. The seed is scrambled so that
    /// small seeds (0, 1, 2, ...) do not produce correlated streams.
    pub fn from_seed(seed: u64) -> Self {
        Stream { key: mix(seed ^ SEED_TAG), counter: 0 }
    }

    /// Stream with an explicit raw key; output `i` is exactly the reference
    /// SplitMix64 sequence seeded with `key`. Mostly useful for tests.
    pub fn from_raw_key(key: u64) -> Self {
        Stream { key, counter: 0 }
    }

    /// Resume a stream from a saved `(key, counter)` position.
    pub fn from_state(key: u64, counter: u64) -> Self {
        Stream { key, counter }
    }

    /// Current `(key, counter)` position, for checkpointing.
    pub fn state(&self) -> (u64, u64) {
        (self.key, self.counter)
    }

    /// Child stream identified by a label. Does not advance `self`.
    pub fn child(&self, label: &str) -> Stream {
        let key = mix(self.key ^ mix(fnv1a(label.as_bytes()).wrapping_add(LABEL_TAG)));
        Stream { key, counter: 0 }
    }

    /// Child stream identified by an index. Does not advance `self`.
    pub fn child_index(&self, index: u64) -> Stream {
        let key = mix(self.key ^ mix(index.wrapping_mul(GOLDEN).wrapping_add(INDEX_TAG)));
        Stream { key, counter: 0 }
    }

    /// A plain `u64` seed for a subsystem that manages its own streams.
    pub fn derive_seed(&self, label: &str) -> u64 {
        self.child(label).key
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix(self.key.wrapping_add(self.counter.wrapping_mul(GOLDEN)))
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `0..n` without modulo bias. `n` must be nonzero.
    pub fn next_below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "next_below(0)");
        let zone = n.wrapping_mul(u64::MAX / n);
        loop {
            let x = self.next_u64();
            if x < zone || zone == 0 {
                return x % n;
            }
        }
    }

    /// Standard normal via Box–Muller. Consumes exactly two `u64` draws per
    /// call; the second Box–Muller value is discarded so the draw count per
    /// call is constant (easier to reason about stream positions).
    pub fn next_gaussian(&mut self) -> f64 {
        let u1 = self.next_f64();
        let u2 = self.next_f64();
        // 1 - u1 lies in (0, 1], so the log is finite.
        let r = (-2.0 * (1.0 - u1).ln()).sqrt();
        r * (std::f64::consts::TAU * u2).cos()
    }

    pub fn fill_gaussian(&mut self, out: &mut [f64]) {
        for v in out {
            *v = self.next_gaussian();
        }
    }

    /// Bernoulli draw; `p` outside `[0, 1]` is clamped by comparison semantics
    /// (p <= 0 never fires, p >= 1 always fires).
    pub fn next_bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_reference_splitmix64() {
        // First three outputs of the published SplitMix64 algorithm from
        // state 0. Anything that breaks these breaks every seeded artifact.
        let mut s = Stream::from_raw_key(0);
        assert_eq!(s.next_u64(), 0xE220_A839_7B1D_CDAF);
        assert_eq!(s.next_u64(), 0x6E78_9E6A_A1B9_65F4);
        assert_eq!(s.next_u64(), 0x06C4_5D18_8009_454F);
    }

    #[test]
    fn streams_are_reproducible_and_position_restorable() {
        let mut a = Stream::from_seed(42);
        let prefix: Vec<u64> = (0..5).map(|_| a.next_u64()).collect();
        let (key, counter) = a.state();
        let tail: Vec<u64> = (0..5).map(|_| a.next_u64()).collect();

        let mut b = Stream::from_seed(42);
        let prefix2: Vec<u64> = (0..5).map(|_| b.next_u64()).collect();
        assert_eq!(prefix, prefix2);

        let mut resumed = Stream::from_state(key, counter);
        let tail2: Vec<u64> = (0..5).map(|_| resumed.next_u64()).collect();
        assert_eq!(tail, tail2);
    }

    #[test]
    fn children_are_independent_of_parent_consumption() {
        let root = Stream::from_seed(7);
        let mut before = root.child("weights");
        let mut parent = root.clone();
        for _ in 0..100 {
            parent.next_u64();
        }
        let mut after = parent.child("weights");
        // child() keys off the parent's key, not its counter, so consuming
        // the parent must not move the child.
        assert_eq!(before.next_u64(), after.next_u64());
    }

    #[test]
    fn distinct_labels_and_indices_give_distinct_streams() {
        let root = Stream::from_seed(0);
        let mut seen = std::collections::HashSet::new();
        for label in ["a", "b", "ab", "a0", ""] {
            assert!(seen.insert(root.child(label).next_u64()));
        }
        for i in 0..64 {
            assert!(seen.insert(root.child_index(i).next_u64()));
        }
        assert!(seen.insert(root.child("a").child_index(0).next_u64()));
    }

    #[test]
    fn uniform_is_in_unit_interval() {
        let mut s = Stream::from_seed(3);
        for _ in 0..10_000 {
            let u = s.next_f64();
            assert!((0.0..1.0).contains(&u));
        }
    }

    #[test]
    fn gaussian_moments_are_sane() {
        let mut s = Stream::from_seed(11);
        let n = 20_000;
        let draws: Vec<f64> = (0..n).map(|_| s.next_gaussian()).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.03, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
        assert!(draws.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn next_below_is_in_range_and_hits_everything() {
        let mut s = Stream::from_seed(9);
        let mut seen = [false; 7];
        for _ in 0..1_000 {
            seen[s.next_below(7) as usize] = true;
        }
        assert!(seen.iter().all(|&b| b));
    }

    #[test]
    fn shuffle_is_a_permutation_and_deterministic() {
        let mut a = Stream::from_seed(5).child("shuffle");
        let mut b = Stream::from_seed(5).child("shuffle");
        let mut xs: Vec<usize> = (0..50).collect();
        let mut ys = xs.clone();
        a.shuffle(&mut xs);
        b.shuffle(&mut ys);
        assert_eq!(xs, ys);
        let mut sorted = xs.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
    }
}
