/// 64-bit finaliser from MurmurHash3.
#[inline]
fn fmix64(mut z: u64) -> u64 {
    z ^= z >> 33;
    z = z.wrapping_mul(0xff51_afd7_ed55_8ccd);
    z ^= z >> 33;
    z = z.wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    z ^ (z >> 33)
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;
const LABEL_MUL: u64 = 0xbf58_476d_1ce4_e5b9;
const LABEL_ADD: u64 = 0x94d0_49bb_1331_11eb;

/// Position in a tree of independent random streams.
///
/// The path of split labels is folded into a 64-bit digest, so a key is a
/// pure function of `(seed, path)` and draws are a pure function of
/// `(seed, path, index)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngKey {
    seed: u64,
    digest: u64,
    depth: u32,
}

impl RngKey {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            digest: fmix64(seed ^ 0x6a09_e667_f3bc_c909),
            depth: 0,
        }
    }

    pub fn from_path(seed: u64, path: &[u64]) -> Self {
        path.iter().fold(Self::new(seed), |k, &l| k.split(l))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of splits applied since the root.
    pub fn depth(&self) -> u32 {
        self.depth
    }

    /// Child key with `label` appended to the path.
    pub fn split(&self, label: u64) -> Self {
        let salt = label
            .wrapping_mul(LABEL_MUL)
            .wrapping_add(LABEL_ADD ^ u64::from(self.depth));
        Self {
            seed: self.seed,
            digest: fmix64(self.digest ^ fmix64(salt)),
            depth: self.depth + 1,
        }
    }

    /// Raw 64 bits of draw number `index`.
    #[inline]
    pub fn bits(&self, index: u64) -> u64 {
        fmix64(self.digest.wrapping_add(GOLDEN.wrapping_mul(index.wrapping_add(1))))
    }

    /// Uniform on `[0, 1)` with 53 random bits.
    #[inline]
    pub fn uniform(&self, index: u64) -> f64 {
        (self.bits(index) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn stream(&self) -> RngStream {
        RngStream {
            key: *self,
            counter: 0,
        }
    }
}

/// Sequential reader over the draws of one key.
#[derive(Debug, Clone)]
pub struct RngStream {
    key: RngKey,
    counter: u64,
}

impl RngStream {
    pub fn next_u64(&mut self) -> u64 {
        let b = self.key.bits(self.counter);
        self.counter += 1;
        b
    }

    pub fn next_f64(&mut self) -> f64 {
        let u = self.key.uniform(self.counter);
        self.counter += 1;
        u
    }

    /// Uniform integer in `0..n` (n > 0), by multiply-shift on 64 bits.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        ((u128::from(self.next_u64()) * u128::from(n)) >> 64) as u64
    }

    pub fn position(&self) -> u64 {
        self.counter
    }

    /// Fisher-Yates shuffle in place.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distinct_labels_differ() {
        let k = RngKey::new(7);
        assert_ne!(k.split(0).uniform(0), k.split(1).uniform(0));
        assert_ne!(k.split(0).split(1), k.split(1).split(0));
    }

    #[test]
    fn split_is_pure() {
        let k = RngKey::new(7);
        assert_eq!(k.split(0).split(1), k.split(0).split(1));
        assert_eq!(RngKey::from_path(7, &[0, 1]), k.split(0).split(1));
    }

    #[test]
    fn uniform_mean_over_split_streams() {
        let root = RngKey::new(123);
        let mut sum = 0.0;
        let n = 1_000_000u64;
        for i in 0..1000 {
            let k = root.split(i);
            for j in 0..n / 1000 {
                let u = k.uniform(j);
                assert!((0.0..1.0).contains(&u));
                sum += u;
            }
        }
        assert!((sum / n as f64 - 0.5).abs() < 0.002);
    }

    #[test]
    fn below_is_in_range() {
        let mut s = RngKey::new(1).stream();
        let mut counts = [0usize; 3];
        for _ in 0..30_000 {
            counts[s.below(3) as usize] += 1;
        }
        for c in counts {
            assert!((c as f64 / 30_000.0 - 1.0 / 3.0).abs() < 0.015);
        }
    }
}
