use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Exponent of the upper edge of the lowest histogram bin, `[0, 2^-8)`.
pub const HIST_MIN_EXP: i32 = -8;
/// Exponent of the upper edge of the last bounded bin, `[2^7, 2^8)`.
pub const HIST_MAX_EXP: i32 = 8;
/// Bounded bins plus one overflow bin for `|x| >= 2^8`.
pub const HIST_BINS: usize = (HIST_MAX_EXP - HIST_MIN_EXP + 2) as usize;
pub const RESERVOIR_CAP: usize = 65_536;

/// Streaming magnitude statistics of one tensor: a power-of-two histogram,
/// the sum of squares and a uniform reservoir sample.
#[derive(Clone, Debug)]
pub struct TensorStats {
    histogram: [u64; HIST_BINS],
    count: u64,
    sum_sq: f64,
    max_abs: f64,
    reservoir: Vec<f32>,
    cap: usize,
    rng: ChaCha8Rng,
}

impl TensorStats {
    pub fn new(seed: u64) -> Self {
        Self::with_capacity(RESERVOIR_CAP, seed)
    }

    pub fn with_capacity(cap: usize, seed: u64) -> Self {
        Self {
            histogram: [0; HIST_BINS],
            count: 0,
            sum_sq: 0.0,
            max_abs: 0.0,
            reservoir: Vec::new(),
            cap: cap.max(1),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Bin `b >= 1` holds `[2^(b-9), 2^(b-8))`; bin 0 holds everything below
    /// `2^-8` and the last bin everything from `2^8` up.
    pub fn bin_index(magnitude: f64) -> usize {
        let lowest = (HIST_MIN_EXP as f64).exp2();
        if magnitude < lowest {
            return 0;
        }
        if magnitude >= (HIST_MAX_EXP as f64).exp2() {
            return HIST_BINS - 1;
        }
        let mut k = magnitude.log2().floor() as i32;
        while (k as f64).exp2() > magnitude {
            k -= 1;
        }
        while ((k + 1) as f64).exp2() <= magnitude {
            k += 1;
        }
        (k - HIST_MIN_EXP + 1) as usize
    }

    /// `[lower, upper)` magnitude range of a bin.
    pub fn bin_range(bin: usize) -> (f64, f64) {
        match bin {
            0 => (0.0, (HIST_MIN_EXP as f64).exp2()),
            b if b >= HIST_BINS - 1 => ((HIST_MAX_EXP as f64).exp2(), f64::INFINITY),
            b => {
                let lo = b as i32 + HIST_MIN_EXP - 1;
                ((lo as f64).exp2(), ((lo + 1) as f64).exp2())
            }
        }
    }

    /// Adds one value. NaN is ignored.
    pub fn push(&mut self, x: f64) {
        if x.is_nan() {
            return;
        }
        let a = x.abs();
        self.histogram[Self::bin_index(a)] += 1;
        self.count += 1;
        self.sum_sq += x * x;
        self.max_abs = self.max_abs.max(a);
        if self.reservoir.len() < self.cap {
            self.reservoir.push(x as f32);
        } else {
            let j = self.rng.gen_range(0..self.count);
            if (j as usize) < self.cap {
                self.reservoir[j as usize] = x as f32;
            }
        }
    }

    pub fn extend<I: IntoIterator<Item = f64>>(&mut self, values: I) {
        for v in values {
            self.push(v);
        }
    }

    /// Combines two streams. Histogram, count and sum of squares add exactly;
    /// the reservoir is resampled in proportion to each side's count.
    pub fn merge(&mut self, other: &TensorStats) {
        for (a, b) in self.histogram.iter_mut().zip(&other.histogram) {
            *a += b;
        }
        let (na, nb) = (self.count, other.count);
        self.count += other.count;
        self.sum_sq += other.sum_sq;
        self.max_abs = self.max_abs.max(other.max_abs);
        if self.reservoir.len() + other.reservoir.len() <= self.cap {
            self.reservoir.extend_from_slice(&other.reservoir);
            return;
        }
        let mut left = std::mem::take(&mut self.reservoir);
        let mut right = other.reservoir.clone();
        left.shuffle(&mut self.rng);
        right.shuffle(&mut self.rng);
        let (mut rem_a, mut rem_b) = (na, nb);
        let mut out = Vec::with_capacity(self.cap);
        while out.len() < self.cap && (!left.is_empty() || !right.is_empty()) {
            let take_left = if left.is_empty() {
                false
            } else if right.is_empty() {
                true
            } else {
                self.rng.gen_range(0..rem_a + rem_b) < rem_a
            };
            if take_left {
                out.push(left.pop().expect("nonempty"));
                rem_a = rem_a.saturating_sub(1).max(1);
            } else {
                out.push(right.pop().expect("nonempty"));
                rem_b = rem_b.saturating_sub(1).max(1);
            }
        }
        self.reservoir = out;
    }

    pub fn histogram(&self) -> &[u64; HIST_BINS] {
        &self.histogram
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn sum_sq(&self) -> f64 {
        self.sum_sq
    }

    pub fn mean_square(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.sum_sq / self.count as f64
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.max_abs
    }

    pub fn reservoir(&self) -> &[f32] {
        &self.reservoir
    }

    pub fn capacity(&self) -> usize {
        self.cap
    }

    /// Number of samples with `|x| >= 2^exp`, for `exp` in `[-8, 8]`.
    pub fn count_at_least(&self, exp: i32) -> u64 {
        let exp = exp.clamp(HIST_MIN_EXP, HIST_MAX_EXP);
        let first = (exp - HIST_MIN_EXP + 1) as usize;
        self.histogram[first..].iter().sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn bins_are_power_of_two_intervals() {
        assert_eq!(TensorStats::bin_index(0.0), 0);
        assert_eq!(TensorStats::bin_index(0.003), 0);
        assert_eq!(TensorStats::bin_index(1.0 / 256.0), 1);
        assert_eq!(TensorStats::bin_index(0.999), 8);
        assert_eq!(TensorStats::bin_index(1.0), 9);
        assert_eq!(TensorStats::bin_index(255.9), 16);
        assert_eq!(TensorStats::bin_index(256.0), 17);
        for b in 0..HIST_BINS {
            let (lo, hi) = TensorStats::bin_range(b);
            assert_eq!(TensorStats::bin_index(lo), b);
            if hi.is_finite() {
                assert_eq!(TensorStats::bin_index(hi * (1.0 - 1e-12)), b);
            }
        }
    }

    #[test]
    fn histogram_sums_to_count() {
        let mut s = TensorStats::with_capacity(16, 0);
        s.extend((0..1000).map(|i| (i as f64 - 500.0) * 0.37));
        assert_eq!(s.histogram().iter().sum::<u64>(), s.count());
        assert!(s.reservoir().len() <= 16);
    }

    #[test]
    fn zeros_fill_lowest_bin() {
        let mut s = TensorStats::new(1);
        s.extend(std::iter::repeat_n(0.0, 100));
        assert_eq!(s.histogram()[0], 100);
    }

    #[test]
    fn merge_matches_union() {
        let xs: Vec<f64> = (0..5000).map(|i| ((i * 7919) % 1000) as f64 / 37.0 - 13.0).collect();
        let (a, b) = xs.split_at(2100);
        let mut sa = TensorStats::with_capacity(512, 3);
        sa.extend(a.iter().copied());
        let mut sb = TensorStats::with_capacity(512, 4);
        sb.extend(b.iter().copied());
        let mut all = TensorStats::with_capacity(512, 5);
        all.extend(xs.iter().copied());
        sa.merge(&sb);
        assert_eq!(sa.histogram(), all.histogram());
        assert_eq!(sa.count(), all.count());
        assert!((sa.sum_sq() - all.sum_sq()).abs() < 1e-9 * all.sum_sq());
        assert_eq!(sa.reservoir().len(), 512);
    }

    #[test]
    fn reservoir_mean_is_unbiased() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let normal = Normal::new(1.5, 2.0).unwrap();
        let mut s = TensorStats::new(12);
        let mut sum = 0.0;
        let n = 1_000_000;
        for _ in 0..n {
            let x = normal.sample(&mut rng);
            sum += x;
            s.push(x);
        }
        let full_mean = sum / n as f64;
        let r = s.reservoir();
        let mean = r.iter().map(|&v| v as f64).sum::<f64>() / r.len() as f64;
        let sigma = 2.0 / (r.len() as f64).sqrt();
        assert!((mean - full_mean).abs() < 3.0 * sigma, "{mean} vs {full_mean}");
    }

    #[test]
    fn count_at_least_matches_direct_count() {
        let xs: Vec<f64> = (0..3000).map(|i| (i as f64 * 0.013).sin() * (i % 17) as f64).collect();
        let mut s = TensorStats::new(0);
        s.extend(xs.iter().copied());
        for e in HIST_MIN_EXP..=HIST_MAX_EXP {
            let direct = xs.iter().filter(|x| x.abs() >= (e as f64).exp2()).count() as u64;
            assert_eq!(s.count_at_least(e), direct, "exp {e}");
        }
    }
}
