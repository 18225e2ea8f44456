//! Weak and strong augmentation families.
//!
//! Each transform comes in two layers: a sampler that draws its random
//! parameters from an explicit rng, and a pure `*_with` function that
//! applies given parameters. Tests drive the pure layer directly.

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::rng::Rng as StreamRng;
use crate::tensor::Tensor;
use rand::SeedableRng;

/// Smallest scaling factor a draw is clamped to.
pub const MIN_SCALE_FACTOR: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Std of additive noise in the weak view, for data scaled to [0, 1].
    pub weak_jitter_sigma: f64,
    /// Scaling ratio; per-channel factors are drawn from `Normal(1, 0.1 * ratio)`.
    pub weak_scale_sigma: f64,
    pub strong_jitter_sigma: f64,
    /// Upper bound on the number of permuted segments.
    pub max_segments: usize,
    /// Optional circular shift applied before scaling in the weak view.
    pub time_shift_max: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            weak_jitter_sigma: 0.05,
            weak_scale_sigma: 2.0,
            strong_jitter_sigma: 0.3,
            max_segments: 10,
            time_shift_max: 0,
        }
    }
}

impl AugmentConfig {
    /// All transforms reduce to the identity.
    pub fn identity() -> Self {
        Self {
            weak_jitter_sigma: 0.0,
            weak_scale_sigma: 0.0,
            strong_jitter_sigma: 0.0,
            max_segments: 1,
            time_shift_max: 0,
        }
    }

    /// Check the recommended ranges for [0, 1]-normalized data.
    pub fn validate(&self, length: Option<usize>) -> Result<()> {
        if !(0.0..=0.1).contains(&self.weak_jitter_sigma) {
            return Err(Error::config(format!(
                "weak_jitter_sigma must lie in [0, 0.1], got {}",
                self.weak_jitter_sigma
            )));
        }
        if !(0.1..=1.0).contains(&self.strong_jitter_sigma) {
            return Err(Error::config(format!(
                "strong_jitter_sigma must lie in [0.1, 1], got {}",
                self.strong_jitter_sigma
            )));
        }
        if !(self.weak_scale_sigma > 0.0 && self.weak_scale_sigma.is_finite()) {
            return Err(Error::config("weak_scale_sigma must be positive"));
        }
        if self.max_segments == 0 {
            return Err(Error::config("max_segments must be at least 1"));
        }
        if let Some(t) = length {
            if self.max_segments > t {
                return Err(Error::config(format!("max_segments {} exceeds series length {t}", self.max_segments)));
            }
            if self.time_shift_max >= t {
                return Err(Error::config(format!("time_shift_max {} must be below series length {t}", self.time_shift_max)));
            }
        }
        Ok(())
    }
}

fn dims(x: &Tensor<f32>) -> (usize, usize, usize) {
    assert_eq!(x.rank(), 3, "augmentations expect (B, C, T) tensors");
    (x.dim(0), x.dim(1), x.dim(2))
}

/// Add iid `Normal(0, sigma^2)` noise to every element.
pub fn jitter<R: Rng + ?Sized>(x: &Tensor<f32>, sigma: f64, rng: &mut R) -> Tensor<f32> {
    assert!(sigma >= 0.0, "jitter sigma must be non-negative");
    if sigma == 0.0 {
        return x.clone();
    }
    let noise = Normal::new(0.0, sigma).expect("valid sigma");
    let data = x.data().iter().map(|&v| (v as f64 + noise.sample(rng)) as f32).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// One factor per (sample, channel) from `Normal(1, 0.1 * scale_sigma)`,
/// clamped to at least [`MIN_SCALE_FACTOR`].
pub fn draw_scale_factors<R: Rng + ?Sized>(count: usize, scale_sigma: f64, rng: &mut R) -> Vec<f64> {
    if scale_sigma == 0.0 {
        return vec![1.0; count];
    }
    let dist = Normal::new(1.0, 0.1 * scale_sigma).expect("valid scale sigma");
    (0..count).map(|_| dist.sample(rng).max(MIN_SCALE_FACTOR)).collect()
}

/// Multiply row `(b, c)` by `factors[b * C + c]`.
pub fn scale_with(x: &Tensor<f32>, factors: &[f64]) -> Tensor<f32> {
    let (b, c, t) = dims(x);
    assert_eq!(factors.len(), b * c, "one factor per (sample, channel)");
    let mut out = x.clone();
    for (row, &f) in out.data_mut().chunks_exact_mut(t).zip(factors) {
        if f != 1.0 {
            for v in row {
                *v = (*v as f64 * f) as f32;
            }
        }
    }
    out
}

pub fn scale<R: Rng + ?Sized>(x: &Tensor<f32>, scale_sigma: f64, rng: &mut R) -> Tensor<f32> {
    let (b, c, _) = dims(x);
    let factors = draw_scale_factors(b * c, scale_sigma, rng);
    scale_with(x, &factors)
}

/// How one sample's time axis is cut and reordered.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentPlan {
    /// Ascending start indices of segments 1.., each in `1..T`.
    pub cuts: Vec<usize>,
    /// Output order of the `cuts.len() + 1` segments.
    pub order: Vec<usize>,
}

impl SegmentPlan {
    pub fn identity() -> Self {
        Self {
            cuts: Vec::new(),
            order: vec![0],
        }
    }

    /// Segment count uniform in `1..=max_segments`; cut points drawn without
    /// replacement from the interior indices; order a uniform permutation.
    pub fn draw<R: Rng + ?Sized>(length: usize, max_segments: usize, rng: &mut R) -> Self {
        assert!(max_segments >= 1 && max_segments <= length, "need 1 <= M <= T");
        let m = rng.random_range(1..=max_segments);
        if m == 1 {
            return Self::identity();
        }
        let mut cuts: Vec<usize> = index::sample(rng, length - 1, m - 1).into_iter().map(|i| i + 1).collect();
        cuts.sort_unstable();
        let mut order: Vec<usize> = (0..m).collect();
        order.shuffle(rng);
        Self { cuts, order }
    }

    fn apply(&self, src: &[f32], dst: &mut Vec<f32>) {
        let t = src.len();
        let bounds: Vec<usize> = std::iter::once(0).chain(self.cuts.iter().copied()).chain(std::iter::once(t)).collect();
        for &s in &self.order {
            dst.extend_from_slice(&src[bounds[s]..bounds[s + 1]]);
        }
    }
}

/// Reorder each sample's segments per `plans[b]`; all channels of a sample
/// share one plan.
pub fn permute_segments_with(x: &Tensor<f32>, plans: &[SegmentPlan]) -> Tensor<f32> {
    let (b, c, t) = dims(x);
    assert_eq!(plans.len(), b, "one plan per sample");
    let mut data = Vec::with_capacity(x.len());
    for (n, plan) in plans.iter().enumerate() {
        for ch in 0..c {
            let off = (n * c + ch) * t;
            plan.apply(&x.data()[off..off + t], &mut data);
        }
    }
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

pub fn permute_segments<R: Rng + ?Sized>(x: &Tensor<f32>, max_segments: usize, rng: &mut R) -> Tensor<f32> {
    let (b, _, t) = dims(x);
    let plans: Vec<SegmentPlan> = (0..b).map(|_| SegmentPlan::draw(t, max_segments, rng)).collect();
    permute_segments_with(x, &plans)
}

/// Circular shift of sample `b` by `shifts[b]` steps (`out[t] = x[t - s]`).
pub fn time_shift_with(x: &Tensor<f32>, shifts: &[i64]) -> Tensor<f32> {
    let (b, c, t) = dims(x);
    assert_eq!(shifts.len(), b, "one shift per sample");
    let mut out = x.clone();
    for (n, &s) in shifts.iter().enumerate() {
        let r = s.rem_euclid(t as i64) as usize;
        if r == 0 {
            continue;
        }
        for ch in 0..c {
            let off = (n * c + ch) * t;
            out.data_mut()[off..off + t].rotate_right(r);
        }
    }
    out
}

pub fn time_shift<R: Rng + ?Sized>(x: &Tensor<f32>, max_shift: usize, rng: &mut R) -> Tensor<f32> {
    let (b, _, t) = dims(x);
    assert!(max_shift < t, "max_shift must be below the series length");
    let m = max_shift as i64;
    let shifts: Vec<i64> = (0..b).map(|_| if m == 0 { 0 } else { rng.random_range(-m..=m) }).collect();
    time_shift_with(x, &shifts)
}

/// Optional time shift, then scaling, then small jitter.
pub fn weak_augment<R: Rng + ?Sized>(b: &Batch, cfg: &AugmentConfig, rng: &mut R) -> Batch {
    let mut x = b.x.clone();
    if cfg.time_shift_max > 0 {
        x = time_shift(&x, cfg.time_shift_max, rng);
    }
    let x = scale(&x, cfg.weak_scale_sigma, rng);
    let x = jitter(&x, cfg.weak_jitter_sigma, rng);
    Batch { x, y: b.y.clone() }
}

/// Segment permutation, then large jitter.
pub fn strong_augment<R: Rng + ?Sized>(b: &Batch, cfg: &AugmentConfig, rng: &mut R) -> Batch {
    let x = permute_segments(&b.x, cfg.max_segments, rng);
    let x = jitter(&x, cfg.strong_jitter_sigma, rng);
    Batch { x, y: b.y.clone() }
}

/// Which augmentation family produces each of the two views.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewMode {
    #[default]
    WeakStrong,
    WeakOnly,
    StrongOnly,
}

/// Two augmented views of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewPair {
    pub weak: Batch,
    pub strong: Batch,
    pub source: Batch,
}

/// Weak and strong views from two independent substreams of `rng`.
pub fn make_view_pair<R: Rng + ?Sized>(b: &Batch, cfg: &AugmentConfig, rng: &mut R) -> ViewPair {
    make_views(b, cfg, ViewMode::WeakStrong, rng)
}

/// Like [`make_view_pair`], with the view families chosen by `mode`. In the
/// single-family modes both slots hold independent draws of that family.
pub fn make_views<R: Rng + ?Sized>(b: &Batch, cfg: &AugmentConfig, mode: ViewMode, rng: &mut R) -> ViewPair {
    let mut first = StreamRng::seed_from_u64(rng.random());
    let mut second = StreamRng::seed_from_u64(rng.random());
    let (weak, strong) = match mode {
        ViewMode::WeakStrong => (weak_augment(b, cfg, &mut first), strong_augment(b, cfg, &mut second)),
        ViewMode::WeakOnly => (weak_augment(b, cfg, &mut first), weak_augment(b, cfg, &mut second)),
        ViewMode::StrongOnly => (strong_augment(b, cfg, &mut first), strong_augment(b, cfg, &mut second)),
    };
    ViewPair {
        weak,
        strong,
        source: b.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> StreamRng {
        StreamRng::seed_from_u64(seed)
    }

    fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f32> {
        let mut r = rng(seed);
        Tensor::from_fn(shape, |_| r.random::<f32>())
    }

    fn bits(x: &Tensor<f32>) -> Vec<u32> {
        x.data().iter().map(|v| v.to_bits()).collect()
    }

    #[test]
    fn zero_sigma_jitter_is_identity() {
        let x = random_tensor(&[2, 3, 8], 1);
        assert_eq!(bits(&jitter(&x, 0.0, &mut rng(0))), bits(&x));
    }

    #[test]
    fn jitter_is_seeded() {
        let x = random_tensor(&[2, 3, 8], 1);
        assert_eq!(jitter(&x, 0.4, &mut rng(5)), jitter(&x, 0.4, &mut rng(5)));
        assert_ne!(jitter(&x, 0.4, &mut rng(5)), jitter(&x, 0.4, &mut rng(6)));
    }

    #[test]
    fn unit_factor_scale_is_identity() {
        let x = random_tensor(&[2, 2, 5], 3);
        assert_eq!(bits(&scale_with(&x, &[1.0; 4])), bits(&x));
    }

    #[test]
    fn scaling_ones_by_fixed_factor() {
        let x = Tensor::full(&[1, 1, 4], 1.0f32);
        assert!(scale_with(&x, &[1.7]).data().iter().all(|&v| v == 1.7f32));
    }

    #[test]
    fn scaling_preserves_zero_mean() {
        let x = Tensor::new(vec![1, 2, 4], vec![1.0, -1.0, 2.0, -2.0, 0.5, 0.5, -0.5, -0.5]).unwrap();
        let y = scale(&x, 2.0, &mut rng(4));
        for row in y.data().chunks(4) {
            assert!(row.iter().sum::<f32>().abs() < 1e-6);
        }
    }

    #[test]
    fn scale_factors_are_clamped_positive() {
        let f = draw_scale_factors(10_000, 200.0, &mut rng(2));
        assert!(f.iter().all(|&v| v >= MIN_SCALE_FACTOR));
    }

    #[test]
    fn single_segment_is_identity() {
        let x = random_tensor(&[3, 2, 9], 7);
        assert_eq!(bits(&permute_segments(&x, 1, &mut rng(1))), bits(&x));
    }

    #[test]
    fn forced_two_segment_swap() {
        let x = Tensor::new(vec![1, 1, 6], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let plan = SegmentPlan {
            cuts: vec![3],
            order: vec![1, 0],
        };
        assert_eq!(permute_segments_with(&x, &[plan]).data(), &[4.0, 5.0, 6.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn zero_shift_identity_and_inverse_shift() {
        let x = random_tensor(&[2, 3, 10], 9);
        assert_eq!(bits(&time_shift(&x, 0, &mut rng(3))), bits(&x));
        let there = time_shift_with(&x, &[3, -4]);
        assert_eq!(bits(&time_shift_with(&there, &[-3, 4])), bits(&x));
    }

    #[test]
    fn shift_direction() {
        let x = Tensor::new(vec![1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(time_shift_with(&x, &[1]).data(), &[4.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn identity_config_views_equal_source() {
        let b = Batch {
            x: random_tensor(&[4, 2, 16], 2),
            y: vec![0, 1, -1, 0],
        };
        let cfg = AugmentConfig::identity();
        for mode in [ViewMode::WeakStrong, ViewMode::WeakOnly, ViewMode::StrongOnly] {
            let v = make_views(&b, &cfg, mode, &mut rng(8));
            assert_eq!(v.weak, b);
            assert_eq!(v.strong, b);
        }
    }

    #[test]
    fn view_pairs_are_seeded() {
        let b = Batch {
            x: random_tensor(&[4, 2, 16], 2),
            y: vec![0; 4],
        };
        let cfg = AugmentConfig::default();
        let a = make_view_pair(&b, &cfg, &mut rng(8));
        let c = make_view_pair(&b, &cfg, &mut rng(8));
        assert_eq!(a, c);
        assert_eq!(a.weak.x.shape(), b.x.shape());
        assert_eq!(a.strong.x.shape(), b.x.shape());
        assert_ne!(a.weak.x, a.strong.x);
    }

    #[test]
    fn validate_ranges() {
        assert!(AugmentConfig::default().validate(Some(128)).is_ok());
        let bad = AugmentConfig {
            weak_jitter_sigma: 0.2,
            ..Default::default()
        };
        assert!(bad.validate(None).is_err());
        let bad = AugmentConfig {
            max_segments: 20,
            ..Default::default()
        };
        assert!(bad.validate(Some(16)).is_err());
    }

    proptest! {
        #[test]
        fn permutation_preserves_multisets(seed in any::<u64>(), m in 1usize..12, t in 12usize..40) {
            let x = random_tensor(&[3, 2, t], seed);
            let y = permute_segments(&x, m, &mut rng(seed ^ 1));
            prop_assert_eq!(y.shape(), x.shape());
            for (a, b) in x.data().chunks(t).zip(y.data().chunks(t)) {
                let mut a: Vec<u32> = a.iter().map(|v| v.to_bits()).collect();
                let mut b: Vec<u32> = b.iter().map(|v| v.to_bits()).collect();
                a.sort_unstable();
                b.sort_unstable();
                prop_assert_eq!(a, b);
            }
        }

        #[test]
        fn strong_without_jitter_preserves_multisets(seed in any::<u64>()) {
            let b = Batch { x: random_tensor(&[2, 1, 20], seed), y: vec![0, 0] };
            let cfg = AugmentConfig { strong_jitter_sigma: 0.0, max_segments: 5, ..Default::default() };
            let s = strong_augment(&b, &cfg, &mut rng(seed));
            for (a, c) in b.x.data().chunks(20).zip(s.x.data().chunks(20)) {
                let mut a = a.to_vec();
                let mut c = c.to_vec();
                a.sort_by(f32::total_cmp);
                c.sort_by(f32::total_cmp);
                prop_assert_eq!(a, c);
            }
        }

        #[test]
        fn circular_shift_preserves_channel_means(seed in any::<u64>(), s in -15i64..15) {
            let x = random_tensor(&[1, 2, 16], seed);
            let y = time_shift_with(&x, &[s]);
            for (a, b) in x.data().chunks(16).zip(y.data().chunks(16)) {
                let ma: f64 = a.iter().map(|&v| v as f64).sum::<f64>() / 16.0;
                let mb: f64 = b.iter().map(|&v| v as f64).sum::<f64>() / 16.0;
                prop_assert!((ma - mb).abs() < 1e-6);
            }
        }
    }
}
