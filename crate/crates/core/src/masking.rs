//! Implicit masks: cross-attention mask `M1`, noise-estimate mask `M2`,
//! their intersection scaled by the edit strength, and user overrides.
//!
//! Thresholds use the nearest-rank percentile: with `k = ceil(lambda N)` the
//! threshold is the `k`-th smallest value, and a mask selects every element
//! `>=` it.

use crate::error::{Error, Result};
use crate::field::Field;
use crate::model::AttentionStash;

/// Mean over layers and heads of each listed token's map, summed over tokens,
/// as a `1 x h x w` field.
pub fn aggregate_attention(stash: &AttentionStash, tokens: &[usize]) -> Result<Field> {
    if tokens.is_empty() {
        return Err(Error::param(
            "attention aggregation needs at least one token",
        ));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t >= stash.tokens()) {
        return Err(Error::param(format!(
            "token position {t} outside a stash of {} tokens",
            stash.tokens()
        )));
    }
    let (h, w) = stash.resolution();
    let mut acc = vec![0.0f64; h * w];
    let norm = 1.0 / (stash.layers() * stash.heads()) as f64;
    for &tok in tokens {
        let mut mean = vec![0.0f64; h * w];
        for l in 0..stash.layers() {
            for hd in 0..stash.heads() {
                mean.iter_mut()
                    .zip(stash.map(l, hd, tok))
                    .for_each(|(m, v)| *m += v as f64);
            }
        }
        acc.iter_mut().zip(mean).for_each(|(a, m)| *a += m * norm);
    }
    Field::new((1, h, w), acc.into_iter().map(|v| v as f32).collect())
}

/// Nearest-neighbour block replication to `(height, width)`.
pub fn upsample_nearest(map: &Field, target: (usize, usize)) -> Result<Field> {
    let (c, h, w) = map.shape();
    let (th, tw) = target;
    if th % h != 0 || tw % w != 0 || th == 0 || tw == 0 {
        return Err(Error::param(format!(
            "cannot upsample {h}x{w} to {th}x{tw} by an integer factor"
        )));
    }
    let (fy, fx) = (th / h, tw / w);
    Ok(Field::from_fn((c, th, tw), |ci, y, x| {
        map.get(ci, y / fy, x / fx)
    }))
}

/// Nearest-rank `lambda`-quantile of `values`.
pub fn percentile_threshold(values: &[f32], lambda: f64) -> Result<f32> {
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(Error::param(format!(
            "threshold lambda {lambda} outside (0, 1)"
        )));
    }
    if values.is_empty() {
        return Err(Error::param("percentile of an empty set"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::param("percentile of non-finite values"));
    }
    let n = values.len();
    let k = ((lambda * n as f64 - 1e-9).ceil() as usize).clamp(1, n);
    let mut sorted = values.to_vec();
    let (_, kth, _) = sorted.select_nth_unstable_by(k - 1, |a, b| a.total_cmp(b));
    Ok(*kth)
}

/// `1` where `|v| >= ` the `lambda`-percentile of `|v|`, else `0`.
pub fn threshold_mask(values: &Field, lambda: f64) -> Result<Field> {
    let abs = values.map(f32::abs);
    let thr = percentile_threshold(abs.data(), lambda)?;
    Ok(abs.map(|v| if v >= thr { 1.0 } else { 0.0 }))
}

/// `M1` from an upsampled aggregated attention map.
pub fn mask_from_attention(a_up: &Field, lambda: f64) -> Result<Field> {
    threshold_mask(a_up, lambda)
}

/// `M2` from a guidance direction, thresholding the channel-mean magnitude.
pub fn mask_from_noise(psi: &Field, lambda: f64) -> Result<Field> {
    threshold_mask(&psi.channel_mean_abs(), lambda)
}

pub fn is_binary(mask: &Field) -> bool {
    mask.data().iter().all(|&v| v == 0.0 || v == 1.0)
}

/// `s_e * M1 * M2`, or `s_e * user_mask` when an override is given.
pub fn phi_mask(m1: &Field, m2: &Field, scale: f32, user_mask: Option<&Field>) -> Result<Field> {
    m1.ensure_same_shape(m2)?;
    if let Some(u) = user_mask {
        m1.ensure_same_shape(u)?;
        if !is_binary(u) {
            return Err(Error::param("user mask must be binary"));
        }
        return Ok(u.scale(scale));
    }
    m1.zip_map(m2, |a, b| scale * (a * b))
}

/// Intersection over union of two binary masks; `0` when both are empty.
pub fn iou(a: &Field, b: &Field) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x != 0.0, y != 0.0);
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    })
}

pub fn count_selected(mask: &Field) -> usize {
    mask.data().iter().filter(|&&v| v != 0.0).count()
}

/// Masks used by one concept at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPair {
    pub m1: Field,
    pub m2: Field,
    pub phi: Field,
    pub lambda: f64,
    pub m1_count: usize,
    pub m2_count: usize,
    pub phi_count: usize,
}

impl MaskPair {
    pub fn new(m1: Field, m2: Field, phi: Field, lambda: f64) -> Self {
        let m1_count = count_selected(&m1);
        let m2_count = count_selected(&m2);
        let phi_count = count_selected(&phi);
        Self {
            m1,
            m2,
            phi,
            lambda,
            m1_count,
            m2_count,
            phi_count,
        }
    }

    /// `M1 * M2` as a binary mask.
    pub fn intersection(&self) -> Field {
        self.m1.mul(&self.m2).expect("masks share a shape")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spatial(h: usize, w: usize, v: Vec<f32>) -> Field {
        Field::new((1, h, w), v).unwrap()
    }

    #[test]
    fn aggregation_cases() {
        // 1 layer, 2 heads, 2 tokens, 2x2; token maps P (token 0) and Q (token 1)
        let p = [0.1f32, 0.2, 0.3, 0.4];
        let q = [0.9f32, 0.8, 0.7, 0.6];
        let mut probs = Vec::new();
        for _head in 0..2 {
            for i in 0..4 {
                probs.push(p[i]);
                probs.push(q[i]);
            }
        }
        let s = AttentionStash::new(1, 2, 2, (2, 2), probs).unwrap();
        let a = aggregate_attention(&s, &[0]).unwrap();
        assert_eq!(a.data(), &p);
        let both = aggregate_attention(&s, &[0, 1]).unwrap();
        for (v, (x, y)) in both.data().iter().zip(p.iter().zip(&q)) {
            assert!((v - (x + y)).abs() < 1e-6);
        }
        assert!(aggregate_attention(&s, &[]).is_err());
        assert!(aggregate_attention(&s, &[2]).is_err());
    }

    #[test]
    fn upsample_blocks() {
        let m = spatial(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let up = upsample_nearest(&m, (4, 4)).unwrap();
        assert_eq!(
            up.data(),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
        assert!(upsample_nearest(&m, (2, 2)).unwrap().bit_eq(&m));
        assert!(upsample_nearest(&m, (3, 4)).is_err());
    }

    #[test]
    fn percentile_by_hand() {
        let v: Vec<f32> = (1..=100).map(|i| i as f32).collect();
        assert_eq!(percentile_threshold(&v, 0.9).unwrap(), 90.0);
        let m = threshold_mask(&spatial(10, 10, v.clone()), 0.9).unwrap();
        assert_eq!(count_selected(&m), 11);
        assert_eq!(percentile_threshold(&v, 1e-9).unwrap(), 1.0);
        assert_eq!(percentile_threshold(&[5.0; 7], 0.7).unwrap(), 5.0);
        assert!(percentile_threshold(&v, 0.0).is_err());
        assert!(percentile_threshold(&v, 1.0).is_err());
    }

    #[test]
    fn attention_mask_cases() {
        let m = mask_from_attention(&spatial(2, 2, vec![1.0, 2.0, 3.0, 4.0]), 0.5).unwrap();
        assert_eq!(m.data(), &[0.0, 1.0, 1.0, 1.0]);
        let uniform = mask_from_attention(&Field::filled((1, 4, 4), 0.25), 0.8).unwrap();
        assert_eq!(count_selected(&uniform), 16);
        // concentrated block of 4 pixels in 16
        let block = Field::from_fn((1, 4, 4), |_, y, x| if y < 2 && x < 2 { 0.9 } else { 0.1 });
        let m = mask_from_attention(&block, 0.8).unwrap();
        assert!(m.bit_eq(&block.map(|v| if v > 0.5 { 1.0 } else { 0.0 })));
    }

    #[test]
    fn noise_mask_cases() {
        let zero = Field::zeros((3, 4, 4));
        assert_eq!(count_selected(&mask_from_noise(&zero, 0.9).unwrap()), 16);
        // k = ceil(0.99 * 64) = 64 puts the threshold on the single maximum
        let mut one = Field::zeros((2, 8, 8));
        one.set(1, 3, 7, -2.0);
        let m = mask_from_noise(&one, 0.99).unwrap();
        assert_eq!(count_selected(&m), 1);
        assert_eq!(m.get(0, 3, 7), 1.0);
    }

    #[test]
    fn phi_cases() {
        let ones = Field::filled((1, 2, 2), 1.0);
        assert!(phi_mask(&ones, &ones, 3.0, None)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 3.0));
        let a = spatial(2, 2, vec![1.0, 1.0, 0.0, 0.0]);
        let b = spatial(2, 2, vec![0.0, 0.0, 1.0, 1.0]);
        assert_eq!(count_selected(&phi_mask(&a, &b, 5.0, None).unwrap()), 0);
        let left = spatial(2, 2, vec![1.0, 0.0, 1.0, 0.0]);
        let phi = phi_mask(&a, &b, 2.0, Some(&left)).unwrap();
        assert_eq!(phi.data(), &[2.0, 0.0, 2.0, 0.0]);
        let not_binary = spatial(2, 2, vec![0.5, 0.0, 1.0, 0.0]);
        assert!(phi_mask(&a, &b, 2.0, Some(&not_binary)).is_err());
    }

    #[test]
    fn iou_cases() {
        let a = spatial(1, 4, vec![1.0, 1.0, 0.0, 0.0]);
        let b = spatial(1, 4, vec![0.0, 1.0, 1.0, 0.0]);
        assert!((iou(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        let empty = Field::zeros((1, 1, 4));
        assert_eq!(iou(&empty, &a).unwrap(), 0.0);
        assert_eq!(iou(&a.mul(&empty).unwrap(), &b).unwrap(), 0.0);
    }

    proptest::proptest! {
        #[test]
        fn distinct_values_select_exact_count(n in 2usize..300, lambda in 0.01f64..0.99, seed in 0u64..1000) {
            use rand::seq::SliceRandom;
            let mut v: Vec<f32> = (0..n).map(|i| i as f32 * 0.5 - 3.0).collect();
            v.shuffle(&mut crate::rng::stream(seed, 0));
            let pos: Vec<f32> = v.iter().map(|x| x + 10.0).collect();
            let mask = threshold_mask(&Field::new((1, 1, n), pos).unwrap(), lambda).unwrap();
            let k = (lambda * n as f64 - 1e-9).ceil().max(1.0) as usize;
            proptest::prop_assert_eq!(count_selected(&mask), n - k + 1);
        }

        #[test]
        fn upsampling_preserves_percentile(h in 1usize..6, w in 1usize..6, f in 1usize..4, lambda in 0.01f64..0.99, seed in 0u64..1000) {
            let base = crate::rng::normal_field(seed, 1, (1, h, w));
            let up = upsample_nearest(&base, (h * f, w * f)).unwrap();
            proptest::prop_assert_eq!(
                percentile_threshold(base.data(), lambda).unwrap(),
                percentile_threshold(up.data(), lambda).unwrap()
            );
        }
    }
}
