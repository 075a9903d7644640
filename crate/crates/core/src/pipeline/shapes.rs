//! Seeded synthetic dataset of axis-aligned shapes with exact masks.
//!
//! Each image holds one to three boxes of a single kind: kind 1 is bright,
//! kind 2 dark, kind 3 a checkerboard. Captions are the null token then the kind.

use rand::Rng;

use crate::field::Field;
use crate::model::tiny::NULL_TOKEN;
use crate::rng;

pub const KINDS: u32 = 3;
/// Vocabulary size needed for shape captions.
pub const VOCAB: usize = KINDS as usize + 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub kind: u32,
    pub y: usize,
    pub x: usize,
    pub h: usize,
    pub w: usize,
}

impl Rect {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.y && y < self.y + self.h && x >= self.x && x < self.x + self.w
    }

    fn overlaps(&self, o: &Rect, margin: usize) -> bool {
        self.y < o.y + o.h + margin
            && o.y < self.y + self.h + margin
            && self.x < o.x + o.w + margin
            && o.x < self.x + self.w + margin
    }

    pub fn area(&self) -> usize {
        self.h * self.w
    }
}

pub fn intensity(kind: u32, y: usize, x: usize) -> f32 {
    match kind {
        1 => 1.0,
        2 => -1.0,
        _ => {
            if (y / 2 + x / 2).is_multiple_of(2) {
                1.0
            } else {
                -1.0
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapeSample {
    pub field: Field,
    pub rects: Vec<Rect>,
}

impl ShapeSample {
    /// Full caption: null token then kinds in ascending order.
    pub fn caption(&self) -> Vec<u32> {
        let mut kinds: Vec<u32> = self.rects.iter().map(|r| r.kind).collect();
        kinds.sort_unstable();
        kinds.dedup();
        std::iter::once(NULL_TOKEN).chain(kinds).collect()
    }

    pub fn mask(&self, kind: u32) -> Field {
        let (_, h, w) = self.field.shape();
        Field::from_fn((1, h, w), |_, y, x| {
            if self
                .rects
                .iter()
                .any(|r| r.kind == kind && r.contains(y, x))
            {
                1.0
            } else {
                0.0
            }
        })
    }
}

/// Deterministic generator over `(seed, index)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShapeDataset {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
}

impl ShapeDataset {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            height: 32,
            width: 32,
        }
    }

    pub fn sample(&self, index: u64) -> ShapeSample {
        let mut r = rng::stream(self.seed, rng::purpose::DATA + index);
        let count = r.gen_range(1..=3usize);
        let kind = r.gen_range(1..=KINDS);
        let max_side = (self.height.min(self.width) / 2).max(2);
        let min_side = (max_side / 2).max(1);
        let mut rects: Vec<Rect> = Vec::new();
        for _ in 0..count {
            for _ in 0..50 {
                let h = r.gen_range(min_side..=max_side);
                let w = r.gen_range(min_side..=max_side);
                let cand = Rect {
                    kind,
                    y: r.gen_range(0..=self.height - h),
                    x: r.gen_range(0..=self.width - w),
                    h,
                    w,
                };
                if rects.iter().all(|o| !cand.overlaps(o, 1)) {
                    rects.push(cand);
                    break;
                }
            }
        }
        let field = Field::from_fn((1, self.height, self.width), |_, y, x| {
            rects
                .iter()
                .find(|rc| rc.contains(y, x))
                .map_or(0.0, |rc| intensity(rc.kind, y, x))
        });
        ShapeSample { field, rects }
    }

    /// Training pair: the field and its full caption.
    pub fn training_pair(&self, index: u64) -> (Field, Vec<u32>) {
        let s = self.sample(index);
        let caption = s.caption();
        (s.field, caption)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_disjoint() {
        let ds = ShapeDataset::new(3);
        for i in 0..50 {
            let a = ds.sample(i);
            assert_eq!(a, ds.sample(i));
            assert!(!a.rects.is_empty() && a.rects.len() <= 3);
            let kind = a.rects[0].kind;
            let total: usize = a.rects.iter().map(Rect::area).sum();
            assert_eq!(crate::masking::count_selected(&a.mask(kind)), total);
            for (j, r) in a.rects.iter().enumerate() {
                assert_eq!(r.kind, kind);
                for o in &a.rects[j + 1..] {
                    assert!(!r.overlaps(o, 0));
                }
            }
            assert_eq!(a.caption(), vec![NULL_TOKEN, kind]);
            let (f, cap) = ds.training_pair(i);
            assert!(f.bit_eq(&a.field));
            assert_eq!(cap, a.caption());
        }
    }
}
