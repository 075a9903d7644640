//! Dense channel-major real fields: the carrier for states, noise estimates,
//! guidance directions and masks.

use crate::error::{Error, Result};

/// `(channels, height, width)`.
pub type Shape = (usize, usize, usize);

/// A `C x H x W` array of 32-bit floats stored channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    shape: Shape,
    data: Vec<f32>,
}

impl Field {
    pub fn new(shape: Shape, data: Vec<f32>) -> Result<Self> {
        let (c, h, w) = shape;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::param(format!(
                "field shape {shape:?} has a zero extent"
            )));
        }
        let len = c
            .checked_mul(h)
            .and_then(|v| v.checked_mul(w))
            .ok_or_else(|| Error::param(format!("field shape {shape:?} overflows")))?;
        if data.len() != len {
            return Err(Error::param(format!(
                "field data length {} does not match shape {shape:?}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::param(format!("non-finite value at index {i}")));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: Shape, value: f32) -> Self {
        let (c, h, w) = shape;
        assert!(c > 0 && h > 0 && w > 0, "zero extent in {shape:?}");
        Self {
            shape,
            data: vec![value; c * h * w],
        }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let (c, h, w) = shape;
        let mut data = Vec::with_capacity(c * h * w);
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    data.push(f(ci, y, x));
                }
            }
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.shape.0
    }

    /// `(height, width)`.
    pub fn spatial(&self) -> (usize, usize) {
        (self.shape.1, self.shape.2)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        let (_, h, w) = self.shape;
        self.data[(c * h + y) * w + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        let (_, h, w) = self.shape;
        self.data[(c * h + y) * w + x] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_same_shape(&self, other: &Field) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape {
                expected: self.shape,
                got: other.shape,
            });
        }
        Ok(())
    }

    /// Elementwise `f(self, other)`.
    pub fn zip_map(&self, other: &Field, f: impl Fn(f32, f32) -> f32) -> Result<Field> {
        self.ensure_same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Field {
            shape: self.shape,
            data,
        })
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Field {
        Field {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add(&self, other: &Field) -> Result<Field> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Field) -> Result<Field> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Field) -> Result<Field> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: f32) -> Field {
        self.map(|v| v * s)
    }

    pub fn add_assign(&mut self, other: &Field) -> Result<()> {
        self.ensure_same_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Multiplies every channel by a single-channel spatial field.
    pub fn mul_spatial(&self, spatial: &Field) -> Result<Field> {
        let (c, h, w) = self.shape;
        if spatial.shape != (1, h, w) {
            return Err(Error::Shape {
                expected: (1, h, w),
                got: spatial.shape,
            });
        }
        let plane = h * w;
        let mut data = self.data.clone();
        for ci in 0..c {
            for (v, m) in data[ci * plane..(ci + 1) * plane]
                .iter_mut()
                .zip(&spatial.data)
            {
                *v *= m;
            }
        }
        Ok(Field {
            shape: self.shape,
            data,
        })
    }

    /// Mean over channels of `|v|`, as a `1 x H x W` field.
    pub fn channel_mean_abs(&self) -> Field {
        let (c, h, w) = self.shape;
        let plane = h * w;
        let mut out = vec![0.0f32; plane];
        for ci in 0..c {
            for (o, v) in out.iter_mut().zip(&self.data[ci * plane..(ci + 1) * plane]) {
                *o += v.abs();
            }
        }
        let inv = 1.0 / c as f32;
        out.iter_mut().for_each(|o| *o *= inv);
        Field {
            shape: (1, h, w),
            data: out,
        }
    }

    pub fn channel(&self, c: usize) -> Field {
        let (_, h, w) = self.shape;
        let plane = h * w;
        Field {
            shape: (1, h, w),
            data: self.data[c * plane..(c + 1) * plane].to_vec(),
        }
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|&v| (v as f64) * (v as f64)).sum()
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    pub fn dot(&self, other: &Field) -> Result<f64> {
        self.ensure_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum())
    }

    /// Bitwise equality, distinguishing `0.0` from `-0.0`.
    pub fn bit_eq(&self, other: &Field) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Root-mean-square difference, accumulated in f64.
pub fn rmse(a: &Field, b: &Field) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let ss: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok((ss / a.len() as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_length_and_nan() {
        assert!(Field::new((1, 2, 2), vec![0.0; 3]).is_err());
        assert!(Field::new((1, 1, 2), vec![0.0, f32::NAN]).is_err());
        assert!(Field::new((0, 1, 1), vec![]).is_err());
    }

    #[test]
    fn channel_major_indexing() {
        let f = Field::from_fn((2, 2, 3), |c, y, x| (c * 100 + y * 10 + x) as f32);
        assert_eq!(f.get(1, 1, 2), 112.0);
        assert_eq!(f.data()[6], 100.0);
    }

    #[test]
    fn spatial_broadcast_multiplies_each_channel() {
        let f = Field::filled((3, 1, 2), 2.0);
        let m = Field::new((1, 1, 2), vec![1.0, 0.0]).unwrap();
        let out = f.mul_spatial(&m).unwrap();
        assert_eq!(out.data(), &[2.0, 0.0, 2.0, 0.0, 2.0, 0.0]);
        assert!(f.mul_spatial(&Field::zeros((1, 2, 2))).is_err());
    }

    #[test]
    fn rmse_of_offset() {
        let a = Field::zeros((1, 2, 2));
        let b = Field::filled((1, 2, 2), 0.5);
        assert!((rmse(&a, &b).unwrap() - 0.5).abs() < 1e-12);
    }
}
