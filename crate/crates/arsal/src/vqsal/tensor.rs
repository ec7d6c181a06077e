//! Dense row-major f64 tensor used by the autodiff tape. Shapes are
//! explicit; (C, H, W) layout for feature maps, (K, D) for the codebook.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::Grid;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::dims(format!("{n} elements"), data.len().to_string()));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Gaussian init with the given standard deviation.
    pub fn randn(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        // Box-Muller; two uniforms per normal keeps the stream deterministic
        for _ in 0..n {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
            data.push(z * std);
        }
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape == other.shape
    }

    /// (C, H, W) accessors for feature maps.
    pub fn dims3(&self) -> (usize, usize, usize) {
        debug_assert_eq!(self.shape.len(), 3);
        (self.shape[0], self.shape[1], self.shape[2])
    }

    #[inline]
    pub fn at3(&self, c: usize, y: usize, x: usize) -> f64 {
        let (_, h, w) = self.dims3();
        self.data[(c * h + y) * w + x]
    }

    /// Single-channel image as a [`Grid`].
    pub fn to_grid(&self) -> Result<Grid> {
        let (c, h, w) = match self.shape.as_slice() {
            [c, h, w] => (*c, *h, *w),
            [h, w] => (1, *h, *w),
            other => return Err(Error::invalid(format!("tensor shape {other:?} is not a 2D map"))),
        };
        if c != 1 {
            return Err(Error::invalid(format!("expected 1 channel, got {c}")));
        }
        Grid::from_vec(w, h, self.data.clone())
    }

    /// Image planes -> (C, H, W) tensor.
    pub fn from_grids(planes: &[&Grid]) -> Tensor {
        let (w, h) = (planes[0].width(), planes[0].height());
        let mut data = Vec::with_capacity(planes.len() * w * h);
        for p in planes {
            debug_assert!(p.width() == w && p.height() == h);
            data.extend_from_slice(p.as_slice());
        }
        Tensor {
            shape: vec![planes.len(), h, w],
            data,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn randn_is_seed_deterministic() {
        let mut a = ChaCha8Rng::seed_from_u64(5);
        let mut b = ChaCha8Rng::seed_from_u64(5);
        let ta = Tensor::randn(&[3, 4], 0.1, &mut a);
        let tb = Tensor::randn(&[3, 4], 0.1, &mut b);
        assert_eq!(ta.data, tb.data);
    }

    #[test]
    fn grid_conversion_round_trips() {
        let g = Grid::from_fn(3, 2, |x, y| (x + 10 * y) as f64);
        let t = Tensor::from_grids(&[&g]);
        assert_eq!(t.shape, vec![1, 2, 3]);
        assert_eq!(t.to_grid().unwrap(), g);
    }
}
