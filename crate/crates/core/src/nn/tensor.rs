use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::stain_space::{RgbPatch, StainImage};

/// Dense `N x C x H x W` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: [usize; 4],
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: [usize; 4], data: Vec<T>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::ShapeMismatch(format!("{} values for shape {shape:?}", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        Self { shape, data: vec![T::zero(); shape.iter().product()] }
    }

    pub fn filled(shape: [usize; 4], v: T) -> Self {
        Self { shape, data: vec![v; shape.iter().product()] }
    }

    #[inline]
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    #[inline]
    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.shape[2]
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.shape[3]
    }

    #[inline]
    pub fn sample_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn sample(&self, i: usize) -> &[T] {
        let l = self.sample_len();
        &self.data[i * l..(i + 1) * l]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [T] {
        let l = self.sample_len();
        &mut self.data[i * l..(i + 1) * l]
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += *b);
        Ok(())
    }

    /// Splits the batch dimension at `at`.
    pub fn split_batch(self, at: usize) -> (Tensor<T>, Tensor<T>) {
        let l = self.sample_len();
        let [n, c, h, w] = self.shape;
        assert!(at <= n);
        let mut head = self.data;
        let tail = head.split_off(at * l);
        (Tensor { shape: [at, c, h, w], data: head }, Tensor { shape: [n - at, c, h, w], data: tail })
    }

    pub fn concat_batch(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let first = parts.first().ok_or_else(|| Error::Empty("no tensors to concatenate".into()))?;
        let [_, c, h, w] = first.shape;
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            if p.shape[1..] != first.shape[1..] {
                return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", p.shape, first.shape)));
            }
            n += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor { shape: [n, c, h, w], data })
    }

    /// Packs interleaved `H x W x C` images into a batch.
    pub fn from_hwc(height: usize, width: usize, channels: usize, images: &[&[T]]) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Empty("empty image batch".into()));
        }
        let plane = height * width;
        let mut data = vec![T::zero(); images.len() * channels * plane];
        for (i, img) in images.iter().enumerate() {
            if img.len() != plane * channels {
                return Err(Error::ShapeMismatch(format!(
                    "image {i} has {} values, expected {height}x{width}x{channels}",
                    img.len()
                )));
            }
            let dst = &mut data[i * channels * plane..(i + 1) * channels * plane];
            for p in 0..plane {
                for c in 0..channels {
                    dst[c * plane + p] = img[p * channels + c];
                }
            }
        }
        Ok(Self { shape: [images.len(), channels, height, width], data })
    }

    /// Sample `i` as an interleaved `H x W x C` buffer.
    pub fn to_hwc(&self, i: usize) -> Vec<T> {
        let [_, c, h, w] = self.shape;
        let plane = h * w;
        let src = self.sample(i);
        let mut out = vec![T::zero(); c * plane];
        for p in 0..plane {
            for ch in 0..c {
                out[p * c + ch] = src[ch * plane + p];
            }
        }
        out
    }

    pub fn from_patches(patches: &[RgbPatch<T>]) -> Result<Self> {
        let first = patches.first().ok_or_else(|| Error::Empty("empty patch batch".into()))?;
        let (h, w) = first.dims();
        let views: Vec<&[T]> = patches.iter().map(|p| p.as_slice()).collect();
        Self::from_hwc(h, w, 3, &views)
    }

    pub fn from_stains(stains: &[StainImage<T>]) -> Result<Self> {
        let first = stains.first().ok_or_else(|| Error::Empty("empty stain batch".into()))?;
        let (h, w) = first.dims();
        let views: Vec<&[T]> = stains.iter().map(|p| p.as_slice()).collect();
        Self::from_hwc(h, w, 3, &views)
    }

    /// Three-channel batch as RGB patches, clamped into `[0, 1]`.
    pub fn to_patches(&self) -> Result<Vec<RgbPatch<T>>> {
        if self.channels() != 3 {
            return Err(Error::ShapeMismatch(format!("expected 3 channels, got {}", self.channels())));
        }
        (0..self.batch()).map(|i| RgbPatch::clamped(self.height(), self.width(), self.to_hwc(i))).collect()
    }
}
