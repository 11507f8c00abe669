//! Residual encoder–decoder generators and stride-2 patch discriminators.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Builder, Init, Layer, Network, Padding, Tensor, TensorRecord, Trace};
use crate::scalar::Scalar;
use crate::stain_space::{RgbPatch, StainImage, StainMatrix};

const INIT_STD: f64 = 0.02;
const LEAKY_SLOPE: f64 = 0.2;
const MIN_WIDTH: usize = 8;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_width: usize,
    pub levels: usize,
    pub residual_blocks: usize,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self { in_channels: 3, out_channels: 3, base_width: 16, levels: 2, residual_blocks: 3 }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.base_width < MIN_WIDTH {
            return Err(Error::Config(format!("generator base_width {} < {MIN_WIDTH}", self.base_width)));
        }
        if self.levels < 1 {
            return Err(Error::Config("generator needs at least one downsampling level".into()));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("generator channel counts must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorSpec {
    pub in_channels: usize,
    pub base_width: usize,
    pub blocks: usize,
}

impl Default for DiscriminatorSpec {
    fn default() -> Self {
        Self { in_channels: 3, base_width: 16, blocks: 3 }
    }
}

impl DiscriminatorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.base_width < MIN_WIDTH {
            return Err(Error::Config(format!("discriminator base_width {} < {MIN_WIDTH}", self.base_width)));
        }
        if self.blocks < 1 {
            return Err(Error::Config("discriminator needs at least one block".into()));
        }
        if self.in_channels == 0 {
            return Err(Error::Config("discriminator needs input channels".into()));
        }
        Ok(())
    }
}

/// Anything that maps a batch of RGB patches to RGB patches of the same size.
pub trait ImageTransform<T: Scalar> {
    fn apply(&self, batch: &[RgbPatch<T>]) -> Result<Vec<RgbPatch<T>>>;
}

fn check_batch<T: Scalar>(batch: &[RgbPatch<T>]) -> Result<(usize, usize)> {
    let first = batch.first().ok_or_else(|| Error::Empty("image batch".into()))?;
    let dims = first.dims();
    if batch.iter().any(|p| p.dims() != dims) {
        return Err(Error::ShapeMismatch("batch mixes patch sizes".into()));
    }
    Ok(dims)
}

/// Image-to-image generator with outputs bounded to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator<T> {
    spec: GeneratorSpec,
    net: Network<T>,
}

pub fn build_generator<T: Scalar>(spec: &GeneratorSpec, seed: u64) -> Result<Generator<T>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = Builder::<T, _>::new(&mut rng, Init::Normal(INIT_STD));
    let w = spec.base_width;
    let mut layers = vec![b.conv(spec.in_channels, w, 7, 1, 3, Padding::Reflect), Layer::InstanceNorm, Layer::Relu];
    for l in 0..spec.levels {
        let (ci, co) = (w << l, w << (l + 1));
        layers.extend([b.conv(ci, co, 3, 2, 1, Padding::Zero), Layer::InstanceNorm, Layer::Relu]);
    }
    let wide = w << spec.levels;
    for _ in 0..spec.residual_blocks {
        let c1 = b.conv(wide, wide, 3, 1, 1, Padding::Reflect);
        let c2 = b.conv(wide, wide, 3, 1, 1, Padding::Reflect);
        layers.push(Layer::Residual(vec![c1, Layer::InstanceNorm, Layer::Relu, c2, Layer::InstanceNorm]));
    }
    for l in (0..spec.levels).rev() {
        let (ci, co) = (w << (l + 1), w << l);
        layers.extend([
            Layer::Upsample2x,
            b.conv(ci, co, 3, 1, 1, Padding::Reflect),
            Layer::InstanceNorm,
            Layer::Relu,
        ]);
    }
    layers.push(b.conv(w, spec.out_channels, 7, 1, 3, Padding::Reflect));
    layers.push(Layer::Sigmoid);
    Ok(Generator { spec: spec.clone(), net: b.finish(layers) })
}

impl<T: Scalar> Generator<T> {
    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    pub fn network(&self) -> &Network<T> {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Network<T> {
        &mut self.net
    }

    pub fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let [_, c, h, w] = x.shape();
        let stride = 1usize << self.spec.levels;
        if c != self.spec.in_channels {
            return Err(Error::ShapeMismatch(format!("generator expects {} channels, got {c}", self.spec.in_channels)));
        }
        if h == 0 || w == 0 || h % stride != 0 || w % stride != 0 {
            return Err(Error::ShapeMismatch(format!("{h}x{w} input is not divisible by the generator stride {stride}")));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        Ok(self.net.forward(x))
    }

    pub fn forward_train(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Trace<T>)> {
        self.check_input(x)?;
        Ok(self.net.forward_train(x))
    }

    pub fn record(&self) -> NetworkRecord {
        NetworkRecord {
            kind: NetworkKind::Generator(self.spec.clone()),
            dtype: T::NAME.to_string(),
            tensors: self.net.params().to_record(),
        }
    }
}

impl<T: Scalar> ImageTransform<T> for Generator<T> {
    fn apply(&self, batch: &[RgbPatch<T>]) -> Result<Vec<RgbPatch<T>>> {
        check_batch(batch)?;
        self.forward(&Tensor::from_patches(batch)?)?.to_patches()
    }
}

/// Patch discriminator producing an unbounded score map.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator<T> {
    spec: DiscriminatorSpec,
    net: Network<T>,
}

pub fn build_discriminator<T: Scalar>(spec: &DiscriminatorSpec, seed: u64) -> Result<Discriminator<T>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = Builder::<T, _>::new(&mut rng, Init::Normal(INIT_STD));
    let w = spec.base_width;
    let width = |i: usize| w << i.min(3);
    let mut layers = vec![b.conv(spec.in_channels, w, 4, 2, 1, Padding::Zero), Layer::LeakyRelu(LEAKY_SLOPE)];
    for i in 1..spec.blocks {
        layers.extend([
            b.conv(width(i - 1), width(i), 4, 2, 1, Padding::Zero),
            Layer::InstanceNorm,
            Layer::LeakyRelu(LEAKY_SLOPE),
        ]);
    }
    layers.push(b.conv(width(spec.blocks - 1), 1, 3, 1, 1, Padding::Zero));
    Ok(Discriminator { spec: spec.clone(), net: b.finish(layers) })
}

impl<T: Scalar> Discriminator<T> {
    pub fn spec(&self) -> &DiscriminatorSpec {
        &self.spec
    }

    pub fn network(&self) -> &Network<T> {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Network<T> {
        &mut self.net
    }

    pub fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let [_, c, h, w] = x.shape();
        let min = 1usize << self.spec.blocks;
        if c != self.spec.in_channels {
            return Err(Error::ShapeMismatch(format!("discriminator expects {} channels, got {c}", self.spec.in_channels)));
        }
        if h < min || w < min {
            return Err(Error::ShapeMismatch(format!("{h}x{w} input is smaller than {min}x{min}")));
        }
        Ok(())
    }

    /// `N x 1 x H/2^blocks x W/2^blocks` scores.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        Ok(self.net.forward(x))
    }

    pub fn forward_train(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Trace<T>)> {
        self.check_input(x)?;
        Ok(self.net.forward_train(x))
    }

    pub fn score_patches(&self, batch: &[RgbPatch<T>]) -> Result<Tensor<T>> {
        check_batch(batch)?;
        self.forward(&Tensor::from_patches(batch)?)
    }

    pub fn record(&self) -> NetworkRecord {
        NetworkRecord {
            kind: NetworkKind::Discriminator(self.spec.clone()),
            dtype: T::NAME.to_string(),
            tensors: self.net.params().to_record(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "spec", rename_all = "snake_case")]
pub enum NetworkKind {
    Generator(GeneratorSpec),
    Discriminator(DiscriminatorSpec),
}

/// Self-describing serialized network: architecture spec plus parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkRecord {
    #[serde(flatten)]
    pub kind: NetworkKind,
    pub dtype: String,
    pub tensors: Vec<TensorRecord>,
}

impl NetworkRecord {
    pub fn to_generator<T: Scalar>(&self) -> Result<Generator<T>> {
        let NetworkKind::Generator(spec) = &self.kind else {
            return Err(Error::CorruptCheckpoint("record does not hold a generator".into()));
        };
        let mut g = build_generator(spec, 0)?;
        g.net.params_mut().load_record(&self.tensors)?;
        Ok(g)
    }

    pub fn to_discriminator<T: Scalar>(&self) -> Result<Discriminator<T>> {
        let NetworkKind::Discriminator(spec) = &self.kind else {
            return Err(Error::CorruptCheckpoint("record does not hold a discriminator".into()));
        };
        let mut d = build_discriminator(spec, 0)?;
        d.net.params_mut().load_record(&self.tensors)?;
        Ok(d)
    }
}

/// Passes images through unchanged.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityTransform;

impl<T: Scalar> ImageTransform<T> for IdentityTransform {
    fn apply(&self, batch: &[RgbPatch<T>]) -> Result<Vec<RgbPatch<T>>> {
        check_batch(batch)?;
        Ok(batch.to_vec())
    }
}

/// Brightfield -> fluorescence by classical colour deconvolution.
#[derive(Clone, Debug)]
pub struct DeconvolutionTransform<T> {
    pub matrix: StainMatrix<T>,
}

impl<T: Scalar> ImageTransform<T> for DeconvolutionTransform<T> {
    fn apply(&self, batch: &[RgbPatch<T>]) -> Result<Vec<RgbPatch<T>>> {
        check_batch(batch)?;
        batch
            .iter()
            .map(|p| Ok(crate::stain_space::deconvolve(p, &self.matrix)?.to_fluorescence()))
            .collect()
    }
}

/// Fluorescence -> brightfield by Beer–Lambert reconstruction.
#[derive(Clone, Debug)]
pub struct ReconstructionTransform<T> {
    pub matrix: StainMatrix<T>,
}

impl<T: Scalar> ImageTransform<T> for ReconstructionTransform<T> {
    fn apply(&self, batch: &[RgbPatch<T>]) -> Result<Vec<RgbPatch<T>>> {
        check_batch(batch)?;
        Ok(batch.iter().map(|p| crate::stain_space::reconstruct(&p.as_stains(), &self.matrix)).collect())
    }
}

/// Converts a fluorescence view to concentrations (identity on values).
pub fn fluorescence_to_stains<T: Scalar>(batch: &[RgbPatch<T>]) -> Vec<StainImage<T>> {
    batch.iter().map(RgbPatch::as_stains).collect()
}
