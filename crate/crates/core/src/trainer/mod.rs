//! Two-stage optimisation.
//!
//! Stage 1 trains the duplex <-> IF CycleGAN (`G_AC`, `G_CA`, `D_A`, `D_C`)
//! with the stain constraints. Stage 2 freezes it, derives the synthetic
//! monoplex target `f_AB = G_CA ∘ κ ∘ G_AC` per batch, and trains `G_AB`
//! against `D_B` with the guidance loss.

mod checkpoint;
mod stage1;
mod stage2;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data_io::SamplingConfig;
use crate::error::{Error, Result};
use crate::losses::{
    lsgan_discriminator_loss_with_grad, lsgan_generator_loss_with_grad, LossReport, LossWeights, SeparationVariant,
    Stage,
};
use crate::networks::{fluorescence_to_stains, Discriminator, DiscriminatorSpec, GeneratorSpec, ImageTransform};
use crate::nn::{Adam, Tensor};
use crate::scalar::Scalar;
use crate::stain_space::{restain, RestainCoefficients, RgbPatch, StainMatrix};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, RngState, CHECKPOINT_FILE, CHECKPOINT_VERSION};
pub use stage1::{train_stage1, Stage1Data, Stage1Trainer};
pub use stage2::{train_stage2, Stage2Data, Stage2Trainer};

pub const LOG_FILE: &str = "log.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// 1 or 2.
    pub stage: u8,
    pub steps: usize,
    pub batch_size: usize,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weights: LossWeights,
    /// Restaining coefficients `alpha[out][in]` over (H, E, D).
    pub alpha: [[f64; 3]; 3],
    pub seed: u64,
    /// Save every this many steps; the final step is always saved. 0 saves
    /// only the final step.
    pub checkpoint_interval: usize,
    pub out_dir: PathBuf,
    pub generator: GeneratorSpec,
    pub discriminator: DiscriminatorSpec,
    pub sampling: SamplingConfig,
    pub separation_variant: SeparationVariant,
    /// Stain matrix rows for the pseudo-IF; `None` uses the default H/E/D rows.
    pub stain_matrix: Option<[[f64; 3]; 3]>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: 1,
            steps: 3000,
            batch_size: 1,
            lr_generator: 2e-4,
            lr_discriminator: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            weights: LossWeights::default(),
            alpha: RestainCoefficients::<f64>::default().matrix_f64(),
            seed: 0,
            checkpoint_interval: 1000,
            out_dir: PathBuf::from("runs"),
            generator: GeneratorSpec::default(),
            discriminator: DiscriminatorSpec::default(),
            sampling: SamplingConfig::default(),
            separation_variant: SeparationVariant::default(),
            stain_matrix: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        Stage::try_from(self.stage)?;
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        for (name, lr) in [("lr_generator", self.lr_generator), ("lr_discriminator", self.lr_discriminator)] {
            if !(lr.is_finite() && lr >= 0.0) {
                return Err(Error::Config(format!("{name} = {lr} must be finite and >= 0")));
            }
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} = {b} must lie in [0, 1)")));
            }
        }
        self.weights.validate()?;
        self.generator.validate()?;
        self.discriminator.validate()?;
        RestainCoefficients::<f64>::new(self.alpha)?;
        self.matrix::<f64>()?;
        if let Some(f) = self.sampling.labeled_fraction {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Config(format!("labeled_fraction = {f} must lie in [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn stage(&self) -> Result<Stage> {
        Stage::try_from(self.stage)
    }

    pub fn matrix<T: Scalar>(&self) -> Result<StainMatrix<T>> {
        match self.stain_matrix {
            Some(rows) => StainMatrix::from_rows(rows),
            None => Ok(StainMatrix::default()),
        }
    }

    pub fn restain_coefficients<T: Scalar>(&self) -> Result<RestainCoefficients<T>> {
        RestainCoefficients::new(self.alpha)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// `<out_dir>/<stage tag>`.
    pub fn stage_dir(&self) -> Result<PathBuf> {
        Ok(self.out_dir.join(self.stage()?.tag()))
    }
}

/// One training-log record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub stage: String,
    pub step: u64,
    pub generator: LossReport,
    pub discriminators: BTreeMap<String, f64>,
    /// Unweighted per-direction components of the generator terms.
    pub details: BTreeMap<String, f64>,
}

impl StepLog {
    pub fn term(&self, name: &str) -> Option<f64> {
        self.generator.value(name)
    }
}

/// `G_CA(κ(G_AC(x)))`, evaluated in inference mode; the output is treated as
/// a constant target.
pub fn compute_f_ab<T: Scalar>(
    x_a: &[RgbPatch<T>],
    g_ac: &dyn ImageTransform<T>,
    g_ca: &dyn ImageTransform<T>,
    alpha: &RestainCoefficients<T>,
) -> Result<Vec<RgbPatch<T>>> {
    let synthetic_if = g_ac.apply(x_a)?;
    if synthetic_if.len() != x_a.len() || synthetic_if.iter().zip(x_a).any(|(s, x)| s.dims() != x.dims()) {
        return Err(Error::ShapeMismatch("G_AC changed the batch shape".into()));
    }
    let restained: Vec<RgbPatch<T>> = fluorescence_to_stains(&synthetic_if)
        .iter()
        .map(|s| restain(s, alpha).to_fluorescence())
        .collect();
    let out = g_ca.apply(&restained)?;
    if out.len() != x_a.len() || out.iter().zip(x_a).any(|(o, x)| o.dims() != x.dims()) {
        return Err(Error::ShapeMismatch("G_CA changed the batch shape".into()));
    }
    Ok(out)
}

/// `f_AB` packaged as a transform, for evaluation next to the learned `G_AB`.
pub struct SyntheticMonoplex<'a, T: Scalar> {
    pub g_ac: &'a dyn ImageTransform<T>,
    pub g_ca: &'a dyn ImageTransform<T>,
    pub alpha: RestainCoefficients<T>,
}

impl<T: Scalar> ImageTransform<T> for SyntheticMonoplex<'_, T> {
    fn apply(&self, batch: &[RgbPatch<T>]) -> Result<Vec<RgbPatch<T>>> {
        compute_f_ab(batch, self.g_ac, self.g_ca, &self.alpha)
    }
}

/// Interleaved per-item HWC gradients -> NCHW tensor.
pub(crate) fn hwc_grad_tensor<T: Scalar>(grad: &[T], n: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    let per = h * w * 3;
    if grad.len() != n * per {
        return Err(Error::ShapeMismatch(format!("gradient of {} values for {n} items", grad.len())));
    }
    let views: Vec<&[T]> = grad.chunks_exact(per).collect();
    Tensor::from_hwc(h, w, 3, &views)
}

/// `a += s * b`.
pub(crate) fn axpy<T: Scalar>(a: &mut Tensor<T>, s: f64, b: &Tensor<T>) {
    let s = T::c(s);
    for (x, y) in a.as_mut_slice().iter_mut().zip(b.as_slice()) {
        *x += s * *y;
    }
}

pub(crate) fn scaled<T: Scalar>(t: &Tensor<T>, s: f64) -> Tensor<T> {
    let mut out = Tensor::zeros(t.shape());
    axpy(&mut out, s, t);
    out
}

/// Appends log records, keeping any earlier records up to `keep_through`.
pub(crate) struct LogWriter {
    file: fs::File,
}

impl LogWriter {
    pub(crate) fn open(dir: &Path, keep_through: u64) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOG_FILE);
        let mut kept = String::new();
        if keep_through > 0 && path.is_file() {
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            for line in text.lines().filter(|l| !l.trim().is_empty()) {
                let rec: StepLog = serde_json::from_str(line)?;
                if rec.step <= keep_through {
                    kept.push_str(line);
                    kept.push('\n');
                }
            }
        }
        fs::write(&path, kept).map_err(|e| Error::io(&path, e))?;
        let file = fs::OpenOptions::new().append(true).open(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self { file })
    }

    pub(crate) fn write(&mut self, rec: &StepLog) -> Result<()> {
        let mut line = serde_json::to_string(rec)?;
        line.push('\n');
        self.file.write_all(line.as_bytes()).map_err(|e| Error::io(LOG_FILE, e))
    }
}

/// Reads a JSONL training log.
pub fn read_log(path: &Path) -> Result<Vec<StepLog>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

pub(crate) fn check_total(step: u64, report: &LossReport) -> Result<()> {
    if !report.total.is_finite() {
        return Err(Error::Diverged { step, value: report.total });
    }
    Ok(())
}

pub(crate) fn should_checkpoint(step: usize, total: usize, interval: usize) -> bool {
    step == total || (interval > 0 && step.is_multiple_of(interval))
}

#[cfg(test)]
mod tests;

/// Seed for the `k`-th network of a run.
pub(crate) fn child_seed(seed: u64, k: u64) -> u64 {
    use rand::{RngCore, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(100 + k);
    rng.next_u64()
}

pub(crate) fn sampling_rng(seed: u64, stage: Stage) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stage as u64);
    rng
}

/// Scores of one discriminator pass, split into the first `n` samples and the rest.
pub(crate) fn split_scores<T: Scalar>(scores: &Tensor<T>, n: usize) -> (Vec<T>, Vec<T>) {
    let per = scores.sample_len();
    let (a, b) = scores.as_slice().split_at(n * per);
    (a.to_vec(), b.to_vec())
}

/// Tensor in the shape of `like` holding `values`.
pub(crate) fn tensor_like<T: Scalar>(like: &Tensor<T>, values: Vec<T>) -> Result<Tensor<T>> {
    Tensor::new(like.shape(), values)
}

/// One least-squares update of `d` on real against fake images; returns its loss.
pub(crate) fn update_discriminator<T: Scalar>(
    d: &mut Discriminator<T>,
    opt: &mut Adam<T>,
    real: &Tensor<T>,
    fake: &Tensor<T>,
) -> Result<f64> {
    let x = Tensor::concat_batch(&[real, fake])?;
    let (scores, trace) = d.forward_train(&x)?;
    let (r, f) = split_scores(&scores, real.batch());
    let lg = lsgan_discriminator_loss_with_grad(&r, &f)?;
    let mut g = lg.real_grad;
    g.extend(lg.fake_grad);
    let dy = tensor_like(&scores, g)?;
    let mut grads = d.network().params().zeros_like();
    d.network().backward_params(trace, dy, &mut grads);
    opt.step(d.network_mut().params_mut(), &grads);
    Ok(lg.value.f64())
}

/// Generator-side adversarial loss of `fake` under `d`, and its gradient
/// with respect to `fake`. `d` is left untouched.
pub(crate) fn adversarial_grad<T: Scalar>(d: &Discriminator<T>, fake: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    let (scores, trace) = d.forward_train(fake)?;
    let lg = lsgan_generator_loss_with_grad(scores.as_slice())?;
    let dy = tensor_like(&scores, lg.grad)?;
    Ok((lg.value.f64(), d.network().backward(trace, dy, None)))
}

pub(crate) fn check_finite_params<T: Scalar>(step: u64, nets: &[&crate::nn::Network<T>]) -> Result<()> {
    if nets.iter().all(|n| n.params().all_finite()) {
        Ok(())
    } else {
        Err(Error::Diverged { step, value: f64::NAN })
    }
}
