//! Scalar objectives and their gradients.
//!
//! Every loss comes in two flavours: a plain function returning the value,
//! and a `*_with_grad` variant returning the value together with the
//! gradient with respect to its (first) image or score argument. Batched
//! image gradients are laid out like the inputs: items in order, each item
//! interleaved `H x W x 3`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::stain_space::{LabelMask, RgbPatch, Stain, StainImage};

/// Per-pixel guard added to ratio denominators.
pub const RATIO_EPSILON: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct LossGrad<T> {
    pub value: T,
    pub grad: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorLossGrad<T> {
    pub value: T,
    pub real_grad: Vec<T>,
    pub fake_grad: Vec<T>,
}

#[inline]
fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

fn check_scores<T: Scalar>(scores: &[T], what: &str) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::Empty(format!("{what} scores")));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::param("scores", format!("non-finite {what} score")));
    }
    Ok(())
}

/// `mean((s - 1)^2)` over the fake scores.
pub fn lsgan_generator_loss<T: Scalar>(d_fake_scores: &[T]) -> Result<T> {
    Ok(lsgan_generator_loss_with_grad(d_fake_scores)?.value)
}

pub fn lsgan_generator_loss_with_grad<T: Scalar>(d_fake_scores: &[T]) -> Result<LossGrad<T>> {
    check_scores(d_fake_scores, "fake")?;
    let n = T::c(d_fake_scores.len() as f64);
    let value = d_fake_scores.iter().fold(T::zero(), |a, s| a + (*s - T::one()) * (*s - T::one())) / n;
    let grad = d_fake_scores.iter().map(|s| T::c(2.0) * (*s - T::one()) / n).collect();
    Ok(LossGrad { value, grad })
}

/// `½·mean((real - 1)^2) + ½·mean(fake^2)`.
pub fn lsgan_discriminator_loss<T: Scalar>(d_real_scores: &[T], d_fake_scores: &[T]) -> Result<T> {
    Ok(lsgan_discriminator_loss_with_grad(d_real_scores, d_fake_scores)?.value)
}

pub fn lsgan_discriminator_loss_with_grad<T: Scalar>(
    d_real_scores: &[T],
    d_fake_scores: &[T],
) -> Result<DiscriminatorLossGrad<T>> {
    check_scores(d_real_scores, "real")?;
    check_scores(d_fake_scores, "fake")?;
    let half = T::c(0.5);
    let nr = T::c(d_real_scores.len() as f64);
    let nf = T::c(d_fake_scores.len() as f64);
    let real = d_real_scores.iter().fold(T::zero(), |a, s| a + (*s - T::one()) * (*s - T::one())) / nr;
    let fake = d_fake_scores.iter().fold(T::zero(), |a, s| a + *s * *s) / nf;
    Ok(DiscriminatorLossGrad {
        value: half * real + half * fake,
        real_grad: d_real_scores.iter().map(|s| (*s - T::one()) / nr).collect(),
        fake_grad: d_fake_scores.iter().map(|s| *s / nf).collect(),
    })
}

/// Mean absolute difference of two equally sized buffers; gradient is with
/// respect to `a`.
pub fn mean_abs_diff_with_grad<T: Scalar>(a: &[T], b: &[T]) -> Result<LossGrad<T>> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!("{} vs {} values", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::Empty("L1 inputs".into()));
    }
    let n = T::c(a.len() as f64);
    let value = a.iter().zip(b).fold(T::zero(), |s, (x, y)| s + (*x - *y).abs()) / n;
    let grad = a.iter().zip(b).map(|(x, y)| sign(*x - *y) / n).collect();
    Ok(LossGrad { value, grad })
}

fn flatten_batches<'a, T: Scalar, I>(a: I, b: I) -> Result<(Vec<T>, Vec<T>)>
where
    I: IntoIterator<Item = (&'a [T], (usize, usize))>,
{
    let (mut fa, mut fb) = (Vec::new(), Vec::new());
    let mut a_items: Vec<_> = a.into_iter().collect();
    let b_items: Vec<_> = b.into_iter().collect();
    if a_items.len() != b_items.len() {
        return Err(Error::ShapeMismatch(format!("batch sizes {} vs {}", a_items.len(), b_items.len())));
    }
    for (i, ((xa, da), (xb, db))) in a_items.drain(..).zip(b_items).enumerate() {
        if da != db {
            return Err(Error::ShapeMismatch(format!("item {i}: {da:?} vs {db:?}")));
        }
        fa.extend_from_slice(xa);
        fb.extend_from_slice(xb);
    }
    Ok((fa, fb))
}

fn rgb_items<T: Scalar>(b: &[RgbPatch<T>]) -> impl Iterator<Item = (&[T], (usize, usize))> {
    b.iter().map(|p| (p.as_slice(), p.dims()))
}

fn stain_items<T: Scalar>(b: &[StainImage<T>]) -> impl Iterator<Item = (&[T], (usize, usize))> {
    b.iter().map(|p| (p.as_slice(), p.dims()))
}

/// Mean L1 between the direct translation and the synthetic monoplex target.
pub fn guidance_loss<T: Scalar>(g_ab_out: &[RgbPatch<T>], f_ab_out: &[RgbPatch<T>]) -> Result<T> {
    Ok(guidance_loss_with_grad(g_ab_out, f_ab_out)?.value)
}

pub fn guidance_loss_with_grad<T: Scalar>(g_ab_out: &[RgbPatch<T>], f_ab_out: &[RgbPatch<T>]) -> Result<LossGrad<T>> {
    let (a, b) = flatten_batches(rgb_items(g_ab_out), rgb_items(f_ab_out))?;
    mean_abs_diff_with_grad(&a, &b)
}

/// Mean L1 reconstruction error; gradient with respect to the reconstruction.
pub fn cycle_loss<T: Scalar>(x: &[RgbPatch<T>], x_reconstructed: &[RgbPatch<T>]) -> Result<T> {
    Ok(cycle_loss_with_grad(x, x_reconstructed)?.value)
}

pub fn cycle_loss_with_grad<T: Scalar>(x: &[RgbPatch<T>], x_reconstructed: &[RgbPatch<T>]) -> Result<LossGrad<T>> {
    let (rec, orig) = flatten_batches(rgb_items(x_reconstructed), rgb_items(x))?;
    mean_abs_diff_with_grad(&rec, &orig)
}

/// Mean absolute E-channel value of synthetic IF images made from monoplex
/// patches.
pub fn eosin_absence_loss<T: Scalar>(g_ac_of_b: &[StainImage<T>]) -> Result<T> {
    Ok(eosin_absence_loss_with_grad(g_ac_of_b)?.value)
}

pub fn eosin_absence_loss_with_grad<T: Scalar>(g_ac_of_b: &[StainImage<T>]) -> Result<LossGrad<T>> {
    let first = g_ac_of_b.first().ok_or_else(|| Error::Empty("eosin-absence batch".into()))?;
    if g_ac_of_b.iter().any(|s| s.dims() != first.dims()) {
        return Err(Error::ShapeMismatch("eosin-absence batch mixes image sizes".into()));
    }
    let e = Stain::E.index();
    let total: usize = g_ac_of_b.iter().map(|s| s.as_slice().len() / 3).sum();
    let n = T::c(total as f64);
    let mut value = T::zero();
    let mut grad = Vec::with_capacity(total * 3);
    for s in g_ac_of_b {
        for px in s.as_slice().chunks_exact(3) {
            value += px[e].abs();
            for (c, v) in px.iter().enumerate() {
                grad.push(if c == e { sign(*v) / n } else { T::zero() });
            }
        }
    }
    Ok(LossGrad { value: value / n, grad })
}

/// How the labelled-pixel separation term is scored.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeparationVariant {
    /// `mean over M of (1 - r_c)`: zero when all signal sits in the target channel.
    #[default]
    PurityComplement,
    /// `mean over M of r_c · x_c`, the literal ratio-weighted channel value.
    AsWritten,
}

/// Separation term over the pixels of `mask`, with the purity ratio
/// `r_c(p) = x_c(p) / (Σ_k |x_k(p)| + ε)`.
pub fn supervised_separation_loss<T: Scalar>(
    g_ac_out: &StainImage<T>,
    mask: &LabelMask,
    target: Stain,
    variant: SeparationVariant,
) -> Result<T> {
    Ok(supervised_separation_loss_with_grad(g_ac_out, mask, target, variant)?.value)
}

pub fn supervised_separation_loss_with_grad<T: Scalar>(
    g_ac_out: &StainImage<T>,
    mask: &LabelMask,
    target: Stain,
    variant: SeparationVariant,
) -> Result<LossGrad<T>> {
    if (mask.height(), mask.width()) != g_ac_out.dims() {
        return Err(Error::ShapeMismatch(format!(
            "mask {}x{} vs image {:?}",
            mask.height(),
            mask.width(),
            g_ac_out.dims()
        )));
    }
    let count = mask.count();
    if count == 0 {
        return Err(Error::Empty("separation mask has no labelled pixels".into()));
    }
    let inv_m = T::one() / T::c(count as f64);
    let eps = T::c(RATIO_EPSILON);
    let t = target.index();
    let data = g_ac_out.as_slice();
    let mut value = T::zero();
    let mut grad = vec![T::zero(); data.len()];
    for p in mask.indices() {
        let px = &data[p * 3..p * 3 + 3];
        let s = px.iter().fold(T::zero(), |a, v| a + v.abs()) + eps;
        let xt = px[t];
        let g = &mut grad[p * 3..p * 3 + 3];
        match variant {
            SeparationVariant::PurityComplement => {
                value += T::one() - xt / s;
                // d(-x_t/s)/dx_k = -δ_tk/s + x_t·sign(x_k)/s²
                for k in 0..3 {
                    let mut d = xt * sign(px[k]) / (s * s);
                    if k == t {
                        d -= T::one() / s;
                    }
                    g[k] = d * inv_m;
                }
            }
            SeparationVariant::AsWritten => {
                value += xt * xt / s;
                for k in 0..3 {
                    let mut d = -xt * xt * sign(px[k]) / (s * s);
                    if k == t {
                        d += T::c(2.0) * xt / s;
                    }
                    g[k] = d * inv_m;
                }
            }
        }
    }
    Ok(LossGrad { value: value * inv_m, grad })
}

/// Mean L1 between the synthetic IF image and the classical-deconvolution
/// pseudo-IF of the same input; gradient with respect to `g_ac_out`.
pub fn stain_guidance_loss<T: Scalar>(g_ac_out: &[StainImage<T>], pseudo_if: &[StainImage<T>]) -> Result<T> {
    Ok(stain_guidance_loss_with_grad(g_ac_out, pseudo_if)?.value)
}

pub fn stain_guidance_loss_with_grad<T: Scalar>(
    g_ac_out: &[StainImage<T>],
    pseudo_if: &[StainImage<T>],
) -> Result<LossGrad<T>> {
    let (a, b) = flatten_batches(stain_items(g_ac_out), stain_items(pseudo_if))?;
    mean_abs_diff_with_grad(&a, &b)
}

/// Loss weights. Only the guidance weight has a published value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_adversarial: f64,
    pub lambda_guidance: f64,
    pub lambda_cycle: f64,
    pub lambda_stain_guidance: f64,
    pub lambda_eosin_absence: f64,
    pub lambda_sup_e: f64,
    pub lambda_sup_d: f64,
    /// Sign applied to the separation terms; `-1` is only meaningful with
    /// [`SeparationVariant::AsWritten`].
    pub separation_sign: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_adversarial: 1.0,
            lambda_guidance: 10.0,
            lambda_cycle: 10.0,
            lambda_stain_guidance: 1.0,
            lambda_eosin_absence: 1.0,
            lambda_sup_e: 1.0,
            lambda_sup_d: 1.0,
            separation_sign: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("lambda_adversarial", self.lambda_adversarial),
            ("lambda_guidance", self.lambda_guidance),
            ("lambda_cycle", self.lambda_cycle),
            ("lambda_stain_guidance", self.lambda_stain_guidance),
            ("lambda_eosin_absence", self.lambda_eosin_absence),
            ("lambda_sup_e", self.lambda_sup_e),
            ("lambda_sup_d", self.lambda_sup_d),
        ];
        for (name, w) in all {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Config(format!("{name} = {w} must be finite and >= 0")));
            }
        }
        if self.separation_sign != 1.0 && self.separation_sign != -1.0 {
            return Err(Error::Config(format!("separation_sign = {} must be +1 or -1", self.separation_sign)));
        }
        Ok(())
    }
}

pub mod term {
    pub const ADVERSARIAL: &str = "adversarial";
    pub const GUIDANCE: &str = "guidance";
    pub const CYCLE: &str = "cycle";
    pub const STAIN_GUIDANCE: &str = "stain_guidance";
    pub const EOSIN_ABSENCE: &str = "eosin_absence";
    pub const SUP_E: &str = "sup_e";
    pub const SUP_D: &str = "sup_d";
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    /// Auxiliary duplex <-> IF CycleGAN.
    One = 1,
    /// Direct duplex -> monoplex translator.
    Two = 2,
}

impl Stage {
    /// `(term, required)` for every term the stage accepts.
    fn roster(self) -> &'static [(&'static str, bool)] {
        match self {
            Stage::One => &[
                (term::ADVERSARIAL, true),
                (term::CYCLE, true),
                (term::STAIN_GUIDANCE, true),
                (term::EOSIN_ABSENCE, true),
                (term::SUP_E, false),
                (term::SUP_D, false),
            ],
            Stage::Two => &[(term::ADVERSARIAL, true), (term::GUIDANCE, true)],
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Stage::One => "stage1",
            Stage::Two => "stage2",
        }
    }
}

impl TryFrom<u8> for Stage {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            1 => Ok(Stage::One),
            2 => Ok(Stage::Two),
            _ => Err(Error::Config(format!("stage must be 1 or 2, got {v}"))),
        }
    }
}

impl LossWeights {
    pub fn weight_of(&self, name: &str) -> Option<f64> {
        Some(match name {
            term::ADVERSARIAL => self.lambda_adversarial,
            term::GUIDANCE => self.lambda_guidance,
            term::CYCLE => self.lambda_cycle,
            term::STAIN_GUIDANCE => self.lambda_stain_guidance,
            term::EOSIN_ABSENCE => self.lambda_eosin_absence,
            term::SUP_E => self.lambda_sup_e * self.separation_sign,
            term::SUP_D => self.lambda_sup_d * self.separation_sign,
            _ => return None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightedTerm {
    pub value: f64,
    pub weight: f64,
}

/// Named loss terms, their weights and the weighted total.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub terms: BTreeMap<String, WeightedTerm>,
    pub total: f64,
}

impl LossReport {
    pub fn value(&self, name: &str) -> Option<f64> {
        self.terms.get(name).map(|t| t.value)
    }
}

/// Weighted sum of a stage's loss terms.
pub fn total_generator_loss<T: Scalar>(
    terms: &BTreeMap<String, T>,
    weights: &LossWeights,
    stage: Stage,
) -> Result<LossReport> {
    weights.validate()?;
    let roster = stage.roster();
    for name in terms.keys() {
        if !roster.iter().any(|(r, _)| r == name) {
            return Err(Error::param("terms", format!("`{name}` is not a {} loss term", stage.tag())));
        }
    }
    let mut report = BTreeMap::new();
    let mut total = 0.0;
    for (name, required) in roster {
        match terms.get(*name) {
            Some(v) => {
                let weight = weights.weight_of(name).expect("roster names have weights");
                let value = v.f64();
                total += weight * value;
                report.insert(name.to_string(), WeightedTerm { value, weight });
            }
            None if *required => return Err(Error::MissingTerm(name.to_string())),
            None => {}
        }
    }
    Ok(LossReport { terms: report, total })
}
