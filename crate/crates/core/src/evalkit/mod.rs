//! Downstream evaluation: a small nucleus posterior model trained on the
//! monoplex domain, exact rank AUC, cumulative posterior histograms and the
//! per-method metrics report.

mod plot;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_io::{EvalItem, SegmentationItem};
use crate::error::{Error, Result};
use crate::networks::ImageTransform;
use crate::nn::{Adam, Builder, Init, Layer, Network, Padding, Tensor, TensorRecord};
use crate::scalar::Scalar;
use crate::stain_space::{rgb_to_od, LabelMask, RgbPatch, StainImage};

pub use plot::render_svg;

/// Per-pixel nucleus posterior in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorMap<T> {
    height: usize,
    width: usize,
    values: Vec<T>,
}

impl<T: Scalar> PosteriorMap<T> {
    pub fn new(height: usize, width: usize, values: Vec<T>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::ShapeMismatch(format!("{} values for {height}x{width}", values.len())));
        }
        if values.iter().any(|v| !v.is_finite() || *v < T::zero() || *v > T::one()) {
            return Err(Error::InvalidImage("posterior outside [0, 1]".into()));
        }
        Ok(Self { height, width, values })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().map(|v| v.f64()).sum::<f64>() / self.values.len().max(1) as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurrogateConfig {
    pub hidden: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self { hidden: 8, steps: 600, batch_size: 4, learning_rate: 5e-3, seed: 0 }
    }
}

impl SurrogateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.batch_size == 0 {
            return Err(Error::param("surrogate", "hidden width and batch size must be positive"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::param("learning_rate", "must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Small fully convolutional pixel classifier standing in for `S_B`.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorModel<T> {
    config: SurrogateConfig,
    net: Network<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorModelRecord {
    pub config: SurrogateConfig,
    pub dtype: String,
    pub tensors: Vec<TensorRecord>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<T: Scalar> PosteriorModel<T> {
    /// Untrained model with He-initialised weights.
    pub fn new(config: &SurrogateConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut b = Builder::new(&mut rng, Init::He);
        let w = config.hidden;
        let layers = vec![
            b.conv(3, w, 3, 1, 1, Padding::Reflect),
            Layer::Relu,
            b.conv(w, w, 3, 1, 1, Padding::Reflect),
            Layer::Relu,
            b.conv(w, 1, 1, 1, 0, Padding::Zero),
        ];
        Ok(Self { config: config.clone(), net: b.finish(layers) })
    }

    pub fn config(&self) -> &SurrogateConfig {
        &self.config
    }

    pub fn network(&self) -> &Network<T> {
        &self.net
    }

    pub fn predict(&self, patch: &RgbPatch<T>) -> Result<PosteriorMap<T>> {
        Ok(self.predict_batch(std::slice::from_ref(patch))?.pop().expect("one output"))
    }

    pub fn predict_batch(&self, batch: &[RgbPatch<T>]) -> Result<Vec<PosteriorMap<T>>> {
        let x = od_input(batch)?;
        let logits = self.net.forward(&x);
        let (h, w) = (x.height(), x.width());
        (0..batch.len())
            .map(|i| PosteriorMap::new(h, w, logits.sample(i).iter().map(|v| T::c(sigmoid(v.f64()))).collect()))
            .collect()
    }

    pub fn record(&self) -> PosteriorModelRecord {
        PosteriorModelRecord {
            config: self.config.clone(),
            dtype: T::NAME.to_string(),
            tensors: self.net.params().to_record(),
        }
    }

    pub fn from_record(record: &PosteriorModelRecord) -> Result<Self> {
        let mut m = Self::new(&record.config)?;
        m.net.params_mut().load_record(&record.tensors)?;
        Ok(m)
    }
}

/// The model reads optical density rather than raw intensities.
fn od_input<T: Scalar>(batch: &[RgbPatch<T>]) -> Result<Tensor<T>> {
    let od: Vec<StainImage<T>> = batch
        .iter()
        .map(|p| StainImage::new(p.height(), p.width(), rgb_to_od(p, OD_INPUT_EPSILON)?.into_vec()))
        .collect::<Result<_>>()?;
    Tensor::from_stains(&od)
}

const OD_INPUT_EPSILON: f64 = 1e-3;

/// Fraction of pixels where `posterior >= 0.5` agrees with the mask.
pub fn pixel_accuracy<T: Scalar>(posterior: &PosteriorMap<T>, mask: &LabelMask) -> f64 {
    let hits = posterior
        .values()
        .iter()
        .zip(mask.as_slice())
        .filter(|(p, m)| (p.f64() >= 0.5) == **m)
        .count();
    hits as f64 / mask.as_slice().len().max(1) as f64
}

/// Trains `S_B` with mean binary cross-entropy on monoplex patches.
pub fn train_surrogate_sb<T: Scalar>(items: &[SegmentationItem<T>], config: &SurrogateConfig) -> Result<PosteriorModel<T>> {
    if items.is_empty() {
        return Err(Error::Empty("segmentation training set".into()));
    }
    for it in items {
        if it.image.dims() != (it.nucleus.height(), it.nucleus.width()) {
            return Err(Error::ShapeMismatch("segmentation mask and patch sizes differ".into()));
        }
    }
    let mut model = PosteriorModel::<T>::new(config)?;
    let mut opt = Adam::new(model.net.params(), config.learning_rate, 0.9, 0.999);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    for _ in 0..config.steps {
        let picks: Vec<usize> = (0..config.batch_size).map(|_| rng.random_range(0..items.len())).collect();
        let batch: Vec<RgbPatch<T>> = picks.iter().map(|i| items[*i].image.clone()).collect();
        let x = od_input(&batch)?;
        let (logits, trace) = model.net.forward_train(&x);
        let n = logits.as_slice().len() as f64;
        let mut grad = Vec::with_capacity(logits.as_slice().len());
        for (b, i) in picks.iter().enumerate() {
            let mask = items[*i].nucleus.as_slice();
            for (z, y) in logits.sample(b).iter().zip(mask) {
                let target = if *y { 1.0 } else { 0.0 };
                grad.push(T::c((sigmoid(z.f64()) - target) / n));
            }
        }
        let dy = Tensor::new(logits.shape(), grad)?;
        let mut grads = model.net.params().zeros_like();
        model.net.backward(trace, dy, Some(&mut grads));
        opt.step(model.net.params_mut(), &grads);
    }
    if !model.net.params().all_finite() {
        return Err(Error::Diverged { step: config.steps as u64, value: f64::NAN });
    }
    Ok(model)
}

fn check_scores(scores: &[f64], what: &str) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::Empty(format!("{what} scores")));
    }
    if scores.iter().any(|v| v.is_nan()) {
        return Err(Error::param("scores", "NaN score"));
    }
    Ok(())
}

/// `P(pos > neg) + P(pos = neg) / 2` from rank sums with mid-ranks for ties.
pub fn auc_from_scores(pos: &[f64], neg: &[f64]) -> Result<f64> {
    check_scores(pos, "positive")?;
    check_scores(neg, "negative")?;
    let mut all: Vec<(f64, bool)> = pos.iter().map(|v| (*v, true)).chain(neg.iter().map(|v| (*v, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    // Doubled ranks keep every quantity integral.
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let mid2 = (i + 1 + j + 1) as u128;
        let positives = all[i..=j].iter().filter(|e| e.1).count() as u128;
        rank_sum2 += mid2 * positives;
        i = j + 1;
    }
    let (np, nn) = (pos.len() as u128, neg.len() as u128);
    let u2 = rank_sum2 - np * (np + 1);
    Ok(u2 as f64 / (2 * np * nn) as f64)
}

/// Cumulative distribution sampled at uniform edges on `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    /// Upper bin edges `k / n_bins`, `k = 1..=n_bins`.
    pub edges: Vec<f64>,
    /// Fraction of scores `<= edge`.
    pub values: Vec<f64>,
}

pub fn cumulative_histogram(scores: &[f64], n_bins: usize) -> Result<Curve> {
    if n_bins < 2 {
        return Err(Error::param("n_bins", "must be at least 2"));
    }
    check_scores(scores, "histogram")?;
    if scores.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::param("scores", "histogram scores must lie in [0, 1]"));
    }
    let mut counts = vec![0usize; n_bins];
    for s in scores {
        // Smallest k with s <= k / n_bins, comparing against the edges as stored.
        let edge = |k: usize| k as f64 / n_bins as f64;
        let mut k = ((s * n_bins as f64).ceil() as usize).clamp(1, n_bins);
        while k > 1 && *s <= edge(k - 1) {
            k -= 1;
        }
        while k < n_bins && *s > edge(k) {
            k += 1;
        }
        counts[k - 1] += 1;
    }
    let total = scores.len() as f64;
    let mut acc = 0usize;
    let mut values = Vec::with_capacity(n_bins);
    for c in counts {
        acc += c;
        values.push(acc as f64 / total);
    }
    let edges = (1..=n_bins).map(|k| k as f64 / n_bins as f64).collect();
    Ok(Curve { edges, values })
}

pub fn harmonic_mean(a: f64, b: f64) -> Result<f64> {
    if !(a > 0.0 && b > 0.0) || !a.is_finite() || !b.is_finite() {
        return Err(Error::param("harmonic_mean", format!("arguments must be positive and finite, got ({a}, {b})")));
    }
    Ok(2.0 * a * b / (a + b))
}

/// Harmonic mean extended by its limit 0 when either argument is 0.
fn harmonic_mean_or_zero(a: f64, b: f64) -> f64 {
    if a <= 0.0 || b <= 0.0 {
        0.0
    } else {
        harmonic_mean(a, b).expect("positive inputs")
    }
}

/// How one method obtains monoplex-like images from an eval item.
pub enum Method<'a, T: Scalar> {
    Transform(&'a dyn ImageTransform<T>),
    /// Uses the ground-truth monoplex rendering.
    Oracle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodMetrics {
    pub name: String,
    pub oracle: bool,
    /// `1 - AUC` of the nucleus posterior, nucleus pixels against background.
    pub nucleus_inv_auc: f64,
    /// `1 - AUC` of the complement posterior, background pixels against nucleus.
    pub background_inv_auc: f64,
    pub harmonic_mean: f64,
    pub nucleus_curve: Curve,
    pub background_curve: Curve,
    pub nucleus_pixels: usize,
    pub background_pixels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_bins: usize,
    pub items: usize,
    pub methods: Vec<MethodMetrics>,
}

impl MetricsReport {
    pub fn method(&self, name: &str) -> Option<&MethodMetrics> {
        self.methods.iter().find(|m| m.name == name)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

pub const DEFAULT_BINS: usize = 20;
const EVAL_BATCH: usize = 8;

/// Metrics of one set of posteriors against the eval masks.
pub fn score_posteriors<T: Scalar>(
    name: &str,
    oracle: bool,
    posteriors: &[PosteriorMap<T>],
    items: &[EvalItem<T>],
    n_bins: usize,
) -> Result<MethodMetrics> {
    if posteriors.len() != items.len() {
        return Err(Error::ShapeMismatch("one posterior per eval item required".into()));
    }
    let mut nuc = Vec::new();
    let mut bg = Vec::new();
    for (p, it) in posteriors.iter().zip(items) {
        let dims = (it.nucleus.height(), it.nucleus.width());
        if p.dims() != dims || (it.background.height(), it.background.width()) != dims || it.duplex.dims() != dims {
            return Err(Error::ShapeMismatch(format!("eval item {} masks and patch are misaligned", it.name)));
        }
        for ((v, n), b) in p.values().iter().zip(it.nucleus.as_slice()).zip(it.background.as_slice()) {
            if *n {
                nuc.push(v.f64());
            } else if *b {
                bg.push(v.f64());
            }
        }
    }
    let auc_nucleus = auc_from_scores(&nuc, &bg)?;
    let bg_scores: Vec<f64> = bg.iter().map(|v| 1.0 - v).collect();
    let nuc_complement: Vec<f64> = nuc.iter().map(|v| 1.0 - v).collect();
    let auc_background = auc_from_scores(&bg_scores, &nuc_complement)?;
    let (a, b) = (1.0 - auc_nucleus, 1.0 - auc_background);
    Ok(MethodMetrics {
        name: name.to_string(),
        oracle,
        nucleus_inv_auc: a,
        background_inv_auc: b,
        harmonic_mean: harmonic_mean_or_zero(a, b),
        nucleus_curve: cumulative_histogram(&nuc, n_bins)?,
        background_curve: cumulative_histogram(&bg_scores, n_bins)?,
        nucleus_pixels: nuc.len(),
        background_pixels: bg.len(),
    })
}

/// Applies each method to the duplex patches, runs `S_B`, and scores the
/// posteriors on the annotated nucleus / background pixels.
pub fn evaluate_methods<T: Scalar>(
    items: &[EvalItem<T>],
    methods: &[(String, Method<'_, T>)],
    sb: &PosteriorModel<T>,
    n_bins: usize,
) -> Result<MetricsReport> {
    if items.is_empty() {
        return Err(Error::Empty("eval split".into()));
    }
    if methods.is_empty() {
        return Err(Error::Empty("method list".into()));
    }
    let mut out = Vec::with_capacity(methods.len());
    for (name, method) in methods {
        let mut posteriors = Vec::with_capacity(items.len());
        for chunk in items.chunks(EVAL_BATCH) {
            let images = match method {
                Method::Oracle => chunk.iter().map(|it| it.monoplex.clone()).collect(),
                Method::Transform(t) => {
                    let duplex: Vec<RgbPatch<T>> = chunk.iter().map(|it| it.duplex.clone()).collect();
                    t.apply(&duplex)?
                }
            };
            posteriors.extend(sb.predict_batch(&images)?);
        }
        out.push(score_posteriors(name, matches!(method, Method::Oracle), &posteriors, items, n_bins)?);
    }
    Ok(MetricsReport { n_bins, items: items.len(), methods: out })
}
