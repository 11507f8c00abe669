//! Synthetic tissue scenes rendered into the duplex (A), monoplex (B) and
//! immunofluorescence (C) domains.
//!
//! A scene is a set of elliptical nuclei with soft one-pixel edges, some of
//! them marker positive, plus DAB membrane rings. Rendering is a pure
//! function of `(config, index)`.

use std::f64::consts::PI;
use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data_io::{save_mask_png, save_rgb_png, Domain, EvalItem, SegmentationItem, FileKind, Manifest, ManifestRecord, Split, MANIFEST_FILE, MANIFEST_VERSION};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::stain_space::{reconstruct, LabelMask, RgbPatch, Stain, StainImage, StainMatrix};

/// H signal kept by a marker-positive nucleus, relative to its intensity.
pub const POSITIVE_COUNTERSTAIN: f64 = 0.2;
/// Extra H a monoplex rendering gives a positive nucleus per unit of E.
pub const EOSIN_TO_COUNTERSTAIN: f64 = 0.5;

const AXIS_RANGE: (f64, f64) = (3.0, 5.0);
const MIN_AXIS_RATIO: f64 = 0.6;
const INTENSITY_RANGE: (f64, f64) = (0.55, 0.85);
const MEMBRANE_INTENSITY_RANGE: (f64, f64) = (0.6, 1.0);
const MEMBRANE_SCALE: f64 = 1.5;
const MEMBRANE_THICKNESS: f64 = 2.0;
const CYTOPLASM_RANGE: (f64, f64) = (0.1, 0.25);
const BLUSH_RANGE: (f64, f64) = (0.3, 0.6);
const CYTOPLASM_SCALE: f64 = 1.5;
const BACKGROUND_RANGE: (f64, f64) = (0.02, 0.05);
const PLACEMENT_ATTEMPTS: usize = 2000;
const MAX_PACKING_DENSITY: f64 = 0.5;
const NOISE_SALT: u64 = 0x6a09_e667_f3bc_c908;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub patch_size: usize,
    /// Inclusive range of nuclei per scene.
    pub nuclei: (usize, usize),
    pub marker_positive_fraction: f64,
    pub membrane_fraction: f64,
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise: f64,
    pub seed: u64,
    /// Label threshold relative to the patch maximum of E (resp. D).
    pub saturation_fraction: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            patch_size: 64,
            nuclei: (8, 12),
            marker_positive_fraction: 0.5,
            membrane_fraction: 0.6,
            noise: 0.01,
            seed: 0,
            saturation_fraction: 0.8,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if !(32..=256).contains(&self.patch_size) {
            return Err(Error::param("patch_size", format!("{} not in [32, 256]", self.patch_size)));
        }
        if self.nuclei.0 > self.nuclei.1 {
            return Err(Error::param("nuclei", "minimum exceeds maximum"));
        }
        for (name, v) in [
            ("marker_positive_fraction", self.marker_positive_fraction),
            ("membrane_fraction", self.membrane_fraction),
            ("saturation_fraction", self.saturation_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::param(name, format!("{v} not in [0, 1]")));
            }
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::param("noise", "must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Nucleus {
    /// `(y, x)` in pixels; pixel `(i, j)` has its centre at `(i + 0.5, j + 0.5)`.
    pub center: [f64; 2],
    pub axes: [f64; 2],
    pub rotation: f64,
    pub marker_positive: bool,
    pub intensity: f64,
    /// H level of the surrounding cytoplasm halo.
    pub cytoplasm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Membrane {
    /// DAB level of the cytoplasmic blush inside the ring.
    pub blush: f64,
    pub center: [f64; 2],
    pub axes: [f64; 2],
    pub rotation: f64,
    pub thickness: f64,
    pub intensity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub height: usize,
    pub width: usize,
    pub nuclei: Vec<Nucleus>,
    pub membranes: Vec<Membrane>,
    pub background: f64,
}

/// Approximate signed distance to an ellipse boundary, negative inside.
fn ellipse_distance(center: [f64; 2], axes: [f64; 2], rotation: f64, y: f64, x: f64) -> f64 {
    let (dy, dx) = (y - center[0], x - center[1]);
    let (s, c) = rotation.sin_cos();
    let u = dx * c + dy * s;
    let v = -dx * s + dy * c;
    let r = ((u / axes[0]).powi(2) + (v / axes[1]).powi(2)).sqrt();
    if r == 0.0 {
        return -axes[0].min(axes[1]);
    }
    (u * u + v * v).sqrt() * (1.0 - 1.0 / r)
}

/// One-pixel cosine ramp: 1 at `d <= -0.5`, 0 at `d >= 0.5`.
fn soft_edge(d: f64) -> f64 {
    if d <= -0.5 {
        1.0
    } else if d >= 0.5 {
        0.0
    } else {
        0.5 * (1.0 + (PI * (d + 0.5)).cos())
    }
}

impl Nucleus {
    /// Fractional coverage of pixel `(y, x)`.
    pub fn coverage(&self, y: usize, x: usize) -> f64 {
        soft_edge(ellipse_distance(self.center, self.axes, self.rotation, y as f64 + 0.5, x as f64 + 0.5))
    }

    /// Coverage of the cytoplasm halo around the nucleus.
    pub fn halo_coverage(&self, y: usize, x: usize) -> f64 {
        let axes = [self.axes[0] * CYTOPLASM_SCALE, self.axes[1] * CYTOPLASM_SCALE];
        soft_edge(ellipse_distance(self.center, axes, self.rotation, y as f64 + 0.5, x as f64 + 0.5))
    }

    fn extent(&self) -> f64 {
        self.axes[0].max(self.axes[1])
    }
}

impl Membrane {
    pub fn coverage(&self, y: usize, x: usize) -> f64 {
        let d = ellipse_distance(self.center, self.axes, self.rotation, y as f64 + 0.5, x as f64 + 0.5);
        soft_edge(d.abs() - 0.5 * self.thickness)
    }

    /// Coverage of the region enclosed by the ring.
    pub fn interior_coverage(&self, y: usize, x: usize) -> f64 {
        soft_edge(ellipse_distance(self.center, self.axes, self.rotation, y as f64 + 0.5, x as f64 + 0.5))
    }
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        for n in &self.nuclei {
            let e = n.extent() + 0.5;
            let inside = n.center[0] - e >= 0.0
                && n.center[1] - e >= 0.0
                && n.center[0] + e <= self.height as f64
                && n.center[1] + e <= self.width as f64;
            if !inside {
                return Err(Error::param("scene", "nucleus extends past the canvas"));
            }
            if n.axes[0] < 2.0 || n.axes[1] < 2.0 {
                return Err(Error::param("scene", "nucleus axis below 2 px"));
            }
            if !(n.intensity > 0.0 && n.intensity <= 1.5 && n.cytoplasm >= 0.0 && n.cytoplasm <= 1.5) {
                return Err(Error::param("scene", "nucleus intensity outside (0, 1.5]"));
            }
        }
        for m in &self.membranes {
            if !(m.intensity > 0.0 && m.intensity <= 1.5 && m.blush >= 0.0 && m.blush <= 1.5) {
                return Err(Error::param("scene", "membrane intensity outside (0, 1.5]"));
            }
        }
        Ok(())
    }

    /// Pixels covered by any part of any nucleus (coverage > 0).
    pub fn footprint(&self, positive_only: bool) -> LabelMask {
        self.mask_where(|w, n| w > 0.0 && (!positive_only || n.marker_positive))
    }

    /// Pixels at least half covered by a nucleus.
    pub fn nucleus_mask(&self) -> LabelMask {
        self.mask_where(|w, _| w >= 0.5)
    }

    /// Pixels untouched by any nucleus.
    pub fn background_mask(&self) -> LabelMask {
        let fp = self.footprint(false);
        LabelMask::new(self.height, self.width, fp.as_slice().iter().map(|v| !v).collect()).expect("dims")
    }

    fn mask_where(&self, pred: impl Fn(f64, &Nucleus) -> bool) -> LabelMask {
        let mut data = vec![false; self.height * self.width];
        for n in &self.nuclei {
            for (i, d) in data.iter_mut().enumerate() {
                if !*d && pred(n.coverage(i / self.width, i % self.width), n) {
                    *d = true;
                }
            }
        }
        LabelMask::new(self.height, self.width, data).expect("dims")
    }
}

fn scene_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Noise stream for a scene; renderings of the same scene share it.
pub fn noise_rng(seed: u64, index: u64) -> ChaCha8Rng {
    scene_rng(seed ^ NOISE_SALT, index)
}

fn uniform<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

pub fn generate_scene(config: &PhantomConfig, index: u64) -> Result<Scene> {
    config.validate()?;
    let size = config.patch_size;
    let (lo, hi) = config.nuclei;
    let reach = AXIS_RANGE.1 + 0.75;
    if hi as f64 * PI * reach * reach > MAX_PACKING_DENSITY * (size * size) as f64 {
        return Err(Error::InfeasiblePacking { requested: hi, height: size, width: size });
    }
    let mut rng = scene_rng(config.seed, index);
    let count = rng.random_range(lo..=hi);
    let mut nuclei: Vec<Nucleus> = Vec::with_capacity(count);
    let mut membranes = Vec::new();
    for _ in 0..count {
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let major = uniform(&mut rng, AXIS_RANGE);
            let minor = (major * uniform(&mut rng, (MIN_AXIS_RATIO, 1.0))).max(2.0);
            let rotation = rng.random::<f64>() * PI;
            let margin = major + 1.0;
            let cy = uniform(&mut rng, (margin, size as f64 - margin));
            let cx = uniform(&mut rng, (margin, size as f64 - margin));
            let clear = nuclei.iter().all(|n| {
                let d = ((n.center[0] - cy).powi(2) + (n.center[1] - cx).powi(2)).sqrt();
                d >= n.extent() + major + 1.5
            });
            if clear {
                placed = Some(([cy, cx], [major, minor], rotation));
                break;
            }
        }
        let Some((center, axes, rotation)) = placed else {
            return Err(Error::InfeasiblePacking { requested: count, height: size, width: size });
        };
        let marker_positive = rng.random_bool(config.marker_positive_fraction);
        let intensity = uniform(&mut rng, INTENSITY_RANGE);
        let cytoplasm = uniform(&mut rng, CYTOPLASM_RANGE);
        if rng.random_bool(config.membrane_fraction) {
            membranes.push(Membrane {
                blush: uniform(&mut rng, BLUSH_RANGE),
                center,
                axes: [axes[0] * MEMBRANE_SCALE, axes[1] * MEMBRANE_SCALE],
                rotation,
                thickness: MEMBRANE_THICKNESS,
                intensity: uniform(&mut rng, MEMBRANE_INTENSITY_RANGE),
            });
        }
        nuclei.push(Nucleus { center, axes, rotation, marker_positive, intensity, cytoplasm });
    }
    let background = uniform(&mut rng, BACKGROUND_RANGE);
    Ok(Scene { height: size, width: size, nuclei, membranes, background })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StainStyle {
    Duplex,
    Monoplex,
    /// Same channels read as (DAPI, Ki67, HER2).
    Fluorescence,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RenderStyle {
    Brightfield,
    Fluorescence,
}

pub fn render_stains<T: Scalar>(scene: &Scene, style: StainStyle) -> StainImage<T> {
    let (h, w) = (scene.height, scene.width);
    let mut hed = vec![[scene.background, 0.0, 0.0]; h * w];
    for n in &scene.nuclei {
        let (dh, de) = match (n.marker_positive, style) {
            (false, _) => (n.intensity, 0.0),
            (true, StainStyle::Monoplex) => {
                ((POSITIVE_COUNTERSTAIN + EOSIN_TO_COUNTERSTAIN) * n.intensity, 0.0)
            }
            (true, _) => (POSITIVE_COUNTERSTAIN * n.intensity, n.intensity),
        };
        for (i, px) in hed.iter_mut().enumerate() {
            px[Stain::H.index()] += n.cytoplasm * n.halo_coverage(i / w, i % w);
            let c = n.coverage(i / w, i % w);
            if c > 0.0 {
                px[Stain::H.index()] += dh * c;
                px[Stain::E.index()] += de * c;
            }
        }
    }
    for m in &scene.membranes {
        for (i, px) in hed.iter_mut().enumerate() {
            let (y, x) = (i / w, i % w);
            px[Stain::D.index()] += m.intensity * m.coverage(y, x) + m.blush * m.interior_coverage(y, x);
        }
    }
    let data = hed.into_iter().flatten().map(T::c).collect();
    StainImage::new(h, w, data).expect("non-negative by construction")
}

/// Beer–Lambert (brightfield) or additive emission (fluorescence) forward
/// model, plus clipped Gaussian noise of standard deviation `noise`.
pub fn render_rgb<T: Scalar, R: Rng>(
    stain: &StainImage<T>,
    m: &StainMatrix<T>,
    style: RenderStyle,
    noise: f64,
    rng: &mut R,
) -> Result<RgbPatch<T>> {
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::param("noise", "must be finite and non-negative"));
    }
    let clean = match style {
        RenderStyle::Brightfield => reconstruct(stain, m),
        RenderStyle::Fluorescence => stain.to_fluorescence(),
    };
    if noise == 0.0 {
        return Ok(clean);
    }
    let dist = Normal::new(0.0, noise).expect("finite sd");
    let data = clean.as_slice().iter().map(|v| *v + T::c(dist.sample(rng))).collect();
    RgbPatch::clamped(clean.height(), clean.width(), data)
}

/// Pixels whose channel value exceeds `fraction` of the patch maximum; empty
/// when the channel is identically zero.
pub fn saturation_mask<T: Scalar>(stain: &StainImage<T>, channel: Stain, fraction: f64) -> LabelMask {
    let max = stain.channel(channel.index()).fold(T::zero(), |a, b| a.max(b));
    let (h, w) = stain.dims();
    if max <= T::zero() {
        return LabelMask::empty(h, w);
    }
    let t = max * T::c(fraction);
    LabelMask::new(h, w, stain.channel(channel.index()).map(|v| v > t).collect()).expect("dims")
}

/// Training patch of one domain for scene `index`.
pub fn render_domain_patch<T: Scalar>(config: &PhantomConfig, index: u64, domain: Domain) -> Result<RgbPatch<T>> {
    let scene = generate_scene(config, index)?;
    let (stain_style, render_style) = match domain {
        Domain::A => (StainStyle::Duplex, RenderStyle::Brightfield),
        Domain::B => (StainStyle::Monoplex, RenderStyle::Brightfield),
        Domain::C => (StainStyle::Fluorescence, RenderStyle::Fluorescence),
    };
    let stains = render_stains::<T>(&scene, stain_style);
    render_rgb(&stains, &StainMatrix::default(), render_style, config.noise, &mut noise_rng(config.seed, index))
}

/// Paired duplex / ground-truth monoplex item with its masks; both
/// renderings share one noise realisation.
pub fn render_eval_item<T: Scalar>(config: &PhantomConfig, index: u64) -> Result<EvalItem<T>> {
    let scene = generate_scene(config, index)?;
    let m = StainMatrix::default();
    let rng = noise_rng(config.seed, index);
    let render = |style| {
        render_rgb(&render_stains::<T>(&scene, style), &m, RenderStyle::Brightfield, config.noise, &mut rng.clone())
    };
    Ok(EvalItem {
        name: format!("e_{index:06}"),
        duplex: render(StainStyle::Duplex)?,
        monoplex: render(StainStyle::Monoplex)?,
        nucleus: scene.nucleus_mask(),
        background: scene.background_mask(),
    })
}

/// Monoplex patch with its nucleus mask.
pub fn render_segmentation_item<T: Scalar>(config: &PhantomConfig, index: u64) -> Result<SegmentationItem<T>> {
    let scene = generate_scene(config, index)?;
    Ok(SegmentationItem { image: render_domain_patch(config, index, Domain::B)?, nucleus: scene.nucleus_mask() })
}

/// Scene index ranges of one export; every range must be disjoint.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitPlan {
    pub duplex: Range<u64>,
    pub monoplex: Range<u64>,
    pub fluorescence: Range<u64>,
    pub eval: Range<u64>,
    pub segmentation: Range<u64>,
}

impl SplitPlan {
    /// Consecutive ranges in the order A, B, C, eval, segmentation.
    pub fn sequential(counts: &CorpusCounts) -> Self {
        let mut next = 0u64;
        let mut take = |n: usize| {
            let r = next..next + n as u64;
            next = r.end;
            r
        };
        Self {
            duplex: take(counts.duplex),
            monoplex: take(counts.monoplex),
            fluorescence: take(counts.fluorescence),
            eval: take(counts.eval),
            segmentation: take(counts.segmentation),
        }
    }

    fn named(&self) -> [(&'static str, &Range<u64>); 5] {
        [
            ("A", &self.duplex),
            ("B", &self.monoplex),
            ("C", &self.fluorescence),
            ("eval", &self.eval),
            ("segmentation", &self.segmentation),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let named = self.named();
        for (i, (na, a)) in named.iter().enumerate() {
            for (nb, b) in &named[i + 1..] {
                if !a.is_empty() && !b.is_empty() && a.start < b.end && b.start < a.end {
                    return Err(Error::OverlappingSplits(format!("{na} {a:?} overlaps {nb} {b:?}")));
                }
            }
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.named().iter().all(|(_, r)| r.is_empty())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusCounts {
    pub duplex: usize,
    pub monoplex: usize,
    pub fluorescence: usize,
    pub eval: usize,
    pub segmentation: usize,
    /// Leading duplex patches that receive M_E / M_D label masks.
    pub labeled: usize,
}

impl Default for CorpusCounts {
    fn default() -> Self {
        Self { duplex: 2000, monoplex: 2000, fluorescence: 2000, eval: 32, segmentation: 200, labeled: 200 }
    }
}

#[derive(Serialize)]
struct GeneratorSnapshot<'a> {
    phantom: &'a PhantomConfig,
    counts: &'a CorpusCounts,
}

/// Writes the corpus under `out_dir` and returns its manifest (also written
/// as `manifest.json`).
pub fn export_corpus(config: &PhantomConfig, out_dir: &Path, counts: &CorpusCounts) -> Result<Manifest> {
    export_corpus_with_plan(config, out_dir, counts, &SplitPlan::sequential(counts))
}

pub fn export_corpus_with_plan(
    config: &PhantomConfig,
    out_dir: &Path,
    counts: &CorpusCounts,
    plan: &SplitPlan,
) -> Result<Manifest> {
    config.validate()?;
    plan.validate()?;
    if plan.is_empty() {
        return Err(Error::Empty("empty corpus: every split count is zero".into()));
    }
    let mut records = Vec::new();
    let mut write_rgb = |rel: String, patch: &RgbPatch<f64>, domain, split, kind, idx| -> Result<()> {
        save_rgb_png(patch, &out_dir.join(&rel))?;
        records.push(ManifestRecord { path: rel, domain, split, kind, scene_index: idx });
        Ok(())
    };
    let mut masks = Vec::new();
    let mut write_mask = |rel: String, mask: &LabelMask, domain, split, kind, idx| -> Result<()> {
        save_mask_png(mask, &out_dir.join(&rel))?;
        masks.push(ManifestRecord { path: rel, domain, split, kind, scene_index: idx });
        Ok(())
    };

    for (k, idx) in plan.duplex.clone().enumerate() {
        let rgb = render_domain_patch::<f64>(config, idx, Domain::A)?;
        write_rgb(format!("train/A/a_{idx:06}.png"), &rgb, Domain::A, Split::Train, FileKind::Image, idx)?;
        if k < counts.labeled {
            let stains = render_stains::<f64>(&generate_scene(config, idx)?, StainStyle::Duplex);
            let me = saturation_mask(&stains, Stain::E, config.saturation_fraction);
            let md = saturation_mask(&stains, Stain::D, config.saturation_fraction);
            write_mask(format!("train/A/a_{idx:06}_me.png"), &me, Domain::A, Split::Train, FileKind::MaskE, idx)?;
            write_mask(format!("train/A/a_{idx:06}_md.png"), &md, Domain::A, Split::Train, FileKind::MaskD, idx)?;
        }
    }
    for idx in plan.monoplex.clone() {
        let rgb = render_domain_patch::<f64>(config, idx, Domain::B)?;
        write_rgb(format!("train/B/b_{idx:06}.png"), &rgb, Domain::B, Split::Train, FileKind::Image, idx)?;
    }
    for idx in plan.fluorescence.clone() {
        let rgb = render_domain_patch::<f64>(config, idx, Domain::C)?;
        write_rgb(format!("train/C/c_{idx:06}.png"), &rgb, Domain::C, Split::Train, FileKind::Image, idx)?;
    }
    for idx in plan.eval.clone() {
        let item = render_eval_item::<f64>(config, idx)?;
        write_rgb(format!("eval/e_{idx:06}_duplex.png"), &item.duplex, Domain::A, Split::Eval, FileKind::Image, idx)?;
        write_rgb(format!("eval/e_{idx:06}_monoplex.png"), &item.monoplex, Domain::B, Split::Eval, FileKind::GroundTruth, idx)?;
        write_mask(format!("eval/e_{idx:06}_nucleus.png"), &item.nucleus, Domain::A, Split::Eval, FileKind::NucleusMask, idx)?;
        write_mask(format!("eval/e_{idx:06}_background.png"), &item.background, Domain::A, Split::Eval, FileKind::BackgroundMask, idx)?;
    }
    for idx in plan.segmentation.clone() {
        let item = render_segmentation_item::<f64>(config, idx)?;
        write_rgb(format!("seg/s_{idx:06}.png"), &item.image, Domain::B, Split::Segmentation, FileKind::Image, idx)?;
        write_mask(format!("seg/s_{idx:06}_nucleus.png"), &item.nucleus, Domain::B, Split::Segmentation, FileKind::NucleusMask, idx)?;
    }
    records.extend(masks);
    records.sort_by(|a, b| a.path.cmp(&b.path));
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        generator: serde_json::to_value(GeneratorSnapshot { phantom: config, counts })?,
        records,
    };
    manifest.write(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}
