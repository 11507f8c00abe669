//! Patch datasets over the three image domains and unpaired batch sampling.
//!
//! Images are 8-bit PNGs; loaded values are exactly `byte / 255`. Masks are
//! single-channel PNGs where 0 means unlabeled and anything else labeled.

use std::fs;
use std::path::{Path, PathBuf};

use image::{ExtendedColorType, ImageReader};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::stain_space::{LabelMask, RgbPatch};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

/// Image domain: duplex IHC (A), monoplex IHC (B) or immunofluorescence (C).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Domain {
    A,
    B,
    C,
}

impl Domain {
    pub fn letter(self) -> &'static str {
        match self {
            Domain::A => "A",
            Domain::B => "B",
            Domain::C => "C",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    /// Held-back paired evaluation items.
    Eval,
    /// Monoplex patches with nucleus masks for the downstream posterior model.
    Segmentation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FileKind {
    Image,
    MaskE,
    MaskD,
    /// Monoplex rendering of the same scene as an eval duplex patch.
    GroundTruth,
    NucleusMask,
    BackgroundMask,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    /// Relative to the manifest's directory, `/`-separated.
    pub path: String,
    pub domain: Domain,
    pub split: Split,
    pub kind: FileKind,
    pub scene_index: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub generator: serde_json::Value,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Manifest = serde_json::from_str(&text)?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::Dataset {
                path: path.to_path_buf(),
                reason: format!("manifest version {} (expected {MANIFEST_VERSION})", m.version),
            });
        }
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

fn quantize<T: Scalar>(v: T) -> u8 {
    (v.f64().clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_rgb_png<T: Scalar>(patch: &RgbPatch<T>, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = patch.as_slice().iter().map(|v| quantize(*v)).collect();
    save_bytes(&bytes, patch.width(), patch.height(), ExtendedColorType::Rgb8, path)
}

pub fn save_mask_png(mask: &LabelMask, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = mask.as_slice().iter().map(|v| if *v { 255 } else { 0 }).collect();
    save_bytes(&bytes, mask.width(), mask.height(), ExtendedColorType::L8, path)
}

fn save_bytes(bytes: &[u8], w: usize, h: usize, ty: ExtendedColorType, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    image::save_buffer_with_format(path, bytes, w as u32, h as u32, ty, image::ImageFormat::Png)
        .map_err(|source| Error::Codec { path: path.to_path_buf(), source })
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|source| Error::Codec { path: path.to_path_buf(), source })
}

/// Raw RGB bytes and `(height, width)`.
pub fn load_rgb_bytes(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let img = open_image(path)?.into_rgb8();
    let (w, h) = img.dimensions();
    Ok((img.into_raw(), h as usize, w as usize))
}

pub fn load_rgb_png<T: Scalar>(path: &Path) -> Result<RgbPatch<T>> {
    let (bytes, h, w) = load_rgb_bytes(path)?;
    bytes_to_patch(&bytes, h, w, false, false)
}

pub fn load_mask_png(path: &Path) -> Result<LabelMask> {
    let img = open_image(path)?.into_luma8();
    let (w, h) = img.dimensions();
    LabelMask::new(h as usize, w as usize, img.into_raw().into_iter().map(|v| v != 0).collect())
}

fn bytes_to_patch<T: Scalar>(bytes: &[u8], h: usize, w: usize, flip_h: bool, flip_v: bool) -> Result<RgbPatch<T>> {
    let mut data = Vec::with_capacity(bytes.len());
    for y in 0..h {
        let sy = if flip_v { h - 1 - y } else { y };
        for x in 0..w {
            let sx = if flip_h { w - 1 - x } else { x };
            let i = (sy * w + sx) * 3;
            data.extend(bytes[i..i + 3].iter().map(|b| T::c(*b as f64 / 255.0)));
        }
    }
    RgbPatch::new(h, w, data)
}

fn flip_mask(mask: &LabelMask, flip_h: bool, flip_v: bool) -> LabelMask {
    let (h, w) = (mask.height(), mask.width());
    let mut data = Vec::with_capacity(h * w);
    for y in 0..h {
        let sy = if flip_v { h - 1 - y } else { y };
        for x in 0..w {
            let sx = if flip_h { w - 1 - x } else { x };
            data.push(mask.get(sy, sx));
        }
    }
    LabelMask::new(h, w, data).expect("same dimensions")
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchRecord {
    pub image: PathBuf,
    pub mask_e: Option<PathBuf>,
    pub mask_d: Option<PathBuf>,
}

impl PatchRecord {
    pub fn is_labeled(&self) -> bool {
        self.mask_e.is_some() || self.mask_d.is_some()
    }
}

/// Labels attached to one duplex patch.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchLabels {
    pub mask_e: Option<LabelMask>,
    pub mask_d: Option<LabelMask>,
}

/// All patches of one domain, decoded into memory.
#[derive(Clone, Debug)]
pub struct PatchDataset {
    root: PathBuf,
    domain: Domain,
    records: Vec<PatchRecord>,
    height: usize,
    width: usize,
    pixels: Vec<Vec<u8>>,
    labels: Vec<Option<PatchLabels>>,
}

fn has_suffix(name: &str, suffix: &str) -> bool {
    name.len() > suffix.len() && name.ends_with(suffix)
}

fn sidecar(image: &Path, suffix: &str) -> PathBuf {
    let stem = image.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
    image.with_file_name(format!("{stem}{suffix}"))
}

/// PNGs in `dir` that are not `_me.png` / `_md.png` sidecars, sorted.
pub fn list_patch_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
        if path.is_file()
            && name.to_ascii_lowercase().ends_with(".png")
            && !has_suffix(name, "_me.png")
            && !has_suffix(name, "_md.png")
        {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn records_from_manifest(dir: &Path, manifest: &Manifest, domain: Domain) -> Vec<PatchRecord> {
    let mut records: Vec<PatchRecord> = manifest
        .records
        .iter()
        .filter(|r| r.split == Split::Train && r.domain == domain && r.kind == FileKind::Image)
        .map(|r| {
            let image = dir.join(&r.path);
            let find = |kind| {
                manifest
                    .records
                    .iter()
                    .find(|m| m.kind == kind && m.split == Split::Train && m.domain == domain && m.scene_index == r.scene_index)
                    .map(|m| dir.join(&m.path))
            };
            PatchRecord { image, mask_e: find(FileKind::MaskE), mask_d: find(FileKind::MaskD) }
        })
        .collect();
    records.sort_by(|a, b| a.image.cmp(&b.image));
    records
}

/// Loads one domain from a corpus directory (with `manifest.json`), a
/// manifest file, or a plain directory of PNGs with `_me.png` / `_md.png`
/// sidecars.
pub fn load_dataset(manifest_or_dir: &Path, domain: Domain) -> Result<PatchDataset> {
    let err = |reason: String| Error::Dataset { path: manifest_or_dir.to_path_buf(), reason };
    if !manifest_or_dir.exists() {
        return Err(err("path does not exist".into()));
    }
    let manifest_path = if manifest_or_dir.is_file() {
        Some(manifest_or_dir.to_path_buf())
    } else {
        let p = manifest_or_dir.join(MANIFEST_FILE);
        p.is_file().then_some(p)
    };
    let (root, records) = match manifest_path {
        Some(mp) => {
            let root = mp.parent().map(Path::to_path_buf).unwrap_or_default();
            let manifest = Manifest::read(&mp)?;
            let records = records_from_manifest(&root, &manifest, domain);
            (root, records)
        }
        None => {
            let records = list_patch_pngs(manifest_or_dir)?
                .into_iter()
                .map(|image| {
                    let me = sidecar(&image, "_me.png");
                    let md = sidecar(&image, "_md.png");
                    PatchRecord { mask_e: me.is_file().then_some(me), mask_d: md.is_file().then_some(md), image }
                })
                .collect();
            (manifest_or_dir.to_path_buf(), records)
        }
    };
    if records.is_empty() {
        return Err(err(format!("no {} patches found", domain.letter())));
    }
    let mut pixels = Vec::with_capacity(records.len());
    let mut labels = Vec::with_capacity(records.len());
    let mut dims = None;
    for r in &records {
        if !r.image.is_file() {
            return Err(Error::Dataset { path: r.image.clone(), reason: "listed file is missing".into() });
        }
        let (bytes, h, w) = load_rgb_bytes(&r.image)?;
        match dims {
            None => dims = Some((h, w)),
            Some(d) if d != (h, w) => {
                return Err(Error::Dataset {
                    path: r.image.clone(),
                    reason: format!("size {h}x{w} differs from {}x{}", d.0, d.1),
                })
            }
            _ => {}
        }
        let load_mask = |p: &Option<PathBuf>| -> Result<Option<LabelMask>> {
            let Some(p) = p else { return Ok(None) };
            let m = load_mask_png(p)?;
            if (m.height(), m.width()) != (h, w) {
                return Err(Error::Dataset { path: p.clone(), reason: "mask size differs from its patch".into() });
            }
            Ok(Some(m))
        };
        let label = if r.is_labeled() {
            Some(PatchLabels { mask_e: load_mask(&r.mask_e)?, mask_d: load_mask(&r.mask_d)? })
        } else {
            None
        };
        pixels.push(bytes);
        labels.push(label);
    }
    let (height, width) = dims.expect("non-empty");
    Ok(PatchDataset { root, domain, records, height, width, pixels, labels })
}

impl PatchDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn records(&self) -> &[PatchRecord] {
        &self.records
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn labeled_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|i| self.labels[*i].is_some()).collect()
    }

    pub fn patch<T: Scalar>(&self, i: usize) -> RgbPatch<T> {
        bytes_to_patch(&self.pixels[i], self.height, self.width, false, false).expect("decoded bytes are valid")
    }

    pub fn labels(&self, i: usize) -> Option<&PatchLabels> {
        self.labels[i].as_ref()
    }

    fn draw<T: Scalar>(&self, i: usize, flip: (bool, bool)) -> (RgbPatch<T>, Option<PatchLabels>) {
        let patch = bytes_to_patch(&self.pixels[i], self.height, self.width, flip.0, flip.1).expect("valid bytes");
        let labels = self.labels[i].as_ref().map(|l| PatchLabels {
            mask_e: l.mask_e.as_ref().map(|m| flip_mask(m, flip.0, flip.1)),
            mask_d: l.mask_d.as_ref().map(|m| flip_mask(m, flip.0, flip.1)),
        });
        (patch, labels)
    }
}

/// Sampling options.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    /// Fraction of A slots drawn from labelled patches; `None` disables
    /// oversampling (plain uniform draws).
    pub labeled_fraction: Option<f64>,
    /// Random horizontal / vertical flips.
    pub flips: bool,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self { labeled_fraction: Some(0.25), flips: false }
    }
}

/// One unpaired draw from each domain.
#[derive(Clone, Debug, PartialEq)]
pub struct UnpairedBatch<T> {
    pub x_a: Vec<RgbPatch<T>>,
    pub x_b: Vec<RgbPatch<T>>,
    pub x_c: Vec<RgbPatch<T>>,
    /// Labels of each A item, when it has any.
    pub labels: Vec<Option<PatchLabels>>,
}

fn draw_flip<R: Rng>(flips: bool, rng: &mut R) -> (bool, bool) {
    if flips {
        (rng.random_bool(0.5), rng.random_bool(0.5))
    } else {
        (false, false)
    }
}

/// Uniform draws with replacement from one dataset.
pub fn sample_domain<T: Scalar, R: Rng>(
    ds: &PatchDataset,
    batch_size: usize,
    flips: bool,
    rng: &mut R,
) -> Result<Vec<RgbPatch<T>>> {
    if batch_size < 1 {
        return Err(Error::param("batch_size", "must be at least 1"));
    }
    if ds.is_empty() {
        return Err(Error::Empty(format!("{} dataset", ds.domain.letter())));
    }
    let idx: Vec<usize> = (0..batch_size).map(|_| rng.random_range(0..ds.len())).collect();
    Ok(idx.into_iter().map(|i| ds.draw(i, draw_flip(flips, rng)).0).collect())
}

/// Draws A items, oversampling labelled ones to `labeled_fraction` of the
/// slots when enabled.
pub fn sample_duplex<T: Scalar, R: Rng>(
    a: &PatchDataset,
    batch_size: usize,
    config: &SamplingConfig,
    rng: &mut R,
) -> Result<(Vec<RgbPatch<T>>, Vec<Option<PatchLabels>>)> {
    if batch_size < 1 {
        return Err(Error::param("batch_size", "must be at least 1"));
    }
    if a.is_empty() {
        return Err(Error::Empty("A dataset".into()));
    }
    let labeled = a.labeled_indices();
    let unlabeled: Vec<usize> = (0..a.len()).filter(|i| a.labels[*i].is_none()).collect();
    let mut picks = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let i = match config.labeled_fraction {
            Some(f) if !labeled.is_empty() && !unlabeled.is_empty() => {
                if rng.random_bool(f.clamp(0.0, 1.0)) {
                    labeled[rng.random_range(0..labeled.len())]
                } else {
                    unlabeled[rng.random_range(0..unlabeled.len())]
                }
            }
            _ => rng.random_range(0..a.len()),
        };
        picks.push(i);
    }
    let mut x = Vec::with_capacity(batch_size);
    let mut labels = Vec::with_capacity(batch_size);
    for i in picks {
        let (p, l) = a.draw(i, draw_flip(config.flips, rng));
        x.push(p);
        labels.push(l);
    }
    Ok((x, labels))
}

/// Independent draws from A, B and C; nothing pairs items across domains.
pub fn sample_batch<T: Scalar, R: Rng>(
    datasets: (&PatchDataset, &PatchDataset, &PatchDataset),
    batch_size: usize,
    config: &SamplingConfig,
    rng: &mut R,
) -> Result<UnpairedBatch<T>> {
    let (a, b, c) = datasets;
    let (x_a, labels) = sample_duplex(a, batch_size, config, rng)?;
    let x_b = sample_domain(b, batch_size, config.flips, rng)?;
    let x_c = sample_domain(c, batch_size, config.flips, rng)?;
    Ok(UnpairedBatch { x_a, x_b, x_c, labels })
}

/// Held-back paired evaluation item.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalItem<T> {
    pub name: String,
    pub duplex: RgbPatch<T>,
    pub monoplex: RgbPatch<T>,
    pub nucleus: LabelMask,
    pub background: LabelMask,
}

/// Monoplex patch with its nucleus mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationItem<T> {
    pub image: RgbPatch<T>,
    pub nucleus: LabelMask,
}

fn manifest_for(dir: &Path) -> Result<Option<(PathBuf, Manifest)>> {
    let p = if dir.is_file() { dir.to_path_buf() } else { dir.join(MANIFEST_FILE) };
    if !p.is_file() {
        return Ok(None);
    }
    let root = p.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(Some((root, Manifest::read(&p)?)))
}

fn find_record(m: &Manifest, split: Split, kind: FileKind, scene: u64) -> Option<&ManifestRecord> {
    m.records.iter().find(|r| r.split == split && r.kind == kind && r.scene_index == scene)
}

fn check_mask(mask: &LabelMask, patch_dims: (usize, usize), path: &Path) -> Result<()> {
    if (mask.height(), mask.width()) != patch_dims {
        return Err(Error::Dataset { path: path.to_path_buf(), reason: "mask and patch sizes differ".into() });
    }
    Ok(())
}

/// Loads the eval split from a corpus manifest, or from a directory with
/// `<name>_duplex.png`, `_monoplex.png`, `_nucleus.png`, `_background.png`.
pub fn load_eval_split<T: Scalar>(dir: &Path) -> Result<Vec<EvalItem<T>>> {
    let mut items = Vec::new();
    if let Some((root, m)) = manifest_for(dir)? {
        for r in m.records.iter().filter(|r| r.split == Split::Eval && r.kind == FileKind::Image) {
            let need = |kind| {
                find_record(&m, Split::Eval, kind, r.scene_index).map(|x| root.join(&x.path)).ok_or_else(|| {
                    Error::Dataset { path: root.join(&r.path), reason: format!("eval item lacks its {kind:?} file") }
                })
            };
            let duplex_path = root.join(&r.path);
            let duplex: RgbPatch<T> = load_rgb_png(&duplex_path)?;
            let gt = need(FileKind::GroundTruth)?;
            let (nuc, bg) = (need(FileKind::NucleusMask)?, need(FileKind::BackgroundMask)?);
            let item = EvalItem {
                name: duplex_path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string(),
                monoplex: load_rgb_png(&gt)?,
                nucleus: load_mask_png(&nuc)?,
                background: load_mask_png(&bg)?,
                duplex,
            };
            check_mask(&item.nucleus, item.duplex.dims(), &nuc)?;
            check_mask(&item.background, item.duplex.dims(), &bg)?;
            if item.monoplex.dims() != item.duplex.dims() {
                return Err(Error::Dataset { path: gt, reason: "ground truth size differs from duplex".into() });
            }
            items.push(item);
        }
    } else {
        for entry in list_patch_pngs(dir)? {
            let name = entry.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
            let Some(stem) = name.strip_suffix("_duplex.png") else { continue };
            let part = |suffix: &str| {
                let p = entry.with_file_name(format!("{stem}{suffix}"));
                if p.is_file() {
                    Ok(p)
                } else {
                    Err(Error::Dataset { path: p, reason: "missing eval companion file".into() })
                }
            };
            let duplex: RgbPatch<T> = load_rgb_png(&entry)?;
            let (nuc, bg) = (part("_nucleus.png")?, part("_background.png")?);
            let item = EvalItem {
                name: name.clone(),
                monoplex: load_rgb_png(&part("_monoplex.png")?)?,
                nucleus: load_mask_png(&nuc)?,
                background: load_mask_png(&bg)?,
                duplex,
            };
            check_mask(&item.nucleus, item.duplex.dims(), &nuc)?;
            check_mask(&item.background, item.duplex.dims(), &bg)?;
            items.push(item);
        }
    }
    if items.is_empty() {
        return Err(Error::Dataset { path: dir.to_path_buf(), reason: "no eval items".into() });
    }
    Ok(items)
}

/// Loads the segmentation split of a corpus manifest.
pub fn load_segmentation_split<T: Scalar>(dir: &Path) -> Result<Vec<SegmentationItem<T>>> {
    let Some((root, m)) = manifest_for(dir)? else {
        return Err(Error::Dataset { path: dir.to_path_buf(), reason: "no manifest".into() });
    };
    let mut items = Vec::new();
    for r in m.records.iter().filter(|r| r.split == Split::Segmentation && r.kind == FileKind::Image) {
        let mask_rec = find_record(&m, Split::Segmentation, FileKind::NucleusMask, r.scene_index).ok_or_else(|| {
            Error::Dataset { path: root.join(&r.path), reason: "segmentation item lacks a nucleus mask".into() }
        })?;
        let image: RgbPatch<T> = load_rgb_png(&root.join(&r.path))?;
        let mask_path = root.join(&mask_rec.path);
        let nucleus = load_mask_png(&mask_path)?;
        check_mask(&nucleus, image.dims(), &mask_path)?;
        items.push(SegmentationItem { image, nucleus });
    }
    if items.is_empty() {
        return Err(Error::Dataset { path: dir.to_path_buf(), reason: "no segmentation items".into() });
    }
    Ok(items)
}
