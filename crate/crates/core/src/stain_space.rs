//! Closed-form stain math.
//!
//! Images are stored row-major, height x width x 3 with interleaved channels.
//! Optical density follows Beer–Lambert: stains mix linearly in OD, and a
//! pixel's OD row vector is `c · M` where `c = (H, E, D)` holds the stain
//! concentrations and the rows of `M` are the unit OD colour vectors of the
//! three stains. In the fluorescence domain the same three channels read as
//! (DAPI, Ki67, HER2).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Default epsilon for the OD transform; bounds OD at 6 for black pixels.
pub const DEFAULT_OD_EPSILON: f64 = 1e-6;

/// Channel index of each stain in a [`StainImage`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stain {
    /// Hematoxylin counterstain (DAPI in fluorescence).
    H = 0,
    /// Eosin-like purple nuclear chromogen (Ki67).
    E = 1,
    /// DAB membrane chromogen (HER2).
    D = 2,
}

impl Stain {
    pub const ALL: [Stain; 3] = [Stain::H, Stain::E, Stain::D];

    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }
}

macro_rules! hwc3_accessors {
    ($ty:ident) => {
        impl<T: Scalar> $ty<T> {
            #[inline]
            pub fn height(&self) -> usize {
                self.height
            }

            #[inline]
            pub fn width(&self) -> usize {
                self.width
            }

            /// Interleaved `H x W x 3` buffer.
            #[inline]
            pub fn as_slice(&self) -> &[T] {
                &self.data
            }

            pub fn into_vec(self) -> Vec<T> {
                self.data
            }

            #[inline]
            pub fn get(&self, y: usize, x: usize, c: usize) -> T {
                self.data[(y * self.width + x) * 3 + c]
            }

            #[inline]
            pub fn pixel(&self, y: usize, x: usize) -> [T; 3] {
                let i = (y * self.width + x) * 3;
                [self.data[i], self.data[i + 1], self.data[i + 2]]
            }

            pub fn pixels(&self) -> impl Iterator<Item = [T; 3]> + '_ {
                self.data.chunks_exact(3).map(|p| [p[0], p[1], p[2]])
            }

            /// Values of one channel in row-major order.
            pub fn channel(&self, c: usize) -> impl Iterator<Item = T> + '_ {
                self.data.iter().skip(c).step_by(3).copied()
            }

            #[inline]
            pub fn dims(&self) -> (usize, usize) {
                (self.height, self.width)
            }
        }
    };
}

fn check_dims(height: usize, width: usize, len: usize) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidImage(format!("zero-sized image {height}x{width}")));
    }
    if len != height * width * 3 {
        return Err(Error::InvalidImage(format!(
            "buffer of {len} values does not match {height}x{width}x3"
        )));
    }
    Ok(())
}

/// An RGB image with every value in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbPatch<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

hwc3_accessors!(RgbPatch);

impl<T: Scalar> RgbPatch<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        check_dims(height, width, data.len())?;
        if let Some(bad) = data.iter().find(|v| !v.is_finite() || **v < T::zero() || **v > T::one()) {
            return Err(Error::InvalidImage(format!("rgb value {bad} outside [0, 1]")));
        }
        Ok(Self { height, width, data })
    }

    /// Builds a patch by clamping every value into `[0, 1]`; NaN is rejected.
    pub fn clamped(height: usize, width: usize, mut data: Vec<T>) -> Result<Self> {
        check_dims(height, width, data.len())?;
        for v in &mut data {
            if v.is_nan() {
                return Err(Error::InvalidImage("NaN rgb value".into()));
            }
            *v = v.max(T::zero()).min(T::one());
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: T) -> Result<Self> {
        Self::new(height, width, vec![value; height * width * 3])
    }

    pub fn cast<U: Scalar>(&self) -> RgbPatch<U> {
        RgbPatch {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| U::c(v.f64())).collect(),
        }
    }

    /// Reads a fluorescence patch as stain concentrations, channel for channel.
    pub fn as_stains(&self) -> StainImage<T> {
        StainImage { height: self.height, width: self.width, data: self.data.clone() }
    }
}

/// Non-negative stain concentrations over the channels (H, E, D).
#[derive(Clone, Debug, PartialEq)]
pub struct StainImage<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

hwc3_accessors!(StainImage);

impl<T: Scalar> StainImage<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        check_dims(height, width, data.len())?;
        if let Some(bad) = data.iter().find(|v| !v.is_finite() || **v < T::zero()) {
            return Err(Error::InvalidImage(format!("stain concentration {bad} is negative or not finite")));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![T::zero(); height * width * 3])
    }

    /// Uniform image with the given per-channel concentrations.
    pub fn uniform(height: usize, width: usize, hed: [T; 3]) -> Result<Self> {
        let data = (0..height * width).flat_map(|_| hed).collect();
        Self::new(height, width, data)
    }

    /// Fluorescence view of the concentrations, clamped to `[0, 1]`.
    pub fn to_fluorescence(&self) -> RgbPatch<T> {
        RgbPatch {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| v.min(T::one())).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> StainImage<U> {
        StainImage {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| U::c(v.f64())).collect(),
        }
    }
}

/// Optical density, `H x W x 3`, non-negative.
#[derive(Clone, Debug, PartialEq)]
pub struct OpticalDensity<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

hwc3_accessors!(OpticalDensity);

impl<T: Scalar> OpticalDensity<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        check_dims(height, width, data.len())?;
        if let Some(bad) = data.iter().find(|v| !v.is_finite() || **v < T::zero()) {
            return Err(Error::InvalidImage(format!("optical density {bad} is negative or not finite")));
        }
        Ok(Self { height, width, data })
    }
}

/// Binary mask over an image (true = labeled / foreground).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl LabelMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::InvalidImage(format!(
                "mask buffer of {} values does not match {height}x{width}",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![false; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|v| **v).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// Flat pixel indices that are set.
    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.data.iter().enumerate().filter(|(_, v)| **v).map(|(i, _)| i)
    }
}

/// Unit-norm OD colour vectors of the stains, one row per stain (H, E, D).
#[derive(Clone, Debug, PartialEq)]
pub struct StainMatrix<T> {
    rows: [[T; 3]; 3],
    inverse: [[T; 3]; 3],
}

/// Hematoxylin / eosin / DAB OD vectors before normalisation
/// (Ruifrok & Johnston colour deconvolution values).
pub const DEFAULT_HED_ROWS: [[f64; 3]; 3] = [
    [0.650, 0.704, 0.286],
    [0.072, 0.990, 0.105],
    [0.268, 0.570, 0.776],
];

const MAX_CONDITION: f64 = 1e6;

fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

fn inverse3(m: &[[f64; 3]; 3]) -> Option<[[f64; 3]; 3]> {
    let det = det3(m);
    if det == 0.0 || !det.is_finite() {
        return None;
    }
    let mut inv = [[0.0; 3]; 3];
    for (i, row) in inv.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            // cofactor of m[j][i]
            let (r0, r1) = match j {
                0 => (1, 2),
                1 => (0, 2),
                _ => (0, 1),
            };
            let (c0, c1) = match i {
                0 => (1, 2),
                1 => (0, 2),
                _ => (0, 1),
            };
            let minor = m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
            let sign = if (i + j) % 2 == 0 { 1.0 } else { -1.0 };
            *v = sign * minor / det;
        }
    }
    Some(inv)
}

fn norm1(m: &[[f64; 3]; 3]) -> f64 {
    (0..3).map(|j| (0..3).map(|i| m[i][j].abs()).sum::<f64>()).fold(0.0, f64::max)
}

impl<T: Scalar> StainMatrix<T> {
    /// Validates unit-norm rows and invertibility.
    pub fn from_rows(rows: [[f64; 3]; 3]) -> Result<Self> {
        for (row, r) in rows.iter().enumerate() {
            if r.iter().any(|v| !v.is_finite()) {
                return Err(Error::param("stain_matrix", format!("row {row} is not finite")));
            }
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(Error::NonUnitStainRow { row, norm });
            }
        }
        let inverse = inverse3(&rows).ok_or(Error::SingularStainMatrix { condition: f64::INFINITY })?;
        let condition = norm1(&rows) * norm1(&inverse);
        if !condition.is_finite() || condition >= MAX_CONDITION {
            return Err(Error::SingularStainMatrix { condition });
        }
        let cast = |m: [[f64; 3]; 3]| m.map(|r| r.map(T::c));
        Ok(Self { rows: cast(rows), inverse: cast(inverse) })
    }

    /// Normalises each row to unit length first.
    pub fn normalized(rows: [[f64; 3]; 3]) -> Result<Self> {
        let mut unit = rows;
        for (row, r) in unit.iter_mut().enumerate() {
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::NonUnitStainRow { row, norm });
            }
            r.iter_mut().for_each(|v| *v /= norm);
        }
        Self::from_rows(unit)
    }

    /// Parses three whitespace- or comma-separated rows in H, E, D order.
    /// Blank lines and `#` comments are ignored; rows are normalised.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let vals = line
                .split(|c: char| c.is_whitespace() || c == ',')
                .filter(|s| !s.is_empty())
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::param("stain_matrix", e.to_string()))?;
            if vals.len() != 3 {
                return Err(Error::param("stain_matrix", format!("expected 3 values per row, got {}", vals.len())));
            }
            rows.push([vals[0], vals[1], vals[2]]);
        }
        if rows.len() != 3 {
            return Err(Error::param("stain_matrix", format!("expected 3 rows, got {}", rows.len())));
        }
        Self::normalized([rows[0], rows[1], rows[2]])
    }

    pub fn rows(&self) -> &[[T; 3]; 3] {
        &self.rows
    }

    pub fn row(&self, stain: Stain) -> [T; 3] {
        self.rows[stain.index()]
    }

    pub fn rows_f64(&self) -> [[f64; 3]; 3] {
        self.rows.map(|r| r.map(|v| v.f64()))
    }
}

impl<T: Scalar> Default for StainMatrix<T> {
    fn default() -> Self {
        Self::normalized(DEFAULT_HED_ROWS).expect("default HED matrix is well conditioned")
    }
}

/// Coefficients of the restaining operator, indexed `[output][input]` over
/// (H, E, D).
#[derive(Clone, Debug, PartialEq)]
pub struct RestainCoefficients<T> {
    alpha: [[T; 3]; 3],
}

impl<T: Scalar> RestainCoefficients<T> {
    pub fn new(alpha: [[f64; 3]; 3]) -> Result<Self> {
        if alpha.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::param("alpha", "coefficients must be finite"));
        }
        Ok(Self { alpha: alpha.map(|r| r.map(T::c)) })
    }

    pub fn identity() -> Self {
        Self::new([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]).unwrap()
    }

    pub fn zeros() -> Self {
        Self::new([[0.0; 3]; 3]).unwrap()
    }

    /// Coefficient applied to input channel `input` when producing `output`.
    pub fn get(&self, output: Stain, input: Stain) -> T {
        self.alpha[output.index()][input.index()]
    }

    pub fn matrix_f64(&self) -> [[f64; 3]; 3] {
        self.alpha.map(|r| r.map(|v| v.f64()))
    }
}

impl<T: Scalar> Default for RestainCoefficients<T> {
    /// Deletes the eosin channel and folds half of it into hematoxylin:
    /// `α_hh = 1`, `α_eh = 0.5`, `α_dd = 1`, everything else 0.
    fn default() -> Self {
        Self::new([[1.0, 0.5, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 1.0]]).unwrap()
    }
}

/// `od = -log10((rgb + eps) / (1 + eps))`, elementwise.
pub fn rgb_to_od<T: Scalar>(patch: &RgbPatch<T>, epsilon: f64) -> Result<OpticalDensity<T>> {
    if !(epsilon > 0.0 && epsilon <= 1e-2) {
        return Err(Error::param("epsilon", format!("{epsilon} not in (0, 1e-2]")));
    }
    let eps = T::c(epsilon);
    let denom = T::one() + eps;
    let data = patch
        .as_slice()
        .iter()
        .map(|&v| {
            if !v.is_finite() || v < T::zero() || v > T::one() {
                return Err(Error::InvalidImage(format!("rgb value {v} outside [0, 1]")));
            }
            Ok((-((v + eps) / denom).log10()).max(T::zero()))
        })
        .collect::<Result<Vec<_>>>()?;
    OpticalDensity::new(patch.height(), patch.width(), data)
}

/// Transmitted intensity `10^-od`, clamped to `[0, 1]`.
pub fn od_to_rgb<T: Scalar>(od: &OpticalDensity<T>) -> RgbPatch<T> {
    let ten = T::c(10.0);
    let data = od.as_slice().iter().map(|&v| ten.powf(-v).min(T::one()).max(T::zero())).collect();
    RgbPatch { height: od.height(), width: od.width(), data }
}

/// Colour deconvolution: solves `od = c · M` per pixel, clamping negative
/// concentrations to zero.
pub fn od_to_concentrations<T: Scalar>(od: &OpticalDensity<T>, m: &StainMatrix<T>) -> StainImage<T> {
    let inv = &m.inverse;
    let mut data = Vec::with_capacity(od.as_slice().len());
    for px in od.as_slice().chunks_exact(3) {
        for s in 0..3 {
            let c = px[0] * inv[0][s] + px[1] * inv[1][s] + px[2] * inv[2][s];
            data.push(c.max(T::zero()));
        }
    }
    StainImage { height: od.height(), width: od.width(), data }
}

/// `od = c · M` per pixel.
pub fn concentrations_to_od<T: Scalar>(stain: &StainImage<T>, m: &StainMatrix<T>) -> OpticalDensity<T> {
    let rows = &m.rows;
    let mut data = Vec::with_capacity(stain.as_slice().len());
    for c in stain.as_slice().chunks_exact(3) {
        for ch in 0..3 {
            let v = c[0] * rows[0][ch] + c[1] * rows[1][ch] + c[2] * rows[2][ch];
            data.push(v.max(T::zero()));
        }
    }
    OpticalDensity { height: stain.height(), width: stain.width(), data }
}

/// Restaining: `out_o = Σ_i alpha[o][i] · x_i` per pixel, negatives clamped to 0.
pub fn restain<T: Scalar>(stain: &StainImage<T>, alpha: &RestainCoefficients<T>) -> StainImage<T> {
    let a = &alpha.alpha;
    let mut data = Vec::with_capacity(stain.as_slice().len());
    for x in stain.as_slice().chunks_exact(3) {
        for row in a {
            let v = row[0] * x[0] + row[1] * x[1] + row[2] * x[2];
            data.push(v.max(T::zero()));
        }
    }
    StainImage { height: stain.height(), width: stain.width(), data }
}

/// Classical deconvolution of a brightfield patch into concentrations.
pub fn deconvolve<T: Scalar>(patch: &RgbPatch<T>, m: &StainMatrix<T>) -> Result<StainImage<T>> {
    Ok(od_to_concentrations(&rgb_to_od(patch, DEFAULT_OD_EPSILON)?, m))
}

/// Beer–Lambert reconstruction of a brightfield patch from concentrations.
pub fn reconstruct<T: Scalar>(stain: &StainImage<T>, m: &StainMatrix<T>) -> RgbPatch<T> {
    od_to_rgb(&concentrations_to_od(stain, m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn single_pixel_rgb(v: f64) -> RgbPatch<f64> {
        RgbPatch::filled(1, 1, v).unwrap()
    }

    #[test]
    fn white_is_zero_od() {
        let od = rgb_to_od(&RgbPatch::<f64>::filled(4, 5, 1.0).unwrap(), 1e-6).unwrap();
        assert!(od.as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn od_of_tenth_and_black() {
        let od = rgb_to_od(&single_pixel_rgb(0.1), 1e-6).unwrap();
        let want = -(0.100001f64 / 1.000001).log10();
        assert!((od.get(0, 0, 0) - want).abs() < 1e-12);
        assert!((od.get(0, 0, 0) - 1.0).abs() < 1e-4);

        let od = rgb_to_od(&single_pixel_rgb(0.0), 1e-6).unwrap();
        assert!((od.get(0, 0, 1) - 6.0).abs() < 1e-6);
    }

    #[test]
    fn od_rejects_bad_epsilon() {
        let p = single_pixel_rgb(0.5);
        assert!(rgb_to_od(&p, 0.0).is_err());
        assert!(rgb_to_od(&p, 0.02).is_err());
    }

    #[test]
    fn rgb_patch_rejects_out_of_range_and_nan() {
        assert!(RgbPatch::new(1, 1, vec![0.0, 1.2, 0.5]).is_err());
        assert!(RgbPatch::new(1, 1, vec![0.0, f64::NAN, 0.5]).is_err());
        assert!(RgbPatch::new(1, 1, vec![0.0, f64::INFINITY, 0.5]).is_err());
        assert!(RgbPatch::new(1, 2, vec![0.0, 0.1, 0.5]).is_err());
    }

    #[test]
    fn deconvolve_pure_h_row() {
        let m = StainMatrix::<f64>::default();
        let row = m.row(Stain::H);
        let od = OpticalDensity::new(2, 2, (0..4).flat_map(|_| row).collect()).unwrap();
        let c = od_to_concentrations(&od, &m);
        for px in c.pixels() {
            assert!((px[0] - 1.0).abs() < 1e-12);
            assert!(px[1].abs() < 1e-12 && px[2].abs() < 1e-12);
        }
        let zero = od_to_concentrations(&OpticalDensity::new(2, 2, vec![0.0; 12]).unwrap(), &m);
        assert!(zero.as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn unit_h_concentration_maps_to_h_row() {
        let m = StainMatrix::<f64>::default();
        let od = concentrations_to_od(&StainImage::uniform(1, 1, [1.0, 0.0, 0.0]).unwrap(), &m);
        assert_eq!(od.pixel(0, 0), m.row(Stain::H));
        let zero = concentrations_to_od(&StainImage::zeros(3, 3).unwrap(), &m);
        assert!(zero.as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn stain_matrix_validation() {
        assert!(matches!(
            StainMatrix::<f64>::from_rows([[1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 1.0]]),
            Err(Error::NonUnitStainRow { row: 1, .. })
        ));
        let s = 0.5f64.sqrt();
        assert!(matches!(
            StainMatrix::<f64>::from_rows([[s, s, 0.0], [s, s, 0.0], [0.0, 0.0, 1.0]]),
            Err(Error::SingularStainMatrix { .. })
        ));
        let m = StainMatrix::<f64>::default();
        for r in m.rows() {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn parse_stain_matrix_text() {
        let text = "# H, E, D\n0.65 0.704 0.286\n0.072, 0.99, 0.105\n\n0.268 0.57 0.776 # dab\n";
        let m = StainMatrix::<f64>::parse_text(text).unwrap();
        assert_eq!(m, StainMatrix::default());
        assert!(StainMatrix::<f64>::parse_text("1 0 0\n0 1 0").is_err());
        assert!(StainMatrix::<f64>::parse_text("1 0 0\n0 1 0\n0 1 x").is_err());
    }

    #[test]
    fn restain_examples() {
        let x = StainImage::<f64>::uniform(2, 3, [0.2, 0.4, 0.1]).unwrap();
        assert_eq!(restain(&x, &RestainCoefficients::identity()), x);

        let out = restain(&x, &RestainCoefficients::default());
        for px in out.pixels() {
            assert!((px[0] - 0.4).abs() < 1e-15);
            assert_eq!(px[1], 0.0);
            assert!((px[2] - 0.1).abs() < 1e-15);
        }

        let z = StainImage::<f64>::zeros(2, 2).unwrap();
        let any = RestainCoefficients::new([[0.3, -1.0, 2.0], [4.0, 0.1, 0.0], [-2.0, 0.5, 1.0]]).unwrap();
        assert_eq!(restain(&z, &any), z);
    }

    #[test]
    fn restain_clamps_negative_outputs() {
        let x = StainImage::uniform(1, 1, [0.5, 0.5, 0.5]).unwrap();
        let a = RestainCoefficients::new([[-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        assert_eq!(restain(&x, &a).pixel(0, 0), [0.0, 0.5, 0.5]);
    }

    fn stains(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..3.0, n * 3)
    }

    fn unit_rows() -> impl Strategy<Value = [[f64; 3]; 3]> {
        prop::array::uniform3(prop::array::uniform3(0.05f64..1.0))
    }

    proptest! {
        #[test]
        fn deconvolution_round_trip(c in stains(6), rows in unit_rows()) {
            let Ok(m) = StainMatrix::<f64>::normalized(rows) else { return Ok(()); };
            let stain = StainImage::new(2, 3, c).unwrap();
            let back = od_to_concentrations(&concentrations_to_od(&stain, &m), &m);
            for (a, b) in back.as_slice().iter().zip(stain.as_slice()) {
                prop_assert!((a - b).abs() <= 1e-5, "{a} vs {b}");
            }
        }

        #[test]
        fn default_restain_deletes_eosin(c in stains(5)) {
            let out = restain(&StainImage::new(1, 5, c).unwrap(), &RestainCoefficients::default());
            prop_assert!(out.channel(Stain::E.index()).all(|v| v == 0.0));
        }

        #[test]
        fn restain_is_linear(x in stains(4), y in stains(4), a in 0.0f64..2.0, b in 0.0f64..2.0,
                             alpha in prop::array::uniform3(prop::array::uniform3(0.0f64..2.0))) {
            let k = RestainCoefficients::new(alpha).unwrap();
            let xi = StainImage::new(2, 2, x.clone()).unwrap();
            let yi = StainImage::new(2, 2, y.clone()).unwrap();
            let mix = StainImage::new(2, 2, x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect()).unwrap();
            let lhs = restain(&mix, &k);
            let (rx, ry) = (restain(&xi, &k), restain(&yi, &k));
            for i in 0..12 {
                let rhs = a * rx.as_slice()[i] + b * ry.as_slice()[i];
                prop_assert!((lhs.as_slice()[i] - rhs).abs() < 1e-9);
            }
        }

        #[test]
        fn outputs_are_finite_and_non_negative(v in prop::collection::vec(0.0f64..=1.0, 12)) {
            let m = StainMatrix::<f64>::default();
            let od = rgb_to_od(&RgbPatch::new(2, 2, v).unwrap(), DEFAULT_OD_EPSILON).unwrap();
            let c = od_to_concentrations(&od, &m);
            let r = restain(&c, &RestainCoefficients::default());
            let back = concentrations_to_od(&r, &m);
            for s in [od.as_slice(), c.as_slice(), r.as_slice(), back.as_slice()] {
                prop_assert!(s.iter().all(|x| x.is_finite() && *x >= 0.0));
            }
        }
    }
}
