//! Multi-view depth projection, pseudo-coloring, per-pixel feature pull-back
//! and the positional encoding used as the geometric feature block.

use std::f64::consts::PI;
use std::sync::OnceLock;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, RowSet};

/// Viewing direction of a projection. `Z` looks down the z axis onto the
/// xy-plane; the other two permute coordinates cyclically.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Axis {
    Z,
    X,
    Y,
}

impl Axis {
    /// Stacking order of per-view features.
    pub const ALL: [Axis; 3] = [Axis::Z, Axis::X, Axis::Y];

    /// Coordinate indices `(u, v, depth)`.
    pub fn coords(self) -> (usize, usize, usize) {
        match self {
            Axis::Z => (0, 1, 2),
            Axis::X => (1, 2, 0),
            Axis::Y => (2, 0, 1),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Axis::Z => "z",
            Axis::X => "x",
            Axis::Y => "y",
        }
    }

    pub fn code(self) -> u32 {
        match self {
            Axis::Z => 0,
            Axis::X => 1,
            Axis::Y => 2,
        }
    }

    pub fn from_code(code: u32) -> Option<Axis> {
        match code {
            0 => Some(Axis::Z),
            1 => Some(Axis::X),
            2 => Some(Axis::Y),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DepthImage {
    pub height: usize,
    pub width: usize,
    pub axis: Axis,
    /// Row-major `u * width + v`; background pixels are exactly 0.
    pub intensity: Vec<f64>,
}

impl DepthImage {
    pub fn at(&self, u: usize, v: usize) -> f64 {
        self.intensity[u * self.width + v]
    }
}

/// Pixel assignment of every point for one view.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionRecord {
    pub axis: Axis,
    pub height: usize,
    pub width: usize,
    /// In-plane extent Δ used to map coordinates to pixels.
    pub pixel_scale: f64,
    pub u_min: f64,
    pub v_min: f64,
    pub pixels: Vec<(u32, u32)>,
    /// Δ was zero and replaced by 1.
    pub degenerate: bool,
}

impl ProjectionRecord {
    /// Builds a record from stored pixel pairs, validating the range.
    pub fn from_pixels(height: usize, width: usize, pixels: Vec<(u32, u32)>) -> Result<Self> {
        if let Some(&(u, v)) = pixels
            .iter()
            .find(|&&(u, v)| u as usize >= height || v as usize >= width)
        {
            return Err(Error::InvalidArgument(format!(
                "pixel ({u}, {v}) outside {height}x{width} image"
            )));
        }
        Ok(Self {
            axis: Axis::Z,
            height,
            width,
            pixel_scale: f64::NAN,
            u_min: f64::NAN,
            v_min: f64::NAN,
            pixels,
            degenerate: false,
        })
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ColorImage {
    pub height: usize,
    pub width: usize,
    pub rgb: Vec<[f64; 3]>,
}

impl ColorImage {
    /// Interleaved 8-bit RGB bytes.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.rgb
            .iter()
            .flat_map(|c| c.map(|x| (x.clamp(0.0, 1.0) * 255.0).round() as u8))
            .collect()
    }
}

/// Per-pixel features, `data[(u * width + v) * channels + c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureImage {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl FeatureImage {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::DimensionMismatch {
                what: "feature image payload",
                expected: height * width * channels,
                found: data.len(),
            });
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("feature image"));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn pixel(&self, u: usize, v: usize) -> &[f32] {
        let start = (u * self.width + v) * self.channels;
        &self.data[start..start + self.channels]
    }
}

/// Dense `rows × cols` matrix of per-point features, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                what: "feature matrix payload",
                expected: rows * cols,
                found: data.len(),
            });
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("feature matrix"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::DimensionMismatch {
                what: "feature matrix row",
                expected: cols,
                found: bad.len(),
            });
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn from_cloud(cloud: &PointCloud) -> Self {
        let data = cloud.points().iter().flat_map(|p| [p.x, p.y, p.z]).collect();
        Self {
            rows: cloud.len(),
            cols: 3,
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn scaled(&self, factor: f64) -> FeatureMatrix {
        FeatureMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x * factor).collect(),
        }
    }

    /// Rows reordered so that output row `i` is input row `order[i]`.
    pub fn permute_rows(&self, order: &[usize]) -> FeatureMatrix {
        let data = order.iter().flat_map(|&r| self.row(r).iter().copied()).collect();
        FeatureMatrix {
            rows: order.len(),
            cols: self.cols,
            data,
        }
    }

    /// Column-wise concatenation of blocks with equal row counts.
    pub fn hconcat(blocks: &[&FeatureMatrix]) -> Result<FeatureMatrix> {
        let rows = blocks.first().map_or(0, |b| b.rows);
        if let Some(b) = blocks.iter().find(|b| b.rows != rows) {
            return Err(Error::DimensionMismatch {
                what: "feature block rows",
                expected: rows,
                found: b.rows,
            });
        }
        let cols = blocks.iter().map(|b| b.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for b in blocks {
                data.extend_from_slice(b.row(r));
            }
        }
        Ok(FeatureMatrix { rows, cols, data })
    }
}

impl RowSet for FeatureMatrix {
    fn n_rows(&self) -> usize {
        self.rows
    }
    fn dim(&self) -> usize {
        self.cols
    }
    fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Orthographic depth projection of `cloud` along `axis` onto an
/// `height × width` image.
///
/// Each point lands on pixel `(⌊(a - a_min)/Δ·H⌋, ⌊(b - b_min)/Δ·W⌋)`, clamped
/// into the image, where `Δ` is the larger in-plane extent. A pixel stores the
/// logistic of the depth coordinate; collisions keep the largest value and
/// untouched pixels stay 0.
pub fn project_depth(
    cloud: &PointCloud,
    axis: Axis,
    height: usize,
    width: usize,
) -> Result<(DepthImage, ProjectionRecord)> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidArgument(format!(
            "image size {height}x{width}"
        )));
    }
    let (a, b, depth) = axis.coords();
    let (lo, hi) = cloud.bounds();
    let extent = (hi[a] - lo[a]).max(hi[b] - lo[b]);
    let (delta, degenerate) = if extent > 0.0 {
        (extent, false)
    } else {
        (1.0, true)
    };
    let to_pixel = |x: f64, min: f64, size: usize| -> u32 {
        let raw = ((x - min) / delta * size as f64).floor();
        raw.clamp(0.0, (size - 1) as f64) as u32
    };
    let mut intensity = vec![0.0; height * width];
    let mut pixels = Vec::with_capacity(cloud.len());
    for p in cloud.points() {
        let u = to_pixel(p[a], lo[a], height);
        let v = to_pixel(p[b], lo[b], width);
        let value = logistic(p[depth]);
        let slot = &mut intensity[u as usize * width + v as usize];
        if value > *slot {
            *slot = value;
        }
        pixels.push((u, v));
    }
    Ok((
        DepthImage {
            height,
            width,
            axis,
            intensity,
        },
        ProjectionRecord {
            axis,
            height,
            width,
            pixel_scale: delta,
            u_min: lo[a],
            v_min: lo[b],
            pixels,
            degenerate,
        },
    ))
}

fn colormap_table() -> &'static [[f64; 3]] {
    static TABLE: OnceLock<Vec<[f64; 3]>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let text = include_str!("../data/diverging_pink_green_256.txt");
        let table: Vec<[f64; 3]> = text
            .lines()
            .filter(|l| !l.trim_start().starts_with('#') && !l.trim().is_empty())
            .map(|l| {
                let mut it = l.split_whitespace().map(|t| t.parse::<f64>().expect("colormap entry"));
                [it.next().unwrap(), it.next().unwrap(), it.next().unwrap()]
            })
            .collect();
        assert_eq!(table.len(), 256, "colormap table must have 256 entries");
        table
    })
}

/// Diverging pink-green colormap with linear interpolation between the 256
/// table entries. Input is clamped to [0, 1].
pub fn colormap(value: f64) -> [f64; 3] {
    let table = colormap_table();
    let t = value.clamp(0.0, 1.0) * 255.0;
    let k = (t.floor() as usize).min(254);
    let f = t - k as f64;
    let (a, b) = (table[k], table[k + 1]);
    [
        a[0] + (b[0] - a[0]) * f,
        a[1] + (b[1] - a[1]) * f,
        a[2] + (b[2] - a[2]) * f,
    ]
}

/// 3×3 zero-padded mean filter on the raw intensities.
pub fn mean_filter(img: &DepthImage) -> Vec<f64> {
    let (h, w) = (img.height, img.width);
    let mut out = vec![0.0; h * w];
    for u in 0..h {
        for v in 0..w {
            let mut s = 0.0;
            for uu in u.saturating_sub(1)..=(u + 1).min(h - 1) {
                for vv in v.saturating_sub(1)..=(v + 1).min(w - 1) {
                    s += img.intensity[uu * w + vv];
                }
            }
            out[u * w + v] = s / 9.0;
        }
    }
    out
}

pub fn smooth_and_colorize(img: &DepthImage) -> ColorImage {
    ColorImage {
        height: img.height,
        width: img.width,
        rgb: mean_filter(img).into_iter().map(colormap).collect(),
    }
}

/// Gathers `features(u_i, v_i, :)` for every point of the record.
pub fn pull_back_features(features: &FeatureImage, rec: &ProjectionRecord) -> Result<FeatureMatrix> {
    if features.height != rec.height || features.width != rec.width {
        return Err(Error::InvalidArgument(format!(
            "feature image is {}x{} but projection record is {}x{}",
            features.height, features.width, rec.height, rec.width
        )));
    }
    let c = features.channels;
    let mut data = Vec::with_capacity(rec.len() * c);
    for &(u, v) in &rec.pixels {
        data.extend(features.pixel(u as usize, v as usize).iter().map(|&x| f64::from(x)));
    }
    FeatureMatrix::new(rec.len(), c, data)
}

/// Stacks per-view features in the order `[z, x, y]`.
pub fn assemble_visual_features(
    fz: &FeatureMatrix,
    fx: &FeatureMatrix,
    fy: &FeatureMatrix,
) -> Result<FeatureMatrix> {
    for f in [fx, fy] {
        if f.cols != fz.cols {
            return Err(Error::DimensionMismatch {
                what: "per-view feature channels",
                expected: fz.cols,
                found: f.cols,
            });
        }
    }
    FeatureMatrix::hconcat(&[fz, fx, fy])
}

pub const DEFAULT_PE_BANDS: usize = 64;

/// Sinusoidal encoding: for each coordinate and band `k`, the pair
/// `sin(2^k π c), cos(2^k π c)`. With 64 bands the width is 384.
pub fn positional_encoding(cloud: &PointCloud, bands: usize) -> FeatureMatrix {
    let cols = 6 * bands;
    let freqs: Vec<f64> = (0..bands).map(|k| 2f64.powi(k as i32) * PI).collect();
    let data: Vec<f64> = cloud
        .points()
        .par_iter()
        .flat_map_iter(|p| {
            let mut row = Vec::with_capacity(cols);
            for c in 0..3 {
                for f in &freqs {
                    let (s, co) = (f * p[c]).sin_cos();
                    row.push(s);
                    row.push(co);
                }
            }
            row
        })
        .collect();
    FeatureMatrix {
        rows: cloud.len(),
        cols,
        data,
    }
}

/// Relative weights of the two feature blocks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlendWeights {
    pub visual: f64,
    pub positional: f64,
}

impl Default for BlendWeights {
    fn default() -> Self {
        Self {
            visual: 1.0,
            positional: 1.0,
        }
    }
}

/// Per-column standardization to zero mean and unit (population) variance,
/// then scaling by `weight`. Constant columns become zeros.
pub fn standardize(f: &FeatureMatrix, weight: f64) -> FeatureMatrix {
    let (n, d) = (f.rows, f.cols);
    let mut mean = vec![0.0; d];
    for r in 0..n {
        for (m, x) in mean.iter_mut().zip(f.row(r)) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; d];
    for r in 0..n {
        for ((v, x), m) in var.iter_mut().zip(f.row(r)).zip(&mean) {
            *v += (x - m) * (x - m);
        }
    }
    let factor: Vec<f64> = var
        .iter()
        .zip(&mean)
        .map(|(v, m)| {
            let sd = (v / n as f64).sqrt();
            if sd <= 1e-12 * m.abs().max(1.0) {
                0.0
            } else {
                weight / sd
            }
        })
        .collect();
    let mut data = Vec::with_capacity(n * d);
    for r in 0..n {
        for ((x, m), s) in f.row(r).iter().zip(&mean).zip(&factor) {
            data.push((x - m) * s);
        }
    }
    FeatureMatrix { rows: n, cols: d, data }
}

/// Parameter-free fusion of the visual and positional blocks: each block is
/// standardized, weighted and concatenated `[visual, positional]`.
pub fn compose_input_features(
    visual: Option<&FeatureMatrix>,
    positional: &FeatureMatrix,
    weights: BlendWeights,
) -> Result<FeatureMatrix> {
    let pe = standardize(positional, weights.positional);
    match visual {
        None => Ok(pe),
        Some(v) => {
            if v.rows != positional.rows {
                return Err(Error::DimensionMismatch {
                    what: "visual feature rows",
                    expected: positional.rows,
                    found: v.rows,
                });
            }
            FeatureMatrix::hconcat(&[&standardize(v, weights.visual), &pe])
        }
    }
}

/// Projects, smooths and colorizes all three views.
pub fn render_views(
    cloud: &PointCloud,
    height: usize,
    width: usize,
) -> Result<Vec<(ColorImage, ProjectionRecord)>> {
    Axis::ALL
        .par_iter()
        .map(|&axis| {
            let (depth, rec) = project_depth(cloud, axis, height, width)?;
            Ok((smooth_and_colorize(&depth), rec))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cloud(pts: &[[f64; 3]]) -> PointCloud {
        PointCloud::from_slice(pts).unwrap()
    }

    #[test]
    fn project_two_points() {
        let c = cloud(&[[0.0, 0.0, 0.0], [1.0, 1.0, 0.5]]);
        let (img, rec) = project_depth(&c, Axis::Z, 4, 4).unwrap();
        assert_eq!(rec.pixels, vec![(0, 0), (3, 3)]);
        assert_eq!(img.at(0, 0), 0.5);
        assert!((img.at(3, 3) - 0.622_459_331_201_854_6).abs() < 1e-15);
        let lit = img.intensity.iter().filter(|&&x| x != 0.0).count();
        assert_eq!(lit, 2);
        assert_eq!(rec.pixel_scale, 1.0);
    }

    #[test]
    fn collision_keeps_max() {
        let c = cloud(&[[0.0, 0.0, -1.0], [0.0, 0.0, 2.0], [1.0, 1.0, 0.0]]);
        let (img, rec) = project_depth(&c, Axis::Z, 8, 8).unwrap();
        assert_eq!(rec.pixels[0], rec.pixels[1]);
        assert_eq!(img.at(0, 0), logistic(2.0));
    }

    #[test]
    fn degenerate_extent_flagged() {
        let c = cloud(&[[0.5, 0.5, 0.0], [0.5, 0.5, 1.0]]);
        let (_, rec) = project_depth(&c, Axis::Z, 4, 4).unwrap();
        assert!(rec.degenerate);
        assert_eq!(rec.pixel_scale, 1.0);
        assert!(project_depth(&c, Axis::Z, 0, 4).is_err());
    }

    #[test]
    fn axes_permute_coordinates() {
        let c = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 1.0]]);
        let (_, rx) = project_depth(&c, Axis::X, 4, 4).unwrap();
        // x view: u from y, v from z.
        assert_eq!(rx.pixels, vec![(0, 0), (0, 0), (3, 3)]);
        let (_, ry) = project_depth(&c, Axis::Y, 4, 4).unwrap();
        // y view: u from z, v from x.
        assert_eq!(ry.pixels, vec![(0, 0), (0, 3), (3, 0)]);
    }

    #[test]
    fn mean_filter_single_pixel() {
        let mut intensity = vec![0.0; 25];
        intensity[2 * 5 + 2] = 0.9;
        let img = DepthImage {
            height: 5,
            width: 5,
            axis: Axis::Z,
            intensity,
        };
        let f = mean_filter(&img);
        for u in 0..5 {
            for v in 0..5 {
                let expect = if (1..=3).contains(&u) && (1..=3).contains(&v) { 0.1 } else { 0.0 };
                assert!((f[u * 5 + v] - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn colorize_constant_and_zero() {
        let img = DepthImage {
            height: 4,
            width: 4,
            axis: Axis::Z,
            intensity: vec![0.3; 16],
        };
        let c = smooth_and_colorize(&img);
        for u in 1..3 {
            for v in 1..3 {
                let got = c.rgb[u * 4 + v];
                let want = colormap(0.3);
                for k in 0..3 {
                    assert!((got[k] - want[k]).abs() < 1e-12);
                }
            }
        }
        let zero = DepthImage {
            intensity: vec![0.0; 16],
            ..img
        };
        let c = smooth_and_colorize(&zero);
        assert!(c.rgb.iter().all(|&p| p == colormap(0.0)));
    }

    #[test]
    fn colormap_endpoints_and_range() {
        let lo = colormap(0.0);
        let hi = colormap(1.0);
        assert!(lo[0] > lo[1], "low end is pink");
        assert!(hi[1] > hi[0], "high end is green");
        for i in 0..=100 {
            let c = colormap(i as f64 / 100.0);
            assert!(c.iter().all(|x| (0.0..=1.0).contains(x)));
        }
    }

    #[test]
    fn pull_back_gathers_pixel_coordinates() {
        let (h, w) = (6, 5);
        let mut data = Vec::new();
        for u in 0..h {
            for v in 0..w {
                data.push(u as f32);
                data.push(v as f32);
            }
        }
        let img = FeatureImage::new(h, w, 2, data).unwrap();
        let rec = ProjectionRecord::from_pixels(h, w, vec![(0, 0), (5, 4), (2, 3), (2, 3)]).unwrap();
        let f = pull_back_features(&img, &rec).unwrap();
        for (i, &(u, v)) in rec.pixels.iter().enumerate() {
            assert_eq!(f.row(i), &[u as f64, v as f64]);
        }
        assert_eq!(f.row(2), f.row(3));
        let bad = ProjectionRecord::from_pixels(7, 5, vec![(0, 0)]).unwrap();
        assert!(pull_back_features(&img, &bad).is_err());
    }

    #[test]
    fn assemble_orders_views() {
        let a = FeatureMatrix::from_rows(&[vec![1.0], vec![4.0]]).unwrap();
        let b = FeatureMatrix::from_rows(&[vec![2.0], vec![5.0]]).unwrap();
        let c = FeatureMatrix::from_rows(&[vec![3.0], vec![6.0]]).unwrap();
        let f = assemble_visual_features(&a, &b, &c).unwrap();
        assert_eq!(f.cols(), 3);
        assert_eq!(f.row(0), &[1.0, 2.0, 3.0]);
        assert_eq!(f.row(1), &[4.0, 5.0, 6.0]);
        let wide = FeatureMatrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert!(assemble_visual_features(&a, &wide, &c).is_err());

        let perm = [1, 0];
        let fp = assemble_visual_features(&a.permute_rows(&perm), &b.permute_rows(&perm), &c.permute_rows(&perm)).unwrap();
        assert_eq!(fp, f.permute_rows(&perm));
    }

    #[test]
    fn positional_encoding_origin() {
        let pe = positional_encoding(&cloud(&[[0.0, 0.0, 0.0], [0.3, 0.1, -0.2], [0.3, 0.1, -0.2]]), DEFAULT_PE_BANDS);
        assert_eq!(pe.cols(), 384);
        for (j, x) in pe.row(0).iter().enumerate() {
            assert_eq!(*x, if j % 2 == 0 { 0.0 } else { 1.0 });
        }
        assert_eq!(pe.row(1), pe.row(2));
        // coordinate-major, then band, then (sin, cos)
        assert_eq!(pe.get(1, 128 + 2), (2.0 * PI * 0.1).sin());
        assert_eq!(pe.get(1, 256 + 1), (PI * -0.2).cos());
    }

    #[test]
    fn compose_blocks() {
        let pe = FeatureMatrix::from_rows(&[vec![1.0, 5.0], vec![3.0, 5.0]]).unwrap();
        let only = compose_input_features(None, &pe, BlendWeights::default()).unwrap();
        assert_eq!(only.row(0), &[-1.0, 0.0]);
        assert_eq!(only.row(1), &[1.0, 0.0]);

        let vis = FeatureMatrix::from_rows(&[vec![0.0, 2.0], vec![4.0, 0.0]]).unwrap();
        let both = compose_input_features(Some(&vis), &pe, BlendWeights::default()).unwrap();
        assert_eq!(both.cols(), 4);
        assert_eq!(both.row(0), &[-1.0, 1.0, -1.0, 0.0]);

        let short = FeatureMatrix::from_rows(&[vec![0.0]]).unwrap();
        assert!(compose_input_features(Some(&short), &pe, BlendWeights::default()).is_err());
    }

    fn arb_cloud() -> impl Strategy<Value = PointCloud> {
        prop::collection::vec((-2.0f64..2.0, -2.0f64..2.0, -2.0f64..2.0), 1..60).prop_map(|v| {
            PointCloud::from_slice(&v.iter().map(|&(x, y, z)| [x, y, z]).collect::<Vec<_>>()).unwrap()
        })
    }

    proptest! {
        #[test]
        fn record_total_and_in_range(c in arb_cloud(), h in 1usize..64, w in 1usize..64) {
            for axis in Axis::ALL {
                let (img, rec) = project_depth(&c, axis, h, w).unwrap();
                prop_assert_eq!(rec.len(), c.len());
                for &(u, v) in &rec.pixels {
                    prop_assert!((u as usize) < h && (v as usize) < w);
                    let x = img.at(u as usize, v as usize);
                    prop_assert!(x > 0.0 && x < 1.0);
                }
            }
        }

        #[test]
        fn projection_shift_covariance(c in arb_cloud(), steps in 1usize..5) {
            // Two anchor points pin the minima and make Δ = 2·extent, so a
            // shift of `steps` pixels keeps every point inside the frame.
            let h = 32;
            let (lo, hi) = c.bounds();
            let extent = (hi.x - lo.x).max(hi.y - lo.y);
            prop_assume!(extent > 1e-3);
            let n = c.len();
            let mut pts: Vec<[f64; 3]> = c.points().iter().map(|p| [p.x, p.y, p.z]).collect();
            pts.push([lo.x, lo.y, 0.0]);
            pts.push([lo.x + 2.0 * extent, lo.y, 0.0]);
            let (_, r0) = project_depth(&PointCloud::from_slice(&pts).unwrap(), Axis::Z, h, h).unwrap();
            let dx = r0.pixel_scale / h as f64 * steps as f64;
            let mut moved = pts.clone();
            for p in moved.iter_mut().take(n) {
                p[0] += dx;
            }
            let (_, r1) = project_depth(&PointCloud::from_slice(&moved).unwrap(), Axis::Z, h, h).unwrap();
            prop_assert_eq!(r0.pixel_scale, r1.pixel_scale);
            for i in 0..n {
                let (u0, v0) = r0.pixels[i];
                let (u1, v1) = r1.pixels[i];
                let raw = (pts[i][0] - r0.u_min) / r0.pixel_scale * h as f64;
                let frac = raw - raw.floor();
                if frac > 1e-6 && frac < 1.0 - 1e-6 {
                    prop_assert_eq!(u1 as usize, u0 as usize + steps);
                }
                prop_assert_eq!(v1, v0);
            }
        }

        #[test]
        fn positional_encoding_bounded(c in arb_cloud()) {
            let pe = positional_encoding(&c, DEFAULT_PE_BANDS);
            prop_assert_eq!(pe.cols(), 384);
            prop_assert!(pe.data().iter().all(|x| (-1.0..=1.0).contains(x)));
        }

        #[test]
        fn constant_feature_image_pulls_back_constant(c in arb_cloud(), val in -5.0f32..5.0) {
            let (_, rec) = project_depth(&c, Axis::Y, 16, 12).unwrap();
            let img = FeatureImage::new(16, 12, 3, vec![val; 16 * 12 * 3]).unwrap();
            let f = pull_back_features(&img, &rec).unwrap();
            prop_assert!(f.data().iter().all(|&x| x == f64::from(val)));
        }

        #[test]
        fn composed_columns_standardized(rows in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 4), 3..40)) {
            let f = FeatureMatrix::from_rows(&rows).unwrap();
            let out = compose_input_features(Some(&f), &f, BlendWeights::default()).unwrap();
            let n = out.rows() as f64;
            for c in 0..out.cols() {
                let col: Vec<f64> = (0..out.rows()).map(|r| out.get(r, c)).collect();
                let mean = col.iter().sum::<f64>() / n;
                let var = col.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
                prop_assert!(mean.abs() < 1e-6);
                prop_assert!((var - 1.0).abs() < 1e-6 || var < 1e-20);
            }
        }
    }
}
