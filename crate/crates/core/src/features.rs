//! Upright SURF-style features: integral images, box-filter Hessian keypoint
//! detection over one octave, and 64-d descriptors from Haar responses.

use std::path::Path;

use crate::error::{Error, Result};
use crate::imaging::RasterImage;
use crate::matrix::Matrix;
use crate::store;
use crate::DESCRIPTOR_DIM;

/// Box filter side lengths of the single octave.
pub const FILTER_SIZES: [usize; 4] = [9, 15, 21, 27];

/// Weight on the mixed derivative compensating for the box approximation.
const DXY_WEIGHT: f64 = 0.9;

/// Smallest image side on which detection runs.
pub const MIN_DETECT_SIDE: usize = 32;

/// Summed-area table over intensities. Entry `(x, y)` holds the sum of all
/// pixels strictly above and to the left, so the table is one larger than
/// the image in each direction. Sums are kept as exact integers of the raw
/// 8-bit values; accessors report them in `[0, 1]`-scaled units.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntegralImage {
    width: usize,
    height: usize,
    sums: Vec<u64>,
}

impl IntegralImage {
    pub fn new(img: &RasterImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let stride = w + 1;
        let mut sums = vec![0u64; stride * (h + 1)];
        for y in 0..h {
            let mut row_sum = 0u64;
            let src = &img.pixels()[y * w..(y + 1) * w];
            for x in 0..w {
                row_sum += src[x] as u64;
                sums[(y + 1) * stride + x + 1] = sums[y * stride + x + 1] + row_sum;
            }
        }
        Self {
            width: w,
            height: h,
            sums,
        }
    }

    /// Width of the source image.
    pub fn width(&self) -> usize {
        self.width
    }

    /// Height of the source image.
    pub fn height(&self) -> usize {
        self.height
    }

    /// Raw cumulative sum at table position `(x, y)`, `x ≤ width`, `y ≤ height`.
    #[inline]
    pub fn raw(&self, x: usize, y: usize) -> u64 {
        self.sums[y * (self.width + 1) + x]
    }

    /// Table entry in scaled units.
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.raw(x, y) as f64 / 255.0
    }

    /// Exact sum of raw intensities over `[x0, x1) × [y0, y1)`.
    #[inline]
    pub fn rect_sum_raw(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> u64 {
        debug_assert!(x0 <= x1 && y0 <= y1 && x1 <= self.width && y1 <= self.height);
        // a - b - c + d never underflows when evaluated as (a + d) - (b + c)
        (self.raw(x1, y1) + self.raw(x0, y0)) - (self.raw(x0, y1) + self.raw(x1, y0))
    }

    /// Rectangle sum in scaled units.
    pub fn rect_sum(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> f64 {
        self.rect_sum_raw(x0, y0, x1, y1) as f64 / 255.0
    }

    /// Sum of a `w × h` box with top-left corner `(x, y)`, as a signed raw value.
    #[inline]
    fn boxed(&self, x: usize, y: usize, w: usize, h: usize) -> i64 {
        self.rect_sum_raw(x, y, x + w, y + h) as i64
    }
}

pub fn integral_image(img: &RasterImage) -> IntegralImage {
    IntegralImage::new(img)
}

/// An interest point found by [`detect_keypoints`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub x: f32,
    pub y: f32,
    /// `filter_size / 9 × 1.2`
    pub scale: f32,
    pub response: f32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionConfig {
    /// Minimum Hessian determinant, in units of `[0, 1]`-scaled intensity.
    pub threshold: f64,
    pub max_keypoints: usize,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        Self {
            threshold: 0.002,
            max_keypoints: 1000,
        }
    }
}

pub fn filter_scale(filter_size: usize) -> f64 {
    filter_size as f64 / 9.0 * 1.2
}

/// Area-normalized box-filter Hessian determinant at pixel `(x, y)` for a
/// filter of side `size`. The caller guarantees the filter fits.
pub fn hessian_response(ii: &IntegralImage, x: usize, y: usize, size: usize) -> f64 {
    let (dxx, dyy, dxy) = hessian_parts(ii, x, y, size);
    dxx * dyy - (DXY_WEIGHT * dxy).powi(2)
}

fn hessian_parts(ii: &IntegralImage, x: usize, y: usize, size: usize) -> (f64, f64, f64) {
    let lobe = size / 3;
    let half = (size - 1) / 2;
    let band = 2 * lobe - 1;

    let dxx = ii.boxed(x - half, y + 1 - lobe, size, band)
        - 3 * ii.boxed(x - lobe / 2, y + 1 - lobe, lobe, band);
    let dyy = ii.boxed(x + 1 - lobe, y - half, band, size)
        - 3 * ii.boxed(x + 1 - lobe, y - lobe / 2, band, lobe);
    let dxy = ii.boxed(x + 1, y - lobe, lobe, lobe) + ii.boxed(x - lobe, y + 1, lobe, lobe)
        - ii.boxed(x - lobe, y - lobe, lobe, lobe)
        - ii.boxed(x + 1, y + 1, lobe, lobe);

    let norm = 1.0 / (255.0 * (size * size) as f64);
    (dxx as f64 * norm, dyy as f64 * norm, dxy as f64 * norm)
}

/// Response map of one filter size; cells where the filter does not fit are
/// left at zero and flagged invalid through `margin`.
struct ResponseLayer {
    margin: usize,
    values: Vec<f64>,
}

impl ResponseLayer {
    fn build(ii: &IntegralImage, size: usize) -> Self {
        let (w, h) = (ii.width, ii.height);
        let margin = (size - 1) / 2;
        let mut values = vec![0.0; w * h];
        if w > 2 * margin && h > 2 * margin {
            for y in margin..h - margin {
                for x in margin..w - margin {
                    values[y * w + x] = hessian_response(ii, x, y, size);
                }
            }
        }
        Self { margin, values }
    }
}

/// Detect blob-like keypoints with 3×3×3 non-maximum suppression across
/// space and the four filter sizes. Results are sorted by response
/// (strongest first) and truncated to `max_keypoints`. Images smaller than
/// [`MIN_DETECT_SIDE`] yield no keypoints.
pub fn detect_keypoints(ii: &IntegralImage, threshold: f64, max_keypoints: usize) -> Vec<Keypoint> {
    let (w, h) = (ii.width, ii.height);
    if w < MIN_DETECT_SIDE || h < MIN_DETECT_SIDE || max_keypoints == 0 {
        return Vec::new();
    }
    let layers: Vec<ResponseLayer> = FILTER_SIZES
        .iter()
        .map(|&s| ResponseLayer::build(ii, s))
        .collect();

    let mut found = Vec::new();
    for li in 1..layers.len() - 1 {
        // the largest neighbouring filter must fit at every spatial neighbour
        let m = layers[li + 1].margin + 1;
        if w <= 2 * m || h <= 2 * m {
            continue;
        }
        let cur = &layers[li].values;
        for y in m..h - m {
            for x in m..w - m {
                let v = cur[y * w + x];
                if v < threshold || v <= 0.0 {
                    continue;
                }
                if !is_local_max(&layers, li, x, y, w) {
                    continue;
                }
                let (ox, oy) = subpixel_offset(cur, x, y, w);
                found.push(Keypoint {
                    x: (x as f64 + ox) as f32,
                    y: (y as f64 + oy) as f32,
                    scale: filter_scale(FILTER_SIZES[li]) as f32,
                    response: v as f32,
                });
            }
        }
    }
    found.sort_by(|a, b| {
        b.response
            .total_cmp(&a.response)
            .then(a.y.total_cmp(&b.y))
            .then(a.x.total_cmp(&b.x))
            .then(a.scale.total_cmp(&b.scale))
    });
    found.truncate(max_keypoints);
    found
}

/// Strict maximum, with exact ties resolved in favour of the earliest cell in
/// (layer, y, x) order so a plateau yields exactly one keypoint.
fn is_local_max(layers: &[ResponseLayer], li: usize, x: usize, y: usize, w: usize) -> bool {
    let v = layers[li].values[y * w + x];
    for dl in 0..3 {
        let l = li + dl - 1;
        for ny in y - 1..=y + 1 {
            for nx in x - 1..=x + 1 {
                if l == li && nx == x && ny == y {
                    continue;
                }
                let n = layers[l].values[ny * w + nx];
                let neighbour_first = (l, ny, nx) < (li, y, x);
                if n > v || (n == v && neighbour_first) {
                    return false;
                }
            }
        }
    }
    true
}

fn subpixel_offset(values: &[f64], x: usize, y: usize, w: usize) -> (f64, f64) {
    let at = |xx: usize, yy: usize| values[yy * w + xx];
    let fit = |l: f64, c: f64, r: f64| {
        let denom = l - 2.0 * c + r;
        if denom >= 0.0 {
            return 0.0;
        }
        let off = 0.5 * (l - r) / denom;
        if off.abs() < 0.5 {
            off
        } else {
            0.0
        }
    };
    (
        fit(at(x - 1, y), at(x, y), at(x + 1, y)),
        fit(at(x, y - 1), at(x, y), at(x, y + 1)),
    )
}

/// Side of the square Haar wavelet used at scale `s` (nominally `2s`, even).
pub fn haar_size(scale: f64) -> usize {
    let s = (2.0 * scale).round() as usize;
    (s + s % 2).max(2)
}

/// Haar responses `(dx, dy)` of an `size × size` wavelet centered at pixel
/// `(px, py)`, as raw integer sums. The caller guarantees the wavelet fits.
pub fn haar_raw(ii: &IntegralImage, px: usize, py: usize, size: usize) -> (i64, i64) {
    let h = size / 2;
    let right = ii.rect_sum_raw(px, py - h, px + h, py + h) as i64;
    let left = ii.rect_sum_raw(px - h, py - h, px, py + h) as i64;
    let bottom = ii.rect_sum_raw(px - h, py, px + h, py + h) as i64;
    let top = ii.rect_sum_raw(px - h, py - h, px + h, py) as i64;
    (right - left, bottom - top)
}

/// Pixel position of descriptor sample `i` (0..20) along one axis.
pub fn sample_coord(center: f64, i: usize, scale: f64) -> f64 {
    center + (i as f64 - 9.5) * scale
}

/// Upright 64-d descriptor of a keypoint, or `None` when its window leaves
/// the image or every Haar response is zero.
///
/// The `20s × 20s` window is split into 4×4 subregions of 5×5 samples; each
/// subregion contributes `(Σdx, Σ|dx|, Σdy, Σ|dy|)` of Gaussian-weighted
/// (σ = 3.3s) responses, subregions in row-major order.
pub fn describe(ii: &IntegralImage, kp: &Keypoint) -> Option<[f32; DESCRIPTOR_DIM]> {
    let s = kp.scale as f64;
    let (cx, cy) = (kp.x as f64, kp.y as f64);
    let hs = haar_size(s);
    let half = (hs / 2) as f64;

    let lo_x = sample_coord(cx, 0, s).round();
    let hi_x = sample_coord(cx, 19, s).round();
    let lo_y = sample_coord(cy, 0, s).round();
    let hi_y = sample_coord(cy, 19, s).round();
    if lo_x - half < 0.0
        || lo_y - half < 0.0
        || hi_x + half > ii.width as f64
        || hi_y + half > ii.height as f64
    {
        return None;
    }

    let sigma = 3.3 * s;
    let inv_two_var = 1.0 / (2.0 * sigma * sigma);
    let mut acc = [0f64; DESCRIPTOR_DIM];
    let mut any = false;
    for j in 0..20 {
        let dy_off = (j as f64 - 9.5) * s;
        let py = (cy + dy_off).round() as usize;
        for i in 0..20 {
            let dx_off = (i as f64 - 9.5) * s;
            let px = (cx + dx_off).round() as usize;
            let (rx, ry) = haar_raw(ii, px, py, hs);
            if rx == 0 && ry == 0 {
                continue;
            }
            any = true;
            let g = (-(dx_off * dx_off + dy_off * dy_off) * inv_two_var).exp() / 255.0;
            let (gx, gy) = (g * rx as f64, g * ry as f64);
            let base = ((j / 5) * 4 + i / 5) * 4;
            acc[base] += gx;
            acc[base + 1] += gx.abs();
            acc[base + 2] += gy;
            acc[base + 3] += gy.abs();
        }
    }
    if !any {
        return None;
    }
    let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return None;
    }
    let mut out = [0f32; DESCRIPTOR_DIM];
    for (o, a) in out.iter_mut().zip(acc) {
        *o = (a / norm) as f32;
    }
    Some(out)
}

/// An `(N, 64)` set of unit-norm descriptors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DescriptorSet {
    data: Matrix,
}

impl DescriptorSet {
    pub fn empty() -> Self {
        Self {
            data: Matrix::with_cols(DESCRIPTOR_DIM),
        }
    }

    /// Wrap a matrix, checking the column count and that every row is unit-norm.
    pub fn new(data: Matrix) -> Result<Self> {
        if data.cols() != DESCRIPTOR_DIM {
            return Err(Error::Dimension(format!(
                "descriptors have {DESCRIPTOR_DIM} columns, got {}",
                data.cols()
            )));
        }
        for (i, row) in data.iter_rows().enumerate() {
            let n = row_norm(row);
            if (n - 1.0).abs() > 1e-5 {
                return Err(Error::Parameter(format!("descriptor row {i} has norm {n}")));
            }
        }
        Ok(Self { data })
    }

    pub fn len(&self) -> usize {
        self.data.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.data
    }

    pub fn into_matrix(self) -> Matrix {
        self.data
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        store::write_matrix(path, &self.data)
    }
}

fn row_norm(row: &[f32]) -> f64 {
    row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
}

/// integral image → keypoints → descriptors, dropping rejected keypoints.
pub fn extract(img: &RasterImage, cfg: &DetectionConfig) -> DescriptorSet {
    let ii = IntegralImage::new(img);
    let mut data = Matrix::with_cols(DESCRIPTOR_DIM);
    for kp in detect_keypoints(&ii, cfg.threshold, cfg.max_keypoints) {
        if let Some(d) = describe(&ii, &kp) {
            data.push_row(&d).expect("fixed descriptor width");
        }
    }
    DescriptorSet { data }
}

/// What [`import_descriptors`] had to fix up.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ImportReport {
    /// Indices (in the file) of all-zero rows that were dropped.
    pub dropped_rows: Vec<usize>,
    pub renormalized_rows: usize,
}

/// Load externally computed descriptors from an `(N, 64)` f32 tensor file.
/// Rows whose norm is off by more than 1e-3 are renormalized; zero rows are
/// dropped and reported.
pub fn import_descriptors(path: impl AsRef<Path>) -> Result<(DescriptorSet, ImportReport)> {
    let path = path.as_ref();
    let tensor = store::read_tensor(path)?;
    if tensor.shape().len() != 2 || tensor.shape()[1] != DESCRIPTOR_DIM {
        return Err(Error::Format {
            offset: 8,
            reason: format!(
                "{}: expected shape (N, {DESCRIPTOR_DIM}), got {:?}",
                path.display(),
                tensor.shape()
            ),
        });
    }
    let raw = tensor.into_matrix()?;
    let mut report = ImportReport::default();
    let mut data = Matrix::with_cols(DESCRIPTOR_DIM);
    let mut row = [0f32; DESCRIPTOR_DIM];
    for (i, src) in raw.iter_rows().enumerate() {
        let n = row_norm(src);
        if n == 0.0 || !n.is_finite() {
            report.dropped_rows.push(i);
            continue;
        }
        if (n - 1.0).abs() > 1e-3 {
            for (d, &s) in row.iter_mut().zip(src) {
                *d = (s as f64 / n) as f32;
            }
            report.renormalized_rows += 1;
            data.push_row(&row)?;
        } else {
            data.push_row(src)?;
        }
    }
    Ok((DescriptorSet { data }, report))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn blob_image(w: u32, h: u32, blobs: &[(f64, f64)], sigma: f64) -> RasterImage {
        RasterImage::from_fn(w, h, |x, y| {
            let v: f64 = blobs
                .iter()
                .map(|&(cx, cy)| {
                    let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                    255.0 * (-d2 / (2.0 * sigma * sigma)).exp()
                })
                .sum();
            v.round().min(255.0) as u8
        })
        .unwrap()
    }

    /// Naive box sum straight from the pixels.
    fn naive_box(img: &RasterImage, x: usize, y: usize, w: usize, h: usize) -> i64 {
        let mut s = 0i64;
        for yy in y..y + h {
            for xx in x..x + w {
                s += img.get(xx as u32, yy as u32) as i64;
            }
        }
        s
    }

    /// Hessian determinant evaluated without the integral image.
    pub(crate) fn naive_response(img: &RasterImage, x: usize, y: usize, size: usize) -> f64 {
        let lobe = size / 3;
        let half = (size - 1) / 2;
        let band = 2 * lobe - 1;
        let dxx = naive_box(img, x - half, y + 1 - lobe, size, band)
            - 3 * naive_box(img, x - lobe / 2, y + 1 - lobe, lobe, band);
        let dyy = naive_box(img, x + 1 - lobe, y - half, band, size)
            - 3 * naive_box(img, x + 1 - lobe, y - lobe / 2, band, lobe);
        let dxy = naive_box(img, x + 1, y - lobe, lobe, lobe)
            + naive_box(img, x - lobe, y + 1, lobe, lobe)
            - naive_box(img, x - lobe, y - lobe, lobe, lobe)
            - naive_box(img, x + 1, y + 1, lobe, lobe);
        let norm = 1.0 / (255.0 * (size * size) as f64);
        let (dxx, dyy, dxy) = (dxx as f64 * norm, dyy as f64 * norm, dxy as f64 * norm);
        dxx * dyy - (0.9 * dxy).powi(2)
    }

    #[test]
    fn integral_of_constant_image() {
        let img = RasterImage::filled(2, 2, 255).unwrap();
        let ii = IntegralImage::new(&img);
        assert_eq!(ii.get(1, 1), 1.0);
        assert_eq!(ii.get(2, 1), 2.0);
        assert_eq!(ii.get(1, 2), 2.0);
        assert_eq!(ii.get(2, 2), 4.0);
        for i in 0..3 {
            assert_eq!(ii.raw(i, 0), 0);
            assert_eq!(ii.raw(0, i), 0);
        }
    }

    #[test]
    fn integral_of_zero_image_is_zero() {
        let ii = IntegralImage::new(&RasterImage::filled(5, 3, 0).unwrap());
        assert!(ii.sums.iter().all(|&v| v == 0));
    }

    #[test]
    fn rectangle_queries_match_naive_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = RasterImage::from_fn(16, 16, |_, _| rng.random()).unwrap();
        let ii = IntegralImage::new(&img);
        for _ in 0..100 {
            let (a, b) = (rng.random_range(0..=16), rng.random_range(0..=16));
            let (c, d) = (rng.random_range(0..=16), rng.random_range(0..=16));
            let (x0, x1) = (a.min(b), a.max(b));
            let (y0, y1) = (c.min(d), c.max(d));
            let naive = naive_box(&img, x0, y0, x1 - x0, y1 - y0) as u64;
            assert_eq!(ii.rect_sum_raw(x0, y0, x1, y1), naive);
        }
    }

    #[test]
    fn hessian_matches_naive_oracle() {
        let img = blob_image(64, 64, &[(30.0, 33.0)], 3.0);
        let ii = IntegralImage::new(&img);
        for &size in &FILTER_SIZES {
            let m = (size - 1) / 2;
            for (x, y) in [(m, m), (30, 33), (63 - m, 40)] {
                assert_eq!(hessian_response(&ii, x, y, size), naive_response(&img, x, y, size));
            }
        }
    }

    #[test]
    fn uniform_image_has_no_keypoints() {
        let ii = IntegralImage::new(&RasterImage::filled(64, 64, 128).unwrap());
        assert!(detect_keypoints(&ii, 0.002, 100).is_empty());
    }

    #[test]
    fn tiny_image_has_no_keypoints() {
        let img = blob_image(31, 31, &[(15.0, 15.0)], 2.0);
        assert!(detect_keypoints(&IntegralImage::new(&img), 0.002, 100).is_empty());
    }

    #[test]
    fn single_blob_gives_one_keypoint_at_center() {
        let img = blob_image(64, 64, &[(32.0, 32.0)], 3.0);
        let kps = detect_keypoints(&IntegralImage::new(&img), 0.002, 100);
        assert_eq!(kps.len(), 1, "{kps:?}");
        let kp = kps[0];
        assert!((kp.x - 32.0).abs() <= 2.0 && (kp.y - 32.0).abs() <= 2.0, "{kp:?}");
        assert!(kp.response >= 0.002 && kp.scale > 0.0);
    }

    #[test]
    fn two_blobs_are_response_sorted() {
        // the larger blob responds more strongly at its best scale
        let mut img = blob_image(128, 64, &[(32.0, 32.0)], 3.0);
        let faint = blob_image(128, 64, &[(96.0, 32.0)], 3.0);
        let px: Vec<u8> = img
            .pixels()
            .iter()
            .zip(faint.pixels())
            .map(|(&a, &b)| a.saturating_add(b / 2))
            .collect();
        img = RasterImage::new(128, 64, px).unwrap();
        let kps = detect_keypoints(&IntegralImage::new(&img), 0.002, 100);
        assert_eq!(kps.len(), 2, "{kps:?}");
        assert!(kps[0].response >= kps[1].response);
        assert!((kps[0].x - 32.0).abs() <= 2.0);
        assert!((kps[1].x - 96.0).abs() <= 2.0);
    }

    #[test]
    fn max_keypoints_truncates() {
        let img = blob_image(128, 64, &[(32.0, 32.0), (96.0, 32.0)], 3.0);
        let kps = detect_keypoints(&IntegralImage::new(&img), 0.002, 1);
        assert_eq!(kps.len(), 1);
    }

    #[test]
    fn descriptor_on_uniform_region_is_rejected() {
        let ii = IntegralImage::new(&RasterImage::filled(80, 80, 90).unwrap());
        let kp = Keypoint {
            x: 40.0,
            y: 40.0,
            scale: 2.0,
            response: 1.0,
        };
        assert!(describe(&ii, &kp).is_none());
    }

    #[test]
    fn descriptor_window_outside_image_is_rejected() {
        let img = blob_image(64, 64, &[(10.0, 10.0)], 3.0);
        let ii = IntegralImage::new(&img);
        let kp = Keypoint {
            x: 10.0,
            y: 10.0,
            scale: 2.0,
            response: 1.0,
        };
        assert!(describe(&ii, &kp).is_none());
    }

    #[test]
    fn vertical_edge_favours_dx() {
        let img = RasterImage::from_fn(80, 80, |x, _| if x < 40 { 20 } else { 200 }).unwrap();
        let ii = IntegralImage::new(&img);
        let kp = Keypoint {
            x: 40.0,
            y: 40.0,
            scale: 2.0,
            response: 1.0,
        };
        let d = describe(&ii, &kp).expect("edge has energy");
        let norm: f64 = d.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-5);

        // naive Haar oracle: which subregions see the edge at all
        let hs = haar_size(2.0);
        let h = hs / 2;
        let mut crosses = [false; 16];
        for j in 0..20 {
            for i in 0..20 {
                let px = sample_coord(40.0, i, 2.0).round() as usize;
                let py = sample_coord(40.0, j, 2.0).round() as usize;
                let right = naive_box(&img, px, py - h, h, hs);
                let left = naive_box(&img, px - h, py - h, h, hs);
                if right != left {
                    crosses[(j / 5) * 4 + i / 5] = true;
                }
            }
        }
        assert!(crosses.iter().any(|&c| c));
        for (sub, &c) in crosses.iter().enumerate() {
            let abs_dx = d[sub * 4 + 1];
            let abs_dy = d[sub * 4 + 3];
            if c {
                assert!(abs_dx > abs_dy, "subregion {sub}: {abs_dx} vs {abs_dy}");
            }
        }
    }

    #[test]
    fn extract_uniform_is_empty() {
        let img = RasterImage::filled(64, 64, 50).unwrap();
        assert!(extract(&img, &DetectionConfig::default()).is_empty());
    }

    #[test]
    fn extract_blob_gives_one_unit_descriptor() {
        let img = blob_image(64, 64, &[(32.0, 32.0)], 3.0);
        let set = extract(&img, &DetectionConfig::default());
        assert_eq!(set.len(), 1);
        let n = row_norm(set.matrix().row(0));
        assert!((n - 1.0).abs() < 1e-5);
        let again = extract(&img, &DetectionConfig::default());
        assert_eq!(
            set.matrix().as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            again.matrix().as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    fn unit_rows(n: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Matrix::with_cols(DESCRIPTOR_DIM);
        for _ in 0..n {
            let mut r: Vec<f32> = (0..DESCRIPTOR_DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
            let n = row_norm(&r) as f32;
            r.iter_mut().for_each(|v| *v /= n);
            m.push_row(&r).unwrap();
        }
        m
    }

    #[test]
    fn import_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.bvwt");
        let m = unit_rows(5, 1);
        store::write_matrix(&p, &m).unwrap();
        let (set, report) = import_descriptors(&p).unwrap();
        assert_eq!(set.matrix(), &m);
        assert_eq!(report, ImportReport::default());
    }

    #[test]
    fn import_wrong_width_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.bvwt");
        store::write_matrix(&p, &Matrix::zeros(5, 32)).unwrap();
        assert!(matches!(import_descriptors(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn import_drops_zero_rows_and_renormalizes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.bvwt");
        let good = unit_rows(4, 2);
        let mut m = Matrix::with_cols(DESCRIPTOR_DIM);
        m.push_row(good.row(0)).unwrap();
        m.push_row(&[0.0; DESCRIPTOR_DIM]).unwrap();
        let doubled: Vec<f32> = good.row(1).iter().map(|v| v * 2.0).collect();
        m.push_row(&doubled).unwrap();
        m.push_row(good.row(2)).unwrap();
        m.push_row(good.row(3)).unwrap();
        store::write_matrix(&p, &m).unwrap();
        let (set, report) = import_descriptors(&p).unwrap();
        assert_eq!(set.len(), 4);
        assert_eq!(report.dropped_rows, [1]);
        assert_eq!(report.renormalized_rows, 1);
        for row in set.matrix().iter_rows() {
            assert!((row_norm(row) - 1.0).abs() < 1e-5);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn detection_is_translation_covariant(dx in -8i32..8, dy in -8i32..8) {
            let base = blob_image(96, 96, &[(48.0, 48.0)], 3.0);
            let moved = blob_image(96, 96, &[(48.0 + dx as f64, 48.0 + dy as f64)], 3.0);
            let a = detect_keypoints(&IntegralImage::new(&base), 0.002, 10);
            let b = detect_keypoints(&IntegralImage::new(&moved), 0.002, 10);
            prop_assert_eq!(a.len(), 1);
            prop_assert_eq!(b.len(), 1);
            prop_assert!((b[0].x - a[0].x - dx as f32).abs() <= 1.0);
            prop_assert!((b[0].y - a[0].y - dy as f32).abs() <= 1.0);
        }

        #[test]
        fn extracted_rows_are_unit_and_finite(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let blobs: Vec<(f64, f64)> = (0..3)
                .map(|_| (rng.random_range(20.0..76.0), rng.random_range(20.0..76.0)))
                .collect();
            let img = blob_image(96, 96, &blobs, rng.random_range(2.0..4.0));
            let set = extract(&img, &DetectionConfig::default());
            for row in set.matrix().iter_rows() {
                prop_assert!(row.iter().all(|v| v.is_finite()));
                prop_assert!((row_norm(row) - 1.0).abs() < 1e-5);
            }
        }
    }
}
