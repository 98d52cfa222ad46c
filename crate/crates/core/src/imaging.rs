//! Grayscale preprocessing: luma conversion, histogram equalization and
//! bilinear resize. Decoding image files is left to the caller.

use crate::error::{Error, Result};

/// Default square side images are resized to.
pub const DEFAULT_IMAGE_SIZE: u32 = 512;

/// Row-major 8-bit grayscale image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RasterImage {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
}

impl RasterImage {
    pub fn new(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Dimension(format!(
                "image must be at least 1x1, got {width}x{height}"
            )));
        }
        if pixels.len() as u64 != width as u64 * height as u64 {
            return Err(Error::Dimension(format!(
                "{width}x{height} image needs {} pixels, got {}",
                width as u64 * height as u64,
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: u32, height: u32, value: u8) -> Result<Self> {
        Self::new(width, height, vec![value; width as usize * height as usize])
    }

    /// Build an image by evaluating `f(x, y)` at every pixel.
    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> u8) -> Result<Self> {
        let mut pixels = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Self::new(width, height, pixels)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.pixels[y as usize * self.width as usize + x as usize]
    }
}

/// One 8-bit color channel.
#[derive(Debug, Clone, Copy)]
pub struct ChannelPlane<'a> {
    pub width: u32,
    pub height: u32,
    pub data: &'a [u8],
}

/// BT.601 luma: `round(0.299 R + 0.587 G + 0.114 B)`.
pub fn to_grayscale(r: ChannelPlane<'_>, g: ChannelPlane<'_>, b: ChannelPlane<'_>) -> Result<RasterImage> {
    let (w, h) = (r.width, r.height);
    if (g.width, g.height) != (w, h) || (b.width, b.height) != (w, h) {
        return Err(Error::Dimension(format!(
            "channel planes differ: {}x{}, {}x{}, {}x{}",
            r.width, r.height, g.width, g.height, b.width, b.height
        )));
    }
    let n = w as usize * h as usize;
    if n == 0 {
        return Err(Error::Dimension("empty channel plane".into()));
    }
    if r.data.len() != n || g.data.len() != n || b.data.len() != n {
        return Err(Error::Dimension(format!(
            "{w}x{h} planes need {n} samples each"
        )));
    }
    let pixels = r
        .data
        .iter()
        .zip(g.data)
        .zip(b.data)
        .map(|((&r, &g), &b)| {
            let y = 0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64;
            y.round().clamp(0.0, 255.0) as u8
        })
        .collect();
    RasterImage::new(w, h, pixels)
}

/// Global histogram equalization. Constant images are returned unchanged.
pub fn histogram_equalize(img: &RasterImage) -> RasterImage {
    let mut hist = [0u64; 256];
    for &p in &img.pixels {
        hist[p as usize] += 1;
    }
    let mut cdf = [0u64; 256];
    let mut acc = 0;
    for (c, h) in cdf.iter_mut().zip(hist) {
        acc += h;
        *c = acc;
    }
    let n = img.pixels.len() as u64;
    let cdf_min = cdf.iter().copied().find(|&c| c > 0).unwrap_or(0);
    if n == cdf_min {
        return img.clone();
    }
    let denom = (n - cdf_min) as f64;
    let mut lut = [0u8; 256];
    for (v, out) in lut.iter_mut().enumerate() {
        let num = cdf[v].saturating_sub(cdf_min) as f64;
        *out = (num / denom * 255.0).round().clamp(0.0, 255.0) as u8;
    }
    RasterImage {
        width: img.width,
        height: img.height,
        pixels: img.pixels.iter().map(|&p| lut[p as usize]).collect(),
    }
}

/// Bilinear resize with pixel-center alignment
/// (`src = (dst + 0.5) * scale - 0.5`, clamped to the image).
pub fn resize_bilinear(img: &RasterImage, out_w: u32, out_h: u32) -> Result<RasterImage> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::Dimension(format!(
            "target size must be at least 1x1, got {out_w}x{out_h}"
        )));
    }
    let (w, h) = (img.width as usize, img.height as usize);
    let sx = w as f64 / out_w as f64;
    let sy = h as f64 / out_h as f64;

    // (low index, high index, weight of high) per output coordinate
    let taps = |dst: u32, scale: f64, len: usize| {
        let src = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(len - 1);
        (lo, hi, src - lo as f64)
    };
    let xs: Vec<_> = (0..out_w).map(|x| taps(x, sx, w)).collect();

    let mut pixels = Vec::with_capacity(out_w as usize * out_h as usize);
    for y in 0..out_h {
        let (y0, y1, fy) = taps(y, sy, h);
        let row0 = &img.pixels[y0 * w..(y0 + 1) * w];
        let row1 = &img.pixels[y1 * w..(y1 + 1) * w];
        for &(x0, x1, fx) in &xs {
            let top = row0[x0] as f64 * (1.0 - fx) + row0[x1] as f64 * fx;
            let bottom = row1[x0] as f64 * (1.0 - fx) + row1[x1] as f64 * fx;
            let v = top * (1.0 - fy) + bottom * fy;
            pixels.push((v + 0.5).floor().clamp(0.0, 255.0) as u8);
        }
    }
    RasterImage::new(out_w, out_h, pixels)
}

/// Equalize, then resize to `size × size`.
pub fn preprocess(img: &RasterImage, size: u32) -> Result<RasterImage> {
    resize_bilinear(&histogram_equalize(img), size, size)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn plane(w: u32, h: u32, data: &[u8]) -> ChannelPlane<'_> {
        ChannelPlane {
            width: w,
            height: h,
            data,
        }
    }

    #[test]
    fn gray_input_is_fixed_point() {
        let v = vec![40u8; 6];
        let img = to_grayscale(plane(3, 2, &v), plane(3, 2, &v), plane(3, 2, &v)).unwrap();
        assert!(img.pixels().iter().all(|&p| p == 40));
    }

    #[test]
    fn pure_red_luma() {
        let r = vec![255u8; 4];
        let z = vec![0u8; 4];
        let img = to_grayscale(plane(2, 2, &r), plane(2, 2, &z), plane(2, 2, &z)).unwrap();
        // 0.299 * 255 = 76.245
        assert!(img.pixels().iter().all(|&p| p == 76));
    }

    #[test]
    fn empty_or_mismatched_planes_rejected() {
        assert!(to_grayscale(plane(0, 0, &[]), plane(0, 0, &[]), plane(0, 0, &[])).is_err());
        let a = vec![1u8; 4];
        let b = vec![1u8; 6];
        assert!(to_grayscale(plane(2, 2, &a), plane(3, 2, &b), plane(2, 2, &a)).is_err());
    }

    #[test]
    fn equalize_constant_is_identity() {
        let img = RasterImage::filled(5, 4, 17).unwrap();
        assert_eq!(histogram_equalize(&img), img);
    }

    #[test]
    fn equalize_two_pixel_extremes() {
        let img = RasterImage::new(2, 1, vec![0, 255]).unwrap();
        assert_eq!(histogram_equalize(&img).pixels(), &[0, 255]);
    }

    #[test]
    fn equalize_half_and_half() {
        let img = RasterImage::from_fn(100, 100, |_, y| if y < 50 { 10 } else { 20 }).unwrap();
        let out = histogram_equalize(&img);
        let mut values: Vec<u8> = out.pixels().to_vec();
        values.sort_unstable();
        values.dedup();
        assert_eq!(values, [0, 255]);
    }

    #[test]
    fn resize_to_same_size_is_identity() {
        let img = RasterImage::from_fn(7, 5, |x, y| (x * 31 + y * 17) as u8).unwrap();
        assert_eq!(resize_bilinear(&img, 7, 5).unwrap(), img);
    }

    #[test]
    fn resize_constant_stays_constant() {
        let img = RasterImage::filled(9, 4, 99).unwrap();
        for (w, h) in [(1, 1), (3, 17), (64, 64)] {
            let out = resize_bilinear(&img, w, h).unwrap();
            assert!(out.pixels().iter().all(|&p| p == 99));
        }
    }

    #[test]
    fn resize_upsample_two_by_two() {
        let img = RasterImage::new(2, 2, vec![0, 255, 0, 255]).unwrap();
        let out = resize_bilinear(&img, 4, 4).unwrap();
        // src x = (dst + 0.5) / 2 - 0.5 = -0.25, 0.25, 0.75, 1.25 -> clamped 0, .25, .75, 1
        let expected_row = [0u8, 64, 191, 255];
        for y in 0..4 {
            let row: Vec<u8> = (0..4).map(|x| out.get(x, y)).collect();
            assert_eq!(row, expected_row);
        }
    }

    #[test]
    fn resize_rejects_zero_target() {
        let img = RasterImage::filled(2, 2, 1).unwrap();
        assert!(resize_bilinear(&img, 0, 4).is_err());
    }

    fn arb_image() -> impl Strategy<Value = RasterImage> {
        (1u32..24, 1u32..24).prop_flat_map(|(w, h)| {
            proptest::collection::vec(any::<u8>(), (w * h) as usize)
                .prop_map(move |px| RasterImage::new(w, h, px).unwrap())
        })
    }

    proptest! {
        #[test]
        fn equalize_is_monotone_and_spans_range(img in arb_image()) {
            let out = histogram_equalize(&img);
            let mut pairs: Vec<(u8, u8)> = img.pixels().iter().copied().zip(out.pixels().iter().copied()).collect();
            pairs.sort_unstable();
            for w in pairs.windows(2) {
                prop_assert!(w[0].1 <= w[1].1);
            }
            let lo = *img.pixels().iter().min().unwrap();
            let hi = *img.pixels().iter().max().unwrap();
            if lo != hi {
                prop_assert_eq!(*out.pixels().iter().min().unwrap(), 0);
                prop_assert_eq!(*out.pixels().iter().max().unwrap(), 255);
            }
        }

        #[test]
        fn resize_stays_within_input_range(img in arb_image(), w in 1u32..40, h in 1u32..40) {
            let out = resize_bilinear(&img, w, h).unwrap();
            let lo = *img.pixels().iter().min().unwrap();
            let hi = *img.pixels().iter().max().unwrap();
            prop_assert!(out.pixels().iter().all(|&p| p >= lo && p <= hi));
        }
    }
}
