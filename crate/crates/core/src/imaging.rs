//! Raster images, validity masks and the resampling primitives built on them.
//!
//! Samples are `f64` in `[0, 1]`, interleaved by channel. The source frame of
//! a `w x h` image is the rectangle `[0, w-1] x [0, h-1]` spanned by the pixel
//! centres; a warped pixel is valid exactly when its preimage lies in that
//! rectangle, so every bilinear neighbour with nonzero weight is in bounds.

use std::path::Path;

use nalgebra::Matrix3;

use crate::error::{Error, Result};
use crate::homography::{invert, map_raw, Homography, DENOM_EPS};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidityMask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl Image {
    /// Wraps interleaved samples; values are clamped into `[0, 1]`.
    pub fn new(width: usize, height: usize, channels: usize, mut data: Vec<f64>) -> Result<Self> {
        if width < 2 || height < 2 {
            return Err(Error::TooSmall(format!("image {width}x{height}")));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::ShapeMismatch(format!(
                "{channels} channels, expected 1 or 3"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::ShapeMismatch(format!(
                "{} samples for {width}x{height}x{channels}",
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Validation("image has non-finite samples".into()));
        }
        for v in &mut data {
            *v = v.clamp(0.0, 1.0);
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn constant(width: usize, height: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(width, height, channels, vec![value; width * height * channels])
    }

    /// Builds a single-channel image from `f(x, y)`.
    pub fn from_gray_fn(
        width: usize,
        height: usize,
        f: impl Fn(usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self::new(width, height, 1, data)
    }

    /// Builds a three-channel image from `f(x, y) -> [r, g, b]`.
    pub fn from_rgb_fn(
        width: usize,
        height: usize,
        f: impl Fn(usize, usize) -> [f64; 3],
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self::new(width, height, 3, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Multiplies every sample by `a` (clamped).
    pub fn scaled(&self, a: f64) -> Image {
        Image {
            data: self.data.iter().map(|v| (v * a).clamp(0.0, 1.0)).collect(),
            ..self.clone()
        }
    }

    /// Luma (Rec. 601 weights) for colour images, a copy otherwise.
    pub fn to_gray(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self
            .data
            .chunks_exact(3)
            .map(|p| (0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]).clamp(0.0, 1.0))
            .collect();
        Image {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Bilinear sample of channel `c` at `(x, y)` inside the pixel-centre frame.
    #[inline]
    fn bilinear(&self, x: f64, y: f64, c: usize) -> f64 {
        let (x0, fx, x1) = split(x, self.width);
        let (y0, fy, y1) = split(y, self.height);
        let s = |xx: usize, yy: usize| self.data[(yy * self.width + xx) * self.channels + c];
        let top = s(x0, y0) * (1.0 - fx) + s(x1, y0) * fx;
        let bot = s(x0, y1) * (1.0 - fx) + s(x1, y1) * fx;
        top * (1.0 - fy) + bot * fy
    }

    /// Decodes a PNG or binary PPM/PGM; 8-bit samples map to `v / 255`.
    pub fn load(path: &Path) -> Result<Image> {
        if !path.exists() {
            return Err(Error::MissingFile(path.display().to_string()));
        }
        let dynimg = image::open(path).map_err(|e| Error::Parse {
            context: path.display().to_string(),
            message: e.to_string(),
        })?;
        let (w, h) = (dynimg.width() as usize, dynimg.height() as usize);
        match dynimg.color().channel_count() {
            1 | 2 => {
                let g = dynimg.to_luma8();
                Image::new(w, h, 1, g.as_raw().iter().map(|&b| b as f64 / 255.0).collect())
            }
            _ => {
                let rgb = dynimg.to_rgb8();
                Image::new(w, h, 3, rgb.as_raw().iter().map(|&b| b as f64 / 255.0).collect())
            }
        }
    }

    /// 8-bit encoding used by [`Image::save_png`].
    pub fn to_bytes(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    /// Writes an 8-bit PNG through a temporary file renamed into place.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let color = if self.channels == 1 {
            image::ExtendedColorType::L8
        } else {
            image::ExtendedColorType::Rgb8
        };
        let name = path
            .file_name()
            .ok_or_else(|| Error::Io(format!("{} has no file name", path.display())))?;
        let tmp = path.with_file_name(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
        image::save_buffer_with_format(
            &tmp,
            &self.to_bytes(),
            self.width as u32,
            self.height as u32,
            color,
            image::ImageFormat::Png,
        )
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }
}

/// Splits a coordinate into the left neighbour, fraction and right neighbour.
/// A zero fraction reuses the left neighbour, so `x = n - 1` stays in bounds.
/// Coordinates within round-off of an integer are snapped to it.
#[inline]
fn split(x: f64, n: usize) -> (usize, f64, usize) {
    let r = x.round();
    let x = if (x - r).abs() < 1e-9 { r } else { x };
    let x0 = (x.floor().max(0.0) as usize).min(n - 1);
    let f = (x - x0 as f64).clamp(0.0, 1.0);
    let x1 = if f > 0.0 { (x0 + 1).min(n - 1) } else { x0 };
    (x0, f, x1)
}

impl ValidityMask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "{} mask entries for {width}x{height}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn all_valid(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![true; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count_valid(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn invalid_fraction(&self) -> f64 {
        (self.data.len() - self.count_valid()) as f64 / self.data.len() as f64
    }

    pub fn and(&self, other: &ValidityMask) -> Result<ValidityMask> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::ShapeMismatch("mask dimensions differ".into()));
        }
        Ok(ValidityMask {
            width: self.width,
            height: self.height,
            data: self.data.iter().zip(&other.data).map(|(a, b)| *a && *b).collect(),
        })
    }
}

/// Preimage of target pixel `(x, y)` under the inverse matrix, if it falls in
/// the `w x h` source frame. Shared by warping and overlap accounting so the
/// two agree bit for bit.
/// Slack on the frame test absorbing round-off of the inverse.
const FRAME_TOL: f64 = 1e-7;

#[inline]
fn preimage(inv: &Matrix3<f64>, x: f64, y: f64, w: usize, h: usize) -> Option<(f64, f64)> {
    let (px, py, pw) = map_raw(inv, x, y);
    if !(pw.abs() > DENOM_EPS) {
        return None;
    }
    let (qx, qy) = (px / pw, py / pw);
    let (xmax, ymax) = ((w - 1) as f64, (h - 1) as f64);
    if qx >= -FRAME_TOL && qx <= xmax + FRAME_TOL && qy >= -FRAME_TOL && qy <= ymax + FRAME_TOL {
        Some((qx.clamp(0.0, xmax), qy.clamp(0.0, ymax)))
    } else {
        None
    }
}

/// Inverse warp with bilinear interpolation; invalid pixels are set to 0.
pub fn warp(img: &Image, h: &Homography) -> Result<(Image, ValidityMask)> {
    warp_masked(img, None, h)
}

/// Like [`warp`], additionally invalidating pixels whose interpolation
/// footprint touches an invalid pixel of `mask`.
pub fn warp_masked(
    img: &Image,
    mask: Option<&ValidityMask>,
    h: &Homography,
) -> Result<(Image, ValidityMask)> {
    if let Some(m) = mask {
        if m.width != img.width || m.height != img.height {
            return Err(Error::ShapeMismatch("mask does not match image".into()));
        }
    }
    let inv = *invert(h)?.matrix();
    let (w, hgt, ch) = (img.width, img.height, img.channels);
    let mut data = vec![0.0; w * hgt * ch];
    let mut valid = vec![false; w * hgt];
    for y in 0..hgt {
        for x in 0..w {
            let Some((qx, qy)) = preimage(&inv, x as f64, y as f64, w, hgt) else {
                continue;
            };
            if let Some(m) = mask {
                let (x0, _, x1) = split(qx, w);
                let (y0, _, y1) = split(qy, hgt);
                if !(m.get(x0, y0) && m.get(x1, y0) && m.get(x0, y1) && m.get(x1, y1)) {
                    continue;
                }
            }
            let i = y * w + x;
            valid[i] = true;
            for c in 0..ch {
                data[i * ch + c] = img.bilinear(qx, qy, c);
            }
        }
    }
    Ok((
        Image {
            width: w,
            height: hgt,
            channels: ch,
            data,
        },
        ValidityMask {
            width: w,
            height: hgt,
            data: valid,
        },
    ))
}

/// Fraction of pixels of a `w x height` target grid whose preimage under `h`
/// lies outside the source frame; equals the masked fraction of [`warp`].
pub fn non_overlap_rate(h: &Homography, w: usize, height: usize) -> Result<f64> {
    if w < 2 || height < 2 {
        return Err(Error::TooSmall(format!("frame {w}x{height}")));
    }
    let inv = *invert(h)?.matrix();
    let mut outside = 0usize;
    for y in 0..height {
        for x in 0..w {
            if preimage(&inv, x as f64, y as f64, w, height).is_none() {
                outside += 1;
            }
        }
    }
    Ok(outside as f64 / (w * height) as f64)
}

/// Reflect-101 index into `[0, n)`.
#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let mut i = i;
    while i < 0 || i >= n {
        i = if i < 0 { -i } else { 2 * (n - 1) - i };
    }
    i as usize
}

/// Separable 3x3 binomial smoothing with reflect-101 borders.
pub fn smooth_binomial(img: &Image) -> Image {
    let (w, h, ch) = (img.width, img.height, img.channels);
    let mut tmp = vec![0.0; img.data.len()];
    for y in 0..h {
        for x in 0..w {
            let l = reflect(x as isize - 1, w);
            let r = reflect(x as isize + 1, w);
            for c in 0..ch {
                tmp[(y * w + x) * ch + c] = 0.25 * img.data[(y * w + l) * ch + c]
                    + 0.5 * img.data[(y * w + x) * ch + c]
                    + 0.25 * img.data[(y * w + r) * ch + c];
            }
        }
    }
    let mut out = vec![0.0; img.data.len()];
    for y in 0..h {
        let t = reflect(y as isize - 1, h);
        let b = reflect(y as isize + 1, h);
        for x in 0..w {
            for c in 0..ch {
                out[(y * w + x) * ch + c] = 0.25 * tmp[(t * w + x) * ch + c]
                    + 0.5 * tmp[(y * w + x) * ch + c]
                    + 0.25 * tmp[(b * w + x) * ch + c];
            }
        }
    }
    Image {
        data: out,
        ..img.clone()
    }
}

/// Separable box filter of width `2 radius + 1` with reflect-101 borders.
/// `radius = 0` returns a copy.
pub fn box_blur(img: &Image, radius: usize) -> Image {
    if radius == 0 {
        return img.clone();
    }
    let (w, h, ch) = (img.width, img.height, img.channels);
    let r = radius as isize;
    let norm = 1.0 / (2 * radius + 1) as f64;
    let pass = |src: &[f64], len: usize, lines: usize, idx: &dyn Fn(usize, usize) -> usize| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for line in 0..lines {
            for c in 0..ch {
                let mut acc: f64 = (-r..=r).map(|k| src[idx(line, reflect(k, len)) * ch + c]).sum();
                for i in 0..len {
                    out[idx(line, i) * ch + c] = acc * norm;
                    let add = reflect(i as isize + r + 1, len);
                    let sub = reflect(i as isize - r, len);
                    acc += src[idx(line, add) * ch + c] - src[idx(line, sub) * ch + c];
                }
            }
        }
        out
    };
    let tmp = pass(&img.data, w, h, &|y, x| y * w + x);
    let out = pass(&tmp, h, w, &|x, y| y * w + x);
    Image {
        data: out,
        ..img.clone()
    }
}

/// 2x2 mean pooling to `ceil(w/2) x ceil(h/2)`; edge cells average only the
/// pixels that exist.
fn pool2(img: &Image) -> Image {
    let (w, h, ch) = (img.width, img.height, img.channels);
    let (nw, nh) = (w.div_ceil(2), h.div_ceil(2));
    let mut data = vec![0.0; nw * nh * ch];
    for y in 0..nh {
        for x in 0..nw {
            for c in 0..ch {
                let mut sum = 0.0;
                let mut n = 0.0;
                for yy in 2 * y..(2 * y + 2).min(h) {
                    for xx in 2 * x..(2 * x + 2).min(w) {
                        sum += img.data[(yy * w + xx) * ch + c];
                        n += 1.0;
                    }
                }
                data[(y * nw + x) * ch + c] = sum / n;
            }
        }
    }
    Image {
        width: nw,
        height: nh,
        channels: ch,
        data,
    }
}

/// Smooth-and-pool pyramid; level 0 is the input.
pub fn pyramid(img: &Image, levels: usize) -> Result<Vec<Image>> {
    if levels == 0 {
        return Err(Error::InvalidConfig("pyramid needs at least one level".into()));
    }
    let mut out = vec![img.clone()];
    for _ in 1..levels {
        let prev = out.last().unwrap();
        let next = pool2(&smooth_binomial(prev));
        out.push(next);
    }
    if let Some(small) = out.iter().find(|l| l.width < 8 || l.height < 8) {
        return Err(Error::TooSmall(format!(
            "pyramid level of {}x{} is below 8x8",
            small.width, small.height
        )));
    }
    Ok(out)
}

/// Resamples to `new_w x new_h` by the axis scaling `x' = x * new_w / w`.
///
/// Downscaling by more than 1.25x pre-smooths with the binomial kernel.
pub fn resize(img: &Image, new_w: usize, new_h: usize) -> Result<Image> {
    if new_w < 2 || new_h < 2 {
        return Err(Error::TooSmall(format!("resize target {new_w}x{new_h}")));
    }
    let fx = img.width as f64 / new_w as f64;
    let fy = img.height as f64 / new_h as f64;
    let smoothed;
    let src = if fx.max(fy) > 1.25 {
        smoothed = smooth_binomial(img);
        &smoothed
    } else {
        img
    };
    let ch = img.channels;
    let mut data = Vec::with_capacity(new_w * new_h * ch);
    for y in 0..new_h {
        let sy = (y as f64 * fy).min((img.height - 1) as f64);
        for x in 0..new_w {
            let sx = (x as f64 * fx).min((img.width - 1) as f64);
            for c in 0..ch {
                data.push(src.bilinear(sx, sy, c));
            }
        }
    }
    Image::new(new_w, new_h, ch, data)
}

/// Copies the `w x h` window whose top-left pixel is `(x0, y0)`.
pub fn crop(img: &Image, x0: usize, y0: usize, w: usize, h: usize) -> Result<Image> {
    if x0 + w > img.width || y0 + h > img.height {
        return Err(Error::TooSmall(format!(
            "crop {w}x{h}+{x0}+{y0} exceeds {}x{}",
            img.width, img.height
        )));
    }
    let ch = img.channels;
    let mut data = Vec::with_capacity(w * h * ch);
    for y in y0..y0 + h {
        let row = (y * img.width + x0) * ch;
        data.extend_from_slice(&img.data[row..row + w * ch]);
    }
    Image::new(w, h, ch, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient(w: usize, h: usize) -> Image {
        Image::from_gray_fn(w, h, |x, y| {
            0.1 + 0.8 * (x as f64 / (w - 1) as f64) * 0.6 + 0.8 * (y as f64 / (h - 1) as f64) * 0.4
        })
        .unwrap()
    }

    #[test]
    fn box_blur_matches_naive_sum() {
        let img = Image::from_gray_fn(9, 7, |x, y| ((x * 7 + y * 13) % 11) as f64 / 10.0).unwrap();
        let b = box_blur(&img, 2);
        for y in 0..7 {
            for x in 0..9 {
                let mut s = 0.0;
                for dy in -2..=2isize {
                    for dx in -2..=2isize {
                        s += img.get(reflect(x as isize + dx, 9), reflect(y as isize + dy, 7), 0);
                    }
                }
                assert!((b.get(x, y, 0) - s / 25.0).abs() < 1e-12);
            }
        }
        let c = Image::constant(5, 4, 3, 0.3).unwrap();
        assert!(box_blur(&c, 3).data().iter().all(|v| (v - 0.3).abs() < 1e-12));
    }

    #[test]
    fn identity_warp_is_exact_and_fully_valid() {
        let img = gradient(40, 30);
        let (out, mask) = warp(&img, &Homography::identity()).unwrap();
        assert_eq!(mask.count_valid(), 40 * 30);
        for (a, b) in out.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn integer_translation_shifts_content() {
        let img = Image::from_gray_fn(40, 20, |x, y| ((x * 7 + y * 3) % 11) as f64 / 10.0).unwrap();
        let (out, mask) = warp(&img, &Homography::translation(10.0, 0.0)).unwrap();
        for y in 0..20 {
            for x in 0..40 {
                if x < 10 {
                    assert!(!mask.get(x, y));
                    assert_eq!(out.get(x, y, 0), 0.0);
                } else {
                    assert!(mask.get(x, y));
                    assert!((out.get(x, y, 0) - img.get(x - 10, y, 0)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn overlap_rate_examples() {
        assert_eq!(non_overlap_rate(&Homography::identity(), 480, 320).unwrap(), 0.0);
        let r = non_overlap_rate(&Homography::translation(240.0, 0.0), 480, 320).unwrap();
        assert!((r - 0.5).abs() <= 1.0 / 480.0, "{r}");
    }

    #[test]
    fn overlap_rate_matches_warp_mask() {
        let img = gradient(64, 48);
        let h = Homography::from_row_slice(&[
            0.95, 0.05, 9.0, -0.04, 1.03, -5.0, 3e-4, -2e-4, 1.0,
        ])
        .unwrap();
        let (_, mask) = warp(&img, &h).unwrap();
        assert_eq!(non_overlap_rate(&h, 64, 48).unwrap(), mask.invalid_fraction());
    }

    #[test]
    fn masked_warp_propagates_invalid_pixels() {
        let img = gradient(32, 32);
        let (_, m1) = warp(&img, &Homography::translation(5.0, 0.0)).unwrap();
        let (_, m2) = warp_masked(&img, Some(&m1), &Homography::translation(3.0, 0.0)).unwrap();
        for y in 0..32 {
            for x in 0..32 {
                assert_eq!(m2.get(x, y), x >= 8, "({x},{y})");
            }
        }
    }

    #[test]
    fn pyramid_sizes_and_constants() {
        let img = Image::constant(256, 256, 1, 0.3).unwrap();
        let p = pyramid(&img, 4).unwrap();
        let sizes: Vec<_> = p.iter().map(|l| (l.width(), l.height())).collect();
        assert_eq!(sizes, vec![(256, 256), (128, 128), (64, 64), (32, 32)]);
        for l in &p {
            assert!(l.data().iter().all(|v| (v - 0.3).abs() < 1e-12));
        }
        assert!(matches!(pyramid(&img, 7), Err(Error::TooSmall(_))));
    }

    #[test]
    fn checkerboard_pools_to_half() {
        let img = Image::from_gray_fn(64, 64, |x, y| ((x + y) % 2) as f64).unwrap();
        let p = pyramid(&img, 2).unwrap();
        assert!(p[1].data().iter().all(|v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn odd_sizes_round_up() {
        let img = Image::constant(33, 17, 3, 0.7).unwrap();
        let p = pyramid(&img, 2).unwrap();
        assert_eq!((p[1].width(), p[1].height()), (17, 9));
    }

    #[test]
    fn resize_keeps_constants_and_dims() {
        let img = Image::constant(480, 320, 3, 0.25).unwrap();
        let r = resize(&img, 256, 256).unwrap();
        assert_eq!((r.width(), r.height(), r.channels()), (256, 256, 3));
        assert!(r.data().iter().all(|v| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::from_rgb_fn(9, 7, |x, y| {
            [x as f64 / 8.0, y as f64 / 6.0, ((x + y) % 2) as f64]
        })
        .unwrap();
        let path = dir.path().join("a.png");
        img.save_png(&path).unwrap();
        let back = Image::load(&path).unwrap();
        assert_eq!(back.channels(), 3);
        for (a, b) in back.data().iter().zip(img.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        assert!(matches!(
            Image::load(&dir.path().join("missing.png")),
            Err(Error::MissingFile(_))
        ));
    }

    #[test]
    fn ppm_is_readable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ppm");
        let mut bytes = b"P6\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 0, 0, 255, 0, 0, 0, 255, 51, 102, 153]);
        std::fs::write(&path, bytes).unwrap();
        let img = Image::load(&path).unwrap();
        assert_eq!((img.width(), img.height(), img.channels()), (2, 2, 3));
        assert!((img.get(1, 1, 0) - 0.2).abs() < 1e-12);
        assert!((img.get(1, 1, 2) - 0.6).abs() < 1e-12);
    }
}
