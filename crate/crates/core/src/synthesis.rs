//! Progressive chains: intermediate images generated by random homographies.
//!
//! Homographies are drawn with the four-point prior: each frame corner is
//! displaced by an independent uniform offset and the homography taking the
//! corners to their displaced positions is solved by DLT. Draws are
//! rejection-sampled against the non-overlap rate of the crop frame.

use nalgebra::Point2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::MeshGrid;
use crate::homography::{dlt_solve, Correspondences, Homography};
use crate::imaging::{crop, non_overlap_rate, warp_masked, Image, ValidityMask};

/// Rejections allowed before a sampler gives up.
pub const MAX_REJECTIONS: usize = 1000;

/// Frobenius distance from identity every sampled hop must exceed.
pub const MIN_IDENTITY_DISTANCE: f64 = 1e-3;

const STREAM_TARGET: u64 = 1 << 40;
const STREAM_CROP: u64 = (1 << 40) + 1;

/// Prior for the source→target homography of synthetic pairs: a common
/// translation of all four corners plus independent per-corner jitter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TargetPrior {
    /// Exclusive lower bound on the non-overlap rate.
    pub min_rate: f64,
    /// Inclusive upper bound on the non-overlap rate.
    pub max_rate: f64,
    /// Largest common translation as a fraction of the crop dimensions.
    pub max_translation: f64,
    /// Largest per-corner jitter in pixels.
    pub max_jitter: f64,
}

impl Default for TargetPrior {
    fn default() -> Self {
        Self {
            min_rate: 0.2,
            max_rate: 0.5,
            max_translation: 0.45,
            max_jitter: 20.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChainConfig {
    /// Number of inserted intermediate images.
    pub n: usize,
    pub crop_width: usize,
    pub crop_height: usize,
    pub resize_width: usize,
    pub resize_height: usize,
    /// Largest non-overlap rate allowed for an intermediate hop.
    pub max_rate: f64,
    /// Smallest allowed largest-corner displacement (pixels).
    pub min_perturbation: f64,
    /// Per-axis bound of the corner displacements (pixels).
    pub max_perturbation: f64,
    pub target: TargetPrior,
    pub seed: u64,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            n: 2,
            crop_width: 480,
            crop_height: 320,
            resize_width: 256,
            resize_height: 256,
            max_rate: 0.2,
            min_perturbation: 4.0,
            max_perturbation: 32.0,
            target: TargetPrior::default(),
            seed: 0x5EED,
        }
    }
}

impl ChainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.max_rate > 0.0 && self.max_rate < 1.0) {
            return bad(format!("max_rate {} outside (0, 1)", self.max_rate));
        }
        if !(self.min_perturbation > 0.0) {
            return bad("min_perturbation must be positive".into());
        }
        if !(self.max_perturbation > 0.0) {
            return bad("max_perturbation must be positive".into());
        }
        if self.crop_width < 8 || self.crop_height < 8 {
            return bad("crop must be at least 8x8".into());
        }
        if self.resize_width < 2 || self.resize_height < 2 {
            return bad("resize dims must be at least 2".into());
        }
        let t = &self.target;
        if !(t.min_rate >= self.max_rate && t.max_rate > t.min_rate && t.max_rate < 1.0) {
            return bad(format!(
                "target rate range ({}, {}] must lie above the hop bound {}",
                t.min_rate, t.max_rate, self.max_rate
            ));
        }
        Ok(())
    }

    pub fn grid(&self) -> MeshGrid {
        MeshGrid::new(self.crop_width, self.crop_height).expect("validated crop size")
    }
}

/// Counter-based generator: independent stream `stream` of `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Seed of the `index`-th item of a batch (splitmix64 finalizer).
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn corner_homography(grid: MeshGrid, offsets: &[(f64, f64); 4]) -> Result<Homography> {
    let pairs: Vec<[f64; 4]> = grid
        .corners()
        .iter()
        .zip(offsets)
        .map(|(c, (dx, dy))| [c.x, c.y, c.x + dx, c.y + dy])
        .collect();
    dlt_solve(&Correspondences::from_tuples(&pairs)?)
}

/// Draw `draw` of the intermediate-hop prior: deterministic in `(seed, draw)`.
pub fn sample_homography(cfg: &ChainConfig, seed: u64, draw: u64) -> Result<Homography> {
    cfg.validate()?;
    let grid = cfg.grid();
    let mut rng = stream_rng(seed, draw);
    let m = cfg.max_perturbation;
    for _ in 0..MAX_REJECTIONS {
        let mut offsets = [(0.0, 0.0); 4];
        for o in &mut offsets {
            *o = (rng.random_range(-m..=m), rng.random_range(-m..=m));
        }
        let largest = offsets
            .iter()
            .map(|(dx, dy)| dx.hypot(*dy))
            .fold(0.0, f64::max);
        if largest < cfg.min_perturbation {
            continue;
        }
        let Ok(h) = corner_homography(grid, &offsets) else {
            continue;
        };
        if h.distance_from_identity() < MIN_IDENTITY_DISTANCE {
            continue;
        }
        match non_overlap_rate(&h, cfg.crop_width, cfg.crop_height) {
            Ok(r) if r <= cfg.max_rate => return Ok(h),
            _ => continue,
        }
    }
    Err(Error::SamplingExhausted(MAX_REJECTIONS))
}

/// Source→target homography of a synthetic pair and its non-overlap rate.
pub fn sample_target_homography(cfg: &ChainConfig, seed: u64) -> Result<(Homography, f64)> {
    cfg.validate()?;
    let grid = cfg.grid();
    let t = &cfg.target;
    let mut rng = stream_rng(seed, STREAM_TARGET);
    let tx_max = t.max_translation * cfg.crop_width as f64;
    let ty_max = t.max_translation * cfg.crop_height as f64;
    let j = t.max_jitter;
    for _ in 0..MAX_REJECTIONS {
        let tx = rng.random_range(-tx_max..=tx_max);
        let ty = rng.random_range(-ty_max..=ty_max);
        let mut offsets = [(0.0, 0.0); 4];
        for o in &mut offsets {
            let jx = if j > 0.0 { rng.random_range(-j..=j) } else { 0.0 };
            let jy = if j > 0.0 { rng.random_range(-j..=j) } else { 0.0 };
            *o = (tx + jx, ty + jy);
        }
        let Ok(h) = corner_homography(grid, &offsets) else {
            continue;
        };
        match non_overlap_rate(&h, cfg.crop_width, cfg.crop_height) {
            Ok(r) if r > t.min_rate && r <= t.max_rate => return Ok((h, r)),
            _ => continue,
        }
    }
    Err(Error::SamplingExhausted(MAX_REJECTIONS))
}

/// Source, intermediates and target with their ground truth.
#[derive(Debug, Clone)]
pub struct ProgressiveChain {
    /// `I_s0 = I_s`, then the `n` generated intermediates.
    pub images: Vec<Image>,
    /// Validity of each entry of `images` (the source is fully valid).
    pub masks: Vec<ValidityMask>,
    pub target: Image,
    /// Validity of the target; `None` for a real target.
    pub target_mask: Option<ValidityMask>,
    /// `hops[i]` maps `I_si` to `I_s(i+1)`.
    pub hops: Vec<Homography>,
    /// Ground-truth source→target homography in synthetic-target mode.
    pub h_st: Option<Homography>,
    /// Top-left corner of the crop in the source image.
    pub crop_origin: (usize, usize),
}

impl ProgressiveChain {
    pub fn n(&self) -> usize {
        self.hops.len()
    }

    pub fn source(&self) -> &Image {
        &self.images[0]
    }

    /// Last intermediate `I_sn` (the source itself when `n = 0`).
    pub fn last(&self) -> &Image {
        self.images.last().expect("chain has a source")
    }

    /// `hops[i] ∘ … ∘ hops[0]` for every `i`.
    pub fn cumulative_hops(&self) -> Result<Vec<Homography>> {
        let mut acc = Homography::identity();
        self.hops
            .iter()
            .map(|h| {
                acc = h.compose(&acc)?;
                Ok(acc)
            })
            .collect()
    }

    /// Ground-truth bridge `I_s(i+1) -> I_t` for every hop, when `h_st` is known.
    pub fn bridge_truths(&self) -> Result<Option<Vec<Homography>>> {
        let Some(h_st) = self.h_st else {
            return Ok(None);
        };
        let cum = self.cumulative_hops()?;
        cum.iter()
            .map(|c| h_st.compose(&c.inverse()?))
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }
}

/// Crops the source (and target) near the centre and generates the chain.
///
/// Without a target, a synthetic one is produced by warping the crop with a
/// sampled large-baseline homography that is recorded as ground truth.
pub fn build_chain(
    source: &Image,
    target: Option<&Image>,
    cfg: &ChainConfig,
    seed: u64,
) -> Result<ProgressiveChain> {
    cfg.validate()?;
    let (cw, ch) = (cfg.crop_width, cfg.crop_height);
    if source.width() < cw || source.height() < ch {
        return Err(Error::TooSmall(format!(
            "source {}x{} is smaller than the {cw}x{ch} crop",
            source.width(),
            source.height()
        )));
    }
    if let Some(t) = target {
        if t.width() != source.width() || t.height() != source.height() {
            return Err(Error::ShapeMismatch("source and target sizes differ".into()));
        }
    }

    let mut rng = stream_rng(seed, STREAM_CROP);
    let jitter = |rng: &mut ChaCha8Rng, full: usize, c: usize| -> usize {
        let centre = (full - c) as f64 / 2.0;
        let j = 0.1 * full as f64;
        let off = if j > 0.0 { rng.random_range(-j..=j) } else { 0.0 };
        (centre + off).round().clamp(0.0, (full - c) as f64) as usize
    };
    let x0 = jitter(&mut rng, source.width(), cw);
    let y0 = jitter(&mut rng, source.height(), ch);

    let src = crop(source, x0, y0, cw, ch)?;
    let mut images = vec![src.clone()];
    let mut masks = vec![ValidityMask::all_valid(cw, ch)];
    let mut hops = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let h = sample_homography(cfg, seed, i as u64)?;
        let (img, mask) = warp_masked(images.last().unwrap(), masks.last(), &h)?;
        images.push(img);
        masks.push(mask);
        hops.push(h);
    }

    let (target, target_mask, h_st) = match target {
        Some(t) => (crop(t, x0, y0, cw, ch)?, None, None),
        None => {
            let (h, _) = sample_target_homography(cfg, seed)?;
            let (img, mask) = warp_masked(&src, None, &h)?;
            (img, Some(mask), Some(h))
        }
    };

    Ok(ProgressiveChain {
        images,
        masks,
        target,
        target_mask,
        hops,
        h_st,
        crop_origin: (x0, y0),
    })
}

/// Smooth value-noise lattice, `cells` apart, bilinearly blended with a
/// smoothstep weight.
fn value_noise(rng: &mut ChaCha8Rng, w: usize, h: usize, cells: f64) -> Vec<f64> {
    let gw = (w as f64 / cells).ceil() as usize + 2;
    let gh = (h as f64 / cells).ceil() as usize + 2;
    let lattice: Vec<f64> = (0..gw * gh).map(|_| rng.random::<f64>()).collect();
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        let fy = y as f64 / cells;
        let iy = fy.floor() as usize;
        let ty = smooth(fy - iy as f64);
        for x in 0..w {
            let fx = x as f64 / cells;
            let ix = fx.floor() as usize;
            let tx = smooth(fx - ix as f64);
            let l = |xx: usize, yy: usize| lattice[yy * gw + xx];
            let top = l(ix, iy) * (1.0 - tx) + l(ix + 1, iy) * tx;
            let bot = l(ix, iy + 1) * (1.0 - tx) + l(ix + 1, iy + 1) * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    out
}

/// Deterministic RGB texture: multi-octave value noise overlaid with random
/// flat-coloured discs, giving structure at every scale from a few pixels to
/// a quarter of the frame.
pub fn procedural_texture(width: usize, height: usize, seed: u64) -> Result<Image> {
    let mut rng = stream_rng(seed, 0);
    let octaves = [(96.0, 0.35), (40.0, 0.25), (16.0, 0.2), (7.0, 0.12), (3.0, 0.08)];
    let mut planes = vec![vec![0.0; width * height]; 3];
    for plane in &mut planes {
        for &(cells, amp) in &octaves {
            let noise = value_noise(&mut rng, width, height, cells);
            for (p, n) in plane.iter_mut().zip(noise) {
                *p += amp * n;
            }
        }
    }
    let discs = (width * height) / 4000;
    for _ in 0..discs {
        let cx = rng.random_range(0.0..width as f64);
        let cy = rng.random_range(0.0..height as f64);
        let r = rng.random_range(3.0..(width.min(height) as f64 / 10.0).max(4.0));
        let colour: [f64; 3] = [rng.random(), rng.random(), rng.random()];
        let x_lo = (cx - r).floor().max(0.0) as usize;
        let x_hi = ((cx + r).ceil() as usize).min(width - 1);
        let y_lo = (cy - r).floor().max(0.0) as usize;
        let y_hi = ((cy + r).ceil() as usize).min(height - 1);
        for y in y_lo..=y_hi {
            for x in x_lo..=x_hi {
                let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                if d <= r {
                    for (c, plane) in planes.iter_mut().enumerate() {
                        plane[y * width + x] = 0.5 * plane[y * width + x] + 0.5 * colour[c];
                    }
                }
            }
        }
    }
    Image::from_rgb_fn(width, height, |x, y| {
        let i = y * width + x;
        [planes[0][i], planes[1][i], planes[2][i]]
    })
}

/// Uniform `cols x rows` lattice of points inset from the frame border.
pub fn uniform_points(width: usize, height: usize, cols: usize, rows: usize) -> Vec<Point2<f64>> {
    let mut pts = Vec::with_capacity(cols * rows);
    for r in 0..rows {
        for c in 0..cols {
            let x = (c as f64 + 0.5) * (width - 1) as f64 / cols as f64;
            let y = (r as f64 + 0.5) * (height - 1) as f64 / rows as f64;
            pts.push(Point2::new(x, y));
        }
    }
    pts
}

/// Labelled points for a synthetic pair: lattice points of the source whose
/// ground-truth image stays inside the target frame.
pub fn labelled_points(h: &Homography, width: usize, height: usize) -> Result<Correspondences> {
    let mut pairs = Vec::new();
    for p in uniform_points(width, height, 8, 6) {
        let q = h.apply_point(p)?;
        if q.x >= 0.0 && q.x <= (width - 1) as f64 && q.y >= 0.0 && q.y <= (height - 1) as f64 {
            pairs.push(crate::homography::Correspondence { src: p, dst: q });
        }
    }
    Correspondences::new(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::warp;

    fn small_cfg() -> ChainConfig {
        ChainConfig {
            crop_width: 120,
            crop_height: 80,
            max_perturbation: 8.0,
            min_perturbation: 1.0,
            target: TargetPrior {
                max_jitter: 5.0,
                ..TargetPrior::default()
            },
            ..ChainConfig::default()
        }
    }

    #[test]
    fn sampling_is_deterministic_per_draw() {
        let cfg = ChainConfig::default();
        let a = sample_homography(&cfg, 7, 3).unwrap();
        let b = sample_homography(&cfg, 7, 3).unwrap();
        assert_eq!(a, b);
        let c = sample_homography(&cfg, 7, 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn infeasible_config_exhausts() {
        let cfg = ChainConfig {
            // no offset can reach the required magnitude
            min_perturbation: 50.0,
            max_perturbation: 10.0,
            ..small_cfg()
        };
        assert!(matches!(
            sample_homography(&cfg, 1, 0),
            Err(Error::SamplingExhausted(1000))
        ));
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = ChainConfig::default();
        cfg.max_rate = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = ChainConfig::default();
        cfg.min_perturbation = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn zero_hops_with_real_target() {
        let src = procedural_texture(140, 100, 1).unwrap();
        let tgt = procedural_texture(140, 100, 2).unwrap();
        let cfg = ChainConfig { n: 0, ..small_cfg() };
        let chain = build_chain(&src, Some(&tgt), &cfg, 5).unwrap();
        assert_eq!(chain.images.len(), 1);
        assert!(chain.hops.is_empty());
        assert!(chain.h_st.is_none());
        assert_eq!(chain.target.width(), 120);
    }

    #[test]
    fn synthetic_chain_structure() {
        let src = procedural_texture(140, 100, 3).unwrap();
        let cfg = small_cfg();
        let chain = build_chain(&src, None, &cfg, 11).unwrap();
        assert_eq!(chain.images.len() + 1, 4);
        assert_eq!(chain.hops.len(), 2);
        let h_st = chain.h_st.unwrap();
        let product = chain.hops[1].compose(&chain.hops[0]).unwrap();
        assert!(product.max_abs_diff(&h_st) > 1e-3);
        // the recorded ground truth regenerates the first intermediate exactly
        let (w1, m1) = warp(&chain.images[0], &chain.hops[0]).unwrap();
        assert_eq!(m1, chain.masks[1]);
        for (i, ok) in m1.data().iter().enumerate() {
            if *ok {
                assert_eq!(w1.data()[i * 3], chain.images[1].data()[i * 3]);
            }
        }
        let r_st = non_overlap_rate(&h_st, 120, 80).unwrap();
        for h in &chain.hops {
            assert!(non_overlap_rate(h, 120, 80).unwrap() < r_st);
        }
    }

    #[test]
    fn too_small_source() {
        let src = procedural_texture(60, 60, 3).unwrap();
        assert!(matches!(
            build_chain(&src, None, &small_cfg(), 0),
            Err(Error::TooSmall(_))
        ));
    }

    #[test]
    fn derived_seeds_differ() {
        let s: std::collections::HashSet<u64> = (0..1000).map(|i| derive_seed(42, i)).collect();
        assert_eq!(s.len(), 1000);
    }
}
