//! Coarse-to-fine correlation estimator, progressive chain estimation and
//! the direct identity-loss optimizer.

mod optimize;
mod progressive;

pub use optimize::{
    direct_optimize, estimate_chain, estimator_anchors, ChainAnchors, ChainEstimates, OptimizeResult, OptimizerConfig,
    TracePoint,
};
pub use progressive::{progressive_estimate, ProgressiveOptions, ProgressiveResult};

use nalgebra::Point2;
use serde::{Deserialize, Serialize};

use crate::correlation::{context_features, remove_profile_bias, global_correlation, grid_matches, local_correlation, FeatureMap, GridMatch};
use crate::error::{Error, Result};
use crate::homography::{dlt_solve_weighted, Correspondence, Correspondences, Homography};
use crate::imaging::{box_blur, resize, warp, Image, ValidityMask};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorConfig {
    /// Number of pyramid levels, coarsest first.
    pub levels: usize,
    /// Feature cell size (pixels of the resized image) of each level.
    pub cells: Vec<usize>,
    /// Local correlation radius in cells.
    pub radius: usize,
    /// Descriptor-distance ratio threshold.
    pub ratio: f64,
    pub irls_iterations: usize,
    /// Huber width in feature cells of the level.
    pub huber_width: f64,
    pub resize_width: usize,
    pub resize_height: usize,
    /// Box-blur radius, as a fraction of the level's cell size, applied
    /// twice before feature extraction.
    pub smoothing: f64,
    /// Side, in cells, of the neighbourhood stacked into each descriptor.
    pub context_span: usize,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            levels: 4,
            cells: vec![16, 8, 4, 2],
            radius: 4,
            ratio: 0.9,
            irls_iterations: 10,
            huber_width: 2.0,
            resize_width: 256,
            resize_height: 256,
            smoothing: 0.0,
            context_span: 5,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.levels < 2 {
            return bad(format!("levels = {} (at least 2)", self.levels));
        }
        if self.cells.len() != self.levels {
            return bad(format!("{} cell sizes for {} levels", self.cells.len(), self.levels));
        }
        if self.cells.iter().any(|c| *c == 0) {
            return bad("cell sizes must be positive".into());
        }
        if self.radius == 0 {
            return bad("radius must be at least 1".into());
        }
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return bad(format!("ratio {} outside (0, 1]", self.ratio));
        }
        if !(self.smoothing >= 0.0) || !self.smoothing.is_finite() {
            return bad("smoothing must be >= 0".into());
        }
        if self.context_span == 0 {
            return bad("context span must be at least 1".into());
        }
        if !(self.huber_width > 0.0) {
            return bad("huber width must be positive".into());
        }
        let coarse = self.cells[0];
        if self.resize_width < 2 * coarse || self.resize_height < 2 * coarse {
            return bad("resize dims must hold at least 2x2 coarse cells".into());
        }
        Ok(())
    }
}

/// Per-level record of one estimation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelDiagnostics {
    pub cell: usize,
    pub matches: usize,
    pub inliers: usize,
    pub inlier_ratio: f64,
    /// Whether this level's update was applied.
    pub updated: bool,
    /// Estimate after the level, at the original resolution (`h33 = 1` view
    /// when available).
    pub homography: Homography,
    /// Point matching error after the level, when ground truth is supplied.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pme: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub levels: Vec<LevelDiagnostics>,
}

#[derive(Debug, Clone)]
pub struct Estimate {
    pub homography: Homography,
    pub diagnostics: Diagnostics,
    /// Inlier matches of the finest updated level, at the original resolution.
    pub matches: Correspondences,
}

/// Result of a robust fit.
#[derive(Debug, Clone)]
pub struct RobustFit {
    pub homography: Homography,
    pub residuals: Vec<f64>,
    pub inliers: usize,
}

fn residuals(h: &Homography, pairs: &[(Point2<f64>, Point2<f64>)]) -> Vec<f64> {
    pairs
        .iter()
        .map(|(s, t)| match h.apply_point(*s) {
            Ok(q) => (q - t).norm(),
            Err(_) => f64::INFINITY,
        })
        .collect()
}

/// Huber-weighted IRLS DLT. Starts from `init` when given (weights from its
/// residuals), otherwise from the unweighted solution.
pub fn robust_dlt(
    pairs: &[(Point2<f64>, Point2<f64>)],
    init: Option<&Homography>,
    iterations: usize,
    width: f64,
) -> Result<RobustFit> {
    if pairs.len() < 4 {
        return Err(Error::NoMatches(pairs.len()));
    }
    let mut h = match init {
        Some(h) => *h,
        None => dlt_solve_weighted(pairs.iter().map(|(s, t)| (*s, *t, 1.0)))?,
    };
    let mut r = residuals(&h, pairs);
    for _ in 0..iterations {
        let w: Vec<f64> = r
            .iter()
            .map(|e| if *e <= width { 1.0 } else if e.is_finite() { width / e } else { 0.0 })
            .collect();
        let next = dlt_solve_weighted(pairs.iter().zip(&w).map(|((s, t), w)| (*s, *t, *w)))?;
        let r_next = residuals(&next, pairs);
        let converged = next.max_abs_diff(&h) < 1e-12;
        h = next;
        r = r_next;
        if converged {
            break;
        }
    }
    // Huber weights never reach zero, so far outliers still pull the
    // solution; finish with an unweighted fit on the inliers.
    let keep: Vec<bool> = r.iter().map(|e| *e <= width).collect();
    if keep.iter().filter(|k| **k).count() >= 4 {
        if let Ok(polished) = dlt_solve_weighted(
            pairs.iter().zip(&keep).map(|((s, t), k)| (*s, *t, if *k { 1.0 } else { 0.0 })),
        ) {
            h = polished;
            r = residuals(&h, pairs);
        }
    }
    let inliers = r.iter().filter(|e| **e <= width).count();
    Ok(RobustFit {
        homography: h,
        residuals: r,
        inliers,
    })
}

/// Translation supported by the most matches: displacements are binned by
/// `bin` pixels and the densest 3x3 block of bins is averaged.
pub fn translation_vote(pairs: &[(Point2<f64>, Point2<f64>)], bin: f64) -> Option<Homography> {
    use std::collections::BTreeMap;
    if pairs.is_empty() {
        return None;
    }
    let key = |s: &Point2<f64>, t: &Point2<f64>| {
        (((t.x - s.x) / bin).round() as i64, ((t.y - s.y) / bin).round() as i64)
    };
    let mut counts: BTreeMap<(i64, i64), usize> = BTreeMap::new();
    for (s, t) in pairs {
        *counts.entry(key(s, t)).or_default() += 1;
    }
    let support = |k: (i64, i64)| -> usize {
        let mut n = 0;
        for dy in -1..=1 {
            for dx in -1..=1 {
                n += counts.get(&(k.0 + dx, k.1 + dy)).copied().unwrap_or(0);
            }
        }
        n
    };
    let mut best = None;
    let mut best_support = 0;
    for k in counts.keys() {
        let n = support(*k);
        if n > best_support {
            best_support = n;
            best = Some(*k);
        }
    }
    let b = best?;
    let (mut sx, mut sy, mut m) = (0.0, 0.0, 0.0);
    for (s, t) in pairs {
        let k = key(s, t);
        if (k.0 - b.0).abs() <= 1 && (k.1 - b.1).abs() <= 1 {
            sx += t.x - s.x;
            sy += t.y - s.y;
            m += 1.0;
        }
    }
    Some(Homography::translation(sx / m, sy / m))
}

fn to_pixels(f: &FeatureMap, m: &GridMatch) -> (Point2<f64>, Point2<f64>) {
    (
        Point2::new(f.cell_centre(m.query.0 as f64), f.cell_centre(m.query.1 as f64)),
        Point2::new(f.cell_centre(m.target.0), f.cell_centre(m.target.1)),
    )
}

/// Whether every pixel of cell `(cx, cy)` is valid.
fn cell_valid(mask: &ValidityMask, cell: usize, cx: usize, cy: usize) -> bool {
    for y in cy * cell..((cy + 1) * cell).min(mask.height()) {
        for x in cx * cell..((cx + 1) * cell).min(mask.width()) {
            if !mask.get(x, y) {
                return false;
            }
        }
    }
    true
}

fn level_features(img: &Image, cell: usize, cfg: &EstimatorConfig) -> Result<FeatureMap> {
    let r = (cfg.smoothing * cell as f64).round() as usize;
    context_features(&box_blur(&box_blur(img, r), r), cell, cell, cfg.context_span)
}

/// Coarse-to-fine estimate of the homography mapping `src` onto `tgt`.
pub fn estimate(src: &Image, tgt: &Image, cfg: &EstimatorConfig) -> Result<Estimate> {
    estimate_with_truth(src, tgt, cfg, None)
}

/// [`estimate`], additionally recording per-level PME against `truth`.
pub fn estimate_with_truth(
    src: &Image,
    tgt: &Image,
    cfg: &EstimatorConfig,
    truth: Option<&Correspondences>,
) -> Result<Estimate> {
    cfg.validate()?;
    if src.width() != tgt.width() || src.height() != tgt.height() {
        return Err(Error::ShapeMismatch(format!(
            "source {}x{} and target {}x{}",
            src.width(),
            src.height(),
            tgt.width(),
            tgt.height()
        )));
    }
    if src.width() < 32 || src.height() < 32 {
        return Err(Error::TooSmall(format!("{}x{} pair (at least 32x32)", src.width(), src.height())));
    }
    let (rw, rh) = (cfg.resize_width, cfg.resize_height);
    let sx = rw as f64 / src.width() as f64;
    let sy = rh as f64 / src.height() as f64;
    let a = resize(&src.to_gray(), rw, rh)?;
    let b = resize(&tgt.to_gray(), rw, rh)?;
    let to_original = |h: &Homography| h.rescaled(1.0 / sx, 1.0 / sy);
    let level_pme = |h: &Homography| -> Option<f64> {
        truth.and_then(|t| crate::evaluation::pme(h, t).ok().map(|r| r.pme))
    };

    let mut levels = Vec::with_capacity(cfg.levels);

    // coarsest level: global correlation
    let cell = cfg.cells[0];
    let fa = level_features(&a, cell, cfg)?;
    let fb = level_features(&b, cell, cfg)?;
    let mut gm = grid_matches(&global_correlation(&fa, &fb)?, cfg.ratio, true)?;
    remove_profile_bias(&mut gm, &fb);
    let pairs: Vec<_> = gm.iter().map(|m| to_pixels(&fa, m)).collect();
    if pairs.len() < 4 {
        return Err(Error::NoMatches(pairs.len()));
    }
    let width = cfg.huber_width * cell as f64;
    let init = translation_vote(&pairs, cell as f64).ok_or(Error::NoMatches(0))?;
    let fit = robust_dlt(&pairs, Some(&init), cfg.irls_iterations, width)?;
    let mut h = fit.homography;
    let mut final_pairs: Vec<(Point2<f64>, Point2<f64>)> = pairs
        .iter()
        .zip(&fit.residuals)
        .filter(|(_, r)| **r <= width)
        .map(|(p, _)| *p)
        .collect();
    let mut final_h = h;
    levels.push(LevelDiagnostics {
        cell,
        matches: pairs.len(),
        inliers: fit.inliers,
        inlier_ratio: fit.inliers as f64 / pairs.len() as f64,
        updated: true,
        homography: to_original(&h)?,
        pme: level_pme(&to_original(&h)?),
    });

    // finer levels: local correlation around the current estimate
    for &cell in &cfg.cells[1..] {
        let width = cfg.huber_width * cell as f64;
        let step = (|| -> Result<Option<(RobustFit, Vec<(Point2<f64>, Point2<f64>)>)>> {
            let (aw, mask) = warp(&a, &h)?;
            let fa = level_features(&aw, cell, cfg)?;
            let fb = level_features(&b, cell, cfg)?;
            let mut lm = grid_matches(&local_correlation(&fa, &fb, cfg.radius)?, cfg.ratio, true)?;
            remove_profile_bias(&mut lm, &fb);
            let pairs: Vec<_> = lm
                .iter()
                .filter(|m| cell_valid(&mask, cell, m.query.0, m.query.1))
                .map(|m| to_pixels(&fa, m))
                .collect();
            if pairs.len() < 4 {
                return Ok(None);
            }
            let fit = robust_dlt(&pairs, Some(&Homography::identity()), cfg.irls_iterations, width)?;
            Ok(Some((fit, pairs)))
        })();
        match step {
            Ok(Some((fit, pairs))) => {
                // warped-frame queries back in source coordinates of the resized frame
                let prev_inv = h.inverse()?;
                h = fit.homography.compose(&h)?;
                final_pairs = pairs
                    .iter()
                    .zip(&fit.residuals)
                    .filter(|(_, r)| **r <= width)
                    .filter_map(|((q, t), _)| Some((prev_inv.apply_point(*q).ok()?, *t)))
                    .collect();
                final_h = h;
                levels.push(LevelDiagnostics {
                    cell,
                    matches: pairs.len(),
                    inliers: fit.inliers,
                    inlier_ratio: fit.inliers as f64 / pairs.len() as f64,
                    updated: true,
                    homography: to_original(&h)?,
                    pme: level_pme(&to_original(&h)?),
                });
            }
            Ok(None) | Err(Error::NoMatches(_)) | Err(Error::DegenerateConfiguration(_)) | Err(Error::Singular { .. }) | Err(Error::SingularResult { .. }) => {
                levels.push(LevelDiagnostics {
                    cell,
                    matches: 0,
                    inliers: 0,
                    inlier_ratio: 0.0,
                    updated: false,
                    homography: to_original(&h)?,
                    pme: level_pme(&to_original(&h)?),
                });
            }
            Err(e) => return Err(e),
        }
    }

    let homography = to_original(&final_h)?;
    let mut seen = std::collections::HashSet::new();
    let matches = final_pairs
        .iter()
        .map(|(s, t)| Correspondence {
            src: Point2::new(s.x / sx, s.y / sy),
            dst: Point2::new(t.x / sx, t.y / sy),
        })
        .filter(|c| c.src.x.is_finite() && c.src.y.is_finite() && seen.insert((c.src.x.to_bits(), c.src.y.to_bits())))
        .collect();
    Ok(Estimate {
        homography,
        diagnostics: Diagnostics { levels },
        matches: Correspondences::new(matches)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::pme;
    use crate::imaging::crop;
    use crate::synthesis::{procedural_texture, uniform_points};

    #[test]
    fn config_validation() {
        assert!(EstimatorConfig::default().validate().is_ok());
        let c = EstimatorConfig {
            levels: 1,
            cells: vec![16],
            ..EstimatorConfig::default()
        };
        assert!(c.validate().is_err());
        let c = EstimatorConfig {
            radius: 0,
            ..EstimatorConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn robust_fit_ignores_outliers() {
        let h = Homography::from_row_slice(&[1.01, 0.02, 5.0, -0.01, 0.99, -3.0, 1e-5, 2e-5, 1.0]).unwrap();
        let mut pairs: Vec<(Point2<f64>, Point2<f64>)> = uniform_points(200, 150, 8, 6)
            .into_iter()
            .map(|p| (p, h.apply_point(p).unwrap()))
            .collect();
        for k in 0..6 {
            pairs[k * 7].1.x += 60.0 + k as f64;
        }
        let fit = robust_dlt(&pairs, None, 30, 2.0).unwrap();
        let clean: Vec<_> = uniform_points(200, 150, 5, 5);
        for p in clean {
            let e = (fit.homography.apply_point(p).unwrap() - h.apply_point(p).unwrap()).norm();
            assert!(e < 0.5, "{e}");
        }
        assert_eq!(fit.inliers, 42);
    }

    #[test]
    fn self_pair_is_identity() {
        let img = procedural_texture(320, 240, 4).unwrap();
        let est = estimate(&img, &img, &EstimatorConfig::default()).unwrap();
        let pts = Correspondences::generate(&Homography::identity(), &uniform_points(320, 240, 16, 12)).unwrap();
        assert!(pme(&est.homography, &pts).unwrap().pme < 0.1);
        let again = estimate(&img, &img, &EstimatorConfig::default()).unwrap();
        assert_eq!(est.homography, again.homography);
    }

    #[test]
    fn integer_translation_is_recovered() {
        let big = procedural_texture(400, 300, 6).unwrap();
        let a = crop(&big, 40, 30, 320, 240).unwrap();
        let b = crop(&big, 12, 18, 320, 240).unwrap();
        // b(x, y) = a(x - 28, y - 12)
        let est = estimate(&a, &b, &EstimatorConfig::default()).unwrap();
        for p in uniform_points(320, 240, 4, 4) {
            let q = est.homography.apply_point(p).unwrap();
            assert!((q.x - p.x - 28.0).abs() < 0.5 && (q.y - p.y - 12.0).abs() < 0.5, "{q:?} from {p:?}");
        }
    }

    #[test]
    fn rejects_tiny_or_mismatched() {
        let a = procedural_texture(20, 20, 1).unwrap();
        assert!(matches!(estimate(&a, &a, &EstimatorConfig::default()), Err(Error::TooSmall(_))));
        let b = procedural_texture(64, 64, 1).unwrap();
        let c = procedural_texture(64, 48, 1).unwrap();
        assert!(matches!(estimate(&b, &c, &EstimatorConfig::default()), Err(Error::ShapeMismatch(_))));
    }
}
