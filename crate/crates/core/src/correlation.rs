//! Hand-crafted cell descriptors and global/local correlation volumes.
//!
//! Matches are reported at the resolution the features were extracted from:
//! cell `(i, j)` has its centre at pixel `((i + 0.5) * cell - 0.5, (j + 0.5) * cell - 0.5)`.

use nalgebra::Point2;

use crate::error::{Error, Result};
use crate::homography::{Correspondence, Correspondences};
use crate::imaging::Image;

/// Descriptor depth: mean, standard deviation and eight orientation bins.
pub const DEPTH: usize = 10;
const ORIENTATION_BINS: usize = 8;
const MEAN_OFFSET: f64 = 0.5;
const STD_WEIGHT: f64 = 2.0;
const HIST_WEIGHT: f64 = 4.0;

/// Grid of unit-norm descriptors.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    width: usize,
    height: usize,
    depth: usize,
    cell: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    /// Builds a map from raw vectors, normalizing each one. Zero vectors are
    /// replaced by the first basis vector.
    pub fn new(width: usize, height: usize, depth: usize, cell: usize, mut data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || depth == 0 {
            return Err(Error::TooSmall(format!("feature map {width}x{height}x{depth}")));
        }
        if data.len() != width * height * depth {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {width}x{height}x{depth} map",
                data.len()
            )));
        }
        for v in data.chunks_mut(depth) {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-12 && n.is_finite() {
                v.iter_mut().for_each(|x| *x /= n);
            } else {
                v.iter_mut().for_each(|x| *x = 0.0);
                v[0] = 1.0;
            }
        }
        Ok(Self {
            width,
            height,
            depth,
            cell: cell.max(1),
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    /// Pixel size of one cell at the extraction resolution.
    pub fn cell(&self) -> usize {
        self.cell
    }

    pub fn at(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.depth;
        &self.data[i..i + self.depth]
    }

    /// Pixel coordinate of the centre of cell index `i`.
    pub fn cell_centre(&self, i: f64) -> f64 {
        (i + 0.5) * self.cell as f64 - 0.5
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cell descriptors of the grayscale version of `img`. Partial cells at the
/// right and bottom borders are padded by edge replication.
pub fn extract_features(img: &Image, cell: usize) -> Result<FeatureMap> {
    if cell == 0 || img.width() < cell || img.height() < cell {
        return Err(Error::TooSmall(format!(
            "{}x{} image for {cell}px cells",
            img.width(),
            img.height()
        )));
    }
    let gray = img.to_gray();
    let (w, h) = (gray.width(), gray.height());
    let px = |x: isize, y: isize| -> f64 {
        let xc = x.clamp(0, w as isize - 1) as usize;
        let yc = y.clamp(0, h as isize - 1) as usize;
        gray.get(xc, yc, 0)
    };
    let fw = w.div_ceil(cell);
    let fh = h.div_ceil(cell);
    let area = (cell * cell) as f64;
    let mut data = vec![0.0; fw * fh * DEPTH];
    for cy in 0..fh {
        for cx in 0..fw {
            let desc = &mut data[(cy * fw + cx) * DEPTH..(cy * fw + cx + 1) * DEPTH];
            let (mut s, mut s2) = (0.0, 0.0);
            let mut hist = [0.0; ORIENTATION_BINS];
            for y in (cy * cell) as isize..((cy + 1) * cell) as isize {
                for x in (cx * cell) as isize..((cx + 1) * cell) as isize {
                    let v = px(x, y);
                    s += v;
                    s2 += v * v;
                    let gx = 0.5 * (px(x + 1, y) - px(x - 1, y));
                    let gy = 0.5 * (px(x, y + 1) - px(x, y - 1));
                    let mag = gx.hypot(gy);
                    if mag > 0.0 {
                        let t = (gy.atan2(gx) + std::f64::consts::PI)
                            / (2.0 * std::f64::consts::PI)
                            * ORIENTATION_BINS as f64;
                        let b0 = t.floor();
                        let frac = t - b0;
                        let b0 = (b0 as usize) % ORIENTATION_BINS;
                        let b1 = (b0 + 1) % ORIENTATION_BINS;
                        hist[b0] += mag * (1.0 - frac);
                        hist[b1] += mag * frac;
                    }
                }
            }
            let mean = s / area;
            let var = (s2 / area - mean * mean).max(0.0);
            desc[0] = mean - MEAN_OFFSET;
            desc[1] = STD_WEIGHT * var.sqrt();
            for (d, hv) in desc[2..].iter_mut().zip(hist) {
                *d = HIST_WEIGHT * hv / area;
            }
        }
    }
    FeatureMap::new(fw, fh, DEPTH, cell, data)
}

/// Context descriptors on a `cell` grid: the [`extract_features`]
/// descriptors of the `sub`-pixel cells inside a `span * cell` square around
/// each cell centre, concatenated and renormalized. `sub` must divide `cell`.
pub fn context_features(img: &Image, cell: usize, sub: usize, span: usize) -> Result<FeatureMap> {
    if sub == 0 || span == 0 || cell % sub != 0 {
        return Err(Error::InvalidConfig(format!("sub-cell {sub} must divide cell {cell}, span {span} >= 1")));
    }
    let base = extract_features(img, sub)?;
    let fw = img.width().div_ceil(cell);
    let fh = img.height().div_ceil(cell);
    let k = span * cell / sub;
    let per = cell / sub;
    let depth = base.depth() * k * k;
    let mut data = Vec::with_capacity(fw * fh * depth);
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    for cy in 0..fh {
        for cx in 0..fw {
            let x0 = (cx * per) as isize + (per as isize - k as isize) / 2;
            let y0 = (cy * per) as isize + (per as isize - k as isize) / 2;
            for j in 0..k as isize {
                for i in 0..k as isize {
                    data.extend_from_slice(base.at(clamp(x0 + i, base.width()), clamp(y0 + j, base.height())));
                }
            }
        }
    }
    FeatureMap::new(fw, fh, depth, cell, data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorrelationKind {
    Global,
    Local { radius: usize },
}

/// Similarity volume indexed by query position and channel.
///
/// Global channel `y_t * w_t + x_t` addresses target position `(x_t, y_t)`;
/// local channel `(dy + R) * (2R + 1) + (dx + R)` addresses displacement
/// `(dx, dy)` from the query.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMap {
    kind: CorrelationKind,
    width: usize,
    height: usize,
    target_width: usize,
    target_height: usize,
    channels: usize,
    cell: usize,
    data: Vec<f64>,
}

impl CorrelationMap {
    pub fn kind(&self) -> CorrelationKind {
        self.kind
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

    pub fn cell(&self) -> usize {
        self.cell
    }

    pub fn at(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Target cell `(x_t, y_t)` addressed by channel `c` of query `(x, y)`.
    /// May lie outside the target grid for local maps.
    pub fn channel_target(&self, x: usize, y: usize, c: usize) -> (isize, isize) {
        match self.kind {
            CorrelationKind::Global => ((c % self.target_width) as isize, (c / self.target_width) as isize),
            CorrelationKind::Local { radius } => {
                let side = 2 * radius + 1;
                let dx = (c % side) as isize - radius as isize;
                let dy = (c / side) as isize - radius as isize;
                (x as isize + dx, y as isize + dy)
            }
        }
    }

    /// Channel of query `(x, y)` addressing target cell `(tx, ty)`, if any.
    pub fn channel_of(&self, x: usize, y: usize, tx: isize, ty: isize) -> Option<usize> {
        match self.kind {
            CorrelationKind::Global => {
                if tx < 0 || ty < 0 || tx >= self.target_width as isize || ty >= self.target_height as isize {
                    None
                } else {
                    Some(ty as usize * self.target_width + tx as usize)
                }
            }
            CorrelationKind::Local { radius } => {
                let r = radius as isize;
                let (dx, dy) = (tx - x as isize, ty - y as isize);
                if dx.abs() > r || dy.abs() > r {
                    None
                } else {
                    Some(((dy + r) * (2 * r + 1) + dx + r) as usize)
                }
            }
        }
    }
}

fn check_depth(a: &FeatureMap, b: &FeatureMap) -> Result<()> {
    if a.depth != b.depth {
        return Err(Error::DepthMismatch(a.depth, b.depth));
    }
    Ok(())
}

/// All-pairs cosine similarity between `src` queries and `tgt` positions.
pub fn global_correlation(src: &FeatureMap, tgt: &FeatureMap) -> Result<CorrelationMap> {
    check_depth(src, tgt)?;
    let channels = tgt.width * tgt.height;
    let mut data = Vec::with_capacity(src.width * src.height * channels);
    for y in 0..src.height {
        for x in 0..src.width {
            let f = src.at(x, y);
            for ty in 0..tgt.height {
                for tx in 0..tgt.width {
                    data.push(dot(f, tgt.at(tx, ty)));
                }
            }
        }
    }
    Ok(CorrelationMap {
        kind: CorrelationKind::Global,
        width: src.width,
        height: src.height,
        target_width: tgt.width,
        target_height: tgt.height,
        channels,
        cell: src.cell,
        data,
    })
}

/// Similarity within a `(2R+1)^2` window; out-of-range targets hold −1.
pub fn local_correlation(src: &FeatureMap, tgt: &FeatureMap, radius: usize) -> Result<CorrelationMap> {
    check_depth(src, tgt)?;
    if src.width != tgt.width || src.height != tgt.height {
        return Err(Error::ShapeMismatch(format!(
            "local correlation of {}x{} and {}x{} maps",
            src.width, src.height, tgt.width, tgt.height
        )));
    }
    if radius == 0 {
        return Err(Error::InvalidConfig("local correlation radius must be at least 1".into()));
    }
    let r = radius as isize;
    let side = 2 * radius + 1;
    let channels = side * side;
    let mut data = Vec::with_capacity(src.width * src.height * channels);
    for y in 0..src.height as isize {
        for x in 0..src.width as isize {
            let f = src.at(x as usize, y as usize);
            for dy in -r..=r {
                for dx in -r..=r {
                    let (tx, ty) = (x + dx, y + dy);
                    if tx < 0 || ty < 0 || tx >= tgt.width as isize || ty >= tgt.height as isize {
                        data.push(-1.0);
                    } else {
                        data.push(dot(f, tgt.at(tx as usize, ty as usize)));
                    }
                }
            }
        }
    }
    Ok(CorrelationMap {
        kind: CorrelationKind::Local { radius },
        width: src.width,
        height: src.height,
        target_width: tgt.width,
        target_height: tgt.height,
        channels,
        cell: src.cell,
        data,
    })
}

/// A ratio-tested match in feature-grid coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridMatch {
    pub query: (usize, usize),
    /// Best target cell.
    pub cell: (usize, usize),
    /// Target position in cells, optionally refined to sub-cell precision.
    pub target: (f64, f64),
    pub similarity: f64,
    /// Best over second-best descriptor distance.
    pub ratio: f64,
}

#[inline]
fn distance(c: f64) -> f64 {
    (2.0 - 2.0 * c).max(0.0).sqrt()
}

/// Equiangular line fit: minimum of the symmetric V through the distances
/// `(−1, a)`, `(0, b)`, `(1, c)`, clamped to half a cell.
fn v_fit(a: f64, b: f64, c: f64) -> f64 {
    let den = 2.0 * (a.max(c) - b);
    if den > 1e-12 {
        ((a - c) / den).clamp(-0.5, 0.5)
    } else {
        0.0
    }
}

/// Best channel per query with the descriptor-distance ratio test: kept iff
/// `d1 < ratio * d2`, where `d = sqrt(2 - 2c)` and the second best ignores
/// the 8-neighbourhood of the best target cell. Ties go to the smallest
/// channel. With `subcell`, the target is refined along each axis by an
/// equiangular fit to the descriptor distances.
pub fn grid_matches(c: &CorrelationMap, ratio: f64, subcell: bool) -> Result<Vec<GridMatch>> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::InvalidConfig(format!("ratio {ratio} outside (0, 1]")));
    }
    let mut out = Vec::new();
    for y in 0..c.height {
        for x in 0..c.width {
            let row = c.at(x, y);
            let mut best = 0;
            for (k, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = k;
                }
            }
            let (bx, by) = c.channel_target(x, y, best);
            if bx < 0 || by < 0 || bx >= c.target_width as isize || by >= c.target_height as isize {
                continue;
            }
            let mut second = f64::NEG_INFINITY;
            for (k, v) in row.iter().enumerate() {
                let (tx, ty) = c.channel_target(x, y, k);
                if (tx - bx).abs() <= 1 && (ty - by).abs() <= 1 {
                    continue;
                }
                second = second.max(*v);
            }
            if second == f64::NEG_INFINITY {
                continue;
            }
            let (d1, d2) = (distance(row[best]), distance(second));
            if !(d1 < ratio * d2) {
                continue;
            }
            let mut target = (bx as f64, by as f64);
            if subcell {
                let val = |tx: isize, ty: isize| {
                    c.channel_of(x, y, tx, ty)
                        .filter(|_| tx >= 0 && ty >= 0 && tx < c.target_width as isize && ty < c.target_height as isize)
                        .map(|k| row[k])
                };
                if let (Some(l), Some(r)) = (val(bx - 1, by), val(bx + 1, by)) {
                    target.0 += v_fit(distance(l), distance(row[best]), distance(r));
                }
                if let (Some(u), Some(d)) = (val(bx, by - 1), val(bx, by + 1)) {
                    target.1 += v_fit(distance(u), distance(row[best]), distance(d));
                }
            }
            out.push(GridMatch {
                query: (x, y),
                cell: (bx as usize, by as usize),
                target,
                similarity: row[best],
                ratio: if d2 > 0.0 { d1 / d2 } else { 0.0 },
            });
        }
    }
    Ok(out)
}

/// Sub-cell offset the equiangular fit reports for a descriptor against its
/// own neighbours at `(x, y)`, zero where a neighbour is missing. Texture
/// makes this nonzero even though the true offset is zero.
pub fn self_profile_offset(f: &FeatureMap, x: usize, y: usize) -> (f64, f64) {
    let d = |tx: usize, ty: usize| distance(dot(f.at(x, y), f.at(tx, ty)));
    let ox = if x > 0 && x + 1 < f.width() { v_fit(d(x - 1, y), 0.0, d(x + 1, y)) } else { 0.0 };
    let oy = if y > 0 && y + 1 < f.height() { v_fit(d(x, y - 1), 0.0, d(x, y + 1)) } else { 0.0 };
    (ox, oy)
}

/// Subtracts the target's [`self_profile_offset`] from sub-cell refined
/// matches, so an exact match at a cell centre reports no offset.
pub fn remove_profile_bias(matches: &mut [GridMatch], tgt: &FeatureMap) {
    for m in matches {
        let (ox, oy) = self_profile_offset(tgt, m.cell.0, m.cell.1);
        let (bx, by) = (m.cell.0 as f64, m.cell.1 as f64);
        m.target.0 = (m.target.0 - ox).clamp(bx - 0.5, bx + 0.5);
        m.target.1 = (m.target.1 - oy).clamp(by - 0.5, by + 0.5);
    }
}

/// Ratio-tested matches as cell-centre pixel correspondences.
pub fn matches_from_correlation(c: &CorrelationMap, ratio: f64) -> Result<Correspondences> {
    let m = grid_matches(c, ratio, false)?;
    if m.len() < 4 {
        return Err(Error::NoMatches(m.len()));
    }
    let centre = |i: f64| (i + 0.5) * c.cell as f64 - 0.5;
    let pairs = m
        .iter()
        .map(|g| Correspondence {
            src: Point2::new(centre(g.query.0 as f64), centre(g.query.1 as f64)),
            dst: Point2::new(centre(g.target.0), centre(g.target.1)),
        })
        .collect();
    Correspondences::new(pairs)
}
