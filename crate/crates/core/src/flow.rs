//! Dense homography flows over pixel meshgrids.
//!
//! A flow stores, for every pixel centre `p` of a grid, the displacement
//! `h(p) - p`. Flows of homographies do not add pointwise; chaining uses
//! `flow_{A∘B}(p) = flow_B(p) + flow_A(p + flow_B(p))`, which is what
//! [`transported_flow`] evaluates exactly.

use std::io::{Read, Write};

use nalgebra::Point2;

use crate::error::{Error, Result};
use crate::homography::{dlt_solve_weighted, map_raw, Homography};

/// Denominator magnitude below which a grid point is considered at infinity.
pub const GRID_DENOM_EPS: f64 = 1e-9;

const FLOW_MAGIC: &[u8; 4] = b"HFLO";

/// Pixel-centre meshgrid: point `(x, y)` for `x < width`, `y < height`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MeshGrid {
    width: usize,
    height: usize,
}

impl MeshGrid {
    pub fn new(width: usize, height: usize) -> Result<Self> {
        if width < 2 || height < 2 {
            return Err(Error::TooSmall(format!(
                "meshgrid {width}x{height} must be at least 2x2"
            )));
        }
        Ok(Self { width, height })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Points in row-major order.
    pub fn points(&self) -> impl Iterator<Item = Point2<f64>> + Clone + '_ {
        let w = self.width;
        (0..self.len()).map(move |i| Point2::new((i % w) as f64, (i / w) as f64))
    }

    /// The four frame corners, clockwise from the top-left.
    pub fn corners(&self) -> [Point2<f64>; 4] {
        let (w, h) = ((self.width - 1) as f64, (self.height - 1) as f64);
        [
            Point2::new(0.0, 0.0),
            Point2::new(w, 0.0),
            Point2::new(w, h),
            Point2::new(0.0, h),
        ]
    }
}

/// Per-pixel displacement field `(u, v)` on a meshgrid, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct HomographyFlow {
    width: usize,
    height: usize,
    u: Vec<f64>,
    v: Vec<f64>,
}

impl HomographyFlow {
    pub fn new(width: usize, height: usize, u: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        MeshGrid::new(width, height)?;
        if u.len() != width * height || v.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "flow components of length {}/{} for a {width}x{height} grid",
                u.len(),
                v.len()
            )));
        }
        if !u.iter().chain(&v).all(|x| x.is_finite()) {
            return Err(Error::Validation("flow has non-finite entries".into()));
        }
        Ok(Self {
            width,
            height,
            u,
            v,
        })
    }

    pub fn zeros(grid: MeshGrid) -> Self {
        Self::constant(grid, 0.0, 0.0)
    }

    pub fn constant(grid: MeshGrid, u: f64, v: f64) -> Self {
        Self {
            width: grid.width,
            height: grid.height,
            u: vec![u; grid.len()],
            v: vec![v; grid.len()],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn grid(&self) -> MeshGrid {
        MeshGrid {
            width: self.width,
            height: self.height,
        }
    }

    pub fn u(&self) -> &[f64] {
        &self.u
    }

    pub fn v(&self) -> &[f64] {
        &self.v
    }

    pub fn at(&self, x: usize, y: usize) -> (f64, f64) {
        let i = y * self.width + x;
        (self.u[i], self.v[i])
    }

    pub fn same_shape(&self, other: &HomographyFlow) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Serializes as `HFLO`, `u32` width, `u32` height, then interleaved
    /// little-endian `f32` pairs.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let mut buf = Vec::with_capacity(12 + 8 * self.u.len());
        buf.extend_from_slice(FLOW_MAGIC);
        buf.extend_from_slice(&(self.width as u32).to_le_bytes());
        buf.extend_from_slice(&(self.height as u32).to_le_bytes());
        for (u, v) in self.u.iter().zip(&self.v) {
            buf.extend_from_slice(&(*u as f32).to_le_bytes());
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let bad = |m: &str| Error::Parse {
            context: "flow file".into(),
            message: m.to_string(),
        };
        if bytes.len() < 12 || &bytes[0..4] != FLOW_MAGIC {
            return Err(bad("missing HFLO header"));
        }
        let width = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let height = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let n = width
            .checked_mul(height)
            .ok_or_else(|| bad("dimensions overflow"))?;
        if bytes.len() != 12 + 8 * n {
            return Err(bad(&format!(
                "expected {} payload bytes, found {}",
                8 * n,
                bytes.len() - 12
            )));
        }
        let mut u = Vec::with_capacity(n);
        let mut v = Vec::with_capacity(n);
        for chunk in bytes[12..].chunks_exact(8) {
            u.push(f32::from_le_bytes(chunk[0..4].try_into().unwrap()) as f64);
            v.push(f32::from_le_bytes(chunk[4..8].try_into().unwrap()) as f64);
        }
        Self::new(width, height, u, v)
    }
}

/// `flow(p) = h(p) - p` at every grid point.
pub fn flow_from_homography(h: &Homography, g: MeshGrid) -> Result<HomographyFlow> {
    transported_flow(h, &Homography::identity(), g)
}

/// Flow of `h` sampled along `carrier`: `h(c(p)) - c(p)` with `c = carrier`.
///
/// With `carrier` the identity this is the plain flow of `h`. In general it
/// is the second summand of the chained flow of `h ∘ carrier`, i.e. the flow
/// of `h` resampled onto the grid where `carrier` starts.
pub fn transported_flow(
    h: &Homography,
    carrier: &Homography,
    g: MeshGrid,
) -> Result<HomographyFlow> {
    let mh = h.matrix();
    let mc = carrier.matrix();
    let mut u = Vec::with_capacity(g.len());
    let mut v = Vec::with_capacity(g.len());
    for p in g.points() {
        let (cx, cy, cw) = map_raw(mc, p.x, p.y);
        if !(cw.abs() > GRID_DENOM_EPS) {
            return Err(Error::GridDegenerate {
                width: g.width,
                height: g.height,
            });
        }
        let (qx, qy) = (cx / cw, cy / cw);
        let (hx, hy, hw) = map_raw(mh, qx, qy);
        if !(hw.abs() > GRID_DENOM_EPS) {
            return Err(Error::GridDegenerate {
                width: g.width,
                height: g.height,
            });
        }
        u.push(hx / hw - qx);
        v.push(hy / hw - qy);
    }
    Ok(HomographyFlow {
        width: g.width,
        height: g.height,
        u,
        v,
    })
}

/// Cumulative flows of a chain of hops applied in order: entry `i` is the
/// flow of `hops[i] ∘ … ∘ hops[0]`.
pub fn cumulative_flows(hops: &[Homography], g: MeshGrid) -> Result<Vec<HomographyFlow>> {
    let mut acc = Homography::identity();
    let mut out = Vec::with_capacity(hops.len());
    for h in hops {
        acc = h.compose(&acc)?;
        out.push(flow_from_homography(&acc, g)?);
    }
    Ok(out)
}

/// Least-squares DLT over every grid correspondence `p -> p + flow(p)`.
pub fn homography_from_flow(f: &HomographyFlow, g: MeshGrid) -> Result<Homography> {
    if f.width != g.width || f.height != g.height {
        return Err(Error::ShapeMismatch(format!(
            "flow is {}x{}, grid is {}x{}",
            f.width, f.height, g.width, g.height
        )));
    }
    let pairs = g.points().enumerate().map(move |(i, p)| {
        (p, Point2::new(p.x + f.u[i], p.y + f.v[i]), 1.0)
    });
    dlt_solve_weighted(pairs)
}

/// Resamples a homography flow onto a `new_w x new_h` grid of the same frame.
///
/// The flow is converted back to its homography, conjugated by the axis
/// scaling between the two resolutions and evaluated on the new grid, so
/// displacements scale by the per-axis ratios.
pub fn rescale_flow(f: &HomographyFlow, new_w: usize, new_h: usize) -> Result<HomographyFlow> {
    let g_out = MeshGrid::new(new_w, new_h)?;
    let h = homography_from_flow(f, f.grid())?;
    let sx = new_w as f64 / f.width as f64;
    let sy = new_h as f64 / f.height as f64;
    flow_from_homography(&h.rescaled(sx, sy)?, g_out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_h() -> Homography {
        Homography::from_row_slice(&[
            1.02, 0.03, 12.0, -0.02, 0.98, -7.0, 4e-5, -3e-5, 1.0,
        ])
        .unwrap()
    }

    #[test]
    fn identity_and_translation_flows() {
        let g = MeshGrid::new(16, 9).unwrap();
        let f = flow_from_homography(&Homography::identity(), g).unwrap();
        assert!(f.u().iter().chain(f.v()).all(|x| x.abs() < 1e-12));
        let f = flow_from_homography(&Homography::translation(5.0, -3.0), g).unwrap();
        assert!(f.u().iter().all(|x| (x - 5.0).abs() < 1e-9));
        assert!(f.v().iter().all(|x| (x + 3.0).abs() < 1e-9));
    }

    #[test]
    fn corner_flow_matches_apply() {
        let g = MeshGrid::new(48, 32).unwrap();
        let h = sample_h();
        let f = flow_from_homography(&h, g).unwrap();
        for c in g.corners() {
            let q = h.apply_point(c).unwrap();
            let (u, v) = f.at(c.x as usize, c.y as usize);
            assert!((u - (q.x - c.x)).abs() < 1e-12);
            assert!((v - (q.y - c.y)).abs() < 1e-12);
        }
    }

    #[test]
    fn horizon_through_grid_is_rejected() {
        let g = MeshGrid::new(32, 32).unwrap();
        let h = Homography::from_row_slice(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, -0.1, 0.0, 1.0])
            .unwrap();
        assert!(matches!(
            flow_from_homography(&h, g),
            Err(Error::GridDegenerate { .. })
        ));
    }

    #[test]
    fn flow_from_zero_and_constant() {
        let g = MeshGrid::new(20, 10).unwrap();
        let h = homography_from_flow(&HomographyFlow::zeros(g), g).unwrap();
        assert!(h.max_abs_diff(&Homography::identity()) < 1e-12);
        let h = homography_from_flow(&HomographyFlow::constant(g, 5.0, -3.0), g).unwrap();
        assert!(h.max_abs_diff(&Homography::translation(5.0, -3.0)) < 1e-12);
    }

    #[test]
    fn rescale_constant_flow_halves() {
        let g = MeshGrid::new(480, 320).unwrap();
        let f = rescale_flow(&HomographyFlow::constant(g, 8.0, 4.0), 240, 160).unwrap();
        assert_eq!((f.width(), f.height()), (240, 160));
        assert!(f.u().iter().all(|x| (x - 4.0).abs() < 1e-8));
        assert!(f.v().iter().all(|x| (x - 2.0).abs() < 1e-8));
        let z = rescale_flow(&HomographyFlow::zeros(g), 256, 256).unwrap();
        assert!(z.u().iter().chain(z.v()).all(|x| x.abs() < 1e-10));
    }

    #[test]
    fn transported_flow_chains() {
        let g = MeshGrid::new(30, 20).unwrap();
        let a = sample_h();
        let b = Homography::translation(3.0, 1.5)
            .compose(&Homography::scaling(1.01, 0.99).unwrap())
            .unwrap();
        let fb = flow_from_homography(&b, g).unwrap();
        let ta = transported_flow(&a, &b, g).unwrap();
        let fab = flow_from_homography(&a.compose(&b).unwrap(), g).unwrap();
        for i in 0..g.len() {
            assert!((fab.u()[i] - fb.u()[i] - ta.u()[i]).abs() < 1e-9);
            assert!((fab.v()[i] - fb.v()[i] - ta.v()[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn flow_file_round_trip_and_header() {
        let g = MeshGrid::new(5, 3).unwrap();
        let f = flow_from_homography(&sample_h(), g).unwrap();
        let mut buf = Vec::new();
        f.write_to(&mut buf).unwrap();
        assert_eq!(&buf[0..4], b"HFLO");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 5);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 3);
        assert_eq!(buf.len(), 12 + 8 * 15);
        let first_u = f32::from_le_bytes(buf[12..16].try_into().unwrap());
        assert_eq!(first_u, f.u()[0] as f32);
        let back = HomographyFlow::read_from(&buf[..]).unwrap();
        for i in 0..15 {
            assert_eq!(back.u()[i], f.u()[i] as f32 as f64);
            assert_eq!(back.v()[i], f.v()[i] as f32 as f64);
        }
        assert!(HomographyFlow::read_from(&buf[..20]).is_err());
        assert!(HomographyFlow::read_from(&b"NOPE0000000000"[..]).is_err());
    }
}
