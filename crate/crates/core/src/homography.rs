//! Projective algebra on 3x3 homographies.
//!
//! Coordinates are pixels with x to the right, y down and the origin at the
//! centre of the top-left pixel. A [`Homography`] is stored in canonical form:
//! unit Frobenius norm, with the bottom-right entry made positive whenever it
//! is not vanishingly small. The `h33 = 1` view is available through
//! [`Homography::to_unit_h33`] but is lossy for near-affine-degenerate
//! solutions, which is why it is not the internal representation.

use nalgebra::{Matrix3, Point2, SMatrix, SVector, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimum |det| of the canonical matrix for it to count as invertible.
pub const DET_EPS: f64 = 1e-12;
/// Projective denominators at or below this magnitude map to infinity.
pub const DENOM_EPS: f64 = 1e-12;
/// Threshold on |h33| for the sign rule and the `h33 = 1` view.
pub const H33_EPS: f64 = 1e-9;

/// Relative eigenvalue gap below which the DLT null space is not unique.
const DLT_RANK_EPS: f64 = 1e-10;

/// An invertible projective transform of the image plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography {
    m: Matrix3<f64>,
}

/// Brings a matrix into canonical form (unit Frobenius norm, sign rule).
///
/// Returns `None` for the zero matrix or non-finite input.
pub fn canonicalize(m: &Matrix3<f64>) -> Option<Matrix3<f64>> {
    let norm = m.norm();
    if !norm.is_finite() || norm == 0.0 {
        return None;
    }
    let mut c = m / norm;
    let flip = if c[(2, 2)].abs() > H33_EPS {
        c[(2, 2)] < 0.0
    } else {
        // first significant entry in row-major order decides the sign
        let first = (0..9)
            .map(|k| c[(k / 3, k % 3)])
            .find(|v| v.abs() > DET_EPS)
            .unwrap_or(1.0);
        first < 0.0
    };
    if flip {
        c = -c;
    }
    Some(c)
}

impl Homography {
    /// Wraps a raw matrix, normalizing it and checking invertibility.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        let c = canonicalize(&m).ok_or(Error::Singular { det: 0.0 })?;
        let det = c.determinant();
        if !(det.abs() > DET_EPS) {
            return Err(Error::Singular { det: det.abs() });
        }
        Ok(Self { m: c })
    }

    /// Builds from nine row-major entries.
    pub fn from_row_slice(h: &[f64; 9]) -> Result<Self> {
        Self::from_matrix(Matrix3::from_row_slice(h))
    }

    pub fn identity() -> Self {
        Self::from_matrix(Matrix3::identity()).expect("identity is invertible")
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self::from_matrix(Matrix3::new(1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0, 1.0))
            .expect("translation is invertible")
    }

    /// Axis-aligned scaling `(x, y) -> (sx x, sy y)`.
    pub fn scaling(sx: f64, sy: f64) -> Result<Self> {
        Self::from_matrix(Matrix3::new(sx, 0.0, 0.0, 0.0, sy, 0.0, 0.0, 0.0, 1.0))
    }

    /// Canonical matrix (unit Frobenius norm).
    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.m
    }

    /// Row-major entries of the canonical matrix.
    pub fn to_row_array(&self) -> [f64; 9] {
        let mut out = [0.0; 9];
        for (k, v) in out.iter_mut().enumerate() {
            *v = self.m[(k / 3, k % 3)];
        }
        out
    }

    /// The matrix scaled so that `h33 = 1`.
    pub fn to_unit_h33(&self) -> Result<Matrix3<f64>> {
        let h33 = self.m[(2, 2)];
        if h33.abs() <= H33_EPS {
            return Err(Error::DegenerateConfiguration(format!(
                "h33 = {h33:e} has no unit-h33 view"
            )));
        }
        Ok(self.m / h33)
    }

    pub fn determinant(&self) -> f64 {
        self.m.determinant()
    }

    /// Maps one point, failing when it lands at infinity.
    pub fn apply_point(&self, p: Point2<f64>) -> Result<Point2<f64>> {
        let m = &self.m;
        let w = m[(2, 0)] * p.x + m[(2, 1)] * p.y + m[(2, 2)];
        if !(w.abs() > DENOM_EPS) {
            return Err(Error::DegeneratePoint {
                x: p.x,
                y: p.y,
                denominator: w,
            });
        }
        let x = (m[(0, 0)] * p.x + m[(0, 1)] * p.y + m[(0, 2)]) / w;
        let y = (m[(1, 0)] * p.x + m[(1, 1)] * p.y + m[(1, 2)]) / w;
        Ok(Point2::new(x, y))
    }

    /// Maps a list of points, preserving order.
    pub fn apply(&self, pts: &[Point2<f64>]) -> Result<Vec<Point2<f64>>> {
        pts.iter().map(|&p| self.apply_point(p)).collect()
    }

    /// `self ∘ inner`: first `inner`, then `self`.
    pub fn compose(&self, inner: &Homography) -> Result<Homography> {
        compose(self, inner)
    }

    pub fn inverse(&self) -> Result<Homography> {
        invert(self)
    }

    /// Largest absolute entry difference between the canonical matrices.
    pub fn max_abs_diff(&self, other: &Homography) -> f64 {
        (self.m - other.m).amax()
    }

    /// Frobenius distance of the canonical matrix from the canonical identity.
    pub fn distance_from_identity(&self) -> f64 {
        (self.m - Homography::identity().m).norm()
    }

    /// Conjugates by an axis scaling: `S * self * S^-1` with `S = diag(sx, sy, 1)`.
    ///
    /// Expresses the same motion in a frame resampled by `(sx, sy)`.
    pub fn rescaled(&self, sx: f64, sy: f64) -> Result<Homography> {
        let s = Matrix3::new(sx, 0.0, 0.0, 0.0, sy, 0.0, 0.0, 0.0, 1.0);
        let s_inv = Matrix3::new(1.0 / sx, 0.0, 0.0, 0.0, 1.0 / sy, 0.0, 0.0, 0.0, 1.0);
        Homography::from_matrix(s * self.m * s_inv)
    }
}

impl Default for Homography {
    fn default() -> Self {
        Self::identity()
    }
}

/// Matrix product `outer * inner`, i.e. apply `inner` first.
pub fn compose(outer: &Homography, inner: &Homography) -> Result<Homography> {
    let p = outer.m * inner.m;
    let c = canonicalize(&p).ok_or(Error::SingularResult { det: 0.0 })?;
    let det = c.determinant();
    if !(det.abs() > DET_EPS) {
        return Err(Error::SingularResult { det: det.abs() });
    }
    Ok(Homography { m: c })
}

pub fn invert(h: &Homography) -> Result<Homography> {
    let det = h.m.determinant();
    if !(det.abs() > DET_EPS) {
        return Err(Error::Singular { det: det.abs() });
    }
    let inv = h.m.try_inverse().ok_or(Error::Singular { det: det.abs() })?;
    Homography::from_matrix(inv)
}

/// Product of a sequence of homographies applied in order: `hs[0]` first.
pub fn compose_chain<'a, I>(hs: I) -> Result<Homography>
where
    I: IntoIterator<Item = &'a Homography>,
{
    hs.into_iter()
        .try_fold(Homography::identity(), |acc, h| compose(h, &acc))
}

/// One source→target point pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub src: Point2<f64>,
    pub dst: Point2<f64>,
}

impl Correspondence {
    pub fn new(xs: f64, ys: f64, xt: f64, yt: f64) -> Self {
        Self {
            src: Point2::new(xs, ys),
            dst: Point2::new(xt, yt),
        }
    }
}

/// Validated list of point pairs: finite coordinates, distinct sources.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Correspondences {
    pairs: Vec<Correspondence>,
}

impl Correspondences {
    pub fn new(pairs: Vec<Correspondence>) -> Result<Self> {
        for (i, c) in pairs.iter().enumerate() {
            let finite = [c.src.x, c.src.y, c.dst.x, c.dst.y]
                .iter()
                .all(|v| v.is_finite());
            if !finite {
                return Err(Error::InvalidCorrespondences(format!(
                    "pair {i} has a non-finite coordinate"
                )));
            }
        }
        let mut keys: Vec<(u64, u64, usize)> = pairs
            .iter()
            .enumerate()
            .map(|(i, c)| (c.src.x.to_bits(), c.src.y.to_bits(), i))
            .collect();
        keys.sort_unstable();
        if let Some(w) = keys.windows(2).find(|w| w[0].0 == w[1].0 && w[0].1 == w[1].1) {
            return Err(Error::InvalidCorrespondences(format!(
                "pairs {} and {} share a source point",
                w[0].2, w[1].2
            )));
        }
        Ok(Self { pairs })
    }

    /// Builds from `(xs, ys, xt, yt)` tuples.
    pub fn from_tuples(t: &[[f64; 4]]) -> Result<Self> {
        Self::new(
            t.iter()
                .map(|r| Correspondence::new(r[0], r[1], r[2], r[3]))
                .collect(),
        )
    }

    pub fn pairs(&self) -> &[Correspondence] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn to_tuples(&self) -> Vec<[f64; 4]> {
        self.pairs
            .iter()
            .map(|c| [c.src.x, c.src.y, c.dst.x, c.dst.y])
            .collect()
    }

    /// Correspondences `p -> h(p)` for the given source points.
    pub fn generate(h: &Homography, src: &[Point2<f64>]) -> Result<Self> {
        let pairs = src
            .iter()
            .map(|&p| {
                h.apply_point(p)
                    .map(|q| Correspondence { src: p, dst: q })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(pairs)
    }
}

/// Similarity transform taking points to zero centroid and mean distance √2.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Conditioner {
    cx: f64,
    cy: f64,
    s: f64,
}

impl Conditioner {
    fn fit<I: Iterator<Item = (Point2<f64>, f64)> + Clone>(pts: I) -> Option<Self> {
        let (mut sw, mut sx, mut sy) = (0.0, 0.0, 0.0);
        for (p, w) in pts.clone() {
            sw += w;
            sx += w * p.x;
            sy += w * p.y;
        }
        if !(sw > 0.0) {
            return None;
        }
        let (cx, cy) = (sx / sw, sy / sw);
        let mut sd = 0.0;
        for (p, w) in pts {
            sd += w * ((p.x - cx).powi(2) + (p.y - cy).powi(2)).sqrt();
        }
        let mean = sd / sw;
        if !(mean > 0.0) || !mean.is_finite() {
            return None;
        }
        Some(Self {
            cx,
            cy,
            s: std::f64::consts::SQRT_2 / mean,
        })
    }

    #[inline]
    fn map(&self, p: Point2<f64>) -> (f64, f64) {
        ((p.x - self.cx) * self.s, (p.y - self.cy) * self.s)
    }

    fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            self.s,
            0.0,
            -self.s * self.cx,
            0.0,
            self.s,
            -self.s * self.cy,
            0.0,
            0.0,
            1.0,
        )
    }

    fn inverse_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.s,
            0.0,
            self.cx,
            0.0,
            1.0 / self.s,
            self.cy,
            0.0,
            0.0,
            1.0,
        )
    }
}

/// Weighted normalized DLT over an arbitrary (re-iterable) stream of pairs.
///
/// Each item is `(source, target, weight)`. Hartley conditioning is applied
/// to both point sets, the 9x9 normal matrix of the stacked constraint system
/// is accumulated, and the eigenvector of its smallest eigenvalue is taken as
/// the solution. A near-tie between the two smallest eigenvalues means the
/// null space is not one-dimensional.
pub fn dlt_solve_weighted<I>(pairs: I) -> Result<Homography>
where
    I: Iterator<Item = (Point2<f64>, Point2<f64>, f64)> + Clone,
{
    let count = pairs.clone().filter(|(_, _, w)| *w > 0.0).count();
    if count < 4 {
        return Err(Error::DegenerateConfiguration(format!(
            "{count} weighted correspondences, at least 4 are required"
        )));
    }
    let ts = Conditioner::fit(pairs.clone().map(|(s, _, w)| (s, w))).ok_or_else(|| {
        Error::DegenerateConfiguration("source points are coincident".into())
    })?;
    let tt = Conditioner::fit(pairs.clone().map(|(_, t, w)| (t, w))).ok_or_else(|| {
        Error::DegenerateConfiguration("target points are coincident".into())
    })?;

    // Rows are (-a, 0, u a) and (0, -a, v a) with a = (x, y, 1), so the normal
    // matrix is assembled from four weighted moments of a aᵀ.
    let mut m = [[0.0f64; 6]; 4];
    for (s, t, w) in pairs {
        if !(w > 0.0) {
            continue;
        }
        let (x, y) = ts.map(s);
        let (u, v) = tt.map(t);
        let a = [x * x, x * y, x, y * y, y, 1.0];
        let k = [w, w * u, w * v, w * (u * u + v * v)];
        for (row, kj) in m.iter_mut().zip(k) {
            for (acc, aj) in row.iter_mut().zip(a) {
                *acc += kj * aj;
            }
        }
    }
    let block = |q: &[f64; 6]| Matrix3::new(q[0], q[1], q[2], q[1], q[3], q[4], q[2], q[4], q[5]);
    let (m0, mu, mv, muv) = (block(&m[0]), block(&m[1]), block(&m[2]), block(&m[3]));
    let mut ata = SMatrix::<f64, 9, 9>::zeros();
    ata.fixed_view_mut::<3, 3>(0, 0).copy_from(&m0);
    ata.fixed_view_mut::<3, 3>(3, 3).copy_from(&m0);
    ata.fixed_view_mut::<3, 3>(0, 6).copy_from(&(-mu));
    ata.fixed_view_mut::<3, 3>(6, 0).copy_from(&(-mu));
    ata.fixed_view_mut::<3, 3>(3, 6).copy_from(&(-mv));
    ata.fixed_view_mut::<3, 3>(6, 3).copy_from(&(-mv));
    ata.fixed_view_mut::<3, 3>(6, 6).copy_from(&muv);

    let eig = SymmetricEigen::new(ata);
    let mut order: Vec<usize> = (0..9).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let lmax = eig.eigenvalues[order[8]].abs().max(f64::MIN_POSITIVE);
    let l2 = eig.eigenvalues[order[1]];
    if l2 <= DLT_RANK_EPS * lmax {
        return Err(Error::DegenerateConfiguration(format!(
            "null space is not one-dimensional (eigenvalue ratio {:e})",
            l2 / lmax
        )));
    }
    let h = eig.eigenvectors.column(order[0]);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let m = tt.inverse_matrix() * hn * ts.matrix();
    Homography::from_matrix(m).map_err(|e| match e {
        Error::Singular { det } => {
            Error::DegenerateConfiguration(format!("solution is singular (|det| = {det:e})"))
        }
        other => other,
    })
}

/// Normalized DLT: least-squares homography from at least four pairs.
pub fn dlt_solve(c: &Correspondences) -> Result<Homography> {
    dlt_solve_weighted(c.pairs.iter().map(|p| (p.src, p.dst, 1.0)))
}

/// Exact homography taking four source corners to four targets, with `h33 = 1`,
/// together with its Jacobian.
///
/// Returns the eight free entries `h = (h11 h12 h13 h21 h22 h23 h31 h32)` and
/// `dh/dθ` where `θ = (u0 v0 u1 v1 u2 v2 u3 v3)` are the target coordinates.
pub fn four_point_with_jacobian(
    src: &[Point2<f64>; 4],
    dst: &[Point2<f64>; 4],
) -> Result<(SVector<f64, 8>, SMatrix<f64, 8, 8>)> {
    let mut a = SMatrix::<f64, 8, 8>::zeros();
    let mut b = SVector::<f64, 8>::zeros();
    for k in 0..4 {
        let (x, y) = (src[k].x, src[k].y);
        let (u, v) = (dst[k].x, dst[k].y);
        let r = 2 * k;
        a[(r, 0)] = x;
        a[(r, 1)] = y;
        a[(r, 2)] = 1.0;
        a[(r, 6)] = -u * x;
        a[(r, 7)] = -u * y;
        b[r] = u;
        a[(r + 1, 3)] = x;
        a[(r + 1, 4)] = y;
        a[(r + 1, 5)] = 1.0;
        a[(r + 1, 6)] = -v * x;
        a[(r + 1, 7)] = -v * y;
        b[r + 1] = v;
    }
    let lu = a.lu();
    let h = lu.solve(&b).ok_or_else(|| {
        Error::DegenerateConfiguration("four-point system is singular".into())
    })?;
    if !h.iter().all(|v| v.is_finite()) {
        return Err(Error::DegenerateConfiguration(
            "four-point system is singular".into(),
        ));
    }
    // d(A h - b) = 0  =>  dh = A^-1 (db - dA h); only rows of the moved
    // coordinate change, and both contributions share the factor 1 + x h31 + y h32.
    let inv = lu
        .try_inverse()
        .ok_or_else(|| Error::DegenerateConfiguration("four-point system is singular".into()))?;
    let mut jac = SMatrix::<f64, 8, 8>::zeros();
    for k in 0..4 {
        let w = 1.0 + src[k].x * h[6] + src[k].y * h[7];
        for r in [2 * k, 2 * k + 1] {
            jac.set_column(r, &(inv.column(r) * w));
        }
    }
    Ok((h, jac))
}

/// Matrix form of the eight free entries (`h33 = 1`).
pub fn matrix_from_h8(h: &SVector<f64, 8>) -> Matrix3<f64> {
    Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0)
}

/// Homogeneous application of a raw matrix.
#[inline]
pub(crate) fn map_raw(m: &Matrix3<f64>, x: f64, y: f64) -> (f64, f64, f64) {
    let v = m * Vector3::new(x, y, 1.0);
    (v[0], v[1], v[2])
}

/// JSON form: `{"h": [9 numbers row-major]}` in the `h33 = 1` view when it
/// exists, otherwise the unit-Frobenius matrix flagged with
/// `"normalization": "frobenius"`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct HomographyJson {
    pub h: [f64; 9],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalization: Option<String>,
}

impl From<&Homography> for HomographyJson {
    fn from(h: &Homography) -> Self {
        match h.to_unit_h33() {
            Ok(m) => {
                let mut a = [0.0; 9];
                for (k, v) in a.iter_mut().enumerate() {
                    *v = m[(k / 3, k % 3)];
                }
                HomographyJson {
                    h: a,
                    normalization: None,
                }
            }
            Err(_) => HomographyJson {
                h: h.to_row_array(),
                normalization: Some("frobenius".to_string()),
            },
        }
    }
}

impl HomographyJson {
    /// The canonical entries themselves, which read back bit-exactly.
    pub fn canonical(h: &Homography) -> Self {
        HomographyJson {
            h: h.to_row_array(),
            normalization: Some("frobenius".to_string()),
        }
    }
}

impl TryFrom<&HomographyJson> for Homography {
    type Error = Error;

    fn try_from(j: &HomographyJson) -> Result<Self> {
        match j.normalization.as_deref() {
            Some("frobenius") => {
                let m = Matrix3::from_row_slice(&j.h);
                match canonicalize(&m) {
                    // already canonical: keep the stored bits
                    Some(c) if (c - m).amax() <= 4.0 * f64::EPSILON => {
                        let det = m.determinant();
                        if !(det.abs() > DET_EPS) {
                            return Err(Error::Singular { det: det.abs() });
                        }
                        Ok(Self { m })
                    }
                    _ => Homography::from_row_slice(&j.h),
                }
            }
            None | Some("h33") => Homography::from_row_slice(&j.h),
            Some(other) => Err(Error::Parse {
                context: "homography".into(),
                message: format!("unknown normalization {other:?}"),
            }),
        }
    }
}

impl Serialize for Homography {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        HomographyJson::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for Homography {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let j = HomographyJson::deserialize(d)?;
        Homography::try_from(&j).map_err(serde::de::Error::custom)
    }
}
