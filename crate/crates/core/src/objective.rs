//! Homography identity loss: supervised hop term, unsupervised composition
//! term, auto-balancing, photometric baselines and analytic gradients.
//!
//! Flows are compared with a per-pixel mean of `pen(du) + pen(dv)`, where
//! `pen` is the Charbonnier penalty `sqrt(x² + ε²) − ε` (exact `|x|` for
//! `ε = 0`). Every term is evaluated on the full-resolution grid and on the
//! fixed-size resized grid.

use nalgebra::{Point2, SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{flow_from_homography, transported_flow, HomographyFlow, MeshGrid};
use crate::homography::{compose_chain, four_point_with_jacobian, matrix_from_h8, Correspondences, Homography};
use crate::imaging::{warp, Image};

/// Guard on the denominator of the auto-balanced weight.
pub const LAMBDA_W_GUARD: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LambdaW {
    /// `λ_w = L_unsup / max(L_sup, guard)`, frozen for differentiation.
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Explicit per-level weights; levels beyond the list use `10^-i`.
    pub lambdas: Vec<f64>,
    pub lambda_w: LambdaW,
    /// Charbonnier smoothing; 0 selects exact L1.
    pub epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambdas: Vec::new(),
            lambda_w: LambdaW::Auto,
            epsilon: 1e-3,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(Error::InvalidConfig(format!("epsilon {} must be >= 0", self.epsilon)));
        }
        if self.lambdas.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
            return Err(Error::InvalidConfig("level weights must be finite and >= 0".into()));
        }
        if let LambdaW::Fixed(v) = self.lambda_w {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidConfig(format!("lambda_w {v} must be >= 0")));
            }
        }
        Ok(())
    }

    pub fn lambda(&self, i: usize) -> f64 {
        self.lambdas.get(i).copied().unwrap_or_else(|| 10f64.powi(-(i as i32)))
    }

    #[inline]
    pub fn penalty(&self, x: f64) -> f64 {
        if self.epsilon > 0.0 {
            (x * x + self.epsilon * self.epsilon).sqrt() - self.epsilon
        } else {
            x.abs()
        }
    }

    #[inline]
    pub fn penalty_derivative(&self, x: f64) -> f64 {
        if self.epsilon > 0.0 {
            x / (x * x + self.epsilon * self.epsilon).sqrt()
        } else if x > 0.0 {
            1.0
        } else if x < 0.0 {
            -1.0
        } else {
            0.0
        }
    }
}

/// Loss values of one evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_sup: f64,
    pub l_unsup: f64,
    pub lambda_w: f64,
    pub l_hil: f64,
    /// Supervised value of each hop (both resolutions).
    pub sup_terms: Vec<f64>,
    /// Unweighted unsupervised value of each level (both resolutions).
    pub unsup_terms: Vec<f64>,
}

/// Combines the two objectives: `L_HIL = L_unsup + λ_w · L_sup`.
pub fn hil(l_sup: f64, l_unsup: f64, cfg: &LossConfig) -> LossReport {
    let lambda_w = match cfg.lambda_w {
        LambdaW::Auto => l_unsup / l_sup.max(LAMBDA_W_GUARD),
        LambdaW::Fixed(v) => v,
    };
    LossReport {
        l_sup,
        l_unsup,
        lambda_w,
        l_hil: l_unsup + lambda_w * l_sup,
        sup_terms: Vec::new(),
        unsup_terms: Vec::new(),
    }
}

/// Full-resolution and resized flow of one pair.
pub type FlowPair = (HomographyFlow, HomographyFlow);

/// Scaling between the full and resized grids.
pub fn grid_scale(grid: MeshGrid, resized: MeshGrid) -> (f64, f64) {
    (
        resized.width() as f64 / grid.width() as f64,
        resized.height() as f64 / grid.height() as f64,
    )
}

/// Flow of `h` on both grids.
pub fn flow_pair(h: &Homography, grid: MeshGrid, resized: MeshGrid) -> Result<FlowPair> {
    let (sx, sy) = grid_scale(grid, resized);
    Ok((
        flow_from_homography(h, grid)?,
        flow_from_homography(&h.rescaled(sx, sy)?, resized)?,
    ))
}

/// Bridge flow on both grids, sampled along the cumulative ground truth.
pub fn transported_pair(
    bridge: &Homography,
    carrier: &Homography,
    grid: MeshGrid,
    resized: MeshGrid,
) -> Result<FlowPair> {
    let (sx, sy) = grid_scale(grid, resized);
    Ok((
        transported_flow(bridge, carrier, grid)?,
        transported_flow(&bridge.rescaled(sx, sy)?, &carrier.rescaled(sx, sy)?, resized)?,
    ))
}

/// Mean over pixels of `pen(Σ a_k u_k) + pen(Σ a_k v_k)`.
fn mean_penalty(terms: &[(f64, &HomographyFlow)], cfg: &LossConfig) -> Result<f64> {
    let first = terms[0].1;
    if terms.iter().any(|(_, f)| !f.same_shape(first)) {
        return Err(Error::ShapeMismatch(format!(
            "flows of different sizes (first is {}x{})",
            first.width(),
            first.height()
        )));
    }
    let n = first.u().len();
    let mut acc = 0.0;
    for i in 0..n {
        let (mut du, mut dv) = (0.0, 0.0);
        for (a, f) in terms {
            du += a * f.u()[i];
            dv += a * f.v()[i];
        }
        acc += cfg.penalty(du) + cfg.penalty(dv);
    }
    Ok(acc / n as f64)
}

/// Supervised loss: `Σ_i mean pen(F_i − F_gt,i)` over both resolutions.
pub fn sup_loss_flow(est: &[FlowPair], gt: &[FlowPair], cfg: &LossConfig) -> Result<f64> {
    if est.len() != gt.len() {
        return Err(Error::ShapeMismatch(format!("{} estimates, {} ground truths", est.len(), gt.len())));
    }
    let mut total = 0.0;
    for ((e, er), (g, gr)) in est.iter().zip(gt) {
        total += mean_penalty(&[(1.0, e), (-1.0, g)], cfg)?;
        total += mean_penalty(&[(1.0, er), (-1.0, gr)], cfg)?;
    }
    Ok(total)
}

/// Unsupervised loss: `Σ_i λ_i mean pen(F_st − F_bridge,i − G_i)` over both
/// resolutions, where `G_i` is the cumulative ground-truth flow of level `i`.
pub fn unsup_loss_flow(
    st: &FlowPair,
    bridges: &[FlowPair],
    gt_cumulative: &[FlowPair],
    cfg: &LossConfig,
) -> Result<f64> {
    if bridges.is_empty() {
        return Err(Error::EmptyInput("the unsupervised loss needs n >= 1".into()));
    }
    if bridges.len() != gt_cumulative.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} bridges, {} ground-truth levels",
            bridges.len(),
            gt_cumulative.len()
        )));
    }
    let mut total = 0.0;
    for (i, ((b, br), (g, gr))) in bridges.iter().zip(gt_cumulative).enumerate() {
        let l = cfg.lambda(i);
        total += l * mean_penalty(&[(1.0, &st.0), (-1.0, b), (-1.0, g)], cfg)?;
        total += l * mean_penalty(&[(1.0, &st.1), (-1.0, br), (-1.0, gr)], cfg)?;
    }
    Ok(total)
}

fn l1_diff(a: &Homography, b: &Homography) -> f64 {
    (a.matrix() - b.matrix()).iter().map(|v| v.abs()).sum()
}

/// Matrix form: `Σ_i λ_i |canon(B_i⁻¹ H_st) − canon(∏_{j≤i} H_gt,j)|₁`,
/// where `bridges[i]` maps intermediate `i + 1` to the target.
pub fn unsup_loss_matrix(
    h_st: &Homography,
    bridges: &[Homography],
    gts: &[Homography],
    cfg: &LossConfig,
) -> Result<f64> {
    if bridges.len() != gts.len() {
        return Err(Error::ShapeMismatch(format!("{} bridges, {} ground truths", bridges.len(), gts.len())));
    }
    let mut total = 0.0;
    for (i, b) in bridges.iter().enumerate() {
        let lhs = b.inverse()?.compose(h_st)?;
        let rhs = compose_chain(&gts[..=i])?;
        total += cfg.lambda(i) * l1_diff(&lhs, &rhs);
    }
    Ok(total)
}

/// Residual of the identity equation: `|canon(H_snt⁻¹ H_st) − canon(∏ H_gt)|₁`.
pub fn consistency_residual(h_st: &Homography, h_snt: &Homography, gts: &[Homography]) -> Result<f64> {
    let lhs = h_snt.inverse()?.compose(h_st)?;
    Ok(l1_diff(&lhs, &compose_chain(gts)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhotometricMode {
    Plain,
    AblationMasked,
}

/// Photometric baselines.
///
/// `Plain` is the mean absolute difference between `warp(src, h)` and `tgt`
/// over the forward validity mask. `AblationMasked` also compares `src` with
/// `warp(tgt, h⁻¹)` over the backward mask, so both frames contribute only
/// their common valid area.
pub fn photometric_loss(src: &Image, tgt: &Image, h: &Homography, mode: PhotometricMode) -> Result<f64> {
    if src.width() != tgt.width() || src.height() != tgt.height() || src.channels() != tgt.channels() {
        return Err(Error::ShapeMismatch("photometric loss needs equal image shapes".into()));
    }
    let masked_sum = |a: &Image, b: &Image, mask: &crate::imaging::ValidityMask| -> (f64, usize) {
        let ch = a.channels();
        let mut s = 0.0;
        for (i, ok) in mask.data().iter().enumerate() {
            if *ok {
                for c in 0..ch {
                    s += (a.data()[i * ch + c] - b.data()[i * ch + c]).abs();
                }
            }
        }
        (s, mask.count_valid() * ch)
    };
    let (fwd, fmask) = warp(src, h)?;
    let (mut sum, mut count) = masked_sum(&fwd, tgt, &fmask);
    if mode == PhotometricMode::AblationMasked {
        let (bwd, bmask) = warp(tgt, &h.inverse()?)?;
        let (s, c) = masked_sum(&bwd, src, &bmask);
        sum += s;
        count += c;
    }
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(sum / count as f64)
}

/// Corner-offset parameters of every pair of a chain: `hops[i]` for
/// `I_si -> I_s(i+1)`, `bridges[i]` for `I_s(i+1) -> I_t`, and `st`.
///
/// Each pair holds the displacements `(dx0, dy0, …, dx3, dy3)` of the frame
/// corners in [`MeshGrid::corners`] order. The flat layout is hops, then
/// bridges, then `st`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainParams {
    pub hops: Vec<[f64; 8]>,
    pub bridges: Vec<[f64; 8]>,
    pub st: [f64; 8],
}

/// Corner offsets of `h` on `grid`.
pub fn corner_offsets(h: &Homography, grid: MeshGrid) -> Result<[f64; 8]> {
    let mut o = [0.0; 8];
    for (k, c) in grid.corners().iter().enumerate() {
        let q = h.apply_point(*c)?;
        o[2 * k] = q.x - c.x;
        o[2 * k + 1] = q.y - c.y;
    }
    Ok(o)
}

/// Homography moving the corners of `grid` by `offsets`, with its
/// eight free entries and their Jacobian.
pub fn corner_homography(offsets: &[f64; 8], grid: MeshGrid) -> Result<(SVector<f64, 8>, SMatrix<f64, 8, 8>)> {
    let c = grid.corners();
    let dst: [Point2<f64>; 4] =
        std::array::from_fn(|k| Point2::new(c[k].x + offsets[2 * k], c[k].y + offsets[2 * k + 1]));
    four_point_with_jacobian(&c, &dst).map_err(|e| match e {
        Error::DegenerateConfiguration(_) => Error::Singular { det: 0.0 },
        other => other,
    })
}

impl ChainParams {
    pub fn from_homographies(
        hops: &[Homography],
        bridges: &[Homography],
        st: &Homography,
        grid: MeshGrid,
    ) -> Result<Self> {
        Ok(Self {
            hops: hops.iter().map(|h| corner_offsets(h, grid)).collect::<Result<_>>()?,
            bridges: bridges.iter().map(|h| corner_offsets(h, grid)).collect::<Result<_>>()?,
            st: corner_offsets(st, grid)?,
        })
    }

    pub fn len(&self) -> usize {
        8 * (self.hops.len() + self.bridges.len() + 1)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.len());
        for p in self.hops.iter().chain(&self.bridges).chain(std::iter::once(&self.st)) {
            v.extend_from_slice(p);
        }
        v
    }

    /// Inverse of [`ChainParams::to_vec`] for a chain with `n` hops.
    pub fn from_slice(v: &[f64], n: usize) -> Result<Self> {
        if v.len() != 8 * (2 * n + 1) {
            return Err(Error::ShapeMismatch(format!("{} parameters for n = {n}", v.len())));
        }
        let pair = |k: usize| -> [f64; 8] { v[8 * k..8 * k + 8].try_into().unwrap() };
        Ok(Self {
            hops: (0..n).map(pair).collect(),
            bridges: (n..2 * n).map(pair).collect(),
            st: pair(2 * n),
        })
    }

    pub fn homography(offsets: &[f64; 8], grid: MeshGrid) -> Result<Homography> {
        let (h, _) = corner_homography(offsets, grid)?;
        Homography::from_matrix(matrix_from_h8(&h))
    }

    pub fn hop_homographies(&self, grid: MeshGrid) -> Result<Vec<Homography>> {
        self.hops.iter().map(|o| Self::homography(o, grid)).collect()
    }

    pub fn bridge_homographies(&self, grid: MeshGrid) -> Result<Vec<Homography>> {
        self.bridges.iter().map(|o| Self::homography(o, grid)).collect()
    }

    pub fn st_homography(&self, grid: MeshGrid) -> Result<Homography> {
        Self::homography(&self.st, grid)
    }
}

/// Precomputed ground-truth geometry of a chain on both grids.
#[derive(Debug, Clone)]
pub struct ChainContext {
    pub grid: MeshGrid,
    pub resized: MeshGrid,
    pub gts: Vec<Homography>,
    scale: (f64, f64),
    /// Per hop and resolution: `H_gt,i(p)` at every grid point.
    hop_targets: Vec<[Vec<[f64; 2]>; 2]>,
    /// Per level and resolution: `C_i(p)`, the cumulative ground truth.
    carriers: Vec<[Vec<[f64; 2]>; 2]>,
    /// Grid points at each resolution.
    points: [Vec<[f64; 2]>; 2],
}

fn map_points(h: &Homography, pts: &[[f64; 2]], grid: MeshGrid) -> Result<Vec<[f64; 2]>> {
    let m = h.matrix();
    pts.iter()
        .map(|p| {
            let w = m[(2, 0)] * p[0] + m[(2, 1)] * p[1] + m[(2, 2)];
            if !(w.abs() > crate::flow::GRID_DENOM_EPS) {
                return Err(Error::GridDegenerate {
                    width: grid.width(),
                    height: grid.height(),
                });
            }
            Ok([
                (m[(0, 0)] * p[0] + m[(0, 1)] * p[1] + m[(0, 2)]) / w,
                (m[(1, 0)] * p[0] + m[(1, 1)] * p[1] + m[(1, 2)]) / w,
            ])
        })
        .collect()
}

impl ChainContext {
    pub fn new(gts: &[Homography], grid: MeshGrid, resized: MeshGrid) -> Result<Self> {
        if gts.is_empty() {
            return Err(Error::EmptyInput("chain context needs at least one ground-truth hop".into()));
        }
        let scale = grid_scale(grid, resized);
        let points = [
            grid.points().map(|p| [p.x, p.y]).collect::<Vec<_>>(),
            resized.points().map(|p| [p.x, p.y]).collect::<Vec<_>>(),
        ];
        let both = |h: &Homography| -> Result<[Vec<[f64; 2]>; 2]> {
            Ok([
                map_points(h, &points[0], grid)?,
                map_points(&h.rescaled(scale.0, scale.1)?, &points[1], resized)?,
            ])
        };
        let hop_targets = gts.iter().map(both).collect::<Result<Vec<_>>>()?;
        let mut acc = Homography::identity();
        let mut carriers = Vec::with_capacity(gts.len());
        for g in gts {
            acc = g.compose(&acc)?;
            carriers.push(both(&acc)?);
        }
        Ok(Self {
            grid,
            resized,
            gts: gts.to_vec(),
            scale,
            hop_targets,
            carriers,
            points,
        })
    }

    pub fn n(&self) -> usize {
        self.gts.len()
    }
}

/// Projective map of the raw eight-entry homography and its derivative
/// with respect to those entries, at point `(x, y)`.
#[inline]
fn map_with_jacobian(h: &SVector<f64, 8>, x: f64, y: f64) -> Result<((f64, f64), [[f64; 8]; 2])> {
    let w = h[6] * x + h[7] * y + 1.0;
    if !(w.abs() > crate::homography::DENOM_EPS) {
        return Err(Error::DegeneratePoint { x, y, denominator: w });
    }
    let px = (h[0] * x + h[1] * y + h[2]) / w;
    let py = (h[3] * x + h[4] * y + h[5]) / w;
    let jx = [x / w, y / w, 1.0 / w, 0.0, 0.0, 0.0, -x * px / w, -y * px / w];
    let jy = [0.0, 0.0, 0.0, x / w, y / w, 1.0 / w, -x * py / w, -y * py / w];
    Ok(((px, py), [jx, jy]))
}

/// Parameterized pair: raw entries, corner Jacobian, and the scaled variant
/// used on the resized grid (`S H S⁻¹`).
struct Pair {
    h: SVector<f64, 8>,
    jac: SMatrix<f64, 8, 8>,
}

impl Pair {
    fn new(offsets: &[f64; 8], grid: MeshGrid) -> Result<Self> {
        let (h, jac) = corner_homography(offsets, grid)?;
        Ok(Self { h, jac })
    }
}

/// Accumulates `pen` of a residual `a(p) − b`, and optionally its gradient
/// with respect to the entries of the homography producing `a`, for one grid.
///
/// The resized grid evaluates `S · H(S⁻¹ p̂)`.
fn residual_term(
    h: &SVector<f64, 8>,
    pts: &[[f64; 2]],
    targets: &[[f64; 2]],
    scale: Option<(f64, f64)>,
    cfg: &LossConfig,
    grad: Option<&mut [f64; 8]>,
) -> Result<f64> {
    let (sx, sy) = scale.unwrap_or((1.0, 1.0));
    let mut acc = 0.0;
    let mut g = [0.0; 8];
    let want = grad.is_some();
    for (p, t) in pts.iter().zip(targets) {
        let (x, y) = (p[0] / sx, p[1] / sy);
        let ((px, py), j) = map_with_jacobian(h, x, y)?;
        let (rx, ry) = (sx * px - t[0], sy * py - t[1]);
        acc += cfg.penalty(rx) + cfg.penalty(ry);
        if want {
            let (dx, dy) = (cfg.penalty_derivative(rx) * sx, cfg.penalty_derivative(ry) * sy);
            for k in 0..8 {
                g[k] += dx * j[0][k] + dy * j[1][k];
            }
        }
    }
    let n = pts.len() as f64;
    if let Some(out) = grad {
        for k in 0..8 {
            out[k] += g[k] / n;
        }
    }
    Ok(acc / n)
}

fn check_params(params: &ChainParams, ctx: &ChainContext) -> Result<()> {
    let n = ctx.n();
    if params.hops.len() != n || params.bridges.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} hops and {} bridges for a chain with n = {n}",
            params.hops.len(),
            params.bridges.len()
        )));
    }
    Ok(())
}

/// Supervised block: per-hop values of `L_sup` and, optionally, the
/// gradient with respect to the hop offsets (`8 n` entries).
pub fn sup_block(
    hops: &[[f64; 8]],
    ctx: &ChainContext,
    cfg: &LossConfig,
    want_grad: bool,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if hops.len() != ctx.n() {
        return Err(Error::ShapeMismatch(format!("{} hops for n = {}", hops.len(), ctx.n())));
    }
    let scales = [None, Some(ctx.scale)];
    let mut terms = Vec::with_capacity(hops.len());
    let mut grad = if want_grad { vec![0.0; 8 * hops.len()] } else { Vec::new() };
    for (i, offsets) in hops.iter().enumerate() {
        let pair = Pair::new(offsets, ctx.grid)?;
        let mut gh = [0.0; 8];
        let mut term = 0.0;
        for r in 0..2 {
            term += residual_term(
                &pair.h,
                &ctx.points[r],
                &ctx.hop_targets[i][r],
                scales[r],
                cfg,
                want_grad.then_some(&mut gh),
            )?;
        }
        if want_grad {
            let g = pair.jac.transpose() * SVector::<f64, 8>::from(gh);
            grad[8 * i..8 * i + 8].copy_from_slice(g.as_slice());
        }
        terms.push(term);
    }
    Ok((terms, grad))
}

/// Unsupervised block: unweighted per-level values, the weighted `L_unsup`
/// and, optionally, the gradient with respect to the bridge offsets followed
/// by the `st` offsets (`8 (n + 1)` entries).
pub fn unsup_block(
    bridges: &[[f64; 8]],
    st: &[f64; 8],
    ctx: &ChainContext,
    cfg: &LossConfig,
    want_grad: bool,
) -> Result<(Vec<f64>, f64, Vec<f64>)> {
    let n = ctx.n();
    if bridges.len() != n {
        return Err(Error::ShapeMismatch(format!("{} bridges for n = {n}", bridges.len())));
    }
    let scales = [(1.0, 1.0), ctx.scale];
    let st = Pair::new(st, ctx.grid)?;
    let mut terms = Vec::with_capacity(n);
    let mut grad = if want_grad { vec![0.0; 8 * (n + 1)] } else { Vec::new() };
    let mut g_st = [0.0; 8];
    let mut total = 0.0;
    for (i, offsets) in bridges.iter().enumerate() {
        let bridge = Pair::new(offsets, ctx.grid)?;
        let lambda = cfg.lambda(i);
        let mut term = 0.0;
        let mut g_b = [0.0; 8];
        for r in 0..2 {
            let (sx, sy) = scales[r];
            let pts = &ctx.points[r];
            let inv_n = 1.0 / pts.len() as f64;
            let mut acc = 0.0;
            for (p, c) in pts.iter().zip(&ctx.carriers[i][r]) {
                let ((ax, ay), ja) = map_with_jacobian(&st.h, p[0] / sx, p[1] / sy)?;
                let ((bx, by), jb) = map_with_jacobian(&bridge.h, c[0] / sx, c[1] / sy)?;
                let (rx, ry) = (sx * (ax - bx), sy * (ay - by));
                acc += cfg.penalty(rx) + cfg.penalty(ry);
                if want_grad && lambda != 0.0 {
                    let dx = lambda * inv_n * cfg.penalty_derivative(rx) * sx;
                    let dy = lambda * inv_n * cfg.penalty_derivative(ry) * sy;
                    for k in 0..8 {
                        g_st[k] += dx * ja[0][k] + dy * ja[1][k];
                        g_b[k] -= dx * jb[0][k] + dy * jb[1][k];
                    }
                }
            }
            term += acc * inv_n;
        }
        if want_grad {
            let g = bridge.jac.transpose() * SVector::<f64, 8>::from(g_b);
            grad[8 * i..8 * i + 8].copy_from_slice(g.as_slice());
        }
        total += lambda * term;
        terms.push(term);
    }
    if want_grad {
        let g = st.jac.transpose() * SVector::<f64, 8>::from(g_st);
        grad[8 * n..].copy_from_slice(g.as_slice());
    }
    Ok((terms, total, grad))
}

fn report(sup_terms: Vec<f64>, unsup_terms: Vec<f64>, l_unsup: f64, cfg: &LossConfig) -> LossReport {
    let l_sup: f64 = sup_terms.iter().sum();
    let mut r = hil(l_sup, l_unsup, cfg);
    r.sup_terms = sup_terms;
    r.unsup_terms = unsup_terms;
    r
}

/// `L_HIL` of a parameterized chain.
pub fn loss_value(params: &ChainParams, ctx: &ChainContext, cfg: &LossConfig) -> Result<LossReport> {
    cfg.validate()?;
    check_params(params, ctx)?;
    let (sup, _) = sup_block(&params.hops, ctx, cfg, false)?;
    let (unsup, l_unsup, _) = unsup_block(&params.bridges, &params.st, ctx, cfg, false)?;
    Ok(report(sup, unsup, l_unsup, cfg))
}

/// `L_HIL` and its gradient with respect to every corner offset, in the
/// flat layout of [`ChainParams::to_vec`]. `λ_w` is treated as a constant.
pub fn loss_gradient(params: &ChainParams, ctx: &ChainContext, cfg: &LossConfig) -> Result<(LossReport, Vec<f64>)> {
    cfg.validate()?;
    check_params(params, ctx)?;
    let (sup, gs) = sup_block(&params.hops, ctx, cfg, true)?;
    let (unsup, l_unsup, gu) = unsup_block(&params.bridges, &params.st, ctx, cfg, true)?;
    let r = report(sup, unsup, l_unsup, cfg);
    let mut g: Vec<f64> = gs.iter().map(|v| v * r.lambda_w).collect();
    g.extend_from_slice(&gu);
    Ok((r, g))
}

/// Mean Charbonnier reprojection error of `offsets`' homography on `pts`,
/// with its gradient.
pub fn anchor_loss(offsets: &[f64; 8], pts: &Correspondences, grid: MeshGrid, cfg: &LossConfig) -> Result<(f64, [f64; 8])> {
    if pts.is_empty() {
        return Ok((0.0, [0.0; 8]));
    }
    let pair = Pair::new(offsets, grid)?;
    let src: Vec<[f64; 2]> = pts.pairs().iter().map(|c| [c.src.x, c.src.y]).collect();
    let dst: Vec<[f64; 2]> = pts.pairs().iter().map(|c| [c.dst.x, c.dst.y]).collect();
    let mut gh = [0.0; 8];
    let value = residual_term(&pair.h, &src, &dst, None, cfg, Some(&mut gh))?;
    let g = pair.jac.transpose() * SVector::<f64, 8>::from(gh);
    Ok((value, g.as_slice().try_into().unwrap()))
}

/// Central differences of `f` at `x` with step `h` in every coordinate.
pub fn central_differences<F: FnMut(&[f64]) -> f64>(x: &[f64], h: f64, mut f: F) -> Vec<f64> {
    let mut v = x.to_vec();
    (0..x.len())
        .map(|k| {
            v[k] = x[k] + h;
            let fp = f(&v);
            v[k] = x[k] - h;
            let fm = f(&v);
            v[k] = x[k];
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// `max_k |a_k − b_k| / max_k |b_k|`: gradient error relative to the scale of
/// the reference gradient.
pub fn gradient_error(analytic: &[f64], reference: &[f64]) -> f64 {
    let diff = analytic.iter().zip(reference).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let scale = reference.iter().map(|b| b.abs()).fold(0.0, f64::max);
    if scale > 0.0 {
        diff / scale
    } else {
        diff
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::cumulative_flows;
    use crate::synthesis::{sample_homography, ChainConfig};

    fn small() -> (MeshGrid, MeshGrid) {
        (MeshGrid::new(48, 32).unwrap(), MeshGrid::new(16, 16).unwrap())
    }

    fn cfg_small() -> ChainConfig {
        ChainConfig {
            crop_width: 48,
            crop_height: 32,
            max_perturbation: 4.0,
            min_perturbation: 0.5,
            ..ChainConfig::default()
        }
    }

    fn draws(n: usize, seed: u64) -> Vec<Homography> {
        (0..n).map(|i| sample_homography(&cfg_small(), seed, i as u64).unwrap()).collect()
    }

    fn l1() -> LossConfig {
        LossConfig {
            epsilon: 0.0,
            ..LossConfig::default()
        }
    }

    #[test]
    fn hil_arithmetic() {
        let r = hil(4.0, 2.0, &LossConfig::default());
        assert_eq!((r.lambda_w, r.l_hil), (0.5, 4.0));
        let r = hil(0.0, 3.0, &LossConfig::default());
        assert_eq!(r.lambda_w, 3.0 / LAMBDA_W_GUARD);
        assert_eq!(r.l_hil, 3.0);
        let fixed = LossConfig {
            lambda_w: LambdaW::Fixed(1.0),
            ..LossConfig::default()
        };
        assert_eq!(hil(4.0, 2.0, &fixed).l_hil, 6.0);
    }

    #[test]
    fn sup_constant_error() {
        let (g, r) = small();
        let est = (HomographyFlow::constant(g, 3.0, 4.0), HomographyFlow::constant(r, 3.0, 4.0));
        let gt = (HomographyFlow::zeros(g), HomographyFlow::zeros(r));
        assert_eq!(sup_loss_flow(&[est.clone()], &[gt.clone()], &l1()).unwrap(), 14.0);
        assert_eq!(sup_loss_flow(&[gt.clone()], &[gt.clone()], &l1()).unwrap(), 0.0);
        let wrong = (HomographyFlow::zeros(r), HomographyFlow::zeros(r));
        assert!(matches!(sup_loss_flow(&[est], &[wrong], &l1()), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn unsup_level_weights() {
        let (g, r) = small();
        let z = (HomographyFlow::zeros(g), HomographyFlow::zeros(r));
        let st = (HomographyFlow::constant(g, 2.0, 0.0), HomographyFlow::zeros(r));
        let b1 = (HomographyFlow::constant(g, -3.0, 0.0), HomographyFlow::zeros(r));
        // residuals: 2 at level 0, 5 at level 1 (full resolution only)
        let v = unsup_loss_flow(&st, &[z.clone(), b1], &[z.clone(), z], &l1()).unwrap();
        assert!((v - (2.0 + 0.1 * 5.0)).abs() < 1e-12);
    }

    #[test]
    fn unsup_zero_at_truth_and_positive_at_identity() {
        let (g, r) = small();
        let gts = draws(2, 3);
        let h_st = Homography::translation(3.0, -2.0).compose(&compose_chain(&gts).unwrap()).unwrap();
        let cum: Vec<Homography> = (0..2).map(|i| compose_chain(&gts[..=i]).unwrap()).collect();
        let bridges: Vec<Homography> = cum.iter().map(|c| h_st.compose(&c.inverse().unwrap()).unwrap()).collect();
        let st = flow_pair(&h_st, g, r).unwrap();
        let bf: Vec<FlowPair> = bridges.iter().zip(&cum).map(|(b, c)| transported_pair(b, c, g, r).unwrap()).collect();
        let gf: Vec<FlowPair> = cum.iter().map(|c| flow_pair(c, g, r).unwrap()).collect();
        assert!(unsup_loss_flow(&st, &bf, &gf, &l1()).unwrap() < 1e-9);
        assert!(unsup_loss_matrix(&h_st, &bridges, &gts, &l1()).unwrap() < 1e-12);

        let id = flow_pair(&Homography::identity(), g, r).unwrap();
        let v = unsup_loss_flow(&id, &[id.clone(), id.clone()], &gf, &l1()).unwrap();
        let closed: f64 = gf
            .iter()
            .enumerate()
            .map(|(i, (f, fr))| {
                let m = |f: &HomographyFlow| {
                    f.u().iter().zip(f.v()).map(|(u, v)| u.abs() + v.abs()).sum::<f64>() / f.u().len() as f64
                };
                0.1f64.powi(i as i32) * (m(f) + m(fr))
            })
            .sum();
        assert!(v > 0.0 && (v - closed).abs() < 1e-12);
        let id = Homography::identity();
        assert!(unsup_loss_matrix(&id, &[id, id], &gts, &l1()).unwrap() > 0.0);
    }

    #[test]
    fn matrix_gauge_freedom() {
        let gts = draws(2, 9);
        let a = Homography::from_row_slice(&[1.1, 0.2, 5.0, -0.1, 0.9, 3.0, 1e-3, 2e-3, 1.0]).unwrap();
        let h_st = a.compose(&compose_chain(&gts).unwrap()).unwrap();
        let bridges = [a.compose(&gts[1]).unwrap(), a];
        assert!(unsup_loss_matrix(&h_st, &bridges, &gts, &l1()).unwrap() < 1e-12);
        assert!(consistency_residual(&h_st, &a, &gts).unwrap() < 1e-12);
    }

    #[test]
    fn photometric_modes() {
        let img = Image::from_gray_fn(40, 30, |x, y| ((x * 3 + y * 5) % 17) as f64 / 20.0).unwrap();
        assert_eq!(photometric_loss(&img, &img, &Homography::identity(), PhotometricMode::Plain).unwrap(), 0.0);
        let brighter = Image::from_gray_fn(40, 30, |x, y| img.get(x, y, 0) + 0.1).unwrap();
        let v = photometric_loss(&img, &brighter, &Homography::identity(), PhotometricMode::Plain).unwrap();
        assert!((v - 0.1).abs() < 1e-12);
        let far = Homography::translation(100.0, 0.0);
        assert_eq!(photometric_loss(&img, &img, &far, PhotometricMode::Plain).unwrap_err(), Error::EmptyMask);
    }

    #[test]
    fn flow_and_fused_forms_agree() {
        let (g, r) = small();
        let gts = draws(2, 21);
        let ctx = ChainContext::new(&gts, g, r).unwrap();
        let hops: Vec<Homography> = draws(2, 22);
        let bridges: Vec<Homography> = draws(2, 23);
        let st = sample_homography(&cfg_small(), 24, 0).unwrap();
        let params = ChainParams::from_homographies(&hops, &bridges, &st, g).unwrap();
        let cfg = LossConfig::default();
        let rep = loss_value(&params, &ctx, &cfg).unwrap();

        let hop_h = params.hop_homographies(g).unwrap();
        let est: Vec<FlowPair> = hop_h.iter().map(|h| flow_pair(h, g, r).unwrap()).collect();
        let gtf: Vec<FlowPair> = gts.iter().map(|h| flow_pair(h, g, r).unwrap()).collect();
        let sup = sup_loss_flow(&est, &gtf, &cfg).unwrap();
        assert!((sup - rep.l_sup).abs() < 1e-9, "{sup} {}", rep.l_sup);

        let cum: Vec<Homography> = (0..2).map(|i| compose_chain(&gts[..=i]).unwrap()).collect();
        let st_f = flow_pair(&params.st_homography(g).unwrap(), g, r).unwrap();
        let bf: Vec<FlowPair> = params
            .bridge_homographies(g)
            .unwrap()
            .iter()
            .zip(&cum)
            .map(|(b, c)| transported_pair(b, c, g, r).unwrap())
            .collect();
        let gf: Vec<FlowPair> = cum.iter().map(|c| flow_pair(c, g, r).unwrap()).collect();
        let unsup = unsup_loss_flow(&st_f, &bf, &gf, &cfg).unwrap();
        assert!((unsup - rep.l_unsup).abs() < 1e-9, "{unsup} {}", rep.l_unsup);
        assert_eq!(cumulative_flows(&gts, g).unwrap()[1], gf[1].0);
    }

    #[test]
    fn gradient_matches_differences() {
        let (g, r) = small();
        let gts = draws(2, 31);
        let ctx = ChainContext::new(&gts, g, r).unwrap();
        let params = ChainParams::from_homographies(&draws(2, 32), &draws(2, 33), &draws(1, 34)[0], g).unwrap();
        let (rep, grad) = loss_gradient(&params, &ctx, &LossConfig::default()).unwrap();
        let fixed = LossConfig {
            lambda_w: LambdaW::Fixed(rep.lambda_w),
            ..LossConfig::default()
        };
        let x = params.to_vec();
        let fd = central_differences(&x, 1e-3, |v| {
            loss_value(&ChainParams::from_slice(v, 2).unwrap(), &ctx, &fixed).unwrap().l_hil
        });
        let err = gradient_error(&grad, &fd);
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn stationary_at_truth_and_dead_levels() {
        let (g, r) = small();
        let gts = draws(2, 41);
        let ctx = ChainContext::new(&gts, g, r).unwrap();
        let h_st = sample_homography(&ChainConfig { max_perturbation: 10.0, ..cfg_small() }, 42, 0).unwrap();
        let cum: Vec<Homography> = (0..2).map(|i| compose_chain(&gts[..=i]).unwrap()).collect();
        let bridges: Vec<Homography> = cum.iter().map(|c| h_st.compose(&c.inverse().unwrap()).unwrap()).collect();
        let params = ChainParams::from_homographies(&gts, &bridges, &h_st, g).unwrap();
        let (_, grad) = loss_gradient(&params, &ctx, &LossConfig::default()).unwrap();
        assert!(grad.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-8);

        let other = ChainParams::from_homographies(&draws(2, 43), &draws(2, 44), &draws(1, 45)[0], g).unwrap();
        let cfg = LossConfig {
            lambdas: vec![1.0, 0.0],
            ..LossConfig::default()
        };
        let (_, grad) = loss_gradient(&other, &ctx, &cfg).unwrap();
        // the second bridge only enters the level with weight 0
        assert!(grad[24..32].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn anchor_gradient() {
        let g = MeshGrid::new(48, 32).unwrap();
        let h = draws(1, 51)[0];
        let pts = Correspondences::generate(&h, &crate::synthesis::uniform_points(48, 32, 4, 3)).unwrap();
        let o = corner_offsets(&h, g).unwrap();
        let (v, grad) = anchor_loss(&o, &pts, g, &LossConfig::default()).unwrap();
        assert!(v < 1e-9 && grad.iter().all(|x| x.abs() < 1e-6));
        let mut o2 = o;
        o2[3] += 1.0;
        let (v2, g2) = anchor_loss(&o2, &pts, g, &LossConfig::default()).unwrap();
        let mut o3 = o2;
        o3[3] += 1e-4;
        let (v3, _) = anchor_loss(&o3, &pts, g, &LossConfig::default()).unwrap();
        assert!(v2 > 0.0 && ((v3 - v2) / 1e-4 - g2[3]).abs() < 1e-3);
    }
}
