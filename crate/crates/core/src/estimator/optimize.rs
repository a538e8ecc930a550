use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::{estimate, EstimatorConfig};
use crate::error::{Error, Result};
use crate::homography::{compose_chain, Correspondences, Homography};
use crate::objective::{
    anchor_loss, consistency_residual, corner_offsets, sup_block, unsup_block, ChainContext, ChainParams, LambdaW, LossConfig,
    LAMBDA_W_GUARD,
};
use crate::synthesis::ProgressiveChain;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub iterations: usize,
    /// Largest corner move (pixels) of a first, unscaled step.
    pub step_size: f64,
    /// Anchor weight.
    pub mu: f64,
    /// Stop once no corner offset moves by more than this.
    pub tolerance: f64,
    /// L-BFGS history length.
    pub memory: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            step_size: 1.0,
            mu: 0.1,
            tolerance: 1e-10,
            memory: 8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidConfig("iterations must be at least 1".into()));
        }
        if !(self.step_size > 0.0) || !self.step_size.is_finite() {
            return Err(Error::InvalidConfig(format!("step size {} must be > 0", self.step_size)));
        }
        if !(self.mu >= 0.0) || !self.mu.is_finite() {
            return Err(Error::InvalidConfig(format!("mu {} must be >= 0", self.mu)));
        }
        if !(self.tolerance >= 0.0) {
            return Err(Error::InvalidConfig("tolerance must be >= 0".into()));
        }
        Ok(())
    }
}

/// Matches anchoring every pair of a chain, in the frame of the chain grid.
#[derive(Debug, Clone)]
pub struct ChainAnchors {
    pub hops: Vec<Correspondences>,
    pub bridges: Vec<Correspondences>,
    pub st: Correspondences,
}

impl ChainAnchors {
    pub fn empty(n: usize) -> Self {
        let none = || Correspondences::new(Vec::new()).expect("empty set is valid");
        Self {
            hops: (0..n).map(|_| none()).collect(),
            bridges: (0..n).map(|_| none()).collect(),
            st: none(),
        }
    }

    pub fn len(&self) -> usize {
        self.hops.iter().chain(&self.bridges).map(|c| c.len()).sum::<usize>() + self.st.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Every `ceil(len / max)`-th correspondence, so at most `max` remain.
fn thin(c: Correspondences, max: usize) -> Result<Correspondences> {
    if max == 0 || c.len() <= max {
        return Ok(c);
    }
    let stride = c.len().div_ceil(max);
    Correspondences::new(c.pairs().iter().step_by(stride).copied().collect())
}

/// Direct estimates of every pair of a chain with their inlier matches.
#[derive(Debug, Clone)]
pub struct ChainEstimates {
    pub hops: Vec<Homography>,
    pub bridges: Vec<Homography>,
    pub st: Homography,
    pub anchors: ChainAnchors,
    /// Pairs whose estimation failed and fell back to the identity.
    pub failures: usize,
}

/// Runs [`estimate`] on every hop, every bridge and the source/target pair
/// of `chain`. Matches are thinned to at most `max_per_pair` (0 keeps all).
/// A pair without enough matches becomes the identity with no anchors.
pub fn estimate_chain(chain: &ProgressiveChain, cfg: &EstimatorConfig, max_per_pair: usize) -> Result<ChainEstimates> {
    let mut failures = 0;
    let mut pair = |a, b| -> Result<(Homography, Correspondences)> {
        match estimate(a, b, cfg) {
            Ok(e) => Ok((e.homography, thin(e.matches, max_per_pair)?)),
            Err(Error::NoMatches(_)) | Err(Error::Singular { .. }) | Err(Error::SingularResult { .. }) => {
                failures += 1;
                Ok((Homography::identity(), Correspondences::new(Vec::new())?))
            }
            Err(e) => Err(e),
        }
    };
    let n = chain.n();
    let (hops, hop_anchors): (Vec<_>, Vec<_>) = (0..n)
        .map(|i| pair(&chain.images[i], &chain.images[i + 1]))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .unzip();
    let (bridges, bridge_anchors): (Vec<_>, Vec<_>) = (0..n)
        .map(|i| pair(&chain.images[i + 1], &chain.target))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .unzip();
    let (st, st_anchors) = pair(chain.source(), &chain.target)?;
    Ok(ChainEstimates {
        hops,
        bridges,
        st,
        anchors: ChainAnchors {
            hops: hop_anchors,
            bridges: bridge_anchors,
            st: st_anchors,
        },
        failures,
    })
}

/// Inlier matches of [`estimate`] on every pair of `chain`; see
/// [`estimate_chain`].
pub fn estimator_anchors(chain: &ProgressiveChain, cfg: &EstimatorConfig, max_per_pair: usize) -> Result<ChainAnchors> {
    Ok(estimate_chain(chain, cfg, max_per_pair)?.anchors)
}

/// Loss values after one iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub iteration: usize,
    pub l_sup: f64,
    pub l_unsup: f64,
    pub lambda_w: f64,
    pub l_hil: f64,
    /// Unweighted anchor term.
    pub anchor: f64,
    /// `l_hil + μ · anchor`.
    pub total: f64,
    pub consistency: f64,
}

#[derive(Debug, Clone)]
pub struct OptimizeResult {
    pub params: ChainParams,
    pub hops: Vec<Homography>,
    pub bridges: Vec<Homography>,
    pub st: Homography,
    /// `bridges[n-1] ∘ hops[n-1] ∘ … ∘ hops[0]`.
    pub composed: Homography,
    pub trace: Vec<TracePoint>,
    pub consistency_residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// One parameter block: the hops, or the bridges followed by `st`.
#[derive(Debug, Clone)]
struct Eval {
    /// Loss part (`L_sup` for hops, weighted `L_unsup` for the rest).
    loss: f64,
    loss_grad: Vec<f64>,
    anchor: f64,
    anchor_grad: Vec<f64>,
}

fn pairs_of(x: &[f64]) -> Vec<[f64; 8]> {
    x.chunks_exact(8).map(|c| c.try_into().unwrap()).collect()
}

fn anchors_of(sets: &[&Correspondences], x: &[f64], ctx: &ChainContext, lcfg: &LossConfig, mu: f64) -> Result<(f64, Vec<f64>)> {
    let mut value = 0.0;
    let mut grad = vec![0.0; x.len()];
    if mu == 0.0 {
        return Ok((value, grad));
    }
    for (k, (set, o)) in sets.iter().zip(pairs_of(x)).enumerate() {
        let (v, g) = anchor_loss(&o, set, ctx.grid, lcfg)?;
        value += v;
        grad[8 * k..8 * k + 8].copy_from_slice(&g);
    }
    Ok((value, grad))
}

fn eval_hops(x: &[f64], ctx: &ChainContext, lcfg: &LossConfig, anchors: &ChainAnchors, mu: f64) -> Result<Eval> {
    let (terms, grad) = sup_block(&pairs_of(x), ctx, lcfg, true)?;
    let sets: Vec<&Correspondences> = anchors.hops.iter().collect();
    let (anchor, anchor_grad) = anchors_of(&sets, x, ctx, lcfg, mu)?;
    Ok(Eval {
        loss: terms.iter().sum(),
        loss_grad: grad,
        anchor,
        anchor_grad,
    })
}

fn eval_rest(x: &[f64], ctx: &ChainContext, lcfg: &LossConfig, anchors: &ChainAnchors, mu: f64) -> Result<Eval> {
    let p = pairs_of(x);
    let n = ctx.n();
    let (_, total, grad) = unsup_block(&p[..n], &p[n], ctx, lcfg, true)?;
    let sets: Vec<&Correspondences> = anchors.bridges.iter().chain(std::iter::once(&anchors.st)).collect();
    let (anchor, anchor_grad) = anchors_of(&sets, x, ctx, lcfg, mu)?;
    Ok(Eval {
        loss: total,
        loss_grad: grad,
        anchor,
        anchor_grad,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn combine(w: f64, a: &[f64], mu: f64, b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| w * x + mu * y).collect()
}

/// L-BFGS state of one block. Curvature pairs keep the loss and anchor
/// gradient differences apart so they can be reweighted when `λ_w` moves.
struct Block {
    x: Vec<f64>,
    eval: Eval,
    history: VecDeque<(Vec<f64>, Vec<f64>, Vec<f64>)>,
    done: bool,
}

impl Block {
    fn value(&self, w: f64, mu: f64) -> f64 {
        w * self.eval.loss + mu * self.eval.anchor
    }

    fn direction(&self, g: &[f64], w: f64, mu: f64) -> Vec<f64> {
        let pairs: Vec<(&Vec<f64>, Vec<f64>)> = self
            .history
            .iter()
            .map(|(s, yl, ya)| (s, combine(w, yl, mu, ya)))
            .filter(|(s, y)| dot(s, y) > 1e-300)
            .collect();
        let mut q = g.to_vec();
        let mut alpha = vec![0.0; pairs.len()];
        for (k, (s, y)) in pairs.iter().enumerate().rev() {
            let rho = 1.0 / dot(s, y);
            alpha[k] = rho * dot(s, &q);
            for (qi, yi) in q.iter_mut().zip(y) {
                *qi -= alpha[k] * yi;
            }
        }
        if let Some((s, y)) = pairs.last() {
            let gamma = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|v| *v *= gamma);
        }
        for (k, (s, y)) in pairs.iter().enumerate() {
            let rho = 1.0 / dot(s, y);
            let beta = rho * dot(y, &q);
            for (qi, si) in q.iter_mut().zip(s.iter()) {
                *qi += (alpha[k] - beta) * si;
            }
        }
        q.iter_mut().for_each(|v| *v = -*v);
        q
    }
}

type Accepted = Option<(Vec<f64>, Eval, f64)>;

/// Moves the bridges along the chord towards `H_st ∘ C_i⁻¹`, which zeroes
/// every unsupervised term and the identity-equation residual, halving the
/// step until the block value and (with `μ = 0`) the residual do not grow.
fn consistency_step(
    x: &[f64],
    f0: f64,
    residual: f64,
    ctx: &ChainContext,
    lcfg: &LossConfig,
    anchors: &ChainAnchors,
    mu: f64,
) -> Result<Accepted> {
    let n = ctx.n();
    let p = pairs_of(x);
    let st = ChainParams::homography(&p[n], ctx.grid)?;
    let mut carrier = Homography::identity();
    let mut target = x.to_vec();
    for (i, gt) in ctx.gts.iter().enumerate() {
        carrier = gt.compose(&carrier)?;
        let b = st.compose(&carrier.inverse()?)?;
        target[8 * i..8 * i + 8].copy_from_slice(&corner_offsets(&b, ctx.grid)?);
    }
    let mut alpha = 1.0;
    for _ in 0..MAX_HALVINGS {
        let trial: Vec<f64> = x.iter().zip(&target).map(|(a, b)| a + alpha * (b - a)).collect();
        if let Ok(ev) = eval_rest(&trial, ctx, lcfg, anchors, mu) {
            let f = ev.loss + mu * ev.anchor;
            let pairs = pairs_of(&trial);
            let r = ChainParams::homography(&pairs[n - 1], ctx.grid)
                .and_then(|last| consistency_residual(&st, &last, &ctx.gts));
            if let Ok(r) = r {
                if f < f0 && (mu > 0.0 || r <= residual) {
                    return Ok(Some((trial, ev, r)));
                }
            }
        }
        alpha *= 0.5;
    }
    Ok(None)
}

const MAX_HALVINGS: usize = 50;
const ARMIJO: f64 = 1e-4;

/// Minimizes `L_HIL + μ · anchors` over the corner offsets of every pair,
/// starting from `init`.
///
/// The hop parameters only enter `L_sup` and the bridges and `st` only enter
/// `L_unsup`, so each block keeps its own L-BFGS history and line search.
/// `λ_w` is re-evaluated once per iteration and held fixed within it. With
/// `μ = 0`, steps that would increase the identity-equation residual are
/// shortened until they do not.
pub fn direct_optimize(
    ctx: &ChainContext,
    init: &ChainParams,
    anchors: Option<&ChainAnchors>,
    ocfg: &OptimizerConfig,
    lcfg: &LossConfig,
) -> Result<OptimizeResult> {
    ocfg.validate()?;
    lcfg.validate()?;
    let n = ctx.n();
    if init.hops.len() != n || init.bridges.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} hops and {} bridges for a chain with n = {n}",
            init.hops.len(),
            init.bridges.len()
        )));
    }
    let flat = init.to_vec();
    if flat.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidConfig("initial offsets must be finite".into()));
    }
    let empty = ChainAnchors::empty(n);
    let anchors = anchors.unwrap_or(&empty);
    if anchors.hops.len() != n || anchors.bridges.len() != n {
        return Err(Error::ShapeMismatch("anchor sets do not match the chain length".into()));
    }
    let mu = ocfg.mu;

    let residual_of = |x: &[f64]| -> Result<f64> {
        let p = pairs_of(x);
        let st = ChainParams::homography(&p[n], ctx.grid)?;
        let last = ChainParams::homography(&p[n - 1], ctx.grid)?;
        consistency_residual(&st, &last, &ctx.gts)
    };

    let x_hops = flat[..8 * n].to_vec();
    let x_rest = flat[8 * n..].to_vec();
    let mut hops = Block {
        eval: eval_hops(&x_hops, ctx, lcfg, anchors, mu)?,
        x: x_hops,
        history: VecDeque::new(),
        done: false,
    };
    let mut rest = Block {
        eval: eval_rest(&x_rest, ctx, lcfg, anchors, mu)?,
        x: x_rest,
        history: VecDeque::new(),
        done: false,
    };
    let mut residual = residual_of(&rest.x)?;

    let lambda_w_of = |hops: &Block, rest: &Block| match lcfg.lambda_w {
        LambdaW::Auto => rest.eval.loss / hops.eval.loss.max(LAMBDA_W_GUARD),
        LambdaW::Fixed(v) => v,
    };
    let point = |iteration: usize, hops: &Block, rest: &Block, residual: f64| {
        let w = lambda_w_of(hops, rest);
        let l_hil = rest.eval.loss + w * hops.eval.loss;
        let anchor = hops.eval.anchor + rest.eval.anchor;
        TracePoint {
            iteration,
            l_sup: hops.eval.loss,
            l_unsup: rest.eval.loss,
            lambda_w: w,
            l_hil,
            anchor,
            total: l_hil + mu * anchor,
            consistency: residual,
        }
    };

    let mut trace = vec![point(0, &hops, &rest, residual)];
    let initial = trace[0].total;
    let mut iterations = 0;
    let mut converged = false;

    for it in 1..=ocfg.iterations {
        let w = lambda_w_of(&hops, &rest);
        let mut moved = 0.0f64;
        for (which, block) in [(0, &mut hops), (1, &mut rest)] {
            if block.done {
                continue;
            }
            let lw = if which == 0 { w } else { 1.0 };
            let g = combine(lw, &block.eval.loss_grad, mu, &block.eval.anchor_grad);
            let gmax = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if gmax == 0.0 {
                block.done = true;
                continue;
            }
            let mut d = block.direction(&g, lw, mu);
            let mut slope = dot(&g, &d);
            if block.history.is_empty() || !(slope < 0.0) {
                block.history.clear();
                d = g.iter().map(|v| -v * ocfg.step_size / gmax).collect();
                slope = dot(&g, &d);
            }
            let f0 = block.value(lw, mu);
            let mut alpha = 1.0;
            let mut accepted = None;
            for _ in 0..MAX_HALVINGS {
                let trial: Vec<f64> = block.x.iter().zip(&d).map(|(x, d)| x + alpha * d).collect();
                let ev = if which == 0 {
                    eval_hops(&trial, ctx, lcfg, anchors, mu)
                } else {
                    eval_rest(&trial, ctx, lcfg, anchors, mu)
                };
                match ev {
                    Ok(ev) => {
                        let f = lw * ev.loss + mu * ev.anchor;
                        let r = if which == 1 { residual_of(&trial).ok() } else { Some(residual) };
                        let consistent = match r {
                            Some(r) => mu > 0.0 || which == 0 || r <= residual,
                            None => false,
                        };
                        if f < f0 && f <= f0 + ARMIJO * alpha * slope && consistent {
                            accepted = Some((trial, ev, r.unwrap_or(residual)));
                            break;
                        }
                    }
                    Err(Error::DegeneratePoint { .. })
                    | Err(Error::Singular { .. })
                    | Err(Error::SingularResult { .. })
                    | Err(Error::GridDegenerate { .. }) => {}
                    Err(e) => return Err(e),
                }
                alpha *= 0.5;
            }
            if accepted.is_none() && which == 1 {
                accepted = consistency_step(&block.x, f0, residual, ctx, lcfg, anchors, mu)?;
                if accepted.is_some() {
                    block.history.clear();
                }
            }
            let Some((trial, ev, r)) = accepted else {
                block.done = true;
                continue;
            };
            let s: Vec<f64> = trial.iter().zip(&block.x).map(|(a, b)| a - b).collect();
            let step = s.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            moved = moved.max(step);
            let yl: Vec<f64> = ev.loss_grad.iter().zip(&block.eval.loss_grad).map(|(a, b)| a - b).collect();
            let ya: Vec<f64> = ev.anchor_grad.iter().zip(&block.eval.anchor_grad).map(|(a, b)| a - b).collect();
            block.history.push_back((s, yl, ya));
            while block.history.len() > ocfg.memory {
                block.history.pop_front();
            }
            block.x = trial;
            block.eval = ev;
            if which == 1 {
                residual = r;
            }
            if step <= ocfg.tolerance {
                let chord = if which == 1 {
                    consistency_step(&block.x, block.value(lw, mu), residual, ctx, lcfg, anchors, mu)?
                } else {
                    None
                };
                match chord {
                    Some((x, ev, r)) => {
                        let step = x.iter().zip(&block.x).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
                        moved = moved.max(step);
                        block.history.clear();
                        block.x = x;
                        block.eval = ev;
                        residual = r;
                    }
                    None => block.done = true,
                }
            }
        }
        iterations = it;
        let p = point(it, &hops, &rest, residual);
        if initial > 0.0 && p.total > 10.0 * initial {
            return Err(Error::Diverged {
                loss: p.total,
                initial,
            });
        }
        trace.push(p);
        if (hops.done && rest.done) || moved <= ocfg.tolerance {
            converged = true;
            break;
        }
    }

    let mut all = hops.x.clone();
    all.extend_from_slice(&rest.x);
    let params = ChainParams::from_slice(&all, n)?;
    let hop_h = params.hop_homographies(ctx.grid)?;
    let bridges = params.bridge_homographies(ctx.grid)?;
    let st = params.st_homography(ctx.grid)?;
    let composed = bridges[n - 1].compose(&compose_chain(&hop_h)?)?;
    Ok(OptimizeResult {
        consistency_residual: consistency_residual(&st, &bridges[n - 1], &ctx.gts)?,
        params,
        hops: hop_h,
        bridges,
        st,
        composed,
        trace,
        iterations,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::MeshGrid;
    use crate::synthesis::{build_chain, procedural_texture, ChainConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64) -> (ProgressiveChain, ChainContext, ChainParams) {
        let cfg = ChainConfig {
            crop_width: 96,
            crop_height: 64,
            resize_width: 32,
            resize_height: 32,
            min_perturbation: 2.0,
            max_perturbation: 8.0,
            ..ChainConfig::default()
        };
        let img = procedural_texture(128, 96, seed).unwrap();
        let chain = build_chain(&img, None, &cfg, seed).unwrap();
        let ctx = ChainContext::new(&chain.hops, MeshGrid::new(96, 64).unwrap(), MeshGrid::new(32, 32).unwrap()).unwrap();
        let gt = ChainParams::from_homographies(
            &chain.hops,
            &chain.bridge_truths().unwrap().unwrap(),
            &chain.h_st.unwrap(),
            ctx.grid,
        )
        .unwrap();
        (chain, ctx, gt)
    }

    fn noisy(p: &ChainParams, amp: f64, seed: u64) -> ChainParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = p.to_vec().iter().map(|x| x + rng.random_range(-amp..=amp)).collect();
        ChainParams::from_slice(&v, p.hops.len()).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(OptimizerConfig::default().validate().is_ok());
        assert!(OptimizerConfig { iterations: 0, ..Default::default() }.validate().is_err());
        assert!(OptimizerConfig { step_size: 0.0, ..Default::default() }.validate().is_err());
        assert!(OptimizerConfig { mu: -1.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn ground_truth_is_stationary() {
        let (_, ctx, gt) = setup(1);
        let ocfg = OptimizerConfig { mu: 0.0, ..Default::default() };
        let r = direct_optimize(&ctx, &gt, None, &ocfg, &LossConfig::default()).unwrap();
        let diff = r.params.to_vec().iter().zip(gt.to_vec()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(diff < 1e-8, "{diff}");
    }

    #[test]
    fn noisy_start_restores_consistency() {
        let (_, ctx, gt) = setup(2);
        let init = noisy(&gt, 3.0, 7);
        let ocfg = OptimizerConfig { mu: 0.0, ..Default::default() };
        let r = direct_optimize(&ctx, &init, None, &ocfg, &LossConfig::default()).unwrap();
        assert!(r.consistency_residual < 1e-6, "{} after {}", r.consistency_residual, r.iterations);
        for w in r.trace.windows(2) {
            assert!(w[1].consistency <= w[0].consistency);
        }
    }

    #[test]
    fn rejects_mismatched_init() {
        let (_, ctx, gt) = setup(3);
        let mut bad = gt.clone();
        bad.hops.pop();
        assert!(matches!(
            direct_optimize(&ctx, &bad, None, &OptimizerConfig::default(), &LossConfig::default()),
            Err(Error::ShapeMismatch(_))
        ));
    }
}
