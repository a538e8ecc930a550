use serde::{Deserialize, Serialize};

use super::{estimate, Diagnostics, EstimatorConfig};
use crate::error::Result;
use crate::homography::{compose_chain, Homography};
use crate::synthesis::ProgressiveChain;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProgressiveOptions {
    /// Use the chain's ground-truth hops instead of estimating them.
    pub substitute_gt_hops: bool,
    /// Use this bridge `I_sn -> I_t` instead of estimating it.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bridge: Option<Homography>,
}

#[derive(Debug, Clone)]
pub struct ProgressiveResult {
    /// `bridge ∘ hops[n-1] ∘ … ∘ hops[0]`.
    pub h_st: Homography,
    pub hops: Vec<Homography>,
    pub bridge: Homography,
    /// Diagnostics of every estimated pair, hops first, then the bridge.
    pub diagnostics: Vec<Diagnostics>,
}

/// Estimates every hop and the bridge of `chain` and composes them.
pub fn progressive_estimate(
    chain: &ProgressiveChain,
    cfg: &EstimatorConfig,
    opts: &ProgressiveOptions,
) -> Result<ProgressiveResult> {
    let mut diagnostics = Vec::new();
    let hops = if opts.substitute_gt_hops {
        chain.hops.clone()
    } else {
        chain
            .images
            .windows(2)
            .map(|w| {
                let e = estimate(&w[0], &w[1], cfg)?;
                diagnostics.push(e.diagnostics);
                Ok(e.homography)
            })
            .collect::<Result<Vec<_>>>()?
    };
    let bridge = match opts.bridge {
        Some(b) => b,
        None => {
            let e = estimate(chain.last(), &chain.target, cfg)?;
            diagnostics.push(e.diagnostics);
            e.homography
        }
    };
    let h_st = if hops.is_empty() {
        bridge
    } else {
        bridge.compose(&compose_chain(&hops)?)?
    };
    Ok(ProgressiveResult {
        h_st,
        hops,
        bridge,
        diagnostics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthesis::{build_chain, procedural_texture, ChainConfig};

    fn chain(n: usize) -> ProgressiveChain {
        let cfg = ChainConfig {
            n,
            crop_width: 240,
            crop_height: 160,
            resize_width: 128,
            resize_height: 128,
            ..ChainConfig::default()
        };
        let img = procedural_texture(320, 240, 11).unwrap();
        build_chain(&img, None, &cfg, 3).unwrap()
    }

    fn small_cfg() -> EstimatorConfig {
        EstimatorConfig {
            resize_width: 128,
            resize_height: 128,
            levels: 3,
            cells: vec![8, 4, 2],
            ..EstimatorConfig::default()
        }
    }

    #[test]
    fn empty_chain_is_a_single_estimate() {
        let c = chain(0);
        let cfg = small_cfg();
        let p = progressive_estimate(&c, &cfg, &ProgressiveOptions::default()).unwrap();
        let d = estimate(c.source(), &c.target, &cfg).unwrap();
        assert_eq!(p.h_st, d.homography);
        assert!(p.hops.is_empty());
    }

    #[test]
    fn substituted_chain_is_exact_product() {
        let c = chain(2);
        let bridge = c.bridge_truths().unwrap().unwrap()[1];
        let opts = ProgressiveOptions {
            substitute_gt_hops: true,
            bridge: Some(bridge),
        };
        let p = progressive_estimate(&c, &small_cfg(), &opts).unwrap();
        let expected = bridge.compose(&compose_chain(&c.hops).unwrap()).unwrap();
        assert_eq!(p.h_st, expected);
        assert!(p.h_st.max_abs_diff(&c.h_st.unwrap()) < 1e-12);
    }

    #[test]
    fn substituted_hops_leave_only_bridge_error() {
        let c = chain(2);
        let cfg = small_cfg();
        let opts = ProgressiveOptions {
            substitute_gt_hops: true,
            bridge: None,
        };
        let p = progressive_estimate(&c, &cfg, &opts).unwrap();
        let b = estimate(c.last(), &c.target, &cfg).unwrap();
        assert_eq!(p.bridge, b.homography);
        assert_eq!(p.diagnostics.len(), 1);
    }
}
