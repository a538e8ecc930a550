//! Progressive large-baseline homography estimation.
//!
//! The crate is organised bottom-up:
//!
//! * [`homography`]: projective algebra and the normalized DLT,
//! * [`flow`]: dense homography flows over meshgrids,
//! * [`imaging`]: images, warping with validity masks, pyramids,
//! * [`synthesis`]: sampling of intermediate homographies and progressive chains,
//! * [`correlation`]: hand-crafted features and global/local correlation volumes,
//! * [`objective`]: supervised, identity and photometric losses with gradients,
//! * [`estimator`]: coarse-to-fine correlation estimator, progressive estimation
//!   and the direct identity-loss optimizer,
//! * [`evaluation`]: point matching error, robustness curves and reports,
//! * [`manifest`]: dataset manifest and chain file formats.

pub mod error;
pub mod flow;
pub mod homography;
pub mod imaging;
pub mod synthesis;
pub mod correlation;
pub mod objective;
pub mod estimator;
pub mod evaluation;
pub mod manifest;

pub use error::{Error, Result};
pub use flow::{HomographyFlow, MeshGrid};
pub use homography::{Correspondence, Correspondences, Homography};
pub use imaging::{Image, ValidityMask};
pub use nalgebra::Point2;
pub use evaluation::{Category, EvalRecord, RobustnessCurve};
pub use estimator::{Estimate, EstimatorConfig, OptimizerConfig};
pub use manifest::{ChainFile, DatasetRecord};
pub use objective::{LambdaW, LossConfig, LossReport};
pub use synthesis::{ChainConfig, ProgressiveChain};
