//! Deformable 2-D image registration driven by Gaussian control primitives.
//!
//! Sparse control nodes, each carrying a trainable center, displacement and
//! radius, are blended over their K nearest neighbours into a dense
//! displacement field. The field warps a coarsely aligned moving image onto a
//! fixed image, and node parameters are optimized with Adam against an
//! intensity (NCC) plus keypoint-consistency loss whose gradients are derived
//! by hand.
//!
//! Pipeline stages map onto modules:
//!
//! * [`imagecore`]: raster container, IO, blur, resize, bilinear sampling
//! * [`coarse`]: global affine / homography fitting from keypoint matches
//! * [`primitives`]: control nodes, radius parametrization, node initialization
//! * [`field`]: KNN index, softmax-Gaussian blending, backward warping
//! * [`loss`]: NCC and keypoint terms with the analytic reverse pass
//! * [`optim`]: Adam and the registration loop
//! * [`eval`]: TRE and AUC metrics
//! * [`synth`]: synthetic vessel images with exact ground truth

pub mod coarse;
pub mod config;
pub mod error;
pub mod eval;
pub mod field;
pub mod geom;
pub mod gradcheck;
pub mod imagecore;
pub mod loss;
pub mod optim;
pub mod pipeline;
pub mod primitives;
pub mod synth;
pub mod table;

pub use coarse::{GlobalTransform, Match, MatchSet, RansacConfig, TransformKind};
pub use config::RunConfig;
pub use error::{GpoError, Result};
pub use eval::{AucCurve, LandmarkPairs, TreStats};
pub use field::{DisplacementField, NeighborIndex};
pub use geom::{PixelCoord, Vec2};
pub use imagecore::Image;
pub use loss::{LossReport, LossWeights, NodeGrads};
pub use optim::{AdamState, OptimConfig, RegistrationResult};
pub use primitives::{ControlNode, NodeSet, RadiusConfig};
pub use synth::{SynthConfig, SynthPair};
