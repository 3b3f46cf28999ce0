//! Diffusion tensor imaging toolkit: conventional tensor fitting, a residual
//! convolutional encoder-decoder that maps a handful of DWIs straight to
//! FA/MD/colour maps, FACT tractography, synthetic phantoms and evaluation.

pub mod dti;
pub mod net;
pub mod error;
pub mod experiments;
pub mod io;
pub mod metrics;
pub mod phantom;
pub mod tractography;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{ColorMap, Dims, DwiVolume, ScalarMap, Spacing};
pub use dti::{DiffusionTensor, DtiMaps, EigenField, GradientScheme, Measurement, TensorField};
pub use experiments::{CohortConfig, ComparisonReport, ExperimentConfig, LesionReport, MotionReport};
pub use io::{Semantics, StreamlineFile, VolumeFile};
pub use metrics::{EvalReport, MapScores, SweepRow};
pub use net::{ArchitectureSpec, Model, TargetKind, TrainConfig, TrainReport, TrainedModel};
pub use phantom::{Phantom, PhantomSpec};
pub use tractography::{DirectionField, Streamline, TrackParams};
