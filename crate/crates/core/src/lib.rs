//! Score-to-audio alignment, note labeling and note-prediction models.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod align;
pub mod audio;
pub mod dataset;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod models;
pub mod score;
pub mod synth;

pub use align::{AlignConfig, Alignment, WarpPath};
pub use audio::{AudioBuffer, SampleFormat};
pub use dataset::{LabelRecord, LabelSet, LabelVector, Segment, SegmentSpec};
pub use dsp::{FeatureKind, FeatureMatrix};
pub use error::{Error, Result};
pub use eval::{EvalReport, Mirex, Subset};
pub use experiments::{LearningConfig, SyntheticSpec, TempoWarp};
pub use models::{ConvShape, Examples, Model, ModelKind, TrainConfig, TrainReport};
pub use score::Score;
pub use synth::SynthConfig;
