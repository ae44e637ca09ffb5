//! Joint short- and long-term feature learning for online multi-object
//! tracking, with a synthetic benchmark and CLEAR-MOT/IDF1 evaluation.

pub mod assoc;
pub mod config;
pub mod embed;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod matrix;
pub mod moteval;
pub mod motion;
pub mod msfl;
pub mod pipeline;
pub mod ssfl;
pub mod synth;
pub mod tracker;
pub mod train;
pub mod verify;

pub use config::{Config, TrainConfig};
pub use assoc::{hungarian, match_with_threshold, Matching};
pub use embed::{Embedder, FrameFeatures, LearnedEmbedder, OracleEmbedder};
pub use error::{Error, Result};
pub use geometry::{iou, BBox, Detection};
pub use matrix::Matrix;
pub use moteval::{clearmot, idf1, EvalReport, MotRecord};
pub use msfl::{CropStack, Msfl, MsflConfig, TrackletBanks};
pub use ssfl::{FeaturePyramid, Ssfl, SsflConfig};
pub use synth::{GroundTruth, ScenarioConfig};
pub use tracker::{FrameInput, FrameResult, Tracker, TrackerConfig};
