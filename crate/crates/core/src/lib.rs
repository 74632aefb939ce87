//! Training-free test-time adaptation for open-vocabulary detectors.
//!
//! Category text embeddings are refined online by a one-step evolutionary
//! search: perturb, score by visual alignment, keep what beats the parent,
//! fuse, and accumulate. The crate also ships a seeded domain-shift
//! simulator, a JSON Lines snapshot format for replaying exported detector
//! output, detection metrics, and an ablation harness.
//!
//! Runnable walkthroughs live in `examples/`; the `semevo` binary wraps the
//! same workflows behind subcommands.

pub mod detector;
pub mod engine;
pub mod error;
pub mod eval;
pub mod io;
pub mod memory;
pub mod oracle;
pub mod rng;
pub mod synthetic;
pub mod vecmath;
pub mod workflow;

pub use detector::{ActivationSpace, BBox, Candidate, GroundTruth, Hyperparams, Proposal, Snapshot};
pub use engine::{AdaptState, Detection, Engine, GlobalTextBank, ImageOutcome, ImageTrace};
pub use error::{Error, Result};
pub use memory::{AnchorMode, CategoryMemoryBank, MemoryAction};
pub use rng::{Purpose, SeedTree, Substream};
pub use vecmath::Embedding;
