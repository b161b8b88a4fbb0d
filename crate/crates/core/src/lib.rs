//! Constraint-aware architecture search over feature dimensions.
//!
//! A wide dense SuperNet is pre-trained, then a data-aware select gate learns a
//! per-layer distribution over which hidden dimensions to keep under a retain
//! budget. Gate probabilities are weighted by a four-part importance score
//! (static, dynamic, feature, correlation). Deployment sub-networks are carved
//! out of the SuperNet by slicing inherited weights.
//!
//! Module map:
//! - [`diffcore`]: tensors, reverse-mode tape, AdamW, one-cycle schedule, RNG streams.
//! - [`archspace`]: SuperNet, masks, SubNet extraction, parameter/FLOP accounting.
//! - [`scoring`]: importance state and combined score.
//! - [`gate`]: the select gate and exact-k sampling.
//! - [`trainer`]: the three training stages and the composite loss.
//! - [`evalbench`]: baselines, sweeps, ablations, sensitivity.
//! - [`harness`]: config, datasets, checkpoints, metrics and the CLI.

pub mod archspace;
pub mod diffcore;
pub mod error;
pub mod evalbench;
pub mod gate;
pub mod harness;
pub mod scoring;
pub mod trainer;

pub use error::{Error, Result};
