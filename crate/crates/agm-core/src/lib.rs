//! Attribution-guided masking (AGM) for cross-domain text classification.
//!
//! A desk-scale experiment framework: a from-scratch transformer encoder with
//! classification and masked-language-model heads, gradient-based token
//! attribution (Grad×Input and Integrated Gradients), the AGM training
//! objective with spurious-token detection and counterfactual generation,
//! five domain-generalization baselines (ERM, DANN, IRM, GroupDRO, Fish),
//! synthetic domain-shift corpora with planted spurious tokens, a strict
//! leave-one-out zero-shot evaluation harness, and the Attribution Drift
//! Score diagnostic.

pub mod ads;
pub mod agm;
pub mod attribution;
pub mod autograd;
pub mod baselines;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
