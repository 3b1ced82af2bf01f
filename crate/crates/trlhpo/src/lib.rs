//! Layer-by-layer CNN construction driven by a transformer actor-critic.
//!
//! An actor proposes one layer at a time from a fixed hyper-parameter
//! grid; each partial model is trained and scored, the accuracy delta
//! becomes that layer's reward, and attention weights from the actor are
//! logged so the contribution of each layer can be audited after a run.

pub mod agent;
pub mod env;
pub mod eval;
pub mod run;
pub mod space;
pub mod tensor;
pub mod util;
