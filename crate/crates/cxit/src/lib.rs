//! Soft context compression over frozen hidden states.
//!
//! Given per-layer, per-token hidden states from a frozen encoder, the
//! pipeline compresses a length-`N` sequence into `K ≈ N/r` continuous
//! slot vectors in three stages:
//!
//! 1. **depth** — a learned gate mixes each token's states across layers
//!    into a single *token anchor*;
//! 2. **width** — token anchors are routed to compression slots through an
//!    entropy-regularized optimal-transport plan, solved segment-by-segment
//!    with Sinkhorn iterations;
//! 3. **slots** — each slot aggregates the anchors assigned to it and a
//!    small MLP aligns the result with the consumer's input space.
//!
//! The crate also ships a deterministic synthetic encoder and retrieval
//! task ([`states`]), a trainer with hand-rolled reverse-mode gradients
//! through the unrolled solver ([`train`]), allocation diagnostics
//! ([`diag`]), and the run configuration shared with the CLI ([`config`]).

pub mod config;
pub mod depth;
pub mod diag;
pub mod numerics;
pub mod slots;
pub mod states;
pub mod tape;
pub mod train;
pub mod width;

pub use numerics::{Matrix, Rng};
pub use states::HiddenStates;
