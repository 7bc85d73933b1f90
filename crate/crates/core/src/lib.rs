//! Desk-scale lab for making image+text training pairs unlearnable.
//!
//! Everything numeric lives here: a tiny vision-language surrogate with exact
//! reverse-mode gradients, the pixel/trigger optimizers, the attention-binding
//! losses, a fine-tuning attack harness, and the diagnostic metrics. The crate
//! is `no_std` + `alloc` so the algorithms stay portable; file formats, the
//! CLI, and anything that touches a filesystem live in the companion crate.
//!
//! Layout mirrors the pipeline:
//!
//! ```text
//! tokenizer ─┐
//! processor ─┼─ model (traced forward, gradients, sgd) ─┬─ perturb (PGD on pixels)
//! rng/tensor ┘                                          ├─ trigger (HotFlip + verify)
//!                                                       ├─ binding (attention losses)
//!                                                       ├─ protect (outer loop)
//!                                                       ├─ attack  (fine-tune harness)
//!                                                       └─ metrics / verify (oracles)
//! ```

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

#[cfg(any(test, feature = "std"))]
extern crate std;

pub mod attack;
pub mod binding;
pub mod metrics;
pub mod model;
pub mod perturb;
pub mod processor;
pub mod protect;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod tokenizer;
pub mod trigger;
pub mod verify;
