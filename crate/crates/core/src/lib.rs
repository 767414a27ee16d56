//! Core algorithms for LoRA-enhanced distillation of classifier-free guided
//! diffusion models.
//!
//! A teacher denoiser produces the guided noise estimate with two network
//! evaluations per step (conditional and unconditional). A student that shares
//! the teacher's frozen base weights learns, through low-rank adapters only, to
//! produce the same estimate with a single evaluation.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, timing and the
//! command-line front end live in the `guided-lora` companion crate.
#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod datagen;
pub mod denoiser;
pub mod diffusion;
pub mod distill;
mod error;
pub mod eval;
pub mod lora;
pub mod memacct;
pub mod numerics;

pub use error::{Error, Result};

/// Monotonic time source, in seconds. The core crate never reads the system
/// clock itself; std callers pass a real one in.
pub trait Clock {
    fn now_s(&self) -> f64;
}

/// A clock that never advances.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoClock;

impl Clock for NoClock {
    fn now_s(&self) -> f64 {
        0.0
    }
}
