//! Probabilistic index maps (PIM).
//!
//! A PIM separates the structure of a signal from its measurements: every
//! location carries a discrete index into a palette of Gaussian measurement
//! models, the palette is local to one signal, and the distribution over
//! indices at each location is shared by a whole collection. Re-colouring,
//! illumination changes or band-wise gain changes only move the palette, so
//! the learned index distributions are insensitive to them.
//!
//! Modules:
//! - [`pim`]: the basic model and its EM learner.
//! - [`transform`] and [`tmpim`]: cyclic shifts and the transformed mixture of
//!   PIMs used for unsupervised clustering.
//! - [`bgsub`]: single-frame background subtraction with a trained PIM.
//! - [`hmm`]: a PIM-observation hidden Markov model for spectrogram sequences.
//! - [`io`] and [`synth`]: file formats, model persistence and planted data.

// Negated comparisons such as `!(x > 0.0)` are used on purpose to reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bgsub;
pub mod cluster;
pub mod config;
pub mod error;
pub mod grid;
pub mod hmm;
pub mod io;
pub mod math;
pub mod palette;
pub mod pim;
pub mod synth;
pub mod tmpim;
pub mod transform;

pub use config::EmConfig;
pub use error::{PimError, Result};
pub use grid::{CategoricalGrid, EntryStatImage, IndexPrior, Responsibilities, SignalGrid};
pub use palette::{log_entry_likelihood, m_step_palette, Palette, PaletteEntry};
pub use pim::{
    e_step, exact_negative_log_likelihood, fit_pim, fit_pim_from, free_energy, harden_prior,
    infer_palette, m_step_prior, PaletteFit, PimInit, PimModel,
};
