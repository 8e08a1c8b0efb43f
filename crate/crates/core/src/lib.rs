//! Latent modality structure regularizers for two-tower contrastive
//! learning, evaluated at desk scale on synthetic paired data, together with
//! an exact discrete oracle for the information-gap bound on perfectly
//! aligned features.

pub mod autodiff;
pub mod cli;
pub(crate) mod binio;
pub mod error;
pub mod infogap;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod synthdata;

pub use error::{Error, Result};
