//! Learned kinematic state spaces for deformable meshes.
//!
//! The crate trains a conditional VAE whose decoder maps a low-dimensional
//! latent state to a deformed mesh, compresses that latent with an active
//! subspace, and integrates Euler–Lagrange dynamics on the resulting chart.

pub mod autodiff;
pub mod dynamics;
pub mod error;
pub mod geometry;
pub mod ik;
pub mod io_util;
pub mod model;
pub mod reduction;
pub mod synthdata;

pub use error::{Error, Result};
