//! Scene-graph-conditioned image generation at desk scale.
//!
//! The pipeline turns a [`scene::SceneGraph`] into textual node, edge and
//! attribute embeddings ([`embed`]), encodes them with a triplet-GCN
//! variational autoencoder into per-object latents that decode to boxes and
//! semantic vectors ([`slvae`]), and generates a 16x16 RGB image with a
//! transformer denoiser whose compositional masked attention keeps each
//! object's visual tokens tied to its own embedding ([`cmadiff`]). The
//! layered sampler ([`mls`]) keeps one latent canvas per object so that graph
//! edits leave unrelated regions untouched. [`synth`] generates the shapes
//! dataset and the blob oracle used for evaluation; [`trainer`] runs joint
//! training and checkpointing.

pub mod audit;
pub mod cli;
pub mod cmadiff;
pub mod embed;
pub mod error;
pub mod image;
pub mod io;
pub mod mls;
pub mod model;
pub mod nn;
pub mod scene;
pub mod slvae;
pub mod synth;
pub mod trainer;
pub mod vocab;

pub use error::{Error, Result};
