//! Synthetic colored-shape scenes with relations, a bit-exact renderer and
//! the blob oracle used for evaluation.

pub mod blobs;
pub mod dataset;
pub mod generate;
pub mod metrics;
pub mod render;

pub use blobs::{detect_blobs, Blob};
pub use dataset::{Dataset, Manifest};
pub use generate::{generate_scene, RenderedScene, SynthConfig};
pub use metrics::{eval_metrics, Metrics};
pub use render::{render, PixelBox, Shape, SceneSpec};

use crate::vocab::Vocabulary;

pub const CATEGORIES: [&str; 3] = ["circle", "square", "triangle"];
pub const COLORS: [&str; 3] = ["red", "green", "blue"];
pub const PREDICATES: [&str; 5] = ["left of", "above", "inside", "same color as", "touching"];

pub const BACKGROUND: [u8; 3] = [128, 128, 128];
pub const PALETTE: [[u8; 3]; 3] = [[255, 0, 0], [0, 255, 0], [0, 0, 255]];

/// Vocabulary of the shapes dataset.
pub fn vocabulary() -> Vocabulary {
    Vocabulary {
        categories: CATEGORIES.iter().map(|s| s.to_string()).collect(),
        predicates: PREDICATES.iter().map(|s| s.to_string()).collect(),
        attributes: COLORS.iter().map(|s| s.to_string()).collect(),
    }
}

/// Index of the color word among a node's attributes, if any.
pub fn color_of(attributes: &[String]) -> Option<usize> {
    attributes.iter().find_map(|a| COLORS.iter().position(|c| c == a))
}
