//! On-disk dataset: `manifest.json`, `scenes/NNNN.json`, `images/NNNN.ppm`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tensor::mix;

use super::generate::{generate_scene, SynthConfig};
use super::vocabulary;
use crate::error::{Error, Result};
use crate::image::{Image, SIZE};
use crate::io::{read_json, write_atomic, write_json};
use crate::scene::SceneGraph;
use crate::vocab::Vocabulary;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub vocabulary: Vocabulary,
    pub config: SynthConfig,
    pub count: usize,
    pub seed: u64,
}

/// A loaded dataset: every scene graph with its rendered image.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    pub scenes: Vec<SceneGraph>,
    pub images: Vec<Image>,
}

/// Seed of scene `i` in a dataset generated with `seed`.
pub fn scene_seed(seed: u64, i: usize) -> u64 {
    mix(seed ^ mix(i as u64))
}

fn scene_path(dir: &Path, i: usize) -> PathBuf {
    dir.join("scenes").join(format!("{i:04}.json"))
}

fn image_path(dir: &Path, i: usize) -> PathBuf {
    dir.join("images").join(format!("{i:04}.ppm"))
}

impl Dataset {
    /// Generates `count` scenes in memory.
    pub fn generate(count: usize, seed: u64, config: SynthConfig) -> Result<Self> {
        let mut scenes = Vec::with_capacity(count);
        let mut images = Vec::with_capacity(count);
        for i in 0..count {
            let s = generate_scene(scene_seed(seed, i), &config)?;
            scenes.push(s.graph);
            images.push(s.image);
        }
        Ok(Self {
            manifest: Manifest {
                vocabulary: vocabulary(),
                config,
                count,
                seed,
            },
            scenes,
            images,
        })
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        for (i, (s, img)) in self.scenes.iter().zip(&self.images).enumerate() {
            let mut text = s.to_json();
            text.push('\n');
            write_atomic(&scene_path(dir, i), text.as_bytes())?;
            write_atomic(&image_path(dir, i), &img.to_ppm())?;
        }
        write_json(&dir.join("manifest.json"), &self.manifest)
    }

    /// Loads and validates a dataset directory.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = read_json(&dir.join("manifest.json"))?;
        let mut scenes = Vec::with_capacity(manifest.count);
        let mut images = Vec::with_capacity(manifest.count);
        for i in 0..manifest.count {
            let path = scene_path(dir, i);
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let graph = SceneGraph::parse(&bytes, &manifest.vocabulary)?;
            if !graph.has_all_boxes() {
                return Err(Error::Constraint(format!("{}: every node needs a bbox", path.display())));
            }
            let img = Image::read_ppm(&image_path(dir, i))?;
            if (img.width, img.height) != (SIZE, SIZE) {
                return Err(Error::Image {
                    path: image_path(dir, i),
                    reason: format!("expected {SIZE}x{SIZE}, found {}x{}", img.width, img.height),
                });
            }
            scenes.push(graph);
            images.push(img);
        }
        Ok(Self {
            manifest,
            scenes,
            images,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = Dataset::generate(5, 11, SynthConfig::default()).unwrap();
        d.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back.manifest, d.manifest);
        assert_eq!(back.scenes, d.scenes);
        assert_eq!(back.images, d.images);
    }

    #[test]
    fn missing_manifest_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(Dataset::load(dir.path()), Err(Error::Io { .. })));
    }
}
