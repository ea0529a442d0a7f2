//! Generates the 512-scene shapes dataset and trains the full model with the
//! desk-scale settings in `configs/desk.json`.
//!
//! `cargo run --release --example train_shapes -- [steps] [out.ckpt]`

use std::path::PathBuf;
use std::time::Instant;

use scenecomp::synth::{vocabulary, Dataset, SynthConfig};
use scenecomp::trainer::{train, Checkpoint, TrainConfig};

fn main() -> scenecomp::Result<()> {
    let mut config: TrainConfig =
        serde_json::from_str(include_str!("../../../configs/desk.json")).expect("configs/desk.json parses");
    let mut args = std::env::args().skip(1);
    if let Some(s) = args.next() {
        config.steps = s.parse().expect("steps");
    }
    let out = PathBuf::from(args.next().unwrap_or_else(|| "shapes.ckpt".into()));

    let data = Dataset::generate(512, 0, SynthConfig::default())?;
    let mut ck = Checkpoint::init(config, vocabulary())?;
    let start = Instant::now();
    train(&mut ck, &data, std::env::temp_dir().as_path(), |r| {
        if r.step % 50 == 0 {
            println!(
                "step {:5}  total {:.4}  diffusion {:.4}  kl {:.4}  layout {:.4}  ({:.1}s)",
                r.step,
                r.total,
                r.diffusion,
                r.union,
                r.layout,
                start.elapsed().as_secs_f64()
            );
        }
    })?;
    ck.save(&out)?;
    println!("saved {} after {:.1}s", out.display(), start.elapsed().as_secs_f64());
    Ok(())
}
