//! Samples scenes of a dataset with a trained checkpoint and scores them
//! with the blob oracle.
//!
//! `cargo run --release --example evaluate -- CKPT [scenes] [steps]`

use std::time::Instant;

use scenecomp::cmadiff::SampleOptions;
use scenecomp::synth::{Dataset, SynthConfig};
use scenecomp::trainer::{evaluate, Checkpoint};

fn main() -> scenecomp::Result<()> {
    let mut args = std::env::args().skip(1);
    let ckpt = args.next().expect("usage: evaluate CKPT [scenes] [steps]");
    let scenes = args.next().map_or(32, |s| s.parse().expect("scenes"));
    let steps = args.next().map_or(50, |s| s.parse().expect("steps"));

    let ck = Checkpoint::load(ckpt.as_ref())?;
    // Held-out scenes: a seed the training sets in these examples do not use.
    let data = Dataset::generate(scenes, 9001, SynthConfig::default())?;
    let opts = SampleOptions {
        steps,
        ..SampleOptions::default()
    };
    let start = Instant::now();
    let (report, _) = evaluate(&ck, &data.scenes, &opts, 0)?;
    println!(
        "layout_iou {:.3}  attr_acc {:.3}  count_acc {:.3}  layout_l1 {:.4}  ({} scenes, {:.1}s)",
        report.layout_iou,
        report.attr_acc,
        report.count_acc,
        report.layout_l1,
        report.samples,
        start.elapsed().as_secs_f64()
    );
    Ok(())
}
