//! Generates a few synthetic scenes, prints one graph, and shows that the
//! blob oracle reads every rendered object back.
//!
//! `cargo run --release --example gen_data -- [out_dir]`

use scenecomp::synth::metrics::best_match;
use scenecomp::synth::{detect_blobs, Dataset, SynthConfig, COLORS};

fn main() -> scenecomp::Result<()> {
    let data = Dataset::generate(8, 42, SynthConfig::default())?;
    println!("{}", data.scenes[0].to_json());

    for (i, (graph, img)) in data.scenes.iter().zip(&data.images).enumerate() {
        let blobs = detect_blobs(img);
        print!("scene {i}: {} objects, {} blobs |", graph.len(), blobs.len());
        for n in &graph.nodes {
            let b = n.bbox.expect("generated nodes have boxes");
            match best_match(&b, &blobs) {
                Some((blob, iou)) => print!(" {} {}={} iou {:.2};", n.id, n.category, COLORS[blob.color], iou),
                None => print!(" {} missing;", n.id),
            }
        }
        println!();
    }

    if let Some(dir) = std::env::args().nth(1) {
        data.save(dir.as_ref())?;
        println!("saved to {dir}");
    }
    Ok(())
}
