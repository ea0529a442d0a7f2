//! Recolors one object of a layered sample and reports which pixels moved.
//!
//! `cargo run --release --example edit_color -- CKPT [seed]`

use scenecomp::cmadiff::SampleOptions;
use scenecomp::image::{Image, SIZE};
use scenecomp::mls::{draw_views, edit_and_resample, rasterize_nonoverlap, MlsState, DEFAULT_VIEWS};
use scenecomp::scene::{Edge, Edit, Node, SceneGraph};
use scenecomp::synth::{detect_blobs, COLORS};
use scenecomp::trainer::Checkpoint;

fn main() -> scenecomp::Result<()> {
    let mut args = std::env::args().skip(1);
    let ckpt = args.next().expect("usage: edit_color CKPT [seed]");
    let seed = args.next().map_or(0, |s| s.parse().expect("seed"));
    let model = Checkpoint::load(ckpt.as_ref())?.model;

    let graph = SceneGraph {
        nodes: vec![
            Node::new("a", "square").with_attributes(&["red"]),
            Node::new("b", "circle").with_attributes(&["green"]),
        ],
        edges: vec![Edge::new("a", "left of", "b")],
    };
    let state = MlsState::derive(&graph, seed, DEFAULT_VIEWS);
    let edit = Edit::parse("set-attr b blue")?;
    let out = edit_and_resample(&model, model.vocab(), &graph, &state, &edit, &SampleOptions::default())?;

    let before = Image::from_signed(SIZE, SIZE, &out.before);
    let after = Image::from_signed(SIZE, SIZE, &out.after);
    before.write_ppm("edit-before.ppm".as_ref())?;
    after.write_ppm("edit-after.ppm".as_ref())?;

    // Union of the edited object's cells over all views.
    let views = draw_views(&model, &graph, &state)?;
    let region: Vec<bool> = (0..SIZE * SIZE)
        .map(|c| views.iter().any(|v| rasterize_nonoverlap(&v.boxes, SIZE, SIZE).layer_of(c) == 1))
        .collect();
    let (mut inside, mut outside) = (0, 0);
    for (c, &own) in region.iter().enumerate() {
        if before.pixel(c / SIZE, c % SIZE) != after.pixel(c / SIZE, c % SIZE) {
            if own {
                inside += 1;
            } else {
                outside += 1;
            }
        }
    }
    println!("changed pixels: {inside} inside the edited object's masks, {outside} outside");
    for (name, img) in [("before", &before), ("after", &after)] {
        let colors: Vec<&str> = detect_blobs(img).iter().map(|b| COLORS[b.color]).collect();
        println!("{name}: blobs {colors:?}");
    }
    Ok(())
}
