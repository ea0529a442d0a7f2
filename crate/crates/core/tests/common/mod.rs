//! Oracles and denoiser doubles shared by the integration tests.
#![allow(dead_code)]

use scenecomp::cmadiff::sampler::step_pairs;
use scenecomp::cmadiff::{sample, NoisePredictor, NoiseSchedule, ObjectCond, Query, SampleOptions, SamplerKind, Step};
use scenecomp::mls::{mls_run, rasterize_nonoverlap, MlsView, Partition};
use scenecomp::model::Model;
use scenecomp::scene::{BoundingBox, Node, SceneGraph};
use scenecomp::synth::vocabulary;
use scenecomp::cmadiff::ScheduleConfig;
use scenecomp::Result;
use tensor::Rng;

pub const KINDS: [SamplerKind; 2] = [SamplerKind::Deterministic, SamplerKind::Ancestral];

pub fn bx(x: f64, y: f64, w: f64, h: f64) -> BoundingBox {
    BoundingBox::new(x, y, w, h).unwrap()
}

pub fn cond(tag: f64, b: BoundingBox) -> ObjectCond {
    ObjectCond {
        semantics: vec![tag; 4],
        bbox: b,
        attribute: vec![tag],
        text: vec![0.0],
    }
}

/// Cells of a `16x16` partition covered by zero or several masks, over
/// `cases` random layouts of up to 8 boxes.
pub fn partition_violations(cases: usize, seed: u64) -> usize {
    let mut rng = Rng::new(seed);
    let mut bad = 0;
    for _ in 0..cases {
        let n = rng.range_inclusive(0, 8);
        let boxes: Vec<BoundingBox> = (0..n)
            .map(|_| {
                let (x, y) = (0.9 * rng.uniform(), 0.9 * rng.uniform());
                let (w, h) = (0.05 + 0.95 * rng.uniform(), 0.05 + 0.95 * rng.uniform());
                bx(x, y, w.min(1.0 - x), h.min(1.0 - y))
            })
            .collect();
        bad += partition_overlaps(&boxes);
    }
    bad
}

pub fn partition_overlaps(boxes: &[BoundingBox]) -> usize {
    let p = rasterize_nonoverlap(boxes, 16, 16);
    let masks: Vec<Vec<bool>> = (0..=boxes.len()).map(|i| p.mask(i)).collect();
    (0..256).filter(|&c| masks.iter().filter(|m| m[c]).count() != 1).count()
}

/// Returns `attribute[0]` (or -0.5 when unconditional) everywhere.
pub struct ConstantPerCondition;

impl NoisePredictor for ConstantPerCondition {
    fn predict(&self, _t: usize, queries: &[Query]) -> Result<Vec<Vec<f64>>> {
        Ok(queries
            .iter()
            .map(|q| {
                let v = q.objects.first().map_or(-0.5, |o| o.attribute[0]);
                vec![v; q.z.len()]
            })
            .collect())
    }
}

fn partition_from(boxes: &[BoundingBox], n: usize) -> Partition {
    rasterize_nonoverlap(boxes, n, n)
}

/// Runs the layered sampler with [`ConstantPerCondition`] on a 4x4 grid and
/// replays it cell by cell; returns the number of values that differ.
pub fn patchwork_mismatches(kind: SamplerKind) -> usize {
    let sched = NoiseSchedule::default();
    let views = vec![
        MlsView {
            partition: partition_from(&[bx(0.0, 0.0, 0.5, 0.5), bx(0.25, 0.25, 0.75, 0.75)], 4),
            objects: vec![cond(0.3, bx(0.0, 0.0, 0.5, 0.5)), cond(-0.7, bx(0.25, 0.25, 0.75, 0.75))],
        },
        MlsView {
            partition: partition_from(&[bx(0.5, 0.0, 0.5, 1.0), bx(0.0, 0.5, 0.25, 0.5)], 4),
            objects: vec![cond(0.3, bx(0.5, 0.0, 0.5, 1.0)), cond(-0.7, bx(0.0, 0.5, 0.25, 0.5))],
        },
    ];
    let seeds = [11, 12, 13];
    let opts = SampleOptions {
        steps: 3,
        cfg_scale: 2.0,
        kind,
    };
    let got = mls_run(&ConstantPerCondition, &sched, &views, &seeds, &opts).unwrap();

    // Brute force: each cell and channel evolves independently.
    let ch = 3;
    let mut rngs: Vec<Rng> = seeds.iter().map(|&s| Rng::new(s)).collect();
    let mut layers: Vec<Vec<f64>> = rngs.iter_mut().map(|r| r.normal_vec(16 * ch)).collect();
    let eps_of = |l: usize| -> f64 {
        match l {
            0 => (1.0 - 2.0) * -0.5 + 2.0 * 0.3,
            1 => (1.0 - 2.0) * -0.5 + 2.0 * -0.7,
            _ => -0.5,
        }
    };
    for (t, tp) in step_pairs(&sched, 3) {
        let step = Step::new(&sched, t, tp, kind);
        let noise: Vec<Vec<f64>> = if step.is_stochastic() {
            rngs.iter_mut().map(|r| r.normal_vec(16 * ch)).collect()
        } else {
            vec![vec![0.0; 16 * ch]; 3]
        };
        let mut next = layers.clone();
        for (l, layer) in next.iter_mut().enumerate() {
            for k in 0..16 * ch {
                let vals: Vec<f64> = views
                    .iter()
                    .filter(|v| v.partition.layer_of(k / ch) == l)
                    .map(|_| step.apply(layers[l][k], eps_of(l), noise[l][k]))
                    .collect();
                if !vals.is_empty() {
                    layer[k] = vals.iter().sum::<f64>() / vals.len() as f64;
                }
            }
        }
        layers = next;
    }
    (0..16 * ch)
        .filter(|&k| got[k] != layers[views[0].partition.layer_of(k / ch)][k])
        .count()
}

/// Answers only inside the query region, reading only region cells; cells
/// outside the region get NaN so any leak would poison the result.
pub struct LocalityDouble;

impl NoisePredictor for LocalityDouble {
    fn predict(&self, t: usize, queries: &[Query]) -> Result<Vec<Vec<f64>>> {
        Ok(queries
            .iter()
            .map(|q| {
                let region = q.region.expect("layered sampler always passes a region");
                let ch = q.z.len() / region.len();
                let inside: Vec<usize> = (0..region.len()).filter(|&c| region[c]).collect();
                let mean = inside.iter().map(|&c| q.z[c * ch]).sum::<f64>() / inside.len().max(1) as f64;
                let tag = q.objects.first().map_or(0.0, |o| o.attribute[0] + o.semantics[0]);
                (0..q.z.len())
                    .map(|k| {
                        if region[k / ch] {
                            0.3 * tag + 0.1 * mean.tanh() + 0.05 * q.z[k] + 1e-3 * t as f64
                        } else {
                            f64::NAN
                        }
                    })
                    .collect()
            })
            .collect())
    }

    fn depends_on_region(&self) -> bool {
        true
    }
}

/// Changes to one object's attribute under [`LocalityDouble`] across three
/// views: `(changed values outside the object's mask union, changed values
/// inside, all outputs finite)`.
pub fn locality_edit_changes(kind: SamplerKind) -> (usize, usize, bool) {
    let sched = NoiseSchedule::default();
    let layouts = [
        [bx(0.0, 0.0, 0.5, 0.5), bx(0.4, 0.3, 0.4, 0.5), bx(0.1, 0.6, 0.3, 0.3)],
        [bx(0.05, 0.0, 0.45, 0.55), bx(0.5, 0.25, 0.4, 0.5), bx(0.0, 0.55, 0.35, 0.4)],
        [bx(0.0, 0.1, 0.5, 0.4), bx(0.45, 0.35, 0.45, 0.45), bx(0.15, 0.6, 0.3, 0.35)],
    ];
    let views_with = |attr: f64| -> Vec<MlsView> {
        layouts
            .iter()
            .map(|l| MlsView {
                partition: rasterize_nonoverlap(l, 16, 16),
                objects: vec![cond(0.2, l[0]), cond(attr, l[1]), cond(-0.4, l[2])],
            })
            .collect()
    };
    let seeds = [1, 2, 3, 4];
    let opts = SampleOptions {
        steps: 10,
        cfg_scale: 7.5,
        kind,
    };
    let before = mls_run(&LocalityDouble, &sched, &views_with(0.5), &seeds, &opts).unwrap();
    let after = mls_run(&LocalityDouble, &sched, &views_with(-0.9), &seeds, &opts).unwrap();
    let finite = before.iter().chain(&after).all(|v| v.is_finite());
    let views = views_with(0.5);
    let (mut outside, mut inside) = (0, 0);
    for k in 0..768 {
        let changed = before[k].to_bits() != after[k].to_bits();
        if views.iter().any(|v| v.partition.layer_of(k / 3) == 1) {
            inside += usize::from(changed);
        } else {
            outside += usize::from(changed);
        }
    }
    (outside, inside, finite)
}

/// A model with a random output head, so the denoiser output is non-trivial.
pub fn randomized_model() -> Model {
    let mut m = Model::new(vocabulary(), ScheduleConfig::default(), 3).unwrap();
    let mut rng = Rng::new(77);
    for id in [m.denoiser.head.w, m.denoiser.head.b] {
        let t = m.store.get_mut(id);
        for v in t.data_mut() {
            *v = 0.2 * rng.normal();
        }
    }
    m
}

/// Whether one full-canvas view through the layered sampler reproduces the
/// plain sampler bit for bit (and is not trivially zero).
pub fn single_view_matches_plain(model: &Model, kind: SamplerKind) -> bool {
    let graph = SceneGraph {
        nodes: vec![Node::new("a", "circle").with_attributes(&["red"])],
        edges: vec![],
    };
    let mut view = model.draw_view(&graph, 5).unwrap();
    view.boxes = vec![bx(0.0, 0.0, 1.0, 1.0)];
    let objects = model.object_conds(&graph, &view).unwrap();
    let mls_view = MlsView {
        partition: rasterize_nonoverlap(&view.boxes, 16, 16),
        objects: objects.clone(),
    };
    let opts = SampleOptions {
        steps: 6,
        cfg_scale: 7.5,
        kind,
    };
    let plain = sample(model, &model.schedule, &objects, &opts, 42).unwrap();
    let layered = mls_run(model, &model.schedule, &[mls_view], &[42, 9], &opts).unwrap();
    plain.iter().zip(&layered).all(|(a, b)| a.to_bits() == b.to_bits()) && plain.iter().any(|&v| v != 0.0)
}
