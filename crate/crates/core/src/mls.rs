//! Layered sampling: one latent canvas per object plus a background layer,
//! composed through several (layout, semantics) views and re-aggregated
//! after every reverse step, so that graph edits only disturb the cells the
//! edited object occupies.

use serde::{Deserialize, Serialize};
use tensor::{mix, Rng};

use crate::cmadiff::sampler::step_pairs;
use crate::cmadiff::{guide, NoisePredictor, NoiseSchedule, ObjectCond, Query, SampleOptions, Step};
use crate::error::{Error, Result};
use crate::image::{CHANNELS, NUMEL, SIZE};
use crate::model::{Model, View};
use crate::scene::{BoundingBox, Edit, SceneGraph};
use crate::vocab::Vocabulary;

pub const DEFAULT_VIEWS: usize = 5;

/// Non-overlapping masks of one layout: `owner[cell]` is the object drawn on
/// that cell, `None` for background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub rows: usize,
    pub cols: usize,
    pub owner: Vec<Option<usize>>,
    pub n_objects: usize,
}

impl Partition {
    /// Mask of object `i`, or of the background for `i == n_objects`.
    pub fn mask(&self, i: usize) -> Vec<bool> {
        let want = (i < self.n_objects).then_some(i);
        self.owner.iter().map(|&o| o == want).collect()
    }

    /// Layer index owning each cell (background is `n_objects`).
    pub fn layer_of(&self, cell: usize) -> usize {
        self.owner[cell].unwrap_or(self.n_objects)
    }
}

/// Paints boxes onto a `rows x cols` grid in order of decreasing area (ties
/// by node index), each covering the cells whose centers it contains; later
/// paint wins, so smaller objects sit on top.
pub fn rasterize_nonoverlap(boxes: &[BoundingBox], rows: usize, cols: usize) -> Partition {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| boxes[b].area().total_cmp(&boxes[a].area()).then(a.cmp(&b)));
    let mut owner = vec![None; rows * cols];
    for &i in &order {
        for r in 0..rows {
            for c in 0..cols {
                let (x, y) = ((c as f64 + 0.5) / cols as f64, (r as f64 + 0.5) / rows as f64);
                if boxes[i].contains_point(x, y) {
                    owner[r * cols + c] = Some(i);
                }
            }
        }
    }
    Partition {
        rows,
        cols,
        owner,
        n_objects: boxes.len(),
    }
}

/// `z = sum_i m_i * layer_i`, cell by cell; each cell copies its owner's
/// values across all channels.
pub fn compose(layers: &[Vec<f64>], p: &Partition) -> Vec<f64> {
    let ch = layers[0].len() / p.owner.len();
    let mut z = vec![0.0; layers[0].len()];
    for cell in 0..p.owner.len() {
        let l = p.layer_of(cell);
        z[cell * ch..(cell + 1) * ch].copy_from_slice(&layers[l][cell * ch..(cell + 1) * ch]);
    }
    z
}

/// Writes the per-cell mean of the views' states back into each layer over
/// the cells that layer owns in at least one view. Other cells keep their
/// previous values.
pub fn aggregate(layers: &mut [Vec<f64>], views: &[(&Partition, Vec<f64>)]) {
    let cells = views[0].0.owner.len();
    let ch = layers[0].len() / cells;
    for (l, layer) in layers.iter_mut().enumerate() {
        for cell in 0..cells {
            let mut count = 0usize;
            let mut sum = vec![0.0; ch];
            for (p, z) in views {
                if p.layer_of(cell) != l {
                    continue;
                }
                for c in 0..ch {
                    let v = z[cell * ch + c];
                    sum[c] = if count == 0 { v } else { sum[c] + v };
                }
                count += 1;
            }
            if count > 0 {
                for c in 0..ch {
                    layer[cell * ch + c] = sum[c] / count as f64;
                }
            }
        }
    }
}

/// One view of the scene for sampling: its partition and the per-object
/// conditioning (box and semantics drawn for this view).
#[derive(Debug, Clone)]
pub struct MlsView {
    pub partition: Partition,
    pub objects: Vec<ObjectCond>,
}

/// Guided noise estimate for one composed view: object cells use that
/// object's single-object call guided against the unconditional call;
/// background cells use the unconditional call.
pub fn mls_eps(pred: &dyn NoisePredictor, t: usize, z: &[f64], view: &MlsView, scale: f64) -> Result<Vec<f64>> {
    Ok(mls_eps_batch(pred, t, &[(z, view)], scale)?.remove(0))
}

fn mls_eps_batch(pred: &dyn NoisePredictor, t: usize, items: &[(&[f64], &MlsView)], scale: f64) -> Result<Vec<Vec<f64>>> {
    let per_region = pred.depends_on_region();
    let masks: Vec<Vec<Vec<bool>>> = items
        .iter()
        .map(|(_, v)| (0..=v.objects.len()).map(|i| v.partition.mask(i)).collect())
        .collect();

    // For each item: conditioned query per present object, then either one
    // shared unconditional query or one per present region.
    let mut queries = Vec::new();
    let mut plan = Vec::with_capacity(items.len());
    for ((z, v), m) in items.iter().zip(&masks) {
        let n = v.objects.len();
        let present: Vec<usize> = (0..=n).filter(|&i| m[i].iter().any(|&b| b)).collect();
        let mut cond_at = vec![usize::MAX; n + 1];
        let mut uncond_at = vec![usize::MAX; n + 1];
        for &i in present.iter().filter(|&&i| i < n) {
            cond_at[i] = queries.len();
            queries.push(Query {
                z,
                objects: std::slice::from_ref(&v.objects[i]),
                region: Some(&m[i]),
            });
        }
        if per_region {
            for &i in &present {
                uncond_at[i] = queries.len();
                queries.push(Query {
                    z,
                    objects: &[],
                    region: Some(&m[i]),
                });
            }
        } else {
            let k = queries.len();
            queries.push(Query {
                z,
                objects: &[],
                region: None,
            });
            uncond_at.iter_mut().for_each(|u| *u = k);
        }
        plan.push((cond_at, uncond_at));
    }
    let out = pred.predict(t, &queries)?;

    let mut result = Vec::with_capacity(items.len());
    for ((z, v), (cond_at, uncond_at)) in items.iter().zip(&plan) {
        let n = v.objects.len();
        let ch = z.len() / v.partition.owner.len();
        let mut eps = vec![0.0; z.len()];
        let mut guided: Vec<Option<Vec<f64>>> = vec![None; n + 1];
        for cell in 0..v.partition.owner.len() {
            let l = v.partition.layer_of(cell);
            let src = guided[l].get_or_insert_with(|| {
                if l < n {
                    guide(&out[cond_at[l]], &out[uncond_at[l]], scale)
                } else {
                    out[uncond_at[l]].clone()
                }
            });
            eps[cell * ch..(cell + 1) * ch].copy_from_slice(&src[cell * ch..(cell + 1) * ch]);
        }
        result.push(eps);
    }
    Ok(result)
}

/// Runs the layered reverse process. `layer_seeds[l]` seeds layer `l`'s
/// initial canvas and its per-step noise; there must be one per object
/// plus one for the background. Returns the final layers composed through
/// view 0.
pub fn mls_run(
    pred: &dyn NoisePredictor,
    sched: &NoiseSchedule,
    views: &[MlsView],
    layer_seeds: &[u64],
    opts: &SampleOptions,
) -> Result<Vec<f64>> {
    let n_obj = views.first().map_or(0, |v| v.objects.len());
    if views.is_empty() || views.iter().any(|v| v.objects.len() != n_obj || v.partition.n_objects != n_obj) {
        return Err(Error::Constraint("layered sampling needs at least one view, all with the same objects".into()));
    }
    if layer_seeds.len() != n_obj + 1 {
        return Err(Error::LengthMismatch {
            what: "layer seeds",
            left: layer_seeds.len(),
            right: n_obj + 1,
        });
    }
    let numel = views[0].partition.owner.len() * CHANNELS;
    let mut rngs: Vec<Rng> = layer_seeds.iter().map(|&s| Rng::new(s)).collect();
    let mut layers: Vec<Vec<f64>> = rngs.iter_mut().map(|r| r.normal_vec(numel)).collect();

    for (t, t_prev) in step_pairs(sched, opts.steps) {
        let step = Step::new(sched, t, t_prev, opts.kind);
        let noise_layers: Option<Vec<Vec<f64>>> = step
            .is_stochastic()
            .then(|| rngs.iter_mut().map(|r| r.normal_vec(numel)).collect());
        let zs: Vec<Vec<f64>> = views.iter().map(|v| compose(&layers, &v.partition)).collect();
        let items: Vec<(&[f64], &MlsView)> = zs.iter().map(|z| &z[..]).zip(views).collect();
        let eps = mls_eps_batch(pred, t, &items, opts.cfg_scale)?;
        let mut next = Vec::with_capacity(views.len());
        for ((v, z), e) in views.iter().zip(&zs).zip(&eps) {
            let noise = match &noise_layers {
                Some(nl) => compose(nl, &v.partition),
                None => vec![0.0; numel],
            };
            let z: Vec<f64> = z
                .iter()
                .zip(e)
                .zip(&noise)
                .map(|((&z, &e), &n)| step.apply(z, e, n))
                .collect();
            next.push((&v.partition, z));
        }
        aggregate(&mut layers, &next);
    }
    Ok(compose(&layers, &views[0].partition))
}

/// Seeds that make a layered sample reproducible, persisted next to its
/// output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlsState {
    pub scene_hash: String,
    pub n_views: usize,
    /// One per object in node order, then the background layer.
    pub per_layer_seeds: Vec<u64>,
    pub view_latent_seeds: Vec<u64>,
}

const LAYER_LABEL: u64 = 0x6c_6179_6572;
const VIEW_LABEL: u64 = 0x7669_6577;

impl MlsState {
    /// Seeds derived from a single user seed.
    pub fn derive(graph: &SceneGraph, seed: u64, n_views: usize) -> Self {
        Self {
            scene_hash: graph.content_hash(),
            n_views,
            per_layer_seeds: (0..=graph.len() as u64).map(|l| mix(seed ^ mix(LAYER_LABEL ^ l))).collect(),
            view_latent_seeds: (0..n_views as u64).map(|n| mix(seed ^ mix(VIEW_LABEL ^ n))).collect(),
        }
    }

    /// Checks that this state was produced for `graph`.
    pub fn check(&self, graph: &SceneGraph) -> Result<()> {
        if self.scene_hash != graph.content_hash() {
            return Err(Error::StaleState("scene hash differs from the stored state".into()));
        }
        if self.per_layer_seeds.len() != graph.len() + 1 {
            return Err(Error::StaleState(format!(
                "{} layer seeds stored for {} nodes",
                self.per_layer_seeds.len(),
                graph.len()
            )));
        }
        if self.view_latent_seeds.len() != self.n_views || self.n_views == 0 {
            return Err(Error::StaleState("view seed count does not match n_views".into()));
        }
        Ok(())
    }

    /// State for `edited`, reusing every existing layer seed. A node added by
    /// the edit gets a fresh seed placed before the background's.
    pub fn after_edit(&self, edited: &SceneGraph) -> Result<Self> {
        let old_objects = self.per_layer_seeds.len() - 1;
        if edited.len() < old_objects {
            return Err(Error::StaleState("edit removed a node".into()));
        }
        let (objects, bg) = self.per_layer_seeds.split_at(old_objects);
        let mut seeds = objects.to_vec();
        for k in old_objects..edited.len() {
            seeds.push(mix(bg[0] ^ mix(LAYER_LABEL ^ k as u64)));
        }
        seeds.push(bg[0]);
        Ok(Self {
            scene_hash: edited.content_hash(),
            n_views: self.n_views,
            per_layer_seeds: seeds,
            view_latent_seeds: self.view_latent_seeds.clone(),
        })
    }
}

/// Views drawn from the model's prior with the state's view seeds.
pub fn draw_views(model: &Model, graph: &SceneGraph, state: &MlsState) -> Result<Vec<View>> {
    state
        .view_latent_seeds
        .iter()
        .map(|&s| model.draw_view(graph, s))
        .collect()
}

/// Sampling views (partition on the image grid plus conditioning) for `graph`.
pub fn mls_views(model: &Model, graph: &SceneGraph, views: &[View]) -> Result<Vec<MlsView>> {
    views
        .iter()
        .map(|v| {
            Ok(MlsView {
                partition: rasterize_nonoverlap(&v.boxes, SIZE, SIZE),
                objects: model.object_conds(graph, v)?,
            })
        })
        .collect()
}

/// Layered sample of `graph` under `state`; values in `[-1, 1]`.
pub fn mls_sample(model: &Model, graph: &SceneGraph, state: &MlsState, opts: &SampleOptions) -> Result<Vec<f64>> {
    state.check(graph)?;
    let views = mls_views(model, graph, &draw_views(model, graph, state)?)?;
    let x = mls_run(model, &model.schedule, &views, &state.per_layer_seeds, opts)?;
    debug_assert_eq!(x.len(), NUMEL);
    Ok(x)
}

/// Result of [`edit_and_resample`].
pub struct EditOutcome {
    pub graph: SceneGraph,
    pub state: MlsState,
    pub before: Vec<f64>,
    pub after: Vec<f64>,
}

/// Applies `edit` and resamples with every unedited layer seed and latent
/// row reused.
pub fn edit_and_resample(
    model: &Model,
    vocab: &Vocabulary,
    graph: &SceneGraph,
    state: &MlsState,
    edit: &Edit,
    opts: &SampleOptions,
) -> Result<EditOutcome> {
    state.check(graph)?;
    let before = mls_sample(model, graph, state, opts)?;
    let edited = graph.apply_edit(edit, vocab)?;
    let new_state = state.after_edit(&edited)?;
    let after = mls_sample(model, &edited, &new_state, opts)?;
    Ok(EditOutcome {
        graph: edited,
        state: new_state,
        before,
        after,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x: f64, y: f64, w: f64, h: f64) -> BoundingBox {
        BoundingBox::new(x, y, w, h).unwrap()
    }

    #[test]
    fn disjoint_boxes_and_background() {
        let p = rasterize_nonoverlap(&[bx(0.0, 0.0, 0.5, 0.5), bx(0.5, 0.5, 0.5, 0.5)], 4, 4);
        let expect: Vec<Option<usize>> = (0..16)
            .map(|k| match (k / 4 < 2, k % 4 < 2) {
                (true, true) => Some(0),
                (false, false) => Some(1),
                _ => None,
            })
            .collect();
        assert_eq!(p.owner, expect);
    }

    #[test]
    fn small_box_inside_large_keeps_its_cells() {
        let p = rasterize_nonoverlap(&[bx(0.25, 0.25, 0.5, 0.5), bx(0.0, 0.0, 1.0, 1.0)], 4, 4);
        let inner = [5, 6, 9, 10];
        for k in 0..16 {
            assert_eq!(p.owner[k], Some(if inner.contains(&k) { 0 } else { 1 }));
        }
    }

    #[test]
    fn equal_area_tie_goes_to_higher_index() {
        let p = rasterize_nonoverlap(&[bx(0.0, 0.0, 0.5, 1.0), bx(0.25, 0.0, 0.5, 1.0)], 4, 4);
        assert_eq!(p.owner[1], Some(1));
        assert_eq!(p.owner[0], Some(0));
    }

    #[test]
    fn aggregation_averages_covering_views() {
        let p1 = Partition {
            rows: 1,
            cols: 2,
            owner: vec![Some(0), None],
            n_objects: 1,
        };
        let p2 = Partition {
            rows: 1,
            cols: 2,
            owner: vec![Some(0), Some(0)],
            n_objects: 1,
        };
        let mut layers = vec![vec![9.0, 9.0], vec![7.0, 7.0]];
        aggregate(&mut layers, &[(&p1, vec![1.0, 5.0]), (&p2, vec![3.0, 4.0])]);
        assert_eq!(layers, vec![vec![2.0, 4.0], vec![7.0, 5.0]]);
    }

    #[test]
    fn compose_two_halves() {
        let p = Partition {
            rows: 1,
            cols: 2,
            owner: vec![Some(0), Some(1)],
            n_objects: 2,
        };
        let layers = vec![vec![1.0, 1.0, 2.0, 2.0], vec![3.0, 3.0, 4.0, 4.0], vec![0.0; 4]];
        assert_eq!(compose(&layers, &p), vec![1.0, 1.0, 4.0, 4.0]);
    }

    #[test]
    fn after_edit_keeps_existing_seeds() {
        let s = MlsState {
            scene_hash: String::new(),
            n_views: 2,
            per_layer_seeds: vec![1, 2, 99],
            view_latent_seeds: vec![5, 6],
        };
        let mut g = SceneGraph {
            nodes: vec![
                crate::scene::Node::new("a", "circle"),
                crate::scene::Node::new("b", "circle"),
            ],
            edges: vec![],
        };
        assert_eq!(s.after_edit(&g).unwrap().per_layer_seeds, vec![1, 2, 99]);
        g.nodes.push(crate::scene::Node::new("c", "circle"));
        let e = s.after_edit(&g).unwrap();
        assert_eq!(&e.per_layer_seeds[..2], &[1, 2]);
        assert_eq!(e.per_layer_seeds[3], 99);
        assert_eq!(e.view_latent_seeds, vec![5, 6]);
        g.nodes.truncate(1);
        assert!(matches!(s.after_edit(&g), Err(Error::StaleState(_))));
    }
}
