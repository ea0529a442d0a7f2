//! Self-checks run by the `check-grad` and `eval-masks` commands: finite
//! differences for every op and a full denoiser block, a nonzero-gradient
//! audit of every parameter tensor, and the brute-force mask comparison.

use std::collections::HashSet;

use serde::Serialize;
use tensor::{grad_check, op_suite, Graph, OpCheck, Rng, Tensor};

use crate::cmadiff::denoiser::{D_V, GRID, HEADS, N_V, PATCH_DIM};
use crate::cmadiff::{
    build_cma_mask, token_membership, AttentionTrace, BatchCond, BlockContext, ObjectCond, ScheduleConfig,
};
use crate::embed::D_ATTR;
use crate::error::Result;
use crate::model::{LossWeights, Model};
use crate::scene::{BoundingBox, Node, SceneGraph, N_MAX};
use crate::slvae::D_SEM;
use crate::synth::{generate_scene, vocabulary, SynthConfig};

pub const GRAD_STEP: f64 = 1e-4;
pub const GRAD_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Serialize)]
pub struct GradAudit {
    pub ops: Vec<(String, f64)>,
    pub block: Vec<(String, f64)>,
    /// Parameter tensors whose gradient on the audit batch is exactly zero.
    pub dead_params: Vec<String>,
    pub params_checked: usize,
}

impl GradAudit {
    pub fn worst(&self) -> f64 {
        self.ops.iter().chain(&self.block).map(|(_, e)| *e).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.worst() < GRAD_TOL && self.dead_params.is_empty()
    }
}

fn pairs(v: Vec<OpCheck>) -> Vec<(String, f64)> {
    v.into_iter().map(|c| (c.name, c.worst)).collect()
}

/// A model whose zero-initialized output head is replaced by random
/// weights, so gradients reach every layer below it.
pub fn audit_model(seed: u64) -> Result<Model> {
    let mut m = Model::new(vocabulary(), ScheduleConfig::default(), seed)?;
    let mut rng = Rng::new(seed ^ 0x6865_6164);
    for id in [m.denoiser.head.w, m.denoiser.head.b] {
        for v in m.store.get_mut(id).data_mut() {
            *v = 0.1 * rng.normal();
        }
    }
    Ok(m)
}

fn audit_objects(model: &Model, rng: &mut Rng) -> Result<Vec<ObjectCond>> {
    let boxes = [
        BoundingBox::new(0.0, 0.0, 0.6, 0.6)?,
        BoundingBox::new(0.3, 0.2, 0.5, 0.5)?,
        BoundingBox::new(0.1, 0.6, 0.3, 0.35)?,
    ];
    let attrs = ["red", "green", "blue"];
    boxes
        .iter()
        .zip(attrs)
        .map(|(b, a)| {
            Ok(ObjectCond {
                semantics: rng.normal_vec(D_SEM),
                bbox: *b,
                attribute: model.embedder.attribute_value(&model.store, &[a.to_string()])?,
                text: model.embedder.text_vec("square"),
            })
        })
        .collect()
}

/// Finite-difference check of one denoiser block (self-attention, masked
/// attention, cross-attention, feed-forward) with respect to its visual
/// input and to the object tokens.
pub fn block_checks(model: &Model, h: f64) -> Result<Vec<(String, f64)>> {
    let mut rng = Rng::new(5);
    let objects = audit_objects(model, &mut rng)?;
    let x0 = rng.normal_tensor(&[N_V, D_V]);
    let weights = rng.normal_tensor(&[N_V, D_V]);
    let blk = &model.denoiser.blocks[0];
    let (store, emb, tok) = (&model.store, &model.embedder, &model.denoiser.tokenizer);

    let contract = |g: &mut Graph, y| -> tensor::Result<_> {
        let w = g.constant(weights.clone())?;
        let p = g.mul(y, w)?;
        g.sum(p)
    };
    let err = |e: crate::Error| match e {
        crate::Error::Tensor(t) => t,
        other => tensor::TensorError::Caller(other.to_string()),
    };

    let wrt_x = grad_check(
        |g, x| {
            let cond = BatchCond::constant(g, store, emb, &[&objects]).map_err(err)?;
            let (tokens, context) = tok.tokens(g, store, &cond).map_err(err)?;
            let ctx = BlockContext::new(&cond, tokens, context);
            let y = blk.forward(g, store, x, &ctx, None).map_err(err)?;
            contract(g, y)
        },
        &x0,
        h,
    )?;

    let mut g = Graph::new();
    let cond = BatchCond::constant(&mut g, store, emb, &[&objects])?;
    let (tokens, _) = tok.tokens(&mut g, store, &cond)?;
    let t0 = g.value(tokens).clone();
    let wrt_tokens = grad_check(
        |g, t| {
            let cond = BatchCond::constant(g, store, emb, &[&objects]).map_err(err)?;
            let (_, context) = tok.tokens(g, store, &cond).map_err(err)?;
            let ctx = BlockContext::new(&cond, t, context);
            let x = g.constant(x0.clone())?;
            let y = blk.forward(g, store, x, &ctx, None).map_err(err)?;
            contract(g, y)
        },
        &t0,
        h,
    )?;
    Ok(vec![
        ("denoiser_block_visual_input".into(), wrt_x),
        ("denoiser_block_object_tokens".into(), wrt_tokens),
    ])
}

/// Scenes covering every parameter path: relations, padded slots and a node
/// without attributes.
fn audit_batch() -> Result<Vec<(SceneGraph, Vec<f64>)>> {
    let cfg = SynthConfig {
        min_objects: 2,
        ..SynthConfig::default()
    };
    let mut items = Vec::new();
    for seed in 0..3 {
        let s = generate_scene(seed, &cfg)?;
        items.push((s.graph, s.image.to_signed()));
    }
    let mut bare = items[0].0.clone();
    bare.nodes[0].attributes.clear();
    items.push((bare, items[0].1.clone()));
    let single = SceneGraph {
        nodes: vec![Node::new("a", "circle")
            .with_attributes(&["red"])
            .with_bbox(BoundingBox::new(0.25, 0.25, 0.5, 0.5)?)],
        edges: vec![],
    };
    items.push((single, items[1].1.clone()));
    Ok(items)
}

/// Names of parameter tensors receiving an all-zero gradient from the joint
/// loss on the audit batch (summed over a conditional and an unconditional
/// pass).
pub fn dead_parameters(model: &Model) -> Result<Vec<String>> {
    let batch = audit_batch()?;
    let items: Vec<(&SceneGraph, &[f64])> = batch.iter().map(|(s, x)| (s, &x[..])).collect();
    let mut live = vec![false; model.store.len()];
    for dropout in [0.0, 1.0] {
        let mut g = Graph::new();
        let mut rng = Rng::new(17);
        let terms = model.loss(&mut g, &items, &LossWeights::default(), dropout, &mut rng)?;
        let grads = g.backward(terms.total)?;
        for (id, t) in g.param_grads(&grads) {
            if t.data().iter().any(|&v| v != 0.0) {
                live[id.index()] = true;
            }
        }
    }
    Ok(model
        .store
        .iter()
        .filter(|(id, _, _)| !live[id.index()])
        .map(|(_, name, _)| name.to_string())
        .collect())
}

/// The full gradient audit.
pub fn grad_audit(instances: u64) -> Result<GradAudit> {
    let model = audit_model(11)?;
    Ok(GradAudit {
        ops: pairs(op_suite(instances, GRAD_STEP)?),
        block: block_checks(&model, GRAD_STEP)?,
        dead_params: dead_parameters(&model)?,
        params_checked: model.store.len(),
    })
}

/// Pairwise reference for the masked-attention rule over visual tokens
/// (`0..n_v`) and object slots (`n_v..n_v + n_max`): two visual tokens
/// attend iff they fall in the same object or are both background; a token
/// and an object slot iff the token falls in that object; each object slot
/// attends only itself; padded slots attend nothing but themselves.
pub fn brute_force_allowed(membership: &[u32], n_objects: usize, n_max: usize) -> HashSet<(usize, usize)> {
    let n_v = membership.len();
    let n = n_v + n_max;
    let mut allowed = HashSet::new();
    for i in 0..n {
        for j in 0..n {
            let ok = match (i < n_v, j < n_v) {
                (true, true) => {
                    let (a, b) = (membership[i], membership[j]);
                    i == j || (a & b) != 0 || (a == 0 && b == 0)
                }
                (true, false) => {
                    let k = j - n_v;
                    k < n_objects && membership[i] & (1 << k) != 0
                }
                (false, true) => {
                    let k = i - n_v;
                    k < n_objects && membership[j] & (1 << k) != 0
                }
                (false, false) => i == j,
            };
            if ok {
                allowed.insert((i, j));
            }
        }
    }
    allowed
}

fn mask_allowed(mask: &Tensor) -> HashSet<(usize, usize)> {
    let n = mask.shape()[0];
    let mut s = HashSet::new();
    for i in 0..n {
        for j in 0..n {
            if mask.at(i, j) == 0.0 {
                s.insert((i, j));
            }
        }
    }
    s
}

#[derive(Debug, Clone, Serialize)]
pub struct MaskAudit {
    pub instances: usize,
    pub mismatches: usize,
    pub fixture_ok: bool,
}

impl MaskAudit {
    pub fn passed(&self) -> bool {
        self.mismatches == 0 && self.fixture_ok
    }
}

/// Two objects on a 1x3 token strip: A covers one token, B the other two.
pub fn two_object_fixture() -> (Vec<u32>, Tensor) {
    let membership = vec![0b01, 0b10, 0b10];
    let mask = build_cma_mask(&membership, 2, 2);
    (membership, mask)
}

/// Expected allowed pairs of [`two_object_fixture`], written out by hand:
/// tokens 0..3, object slots A = 3, B = 4.
pub fn two_object_fixture_expected() -> HashSet<(usize, usize)> {
    [
        (0, 0),
        (0, 3),
        (3, 0),
        (3, 3),
        (1, 1),
        (1, 2),
        (2, 1),
        (2, 2),
        (1, 4),
        (2, 4),
        (4, 1),
        (4, 2),
        (4, 4),
    ]
    .into_iter()
    .collect()
}

/// Compares the mask builder with [`brute_force_allowed`] on random layouts
/// over the denoiser's token grid.
pub fn mask_audit(instances: usize, seed: u64) -> Result<MaskAudit> {
    let mut rng = Rng::new(seed);
    let mut mismatches = 0;
    for _ in 0..instances {
        let n_obj = rng.range_inclusive(0, N_MAX);
        let boxes = random_boxes(&mut rng, n_obj)?;
        let membership = token_membership(&boxes, GRID, GRID);
        let mask = build_cma_mask(&membership, n_obj, N_MAX);
        if mask_allowed(&mask) != brute_force_allowed(&membership, n_obj, N_MAX) {
            mismatches += 1;
        }
    }
    let (m, fixture) = two_object_fixture();
    let got = mask_allowed(&fixture);
    let fixture_ok = got == two_object_fixture_expected() && got == brute_force_allowed(&m, 2, 2);
    Ok(MaskAudit {
        instances,
        mismatches,
        fixture_ok,
    })
}

fn random_boxes(rng: &mut Rng, n: usize) -> Result<Vec<BoundingBox>> {
    (0..n)
        .map(|_| {
            let w = 0.05 + 0.95 * rng.uniform();
            let h = 0.05 + 0.95 * rng.uniform();
            BoundingBox::new((1.0 - w) * rng.uniform(), (1.0 - h) * rng.uniform(), w, h)
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct LeakAudit {
    pub passes: usize,
    /// Attention weights inspected (every block, head, query and key).
    pub weights_checked: usize,
    /// Weights on forbidden pairs that are not exactly zero.
    pub violations: usize,
    pub max_forbidden: f64,
}

/// Runs `passes` random denoiser forward passes (two items each, random
/// layouts, latents and timesteps) and inspects the post-softmax weights of
/// every masked-attention layer: a visual query may put nonzero weight only
/// on keys that [`brute_force_allowed`] permits.
pub fn leakage_audit(model: &Model, passes: usize, seed: u64) -> Result<LeakAudit> {
    let mut rng = Rng::new(seed);
    let n_kv = N_V + N_MAX;
    let mut out = LeakAudit {
        passes,
        weights_checked: 0,
        violations: 0,
        max_forbidden: 0.0,
    };
    for _ in 0..passes {
        let items: Vec<Vec<ObjectCond>> = (0..2)
            .map(|_| {
                let n = rng.range_inclusive(1, N_MAX);
                let boxes = random_boxes(&mut rng, n)?;
                boxes
                    .into_iter()
                    .map(|bbox| {
                        Ok(ObjectCond {
                            semantics: rng.normal_vec(D_SEM),
                            bbox,
                            attribute: rng.normal_vec(D_ATTR),
                            text: model.embedder.text_vec("square"),
                        })
                    })
                    .collect()
            })
            .collect::<Result<_>>()?;
        let refs: Vec<&[ObjectCond]> = items.iter().map(|v| &v[..]).collect();
        let t: Vec<usize> = (0..2).map(|_| rng.range_inclusive(1, model.schedule.steps())).collect();

        let mut g = Graph::new();
        let cond = BatchCond::constant(&mut g, &model.store, &model.embedder, &refs)?;
        let z = g.constant(rng.normal_tensor(&[2 * N_V, PATCH_DIM]))?;
        let mut trace = AttentionTrace::default();
        model.denoiser.forward(&mut g, &model.store, z, &t, &cond, Some(&mut trace))?;

        let allowed: Vec<HashSet<(usize, usize)>> = items
            .iter()
            .map(|objs| {
                let boxes: Vec<BoundingBox> = objs.iter().map(|o| o.bbox).collect();
                brute_force_allowed(&token_membership(&boxes, GRID, GRID), boxes.len(), N_MAX)
            })
            .collect();
        for &layer in &trace.cma {
            let probs = g.attention_probs(layer).expect("cma trace holds attention nodes");
            out.weights_checked += probs.len();
            for (b, ok) in allowed.iter().enumerate() {
                for h in 0..HEADS {
                    for i in 0..N_V {
                        let row = ((b * HEADS + h) * N_V + i) * n_kv;
                        for j in 0..n_kv {
                            let p = probs[row + j];
                            if !ok.contains(&(i, j)) && p != 0.0 {
                                out.violations += 1;
                                out.max_forbidden = out.max_forbidden.max(p.abs());
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixture_matches_hand_enumeration() {
        let (m, mask) = two_object_fixture();
        assert_eq!(mask_allowed(&mask), two_object_fixture_expected());
        assert_eq!(brute_force_allowed(&m, 2, 2), two_object_fixture_expected());
    }

    #[test]
    fn small_mask_audit() {
        assert!(mask_audit(50, 1).unwrap().passed());
    }

    #[test]
    fn few_passes_leak_nothing() {
        let m = audit_model(2).unwrap();
        let a = leakage_audit(&m, 3, 4).unwrap();
        assert_eq!(a.violations, 0);
        assert!(a.weights_checked > 0);
    }
}
