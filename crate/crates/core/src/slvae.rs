//! Semantics-layout VAE: a triplet-GCN union encoder producing a per-node
//! Gaussian, and two triplet-GCN decoders turning latent draws into boxes and
//! semantic vectors.

use tensor::{Graph, ParamStore, Rng, Tensor, Var};

use crate::embed::{Embedder, SceneBatch, D_EDGE, D_NODE, D_TABLE, D_TEXT};
use crate::error::{Error, Result};
use crate::nn::{Linear, Mlp};
use crate::scene::{BoundingBox, Triple};

pub const D_Z: usize = 16;
pub const D_SEM: usize = 64;
pub const GCN_LAYERS: usize = 2;
pub const GCN_HIDDEN: usize = 64;
pub const MIN_BOX: f64 = 1.0 / 64.0;

/// Width of decoder node vectors: category row, text, latent.
pub const D_DEC: usize = D_TABLE + D_TEXT + D_Z;

#[derive(Debug, Clone)]
pub enum Perceptron {
    Mlp(Mlp),
    Linear(Linear),
    Identity,
}

impl Perceptron {
    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        match self {
            Perceptron::Mlp(m) => m.forward(g, store, x),
            Perceptron::Linear(l) => l.forward(g, store, x),
            Perceptron::Identity => Ok(x),
        }
    }
}

/// One round of triplet message passing.
///
/// For each triple `(i, k, j)` the message perceptron `g1` maps
/// `[node_i, edge_k, node_j]` to three candidate segments. A node's pooled
/// state is the mean of all candidates addressed to it, or its previous
/// state if it is in no triple; the update perceptron `g2` is applied to the
/// pooled state. Edges take their candidate segment.
#[derive(Debug, Clone)]
pub struct TripletGcnLayer {
    pub g1: Perceptron,
    pub g2: Perceptron,
    pub residual: bool,
    pub d_node: usize,
    pub d_edge: usize,
}

impl TripletGcnLayer {
    pub fn new(store: &mut ParamStore, name: &str, d_node: usize, d_edge: usize, rng: &mut Rng) -> Result<Self> {
        let d = 2 * d_node + d_edge;
        Ok(Self {
            g1: Perceptron::Mlp(Mlp::new(store, &format!("{name}.g1"), [d, GCN_HIDDEN, d], rng)?),
            g2: Perceptron::Mlp(Mlp::new(store, &format!("{name}.g2"), [d_node, GCN_HIDDEN, d_node], rng)?),
            residual: true,
            d_node,
            d_edge,
        })
    }

    pub fn identity(d_node: usize, d_edge: usize, residual: bool) -> Self {
        Self {
            g1: Perceptron::Identity,
            g2: Perceptron::Identity,
            residual,
            d_node,
            d_edge,
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        nodes: Var,
        edges: Option<Var>,
        triples: &[Triple],
    ) -> Result<(Var, Option<Var>)> {
        let n = g.shape(nodes)[0];
        let (pooled, new_edges) = match edges {
            Some(e) if !triples.is_empty() => {
                let subj: Vec<usize> = triples.iter().map(|t| t.subject).collect();
                let obj: Vec<usize> = triples.iter().map(|t| t.object).collect();
                let edge_idx: Vec<usize> = triples.iter().map(|t| t.edge).collect();
                let s = g.index_rows(nodes, &subj)?;
                let o = g.index_rows(nodes, &obj)?;
                let e_rows = if edge_idx.iter().enumerate().all(|(k, &i)| k == i) && g.shape(e)[0] == triples.len() {
                    e
                } else {
                    g.index_rows(e, &edge_idx)?
                };
                let x = g.concat(&[s, e_rows, o], 1)?;
                let y = self.g1.forward(g, store, x)?;
                let s2 = g.slice(y, 1, 0, self.d_node)?;
                let e2 = g.slice(y, 1, self.d_node, self.d_edge)?;
                let o2 = g.slice(y, 1, self.d_node + self.d_edge, self.d_node)?;
                let cand = g.concat(&[s2, o2], 0)?;
                let (pool, iso) = pooling_matrices(n, triples)?;
                let pool = g.constant(pool)?;
                let mut pooled = g.matmul(pool, cand)?;
                if let Some(iso) = iso {
                    let iso = g.constant(iso)?;
                    let keep = g.mul(iso, nodes)?;
                    pooled = g.add(pooled, keep)?;
                }
                let new_e = if self.residual { g.add(e2, e_rows)? } else { e2 };
                (pooled, Some(new_e))
            }
            other => (nodes, other),
        };
        let mut out = self.g2.forward(g, store, pooled)?;
        if self.residual {
            out = g.add(out, nodes)?;
        }
        Ok((out, new_edges))
    }
}

/// Mean-pooling matrix `[n, 2T]` over the stacked subject and object
/// candidates, and a `[n, 1]` indicator of nodes in no triple (if any).
fn pooling_matrices(n: usize, triples: &[Triple]) -> Result<(Tensor, Option<Tensor>)> {
    let t = triples.len();
    let mut count = vec![0usize; n];
    for tr in triples {
        count[tr.subject] += 1;
        count[tr.object] += 1;
    }
    let mut p = vec![0.0; n * 2 * t];
    for (k, tr) in triples.iter().enumerate() {
        p[tr.subject * 2 * t + k] += 1.0 / count[tr.subject] as f64;
        p[tr.object * 2 * t + t + k] += 1.0 / count[tr.object] as f64;
    }
    let iso = if count.contains(&0) {
        let v = count.iter().map(|&c| if c == 0 { 1.0 } else { 0.0 }).collect();
        Some(Tensor::new(&[n, 1], v)?)
    } else {
        None
    };
    Ok((Tensor::new(&[n, 2 * t], p)?, iso))
}

/// Runs a stack of layers.
pub fn gcn_forward(
    layers: &[TripletGcnLayer],
    g: &mut Graph,
    store: &ParamStore,
    nodes: Var,
    edges: Option<Var>,
    triples: &[Triple],
) -> Result<(Var, Option<Var>)> {
    let (mut n, mut e) = (nodes, edges);
    for l in layers {
        (n, e) = l.forward(g, store, n, e, triples)?;
    }
    Ok((n, e))
}

/// Per-node Gaussian, `[N, D_Z]` each.
#[derive(Debug, Clone, Copy)]
pub struct GaussianLatent {
    pub mu: Var,
    pub log_sigma: Var,
}

/// Boxes decoded for every node of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct LayoutSample {
    pub boxes: Vec<BoundingBox>,
}

impl LayoutSample {
    /// Converts a `[N, 4]` tensor of decoded coordinates, clamping so every
    /// box satisfies the box invariants despite rounding.
    pub fn from_tensor(t: &Tensor) -> Self {
        let boxes = t
            .data()
            .chunks(4)
            .map(|c| {
                let w = c[2].clamp(MIN_BOX, 1.0);
                let h = c[3].clamp(MIN_BOX, 1.0);
                let x = c[0].clamp(0.0, 1.0 - w);
                let y = c[1].clamp(0.0, 1.0 - h);
                BoundingBox { x, y, w, h }
            })
            .collect();
        Self { boxes }
    }
}

pub struct SlVae {
    pub encoder: Vec<TripletGcnLayer>,
    pub mu_head: Linear,
    pub log_sigma_head: Linear,
    pub layout_decoder: Vec<TripletGcnLayer>,
    pub layout_head: Linear,
    pub semantic_decoder: Vec<TripletGcnLayer>,
    pub semantic_head: Linear,
}

impl SlVae {
    pub fn new(store: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        let stack = |store: &mut ParamStore, name: &str, d_node: usize, rng: &mut Rng| {
            (0..GCN_LAYERS)
                .map(|l| TripletGcnLayer::new(store, &format!("{name}.{l}"), d_node, D_EDGE, rng))
                .collect::<Result<Vec<_>>>()
        };
        let encoder = stack(store, "slvae.enc", D_NODE, rng)?;
        let mu_head = Linear::new(store, "slvae.mu", D_NODE, D_Z, rng)?;
        let log_sigma_head = Linear::zeros(store, "slvae.log_sigma", D_NODE, D_Z)?;
        let layout_decoder = stack(store, "slvae.layout", D_DEC, rng)?;
        let layout_head = Linear::new(store, "slvae.layout_head", D_DEC, 4, rng)?;
        let semantic_decoder = stack(store, "slvae.sem", D_DEC, rng)?;
        let semantic_head = Linear::new(store, "slvae.sem_head", D_DEC, D_SEM, rng)?;
        Ok(Self {
            encoder,
            mu_head,
            log_sigma_head,
            layout_decoder,
            layout_head,
            semantic_decoder,
            semantic_head,
        })
    }

    /// Encodes training-mode node vectors (box codes filled) into a latent.
    pub fn encode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        emb: &Embedder,
        batch: &SceneBatch,
    ) -> Result<GaussianLatent> {
        let nodes = emb.node_vectors_with_boxes(g, store, batch)?;
        let edges = emb.edge_vectors(g, store, batch)?;
        self.encode_vectors(g, store, nodes, edges, &batch.triples)
    }

    pub fn encode_vectors(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        nodes: Var,
        edges: Option<Var>,
        triples: &[Triple],
    ) -> Result<GaussianLatent> {
        let (h, _) = gcn_forward(&self.encoder, g, store, nodes, edges, triples)?;
        Ok(GaussianLatent {
            mu: self.mu_head.forward(g, store, h)?,
            log_sigma: self.log_sigma_head.forward(g, store, h)?,
        })
    }

    /// Decodes `[N, 4]` boxes as `(x, y, w, h)`: a sigmoid squash, sizes
    /// mapped into `[1/64, 1]` and corners into `[0, 1 - size]`.
    pub fn decode_layout(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        emb: &Embedder,
        batch: &SceneBatch,
        u: Var,
    ) -> Result<Var> {
        let h = self.decode_states(&self.layout_decoder, g, store, emb, batch, u)?;
        let raw = self.layout_head.forward(g, store, h)?;
        squash_boxes(g, raw)
    }

    /// Decodes `[N, D_SEM]` semantic vectors.
    pub fn decode_semantics(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        emb: &Embedder,
        batch: &SceneBatch,
        u: Var,
    ) -> Result<Var> {
        let h = self.decode_states(&self.semantic_decoder, g, store, emb, batch, u)?;
        self.semantic_head.forward(g, store, h)
    }

    fn decode_states(
        &self,
        layers: &[TripletGcnLayer],
        g: &mut Graph,
        store: &ParamStore,
        emb: &Embedder,
        batch: &SceneBatch,
        u: Var,
    ) -> Result<Var> {
        let nodes = emb.decoder_inputs(g, store, batch, u)?;
        let edges = emb.edge_vectors(g, store, batch)?;
        let (h, _) = gcn_forward(layers, g, store, nodes, edges, &batch.triples)?;
        Ok(h)
    }
}

fn squash_boxes(g: &mut Graph, raw: Var) -> Result<Var> {
    let n = g.shape(raw)[0];
    let s = g.sigmoid(raw)?;
    let s_xy = g.slice(s, 1, 0, 2)?;
    let s_wh = g.slice(s, 1, 2, 2)?;
    let wh = g.scale(s_wh, 1.0 - MIN_BOX)?;
    let floor = g.constant(Tensor::full(&[1, 2], MIN_BOX))?;
    let wh = g.add(wh, floor)?;
    let ones = g.constant(Tensor::ones(&[n, 2]))?;
    let room = g.sub(ones, wh)?;
    let xy = g.mul(s_xy, room)?;
    Ok(g.concat(&[xy, wh], 1)?)
}

/// Reparameterized draw `mu + exp(log_sigma) * eps`.
pub fn sample_latent(g: &mut Graph, lat: &GaussianLatent, eps: Tensor) -> Result<Var> {
    let sigma = g.exp(lat.log_sigma)?;
    let eps = g.constant(eps)?;
    let noise = g.mul(sigma, eps)?;
    Ok(g.add(lat.mu, noise)?)
}

/// Per-node KL divergence to the standard normal, `[N, 1]`:
/// `sum_d 0.5 (mu^2 + sigma^2 - 1 - 2 log sigma)`.
pub fn kl_per_node(g: &mut Graph, lat: &GaussianLatent) -> Result<Var> {
    let n = g.shape(lat.mu)[0];
    let d = g.shape(lat.mu)[1];
    let mu2 = g.square(lat.mu)?;
    let two_ls = g.scale(lat.log_sigma, 2.0)?;
    let var = g.exp(two_ls)?;
    let a = g.add(mu2, var)?;
    let a = g.sub(a, two_ls)?;
    let half = g.constant(Tensor::full(&[d, 1], 0.5))?;
    let per = g.matmul(a, half)?;
    let offset = g.constant(Tensor::full(&[n, 1], 0.5 * d as f64))?;
    Ok(g.sub(per, offset)?)
}

/// KL term: mean over nodes (weighted by `weights`, `[N, 1]`).
pub fn kl_loss(g: &mut Graph, lat: &GaussianLatent, weights: &Tensor) -> Result<Var> {
    let per = kl_per_node(g, lat)?;
    let w = g.constant(weights.clone())?;
    let p = g.mul(per, w)?;
    Ok(g.sum(p)?)
}

/// Layout term: `(1/N) sum_i |b_i - b̂_i|_1` (weighted per node).
pub fn layout_loss(g: &mut Graph, pred: Var, gt: &[BoundingBox], weights: &Tensor) -> Result<Var> {
    let n = g.shape(pred)[0];
    if n != gt.len() {
        return Err(Error::LengthMismatch {
            what: "layout loss",
            left: n,
            right: gt.len(),
        });
    }
    let data: Vec<f64> = gt.iter().flat_map(|b| b.to_array()).collect();
    let gt = g.constant(Tensor::new(&[n, 4], data)?)?;
    let d = g.sub(pred, gt)?;
    let w = g.constant(weights.clone())?;
    let d = g.mul(d, w)?;
    Ok(g.l1(d)?)
}

/// Unweighted per-scene layout loss on plain boxes.
pub fn layout_l1(pred: &[BoundingBox], gt: &[BoundingBox]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::LengthMismatch {
            what: "layout loss",
            left: pred.len(),
            right: gt.len(),
        });
    }
    let total: f64 = pred
        .iter()
        .zip(gt)
        .map(|(p, q)| {
            p.to_array()
                .iter()
                .zip(q.to_array())
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
        })
        .sum();
    Ok(total / pred.len() as f64)
}
