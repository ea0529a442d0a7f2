//! The full model: embedder, SL-VAE and denoiser sharing one parameter
//! store, with the joint training objective and inference helpers.

use serde::{Deserialize, Serialize};
use tensor::{Graph, ParamStore, Rng, Tensor, Var};

use crate::cmadiff::{
    patchify, unpatchify, BatchCond, Denoiser, NoisePredictor, NoiseSchedule, ObjectCond, Query, ScheduleConfig,
};
use crate::embed::{Embedder, SceneBatch, D_TEXT};
use crate::error::Result;
use crate::image::NUMEL;
use crate::scene::{BoundingBox, SceneGraph, N_MAX};
use crate::slvae::{self, LayoutSample, SlVae, D_SEM, D_Z};
use crate::vocab::Vocabulary;

/// Weights of the diffusion, KL and layout terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub diffusion: f64,
    pub union: f64,
    pub layout: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            diffusion: 1.0,
            union: 0.1,
            layout: 1.0,
        }
    }
}

/// `w.diffusion * ldm + w.union * kl + w.layout * layout`.
pub fn total_loss(w: &LossWeights, ldm: f64, kl: f64, layout: f64) -> f64 {
    w.diffusion * ldm + w.union * kl + w.layout * layout
}

/// Loss nodes of one training batch.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub diffusion: Var,
    pub union: Var,
    pub layout: Var,
}

/// One decoded (layout, semantics) draw for every node of a graph.
#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub boxes: Vec<BoundingBox>,
    pub semantics: Vec<Vec<f64>>,
}

pub struct Model {
    pub store: ParamStore,
    pub embedder: Embedder,
    pub vae: SlVae,
    pub denoiser: Denoiser,
    pub schedule: NoiseSchedule,
}

impl Model {
    pub fn new(vocab: Vocabulary, schedule: ScheduleConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(seed).split(0x1417);
        let embedder = Embedder::new(&mut store, vocab, &mut rng)?;
        let vae = SlVae::new(&mut store, &mut rng)?;
        let denoiser = Denoiser::new(&mut store, &mut rng)?;
        Ok(Self {
            store,
            embedder,
            vae,
            denoiser,
            schedule: NoiseSchedule::new(schedule)?,
        })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.embedder.vocab
    }

    /// Builds the joint objective for `(graph with boxes, image in [-1, 1])`
    /// pairs. `rng` supplies latent noise, condition dropout, timesteps and
    /// diffusion noise, in that order.
    pub fn loss(
        &self,
        g: &mut Graph,
        items: &[(&SceneGraph, &[f64])],
        weights: &LossWeights,
        cond_dropout: f64,
        rng: &mut Rng,
    ) -> Result<LossTerms> {
        let store = &self.store;
        let graphs: Vec<&SceneGraph> = items.iter().map(|(s, _)| *s).collect();
        let batch = SceneBatch::new(graphs.clone());
        let node_w = batch.node_weights()?;

        let lat = self.vae.encode(g, store, &self.embedder, &batch)?;
        let eps_u = rng.normal_tensor(&[batch.n_nodes, D_Z]);
        let u = slvae::sample_latent(g, &lat, eps_u)?;
        let layout = self.vae.decode_layout(g, store, &self.embedder, &batch, u)?;
        let sem = self.vae.decode_semantics(g, store, &self.embedder, &batch, u)?;
        let union = slvae::kl_loss(g, &lat, &node_w)?;
        let gt: Vec<BoundingBox> = graphs.iter().map(|s| s.boxes()).collect::<Result<Vec<_>>>()?.concat();
        let layout_l = slvae::layout_loss(g, layout, &gt, &node_w)?;

        let keep: Vec<bool> = graphs.iter().map(|_| !rng.bernoulli(cond_dropout)).collect();
        let cond = self.training_cond(g, &batch, sem, &keep)?;

        let b = items.len();
        let mut zt = Vec::with_capacity(b * NUMEL);
        let mut target = Vec::with_capacity(b * NUMEL);
        let mut ts = Vec::with_capacity(b);
        for (_, x0) in items {
            let t = rng.range_inclusive(1, self.schedule.steps());
            let eps = rng.normal_vec(NUMEL);
            zt.extend(patchify(&self.schedule.add_noise(x0, t, &eps)?));
            target.extend(patchify(&eps));
            ts.push(t);
        }
        let rows = b * NUMEL / crate::cmadiff::denoiser::PATCH_DIM;
        let z = g.constant(Tensor::new(&[rows, crate::cmadiff::denoiser::PATCH_DIM], zt)?)?;
        let target = g.constant(Tensor::new(&[rows, crate::cmadiff::denoiser::PATCH_DIM], target)?)?;
        let pred = self.denoiser.forward(g, store, z, &ts, &cond, None)?;
        let diff = g.sub(pred, target)?;
        let sq = g.square(diff)?;
        let diffusion = g.mean(sq)?;

        let a = g.scale(diffusion, weights.diffusion)?;
        let c = g.scale(union, weights.union)?;
        let d = g.scale(layout_l, weights.layout)?;
        let total = g.add(a, c)?;
        let total = g.add(total, d)?;
        Ok(LossTerms {
            total,
            diffusion,
            union,
            layout: layout_l,
        })
    }

    /// Conditioning from decoded semantics and ground-truth boxes; items with
    /// `keep[b] == false` are unconditional.
    fn training_cond(&self, g: &mut Graph, batch: &SceneBatch, sem: Var, keep: &[bool]) -> Result<BatchCond> {
        let b = batch.graphs.len();
        let rows = b * N_MAX;
        let mut place = vec![0.0; rows * batch.n_nodes];
        let mut slots: Vec<Option<&[String]>> = vec![None; rows];
        let mut text = vec![0.0; rows * D_TEXT];
        let mut boxes = Vec::with_capacity(b);
        for (i, s) in batch.graphs.iter().enumerate() {
            if !keep[i] {
                boxes.push(Vec::new());
                continue;
            }
            for (k, node) in s.nodes.iter().enumerate() {
                let r = i * N_MAX + k;
                place[r * batch.n_nodes + batch.node_offsets[i] + k] = 1.0;
                slots[r] = Some(&node.attributes);
                text[r * D_TEXT..(r + 1) * D_TEXT].copy_from_slice(&self.embedder.text_vec(&node.category));
            }
            boxes.push(s.boxes()?);
        }
        let place = g.constant(Tensor::new(&[rows, batch.n_nodes], place)?)?;
        let semantics = g.matmul(place, sem)?;
        let attributes = self.embedder.attribute_vectors(g, &self.store, &slots)?;
        Ok(BatchCond {
            semantics,
            attributes,
            text: Tensor::new(&[rows, D_TEXT], text)?,
            boxes,
        })
    }

    /// Prior latent rows for a graph: row `i` is drawn from stream `i` of
    /// `view_seed`, so it does not depend on the other nodes.
    pub fn prior_latents(n_nodes: usize, view_seed: u64) -> Vec<Vec<f64>> {
        (0..n_nodes)
            .map(|i| Rng::with_stream(view_seed, i as u64).normal_vec(D_Z))
            .collect()
    }

    /// Decodes boxes and semantics from explicit latent rows.
    pub fn decode_view(&self, graph: &SceneGraph, latents: &[Vec<f64>]) -> Result<View> {
        let batch = SceneBatch::single(graph);
        let mut g = Graph::new();
        let u: Vec<f64> = latents.concat();
        let u = g.constant(Tensor::new(&[graph.len(), D_Z], u)?)?;
        let layout = self.vae.decode_layout(&mut g, &self.store, &self.embedder, &batch, u)?;
        let sem = self.vae.decode_semantics(&mut g, &self.store, &self.embedder, &batch, u)?;
        Ok(View {
            boxes: LayoutSample::from_tensor(g.value(layout)).boxes,
            semantics: g.value(sem).data().chunks(D_SEM).map(<[f64]>::to_vec).collect(),
        })
    }

    /// One (layout, semantics) draw from the prior.
    pub fn draw_view(&self, graph: &SceneGraph, view_seed: u64) -> Result<View> {
        self.decode_view(graph, &Self::prior_latents(graph.len(), view_seed))
    }

    /// Denoiser conditioning for every node of `graph` under `view`; boxes
    /// in `boxes` (if given) replace the decoded ones.
    pub fn object_conds(&self, graph: &SceneGraph, view: &View) -> Result<Vec<ObjectCond>> {
        graph
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| {
                Ok(ObjectCond {
                    semantics: view.semantics[i].clone(),
                    bbox: view.boxes[i],
                    attribute: self.embedder.attribute_value(&self.store, &n.attributes)?,
                    text: self.embedder.text_vec(&n.category),
                })
            })
            .collect()
    }

    /// Runs the denoiser on plain inputs. `z` holds one `[16, 16, 3]` image
    /// per item.
    pub fn predict_eps(&self, t: &[usize], z: &[&[f64]], objects: &[&[ObjectCond]]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let cond = BatchCond::constant(&mut g, &self.store, &self.embedder, objects)?;
        let data: Vec<f64> = z.iter().flat_map(|z| patchify(z)).collect();
        let pd = crate::cmadiff::denoiser::PATCH_DIM;
        let zv = g.constant(Tensor::new(&[data.len() / pd, pd], data)?)?;
        let out = self.denoiser.forward(&mut g, &self.store, zv, t, &cond, None)?;
        Ok(g.value(out).data().chunks(NUMEL).map(unpatchify).collect())
    }
}

impl NoisePredictor for Model {
    fn predict(&self, t: usize, queries: &[Query]) -> Result<Vec<Vec<f64>>> {
        let ts = vec![t; queries.len()];
        let z: Vec<&[f64]> = queries.iter().map(|q| q.z).collect();
        let objs: Vec<&[ObjectCond]> = queries.iter().map(|q| q.objects).collect();
        self.predict_eps(&ts, &z, &objs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn total_loss_arithmetic() {
        let w = LossWeights::default();
        assert_eq!((w.diffusion, w.union, w.layout), (1.0, 0.1, 1.0));
        assert!((total_loss(&w, 2.0, 1.0, 0.5) - 2.6).abs() < 1e-15);
    }

    #[test]
    fn prior_rows_are_per_node_streams() {
        let a = Model::prior_latents(3, 9);
        let b = Model::prior_latents(5, 9);
        assert_eq!(a[..], b[..3]);
        assert_ne!(a[0], a[1]);
    }
}
