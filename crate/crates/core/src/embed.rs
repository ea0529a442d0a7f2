//! Textual scene-graph embeddings: node, edge and attribute vectors built from
//! learnable vocabulary tables, a text encoder and a box encoder.

use std::collections::HashMap;
use std::sync::Arc;

use tensor::{Graph, ParamId, ParamStore, Rng, Tensor, Var};

use crate::error::Result;
use crate::nn::{self, Mlp};
use crate::scene::{BoundingBox, SceneGraph, Triple};
use crate::vocab::Vocabulary;

pub const D_TEXT: usize = 32;
pub const D_TABLE: usize = 32;
pub const D_BOX: usize = 16;
pub const D_ATTR_ROW: usize = 16;
/// Node vector: category row, text, box code.
pub const D_NODE: usize = D_TABLE + D_TEXT + D_BOX;
/// Edge vector: predicate row, text.
pub const D_EDGE: usize = D_TABLE + D_TEXT;
/// Attribute vector: mean attribute row, text.
pub const D_ATTR: usize = D_ATTR_ROW + D_TEXT;

/// Maps a string to a fixed vector.
pub trait TextEncoder: Send + Sync {
    fn dim(&self) -> usize;
    fn encode(&self, text: &str) -> Vec<f64>;
}

/// Deterministic stand-in for a pretrained text encoder: the FNV-1a hash of
/// the string seeds a random stream, whose first `dim` normal draws are
/// scaled to unit length.
#[derive(Debug, Clone, Copy)]
pub struct HashTextEncoder {
    dim: usize,
}

impl HashTextEncoder {
    pub fn new(dim: usize) -> Self {
        Self { dim }
    }
}

impl Default for HashTextEncoder {
    fn default() -> Self {
        Self::new(D_TEXT)
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl TextEncoder for HashTextEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> Vec<f64> {
        let mut rng = Rng::new(fnv1a(text.as_bytes()));
        let mut v = rng.normal_vec(self.dim);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in &mut v {
            *x /= norm;
        }
        v
    }
}

/// Several scene graphs treated as one disjoint union: node and edge rows of
/// graph `k` follow those of graphs `0..k`, and triples use global indices.
#[derive(Debug, Clone)]
pub struct SceneBatch<'a> {
    pub graphs: Vec<&'a SceneGraph>,
    pub node_offsets: Vec<usize>,
    pub triples: Vec<Triple>,
    pub n_nodes: usize,
}

impl<'a> SceneBatch<'a> {
    pub fn new(graphs: Vec<&'a SceneGraph>) -> Self {
        let mut node_offsets = Vec::with_capacity(graphs.len());
        let mut triples = Vec::new();
        let (mut n, mut e) = (0, 0);
        for g in &graphs {
            node_offsets.push(n);
            for t in g.triples() {
                triples.push(Triple {
                    subject: t.subject + n,
                    edge: t.edge + e,
                    object: t.object + n,
                });
            }
            n += g.nodes.len();
            e += g.edges.len();
        }
        Self {
            graphs,
            node_offsets,
            triples,
            n_nodes: n,
        }
    }

    pub fn single(g: &'a SceneGraph) -> Self {
        Self::new(vec![g])
    }

    pub fn n_edges(&self) -> usize {
        self.triples.len()
    }

    /// Every node of every graph, in row order.
    pub fn nodes(&self) -> impl Iterator<Item = &'a crate::scene::Node> + '_ {
        self.graphs.iter().flat_map(|g| g.nodes.iter())
    }

    /// Per-row weights `1 / (N_o * B)` so that summing a per-node quantity
    /// yields the mean over graphs of the mean over nodes.
    pub fn node_weights(&self) -> Result<Tensor> {
        let b = self.graphs.len() as f64;
        let w: Vec<f64> = self
            .graphs
            .iter()
            .flat_map(|g| std::iter::repeat_n(1.0 / (g.nodes.len() as f64 * b), g.nodes.len()))
            .collect();
        Ok(Tensor::new(&[self.n_nodes, 1], w)?)
    }
}

/// Learnable vocabulary tables, null attribute row and box encoder.
pub struct Embedder {
    pub vocab: Vocabulary,
    pub text: Arc<dyn TextEncoder>,
    pub category: ParamId,
    pub predicate: ParamId,
    pub attribute: ParamId,
    pub attribute_null: ParamId,
    pub box_encoder: Mlp,
    cache: std::sync::Mutex<HashMap<String, Vec<f64>>>,
}

impl Embedder {
    pub fn new(store: &mut ParamStore, vocab: Vocabulary, rng: &mut Rng) -> Result<Self> {
        Self::with_encoder(store, vocab, Arc::new(HashTextEncoder::default()), rng)
    }

    pub fn with_encoder(
        store: &mut ParamStore,
        vocab: Vocabulary,
        text: Arc<dyn TextEncoder>,
        rng: &mut Rng,
    ) -> Result<Self> {
        assert_eq!(text.dim(), D_TEXT, "text encoder must produce {D_TEXT} values");
        let scale = 1.0 / (D_TABLE as f64).sqrt();
        let category = nn::table(store, "embed.category", vocab.categories.len(), D_TABLE, scale, rng)?;
        let predicate = nn::table(store, "embed.predicate", vocab.predicates.len(), D_TABLE, scale, rng)?;
        let attribute = nn::table(
            store,
            "embed.attribute",
            vocab.attributes.len().max(1),
            D_ATTR_ROW,
            1.0 / (D_ATTR_ROW as f64).sqrt(),
            rng,
        )?;
        let attribute_null = nn::table(store, "embed.attribute_null", 1, D_ATTR, 0.1, rng)?;
        let box_encoder = Mlp::new(store, "embed.box", [4, 32, D_BOX], rng)?;
        Ok(Self {
            vocab,
            text,
            category,
            predicate,
            attribute,
            attribute_null,
            box_encoder,
            cache: Default::default(),
        })
    }

    /// Text vector of `s`, memoized.
    pub fn text_vec(&self, s: &str) -> Vec<f64> {
        let mut cache = self.cache.lock().expect("text cache poisoned");
        cache.entry(s.to_string()).or_insert_with(|| self.text.encode(s)).clone()
    }

    fn text_rows<'s>(&self, strings: impl Iterator<Item = &'s str>) -> Result<Tensor> {
        let rows: Vec<Vec<f64>> = strings.map(|s| self.text_vec(s)).collect();
        let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        nn::rows_tensor(&refs, D_TEXT)
    }

    fn category_rows(&self, g: &mut Graph, store: &ParamStore, batch: &SceneBatch) -> Result<Var> {
        let idx = batch
            .nodes()
            .map(|n| self.vocab.category(&n.category))
            .collect::<Result<Vec<_>>>()?;
        let table = g.param(store, self.category);
        Ok(g.index_rows(table, &idx)?)
    }

    /// `[N, 80]` node vectors. With `boxes`, the last 16 columns encode each
    /// node's box; without, they are zero.
    pub fn node_vectors(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &SceneBatch,
        boxes: Option<&[BoundingBox]>,
    ) -> Result<Var> {
        let cat = self.category_rows(g, store, batch)?;
        let text = self.text_rows(batch.nodes().map(|n| n.category.as_str()))?;
        let text = g.constant(text)?;
        let code = self.box_code(g, store, batch.n_nodes, boxes)?;
        Ok(g.concat(&[cat, text, code], 1)?)
    }

    /// Node vectors using the boxes stored in the graphs (training mode).
    pub fn node_vectors_with_boxes(&self, g: &mut Graph, store: &ParamStore, batch: &SceneBatch) -> Result<Var> {
        let boxes = batch
            .graphs
            .iter()
            .map(|s| s.boxes())
            .collect::<Result<Vec<_>>>()?
            .concat();
        self.node_vectors(g, store, batch, Some(&boxes))
    }

    fn box_code(&self, g: &mut Graph, store: &ParamStore, n: usize, boxes: Option<&[BoundingBox]>) -> Result<Var> {
        match boxes {
            Some(b) => {
                let data: Vec<f64> = b.iter().flat_map(|b| b.to_array()).collect();
                let x = g.constant(Tensor::new(&[n, 4], data)?)?;
                self.box_encoder.forward(g, store, x)
            }
            None => Ok(g.constant(Tensor::zeros(&[n, D_BOX]))?),
        }
    }

    /// `[N, 32 + 32 + D_z]` decoder inputs: category row, text, latent row.
    pub fn decoder_inputs(&self, g: &mut Graph, store: &ParamStore, batch: &SceneBatch, u: Var) -> Result<Var> {
        let cat = self.category_rows(g, store, batch)?;
        let text = self.text_rows(batch.nodes().map(|n| n.category.as_str()))?;
        let text = g.constant(text)?;
        Ok(g.concat(&[cat, text, u], 1)?)
    }

    /// Pseudo-text input string of an edge.
    pub fn edge_text(graph: &SceneGraph, k: usize) -> String {
        let e = &graph.edges[k];
        let cat = |id: &str| &graph.nodes[graph.node_index(id).expect("validated edge")].category;
        format!("{} {} {}", cat(&e.subject), e.predicate, cat(&e.object))
    }

    /// `[E, 64]` edge vectors, or `None` when the batch has no edges.
    pub fn edge_vectors(&self, g: &mut Graph, store: &ParamStore, batch: &SceneBatch) -> Result<Option<Var>> {
        if batch.n_edges() == 0 {
            return Ok(None);
        }
        let mut idx = Vec::with_capacity(batch.n_edges());
        let mut texts = Vec::with_capacity(batch.n_edges());
        for s in &batch.graphs {
            for (k, e) in s.edges.iter().enumerate() {
                idx.push(self.vocab.predicate(&e.predicate)?);
                texts.push(Self::edge_text(s, k));
            }
        }
        let table = g.param(store, self.predicate);
        let rows = g.index_rows(table, &idx)?;
        let text = g.constant(self.text_rows(texts.iter().map(String::as_str))?)?;
        Ok(Some(g.concat(&[rows, text], 1)?))
    }

    /// `[slots.len(), 48]` attribute vectors. `None` slots, and slots whose
    /// attribute list is empty, receive the learnable null row.
    pub fn attribute_vectors(&self, g: &mut Graph, store: &ParamStore, slots: &[Option<&[String]>]) -> Result<Var> {
        let r = slots.len();
        let n_attr = self.vocab.attributes.len().max(1);
        let mut avg = vec![0.0; r * n_attr];
        let mut text = vec![0.0; r * D_TEXT];
        let mut null = vec![0.0; r];
        for (i, s) in slots.iter().enumerate() {
            match s {
                Some(attrs) if !attrs.is_empty() => {
                    for a in attrs.iter() {
                        avg[i * n_attr + self.vocab.attribute(a)?] += 1.0 / attrs.len() as f64;
                    }
                    text[i * D_TEXT..(i + 1) * D_TEXT].copy_from_slice(&self.text_vec(&attrs.join(" ")));
                }
                _ => null[i] = 1.0,
            }
        }
        let avg = g.constant(Tensor::new(&[r, n_attr], avg)?)?;
        let table = g.param(store, self.attribute);
        let rows = g.matmul(avg, table)?;
        let text = g.constant(Tensor::new(&[r, D_TEXT], text)?)?;
        let present = g.concat(&[rows, text], 1)?;
        let null = g.constant(Tensor::new(&[r, 1], null)?)?;
        let a_null = g.param(store, self.attribute_null);
        let fill = g.mul(null, a_null)?;
        Ok(g.add(present, fill)?)
    }

    /// Attribute vector of a single node as plain values.
    pub fn attribute_value(&self, store: &ParamStore, attrs: &[String]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let v = self.attribute_vectors(&mut g, store, &[Some(attrs)])?;
        Ok(g.value(v).data().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::Node;

    fn vocab() -> Vocabulary {
        Vocabulary {
            categories: vec!["circle".into(), "square".into()],
            predicates: vec!["left of".into()],
            attributes: vec!["red".into(), "large".into()],
        }
    }

    fn setup() -> (ParamStore, Embedder) {
        let mut store = ParamStore::new();
        let e = Embedder::new(&mut store, vocab(), &mut Rng::new(1)).unwrap();
        (store, e)
    }

    fn graph() -> SceneGraph {
        SceneGraph {
            nodes: vec![
                Node::new("a", "circle").with_bbox(BoundingBox::new(0.0, 0.0, 0.5, 0.5).unwrap()),
                Node::new("b", "circle")
                    .with_attributes(&["red"])
                    .with_bbox(BoundingBox::new(0.25, 0.5, 0.5, 0.25).unwrap()),
            ],
            edges: vec![crate::scene::Edge::new("a", "left of", "b")],
        }
    }

    #[test]
    fn text_encoder_is_deterministic_unit_norm() {
        let enc = HashTextEncoder::default();
        let mut rng = Rng::new(4);
        for _ in 0..1000 {
            let s: String = (0..rng.range_inclusive(0, 12))
                .map(|_| (b'a' + rng.below(26) as u8) as char)
                .collect();
            let (a, b) = (enc.encode(&s), enc.encode(&s));
            assert_eq!(a, b);
            let n: f64 = a.iter().map(|x| x * x).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
        assert_ne!(enc.encode("circle"), enc.encode("square"));
    }

    #[test]
    fn node_vectors_layout() {
        let (store, e) = setup();
        let s = graph();
        let batch = SceneBatch::single(&s);
        let mut g = Graph::new();
        let v = e.node_vectors_with_boxes(&mut g, &store, &batch).unwrap();
        let t = g.value(v).clone();
        assert_eq!(t.shape(), &[2, D_NODE]);
        assert_eq!(&t.row(0)[..32], store.get(e.category).row(0));
        assert_eq!(&t.row(0)[32..64], e.text_vec("circle").as_slice());
        // Same category, different boxes: shared prefix, different box code.
        assert_eq!(t.row(0)[..64], t.row(1)[..64]);
        assert_ne!(t.row(0)[64..], t.row(1)[64..]);
        // Box code equals the box encoder evaluated directly.
        let mut g2 = Graph::new();
        let x = g2.constant(Tensor::new(&[1, 4], vec![0.25, 0.5, 0.5, 0.25]).unwrap()).unwrap();
        let code = e.box_encoder.forward(&mut g2, &store, x).unwrap();
        assert_eq!(&t.row(1)[64..], g2.value(code).data());

        let v = e.node_vectors(&mut g, &store, &batch, None).unwrap();
        assert!(g.value(v).row(1)[64..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn missing_box_is_an_error() {
        let (store, e) = setup();
        let mut s = graph();
        s.nodes[1].bbox = None;
        let mut g = Graph::new();
        let err = e.node_vectors_with_boxes(&mut g, &store, &SceneBatch::single(&s));
        assert!(matches!(err, Err(crate::Error::MissingBox(id)) if id == "b"));
    }

    #[test]
    fn edge_vectors_use_triple_text() {
        let (store, e) = setup();
        let mut s = graph();
        s.nodes[1].category = "square".into();
        assert_eq!(Embedder::edge_text(&s, 0), "circle left of square");
        s.edges.push(crate::scene::Edge::new("a", "left of", "b"));
        let mut g = Graph::new();
        let v = e.edge_vectors(&mut g, &store, &SceneBatch::single(&s)).unwrap().unwrap();
        let t = g.value(v);
        assert_eq!(t.shape(), &[2, D_EDGE]);
        assert_eq!(t.row(0), t.row(1));
        assert_eq!(&t.row(0)[32..], e.text_vec("circle left of square").as_slice());
        s.edges.clear();
        assert!(e.edge_vectors(&mut g, &store, &SceneBatch::single(&s)).unwrap().is_none());
    }

    #[test]
    fn attribute_vectors_mean_and_null() {
        let (store, e) = setup();
        let red = vec!["red".to_string()];
        let both = vec!["red".to_string(), "large".to_string()];
        let mut g = Graph::new();
        let v = e
            .attribute_vectors(&mut g, &store, &[Some(&red), Some(&both), Some(&[]), None])
            .unwrap();
        let t = g.value(v);
        let table = store.get(e.attribute);
        assert_eq!(&t.row(0)[..16], table.row(0));
        for j in 0..16 {
            let want = 0.5 * (table.at(0, j) + table.at(1, j));
            assert!((t.at(1, j) - want).abs() < 1e-15);
        }
        assert_eq!(&t.row(1)[16..], e.text_vec("red large").as_slice());
        assert_eq!(t.row(2), store.get(e.attribute_null).data());
        assert_eq!(t.row(3), store.get(e.attribute_null).data());
        let bad = vec!["shiny".to_string()];
        assert!(e.attribute_vectors(&mut g, &store, &[Some(&bad)]).is_err());
    }
}
