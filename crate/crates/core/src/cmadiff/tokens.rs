//! Object tokens: semantics fused with a Fourier code of the box, then
//! concatenated with a processed attribute vector. Unused slots are filled
//! with learnable null embeddings.

use tensor::{Graph, ParamId, ParamStore, Rng, Tensor, Var};

use crate::embed::{Embedder, D_ATTR, D_TEXT};
use crate::error::{Error, Result};
use crate::nn::{self, Mlp};
use crate::scene::{BoundingBox, N_MAX};
use crate::slvae::D_SEM;

pub const FOURIER_FREQS: usize = 8;
pub const D_FOURIER: usize = 4 * 2 * FOURIER_FREQS;
/// Width of `[semantics, Fourier(box)]` before processing.
pub const D_FUSED: usize = D_SEM + D_FOURIER;
pub const D_TOKEN_SEM: usize = 64;
pub const D_TOKEN_ATTR: usize = 32;
/// Width of a finished object token.
pub const D_TOKEN: usize = D_TOKEN_SEM + D_TOKEN_ATTR;

/// `[sin(2^k pi v), cos(2^k pi v)]` for `k = 0..8`, per coordinate
/// `(x, y, w, h)` in that order.
pub fn fourier(b: &BoundingBox) -> [f64; D_FOURIER] {
    let mut out = [0.0; D_FOURIER];
    for (c, v) in b.to_array().iter().enumerate() {
        for k in 0..FOURIER_FREQS {
            let a = (1u32 << k) as f64 * std::f64::consts::PI * v;
            out[c * 2 * FOURIER_FREQS + 2 * k] = a.sin();
            out[c * 2 * FOURIER_FREQS + 2 * k + 1] = a.cos();
        }
    }
    out
}

/// Conditioning of one object for a denoiser call, as plain values.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectCond {
    pub semantics: Vec<f64>,
    pub bbox: BoundingBox,
    pub attribute: Vec<f64>,
    pub text: Vec<f64>,
}

/// Conditioning of a batch of denoiser calls. Item `b` owns slot rows
/// `b * N_MAX .. (b + 1) * N_MAX`; its first `boxes[b].len()` slots are
/// objects and the rest are padding. An item with no boxes is unconditional.
#[derive(Debug, Clone)]
pub struct BatchCond {
    /// `[B * N_MAX, D_SEM]`, rows of padded slots ignored.
    pub semantics: Var,
    /// `[B * N_MAX, D_ATTR]`, padded slots hold the null attribute vector.
    pub attributes: Var,
    /// `[B * N_MAX, D_TEXT]`, rows of padded slots ignored.
    pub text: Tensor,
    pub boxes: Vec<Vec<BoundingBox>>,
}

impl BatchCond {
    pub fn batch(&self) -> usize {
        self.boxes.len()
    }

    /// `[B * N_MAX, 1]` indicator of object slots.
    pub fn valid(&self) -> Tensor {
        let v: Vec<f64> = self
            .boxes
            .iter()
            .flat_map(|b| (0..N_MAX).map(move |k| if k < b.len() { 1.0 } else { 0.0 }))
            .collect();
        Tensor::new(&[v.len(), 1], v).expect("non-empty batch")
    }

    /// Builds constant conditioning from per-item object lists (empty list =
    /// unconditional).
    pub fn constant(g: &mut Graph, store: &ParamStore, emb: &Embedder, items: &[&[ObjectCond]]) -> Result<Self> {
        let rows = items.len() * N_MAX;
        let null = store.get(emb.attribute_null).data().to_vec();
        let mut sem = vec![0.0; rows * D_SEM];
        let mut attr = Vec::with_capacity(rows * D_ATTR);
        let mut text = vec![0.0; rows * D_TEXT];
        let mut boxes = Vec::with_capacity(items.len());
        for (b, objs) in items.iter().enumerate() {
            if objs.len() > N_MAX {
                return Err(Error::Constraint(format!("{} objects exceed {N_MAX} slots", objs.len())));
            }
            for k in 0..N_MAX {
                let r = b * N_MAX + k;
                match objs.get(k) {
                    Some(o) => {
                        check_len("semantics", o.semantics.len(), D_SEM)?;
                        check_len("attribute", o.attribute.len(), D_ATTR)?;
                        check_len("text", o.text.len(), D_TEXT)?;
                        sem[r * D_SEM..(r + 1) * D_SEM].copy_from_slice(&o.semantics);
                        attr.extend_from_slice(&o.attribute);
                        text[r * D_TEXT..(r + 1) * D_TEXT].copy_from_slice(&o.text);
                    }
                    None => attr.extend_from_slice(&null),
                }
            }
            boxes.push(objs.iter().map(|o| o.bbox).collect());
        }
        Ok(Self {
            semantics: g.constant(Tensor::new(&[rows, D_SEM], sem)?)?,
            attributes: g.constant(Tensor::new(&[rows, D_ATTR], attr)?)?,
            text: Tensor::new(&[rows, D_TEXT], text)?,
            boxes,
        })
    }
}

fn check_len(what: &'static str, got: usize, want: usize) -> Result<()> {
    if got == want {
        Ok(())
    } else {
        Err(Error::LengthMismatch {
            what,
            left: got,
            right: want,
        })
    }
}

/// Learnable pieces of the tokenizer.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    pub text_null: ParamId,
    pub mlp_c: Mlp,
    pub mlp_a: Mlp,
}

impl Tokenizer {
    pub fn new(store: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            text_null: nn::table(store, "tok.text_null", 1, D_TEXT, 0.1, rng)?,
            mlp_c: Mlp::new(store, "tok.mlp_c", [D_FUSED, 64, D_TOKEN_SEM], rng)?,
            mlp_a: Mlp::new(store, "tok.mlp_a", [D_ATTR, 32, D_TOKEN_ATTR], rng)?,
        })
    }

    /// Fused `[B * N_MAX, 128]` vectors before processing: `[s_i, F(b_i)]`
    /// for object slots, zeros elsewhere. Padded slots are masked out of
    /// every visual query, so their content never reaches the output.
    pub fn fused(g: &mut Graph, cond: &BatchCond) -> Result<Var> {
        let rows = cond.batch() * N_MAX;
        let mut four = vec![0.0; rows * D_FOURIER];
        for (b, boxes) in cond.boxes.iter().enumerate() {
            for (k, bb) in boxes.iter().enumerate() {
                let r = b * N_MAX + k;
                four[r * D_FOURIER..(r + 1) * D_FOURIER].copy_from_slice(&fourier(bb));
            }
        }
        let four = g.constant(Tensor::new(&[rows, D_FOURIER], four)?)?;
        Ok(g.concat(&[cond.semantics, four], 1)?)
    }

    /// Object tokens `[B * N_MAX, D_TOKEN]` and cross-attention context
    /// `[B * N_MAX, D_TEXT]`.
    pub fn tokens(&self, g: &mut Graph, store: &ParamStore, cond: &BatchCond) -> Result<(Var, Var)> {
        let c = Self::fused(g, cond)?;
        let c = self.mlp_c.forward(g, store, c)?;
        let a = self.mlp_a.forward(g, store, cond.attributes)?;
        let tokens = g.concat(&[c, a], 1)?;
        let text = g.constant(cond.text.clone())?;
        let context = self.fill_null(g, store, text, self.text_null, cond)?;
        Ok((tokens, context))
    }

    fn fill_null(&self, g: &mut Graph, store: &ParamStore, x: Var, null: ParamId, cond: &BatchCond) -> Result<Var> {
        let valid = cond.valid();
        let invalid = valid.map(|v| 1.0 - v);
        let valid = g.constant(valid)?;
        let invalid = g.constant(invalid)?;
        let kept = g.mul(x, valid)?;
        let null = g.param(store, null);
        let fill = g.mul(invalid, null)?;
        Ok(g.add(kept, fill)?)
    }
}
