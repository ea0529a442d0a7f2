//! Transformer noise predictor over 2x2 patches of a 16x16 RGB image.
//!
//! Each block runs, with pre-normalization and residual adds:
//! self-attention over visual tokens, compositional masked attention over
//! visual tokens plus object tokens, cross-attention to per-object text, and a
//! feed-forward layer.

use std::rc::Rc;

use tensor::{AttentionSpec, Graph, ParamId, ParamStore, Rng, Tensor, Var};

use super::mask::{build_cma_mask, query_rows, token_membership};
use super::tokens::{BatchCond, Tokenizer, D_TOKEN};
use crate::embed::D_TEXT;
use crate::error::Result;
use crate::image::{CHANNELS, SIZE};
use crate::nn::{self, Linear, Mlp};
use crate::scene::N_MAX;

pub const PATCH: usize = 2;
pub const GRID: usize = SIZE / PATCH;
pub const N_V: usize = GRID * GRID;
pub const PATCH_DIM: usize = PATCH * PATCH * CHANNELS;
pub const D_V: usize = 64;
pub const HEADS: usize = 4;
pub const BLOCKS: usize = 2;
pub const D_FFN: usize = 128;

/// `[16, 16, 3]` image values to `[64, 12]` patch rows. Patch `(pr, pc)` is
/// row `pr * 8 + pc`; features are ordered `(dy, dx, channel)`.
pub fn patchify(img: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; img.len()];
    for pr in 0..GRID {
        for pc in 0..GRID {
            for dy in 0..PATCH {
                for dx in 0..PATCH {
                    let src = ((pr * PATCH + dy) * SIZE + pc * PATCH + dx) * CHANNELS;
                    let dst = (pr * GRID + pc) * PATCH_DIM + (dy * PATCH + dx) * CHANNELS;
                    out[dst..dst + CHANNELS].copy_from_slice(&img[src..src + CHANNELS]);
                }
            }
        }
    }
    out
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; patches.len()];
    for pr in 0..GRID {
        for pc in 0..GRID {
            for dy in 0..PATCH {
                for dx in 0..PATCH {
                    let dst = ((pr * PATCH + dy) * SIZE + pc * PATCH + dx) * CHANNELS;
                    let src = (pr * GRID + pc) * PATCH_DIM + (dy * PATCH + dx) * CHANNELS;
                    out[dst..dst + CHANNELS].copy_from_slice(&patches[src..src + CHANNELS]);
                }
            }
        }
    }
    out
}

/// Sinusoidal embedding of timestep `t`: `[sin(t f_i), cos(t f_i)]` with
/// `f_i = 10000^(-i/32)`.
pub fn time_embedding(t: usize) -> Vec<f64> {
    let half = D_V / 2;
    let mut out = vec![0.0; D_V];
    for i in 0..half {
        let f = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        out[2 * i] = (t as f64 * f).sin();
        out[2 * i + 1] = (t as f64 * f).cos();
    }
    out
}

#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl Attention {
    fn new(store: &mut ParamStore, name: &str, d_kv: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), D_V, D_V, rng)?,
            k: Linear::new(store, &format!("{name}.k"), d_kv, D_V, rng)?,
            v: Linear::new(store, &format!("{name}.v"), d_kv, D_V, rng)?,
            o: Linear::new(store, &format!("{name}.o"), D_V, D_V, rng)?,
        })
    }

    /// Returns the output projection and the raw attention node.
    fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        kv: Var,
        spec: &AttentionSpec,
    ) -> Result<(Var, Var)> {
        let q = self.q.forward(g, store, x)?;
        let k = self.k.forward(g, store, kv)?;
        let v = self.v.forward(g, store, kv)?;
        let a = g.attention(q, k, v, spec)?;
        Ok((self.o.forward(g, store, a)?, a))
    }
}

#[derive(Debug, Clone)]
pub struct Block {
    pub self_attn: Attention,
    pub cma: Attention,
    pub cma_proj: Mlp,
    pub cross: Attention,
    pub ffn: Mlp,
}

/// Per-batch inputs shared by every block.
pub struct BlockContext {
    pub tokens: Var,
    pub context: Var,
    pub plain: AttentionSpec,
    pub masked: AttentionSpec,
    kv_rows: Vec<usize>,
}

impl BlockContext {
    pub fn new(cond: &BatchCond, tokens: Var, context: Var) -> Self {
        let b = cond.batch();
        let kv_rows = (0..b)
            .flat_map(|i| (i * N_V..(i + 1) * N_V).chain(b * N_V + i * N_MAX..b * N_V + (i + 1) * N_MAX))
            .collect();
        Self {
            tokens,
            context,
            plain: AttentionSpec::new(b, HEADS),
            masked: AttentionSpec::new(b, HEADS).with_masks(Rc::new(Denoiser::cma_masks(cond))),
            kv_rows,
        }
    }
}

impl Block {
    /// One block on visual rows `x` (`[B * 64, 64]`).
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        mut x: Var,
        ctx: &BlockContext,
        trace: Option<&mut AttentionTrace>,
    ) -> Result<Var> {
        let h = g.layer_norm(x)?;
        let (y, a) = self.self_attn.forward(g, store, h, h, &ctx.plain)?;
        x = g.add(x, y)?;

        let h = g.layer_norm(x)?;
        let objs = self.cma_proj.forward(g, store, ctx.tokens)?;
        let joint = g.concat(&[h, objs], 0)?;
        let joint = g.index_rows(joint, &ctx.kv_rows)?;
        let (y, c) = self.cma.forward(g, store, h, joint, &ctx.masked)?;
        x = g.add(x, y)?;

        let h = g.layer_norm(x)?;
        let (y, x_attn) = self.cross.forward(g, store, h, ctx.context, &ctx.plain)?;
        x = g.add(x, y)?;

        let h = g.layer_norm(x)?;
        let y = self.ffn.forward(g, store, h)?;
        x = g.add(x, y)?;

        if let Some(tr) = trace {
            tr.self_attn.push(a);
            tr.cma.push(c);
            tr.cross.push(x_attn);
        }
        Ok(x)
    }
}

/// Attention nodes recorded during a forward pass, one per block.
#[derive(Debug, Default, Clone)]
pub struct AttentionTrace {
    pub self_attn: Vec<Var>,
    pub cma: Vec<Var>,
    pub cross: Vec<Var>,
}

pub struct Denoiser {
    pub tokenizer: Tokenizer,
    pub patch_embed: Linear,
    pub pos: ParamId,
    pub time: Mlp,
    pub blocks: Vec<Block>,
    pub head: Linear,
}

impl Denoiser {
    pub fn new(store: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        let tokenizer = Tokenizer::new(store, rng)?;
        let patch_embed = Linear::new(store, "den.patch", PATCH_DIM, D_V, rng)?;
        let pos = nn::table(store, "den.pos", N_V, D_V, 0.1, rng)?;
        let time = Mlp::new(store, "den.time", [D_V, D_V, D_V], rng)?;
        let blocks = (0..BLOCKS)
            .map(|b| {
                let n = format!("den.block{b}");
                Ok(Block {
                    self_attn: Attention::new(store, &format!("{n}.sa"), D_V, rng)?,
                    cma: Attention::new(store, &format!("{n}.cma"), D_V, rng)?,
                    cma_proj: Mlp::new(store, &format!("{n}.cma_proj"), [D_TOKEN, D_V, D_V], rng)?,
                    cross: Attention::new(store, &format!("{n}.cross"), D_TEXT, rng)?,
                    ffn: Mlp::new(store, &format!("{n}.ffn"), [D_V, D_FFN, D_V], rng)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let head = Linear::zeros(store, "den.head", D_V, PATCH_DIM)?;
        Ok(Self {
            tokenizer,
            patch_embed,
            pos,
            time,
            blocks,
            head,
        })
    }

    /// CMA masks restricted to visual-token query rows, one per item.
    pub fn cma_masks(cond: &BatchCond) -> Vec<Tensor> {
        cond.boxes
            .iter()
            .map(|boxes| {
                let m = token_membership(boxes, GRID, GRID);
                query_rows(&build_cma_mask(&m, boxes.len(), N_MAX), N_V)
            })
            .collect()
    }

    /// Predicts noise for `z` (`[B * 64, 12]` patch rows) at timesteps `t`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        z: Var,
        t: &[usize],
        cond: &BatchCond,
        mut trace: Option<&mut AttentionTrace>,
    ) -> Result<Var> {
        let b = cond.batch();
        debug_assert_eq!(t.len(), b);
        let (tokens, context) = self.tokenizer.tokens(g, store, cond)?;

        let x = self.patch_embed.forward(g, store, z)?;
        let x = g.reshape(x, &[b, N_V, D_V])?;
        let pos = g.param(store, self.pos);
        let x = g.add(x, pos)?;
        let x = g.reshape(x, &[b * N_V, D_V])?;
        let temb: Vec<f64> = t.iter().flat_map(|&t| time_embedding(t)).collect();
        let temb = g.constant(Tensor::new(&[b, D_V], temb)?)?;
        let temb = self.time.forward(g, store, temb)?;
        let rows: Vec<usize> = (0..b).flat_map(|i| std::iter::repeat_n(i, N_V)).collect();
        let temb = g.index_rows(temb, &rows)?;
        let mut x = g.add(x, temb)?;

        let ctx = BlockContext::new(cond, tokens, context);
        for blk in &self.blocks {
            x = blk.forward(g, store, x, &ctx, trace.as_deref_mut())?;
        }
        let h = g.layer_norm(x)?;
        self.head.forward(g, store, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patchify_round_trip() {
        let img: Vec<f64> = (0..SIZE * SIZE * CHANNELS).map(|i| i as f64).collect();
        let p = patchify(&img);
        assert_eq!(unpatchify(&p), img);
        // Patch (0, 1), pixel (dy=1, dx=0), channel 2 = image (1, 2, 2).
        assert_eq!(p[PATCH_DIM + (2 * CHANNELS) + 2], ((SIZE + 2) * CHANNELS + 2) as f64);
    }

    #[test]
    fn time_embedding_bounded() {
        let e = time_embedding(200);
        assert_eq!(e.len(), D_V);
        assert!(e.iter().all(|v| v.abs() <= 1.0));
        assert_eq!(time_embedding(0)[1], 1.0);
    }
}
