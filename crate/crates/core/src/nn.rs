//! Small parameterized layers shared by the embedder, the SL-VAE and the
//! denoiser.

use tensor::{Graph, ParamId, ParamStore, Rng, Tensor, Var};

use crate::error::Result;

/// Affine map `x W + b` over the rows of a 2-D input.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Weights drawn from `N(0, 1/in_dim)`, zero bias.
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut Rng) -> Result<Self> {
        let std = (1.0 / in_dim as f64).sqrt();
        let w = rng.normal_tensor(&[in_dim, out_dim]).map(|v| v * std);
        Self::from_weights(store, name, w)
    }

    /// All-zero weights and bias.
    pub fn zeros(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        Self::from_weights(store, name, Tensor::zeros(&[in_dim, out_dim]))
    }

    fn from_weights(store: &mut ParamStore, name: &str, w: Tensor) -> Result<Self> {
        let (in_dim, out_dim) = (w.shape()[0], w.shape()[1]);
        let w = store.add(format!("{name}.w"), w)?;
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[out_dim]))?;
        Ok(Self { w, b, in_dim, out_dim })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w)?;
        Ok(g.add(y, b)?)
    }
}

/// Two affine layers with a SiLU in between.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, dims: [usize; 3], rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            l1: Linear::new(store, &format!("{name}.0"), dims[0], dims[1], rng)?,
            l2: Linear::new(store, &format!("{name}.1"), dims[1], dims[2], rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.l1.forward(g, store, x)?;
        let h = g.silu(h)?;
        self.l2.forward(g, store, h)
    }
}

/// Learnable table with rows drawn from `N(0, scale^2)`.
pub fn table(store: &mut ParamStore, name: &str, rows: usize, cols: usize, scale: f64, rng: &mut Rng) -> Result<ParamId> {
    let t = rng.normal_tensor(&[rows, cols]).map(|v| v * scale);
    Ok(store.add(name, t)?)
}

/// Constant 2-D tensor built from row slices.
pub fn rows_tensor(rows: &[&[f64]], cols: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(rows.len() * cols);
    for r in rows {
        debug_assert_eq!(r.len(), cols);
        data.extend_from_slice(r);
    }
    Ok(Tensor::new(&[rows.len(), cols], data)?)
}
