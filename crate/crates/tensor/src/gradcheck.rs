use std::rc::Rc;

use crate::error::{Result, TensorError};
use crate::graph::{AttentionSpec, Graph, Var};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences with step `h`.
///
/// Returns `max_i |analytic_i - numeric_i| / max(1e-8, |analytic_i| + |numeric_i|)`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), true)?;
    let out = f(&mut g, xv)?;
    let grads = g.backward(out)?;
    let analytic = match grads.get(xv) {
        Some(t) => t.clone(),
        None => Tensor::zeros(x.shape()),
    };

    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.leaf(t, false)?;
        let out = f(&mut g, v)?;
        let val = g.value(out);
        if val.numel() != 1 {
            return Err(TensorError::NonScalarLoss(val.shape().to_vec()));
        }
        Ok(val.item())
    };

    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        if !numeric.is_finite() {
            return Err(TensorError::NonFinite { op: "grad_check" });
        }
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / f64::max(1e-8, a.abs() + numeric.abs());
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Worst relative gradient error of one op over random instances.
#[derive(Debug, Clone, PartialEq)]
pub struct OpCheck {
    pub name: String,
    pub worst: f64,
}

struct Suite {
    instances: u64,
    h: f64,
    results: Vec<OpCheck>,
    failure: Option<TensorError>,
}

fn weighted_sum(g: &mut Graph, y: Var, rng: &mut Rng) -> Result<Var> {
    let w = rng.normal_tensor(g.shape(y));
    let w = g.constant(w)?;
    let p = g.mul(y, w)?;
    g.sum(p)
}

impl Suite {
    /// Checks `build` on random inputs of `shape`. Each op output is
    /// contracted with a fixed random weight tensor so that the scalar under
    /// test has generic, non-vanishing partial derivatives.
    fn check<F>(&mut self, name: &str, shape: &[usize], positive: bool, build: F)
    where
        F: Fn(&mut Graph, Var, &mut Rng) -> Result<Var>,
    {
        let mut worst: f64 = 0.0;
        for seed in 0..self.instances {
            let mut rng = Rng::new(1000 + seed);
            let mut x = rng.normal_tensor(shape);
            if positive {
                x = x.map(|v| v.abs() + 0.5);
            }
            let wseed = rng.next_u64();
            let err = grad_check(
                |g, v| {
                    let mut r = Rng::new(wseed);
                    let y = build(g, v, &mut r)?;
                    weighted_sum(g, y, &mut r)
                },
                &x,
                self.h,
            );
            match err {
                Ok(e) => worst = worst.max(e),
                Err(e) => {
                    self.failure.get_or_insert(e);
                    return;
                }
            }
        }
        self.results.push(OpCheck {
            name: name.to_string(),
            worst,
        });
    }
}

/// Finite-difference checks of every differentiable op (each on
/// `instances` random inputs, step `h`), including broadcasting variants and
/// the fused attention with a fully masked query row.
pub fn op_suite(instances: u64, h: f64) -> Result<Vec<OpCheck>> {
    let mut s = Suite {
        instances,
        h,
        results: Vec::new(),
        failure: None,
    };
    elementwise_binary_ops_with_broadcasting(&mut s);
    matmul_both_sides(&mut s);
    structural_ops(&mut s);
    reductions(&mut s);
    pointwise_nonlinearities(&mut s);
    softmax_and_layer_norm(&mut s);
    attention_each_input(&mut s);
    match s.failure {
        Some(e) => Err(e),
        None => Ok(s.results),
    }
}

fn elementwise_binary_ops_with_broadcasting(s: &mut Suite) {
    s.check("add", &[3, 4], false, |g, x, r| {
        let b = g.constant(r.normal_tensor(&[4]))?;
        g.add(x, b)
    });
    s.check("sub", &[3, 4], false, |g, x, r| {
        let b = g.constant(r.normal_tensor(&[3, 1]))?;
        g.sub(b, x)
    });
    s.check("mul", &[3, 4], false, |g, x, r| {
        let b = g.constant(r.normal_tensor(&[3, 4]))?;
        g.mul(x, b)
    });
    // Broadcast input is the differentiated one.
    s.check("mul_broadcast_lhs", &[4], false, |g, x, r| {
        let b = g.constant(r.normal_tensor(&[3, 4]))?;
        g.mul(x, b)
    });
    s.check("add_column", &[3, 1], false, |g, x, r| {
        let b = g.constant(r.normal_tensor(&[3, 4]))?;
        g.add(b, x)
    });
    s.check("broadcast", &[1, 4], false, |g, x, _| g.broadcast_to(x, &[3, 4]));
    s.check("scale", &[5], false, |g, x, _| g.scale(x, -1.7));
}

fn matmul_both_sides(s: &mut Suite) {
    s.check("matmul_lhs", &[3, 4], false, |g, x, r| {
        let b = g.constant(r.normal_tensor(&[4, 2]))?;
        g.matmul(x, b)
    });
    s.check("matmul_rhs", &[4, 2], false, |g, x, r| {
        let a = g.constant(r.normal_tensor(&[3, 4]))?;
        g.matmul(a, x)
    });
    s.check("matmul_self", &[3, 3], false, |g, x, _| g.matmul(x, x));
}

fn structural_ops(s: &mut Suite) {
    s.check("concat0", &[2, 3], false, |g, x, r| {
        let b = g.constant(r.normal_tensor(&[1, 3]))?;
        g.concat(&[b, x, x], 0)
    });
    s.check("concat1", &[2, 3], false, |g, x, r| {
        let b = g.constant(r.normal_tensor(&[2, 2]))?;
        g.concat(&[x, b], 1)
    });
    s.check("slice", &[3, 5], false, |g, x, _| g.slice(x, 1, 1, 3));
    s.check("reshape", &[2, 6], false, |g, x, _| g.reshape(x, &[3, 4]));
    s.check("transpose", &[2, 5], false, |g, x, _| g.transpose(x));
    s.check("gather", &[2, 3], false, |g, x, _| g.gather(x, Rc::new(vec![5, 0, 0, 3, 2]), &[5]));
    s.check("index_rows", &[4, 3], false, |g, x, _| g.index_rows(x, &[3, 1, 3]));
}

fn reductions(s: &mut Suite) {
    s.check("sum", &[3, 2], false, |g, x, _| g.sum(x));
    s.check("mean", &[3, 2], false, |g, x, _| g.mean(x));
    s.check("l1", &[6], false, |g, x, _| g.l1(x));
}

fn pointwise_nonlinearities(s: &mut Suite) {
    s.check("sigmoid", &[6], false, |g, x, _| g.sigmoid(x));
    s.check("tanh", &[6], false, |g, x, _| g.tanh(x));
    s.check("silu", &[6], false, |g, x, _| g.silu(x));
    s.check("exp", &[6], false, |g, x, _| g.exp(x));
    s.check("log", &[6], true, |g, x, _| g.log(x));
    s.check("square", &[6], false, |g, x, _| g.square(x));
}

fn softmax_and_layer_norm(s: &mut Suite) {
    s.check("softmax", &[3, 5], false, |g, x, _| g.softmax(x));
    s.check("masked_softmax", &[3, 4], false, |g, x, _| {
        let ninf = f64::NEG_INFINITY;
        let mask = Tensor::new(
            &[3, 4],
            vec![0.0, ninf, 0.0, 0.0, ninf, ninf, ninf, ninf, 0.0, 0.0, ninf, 0.0],
        )?;
        g.masked_softmax(x, Some(&mask))
    });
    s.check("layer_norm", &[2, 8], false, |g, x, _| g.layer_norm(x));
}

fn attention_masks() -> Rc<Vec<Tensor>> {
    let ninf = f64::NEG_INFINITY;
    // Item 0: one fully masked query row; item 1: no masking.
    let m0 = Tensor::new(&[3, 4], vec![0.0, ninf, 0.0, ninf, ninf, ninf, ninf, ninf, 0.0, 0.0, 0.0, ninf])
        .expect("valid mask shape");
    Rc::new(vec![m0, Tensor::zeros(&[3, 4])])
}

fn attention_each_input(s: &mut Suite) {
    let spec = AttentionSpec::new(2, 2).with_masks(attention_masks());
    let sp = spec.clone();
    s.check("attention_q", &[6, 4], false, move |g, x, r| {
        let k = g.constant(r.normal_tensor(&[8, 4]))?;
        let v = g.constant(r.normal_tensor(&[8, 4]))?;
        g.attention(x, k, v, &sp)
    });
    let sp = spec.clone();
    s.check("attention_k", &[8, 4], false, move |g, x, r| {
        let q = g.constant(r.normal_tensor(&[6, 4]))?;
        let v = g.constant(r.normal_tensor(&[8, 4]))?;
        g.attention(q, x, v, &sp)
    });
    let sp = spec.clone();
    s.check("attention_v", &[8, 4], false, move |g, x, r| {
        let q = g.constant(r.normal_tensor(&[6, 4]))?;
        let k = g.constant(r.normal_tensor(&[8, 4]))?;
        g.attention(q, k, x, &sp)
    });
    s.check("attention_self", &[6, 4], false, |g, x, _| {
        g.attention(x, x, x, &AttentionSpec::new(2, 2))
    });
}

