//! Plain loops for the hot paths. Inner loops run over contiguous memory so
//! the compiler can vectorize them.

/// `c[m,n] += a[m,k] * b[k,n]`
pub fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m,k] += a[m,n] * b[k,n]^T`
pub fn gemm_nt(m: usize, n: usize, k: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let crow = &mut c[i * k..(i + 1) * k];
        for (p, cv) in crow.iter_mut().enumerate() {
            *cv += dot(arow, &b[p * n..(p + 1) * n]);
        }
    }
}

/// `c[k,n] += a[m,k]^T * b[m,n]`
pub fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// Dot product with four independent accumulators.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let chunks = a.len() / 4;
    let mut acc = [0.0f64; 4];
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Numpy-style broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every flat output index, the flat index into an input of shape `input`
/// broadcast to `output`.
pub fn broadcast_index_map(input: &[usize], output: &[usize]) -> Vec<usize> {
    let rank = output.len();
    let offset = rank - input.len();
    // Strides of the input aligned to output axes; zero on broadcast axes.
    let mut strides = vec![0usize; rank];
    let mut s = 1;
    for i in (0..input.len()).rev() {
        if input[i] != 1 {
            strides[i + offset] = s;
        }
        s *= input[i];
    }
    let total: usize = output.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut flat = 0usize;
    for _ in 0..total {
        map.push(flat);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            flat += strides[ax];
            if idx[ax] < output[ax] {
                break;
            }
            flat -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    map
}

/// How an input of shape `input` maps onto a broadcast output of shape `output`.
pub enum Broadcast {
    /// Identical shapes.
    Same,
    /// Input repeats contiguously (its shape is a suffix of the output).
    Tile,
    /// General strided mapping.
    Map(Vec<usize>),
}

pub fn broadcast_plan(input: &[usize], output: &[usize]) -> Broadcast {
    if input == output {
        return Broadcast::Same;
    }
    let off = output.len() - input.len();
    let trimmed: Vec<usize> = input.iter().copied().skip_while(|&d| d == 1).collect();
    let suffix = &output[output.len() - trimmed.len()..];
    if trimmed == suffix && off + (input.len() - trimmed.len()) <= output.len() {
        return Broadcast::Tile;
    }
    Broadcast::Map(broadcast_index_map(input, output))
}

/// Sum-reduce a gradient of the broadcast output back to the input shape.
pub fn reduce_broadcast(grad: &[f64], input_numel: usize, plan: &Broadcast) -> Vec<f64> {
    match plan {
        Broadcast::Same => grad.to_vec(),
        Broadcast::Tile => {
            let mut out = vec![0.0; input_numel];
            for chunk in grad.chunks(input_numel) {
                for (o, g) in out.iter_mut().zip(chunk) {
                    *o += g;
                }
            }
            out
        }
        Broadcast::Map(map) => {
            let mut out = vec![0.0; input_numel];
            for (g, &i) in grad.iter().zip(map) {
                out[i] += g;
            }
            out
        }
    }
}

/// Value of the input at every output position.
pub fn expand(input: &[f64], out_numel: usize, plan: &Broadcast) -> Vec<f64> {
    match plan {
        Broadcast::Same => input.to_vec(),
        Broadcast::Tile => input.iter().copied().cycle().take(out_numel).collect(),
        Broadcast::Map(map) => map.iter().map(|&i| input[i]).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_variants_agree() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 + 1.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5 - 2.0).collect(); // 3x4
        let mut c = vec![0.0; 8];
        gemm_nn(2, 3, 4, &a, &b, &mut c);
        let mut expect = vec![0.0; 8];
        for i in 0..2 {
            for j in 0..4 {
                for p in 0..3 {
                    expect[i * 4 + j] += a[i * 3 + p] * b[p * 4 + j];
                }
            }
        }
        assert_eq!(c, expect);

        // b^T is 4x3, so a * (b^T)^T via gemm_nt with b stored transposed.
        let mut bt = vec![0.0; 12];
        for p in 0..3 {
            for j in 0..4 {
                bt[j * 3 + p] = b[p * 4 + j];
            }
        }
        let mut c2 = vec![0.0; 8];
        gemm_nt(2, 3, 4, &a, &bt, &mut c2);
        assert_eq!(c2, expect);

        // a^T (3x2) times c (2x4) via gemm_tn.
        let mut c3 = vec![0.0; 12];
        gemm_tn(2, 3, 4, &a, &expect, &mut c3);
        let mut e3 = vec![0.0; 12];
        for p in 0..3 {
            for j in 0..4 {
                for i in 0..2 {
                    e3[p * 4 + j] += a[i * 3 + p] * expect[i * 4 + j];
                }
            }
        }
        assert_eq!(c3, e3);
    }

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape(&[2, 3], &[3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shape(&[2, 1], &[1, 4]), Some(vec![2, 4]));
        assert_eq!(broadcast_shape(&[2, 3], &[2]), None);
    }

    #[test]
    fn index_map_matches_manual() {
        let map = broadcast_index_map(&[2, 1], &[2, 3]);
        assert_eq!(map, vec![0, 0, 0, 1, 1, 1]);
        let map = broadcast_index_map(&[3], &[2, 3]);
        assert_eq!(map, vec![0, 1, 2, 0, 1, 2]);
    }
}
