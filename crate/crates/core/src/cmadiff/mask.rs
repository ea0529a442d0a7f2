//! Token-to-object membership and the compositional attention mask.
//!
//! The mask is indexed by `[visual tokens 0..N_v) ++ [object slots N_v..N_v+N_max)`.
//! Two positions may attend to each other iff they share an object, both are
//! background visual tokens, or they are the same position. Object slot `k`
//! belongs to object `k` when `k < N_o`; padded slots see only themselves.

use tensor::Tensor;

use crate::scene::BoundingBox;

/// Set of object indices as a bit mask (bit `k` = object `k`).
pub type ObjSet = u32;

/// Object sets of the cells of a `rows x cols` grid, row-major. A cell
/// belongs to every box containing its center; an empty set marks
/// background.
pub fn token_membership(boxes: &[BoundingBox], rows: usize, cols: usize) -> Vec<ObjSet> {
    assert!(boxes.len() <= 32, "at most 32 objects");
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let cy = (r as f64 + 0.5) / rows as f64;
        for c in 0..cols {
            let cx = (c as f64 + 0.5) / cols as f64;
            let set = boxes
                .iter()
                .enumerate()
                .filter(|(_, b)| b.contains_point(cx, cy))
                .fold(0, |s, (k, _)| s | (1 << k));
            out.push(set);
        }
    }
    out
}

/// Additive mask of shape `[N_v + n_max, N_v + n_max]` with entries `0` or
/// `-inf`.
pub fn build_cma_mask(membership: &[ObjSet], n_objects: usize, n_max: usize) -> Tensor {
    assert!(n_objects <= n_max);
    let nv = membership.len();
    let n = nv + n_max;
    let mut m = vec![f64::NEG_INFINITY; n * n];
    let mut open_group = |members: &[usize]| {
        for &i in members {
            for &j in members {
                m[i * n + j] = 0.0;
            }
        }
    };
    for k in 0..n_objects {
        let mut members: Vec<usize> = (0..nv).filter(|&i| membership[i] & (1 << k) != 0).collect();
        members.push(nv + k);
        open_group(&members);
    }
    let background: Vec<usize> = (0..nv).filter(|&i| membership[i] == 0).collect();
    open_group(&background);
    for i in 0..n {
        m[i * n + i] = 0.0;
    }
    Tensor::new(&[n, n], m).expect("square mask")
}

/// First `rows` rows of a square mask (the visual-token queries).
pub fn query_rows(mask: &Tensor, rows: usize) -> Tensor {
    let n = mask.shape()[1];
    Tensor::new(&[rows, n], mask.data()[..rows * n].to_vec()).expect("row slice")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quarter_box_membership() {
        let b = BoundingBox::new(0.0, 0.0, 0.5, 0.5).unwrap();
        let m = token_membership(&[b], 4, 4);
        let inside: Vec<usize> = (0..16).filter(|&i| m[i] == 1).collect();
        assert_eq!(inside, vec![0, 1, 4, 5]);
    }

    #[test]
    fn overlapping_boxes_share_cells() {
        let a = BoundingBox::new(0.0, 0.0, 0.75, 0.5).unwrap();
        let b = BoundingBox::new(0.25, 0.0, 0.75, 0.5).unwrap();
        let m = token_membership(&[a, b], 4, 4);
        assert_eq!(&m[..4], &[1, 3, 3, 2]);
        assert!(m[8..].iter().all(|&s| s == 0));
    }

    #[test]
    fn zero_objects_one_background_group() {
        let m = build_cma_mask(&[0; 4], 0, 2);
        for i in 0..6 {
            for j in 0..6 {
                let open = (i < 4 && j < 4) || i == j;
                assert_eq!(m.at(i, j) == 0.0, open, "({i},{j})");
            }
        }
    }
}
