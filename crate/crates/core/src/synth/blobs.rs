//! Blob oracle: nearest-palette labeling followed by 4-connected components.

use crate::image::Image;
use crate::scene::BoundingBox;

use super::{BACKGROUND, PALETTE};

/// Components smaller than this many pixels are ignored as noise.
pub const MIN_BLOB_AREA: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    /// Palette index of the component's label.
    pub color: usize,
    pub bbox: BoundingBox,
    pub area: usize,
}

/// Palette label of a pixel: `None` for background, else the nearest color.
pub fn label(rgb: [u8; 3]) -> Option<usize> {
    let d = |p: [u8; 3]| -> i32 { (0..3).map(|i| (rgb[i] as i32 - p[i] as i32).pow(2)).sum() };
    let mut best = (d(BACKGROUND), None);
    for (k, p) in PALETTE.iter().enumerate() {
        let dk = d(*p);
        if dk < best.0 {
            best = (dk, Some(k));
        }
    }
    best.1
}

/// Connected same-label components of non-background pixels, in order of
/// their first pixel in raster order.
pub fn detect_blobs(img: &Image) -> Vec<Blob> {
    let (w, h) = (img.width, img.height);
    let labels: Vec<Option<usize>> = (0..w * h).map(|i| label(img.pixel(i / w, i % w))).collect();
    let mut seen = vec![false; w * h];
    let mut blobs = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        let Some(color) = labels[start] else { continue };
        if seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let (mut r0, mut r1, mut c0, mut c1, mut area) = (h, 0, w, 0, 0);
        while let Some(p) = stack.pop() {
            let (r, c) = (p / w, p % w);
            area += 1;
            r0 = r0.min(r);
            r1 = r1.max(r);
            c0 = c0.min(c);
            c1 = c1.max(c);
            let mut visit = |q: usize| {
                if !seen[q] && labels[q] == Some(color) {
                    seen[q] = true;
                    stack.push(q);
                }
            };
            if r > 0 {
                visit(p - w);
            }
            if r + 1 < h {
                visit(p + w);
            }
            if c > 0 {
                visit(p - 1);
            }
            if c + 1 < w {
                visit(p + 1);
            }
        }
        if area >= MIN_BLOB_AREA {
            blobs.push(Blob {
                color,
                bbox: BoundingBox {
                    x: c0 as f64 / w as f64,
                    y: r0 as f64 / h as f64,
                    w: (c1 + 1 - c0) as f64 / w as f64,
                    h: (r1 + 1 - r0) as f64 / h as f64,
                },
                area,
            });
        }
    }
    blobs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::SIZE;
    use crate::synth::render::{render, PixelBox, SceneSpec, Shape};

    #[test]
    fn single_red_square() {
        let b = PixelBox { x: 0, y: 0, w: 8, h: 8 };
        let img = render(&SceneSpec {
            objects: vec![(Shape::Square, 0, b)],
        });
        let blobs = detect_blobs(&img);
        assert_eq!(blobs.len(), 1);
        assert_eq!(blobs[0].color, 0);
        assert_eq!(blobs[0].bbox.iou(&b.to_bbox()), 1.0);
    }

    #[test]
    fn gray_has_no_blobs() {
        assert!(detect_blobs(&Image::filled(SIZE, SIZE, BACKGROUND)).is_empty());
    }

    #[test]
    fn two_disjoint_shapes() {
        let a = PixelBox { x: 1, y: 1, w: 4, h: 5 };
        let b = PixelBox { x: 9, y: 8, w: 6, h: 6 };
        let img = render(&SceneSpec {
            objects: vec![(Shape::Circle, 2, a), (Shape::Triangle, 1, b)],
        });
        let blobs = detect_blobs(&img);
        assert_eq!(blobs.len(), 2);
        assert_eq!((blobs[0].color, blobs[1].color), (2, 1));
        assert_eq!(blobs[0].bbox.iou(&a.to_bbox()), 1.0);
        assert_eq!(blobs[1].bbox.iou(&b.to_bbox()), 1.0);
    }

    #[test]
    fn labels_by_nearest_palette_color() {
        assert_eq!(label([200, 40, 30]), Some(0));
        assert_eq!(label([120, 135, 128]), None);
        assert_eq!(label([10, 10, 180]), Some(2));
    }
}
