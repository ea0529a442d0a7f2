//! Rasterization of shape scenes on the 16x16 pixel grid.

use crate::image::{Image, SIZE};
use crate::scene::BoundingBox;

use super::{BACKGROUND, PALETTE};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub fn from_index(i: usize) -> Self {
        [Shape::Circle, Shape::Square, Shape::Triangle][i]
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Pixel-aligned box: columns `x..x+w`, rows `y..y+h`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl PixelBox {
    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn to_bbox(self) -> BoundingBox {
        let s = SIZE as f64;
        BoundingBox {
            x: self.x as f64 / s,
            y: self.y as f64 / s,
            w: self.w as f64 / s,
            h: self.h as f64 / s,
        }
    }

    /// Twice the center, in pixels (exact integers).
    pub fn center2(&self) -> (usize, usize) {
        (2 * self.x + self.w, 2 * self.y + self.h)
    }

    /// `self` lies strictly inside `other`.
    pub fn strictly_inside(&self, other: &PixelBox) -> bool {
        self.x > other.x && self.y > other.y && self.x + self.w < other.x + other.w && self.y + self.h < other.y + other.h
    }

    /// Gap between the boxes along the farther-apart axis, in pixels.
    pub fn gap(&self, other: &PixelBox) -> usize {
        let dx = other.x.saturating_sub(self.x + self.w).max(self.x.saturating_sub(other.x + other.w));
        let dy = other.y.saturating_sub(self.y + self.h).max(self.y.saturating_sub(other.y + other.h));
        dx.max(dy)
    }
}

/// A scene as drawn: shape, palette color index and pixel box per object.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SceneSpec {
    pub objects: Vec<(Shape, usize, PixelBox)>,
}

/// Whether pixel `(row, col)` is covered by `shape` drawn in `b`.
pub fn covers(shape: Shape, b: &PixelBox, row: usize, col: usize) -> bool {
    if row < b.y || row >= b.y + b.h || col < b.x || col >= b.x + b.w {
        return false;
    }
    match shape {
        Shape::Square => true,
        Shape::Circle => {
            // Pixel centers tested against the inscribed ellipse, in doubled
            // coordinates to stay exact.
            let px = (2 * col + 1) as f64 - (2 * b.x + b.w) as f64;
            let py = (2 * row + 1) as f64 - (2 * b.y + b.h) as f64;
            let (a, c) = (b.w as f64, b.h as f64);
            px * px / (a * a) + py * py / (c * c) <= 1.0
        }
        Shape::Triangle => {
            let r = row - b.y;
            let count = ((b.w * (r + 1)) as f64 / b.h as f64).round().max(1.0) as usize;
            let count = count.min(b.w);
            let start = b.x + (b.w - count) / 2;
            col >= start && col < start + count
        }
    }
}

/// Paint order: descending area, ties by index (later index on top).
pub fn paint_order(areas: &[usize]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..areas.len()).collect();
    order.sort_by(|&a, &b| areas[b].cmp(&areas[a]).then(a.cmp(&b)));
    order
}

pub fn render(spec: &SceneSpec) -> Image {
    let mut img = Image::filled(SIZE, SIZE, BACKGROUND);
    let areas: Vec<usize> = spec.objects.iter().map(|o| o.2.area()).collect();
    for i in paint_order(&areas) {
        let (shape, color, b) = spec.objects[i];
        for row in b.y..b.y + b.h {
            for col in b.x..b.x + b.w {
                if covers(shape, &b, row, col) {
                    img.set_pixel(row, col, PALETTE[color]);
                }
            }
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn red_square_top_left() {
        let spec = SceneSpec {
            objects: vec![(Shape::Square, 0, PixelBox { x: 0, y: 0, w: 8, h: 8 })],
        };
        let img = render(&spec);
        for r in 0..SIZE {
            for c in 0..SIZE {
                let want = if r < 8 && c < 8 { PALETTE[0] } else { BACKGROUND };
                assert_eq!(img.pixel(r, c), want);
            }
        }
    }

    #[test]
    fn empty_scene_is_gray() {
        let img = render(&SceneSpec { objects: vec![] });
        assert_eq!(img, Image::filled(SIZE, SIZE, BACKGROUND));
    }

    #[test]
    fn smaller_shape_wins_overlap() {
        let big = PixelBox { x: 2, y: 2, w: 8, h: 8 };
        let small = PixelBox { x: 4, y: 4, w: 3, h: 3 };
        for objects in [
            vec![(Shape::Square, 1, small), (Shape::Square, 0, big)],
            vec![(Shape::Square, 0, big), (Shape::Square, 1, small)],
        ] {
            let img = render(&SceneSpec { objects });
            assert_eq!(img.pixel(5, 5), PALETTE[1]);
            assert_eq!(img.pixel(3, 3), PALETTE[0]);
        }
    }

    #[test]
    fn shapes_fill_their_extreme_rows_and_columns() {
        for shape in [Shape::Circle, Shape::Square, Shape::Triangle] {
            for w in 3..=8 {
                for h in 3..=8 {
                    let b = PixelBox { x: 1, y: 2, w, h };
                    let cells: Vec<(usize, usize)> = (0..SIZE)
                        .flat_map(|r| (0..SIZE).map(move |c| (r, c)))
                        .filter(|&(r, c)| covers(shape, &b, r, c))
                        .collect();
                    let rmin = cells.iter().map(|c| c.0).min().unwrap();
                    let rmax = cells.iter().map(|c| c.0).max().unwrap();
                    let cmin = cells.iter().map(|c| c.1).min().unwrap();
                    let cmax = cells.iter().map(|c| c.1).max().unwrap();
                    assert_eq!((rmin, rmax, cmin, cmax), (2, 1 + h, 1, w), "{shape:?} {w}x{h}");
                }
            }
        }
    }
}
