//! Oracle metrics comparing detected blobs with the conditioning graph.

use serde::{Deserialize, Serialize};

use super::blobs::{detect_blobs, label, Blob, MIN_BLOB_AREA};
use super::{color_of, PALETTE};
use crate::image::Image;
use crate::scene::{BoundingBox, SceneGraph};

/// A detected blob counts as matching an object at this IoU or above.
pub const MATCH_IOU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Mean over scenes of the mean over objects of the best blob IoU.
    pub layout_iou: f64,
    /// Among objects with a blob at IoU >= 0.5, fraction whose best blob has
    /// the object's color.
    pub attr_acc: f64,
    /// Fraction of scenes whose blob count equals the object count.
    pub count_acc: f64,
}

/// Best-IoU blob for `b`, if any blob overlaps it.
pub fn best_match<'a>(b: &BoundingBox, blobs: &'a [Blob]) -> Option<(&'a Blob, f64)> {
    blobs
        .iter()
        .map(|blob| (blob, blob.bbox.iou(b)))
        .fold(None, |best: Option<(&Blob, f64)>, cur| match best {
            Some(bst) if bst.1 >= cur.1 => Some(bst),
            _ if cur.1 > 0.0 => Some(cur),
            other => other,
        })
}

/// Scores generated images against the graphs (with boxes) they were
/// conditioned on.
pub fn eval_metrics(samples: &[Image], graphs: &[SceneGraph]) -> Metrics {
    assert_eq!(samples.len(), graphs.len());
    if samples.is_empty() {
        return Metrics {
            layout_iou: 0.0,
            attr_acc: 0.0,
            count_acc: 0.0,
        };
    }
    let (mut iou_sum, mut matched, mut correct, mut counted) = (0.0, 0usize, 0usize, 0usize);
    for (img, g) in samples.iter().zip(graphs) {
        let blobs = detect_blobs(img);
        if blobs.len() == g.nodes.len() {
            counted += 1;
        }
        let mut scene_iou = 0.0;
        for n in &g.nodes {
            let Some(b) = n.bbox else { continue };
            if let Some((blob, iou)) = best_match(&b, &blobs) {
                scene_iou += iou;
                if iou >= MATCH_IOU {
                    matched += 1;
                    if color_of(&n.attributes) == Some(blob.color) {
                        correct += 1;
                    }
                }
            }
        }
        iou_sum += scene_iou / g.nodes.len() as f64;
    }
    let n = samples.len() as f64;
    Metrics {
        layout_iou: iou_sum / n,
        attr_acc: if matched == 0 { 0.0 } else { correct as f64 / matched as f64 },
        count_acc: counted as f64 / n,
    }
}

/// Oracle color reading of the pixels in `mask` (one flag per pixel): the
/// most frequent palette label, if it covers at least `MIN_BLOB_AREA` pixels.
/// Ties go to the lower palette index.
pub fn region_color(img: &Image, mask: &[bool]) -> Option<usize> {
    let mut counts = [0usize; PALETTE.len()];
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        if let Some(c) = label(img.pixel(i / img.width, i % img.width)) {
            counts[c] += 1;
        }
    }
    let (c, n) = counts.iter().enumerate().fold((0, 0), |best, (c, &n)| if n > best.1 { (c, n) } else { best });
    (n >= MIN_BLOB_AREA).then_some(c)
}
