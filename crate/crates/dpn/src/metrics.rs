//! Segmentation quality metrics: mean IoU from a pooled confusion matrix,
//! per-frame tag accuracy, box-level localization overlap, and boundary
//! agreement within a pixel tolerance.
//!
//! Conventions shared by the box-level metrics: label 0 is background —
//! regions of label 0 never form objects; objects are 4-connected
//! components of one label within one frame; ignore pixels belong to no
//! class and never assert a boundary. Definition choices the underlying
//! notions leave open (tag accuracy as mean per-frame Jaccard, a 0.5 box
//! IoU threshold gating the boundary metric, boundary F1 with Chebyshev
//! tolerance, 4-connectivity) are documented on the functions.

use crate::error::{DpnError, Result};
use crate::tensor::{LabelMap, VolumeShape, IGNORE_LABEL};

/// Default Chebyshev tolerance (pixels) for [`boundary_accuracy`].
pub const DEFAULT_BOUNDARY_TOL: usize = 2;

/// Box IoU above which a predicted object counts as correctly localized,
/// gating which objects the boundary metric evaluates.
pub const LOCALIZED_IOU: f64 = 0.5;

// ---------------------------------------------------------------------------
// Confusion matrix and mean IoU
// ---------------------------------------------------------------------------

/// Voxel-level confusion counts. Rows index the ground-truth label, columns
/// the predicted label; ignore voxels in the ground truth are not counted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    labels: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(labels: usize) -> Result<Self> {
        if labels == 0 {
            return Err(DpnError::InvalidConfig {
                field: "labels",
                reason: "confusion matrix needs at least one label".into(),
            });
        }
        Ok(ConfusionMatrix {
            labels,
            counts: vec![0; labels * labels],
        })
    }

    pub fn labels(&self) -> usize {
        self.labels
    }

    /// Count of voxels with ground truth `gt` predicted as `pred`.
    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.labels + pred]
    }

    /// Voxels counted so far (equals the evaluated, non-ignore voxels).
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Accumulate one prediction/truth map pair.
    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        check_same_shape(pred, gt, "confusion accumulation")?;
        pred.require_concrete(self.labels, "confusion accumulation")?;
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            if g == IGNORE_LABEL {
                continue;
            }
            if g as usize >= self.labels {
                return Err(DpnError::InvalidLabel {
                    context: "confusion accumulation",
                    detail: format!(
                        "ground-truth label {g} outside label space of {}",
                        self.labels
                    ),
                });
            }
            self.counts[g as usize * self.labels + p as usize] += 1;
        }
        Ok(())
    }

    /// Pool another matrix into this one (dataset-level evaluation sums
    /// confusion counts before computing IoU, it does not average IoUs).
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if self.labels != other.labels {
            return Err(DpnError::ShapeMismatch {
                context: "confusion merge",
                expected: format!("{} labels", self.labels),
                found: format!("{} labels", other.labels),
            });
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn from_maps(pred: &LabelMap, gt: &LabelMap, labels: usize) -> Result<Self> {
        let mut m = ConfusionMatrix::new(labels)?;
        m.accumulate(pred, gt)?;
        Ok(m)
    }
}

/// Per-class IoU `TP/(TP+FP+FN)` and its mean over present classes.
///
/// A class is present when it appears in the truth or the prediction;
/// absent classes yield `None` and do not enter the mean. Errors when no
/// class is present at all (nothing was evaluated).
pub fn miou_from_confusion(m: &ConfusionMatrix) -> Result<(Vec<Option<f64>>, f64)> {
    let l = m.labels();
    let mut per_class = vec![None; l];
    let mut sum = 0.0;
    let mut present = 0usize;
    for c in 0..l {
        let tp = m.count(c, c);
        let fp: u64 = (0..l).filter(|&r| r != c).map(|r| m.count(r, c)).sum();
        let fn_: u64 = (0..l).filter(|&p| p != c).map(|p| m.count(c, p)).sum();
        let denom = tp + fp + fn_;
        if denom > 0 {
            let iou = tp as f64 / denom as f64;
            per_class[c] = Some(iou);
            sum += iou;
            present += 1;
        }
    }
    if present == 0 {
        return Err(DpnError::EmptyInput {
            context: "mean IoU",
            detail: "no class present in truth or prediction".into(),
        });
    }
    Ok((per_class, sum / present as f64))
}

/// Mean IoU of one prediction/truth pair.
pub fn miou(pred: &LabelMap, gt: &LabelMap, labels: usize) -> Result<(Vec<Option<f64>>, f64)> {
    miou_from_confusion(&ConfusionMatrix::from_maps(pred, gt, labels)?)
}

// ---------------------------------------------------------------------------
// Tagging accuracy
// ---------------------------------------------------------------------------

/// Frame-level tag agreement: the tag set of a frame is the set of distinct
/// labels present (ignore excluded), and a frame scores the Jaccard index
/// |pred ∩ gt| / |pred ∪ gt| of the two sets — 1 when both are empty. The
/// result is the mean over frames.
pub fn tagging_accuracy(pred: &LabelMap, gt: &LabelMap) -> Result<f64> {
    check_same_shape(pred, gt, "tagging accuracy")?;
    let shape = pred.shape;
    let per_frame = shape.frame_pixels();
    let mut total = 0.0;
    for t in 0..shape.frames {
        let tags = |map: &LabelMap| {
            let mut set = std::collections::BTreeSet::new();
            for p in 0..per_frame {
                let l = map.data()[t * per_frame + p];
                if l != IGNORE_LABEL {
                    set.insert(l);
                }
            }
            set
        };
        let p = tags(pred);
        let g = tags(gt);
        let inter = p.intersection(&g).count();
        let union = p.union(&g).count();
        total += if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        };
    }
    Ok(total / shape.frames as f64)
}

// ---------------------------------------------------------------------------
// Boxes, components, localization
// ---------------------------------------------------------------------------

/// Axis-aligned pixel box with inclusive corners.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundingBox {
    pub y0: usize,
    pub x0: usize,
    pub y1: usize,
    pub x1: usize,
}

impl BoundingBox {
    pub fn area(&self) -> u64 {
        (self.y1 - self.y0 + 1) as u64 * (self.x1 - self.x0 + 1) as u64
    }

    /// Intersection-over-union of two boxes; 0 when disjoint.
    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let y0 = self.y0.max(other.y0);
        let x0 = self.x0.max(other.x0);
        let y1 = self.y1.min(other.y1);
        let x1 = self.x1.min(other.x1);
        if y1 < y0 || x1 < x0 {
            return 0.0;
        }
        let inter = (y1 - y0 + 1) as u64 * (x1 - x0 + 1) as u64;
        let union = self.area() + other.area() - inter;
        inter as f64 / union as f64
    }
}

/// A box carrying the class of the object it encloses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabeledBox {
    pub label: u16,
    pub rect: BoundingBox,
}

/// One 4-connected same-label region within a single frame.
struct Component {
    label: u16,
    rect: BoundingBox,
    pixels: Vec<(usize, usize)>,
}

/// 4-connected components of every non-background, non-ignore label in
/// frame `t`, in deterministic scan order.
fn frame_components(map: &LabelMap, t: usize) -> Vec<Component> {
    let shape = map.shape;
    let (h, w) = (shape.height, shape.width);
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    for sy in 0..h {
        for sx in 0..w {
            let label = map.get(t, sy, sx);
            if seen[sy * w + sx] || label == 0 || label == IGNORE_LABEL {
                continue;
            }
            let mut stack = vec![(sy, sx)];
            seen[sy * w + sx] = true;
            let mut pixels = Vec::new();
            let mut rect = BoundingBox {
                y0: sy,
                x0: sx,
                y1: sy,
                x1: sx,
            };
            while let Some((y, x)) = stack.pop() {
                pixels.push((y, x));
                rect.y0 = rect.y0.min(y);
                rect.x0 = rect.x0.min(x);
                rect.y1 = rect.y1.max(y);
                rect.x1 = rect.x1.max(x);
                let mut push = |ny: usize, nx: usize, stack: &mut Vec<(usize, usize)>| {
                    if !seen[ny * w + nx] && map.get(t, ny, nx) == label {
                        seen[ny * w + nx] = true;
                        stack.push((ny, nx));
                    }
                };
                if y > 0 {
                    push(y - 1, x, &mut stack);
                }
                if y + 1 < h {
                    push(y + 1, x, &mut stack);
                }
                if x > 0 {
                    push(y, x - 1, &mut stack);
                }
                if x + 1 < w {
                    push(y, x + 1, &mut stack);
                }
            }
            out.push(Component {
                label,
                rect,
                pixels,
            });
        }
    }
    out
}

/// Object boxes of a label map: per frame, the bounding boxes of every
/// 4-connected component of every non-background label.
pub fn boxes_from_labels(map: &LabelMap) -> Vec<Vec<LabeledBox>> {
    (0..map.shape.frames)
        .map(|t| {
            frame_components(map, t)
                .into_iter()
                .map(|c| LabeledBox {
                    label: c.label,
                    rect: c.rect,
                })
                .collect()
        })
        .collect()
}

/// Greedy one-to-one matching by descending IoU. Returns `(gt index,
/// other index, iou)` triples; only positive overlaps can match. Ties
/// break toward lower indices, so the matching is deterministic.
fn greedy_match(gt: &[BoundingBox], other: &[BoundingBox]) -> Vec<(usize, usize, f64)> {
    let mut pairs = Vec::new();
    for (gi, g) in gt.iter().enumerate() {
        for (oi, o) in other.iter().enumerate() {
            let iou = g.iou(o);
            if iou > 0.0 {
                pairs.push((gi, oi, iou));
            }
        }
    }
    pairs.sort_by(|a, b| {
        b.2.partial_cmp(&a.2)
            .expect("box IoU is finite")
            .then(a.0.cmp(&b.0))
            .then(a.1.cmp(&b.1))
    });
    let mut gt_used = vec![false; gt.len()];
    let mut other_used = vec![false; other.len()];
    let mut matches = Vec::new();
    for (gi, oi, iou) in pairs {
        if !gt_used[gi] && !other_used[oi] {
            gt_used[gi] = true;
            other_used[oi] = true;
            matches.push((gi, oi, iou));
        }
    }
    matches
}

/// Box-level localization score of a prediction against ground-truth
/// object boxes (one list per frame).
///
/// Predicted boxes are the bounding boxes of the predicted components.
/// Per frame and class, predictions match truth boxes greedily by
/// descending IoU; each matched pair contributes its IoU and each
/// unmatched box of either side contributes 0. The score pools those
/// contributions over the whole volume: Σ matched IoU divided by the
/// number of scoring units (`n_gt + n_pred − n_matched`). An empty scene
/// — no boxes on either side anywhere — scores 1.
pub fn localization_biou(pred: &LabelMap, gt_boxes: &[Vec<LabeledBox>]) -> Result<f64> {
    let shape = pred.shape;
    if gt_boxes.len() != shape.frames {
        return Err(DpnError::ShapeMismatch {
            context: "localization boxes",
            expected: format!("{} frames of boxes", shape.frames),
            found: format!("{}", gt_boxes.len()),
        });
    }
    let mut matched_sum = 0.0;
    let mut units = 0u64;
    for (t, frame_gt) in gt_boxes.iter().enumerate() {
        let pred_boxes: Vec<LabeledBox> = frame_components(pred, t)
            .into_iter()
            .map(|c| LabeledBox {
                label: c.label,
                rect: c.rect,
            })
            .collect();
        let mut classes: Vec<u16> = frame_gt
            .iter()
            .map(|b| b.label)
            .chain(pred_boxes.iter().map(|b| b.label))
            .collect();
        classes.sort_unstable();
        classes.dedup();
        for class in classes {
            let g: Vec<BoundingBox> = frame_gt
                .iter()
                .filter(|b| b.label == class)
                .map(|b| b.rect)
                .collect();
            let p: Vec<BoundingBox> = pred_boxes
                .iter()
                .filter(|b| b.label == class)
                .map(|b| b.rect)
                .collect();
            let matches = greedy_match(&g, &p);
            matched_sum += matches.iter().map(|m| m.2).sum::<f64>();
            units += (g.len() + p.len() - matches.len()) as u64;
        }
    }
    if units == 0 {
        return Ok(1.0);
    }
    Ok(matched_sum / units as f64)
}

// ---------------------------------------------------------------------------
// Boundary accuracy
// ---------------------------------------------------------------------------

/// Boundary pixels of a component: members with a 4-neighbor inside the
/// frame carrying a different concrete label. Frame edges and ignore
/// neighbors assert no boundary.
fn component_boundary(map: &LabelMap, t: usize, comp: &Component) -> Vec<(usize, usize)> {
    let shape = map.shape;
    let mut out = Vec::new();
    for &(y, x) in &comp.pixels {
        let mut boundary = false;
        let mut check = |ny: usize, nx: usize| {
            let l = map.get(t, ny, nx);
            if l != comp.label && l != IGNORE_LABEL {
                boundary = true;
            }
        };
        if y > 0 {
            check(y - 1, x);
        }
        if y + 1 < shape.height {
            check(y + 1, x);
        }
        if x > 0 {
            check(y, x - 1);
        }
        if x + 1 < shape.width {
            check(y, x + 1);
        }
        if boundary {
            out.push((y, x));
        }
    }
    out
}

/// How many of `pixels` lie within Chebyshev distance `tol` of some pixel
/// in `reference`, tested against a rasterized mask of the reference set.
fn within_tolerance(
    pixels: &[(usize, usize)],
    reference_mask: &[bool],
    shape: VolumeShape,
    tol: usize,
) -> u64 {
    let (h, w) = (shape.height, shape.width);
    let t = tol as isize;
    pixels
        .iter()
        .filter(|&&(y, x)| {
            for dy in -t..=t {
                for dx in -t..=t {
                    let ny = y as isize + dy;
                    let nx = x as isize + dx;
                    if ny >= 0
                        && nx >= 0
                        && (ny as usize) < h
                        && (nx as usize) < w
                        && reference_mask[ny as usize * w + nx as usize]
                    {
                        return true;
                    }
                }
            }
            false
        })
        .count() as u64
}

/// Boundary agreement of correctly localized objects.
///
/// Per frame and class, predicted components match truth components by
/// box IoU (greedy, descending); pairs at IoU ≥ [`LOCALIZED_IOU`] count as
/// correctly localized and only their boundaries are compared. Precision
/// counts matched predicted boundary pixels within `tol` (Chebyshev) of a
/// matched truth boundary pixel of the same class and frame; recall is
/// symmetric; the result is the F1 of the pooled counts. No localized
/// object anywhere scores 0.
pub fn boundary_accuracy(pred: &LabelMap, gt: &LabelMap, tol: usize) -> Result<f64> {
    check_same_shape(pred, gt, "boundary accuracy")?;
    let shape = pred.shape;
    let (h, w) = (shape.height, shape.width);
    let mut pred_hits = 0u64;
    let mut pred_total = 0u64;
    let mut gt_hits = 0u64;
    let mut gt_total = 0u64;
    for t in 0..shape.frames {
        let gt_comps = frame_components(gt, t);
        let pred_comps = frame_components(pred, t);
        let mut classes: Vec<u16> = gt_comps
            .iter()
            .map(|c| c.label)
            .chain(pred_comps.iter().map(|c| c.label))
            .collect();
        classes.sort_unstable();
        classes.dedup();
        for class in classes {
            let g: Vec<&Component> = gt_comps.iter().filter(|c| c.label == class).collect();
            let p: Vec<&Component> = pred_comps.iter().filter(|c| c.label == class).collect();
            let g_boxes: Vec<BoundingBox> = g.iter().map(|c| c.rect).collect();
            let p_boxes: Vec<BoundingBox> = p.iter().map(|c| c.rect).collect();
            let localized: Vec<(usize, usize)> = greedy_match(&g_boxes, &p_boxes)
                .into_iter()
                .filter(|m| m.2 >= LOCALIZED_IOU)
                .map(|m| (m.0, m.1))
                .collect();
            if localized.is_empty() {
                continue;
            }
            let mut g_boundary = Vec::new();
            let mut p_boundary = Vec::new();
            for &(gi, pi) in &localized {
                g_boundary.extend(component_boundary(gt, t, g[gi]));
                p_boundary.extend(component_boundary(pred, t, p[pi]));
            }
            let mask = |pixels: &[(usize, usize)]| {
                let mut m = vec![false; h * w];
                for &(y, x) in pixels {
                    m[y * w + x] = true;
                }
                m
            };
            let g_mask = mask(&g_boundary);
            let p_mask = mask(&p_boundary);
            pred_hits += within_tolerance(&p_boundary, &g_mask, shape, tol);
            pred_total += p_boundary.len() as u64;
            gt_hits += within_tolerance(&g_boundary, &p_mask, shape, tol);
            gt_total += g_boundary.len() as u64;
        }
    }
    if pred_total == 0 && gt_total == 0 {
        return Ok(0.0);
    }
    let precision = if pred_total == 0 {
        0.0
    } else {
        pred_hits as f64 / pred_total as f64
    };
    let recall = if gt_total == 0 {
        0.0
    } else {
        gt_hits as f64 / gt_total as f64
    };
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

// ---------------------------------------------------------------------------
// Combined report
// ---------------------------------------------------------------------------

/// All four metrics of one prediction/truth pair.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub ta: f64,
    pub la_biou: f64,
    pub ba: f64,
}

impl MetricsReport {
    /// Line-oriented table for terminals and logs.
    pub fn text_table(&self) -> String {
        let mut s = String::new();
        for (c, iou) in self.per_class_iou.iter().enumerate() {
            match iou {
                Some(v) => s.push_str(&format!("iou[{c}]    {v:.6}\n")),
                None => s.push_str(&format!("iou[{c}]    absent\n")),
            }
        }
        s.push_str(&format!("miou      {:.6}\n", self.miou));
        s.push_str(&format!("ta        {:.6}\n", self.ta));
        s.push_str(&format!("la_biou   {:.6}\n", self.la_biou));
        s.push_str(&format!("ba        {:.6}\n", self.ba));
        s
    }
}

/// Evaluate everything at once. Ground-truth boxes default to the
/// component boxes of `gt` when not supplied separately.
pub fn evaluate(
    pred: &LabelMap,
    gt: &LabelMap,
    gt_boxes: Option<&[Vec<LabeledBox>]>,
    labels: usize,
    tol: usize,
) -> Result<MetricsReport> {
    let (per_class_iou, miou_v) = miou(pred, gt, labels)?;
    let ta = tagging_accuracy(pred, gt)?;
    let derived;
    let boxes: &[Vec<LabeledBox>] = match gt_boxes {
        Some(b) => b,
        None => {
            derived = boxes_from_labels(gt);
            &derived
        }
    };
    let la_biou = localization_biou(pred, boxes)?;
    let ba = boundary_accuracy(pred, gt, tol)?;
    Ok(MetricsReport {
        per_class_iou,
        miou: miou_v,
        ta,
        la_biou,
        ba,
    })
}

fn check_same_shape(pred: &LabelMap, gt: &LabelMap, context: &'static str) -> Result<()> {
    if pred.shape != gt.shape {
        return Err(DpnError::ShapeMismatch {
            context,
            expected: format!("{}", gt.shape),
            found: format!("{}", pred.shape),
        });
    }
    Ok(())
}
