//! Toy BEV backbone, center-based detection head, loss, box decoding, and AP.

use rand::Rng;

use crate::error::{invalid, shape_err, Result};
use crate::nn;
use crate::tensor::{Graph, NodeId, ParamStore, Primitive, Tensor};

/// Input channels of a rendered observation: occupancy and visibility.
pub const OBS_CHANNELS: usize = 2;
pub const AP_IOU_THRESHOLDS: [f64; 3] = [0.3, 0.5, 0.7];
pub const DEFAULT_SCORE_THRESHOLD: f64 = 0.05;
pub const DEFAULT_NMS_IOU: f64 = 0.5;
pub const REG_WEIGHT: f64 = 1.0;
const CLS_PRIOR: f64 = 0.01;
const BACKBONE_LAYERS: usize = 3;
const HEAD_LAYERS: usize = 2;

/// Axis-aligned box in cell units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundingBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub score: f64,
}

impl BoundingBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64, score: f64) -> Result<Self> {
        if !(w > 0.0 && h > 0.0) || ![cx, cy, w, h, score].iter().all(|v| v.is_finite()) {
            return invalid(format!("degenerate box ({cx}, {cy}, {w}, {h})"));
        }
        Ok(Self { cx, cy, w, h, score })
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn iou(&self, other: &Self) -> f64 {
        let ix = (self.cx + self.w / 2.0).min(other.cx + other.w / 2.0) - (self.cx - self.w / 2.0).max(other.cx - other.w / 2.0);
        let iy = (self.cy + self.h / 2.0).min(other.cy + other.h / 2.0) - (self.cy - self.h / 2.0).max(other.cy - other.h / 2.0);
        if ix <= 0.0 || iy <= 0.0 {
            return 0.0;
        }
        let inter = ix * iy;
        inter / (self.area() + other.area() - inter)
    }

    /// Row-major index of the cell holding the center.
    pub fn center_cell(&self, h: usize, w: usize) -> Option<usize> {
        let (col, row) = (self.cx.floor(), self.cy.floor());
        if col < 0.0 || row < 0.0 || col >= w as f64 || row >= h as f64 {
            return None;
        }
        Some(row as usize * w + col as usize)
    }
}

/// Objectness probabilities `(1,H,W)` and regression `(4,H,W)`:
/// `δx, δy, ln w, ln h` per cell.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutput {
    pub heatmap: Tensor,
    pub regression: Tensor,
}

impl HeadOutput {
    pub fn new(heatmap: Tensor, regression: Tensor) -> Result<Self> {
        let Some((1, h, w)) = heatmap.chw() else {
            return shape_err("head_output", format!("heatmap {:?} must be [1, H, W]", heatmap.shape()));
        };
        if regression.shape() != [4, h, w] {
            return shape_err("head_output", format!("regression {:?} must be [4, {h}, {w}]", regression.shape()));
        }
        if heatmap.data().iter().any(|p| !(0.0..=1.0).contains(p)) {
            return invalid("heatmap entries must lie in [0, 1]");
        }
        Ok(Self { heatmap, regression })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct HeadNodes {
    pub logits: NodeId,
    pub regression: NodeId,
}

pub fn init_backbone(store: &mut ParamStore, channels: usize, rng: &mut impl Rng) {
    for l in 1..=BACKBONE_LAYERS {
        let c_in = if l == 1 { OBS_CHANNELS } else { channels };
        nn::init_conv(store, &format!("backbone.conv{l}"), channels, c_in, 3, rng);
    }
}

pub fn init_head(store: &mut ParamStore, channels: usize, rng: &mut impl Rng) {
    for l in 1..=HEAD_LAYERS {
        nn::init_conv(store, &format!("head.conv{l}"), channels, channels, 3, rng);
    }
    nn::init_conv(store, "head.cls", 1, channels, 1, rng);
    store.insert("head.cls.b", Tensor::full([1], (CLS_PRIOR / (1.0 - CLS_PRIOR)).ln()));
    nn::init_conv(store, "head.reg", 4, channels, 1, rng);
}

/// Observation `(2,H,W)` → nonnegative feature `Z` `(C,H,W)`.
pub fn backbone(g: &mut Graph, store: &ParamStore, obs: NodeId) -> Result<NodeId> {
    match g.value(obs).chw() {
        Some((OBS_CHANNELS, h, w)) if h % 8 == 0 && w % 8 == 0 => {}
        _ => {
            return shape_err(
                "backbone",
                format!("observation {:?} must be [2, H, W] with H, W divisible by 8", g.value(obs).shape()),
            )
        }
    }
    let mut x = obs;
    for l in 1..=BACKBONE_LAYERS {
        x = nn::conv(g, store, &format!("backbone.conv{l}"), x, 1, 1)?;
        x = nn::relu(g, x)?;
    }
    Ok(x)
}

pub fn head(g: &mut Graph, store: &ParamStore, feature: NodeId) -> Result<HeadNodes> {
    let mut x = feature;
    for l in 1..=HEAD_LAYERS {
        x = nn::conv(g, store, &format!("head.conv{l}"), x, 1, 1)?;
        x = nn::relu(g, x)?;
    }
    Ok(HeadNodes {
        logits: nn::conv(g, store, "head.cls", x, 1, 0)?,
        regression: nn::conv(g, store, "head.reg", x, 1, 0)?,
    })
}

pub fn head_output(g: &Graph, nodes: HeadNodes) -> Result<HeadOutput> {
    let heatmap = g.value(nodes.logits).map(|x| 1.0 / (1.0 + (-x).exp()));
    HeadOutput::new(heatmap, g.value(nodes.regression).clone())
}

/// Labels rasterized onto the grid. When two boxes share a center cell the
/// first one listed wins.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    pub heatmap: Tensor,
    pub regression: Tensor,
    /// 1 on the four regression channels of every positive cell.
    pub weight: Tensor,
    pub positives: usize,
}

pub fn rasterize_targets(labels: &[BoundingBox], h: usize, w: usize) -> Targets {
    let plane = h * w;
    let mut heat = vec![0.0; plane];
    let mut reg = vec![0.0; 4 * plane];
    let mut weight = vec![0.0; 4 * plane];
    let mut positives = 0;
    for b in labels {
        let Some(cell) = b.center_cell(h, w) else { continue };
        if heat[cell] > 0.0 {
            continue;
        }
        heat[cell] = 1.0;
        positives += 1;
        let t = [b.cx - b.cx.floor(), b.cy - b.cy.floor(), b.w.ln(), b.h.ln()];
        for (ch, v) in t.into_iter().enumerate() {
            reg[ch * plane + cell] = v;
            weight[ch * plane + cell] = 1.0;
        }
    }
    Targets {
        heatmap: Tensor::from_fn([1, h, w], |i| heat[i]),
        regression: Tensor::from_fn([4, h, w], |i| reg[i]),
        weight: Tensor::from_fn([4, h, w], |i| weight[i]),
        positives,
    }
}

/// Mean per-cell BCE on the heatmap, plus the mean BCE over the center cells
/// alone so that a handful of positives is not drowned out by the background,
/// plus `λ_reg · Σ|r − t| / n_pos` over the center cells.
pub fn detection_loss(g: &mut Graph, pred: HeadNodes, targets: &Targets) -> Result<NodeId> {
    if g.value(pred.logits).shape() != targets.heatmap.shape() {
        return shape_err(
            "detection_loss",
            format!("logits {:?} vs targets {:?}", g.value(pred.logits).shape(), targets.heatmap.shape()),
        );
    }
    let t = g.input(targets.heatmap.clone());
    let cls = g.apply(Primitive::BceWithLogits, &[pred.logits, t])?;
    if targets.positives == 0 {
        return Ok(cls);
    }
    let scale = 1.0 / targets.positives as f64;
    // −ln σ(x) = relu(−x) + ln(1 + e^{−|x|}), summed over the center cells.
    let neg = g.apply(Primitive::Affine { scale: -1.0, shift: 0.0 }, &[pred.logits])?;
    let hinge = g.apply(Primitive::Relu, &[neg])?;
    let abs = g.apply(Primitive::Abs, &[pred.logits])?;
    let nabs = g.apply(Primitive::Affine { scale: -1.0, shift: 0.0 }, &[abs])?;
    let ex = g.apply(Primitive::Exp, &[nabs])?;
    let one_plus = g.apply(Primitive::Affine { scale: 1.0, shift: 1.0 }, &[ex])?;
    let soft = g.apply(Primitive::Ln, &[one_plus])?;
    let nll = g.apply(Primitive::Add, &[hinge, soft])?;
    let pos = g.apply(Primitive::Mul, &[nll, t])?;
    let pos = g.apply(Primitive::Sum, &[pos])?;
    let pos = g.apply(Primitive::Affine { scale, shift: 0.0 }, &[pos])?;
    let cls = g.apply(Primitive::Add, &[cls, pos])?;
    let t = g.input(targets.regression.clone());
    let wt = g.input(targets.weight.clone());
    let diff = g.apply(Primitive::Sub, &[pred.regression, t])?;
    let abs = g.apply(Primitive::Abs, &[diff])?;
    let masked = g.apply(Primitive::Mul, &[abs, wt])?;
    let sum = g.apply(Primitive::Sum, &[masked])?;
    let reg = g.apply(
        Primitive::Affine {
            scale: REG_WEIGHT * scale,
            shift: 0.0,
        },
        &[sum],
    )?;
    g.apply(Primitive::Add, &[cls, reg])
}

/// `L_detect + β · Σ KL`.
pub fn total_loss(g: &mut Graph, detect: NodeId, kl_terms: &[NodeId], beta: f64) -> Result<NodeId> {
    if !(beta >= 0.0) {
        return invalid(format!("beta must be nonnegative, got {beta}"));
    }
    let mut total = detect;
    for &kl in kl_terms {
        let scaled = g.apply(Primitive::Affine { scale: beta, shift: 0.0 }, &[kl])?;
        total = g.apply(Primitive::Add, &[total, scaled])?;
    }
    Ok(total)
}

/// Greedy NMS: highest score first, ties to the earlier entry; a box is
/// dropped when its IoU with any kept box exceeds `iou`.
pub fn nms(boxes: &[BoundingBox], iou: f64) -> Vec<BoundingBox> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| boxes[b].score.total_cmp(&boxes[a].score).then(a.cmp(&b)));
    let mut kept: Vec<BoundingBox> = Vec::new();
    for i in order {
        if kept.iter().all(|k| k.iou(&boxes[i]) <= iou) {
            kept.push(boxes[i]);
        }
    }
    kept
}

/// 3×3 local maxima of the heatmap at or above `threshold`, turned into boxes
/// and passed through [`nms`]. Candidates are listed in row-major order so
/// score ties resolve to the smaller cell index.
pub fn decode_boxes(pred: &HeadOutput, threshold: f64, nms_iou: f64) -> Result<Vec<BoundingBox>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return invalid(format!("score threshold {threshold} outside (0, 1)"));
    }
    let Some((_, h, w)) = pred.heatmap.chw() else {
        return shape_err("decode_boxes", "heatmap must be [1, H, W]");
    };
    let heat = pred.heatmap.data();
    let reg = pred.regression.data();
    let plane = h * w;
    let mut cands = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let s = heat[r * w + c];
            if s < threshold {
                continue;
            }
            let is_peak = (r.saturating_sub(1)..(r + 2).min(h))
                .flat_map(|rr| (c.saturating_sub(1)..(c + 2).min(w)).map(move |cc| (rr, cc)))
                .all(|(rr, cc)| heat[rr * w + cc] <= s);
            if !is_peak {
                continue;
            }
            let cell = r * w + c;
            let bw = reg[2 * plane + cell].clamp(-10.0, 10.0).exp();
            let bh = reg[3 * plane + cell].clamp(-10.0, 10.0).exp();
            cands.push(BoundingBox::new(
                c as f64 + reg[cell],
                r as f64 + reg[plane + cell],
                bw,
                bh,
                s,
            )?);
        }
    }
    Ok(nms(&cands, nms_iou))
}

/// All-points interpolated AP over frames pooled together. Predictions are
/// ranked by score (ties by frame, then position); each one claims the
/// best-overlapping still-unclaimed ground truth in its frame if that overlap
/// reaches `iou_thr`. With no ground truth at all, AP is 1 when there are no
/// predictions and 0 otherwise.
pub fn average_precision(preds: &[Vec<BoundingBox>], gts: &[Vec<BoundingBox>], iou_thr: f64) -> Result<f64> {
    if preds.len() != gts.len() {
        return invalid(format!("{} prediction frames vs {} ground-truth frames", preds.len(), gts.len()));
    }
    let n_gt: usize = gts.iter().map(Vec::len).sum();
    let mut ranked: Vec<(usize, usize)> = preds
        .iter()
        .enumerate()
        .flat_map(|(f, ps)| (0..ps.len()).map(move |i| (f, i)))
        .collect();
    if n_gt == 0 {
        return Ok(if ranked.is_empty() { 1.0 } else { 0.0 });
    }
    ranked.sort_by(|a, b| preds[b.0][b.1].score.total_cmp(&preds[a.0][a.1].score).then(a.cmp(b)));
    let mut claimed: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = 0usize;
    let mut curve = Vec::with_capacity(ranked.len());
    for (rank, &(f, i)) in ranked.iter().enumerate() {
        let p = &preds[f][i];
        let best = gts[f]
            .iter()
            .enumerate()
            .filter(|(j, _)| !claimed[f][*j])
            .map(|(j, g)| (j, p.iou(g)))
            .filter(|&(_, o)| o >= iou_thr)
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
        if let Some((j, _)) = best {
            claimed[f][j] = true;
            tp += 1;
        }
        curve.push((tp as f64 / n_gt as f64, tp as f64 / (rank + 1) as f64));
    }
    let mut ap = 0.0;
    let mut best_precision = 0.0f64;
    let mut prev_recall = curve.last().map_or(0.0, |c| c.0);
    for &(recall, precision) in curve.iter().rev() {
        // Walking backwards, the precision envelope is a running maximum.
        ap += (prev_recall - recall) * best_precision;
        best_precision = best_precision.max(precision);
        prev_recall = recall;
    }
    ap += prev_recall * best_precision;
    Ok(ap)
}

/// AP at each of [`AP_IOU_THRESHOLDS`] and their mean.
pub fn ap_summary(preds: &[Vec<BoundingBox>], gts: &[Vec<BoundingBox>]) -> Result<([f64; 3], f64)> {
    let mut aps = [0.0; 3];
    for (a, &t) in aps.iter_mut().zip(&AP_IOU_THRESHOLDS) {
        *a = average_precision(preds, gts, t)?;
    }
    Ok((aps, aps.iter().sum::<f64>() / 3.0))
}
