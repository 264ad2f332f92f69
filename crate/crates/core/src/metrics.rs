use alloc::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::imagecore::{FlowField, Frame, LabelMask};
use crate::math::{log10, sqrt};

/// Per-class overlap scores for the foreground classes (ids >= 1).
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SegScore {
    pub per_class_iou: BTreeMap<u8, f64>,
    pub per_class_dice: BTreeMap<u8, f64>,
    /// Mean over classes present in either mask; 1.0 when there are none.
    pub mean_iou: f64,
    pub mean_dice: f64,
}

pub fn segmentation_score(pred: &LabelMask, gt: &LabelMask, num_classes: usize) -> Result<SegScore> {
    if !pred.same_dims(gt) {
        return Err(Error::invalid("prediction and ground truth differ in dimensions"));
    }
    pred.validate(num_classes)?;
    gt.validate(num_classes)?;

    let mut inter = alloc::vec![0usize; num_classes];
    let mut in_pred = alloc::vec![0usize; num_classes];
    let mut in_gt = alloc::vec![0usize; num_classes];
    for (&p, &g) in pred.ids().iter().zip(gt.ids()) {
        in_pred[p as usize] += 1;
        in_gt[g as usize] += 1;
        if p == g {
            inter[p as usize] += 1;
        }
    }

    let mut per_class_iou = BTreeMap::new();
    let mut per_class_dice = BTreeMap::new();
    for c in 1..num_classes {
        let total = in_pred[c] + in_gt[c];
        if total == 0 {
            continue;
        }
        let union = total - inter[c];
        per_class_iou.insert(c as u8, inter[c] as f64 / union as f64);
        per_class_dice.insert(c as u8, 2.0 * inter[c] as f64 / total as f64);
    }
    let mean = |m: &BTreeMap<u8, f64>| {
        if m.is_empty() {
            1.0
        } else {
            m.values().sum::<f64>() / m.len() as f64
        }
    };
    Ok(SegScore { mean_iou: mean(&per_class_iou), mean_dice: mean(&per_class_dice), per_class_iou, per_class_dice })
}

/// Mean and maximum Euclidean distance between the vectors of two flows.
pub fn endpoint_error(flow: &FlowField, gt: &FlowField) -> Result<(f64, f64)> {
    if !flow.same_dims(gt) {
        return Err(Error::invalid("flows differ in dimensions"));
    }
    let mut sum = 0.0;
    let mut max = 0.0f64;
    for i in 0..flow.u().len() {
        let du = flow.u()[i] - gt.u()[i];
        let dv = flow.v()[i] - gt.v()[i];
        let e = sqrt(du * du + dv * dv);
        sum += e;
        max = max.max(e);
    }
    Ok((sum / flow.u().len() as f64, max))
}

/// Peak signal-to-noise ratio in dB for unit-range frames; identical frames
/// give `f64::INFINITY`.
pub fn psnr(a: &Frame, b: &Frame) -> Result<f64> {
    if !a.same_dims(b) {
        return Err(Error::invalid("frames differ in dimensions"));
    }
    let n = a.data().len() as f64;
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * log10(1.0 / mse))
}
