//! Tracking evaluation: per-frame one-to-one box matching with persistence
//! preference, and the usual summary metrics (MOTA, MOTP, identity switches,
//! fragmentations, track coverage categories).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{BBox, Trajectory};

/// Evaluation summary. MOTP is overlap-based (mean IoU of matched pairs,
/// higher is better). `mt`, `pt`, `ml` are counts over ground-truth tracks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mota: f64,
    pub motp: f64,
    pub recall: f64,
    pub precision: f64,
    pub faf: f64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_count: u64,
    pub ids: u64,
    pub frag: u64,
    pub gt: u64,
    pub mt: u64,
    pub pt: u64,
    pub ml: u64,
}

impl EvalReport {
    /// Aligned text table.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "{:>8} {:>8} {:>8} {:>9} {:>6} {:>6} {:>6} {:>5} {:>5} {:>4} {:>4} {:>4} {:>4}\n",
            "MOTA", "MOTP", "Recall", "Precision", "FAF", "FP", "FN", "IDS", "Frag", "GT", "MT", "PT", "ML"
        ));
        s.push_str(&format!(
            "{:>8.4} {:>8.4} {:>8.4} {:>9.4} {:>6.2} {:>6} {:>6} {:>5} {:>5} {:>4} {:>4} {:>4} {:>4}\n",
            self.mota,
            self.motp,
            self.recall,
            self.precision,
            self.faf,
            self.fp,
            self.fn_count,
            self.ids,
            self.frag,
            self.gt,
            self.mt,
            self.pt,
            self.ml
        ));
        s
    }
}

/// Exact maximum-weight one-to-one matching (shortest augmenting path with
/// potentials, square-padded). Weights below `eligible` count as zero and
/// never produce a pair.
fn max_weight_matching(weights: &[Vec<f64>]) -> Vec<(usize, usize)> {
    let rows = weights.len();
    let cols = if rows == 0 { 0 } else { weights[0].len() };
    if rows == 0 || cols == 0 {
        return Vec::new();
    }
    let dim = rows.max(cols);
    let max_w = weights
        .iter()
        .flatten()
        .fold(0.0f64, |acc, &w| acc.max(w));
    // minimize cost = max_w - weight on a padded square matrix
    let cost = |i: usize, j: usize| -> f64 {
        if i < rows && j < cols {
            max_w - weights[i][j]
        } else {
            max_w
        }
    };

    let n = dim;
    let m = dim;
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut assignment = vec![0usize; m + 1]; // column -> row (1-based, 0 = free)
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        assignment[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = assignment[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[assignment[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if assignment[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            assignment[j0] = assignment[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut pairs = Vec::new();
    for j in 1..=m {
        let i = assignment[j];
        if i >= 1 && i - 1 < rows && j - 1 < cols && weights[i - 1][j - 1] > 0.0 {
            pairs.push((i - 1, j - 1));
        }
    }
    pairs
}

/// Match one frame's ground-truth boxes against predictions.
///
/// Correspondences carried over from the previous frame are kept whenever
/// they still overlap enough; the rest are matched one-to-one maximizing
/// total overlap among pairs at or above the threshold.
pub fn match_frame(
    gt_boxes: &[(u32, BBox)],
    pred_boxes: &[(u32, BBox)],
    iou_threshold: f64,
    prev: &BTreeMap<u32, u32>,
) -> Vec<(usize, usize, f64)> {
    let mut matched: Vec<(usize, usize, f64)> = Vec::new();
    let mut gt_free: Vec<bool> = vec![true; gt_boxes.len()];
    let mut pred_free: Vec<bool> = vec![true; pred_boxes.len()];

    // persistence pass
    for (gi, &(gt_id, gbox)) in gt_boxes.iter().enumerate() {
        if let Some(&prev_pred) = prev.get(&gt_id) {
            if let Some(pi) = pred_boxes.iter().position(|&(pid, _)| pid == prev_pred) {
                if pred_free[pi] {
                    let iou = gbox.iou(&pred_boxes[pi].1);
                    if iou >= iou_threshold {
                        matched.push((gi, pi, iou));
                        gt_free[gi] = false;
                        pred_free[pi] = false;
                    }
                }
            }
        }
    }

    // optimal matching over what remains
    let free_gt: Vec<usize> = (0..gt_boxes.len()).filter(|&i| gt_free[i]).collect();
    let free_pred: Vec<usize> = (0..pred_boxes.len()).filter(|&i| pred_free[i]).collect();
    let weights: Vec<Vec<f64>> = free_gt
        .iter()
        .map(|&gi| {
            free_pred
                .iter()
                .map(|&pi| {
                    let iou = gt_boxes[gi].1.iou(&pred_boxes[pi].1);
                    if iou >= iou_threshold {
                        iou
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    for (a, b) in max_weight_matching(&weights) {
        let (gi, pi) = (free_gt[a], free_pred[b]);
        matched.push((gi, pi, gt_boxes[gi].1.iou(&pred_boxes[pi].1)));
    }
    matched.sort_unstable_by_key(|&(gi, _, _)| gi);
    matched
}

/// Full sequence evaluation.
pub fn evaluate(
    gt: &[Trajectory],
    pred: &[Trajectory],
    iou_threshold: f64,
) -> Result<EvalReport> {
    if gt.is_empty() || gt.iter().all(|t| t.entries.is_empty()) {
        return Err(Error::Internal("empty ground truth".to_string()));
    }

    // frame -> boxes present
    let mut gt_frames: BTreeMap<u32, Vec<(u32, BBox)>> = BTreeMap::new();
    for t in gt {
        for &(f, b) in &t.entries {
            gt_frames.entry(f).or_default().push((t.track_id, b));
        }
    }
    let mut pred_frames: BTreeMap<u32, Vec<(u32, BBox)>> = BTreeMap::new();
    for t in pred {
        for &(f, b) in &t.entries {
            pred_frames.entry(f).or_default().push((t.track_id, b));
        }
    }

    let first = *gt_frames.keys().next().unwrap();
    let last = *gt_frames.keys().last().unwrap();
    let n_frames = (last - first + 1) as f64;

    let mut last_match: BTreeMap<u32, u32> = BTreeMap::new();
    let mut matched_at_last_presence: BTreeMap<u32, bool> = BTreeMap::new();
    let mut ever_matched: BTreeMap<u32, bool> = BTreeMap::new();
    let mut presence: BTreeMap<u32, u64> = BTreeMap::new();
    let mut covered: BTreeMap<u32, u64> = BTreeMap::new();

    let mut fp = 0u64;
    let mut fn_count = 0u64;
    let mut ids = 0u64;
    let mut frag = 0u64;
    let mut matches = 0u64;
    let mut overlap_sum = 0.0f64;
    let mut total_gt = 0u64;

    let all_frames: Vec<u32> = {
        let mut f: Vec<u32> = gt_frames
            .keys()
            .chain(pred_frames.keys())
            .copied()
            .collect();
        f.sort_unstable();
        f.dedup();
        f
    };

    for &frame in &all_frames {
        let empty = Vec::new();
        let g = gt_frames.get(&frame).unwrap_or(&empty);
        let p = pred_frames.get(&frame).unwrap_or(&empty);
        total_gt += g.len() as u64;

        let pairs = match_frame(g, p, iou_threshold, &last_match);

        let mut gt_matched = vec![false; g.len()];
        let mut pred_matched = vec![false; p.len()];
        for &(gi, pi, iou) in &pairs {
            gt_matched[gi] = true;
            pred_matched[pi] = true;
            matches += 1;
            overlap_sum += iou;
            let gt_id = g[gi].0;
            let pred_id = p[pi].0;
            if let Some(&prev_pred) = last_match.get(&gt_id) {
                if prev_pred != pred_id {
                    ids += 1;
                }
            }
            // fragmentation: re-acquired after an unmatched spell
            if ever_matched.get(&gt_id).copied().unwrap_or(false)
                && !matched_at_last_presence.get(&gt_id).copied().unwrap_or(true)
            {
                frag += 1;
            }
            last_match.insert(gt_id, pred_id);
            ever_matched.insert(gt_id, true);
            *covered.entry(gt_id).or_insert(0) += 1;
        }
        for (gi, &(gt_id, _)) in g.iter().enumerate() {
            *presence.entry(gt_id).or_insert(0) += 1;
            matched_at_last_presence.insert(gt_id, gt_matched[gi]);
            if !gt_matched[gi] {
                fn_count += 1;
            }
        }
        fp += pred_matched.iter().filter(|&&m| !m).count() as u64;
    }

    let (mut mt, mut pt, mut ml) = (0u64, 0u64, 0u64);
    for (gt_id, &present) in &presence {
        let cov = covered.get(gt_id).copied().unwrap_or(0) as f64 / present as f64;
        if cov >= 0.8 {
            mt += 1;
        } else if cov <= 0.2 {
            ml += 1;
        } else {
            pt += 1;
        }
    }

    let mota = 1.0 - (fp + fn_count + ids) as f64 / total_gt as f64;
    let motp = if matches > 0 {
        overlap_sum / matches as f64
    } else {
        0.0
    };
    Ok(EvalReport {
        mota,
        motp,
        recall: matches as f64 / total_gt as f64,
        precision: if matches + fp > 0 {
            matches as f64 / (matches + fp) as f64
        } else {
            0.0
        },
        faf: fp as f64 / n_frames,
        fp,
        fn_count,
        ids,
        frag,
        gt: gt.len() as u64,
        mt,
        pt,
        ml,
    })
}
