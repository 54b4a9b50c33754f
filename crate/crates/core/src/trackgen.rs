//! Reliable tracklet generation with a dual-threshold linking strategy: a
//! frame-to-frame link is accepted only when it is strong in absolute terms
//! and beats the runner-up in both its row and its column by a margin.

use std::collections::BTreeMap;

use crate::config::TrackGenConfig;
use crate::types::{Detection, Tracklet};

/// Frame-to-frame affinity between consecutive detections: a product of
/// position, size and appearance terms, each in (0, 1]. Position distance is
/// normalized by the mean box diagonal; size by relative width/height change;
/// appearance is the cosine distance of the raw features.
pub fn frame_affinity(a: &Detection, b: &Detection, cfg: &TrackGenConfig) -> f64 {
    assert_eq!(
        b.frame,
        a.frame + 1,
        "frame_affinity requires consecutive frames ({} then {})",
        a.frame,
        b.frame
    );
    let (ax, ay) = a.bbox.center();
    let (bx, by) = b.bbox.center();
    let mean_diag = 0.5 * (a.bbox.diagonal() + b.bbox.diagonal());
    let d_pos = ((ax - bx).powi(2) + (ay - by).powi(2)).sqrt() / mean_diag.max(1e-12);

    let d_size = (a.bbox.width - b.bbox.width).abs() / a.bbox.width.max(b.bbox.width)
        + (a.bbox.height - b.bbox.height).abs() / a.bbox.height.max(b.bbox.height);

    let d_app = cosine_distance(&a.feature, &b.feature);

    (-(cfg.w_pos * d_pos + cfg.w_size * d_size + cfg.w_app * d_app)).exp()
}

/// `1 − cos(a, b)`, in [0, 2]; zero vectors are treated as identical to
/// themselves and maximally distant from anything else.
fn cosine_distance(a: &nalgebra::DVector<f64>, b: &nalgebra::DVector<f64>) -> f64 {
    let na = a.norm();
    let nb = b.norm();
    if na == 0.0 && nb == 0.0 {
        return 0.0;
    }
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    1.0 - a.dot(b) / (na * nb)
}

/// A frame-to-frame link accepted by the dual-threshold test.
#[derive(Debug, Clone, Copy)]
struct Link {
    from: usize, // detection index in previous frame bucket
    to: usize,   // detection index in next frame bucket
}

/// Dual-threshold predicate over one affinity table: `table[i][j]` must reach
/// `theta_link` and exceed every other entry in row `i` and column `j` by at
/// least `theta_margin`.
fn accepted_links(table: &[Vec<f64>], cfg: &TrackGenConfig) -> Vec<Link> {
    let rows = table.len();
    let cols = if rows == 0 { 0 } else { table[0].len() };
    let mut links = Vec::new();
    let mut row_used = vec![false; rows];
    let mut col_used = vec![false; cols];
    for i in 0..rows {
        for j in 0..cols {
            let v = table[i][j];
            if v < cfg.theta_link {
                continue;
            }
            let row_runner_up = (0..cols)
                .filter(|&jj| jj != j)
                .map(|jj| table[i][jj])
                .fold(f64::NEG_INFINITY, f64::max);
            let col_runner_up = (0..rows)
                .filter(|&ii| ii != i)
                .map(|ii| table[ii][j])
                .fold(f64::NEG_INFINITY, f64::max);
            let margin_ok = (row_runner_up == f64::NEG_INFINITY
                || v - row_runner_up >= cfg.theta_margin)
                && (col_runner_up == f64::NEG_INFINITY
                    || v - col_runner_up >= cfg.theta_margin);
            if margin_ok && !row_used[i] && !col_used[j] {
                row_used[i] = true;
                col_used[j] = true;
                links.push(Link { from: i, to: j });
            }
        }
    }
    links
}

/// Link detections across consecutive frames into reliable tracklets.
///
/// Tracklets shorter than `min_tracklet_len` are discarded. Each detection
/// joins at most one tracklet. Segment labels are left at zero; the caller
/// assigns them once a segment plan exists.
pub fn generate_tracklets(detections: &[Detection], cfg: &TrackGenConfig) -> Vec<Tracklet> {
    // bucket by frame, remembering original detection order
    let mut by_frame: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (idx, d) in detections.iter().enumerate() {
        by_frame.entry(d.frame).or_default().push(idx);
    }

    // successor[global detection index] = next detection in the same tracklet
    let mut successor: Vec<Option<usize>> = vec![None; detections.len()];
    let mut has_predecessor: Vec<bool> = vec![false; detections.len()];

    let frames: Vec<u32> = by_frame.keys().copied().collect();
    for w in frames.windows(2) {
        let (fa, fb) = (w[0], w[1]);
        if fb != fa + 1 {
            continue; // no detections at all in between: nothing to link
        }
        let prev = &by_frame[&fa];
        let next = &by_frame[&fb];
        let table: Vec<Vec<f64>> = prev
            .iter()
            .map(|&i| {
                next.iter()
                    .map(|&j| frame_affinity(&detections[i], &detections[j], cfg))
                    .collect()
            })
            .collect();
        for link in accepted_links(&table, cfg) {
            let from = prev[link.from];
            let to = next[link.to];
            successor[from] = Some(to);
            has_predecessor[to] = true;
        }
    }

    // walk chains from their start detections, in deterministic frame order
    let mut tracklets = Vec::new();
    let mut tid = 0u32;
    for (_, bucket) in &by_frame {
        for &start in bucket {
            if has_predecessor[start] {
                continue;
            }
            let mut chain = vec![start];
            let mut cur = start;
            while let Some(next) = successor[cur] {
                chain.push(next);
                cur = next;
            }
            if chain.len() < cfg.min_tracklet_len {
                continue;
            }
            let dets: Vec<Detection> = chain.iter().map(|&i| detections[i].clone()).collect();
            tracklets.push(
                Tracklet::new(tid, dets, 0).expect("links are frame-consecutive by construction"),
            );
            tid += 1;
        }
    }
    tracklets
}
