//! Tracklet-pair linking probabilities from motion and appearance cues.
//!
//! Motion scores a pair by extrapolating each tracklet's linear velocity over
//! the frame gap and measuring both residuals under a diagonal Gaussian
//! kernel. Appearance scores it by relative Mahalanobis distances between one
//! tracklet's responses and the other's probe, normalized over the probe set
//! of the successor's segment. The combined matrix is column-normalized, then
//! thresholded.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};

use crate::config::Config;
use crate::embed::EmbeddingNet;
use crate::error::{Error, Result};
use crate::metric::MetricSet;
use crate::types::Tracklet;

/// Degeneracy guard added to the appearance product before inversion.
pub const APPEARANCE_EPS: f64 = 1e-12;
/// Cap keeping degenerate identical-embedding affinities finite.
pub const APPEARANCE_CAP: f64 = 1e12;

/// Forward and backward velocity estimates of one tracklet, px/frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Velocities {
    pub forward: (f64, f64),
    pub backward: (f64, f64),
    /// Single-response tracklet: no slope information.
    pub degenerate: bool,
}

/// Least-squares velocities of the box centers over frames. The forward
/// velocity is fitted head-to-tail; the backward one tail-to-head (the same
/// fit under a reversed time axis, hence the exact negation).
pub fn tracklet_velocities(t: &Tracklet) -> Velocities {
    if t.len() < 2 {
        return Velocities {
            forward: (0.0, 0.0),
            backward: (0.0, 0.0),
            degenerate: true,
        };
    }
    let n = t.len() as f64;
    let mean_f = t.detections().iter().map(|d| d.frame as f64).sum::<f64>() / n;
    let (mut mean_x, mut mean_y) = (0.0, 0.0);
    for d in t.detections() {
        let (cx, cy) = d.bbox.center();
        mean_x += cx;
        mean_y += cy;
    }
    mean_x /= n;
    mean_y /= n;

    let (mut sxx, mut sxy_x, mut sxy_y) = (0.0, 0.0, 0.0);
    for d in t.detections() {
        let df = d.frame as f64 - mean_f;
        let (cx, cy) = d.bbox.center();
        sxx += df * df;
        sxy_x += df * (cx - mean_x);
        sxy_y += df * (cy - mean_y);
    }
    let vx = sxy_x / sxx;
    let vy = sxy_y / sxx;
    Velocities {
        forward: (vx, vy),
        backward: (-vx, -vy),
        degenerate: false,
    }
}

fn gaussian_kernel(residual: (f64, f64), sigma: [f64; 2]) -> f64 {
    (-0.5 * (residual.0 * residual.0 / sigma[0] + residual.1 * residual.1 / sigma[1])).exp()
}

/// Motion affinity: product of the forward-prediction kernel (tail of `ti`
/// extrapolated to the head of `tj`) and the backward one. Peaks at 1 when
/// both residuals vanish.
pub fn motion_affinity(ti: &Tracklet, tj: &Tracklet, sigma: [f64; 2]) -> Result<f64> {
    let tail = ti.tail();
    let head = tj.head();
    if tail.frame >= head.frame {
        return Err(Error::Infeasible(format!(
            "tracklets {} and {} overlap or are out of order",
            ti.tid, tj.tid
        )));
    }
    let dt = (head.frame - tail.frame) as f64;
    let (tx, ty) = tail.bbox.center();
    let (hx, hy) = head.bbox.center();
    let vi = tracklet_velocities(ti).forward;
    let vj = tracklet_velocities(tj).backward;
    let fwd = (tx + vi.0 * dt - hx, ty + vi.1 * dt - hy);
    let bwd = (hx + vj.0 * dt - tx, hy + vj.1 * dt - ty);
    Ok(gaussian_kernel(fwd, sigma) * gaussian_kernel(bwd, sigma))
}

/// One probe (embedding of the strongest response) per tracklet, grouped by
/// the tracklet's segment.
#[derive(Debug, Clone)]
pub struct ProbeSet {
    probes: BTreeMap<u32, (usize, DVector<f64>)>,
}

impl ProbeSet {
    pub fn build(tracklets: &[Tracklet], net: &EmbeddingNet) -> ProbeSet {
        let mut probes = BTreeMap::new();
        for t in tracklets {
            let strongest = t.strongest_responses(1)[0];
            let emb = net.embed(&t.detections()[strongest].feature);
            probes.insert(t.tid, (t.segment, emb));
        }
        ProbeSet { probes }
    }

    pub fn probe(&self, tid: u32) -> Option<&DVector<f64>> {
        self.probes.get(&tid).map(|(_, e)| e)
    }

    /// Probes of every tracklet whose head lies in `segment`, in tid order.
    pub fn segment_probes(&self, segment: usize) -> Vec<&DVector<f64>> {
        self.probes
            .values()
            .filter(|(s, _)| *s == segment)
            .map(|(_, e)| e)
            .collect()
    }

    pub fn n_in_segment(&self, segment: usize) -> usize {
        self.probes.values().filter(|(s, _)| *s == segment).count()
    }

    pub fn len(&self) -> usize {
        self.probes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probes.is_empty()
    }
}

/// Relative distance of a response set to an opposing probe: each response's
/// distance to the probe is divided by the root of its summed distances to
/// the whole probe set, then averaged over the responses.
fn relative_distance<F>(responses: &[DVector<f64>], probe: &DVector<f64>, probe_set: &[&DVector<f64>], dist: &F) -> f64
where
    F: Fn(&DVector<f64>, &DVector<f64>) -> f64,
{
    let mut acc = 0.0;
    for x in responses {
        let d_to_probe = dist(x, probe);
        let norm: f64 = probe_set.iter().map(|g| dist(x, g)).sum::<f64>().sqrt();
        if norm > 0.0 {
            acc += d_to_probe / norm;
        }
    }
    acc / responses.len() as f64
}

fn appearance_from_parts(d_ij: f64, d_ji: f64) -> f64 {
    (1.0 / (d_ij * d_ji + APPEARANCE_EPS)).min(APPEARANCE_CAP)
}

/// Appearance affinity under the learned metrics. The probe set and the
/// metric of the successor's segment (the gap's end) govern the comparison.
pub fn appearance_affinity(
    ti: &Tracklet,
    tj: &Tracklet,
    probes: &ProbeSet,
    ms: &MetricSet,
    net: &EmbeddingNet,
) -> Result<f64> {
    let segment = tj.segment;
    if segment >= ms.n_segments() {
        return Err(Error::Internal(format!(
            "segment {segment} outside metric set of {}",
            ms.n_segments()
        )));
    }
    let probe_set = probes.segment_probes(segment);
    if probe_set.is_empty() {
        return Err(Error::Internal(format!(
            "empty probe set for segment {segment}"
        )));
    }
    let g_i = probes
        .probe(ti.tid)
        .ok_or_else(|| Error::Internal(format!("missing probe for tracklet {}", ti.tid)))?;
    let g_j = probes
        .probe(tj.tid)
        .ok_or_else(|| Error::Internal(format!("missing probe for tracklet {}", tj.tid)))?;

    let m_tot = ms.total_for_segment(segment);
    let dist = |x: &DVector<f64>, g: &DVector<f64>| -> f64 {
        let d = x - g;
        (d.transpose() * &m_tot * &d)[(0, 0)]
    };

    let emb_i: Vec<DVector<f64>> = ti
        .detections()
        .iter()
        .map(|d| net.embed(&d.feature))
        .collect();
    let emb_j: Vec<DVector<f64>> = tj
        .detections()
        .iter()
        .map(|d| net.embed(&d.feature))
        .collect();

    let d_ij = relative_distance(&emb_i, g_j, &probe_set, &dist);
    let d_ji = relative_distance(&emb_j, g_i, &probe_set, &dist);
    Ok(appearance_from_parts(d_ij, d_ji))
}

/// Linking-probability matrix over tracklets, plus the frame gap of each
/// feasible ordered pair (zero marks infeasible pairs).
#[derive(Debug, Clone)]
pub struct AffinityMatrix {
    pub tids: Vec<u32>,
    pub p: DMatrix<f64>,
    gaps: DMatrix<u32>,
}

impl AffinityMatrix {
    pub fn empty() -> Self {
        AffinityMatrix {
            tids: vec![],
            p: DMatrix::zeros(0, 0),
            gaps: DMatrix::zeros(0, 0),
        }
    }

    pub fn n(&self) -> usize {
        self.tids.len()
    }

    pub fn is_feasible(&self, i: usize, j: usize) -> bool {
        self.gaps[(i, j)] > 0
    }

    pub fn gap(&self, i: usize, j: usize) -> Option<u32> {
        match self.gaps[(i, j)] {
            0 => None,
            g => Some(g),
        }
    }

    /// Debug dump: `row_tid,col_tid,value` for every nonzero entry.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("from_tid,to_tid,p\n");
        for i in 0..self.n() {
            for j in 0..self.n() {
                if self.p[(i, j)] != 0.0 {
                    let _ = writeln!(out, "{},{},{}", self.tids[i], self.tids[j], self.p[(i, j)]);
                }
            }
        }
        out
    }
}

/// Factor `M ≈ UᵀU` (eigenvalues clamped at zero) so the quadratic form
/// becomes a squared Euclidean distance of transformed vectors.
fn metric_factor(m_tot: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m_tot + m_tot.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let sqrt_vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    DMatrix::from_diagonal(&sqrt_vals) * eig.eigenvectors.transpose()
}

/// Build the full affinity matrix: motion × appearance per temporally
/// feasible ordered pair, column-normalized, entries below ω zeroed.
pub fn build_affinity(
    tracklets: &[Tracklet],
    ms: &MetricSet,
    net: &EmbeddingNet,
    cfg: &Config,
) -> Result<AffinityMatrix> {
    let n = tracklets.len();
    let tids: Vec<u32> = tracklets.iter().map(|t| t.tid).collect();
    let max_gap = cfg.effective_max_gap();
    let mut p = DMatrix::zeros(n, n);
    let mut gaps = DMatrix::zeros(n, n);
    if n == 0 {
        return Ok(AffinityMatrix { tids, p, gaps });
    }
    for t in tracklets {
        if t.segment >= ms.n_segments() {
            return Err(Error::Internal(format!(
                "tracklet {} in segment {} but metric set has {}",
                t.tid,
                t.segment,
                ms.n_segments()
            )));
        }
    }

    // embeddings of every response, and probe embeddings, computed once
    let embeddings: Vec<Vec<DVector<f64>>> = tracklets
        .iter()
        .map(|t| t.detections().iter().map(|d| net.embed(&d.feature)).collect())
        .collect();
    let probe_idx: Vec<usize> = tracklets
        .iter()
        .map(|t| t.strongest_responses(1)[0])
        .collect();

    // feasible ordered pairs, grouped by the successor's segment
    let mut by_segment: BTreeMap<usize, Vec<(usize, usize, u32)>> = BTreeMap::new();
    for j in 0..n {
        let head = tracklets[j].head().frame;
        for i in 0..n {
            if i == j {
                continue;
            }
            let tail = tracklets[i].tail().frame;
            if tail < head && head - tail <= max_gap {
                by_segment
                    .entry(tracklets[j].segment)
                    .or_default()
                    .push((i, j, head - tail));
            }
        }
    }

    for (&segment, pairs) in &by_segment {
        let factor = metric_factor(&ms.total_for_segment(segment));

        // tracklets participating in this segment's comparisons
        let mut involved: Vec<usize> = pairs.iter().flat_map(|&(i, j, _)| [i, j]).collect();
        involved.sort_unstable();
        involved.dedup();

        // transformed response embeddings and probes
        let mut transformed: BTreeMap<usize, Vec<DVector<f64>>> = BTreeMap::new();
        for &t in &involved {
            transformed.insert(t, embeddings[t].iter().map(|e| &factor * e).collect());
        }
        let probe_of = |t: usize, transformed: &BTreeMap<usize, Vec<DVector<f64>>>| {
            transformed[&t][probe_idx[t]].clone()
        };

        // the segment's probe set, in tid order (tracklets are not assumed
        // sorted by tid, so sort explicitly for a deterministic sum order)
        let mut member_order: Vec<usize> = (0..n).filter(|&t| tracklets[t].segment == segment).collect();
        member_order.sort_by_key(|&t| tracklets[t].tid);
        let segment_probe_vecs: Vec<DVector<f64>> = member_order
            .iter()
            .map(|&t| {
                transformed
                    .get(&t)
                    .map(|e| e[probe_idx[t]].clone())
                    .unwrap_or_else(|| &factor * &embeddings[t][probe_idx[t]])
            })
            .collect();
        if segment_probe_vecs.is_empty() {
            return Err(Error::Internal(format!(
                "no probes in segment {segment} despite feasible pairs"
            )));
        }

        // per-response normalizers over the segment's probe set
        let mut norms: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for &t in &involved {
            let resp = &transformed[&t];
            let norm: Vec<f64> = resp
                .iter()
                .map(|y| {
                    segment_probe_vecs
                        .iter()
                        .map(|g| (y - g).norm_squared())
                        .sum::<f64>()
                        .sqrt()
                })
                .collect();
            norms.insert(t, norm);
        }

        let relative = |t: usize, probe: &DVector<f64>| -> f64 {
            let resp = &transformed[&t];
            let norm = &norms[&t];
            let mut acc = 0.0;
            for (y, &nk) in resp.iter().zip(norm) {
                if nk > 0.0 {
                    acc += (y - probe).norm_squared() / nk;
                }
            }
            acc / resp.len() as f64
        };

        for &(i, j, gap) in pairs {
            let pm = motion_affinity(&tracklets[i], &tracklets[j], cfg.sigma_motion)?;
            let d_ij = relative(i, &probe_of(j, &transformed));
            let d_ji = relative(j, &probe_of(i, &transformed));
            let pa = appearance_from_parts(d_ij, d_ji);
            p[(i, j)] = pm * pa;
            gaps[(i, j)] = gap;
        }
    }

    // column normalization (scale each column so its best entry is 1), then
    // the threshold
    for j in 0..n {
        let col_max = (0..n).map(|i| p[(i, j)]).fold(0.0, f64::max);
        if col_max > 0.0 {
            for i in 0..n {
                p[(i, j)] /= col_max;
            }
        }
        for i in 0..n {
            if p[(i, j)] < cfg.omega {
                p[(i, j)] = 0.0;
            }
        }
    }

    Ok(AffinityMatrix { tids, p, gaps })
}
