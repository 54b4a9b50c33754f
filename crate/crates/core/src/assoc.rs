//! Association: solve the generalized linear assignment over the affinity
//! matrix with deterministic-annealing softassign, merge linked tracklets
//! into trajectories, and fill the gaps with linear interpolation.
//!
//! The assignment maximizes `Σ P_ij · X_ij` with every row and column sum at
//! most one. A slack row and column exempt from the normalization competition
//! let tracklets start and terminate without explicit source/sink modelling.

use nalgebra::DMatrix;

use crate::config::SoftassignConfig;
use crate::error::{Error, Result};
use crate::types::{BBox, Tracklet, Trajectory};

/// Binary predecessor/successor assignment over `n` tracklets.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentSolution {
    pub n: usize,
    /// Accepted links `(i, j)`: row `i` precedes column `j`.
    pub links: Vec<(usize, usize)>,
    pub objective: f64,
    /// Vertex-disjoint predecessor chains (indices into the tracklet list),
    /// singletons included.
    pub chains: Vec<Vec<usize>>,
}

impl AssignmentSolution {
    /// Row/column occupancy check: at most one link out of and into each
    /// tracklet.
    pub fn satisfies_constraints(&self) -> bool {
        let mut row = vec![0usize; self.n];
        let mut col = vec![0usize; self.n];
        for &(i, j) in &self.links {
            row[i] += 1;
            col[j] += 1;
        }
        row.iter().all(|&c| c <= 1) && col.iter().all(|&c| c <= 1)
    }
}

/// Decompose links into predecessor chains. Temporally feasible affinities can
/// never produce a cycle, but the row/column constraints alone permit them;
/// cycle components are emitted verbatim (starting at their smallest member)
/// and rejected later by the temporal check in `merge_tracklets`.
fn chains_from_links(n: usize, links: &[(usize, usize)]) -> Result<Vec<Vec<usize>>> {
    let mut successor = vec![None; n];
    let mut has_pred = vec![false; n];
    for &(i, j) in links {
        if successor[i].is_some() || has_pred[j] {
            return Err(Error::Internal(
                "assignment violates row/column constraints".to_string(),
            ));
        }
        successor[i] = Some(j);
        has_pred[j] = true;
    }
    let mut visited = vec![false; n];
    let mut chains = Vec::new();
    for start in 0..n {
        if has_pred[start] || visited[start] {
            continue;
        }
        let mut chain = vec![start];
        visited[start] = true;
        let mut cur = start;
        while let Some(next) = successor[cur] {
            chain.push(next);
            visited[next] = true;
            cur = next;
        }
        chains.push(chain);
    }
    // anything left unvisited sits on a cycle
    for start in 0..n {
        if visited[start] {
            continue;
        }
        let mut chain = vec![start];
        visited[start] = true;
        let mut cur = start;
        while let Some(next) = successor[cur] {
            if next == chain[0] {
                break;
            }
            chain.push(next);
            visited[next] = true;
            cur = next;
        }
        chains.push(chain);
    }
    Ok(chains)
}

fn objective_of(p: &DMatrix<f64>, links: &[(usize, usize)]) -> f64 {
    links.iter().map(|&(i, j)| p[(i, j)]).sum()
}

/// Deterministic-annealing softassign.
///
/// The relaxation matrix carries one slack row and column; at each annealing
/// temperature the real entries are set to `exp(β·P)` and rows/columns are
/// alternately normalized (the slack row and column are never normalized
/// themselves, so mass can always retreat to "unassigned"). After the final
/// temperature the relaxation is binarized and any residual conflicts are
/// resolved greedily by descending affinity.
pub fn softassign(p: &DMatrix<f64>, cfg: &SoftassignConfig) -> Result<AssignmentSolution> {
    let n = p.nrows();
    if p.ncols() != n {
        return Err(Error::Internal(format!(
            "affinity matrix must be square, got {}x{}",
            n,
            p.ncols()
        )));
    }
    if !p.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("affinity matrix"));
    }
    if n == 0 {
        return Ok(AssignmentSolution {
            n,
            links: vec![],
            objective: 0.0,
            chains: vec![],
        });
    }

    // Exponentiation is scale-invariant for the argmax, so normalize P to
    // [0, 1] internally; beta_max then bounds the largest exponent.
    let p_max = p.iter().fold(0.0f64, |a, &v| a.max(v));
    let scale = if p_max > 0.0 { 1.0 / p_max } else { 1.0 };

    // Row/column scaling potentials, carried across temperatures so each
    // level starts near the previous equilibrium (this is what lets the
    // Sinkhorn sweeps keep up as beta sharpens the softmax). Index n is the
    // slack row/column: its potentials stay pinned at 1, so mass can always
    // retreat to "unassigned".
    let mut u = vec![1.0f64; n + 1];
    let mut v = vec![1.0f64; n + 1];
    // kernel entry at the current temperature: exp(beta * P) for feasible
    // pairs, exp(0) = 1 against slack, 0 for infeasible pairs
    let kernel = |beta: f64, i: usize, j: usize| -> f64 {
        if i == n || j == n {
            1.0
        } else if p[(i, j)] > 0.0 {
            (beta * scale * p[(i, j)]).exp()
        } else {
            0.0
        }
    };

    let mut beta = cfg.beta0;
    loop {
        for _ in 0..cfg.sinkhorn_iters {
            let mut max_change = 0.0f64;
            for i in 0..n {
                let sum: f64 = (0..=n).map(|j| kernel(beta, i, j) * v[j]).sum();
                if sum > 0.0 {
                    u[i] = 1.0 / sum;
                }
            }
            for j in 0..n {
                let sum: f64 = (0..=n).map(|i| kernel(beta, i, j) * u[i]).sum();
                if sum > 0.0 {
                    let new = 1.0 / sum;
                    max_change = max_change.max(((new - v[j]) / new).abs());
                    v[j] = new;
                }
            }
            if max_change < cfg.convergence_tol {
                break;
            }
        }
        if beta >= cfg.beta_max {
            break;
        }
        beta = (beta * cfg.beta_growth).min(cfg.beta_max);
    }

    let q = |i: usize, j: usize| -> f64 { u[i] * kernel(cfg.beta_max, i, j) * v[j] };

    // binarize: accept confident entries backed by positive affinity
    let mut accepted: Vec<(usize, usize)> = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if q(i, j) > cfg.binarize_threshold && p[(i, j)] > 0.0 {
                accepted.push((i, j));
            }
        }
    }
    // greedy cleanup by descending affinity
    accepted.sort_by(|a, b| {
        p[(b.0, b.1)]
            .partial_cmp(&p[(a.0, a.1)])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(b))
    });
    let mut row_used = vec![false; n];
    let mut col_used = vec![false; n];
    let mut links = Vec::new();
    for (i, j) in accepted {
        if !row_used[i] && !col_used[j] {
            row_used[i] = true;
            col_used[j] = true;
            links.push((i, j));
        }
    }

    // Completion pass: the relaxation can stall fractionally on degenerate
    // ties (several columns sharing one best row), leaving profitable links
    // below the binarize threshold. Any remaining positive entry with a free
    // row and column strictly improves the objective, so take them greedily.
    let mut remaining: Vec<(usize, usize)> = Vec::new();
    for i in 0..n {
        if row_used[i] {
            continue;
        }
        for j in 0..n {
            if !col_used[j] && p[(i, j)] > 0.0 {
                remaining.push((i, j));
            }
        }
    }
    remaining.sort_by(|a, b| {
        p[(b.0, b.1)]
            .partial_cmp(&p[(a.0, a.1)])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(b))
    });
    for (i, j) in remaining {
        if !row_used[i] && !col_used[j] {
            row_used[i] = true;
            col_used[j] = true;
            links.push((i, j));
        }
    }
    links.sort_unstable();

    let chains = chains_from_links(n, &links)?;
    Ok(AssignmentSolution {
        n,
        objective: objective_of(p, &links),
        links,
        chains,
    })
}

/// Exact maximizer by exhaustive enumeration of partial one-to-one matchings.
/// Test oracle; restricted to small instances.
pub fn brute_force_gla(p: &DMatrix<f64>) -> Result<AssignmentSolution> {
    let n = p.nrows();
    if p.ncols() != n {
        return Err(Error::Internal("matrix must be square".to_string()));
    }
    if n > 10 {
        return Err(Error::Internal(format!(
            "brute force limited to n <= 10, got {n}"
        )));
    }

    fn search(
        p: &DMatrix<f64>,
        row: usize,
        col_used: &mut Vec<bool>,
        current: &mut Vec<(usize, usize)>,
        current_value: f64,
        best_value: &mut f64,
        best: &mut Vec<(usize, usize)>,
    ) {
        let n = p.nrows();
        if row == n {
            if current_value > *best_value {
                *best_value = current_value;
                *best = current.clone();
            }
            return;
        }
        // leave this row unassigned
        search(p, row + 1, col_used, current, current_value, best_value, best);
        for j in 0..n {
            if !col_used[j] && p[(row, j)] > 0.0 {
                col_used[j] = true;
                current.push((row, j));
                search(
                    p,
                    row + 1,
                    col_used,
                    current,
                    current_value + p[(row, j)],
                    best_value,
                    best,
                );
                current.pop();
                col_used[j] = false;
            }
        }
    }

    let mut best = Vec::new();
    let mut best_value = 0.0;
    let mut col_used = vec![false; n];
    let mut current = Vec::new();
    search(p, 0, &mut col_used, &mut current, 0.0, &mut best_value, &mut best);
    best.sort_unstable();
    let chains = chains_from_links(n, &best)?;
    Ok(AssignmentSolution {
        n,
        objective: best_value,
        links: best,
        chains,
    })
}

/// Merge assigned tracklets into trajectories (gaps left in place). Chains
/// follow predecessor links transitively; unmatched tracklets become
/// singleton trajectories. Track ids are assigned in order of first frame.
pub fn merge_tracklets(tracklets: &[Tracklet], sol: &AssignmentSolution) -> Result<Vec<Trajectory>> {
    if sol.n != tracklets.len() {
        return Err(Error::Internal(format!(
            "solution over {} tracklets applied to {}",
            sol.n,
            tracklets.len()
        )));
    }
    // a forest of paths has exactly n - #chains links; a cycle breaks this
    if sol.links.len() + sol.chains.len() != sol.n {
        return Err(Error::Internal(
            "assignment links contain a cycle".to_string(),
        ));
    }
    let mut chains = sol.chains.clone();
    chains.sort_by_key(|chain| {
        (
            tracklets[chain[0]].head().frame,
            tracklets[chain[0]].tid,
        )
    });

    let mut out = Vec::with_capacity(chains.len());
    for (k, chain) in chains.iter().enumerate() {
        let mut entries: Vec<(u32, BBox)> = Vec::new();
        let mut sources = Vec::with_capacity(chain.len());
        for &idx in chain {
            let t = &tracklets[idx];
            if let Some(&(last_frame, _)) = entries.last() {
                if t.head().frame <= last_frame {
                    return Err(Error::Internal(format!(
                        "chain places tracklet {} at frame {} after frame {}",
                        t.tid,
                        t.head().frame,
                        last_frame
                    )));
                }
            }
            for d in t.detections() {
                entries.push((d.frame, d.bbox));
            }
            sources.push(t.tid);
        }
        out.push(Trajectory {
            track_id: k as u32 + 1,
            entries,
            source_tracklets: sources,
        });
    }
    Ok(out)
}

/// Fill inter-tracklet gaps by linear interpolation of box centers and sizes
/// between the two bounding detections. Boundary entries are untouched.
pub fn interpolate_gaps(traj: &Trajectory) -> Trajectory {
    let mut entries: Vec<(u32, BBox)> = Vec::with_capacity(traj.entries.len());
    for idx in 0..traj.entries.len() {
        if idx > 0 {
            let (f0, b0) = traj.entries[idx - 1];
            let (f1, b1) = traj.entries[idx];
            if f1 > f0 + 1 {
                let (c0x, c0y) = b0.center();
                let (c1x, c1y) = b1.center();
                let span = (f1 - f0) as f64;
                for f in (f0 + 1)..f1 {
                    let a = (f - f0) as f64 / span;
                    let cx = c0x + a * (c1x - c0x);
                    let cy = c0y + a * (c1y - c0y);
                    let w = b0.width + a * (b1.width - b0.width);
                    let h = b0.height + a * (b1.height - b0.height);
                    entries.push((f, BBox::new(cx - w / 2.0, cy - h / 2.0, w, h)));
                }
            }
        }
        entries.push(traj.entries[idx]);
    }
    Trajectory {
        track_id: traj.track_id,
        entries,
        source_tracklets: traj.source_tracklets.clone(),
    }
}
