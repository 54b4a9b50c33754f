//! Temporally constrained multi-task metric learning.
//!
//! A common metric `M0` is shared by the whole sequence while each temporal
//! segment carries its own metric `Mt`; adjacent segment metrics are coupled
//! by a quadratic temporal penalty. All metrics are learned online, one pass
//! of sampled pairs per segment, interleaved with fine-tuning of the shared
//! embedding net.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::config::Config;
use crate::embed::{pair_input_gradient, EmbeddingNet};
use crate::error::{Error, Result};
use crate::types::{SegmentPlan, Tracklet};

/// Symmetry / PSD drift tolerance for exposed metric sets.
pub const PSD_TOL: f64 = 1e-9;

/// The common metric plus one metric per temporal segment.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricSet {
    m0: DMatrix<f64>,
    per_segment: Vec<DMatrix<f64>>,
}

impl MetricSet {
    /// Start-of-learning state: `M0 = I`, every segment metric zero.
    pub fn identity_init(d_emb: usize, n_segments: usize) -> Self {
        MetricSet {
            m0: DMatrix::identity(d_emb, d_emb),
            per_segment: vec![DMatrix::zeros(d_emb, d_emb); n_segments],
        }
    }

    pub fn from_parts(m0: DMatrix<f64>, per_segment: Vec<DMatrix<f64>>) -> Self {
        let d = m0.nrows();
        assert_eq!(m0.ncols(), d, "M0 must be square");
        for m in &per_segment {
            assert_eq!((m.nrows(), m.ncols()), (d, d), "segment metric shape mismatch");
        }
        MetricSet { m0, per_segment }
    }

    pub fn m0(&self) -> &DMatrix<f64> {
        &self.m0
    }

    pub fn segment(&self, t: usize) -> &DMatrix<f64> {
        &self.per_segment[t]
    }

    pub fn per_segment(&self) -> &[DMatrix<f64>] {
        &self.per_segment
    }

    pub fn n_segments(&self) -> usize {
        self.per_segment.len()
    }

    pub fn d_emb(&self) -> usize {
        self.m0.nrows()
    }

    /// `M0 + Mt` for segment `t`.
    pub fn total_for_segment(&self, t: usize) -> DMatrix<f64> {
        &self.m0 + &self.per_segment[t]
    }

    /// Smallest eigenvalue over all matrices in the set.
    pub fn min_eigenvalue(&self) -> f64 {
        let mut lo = min_eigenvalue(&self.m0);
        for m in &self.per_segment {
            lo = lo.min(min_eigenvalue(m));
        }
        lo
    }

    /// Check the exposure invariant: every matrix symmetric within `PSD_TOL`
    /// and positive semidefinite down to `-PSD_TOL`.
    pub fn validate(&self) -> Result<()> {
        for (name, m) in std::iter::once(("m0".to_string(), &self.m0)).chain(
            self.per_segment
                .iter()
                .enumerate()
                .map(|(t, m)| (format!("m{}", t + 1), m)),
        ) {
            let asym = (m - m.transpose()).abs().max();
            if asym > PSD_TOL {
                return Err(Error::Internal(format!(
                    "{name} asymmetric by {asym:e}"
                )));
            }
            let eig = min_eigenvalue(m);
            if eig < -PSD_TOL {
                return Err(Error::Internal(format!(
                    "{name} has eigenvalue {eig:e}"
                )));
            }
        }
        Ok(())
    }
}

/// Smallest eigenvalue of the symmetrized matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    eig.eigenvalues.min()
}

/// Pair label: `Same` carries sign +1, `Different` carries -1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairLabel {
    Same,
    Different,
}

impl PairLabel {
    pub fn sign(self) -> f64 {
        match self {
            PairLabel::Same => 1.0,
            PairLabel::Different => -1.0,
        }
    }
}

/// One training pair: embeddings, the raw features they came from (the net is
/// fine-tuned online, so raw features are re-embedded during learning), label
/// and segment index.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainPair {
    pub x_i: DVector<f64>,
    pub x_j: DVector<f64>,
    pub raw_i: DVector<f64>,
    pub raw_j: DVector<f64>,
    pub label: PairLabel,
    pub segment: usize,
}

impl TrainPair {
    /// Pair given directly in embedding space (raw features set to the
    /// embeddings themselves).
    pub fn from_embeddings(
        x_i: DVector<f64>,
        x_j: DVector<f64>,
        label: PairLabel,
        segment: usize,
    ) -> Self {
        TrainPair {
            raw_i: x_i.clone(),
            raw_j: x_j.clone(),
            x_i,
            x_j,
            label,
            segment,
        }
    }
}

/// Squared Mahalanobis distance `(xi − xj)ᵀ M (xi − xj)`.
pub fn mahalanobis_sq(x_i: &DVector<f64>, x_j: &DVector<f64>, m: &DMatrix<f64>) -> f64 {
    assert_eq!(x_i.len(), x_j.len(), "vector dimension mismatch");
    assert_eq!(m.nrows(), x_i.len(), "metric dimension mismatch");
    assert_eq!(m.ncols(), x_i.len(), "metric must be square");
    let d = x_i - x_j;
    (&d.transpose() * m * &d)[(0, 0)]
}

/// Margin hinge for one pair under its segment's total metric:
/// `max(0, b − l·[1 − ‖xi−xj‖²])`.
pub fn pair_loss(pair: &TrainPair, ms: &MetricSet, margin_b: f64) -> f64 {
    let m_tot = ms.total_for_segment(pair.segment);
    let dist_sq = mahalanobis_sq(&pair.x_i, &pair.x_j, &m_tot);
    (margin_b - pair.label.sign() * (1.0 - dist_sq)).max(0.0)
}

/// Full objective: common-metric regularizer, temporal coupling, segment
/// regularizers and the weighted empirical hinge.
pub fn total_loss(pairs: &[TrainPair], ms: &MetricSet, cfg: &Config) -> f64 {
    let d = ms.d_emb();
    let eye = DMatrix::identity(d, d);
    let mut loss = 0.5 * cfg.lambda0 * (ms.m0() - &eye).norm_squared();
    for t in 1..ms.n_segments() {
        loss += 0.5 * cfg.eta * (ms.segment(t) - ms.segment(t - 1)).norm_squared();
    }
    for t in 0..ms.n_segments() {
        loss += 0.5 * cfg.lambda * ms.segment(t).norm_squared();
    }
    for p in pairs {
        loss += cfg.c_weight * pair_loss(p, ms, cfg.margin_b);
    }
    loss
}

fn hinge_active(pair: &TrainPair, ms: &MetricSet, margin_b: f64) -> bool {
    let m_tot = ms.total_for_segment(pair.segment);
    let dist_sq = mahalanobis_sq(&pair.x_i, &pair.x_j, &m_tot);
    margin_b - pair.label.sign() * (1.0 - dist_sq) > 0.0
}

/// Gradient of the objective with respect to the common metric `M0`:
/// `λ0(M0 − I) + C·Σ l·(xi−xj)(xi−xj)ᵀ` over hinge-active pairs.
pub fn grad_m0(pairs: &[TrainPair], ms: &MetricSet, cfg: &Config) -> DMatrix<f64> {
    let d = ms.d_emb();
    let mut g = cfg.lambda0 * (ms.m0() - DMatrix::identity(d, d));
    for p in pairs {
        if hinge_active(p, ms, cfg.margin_b) {
            let diff = &p.x_i - &p.x_j;
            g += (cfg.c_weight * p.label.sign()) * (&diff * diff.transpose());
        }
    }
    g
}

/// Gradient with respect to segment metric `Mt` (0-based `t`). The first
/// segment has no temporal predecessor; later segments couple backwards to
/// `M(t−1)` only — the forward coupling does not exist yet when `Mt` is
/// updated online.
pub fn grad_mt(t: usize, pairs: &[TrainPair], ms: &MetricSet, cfg: &Config) -> DMatrix<f64> {
    assert!(t < ms.n_segments(), "segment index {t} out of range");
    let mt = ms.segment(t);
    let mut g = cfg.lambda * mt;
    if t > 0 {
        g += cfg.eta * (mt - ms.segment(t - 1));
    }
    for p in pairs.iter().filter(|p| p.segment == t) {
        if hinge_active(p, ms, cfg.margin_b) {
            let diff = &p.x_i - &p.x_j;
            g += (cfg.c_weight * p.label.sign()) * (&diff * diff.transpose());
        }
    }
    g
}

/// Projection onto the positive semidefinite cone: symmetrize, clamp negative
/// eigenvalues to zero, reconstruct.
pub fn psd_project(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !m.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("psd_project input"));
    }
    let sym = (m + m.transpose()) * 0.5;
    let mut eig = sym.symmetric_eigen();
    for v in eig.eigenvalues.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    Ok(eig.recompose())
}

// --- training-pair collection ------------------------------------------------

/// A sampled pair together with the tracklets it was drawn from.
#[derive(Debug, Clone)]
pub struct CollectedPair {
    pub pair: TrainPair,
    pub source_i: u32,
    pub source_j: u32,
}

#[derive(Debug, Clone, Default)]
pub struct CollectedPairs {
    pub pairs: Vec<CollectedPair>,
    /// Set when the segment cannot supply the requested polarity balance
    /// (no spatio-temporally conflicting tracklets, or no tracklet with two
    /// responses).
    pub negative_deficit: bool,
}

/// Sample `m` positive and `m` negative pairs from one segment's tracklets,
/// in a random order.
///
/// Positives come from two distinct responses among the `kappa` strongest of
/// a single tracklet. Negatives come from the strongest responses of two
/// tracklets that overlap in time. `m` is capped by what the segment can
/// actually supply; if one polarity is impossible the other is still emitted
/// and the deficit flag is set.
pub fn collect_pairs<R: Rng>(
    tracklets: &[&Tracklet],
    kappa: usize,
    m: usize,
    net: &EmbeddingNet,
    rng: &mut R,
) -> CollectedPairs {
    assert!(kappa >= 2, "kappa >= 2 required");

    // positive sources: tracklets with at least two responses
    let pos_sources: Vec<usize> = (0..tracklets.len())
        .filter(|&i| tracklets[i].len() >= 2)
        .collect();
    let pos_available: usize = pos_sources
        .iter()
        .map(|&i| {
            let k = tracklets[i].len().min(kappa);
            k * (k - 1) / 2
        })
        .sum();

    // negative sources: spatio-temporally conflicting tracklet pairs
    let mut neg_sources: Vec<(usize, usize)> = Vec::new();
    for i in 0..tracklets.len() {
        for j in (i + 1)..tracklets.len() {
            if tracklets[i].overlaps_temporally(tracklets[j]) {
                neg_sources.push((i, j));
            }
        }
    }
    let neg_available: usize = neg_sources
        .iter()
        .map(|&(i, j)| tracklets[i].len().min(kappa) * tracklets[j].len().min(kappa))
        .sum();

    let mut m_pos = m.min(pos_available);
    let mut m_neg = m.min(neg_available);
    let deficit = m_pos == 0 || m_neg == 0;
    if m_pos > 0 && m_neg > 0 {
        let balanced = m_pos.min(m_neg);
        m_pos = balanced;
        m_neg = balanced;
    }

    let mut out = Vec::with_capacity(m_pos + m_neg);
    for _ in 0..m_pos {
        let ti = pos_sources[rng.gen_range(0..pos_sources.len())];
        let t = tracklets[ti];
        let strongest = t.strongest_responses(kappa);
        let a = rng.gen_range(0..strongest.len());
        let mut b = rng.gen_range(0..strongest.len() - 1);
        if b >= a {
            b += 1;
        }
        let da = &t.detections()[strongest[a]];
        let db = &t.detections()[strongest[b]];
        out.push(CollectedPair {
            pair: TrainPair {
                x_i: net.embed(&da.feature),
                x_j: net.embed(&db.feature),
                raw_i: da.feature.clone(),
                raw_j: db.feature.clone(),
                label: PairLabel::Same,
                segment: t.segment,
            },
            source_i: t.tid,
            source_j: t.tid,
        });
    }
    for _ in 0..m_neg {
        let (i, j) = neg_sources[rng.gen_range(0..neg_sources.len())];
        let (ti, tj) = (tracklets[i], tracklets[j]);
        let si = ti.strongest_responses(kappa);
        let sj = tj.strongest_responses(kappa);
        let da = &ti.detections()[si[rng.gen_range(0..si.len())]];
        let db = &tj.detections()[sj[rng.gen_range(0..sj.len())]];
        out.push(CollectedPair {
            pair: TrainPair {
                x_i: net.embed(&da.feature),
                x_j: net.embed(&db.feature),
                raw_i: da.feature.clone(),
                raw_j: db.feature.clone(),
                label: PairLabel::Different,
                segment: ti.segment,
            },
            source_i: ti.tid,
            source_j: tj.tid,
        });
    }
    out.shuffle(rng);
    CollectedPairs {
        pairs: out,
        negative_deficit: deficit,
    }
}

// --- the online learning loop ------------------------------------------------

/// Diagnostics from one learning run.
#[derive(Debug, Clone, Default)]
pub struct LearnReport {
    pub pairs_processed: usize,
    pub margin_satisfied: usize,
    pub segments_with_negative_deficit: Vec<usize>,
    /// Largest Frobenius-norm change any end-of-segment safety re-projection
    /// would have applied (or did apply).
    pub reprojection_max_delta: f64,
}

#[derive(Debug, Clone)]
pub struct LearnOutcome {
    pub metrics: MetricSet,
    pub net: EmbeddingNet,
    pub report: LearnReport,
}

/// Measure how far `m` is from its PSD projection; replace it only when the
/// exposure invariant is actually violated, so no-op segments stay
/// bit-identical.
fn safety_reproject(m: &mut DMatrix<f64>, report: &mut LearnReport) -> Result<()> {
    let projected = psd_project(m)?;
    let delta = (&projected - &*m).norm();
    report.reprojection_max_delta = report.reprojection_max_delta.max(delta);
    let asym = (&*m - m.transpose()).abs().max();
    if min_eigenvalue(m) < -PSD_TOL || asym > PSD_TOL {
        *m = projected;
    }
    Ok(())
}

/// Online learning over all segments.
///
/// `M0` starts at the identity; the first segment metric starts at zero and
/// every later one is initialized from its predecessor. Each segment
/// processes `2m` randomly ordered sampled pairs: margin-satisfied pairs are
/// skipped, negative pairs take plain gradient steps, positive pairs take
/// PSD-projected steps. The shared embedding net is fine-tuned after each
/// metric update, using the freshly updated total metric.
pub fn learn_metrics(
    tracklets: &[Tracklet],
    net: EmbeddingNet,
    plan: &SegmentPlan,
    cfg: &Config,
) -> Result<LearnOutcome> {
    let d = net.d_emb();
    let n = plan.n_segments();
    let mut net = net;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut report = LearnReport::default();

    let mut by_segment: Vec<Vec<&Tracklet>> = vec![Vec::new(); n];
    for t in tracklets {
        if t.segment >= n {
            return Err(Error::Internal(format!(
                "tracklet {} labelled with segment {} of {}",
                t.tid, t.segment, n
            )));
        }
        by_segment[t.segment].push(t);
    }

    let eye = DMatrix::identity(d, d);
    let mut m0 = eye.clone();
    let mut per_segment: Vec<DMatrix<f64>> = Vec::with_capacity(n);

    for t in 0..n {
        let mut mt = if t == 0 || !cfg.use_segment_metrics {
            DMatrix::zeros(d, d)
        } else {
            per_segment[t - 1].clone()
        };

        let collected = collect_pairs(
            &by_segment[t],
            cfg.kappa,
            cfg.pairs_per_segment,
            &net,
            &mut rng,
        );
        if collected.negative_deficit {
            report.segments_with_negative_deficit.push(t);
        }

        for _ in 0..cfg.epochs_per_segment {
            for cp in &collected.pairs {
                report.pairs_processed += 1;
                let (x_i, cache_i) = net.forward(&cp.pair.raw_i);
                let (x_j, cache_j) = net.forward(&cp.pair.raw_j);
                let l = cp.pair.label.sign();
                let diff = &x_i - &x_j;
                let m_tot = &m0 + &mt;
                let dist_sq = (diff.transpose() * &m_tot * &diff)[(0, 0)];

                if l * (1.0 - dist_sq) > cfg.margin_b {
                    report.margin_satisfied += 1;
                    continue;
                }
                let active = cfg.margin_b - l * (1.0 - dist_sq) > 0.0;

                let mut g0 = cfg.lambda0 * (&m0 - &eye);
                let mut gt = cfg.lambda * &mt;
                if t > 0 && cfg.use_segment_metrics {
                    gt += cfg.eta * (&mt - &per_segment[t - 1]);
                }
                if active {
                    let a = &diff * diff.transpose();
                    g0 += (cfg.c_weight * l) * &a;
                    gt += (cfg.c_weight * l) * &a;
                }

                let beta = cfg.learning_rate_beta;
                if l < 0.0 {
                    m0 -= beta * g0;
                    if cfg.use_segment_metrics {
                        mt -= beta * gt;
                    }
                } else {
                    m0 = psd_project(&(&m0 - beta * g0))?;
                    if cfg.use_segment_metrics {
                        mt = psd_project(&(&mt - beta * gt))?;
                    }
                }

                if cfg.net_learning_rate > 0.0 && active {
                    let m_tot = &m0 + &mt;
                    let total =
                        pair_input_gradient(&x_i, &x_j, l, &m_tot, cfg.margin_b, cfg.c_weight);
                    if total.iter().any(|v| *v != 0.0) {
                        let half = 0.5 * &total;
                        let mut grads = net.backward(&cache_i, &half);
                        let grads_j = net.backward(&cache_j, &(-&half));
                        EmbeddingNet::accumulate(&mut grads, &grads_j);
                        net.sgd_step(&grads, cfg.net_learning_rate);
                    }
                }
            }
        }

        safety_reproject(&mut m0, &mut report)?;
        safety_reproject(&mut mt, &mut report)?;
        per_segment.push(mt);
    }

    Ok(LearnOutcome {
        metrics: MetricSet { m0, per_segment },
        net,
        report,
    })
}

/// Warm-up pass with the single identity metric: only the embedding net
/// learns. Stands in for offline pre-training when no auxiliary data exists.
pub fn warmup_net(
    tracklets: &[Tracklet],
    net: EmbeddingNet,
    plan: &SegmentPlan,
    cfg: &Config,
) -> EmbeddingNet {
    if cfg.warmup_epochs == 0 || cfg.net_learning_rate == 0.0 {
        return net;
    }
    let mut net = net;
    let n = plan.n_segments();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed.wrapping_add(0x5eed));
    let mut by_segment: Vec<Vec<&Tracklet>> = vec![Vec::new(); n];
    for t in tracklets {
        if t.segment < n {
            by_segment[t.segment].push(t);
        }
    }
    let eye = DMatrix::identity(net.d_emb(), net.d_emb());
    for _ in 0..cfg.warmup_epochs {
        for seg in &by_segment {
            let collected =
                collect_pairs(seg, cfg.kappa, cfg.pairs_per_segment, &net, &mut rng);
            for cp in &collected.pairs {
                let (x_i, cache_i) = net.forward(&cp.pair.raw_i);
                let (x_j, cache_j) = net.forward(&cp.pair.raw_j);
                let total = pair_input_gradient(
                    &x_i,
                    &x_j,
                    cp.pair.label.sign(),
                    &eye,
                    cfg.margin_b,
                    cfg.c_weight,
                );
                if total.iter().any(|v| *v != 0.0) {
                    let half = 0.5 * &total;
                    let mut grads = net.backward(&cache_i, &half);
                    let grads_j = net.backward(&cache_j, &(-&half));
                    EmbeddingNet::accumulate(&mut grads, &grads_j);
                    net.sgd_step(&grads, cfg.net_learning_rate);
                }
            }
        }
    }
    net
}

// --- checkpoint format -------------------------------------------------------

const METRICS_MAGIC: &str = "tracklink-metrics v1";

impl MetricSet {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut out = String::new();
        out.push_str(METRICS_MAGIC);
        out.push('\n');
        out.push_str(&format!("d_emb {}\n", self.d_emb()));
        out.push_str(&format!("segments {}\n", self.n_segments()));
        let mut write_matrix = |name: String, m: &DMatrix<f64>| {
            out.push_str(&format!("matrix {name}\n"));
            for r in 0..m.nrows() {
                let row: Vec<String> = (0..m.ncols()).map(|c| format!("{}", m[(r, c)])).collect();
                out.push_str(&row.join(" "));
                out.push('\n');
            }
        };
        write_matrix("m0".to_string(), &self.m0);
        for (t, m) in self.per_segment.iter().enumerate() {
            write_matrix(format!("m{}", t + 1), m);
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let perr = |line: usize, reason: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            reason,
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, magic)) if magic == METRICS_MAGIC => {}
            Some((_, magic)) => return Err(perr(1, format!("bad magic {magic:?}"))),
            None => return Err(perr(1, "empty checkpoint".into())),
        }
        let d: usize = lines
            .next()
            .and_then(|(_, l)| l.strip_prefix("d_emb "))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| perr(2, "missing or bad d_emb".into()))?;
        let n: usize = lines
            .next()
            .and_then(|(_, l)| l.strip_prefix("segments "))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| perr(3, "missing or bad segments".into()))?;

        let read_matrix = |lines: &mut std::iter::Enumerate<std::str::Lines>| -> Result<DMatrix<f64>> {
            let (ln, header) = lines
                .next()
                .ok_or_else(|| perr(0, "missing matrix header".into()))?;
            if !header.starts_with("matrix ") {
                return Err(perr(ln + 1, format!("expected matrix header, got {header:?}")));
            }
            let mut m = DMatrix::zeros(d, d);
            for r in 0..d {
                let (ln, row) = lines
                    .next()
                    .ok_or_else(|| perr(0, format!("missing matrix row {r}")))?;
                let vals: Vec<f64> = row
                    .split_whitespace()
                    .map(|t| {
                        t.parse()
                            .map_err(|_| perr(ln + 1, format!("bad value {t:?}")))
                    })
                    .collect::<Result<_>>()?;
                if vals.len() != d {
                    return Err(perr(ln + 1, format!("expected {d} values")));
                }
                for (c, v) in vals.into_iter().enumerate() {
                    m[(r, c)] = v;
                }
            }
            Ok(m)
        };

        let m0 = read_matrix(&mut lines)?;
        let mut per_segment = Vec::with_capacity(n);
        for _ in 0..n {
            per_segment.push(read_matrix(&mut lines)?);
        }
        Ok(MetricSet { m0, per_segment })
    }
}
