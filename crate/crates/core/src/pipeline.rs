//! End-to-end composition: tracklet generation, segment planning, joint
//! metric/embedding learning, affinity construction, assignment, merging and
//! gap interpolation. Every intermediate artifact is kept for inspection.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::affinity::{build_affinity, AffinityMatrix};
use crate::assoc::{interpolate_gaps, merge_tracklets, softassign, AssignmentSolution};
use crate::config::{validate_config, Config};
use crate::embed::EmbeddingNet;
use crate::error::{Error, Result};
use crate::metric::{learn_metrics, warmup_net, LearnReport, MetricSet};
use crate::trackgen::generate_tracklets;
use crate::types::{plan_segments, Detection, SegmentPlan, Tracklet, Trajectory};

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub trajectories: Vec<Trajectory>,
    pub tracklets: Vec<Tracklet>,
    pub plan: SegmentPlan,
    pub metrics: MetricSet,
    pub net: EmbeddingNet,
    pub affinity: AffinityMatrix,
    pub assignment: AssignmentSolution,
    pub learn_report: LearnReport,
}

/// Run the whole pipeline on one detection set.
pub fn run_pipeline(detections: &[Detection], cfg: &Config) -> Result<PipelineOutput> {
    let cfg = validate_config(cfg.clone()).map_err(|e| e.in_stage("config"))?;

    for (i, d) in detections.iter().enumerate() {
        if d.feature.len() != cfg.d_in {
            return Err(Error::Dimension {
                expected: cfg.d_in,
                got: d.feature.len(),
                context: "detection feature vs configured d_in",
            }
            .in_stage("input"));
        }
        if d.frame < 1 {
            return Err(Error::Internal(format!("detection {i} has frame 0")).in_stage("input"));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let net = EmbeddingNet::init(cfg.d_in, &cfg.hidden_layers, cfg.d_emb, &mut rng);

    if detections.is_empty() {
        return Ok(PipelineOutput {
            trajectories: vec![],
            tracklets: vec![],
            plan: SegmentPlan {
                segment_length: cfg.segment_length,
                boundaries: vec![],
            },
            metrics: MetricSet::identity_init(cfg.d_emb, 0),
            net,
            affinity: AffinityMatrix::empty(),
            assignment: AssignmentSolution {
                n: 0,
                links: vec![],
                objective: 0.0,
                chains: vec![],
            },
            learn_report: LearnReport::default(),
        });
    }

    let last_frame = detections.iter().map(|d| d.frame).max().unwrap();
    let plan = plan_segments(last_frame, cfg.segment_length);

    let mut tracklets = generate_tracklets(detections, &cfg.trackgen);
    plan.assign_segments(&mut tracklets);

    let net = warmup_net(&tracklets, net, &plan, &cfg);

    let learned =
        learn_metrics(&tracklets, net, &plan, &cfg).map_err(|e| e.in_stage("learn"))?;
    learned
        .metrics
        .validate()
        .map_err(|e| e.in_stage("learn"))?;

    let affinity = build_affinity(&tracklets, &learned.metrics, &learned.net, &cfg)
        .map_err(|e| e.in_stage("affinity"))?;

    let assignment =
        softassign(&affinity.p, &cfg.solver).map_err(|e| e.in_stage("associate"))?;

    let merged =
        merge_tracklets(&tracklets, &assignment).map_err(|e| e.in_stage("merge"))?;
    let trajectories: Vec<Trajectory> = merged.iter().map(interpolate_gaps).collect();

    Ok(PipelineOutput {
        trajectories,
        tracklets,
        plan,
        metrics: learned.metrics,
        net: learned.net,
        affinity,
        assignment,
        learn_report: learned.report,
    })
}
