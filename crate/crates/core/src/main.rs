//! Batch pipeline driver. Subcommands: `synth`, `tracklets`, `learn`,
//! `associate`, `track`, `eval`. Flags carry the same names as the config
//! keys and override values loaded via `--config`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tracklink::affinity::{build_affinity, ProbeSet};
use tracklink::assoc::{interpolate_gaps, merge_tracklets, softassign};
use tracklink::config::{validate_config, Config};
use tracklink::embed::EmbeddingNet;
use tracklink::error::{Error, Result};
use tracklink::eval::evaluate;
use tracklink::io;
use tracklink::metric::MetricSet;
use tracklink::pipeline::run_pipeline;
use tracklink::synth::{synth_scene, SynthConfig};
use tracklink::types::Trajectory;

#[derive(Parser)]
#[command(name = "tracklink", version, about = "Offline tracklet-association tracker")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Pipeline configuration flags; names match the config-file keys, and any
/// flag overrides the value loaded from `--config`.
#[derive(Args, Debug, Default)]
struct ConfigArgs {
    /// Load a key=value config file first.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "lambda0")]
    lambda0: Option<f64>,
    #[arg(long = "lambda")]
    lambda: Option<f64>,
    #[arg(long = "eta")]
    eta: Option<f64>,
    #[arg(long = "c_weight")]
    c_weight: Option<f64>,
    #[arg(long = "margin_b")]
    margin_b: Option<f64>,
    #[arg(long = "learning_rate_beta")]
    learning_rate_beta: Option<f64>,
    #[arg(long = "net_learning_rate")]
    net_learning_rate: Option<f64>,
    #[arg(long = "kappa")]
    kappa: Option<usize>,
    /// Two comma-separated variances, e.g. 625,3600.
    #[arg(long = "sigma_motion")]
    sigma_motion: Option<String>,
    #[arg(long = "omega")]
    omega: Option<f64>,
    #[arg(long = "segment_length")]
    segment_length: Option<u32>,
    #[arg(long = "max_gap")]
    max_gap: Option<u32>,
    #[arg(long = "d_in")]
    d_in: Option<usize>,
    #[arg(long = "d_emb")]
    d_emb: Option<usize>,
    /// Comma-separated hidden layer widths (empty string for none).
    #[arg(long = "hidden_layers")]
    hidden_layers: Option<String>,
    #[arg(long = "pairs_per_segment")]
    pairs_per_segment: Option<usize>,
    #[arg(long = "epochs_per_segment")]
    epochs_per_segment: Option<usize>,
    #[arg(long = "warmup_epochs")]
    warmup_epochs: Option<usize>,
    #[arg(long = "use_segment_metrics")]
    use_segment_metrics: Option<bool>,
    #[arg(long = "rng_seed")]
    rng_seed: Option<u64>,
    #[arg(long = "theta_link")]
    theta_link: Option<f64>,
    #[arg(long = "theta_margin")]
    theta_margin: Option<f64>,
    #[arg(long = "w_pos")]
    w_pos: Option<f64>,
    #[arg(long = "w_size")]
    w_size: Option<f64>,
    #[arg(long = "w_app")]
    w_app: Option<f64>,
    #[arg(long = "min_tracklet_len")]
    min_tracklet_len: Option<usize>,
    #[arg(long = "beta0")]
    beta0: Option<f64>,
    #[arg(long = "beta_max")]
    beta_max: Option<f64>,
    #[arg(long = "beta_growth")]
    beta_growth: Option<f64>,
    #[arg(long = "sinkhorn_iters")]
    sinkhorn_iters: Option<usize>,
    #[arg(long = "convergence_tol")]
    convergence_tol: Option<f64>,
    #[arg(long = "binarize_threshold")]
    binarize_threshold: Option<f64>,
}

impl ConfigArgs {
    fn build(&self) -> Result<Config> {
        let mut cfg = match &self.config {
            Some(path) => Config::load(path)?,
            None => Config::default(),
        };
        let mut set = |key: &str, value: Option<String>| -> Result<()> {
            if let Some(v) = value {
                cfg.set_key(key, &v).map_err(|reason| Error::Config {
                    field: "flag",
                    reason: format!("--{key}: {reason}"),
                })?;
            }
            Ok(())
        };
        set("lambda0", self.lambda0.map(|v| v.to_string()))?;
        set("lambda", self.lambda.map(|v| v.to_string()))?;
        set("eta", self.eta.map(|v| v.to_string()))?;
        set("c_weight", self.c_weight.map(|v| v.to_string()))?;
        set("margin_b", self.margin_b.map(|v| v.to_string()))?;
        set(
            "learning_rate_beta",
            self.learning_rate_beta.map(|v| v.to_string()),
        )?;
        set(
            "net_learning_rate",
            self.net_learning_rate.map(|v| v.to_string()),
        )?;
        set("kappa", self.kappa.map(|v| v.to_string()))?;
        set("sigma_motion", self.sigma_motion.clone())?;
        set("omega", self.omega.map(|v| v.to_string()))?;
        set("segment_length", self.segment_length.map(|v| v.to_string()))?;
        set("max_gap", self.max_gap.map(|v| v.to_string()))?;
        set("d_in", self.d_in.map(|v| v.to_string()))?;
        set("d_emb", self.d_emb.map(|v| v.to_string()))?;
        set("hidden_layers", self.hidden_layers.clone())?;
        set(
            "pairs_per_segment",
            self.pairs_per_segment.map(|v| v.to_string()),
        )?;
        set(
            "epochs_per_segment",
            self.epochs_per_segment.map(|v| v.to_string()),
        )?;
        set("warmup_epochs", self.warmup_epochs.map(|v| v.to_string()))?;
        set(
            "use_segment_metrics",
            self.use_segment_metrics.map(|v| v.to_string()),
        )?;
        set("rng_seed", self.rng_seed.map(|v| v.to_string()))?;
        set("theta_link", self.theta_link.map(|v| v.to_string()))?;
        set("theta_margin", self.theta_margin.map(|v| v.to_string()))?;
        set("w_pos", self.w_pos.map(|v| v.to_string()))?;
        set("w_size", self.w_size.map(|v| v.to_string()))?;
        set("w_app", self.w_app.map(|v| v.to_string()))?;
        set(
            "min_tracklet_len",
            self.min_tracklet_len.map(|v| v.to_string()),
        )?;
        set("beta0", self.beta0.map(|v| v.to_string()))?;
        set("beta_max", self.beta_max.map(|v| v.to_string()))?;
        set("beta_growth", self.beta_growth.map(|v| v.to_string()))?;
        set("sinkhorn_iters", self.sinkhorn_iters.map(|v| v.to_string()))?;
        set(
            "convergence_tol",
            self.convergence_tol.map(|v| v.to_string()),
        )?;
        set(
            "binarize_threshold",
            self.binarize_threshold.map(|v| v.to_string()),
        )?;
        validate_config(cfg)
    }
}

/// Scene-generation flags mirroring the synth config keys.
#[derive(Args, Debug, Default)]
struct SynthArgs {
    #[arg(long = "n_objects")]
    n_objects: Option<usize>,
    #[arg(long = "n_frames")]
    n_frames: Option<u32>,
    /// Two comma-separated extents, e.g. 1280,720.
    #[arg(long = "arena")]
    arena: Option<String>,
    /// Two comma-separated speeds, e.g. 2,6.
    #[arg(long = "speed_range")]
    speed_range: Option<String>,
    #[arg(long = "turns_per_object")]
    turns_per_object: Option<usize>,
    #[arg(long = "sigma_pos")]
    sigma_pos: Option<f64>,
    #[arg(long = "sigma_size")]
    sigma_size: Option<f64>,
    #[arg(long = "miss_rate")]
    miss_rate: Option<f64>,
    #[arg(long = "feat_radius")]
    feat_radius: Option<f64>,
    #[arg(long = "sigma_feat")]
    sigma_feat: Option<f64>,
    #[arg(long = "feat_drift")]
    feat_drift: Option<f64>,
    #[arg(long = "crossings")]
    crossings: Option<usize>,
}

impl SynthArgs {
    fn build(&self, d_in: usize, rng_seed: u64) -> Result<SynthConfig> {
        let mut cfg = SynthConfig {
            d_in,
            rng_seed,
            ..SynthConfig::default()
        };
        let mut set = |key: &str, value: Option<String>| -> Result<()> {
            if let Some(v) = value {
                cfg.set_key(key, &v).map_err(|reason| Error::Config {
                    field: "flag",
                    reason: format!("--{key}: {reason}"),
                })?;
            }
            Ok(())
        };
        set("n_objects", self.n_objects.map(|v| v.to_string()))?;
        set("n_frames", self.n_frames.map(|v| v.to_string()))?;
        set("arena", self.arena.clone())?;
        set("speed_range", self.speed_range.clone())?;
        set(
            "turns_per_object",
            self.turns_per_object.map(|v| v.to_string()),
        )?;
        set("sigma_pos", self.sigma_pos.map(|v| v.to_string()))?;
        set("sigma_size", self.sigma_size.map(|v| v.to_string()))?;
        set("miss_rate", self.miss_rate.map(|v| v.to_string()))?;
        set("feat_radius", self.feat_radius.map(|v| v.to_string()))?;
        set("sigma_feat", self.sigma_feat.map(|v| v.to_string()))?;
        set("feat_drift", self.feat_drift.map(|v| v.to_string()))?;
        set("crossings", self.crossings.map(|v| v.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene: detections, features and ground truth.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        synth: SynthArgs,
        /// Detections CSV to write.
        #[arg(long)]
        out: PathBuf,
        /// Feature sidecar to write.
        #[arg(long)]
        features: PathBuf,
        /// Ground-truth CSV to write.
        #[arg(long)]
        gt: PathBuf,
    },
    /// Generate reliable tracklets and dump them.
    Tracklets {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Learn metrics and the embedding net; write checkpoints.
    Learn {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long = "out_metrics")]
        out_metrics: PathBuf,
        #[arg(long = "out_net")]
        out_net: PathBuf,
    },
    /// Associate tracklets using existing checkpoints.
    Associate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        net: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Optional CSV dump of the affinity matrix.
        #[arg(long = "dump_affinity")]
        dump_affinity: Option<PathBuf>,
    },
    /// Full pipeline: detections in, trajectories out.
    Track {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "dump_tracklets")]
        dump_tracklets: Option<PathBuf>,
        #[arg(long = "dump_affinity")]
        dump_affinity: Option<PathBuf>,
        #[arg(long = "out_metrics")]
        out_metrics: Option<PathBuf>,
        #[arg(long = "out_net")]
        out_net: Option<PathBuf>,
    },
    /// Evaluate tracker output against ground truth.
    Eval {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        /// Overlap threshold for a correct match.
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            cfg,
            synth,
            out,
            features,
            gt,
        } => {
            let cfg = cfg.build()?;
            let synth_cfg = synth.build(cfg.d_in, cfg.rng_seed)?;
            let (dets, ground_truth) = synth_scene(&synth_cfg)?;
            io::emit_detections(&dets, &out, &features)?;
            io::emit_ground_truth(&ground_truth, &gt)?;
            eprintln!(
                "synth: {} detections over {} frames, {} tracks",
                dets.len(),
                synth_cfg.n_frames,
                ground_truth.len()
            );
            Ok(())
        }
        Command::Tracklets {
            cfg,
            input,
            features,
            out,
        } => {
            let cfg = cfg.build()?;
            let dets = io::load_detections(&input, &features)?;
            let mut tracklets = tracklink::trackgen::generate_tracklets(&dets, &cfg.trackgen);
            if let Some(last) = dets.iter().map(|d| d.frame).max() {
                tracklink::types::plan_segments(last, cfg.segment_length)
                    .assign_segments(&mut tracklets);
            }
            io::emit_tracklets(&tracklets, &out)?;
            eprintln!("tracklets: {} from {} detections", tracklets.len(), dets.len());
            Ok(())
        }
        Command::Learn {
            cfg,
            input,
            features,
            out_metrics,
            out_net,
        } => {
            let cfg = cfg.build()?;
            let dets = io::load_detections(&input, &features)?;
            let out = run_pipeline(&dets, &cfg)?;
            out.metrics.save(&out_metrics)?;
            out.net.save(&out_net)?;
            eprintln!(
                "learn: {} segments, {} pairs ({} margin-satisfied), max reprojection delta {:.3e}",
                out.metrics.n_segments(),
                out.learn_report.pairs_processed,
                out.learn_report.margin_satisfied,
                out.learn_report.reprojection_max_delta
            );
            Ok(())
        }
        Command::Associate {
            cfg,
            input,
            features,
            metrics,
            net,
            out,
            dump_affinity,
        } => {
            let cfg = cfg.build()?;
            let dets = io::load_detections(&input, &features)?;
            let metrics = MetricSet::load(&metrics)?;
            let net = EmbeddingNet::load(&net)?;
            let mut tracklets = tracklink::trackgen::generate_tracklets(&dets, &cfg.trackgen);
            if let Some(last) = dets.iter().map(|d| d.frame).max() {
                tracklink::types::plan_segments(last, cfg.segment_length)
                    .assign_segments(&mut tracklets);
            }
            let affinity = build_affinity(&tracklets, &metrics, &net, &cfg)?;
            if let Some(path) = dump_affinity {
                std::fs::write(&path, affinity.to_csv()).map_err(|e| Error::io(&path, e))?;
            }
            let assignment = softassign(&affinity.p, &cfg.solver)?;
            let merged = merge_tracklets(&tracklets, &assignment)?;
            let trajectories: Vec<Trajectory> = merged.iter().map(interpolate_gaps).collect();
            io::emit_trajectories(&trajectories, &out)?;
            eprintln!(
                "associate: {} tracklets -> {} trajectories (objective {:.4})",
                tracklets.len(),
                trajectories.len(),
                assignment.objective
            );
            // keep the probe builder exercised through the public surface
            let _ = ProbeSet::build(&tracklets, &net).len();
            Ok(())
        }
        Command::Track {
            cfg,
            input,
            features,
            out,
            dump_tracklets,
            dump_affinity,
            out_metrics,
            out_net,
        } => {
            let cfg = cfg.build()?;
            let dets = io::load_detections(&input, &features)?;
            let result = run_pipeline(&dets, &cfg)?;
            io::emit_trajectories(&result.trajectories, &out)?;
            if let Some(path) = dump_tracklets {
                io::emit_tracklets(&result.tracklets, &path)?;
            }
            if let Some(path) = dump_affinity {
                std::fs::write(&path, result.affinity.to_csv())
                    .map_err(|e| Error::io(&path, e))?;
            }
            if let Some(path) = out_metrics {
                result.metrics.save(&path)?;
            }
            if let Some(path) = out_net {
                result.net.save(&path)?;
            }
            eprintln!(
                "track: {} detections -> {} tracklets -> {} trajectories",
                dets.len(),
                result.tracklets.len(),
                result.trajectories.len()
            );
            Ok(())
        }
        Command::Eval {
            gt,
            pred,
            iou,
            json,
        } => {
            let gt_trajs = io::load_trajectories(&gt)?;
            let pred_trajs = io::load_trajectories(&pred)?;
            let report = evaluate(&gt_trajs, &pred_trajs, iou)?;
            print!("{}", report.to_table());
            if let Some(path) = json {
                let text = serde_json::to_string_pretty(&report)
                    .map_err(|e| Error::Internal(format!("json: {e}")))?;
                std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
