//! Run configuration: learning hyperparameters, affinity and solver settings,
//! and the flat `key=value` config-file format.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Dual-threshold tracklet generation settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackGenConfig {
    /// Minimum link affinity (θ1).
    pub theta_link: f64,
    /// Ambiguity margin over the runner-up (θ2).
    pub theta_margin: f64,
    pub w_pos: f64,
    pub w_size: f64,
    pub w_app: f64,
    pub min_tracklet_len: usize,
}

impl Default for TrackGenConfig {
    fn default() -> Self {
        TrackGenConfig {
            theta_link: 0.5,
            theta_margin: 0.1,
            w_pos: 0.4,
            w_size: 0.3,
            w_app: 0.3,
            min_tracklet_len: 2,
        }
    }
}

/// Deterministic-annealing softassign schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftassignConfig {
    pub beta0: f64,
    pub beta_max: f64,
    pub beta_growth: f64,
    pub sinkhorn_iters: usize,
    pub convergence_tol: f64,
    pub binarize_threshold: f64,
}

impl Default for SoftassignConfig {
    fn default() -> Self {
        SoftassignConfig {
            beta0: 1.0,
            beta_max: 200.0,
            beta_growth: 1.5,
            sinkhorn_iters: 60,
            convergence_tol: 1e-6,
            binarize_threshold: 0.6,
        }
    }
}

/// Full pipeline configuration. Field names double as config-file keys.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    /// Regularizer weight on `‖M0 − I‖²_F`.
    pub lambda0: f64,
    /// Regularizer weight on `‖Mt‖²_F`.
    pub lambda: f64,
    /// Temporal coupling weight on `‖Mt − M(t−1)‖²_F`.
    pub eta: f64,
    /// Weight of the empirical hinge loss.
    pub c_weight: f64,
    /// Decision margin b, in [0, 1].
    pub margin_b: f64,
    /// Gradient step size for metric updates.
    pub learning_rate_beta: f64,
    /// Learning rate for embedding-net fine-tuning.
    pub net_learning_rate: f64,
    /// Number of strongest responses sampled per tracklet.
    pub kappa: usize,
    /// Motion kernel variances `diag(Σ)` for (x, y) residuals.
    pub sigma_motion: [f64; 2],
    /// Affinity threshold ω applied after column normalization.
    pub omega: f64,
    /// Frames per temporal segment.
    pub segment_length: u32,
    /// Maximum frame gap bridged by association; 0 means 2×segment_length.
    pub max_gap: u32,
    /// Raw detection feature dimension.
    pub d_in: usize,
    /// Embedding dimension.
    pub d_emb: usize,
    /// Hidden layer widths of the embedding net.
    pub hidden_layers: Vec<usize>,
    /// Cap on training pairs per polarity per segment (m).
    pub pairs_per_segment: usize,
    /// Passes over each segment's pair set.
    pub epochs_per_segment: usize,
    /// Warm-up epochs with the single identity metric before the online loop.
    pub warmup_epochs: usize,
    /// When false, segment-wise metrics are pinned to zero (common metric only).
    pub use_segment_metrics: bool,
    pub rng_seed: u64,
    pub trackgen: TrackGenConfig,
    pub solver: SoftassignConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            lambda0: 0.01,
            lambda: 0.02,
            eta: 0.02,
            c_weight: 0.001,
            margin_b: 0.5,
            learning_rate_beta: 0.01,
            net_learning_rate: 0.01,
            kappa: 4,
            sigma_motion: [625.0, 3600.0],
            omega: 0.55,
            segment_length: 50,
            max_gap: 0,
            d_in: 32,
            d_emb: 64,
            hidden_layers: vec![128],
            pairs_per_segment: 64,
            epochs_per_segment: 1,
            warmup_epochs: 1,
            use_segment_metrics: true,
            rng_seed: 1,
            trackgen: TrackGenConfig::default(),
            solver: SoftassignConfig::default(),
        }
    }
}

impl Config {
    /// Effective association gap bound.
    pub fn effective_max_gap(&self) -> u32 {
        if self.max_gap == 0 {
            2 * self.segment_length
        } else {
            self.max_gap
        }
    }
}

fn check(cond: bool, field: &'static str, reason: &str) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Config {
            field,
            reason: reason.to_string(),
        })
    }
}

/// Validate every invariant, reporting the first violation with its field
/// name. Returns the config unchanged on success.
pub fn validate_config(cfg: Config) -> Result<Config> {
    check(cfg.lambda0 > 0.0, "lambda0", "must be > 0")?;
    check(cfg.lambda > 0.0, "lambda", "must be > 0")?;
    check(cfg.eta > 0.0, "eta", "must be > 0")?;
    check(cfg.c_weight > 0.0, "c_weight", "must be > 0")?;
    check(
        (0.0..=1.0).contains(&cfg.margin_b),
        "margin_b",
        "out of [0,1]",
    )?;
    check(
        cfg.learning_rate_beta > 0.0,
        "learning_rate_beta",
        "must be > 0",
    )?;
    check(
        cfg.net_learning_rate >= 0.0,
        "net_learning_rate",
        "must be >= 0",
    )?;
    check(cfg.kappa >= 2, "kappa", "kappa >= 2 required")?;
    check(
        cfg.sigma_motion.iter().all(|&v| v > 0.0),
        "sigma_motion",
        "variances must be > 0",
    )?;
    check(cfg.omega > 0.0, "omega", "must be > 0")?;
    check(cfg.segment_length >= 1, "segment_length", "must be >= 1")?;
    check(cfg.d_in >= 1, "d_in", "must be >= 1")?;
    check(cfg.d_emb >= 1, "d_emb", "must be >= 1")?;
    check(
        cfg.pairs_per_segment >= 1,
        "pairs_per_segment",
        "must be >= 1",
    )?;
    check(
        cfg.epochs_per_segment >= 1,
        "epochs_per_segment",
        "must be >= 1",
    )?;

    let tg = &cfg.trackgen;
    check(
        tg.theta_link > 0.0 && tg.theta_link < 1.0,
        "theta_link",
        "must be in (0,1)",
    )?;
    check(tg.theta_margin >= 0.0, "theta_margin", "must be >= 0")?;
    check(
        tg.w_pos >= 0.0 && tg.w_size >= 0.0 && tg.w_app >= 0.0,
        "w_pos",
        "weights must be nonnegative",
    )?;
    check(
        (tg.w_pos + tg.w_size + tg.w_app - 1.0).abs() < 1e-9,
        "w_pos",
        "weights must sum to 1",
    )?;
    check(
        tg.min_tracklet_len >= 1,
        "min_tracklet_len",
        "must be >= 1",
    )?;

    let sa = &cfg.solver;
    check(sa.beta0 > 0.0, "beta0", "must be > 0")?;
    check(sa.beta_growth > 1.0, "beta_growth", "must be > 1")?;
    check(sa.beta_max >= sa.beta0, "beta_max", "must be >= beta0")?;
    check(sa.sinkhorn_iters >= 1, "sinkhorn_iters", "must be >= 1")?;
    check(
        sa.convergence_tol > 0.0,
        "convergence_tol",
        "must be > 0",
    )?;
    check(
        sa.binarize_threshold > 0.5 && sa.binarize_threshold <= 1.0,
        "binarize_threshold",
        "must be in (0.5, 1]",
    )?;
    Ok(cfg)
}

impl Config {
    /// Serialize as `key=value` lines, one per field.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "lambda0={}", self.lambda0);
        let _ = writeln!(s, "lambda={}", self.lambda);
        let _ = writeln!(s, "eta={}", self.eta);
        let _ = writeln!(s, "c_weight={}", self.c_weight);
        let _ = writeln!(s, "margin_b={}", self.margin_b);
        let _ = writeln!(s, "learning_rate_beta={}", self.learning_rate_beta);
        let _ = writeln!(s, "net_learning_rate={}", self.net_learning_rate);
        let _ = writeln!(s, "kappa={}", self.kappa);
        let _ = writeln!(
            s,
            "sigma_motion={},{}",
            self.sigma_motion[0], self.sigma_motion[1]
        );
        let _ = writeln!(s, "omega={}", self.omega);
        let _ = writeln!(s, "segment_length={}", self.segment_length);
        let _ = writeln!(s, "max_gap={}", self.max_gap);
        let _ = writeln!(s, "d_in={}", self.d_in);
        let _ = writeln!(s, "d_emb={}", self.d_emb);
        let hidden: Vec<String> = self.hidden_layers.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "hidden_layers={}", hidden.join(","));
        let _ = writeln!(s, "pairs_per_segment={}", self.pairs_per_segment);
        let _ = writeln!(s, "epochs_per_segment={}", self.epochs_per_segment);
        let _ = writeln!(s, "warmup_epochs={}", self.warmup_epochs);
        let _ = writeln!(s, "use_segment_metrics={}", self.use_segment_metrics);
        let _ = writeln!(s, "rng_seed={}", self.rng_seed);
        let _ = writeln!(s, "theta_link={}", self.trackgen.theta_link);
        let _ = writeln!(s, "theta_margin={}", self.trackgen.theta_margin);
        let _ = writeln!(s, "w_pos={}", self.trackgen.w_pos);
        let _ = writeln!(s, "w_size={}", self.trackgen.w_size);
        let _ = writeln!(s, "w_app={}", self.trackgen.w_app);
        let _ = writeln!(s, "min_tracklet_len={}", self.trackgen.min_tracklet_len);
        let _ = writeln!(s, "beta0={}", self.solver.beta0);
        let _ = writeln!(s, "beta_max={}", self.solver.beta_max);
        let _ = writeln!(s, "beta_growth={}", self.solver.beta_growth);
        let _ = writeln!(s, "sinkhorn_iters={}", self.solver.sinkhorn_iters);
        let _ = writeln!(s, "convergence_tol={}", self.solver.convergence_tol);
        let _ = writeln!(s, "binarize_threshold={}", self.solver.binarize_threshold);
        s
    }

    /// Apply one `key=value` assignment.
    pub fn set_key(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn parse<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
            v.trim()
                .parse::<T>()
                .map_err(|_| format!("cannot parse {v:?}"))
        }
        match key {
            "lambda0" => self.lambda0 = parse(value)?,
            "lambda" => self.lambda = parse(value)?,
            "eta" => self.eta = parse(value)?,
            "c_weight" => self.c_weight = parse(value)?,
            "margin_b" => self.margin_b = parse(value)?,
            "learning_rate_beta" => self.learning_rate_beta = parse(value)?,
            "net_learning_rate" => self.net_learning_rate = parse(value)?,
            "kappa" => self.kappa = parse(value)?,
            "sigma_motion" => {
                let parts: Vec<&str> = value.split(',').collect();
                if parts.len() != 2 {
                    return Err("sigma_motion needs two comma-separated values".into());
                }
                self.sigma_motion = [parse(parts[0])?, parse(parts[1])?];
            }
            "omega" => self.omega = parse(value)?,
            "segment_length" => self.segment_length = parse(value)?,
            "max_gap" => self.max_gap = parse(value)?,
            "d_in" => self.d_in = parse(value)?,
            "d_emb" => self.d_emb = parse(value)?,
            "hidden_layers" => {
                let v = value.trim();
                self.hidden_layers = if v.is_empty() {
                    Vec::new()
                } else {
                    v.split(',')
                        .map(parse::<usize>)
                        .collect::<std::result::Result<_, _>>()?
                };
            }
            "pairs_per_segment" => self.pairs_per_segment = parse(value)?,
            "epochs_per_segment" => self.epochs_per_segment = parse(value)?,
            "warmup_epochs" => self.warmup_epochs = parse(value)?,
            "use_segment_metrics" => self.use_segment_metrics = parse(value)?,
            "rng_seed" => self.rng_seed = parse(value)?,
            "theta_link" => self.trackgen.theta_link = parse(value)?,
            "theta_margin" => self.trackgen.theta_margin = parse(value)?,
            "w_pos" => self.trackgen.w_pos = parse(value)?,
            "w_size" => self.trackgen.w_size = parse(value)?,
            "w_app" => self.trackgen.w_app = parse(value)?,
            "min_tracklet_len" => self.trackgen.min_tracklet_len = parse(value)?,
            "beta0" => self.solver.beta0 = parse(value)?,
            "beta_max" => self.solver.beta_max = parse(value)?,
            "beta_growth" => self.solver.beta_growth = parse(value)?,
            "sinkhorn_iters" => self.solver.sinkhorn_iters = parse(value)?,
            "convergence_tol" => self.solver.convergence_tol = parse(value)?,
            "binarize_threshold" => self.solver.binarize_threshold = parse(value)?,
            other => return Err(format!("unknown config key {other:?}")),
        }
        Ok(())
    }

    /// Parse a config file: one `key=value` per line, `#` comments, blank
    /// lines ignored.
    pub fn from_str_keyed(text: &str, path: &Path) -> Result<Config> {
        let mut cfg = Config::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                reason: format!("expected key=value, got {line:?}"),
            })?;
            cfg.set_key(key.trim(), value).map_err(|reason| Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                reason,
            })?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_str_keyed(&text, path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_key_values()).map_err(|e| Error::io(path, e))
    }
}
