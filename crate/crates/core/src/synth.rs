//! Synthetic multi-target scenes: noiseless ground-truth trajectories plus
//! noisy, identity-coded detections. Deterministic under a fixed seed.

use nalgebra::DVector;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::types::{BBox, Detection, Trajectory};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_objects: usize,
    pub n_frames: u32,
    /// Arena extent in pixels (sampling scale; paths may exit it).
    pub arena: (f64, f64),
    /// Speed range in px/frame.
    pub speed_range: (f64, f64),
    /// Waypoint turns per non-crossing object (0 = straight lines).
    pub turns_per_object: usize,
    /// Detector position noise, px.
    pub sigma_pos: f64,
    /// Relative size noise.
    pub sigma_size: f64,
    /// Probability of dropping each detection slot.
    pub miss_rate: f64,
    /// Raw feature dimension.
    pub d_in: usize,
    /// Norm of each identity's mean feature vector.
    pub feat_radius: f64,
    /// Per-dimension feature noise.
    pub sigma_feat: f64,
    /// Per-frame random-walk step of each identity's mean direction
    /// (0 = stationary appearance).
    pub feat_drift: f64,
    /// Scheduled crossing events (pairs of objects meeting at a point).
    pub crossings: usize,
    pub rng_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_objects: 8,
            n_frames: 600,
            arena: (1280.0, 720.0),
            speed_range: (2.0, 6.0),
            turns_per_object: 0,
            sigma_pos: 2.0,
            sigma_size: 0.02,
            miss_rate: 0.1,
            d_in: 32,
            feat_radius: 0.6,
            sigma_feat: 0.12,
            feat_drift: 0.0,
            crossings: 2,
            rng_seed: 1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let chk = |cond: bool, field: &'static str, reason: &str| {
            if cond {
                Ok(())
            } else {
                Err(Error::Config {
                    field,
                    reason: reason.to_string(),
                })
            }
        };
        chk(self.n_frames >= 1, "n_frames", "must be >= 1")?;
        chk(
            (0.0..=1.0).contains(&self.miss_rate),
            "miss_rate",
            "must be in [0,1]",
        )?;
        chk(self.d_in >= 1, "d_in", "must be >= 1")?;
        chk(
            self.arena.0 > 0.0 && self.arena.1 > 0.0,
            "arena",
            "must be positive",
        )?;
        chk(
            self.speed_range.0 > 0.0 && self.speed_range.1 >= self.speed_range.0,
            "speed_range",
            "must be a positive range",
        )?;
        chk(self.sigma_pos >= 0.0, "sigma_pos", "must be >= 0")?;
        chk(self.sigma_size >= 0.0, "sigma_size", "must be >= 0")?;
        chk(self.sigma_feat >= 0.0, "sigma_feat", "must be >= 0")?;
        chk(self.feat_radius > 0.0, "feat_radius", "must be > 0")?;
        chk(self.feat_drift >= 0.0, "feat_drift", "must be >= 0")?;
        Ok(())
    }

    pub fn set_key(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn parse<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
            v.trim()
                .parse::<T>()
                .map_err(|_| format!("cannot parse {v:?}"))
        }
        match key {
            "n_objects" => self.n_objects = parse(value)?,
            "n_frames" => self.n_frames = parse(value)?,
            "arena" => {
                let parts: Vec<&str> = value.split(',').collect();
                if parts.len() != 2 {
                    return Err("arena needs two comma-separated values".into());
                }
                self.arena = (parse(parts[0])?, parse(parts[1])?);
            }
            "speed_range" => {
                let parts: Vec<&str> = value.split(',').collect();
                if parts.len() != 2 {
                    return Err("speed_range needs two comma-separated values".into());
                }
                self.speed_range = (parse(parts[0])?, parse(parts[1])?);
            }
            "turns_per_object" => self.turns_per_object = parse(value)?,
            "sigma_pos" => self.sigma_pos = parse(value)?,
            "sigma_size" => self.sigma_size = parse(value)?,
            "miss_rate" => self.miss_rate = parse(value)?,
            "d_in" => self.d_in = parse(value)?,
            "feat_radius" => self.feat_radius = parse(value)?,
            "sigma_feat" => self.sigma_feat = parse(value)?,
            "feat_drift" => self.feat_drift = parse(value)?,
            "crossings" => self.crossings = parse(value)?,
            "rng_seed" => self.rng_seed = parse(value)?,
            other => return Err(format!("unknown synth key {other:?}")),
        }
        Ok(())
    }
}

/// Piecewise-linear path: anchor position at an anchor frame plus velocity
/// segments (turns change the velocity at waypoint frames).
struct Path {
    positions: Vec<(f64, f64)>, // indexed by frame-1
}

impl Path {
    fn at(&self, frame: u32) -> (f64, f64) {
        self.positions[(frame - 1) as usize]
    }
}

fn unit_vector<R: Rng>(d: usize, rng: &mut R) -> DVector<f64> {
    loop {
        let v = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let n = v.norm();
        if n > 1e-9 {
            return v / n;
        }
    }
}

/// Generate the scene: exact ground truth and noisy detections.
pub fn synth_scene(cfg: &SynthConfig) -> Result<(Vec<Detection>, Vec<Trajectory>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let n = cfg.n_objects;
    let frames = cfg.n_frames;

    // identity feature means on a sphere; with drift, each mean direction
    // random-walks over frames so appearance slowly changes along the sequence
    let means: Vec<Vec<DVector<f64>>> = (0..n)
        .map(|_| {
            let mut direction = unit_vector(cfg.d_in, &mut rng);
            let mut per_frame = Vec::with_capacity(frames as usize);
            for _ in 0..frames {
                per_frame.push(&direction * cfg.feat_radius);
                if cfg.feat_drift > 0.0 {
                    let step = unit_vector(cfg.d_in, &mut rng);
                    direction = (&direction + cfg.feat_drift * step).normalize();
                }
            }
            per_frame
        })
        .collect();

    // box sizes per object
    let sizes: Vec<(f64, f64)> = (0..n)
        .map(|_| {
            let w = rng.gen_range(25.0..45.0);
            let h = w * rng.gen_range(1.8..2.2);
            (w, h)
        })
        .collect();

    // crossing schedule: event k pairs objects (2k, 2k+1) at a staggered frame
    let mut crossing_of: Vec<Option<(u32, (f64, f64))>> = vec![None; n];
    if n >= 2 {
        for k in 0..cfg.crossings {
            let fc = ((frames as f64) * (k + 1) as f64 / (cfg.crossings + 1) as f64) as u32;
            let fc = fc.clamp(1, frames);
            let point = (
                rng.gen_range(0.3..0.7) * cfg.arena.0,
                rng.gen_range(0.3..0.7) * cfg.arena.1,
            );
            let a = (2 * k) % n;
            let b = (2 * k + 1) % n;
            crossing_of[a] = Some((fc, point));
            crossing_of[b] = Some((fc, point));
        }
    }

    // Crossing objects keep a straight protected window around the crossing
    // frame so the scheduled meeting actually happens; turns apply elsewhere.
    const CROSSING_WINDOW: u32 = 25;

    let mut paths: Vec<Path> = Vec::with_capacity(n);
    for obj in 0..n {
        let speed = rng.gen_range(cfg.speed_range.0..=cfg.speed_range.1);
        let angle = rng.gen_range(0.0..std::f64::consts::TAU);
        let base_v = (speed * angle.cos(), speed * angle.sin());

        // per-frame turn schedule (rotation applied when leaving frame f)
        let turn_every = if cfg.turns_per_object > 0 {
            (frames / (cfg.turns_per_object as u32 + 1)).max(1)
        } else {
            u32::MAX
        };
        let mut turn_at: Vec<f64> = vec![0.0; frames as usize + 2];
        if cfg.turns_per_object > 0 {
            for f in 1..=frames {
                if f % turn_every == 0 {
                    turn_at[f as usize] = rng.gen_range(-1.0..1.0);
                }
            }
        }

        let (anchor_frame, anchor_pos) = match crossing_of[obj] {
            Some((fc, point)) => {
                // suppress turns near the crossing
                for f in fc.saturating_sub(CROSSING_WINDOW)..=(fc + CROSSING_WINDOW).min(frames) {
                    turn_at[f as usize] = 0.0;
                }
                (fc, point)
            }
            None => (
                frames / 2,
                (
                    rng.gen_range(0.2..0.8) * cfg.arena.0,
                    rng.gen_range(0.2..0.8) * cfg.arena.1,
                ),
            ),
        };

        // integrate positions outward from the anchor
        let mut positions = vec![(0.0, 0.0); frames as usize];
        positions[(anchor_frame - 1) as usize] = anchor_pos;
        let rotate = |v: (f64, f64), da: f64| -> (f64, f64) {
            let (c, s) = (da.cos(), da.sin());
            (v.0 * c - v.1 * s, v.0 * s + v.1 * c)
        };
        // forward
        let mut vel = base_v;
        let mut pos = anchor_pos;
        for f in anchor_frame..frames {
            vel = rotate(vel, turn_at[f as usize]);
            pos = (pos.0 + vel.0, pos.1 + vel.1);
            positions[f as usize] = pos;
        }
        // backward
        vel = base_v;
        pos = anchor_pos;
        for f in (1..anchor_frame).rev() {
            vel = rotate(vel, -turn_at[f as usize]);
            pos = (pos.0 - vel.0, pos.1 - vel.1);
            positions[(f - 1) as usize] = pos;
        }
        paths.push(Path { positions });
    }

    // exact ground truth
    let mut ground_truth = Vec::with_capacity(n);
    for obj in 0..n {
        let (w, h) = sizes[obj];
        let entries: Vec<(u32, BBox)> = (1..=frames)
            .map(|f| {
                let (cx, cy) = paths[obj].at(f);
                (f, BBox::new(cx - w / 2.0, cy - h / 2.0, w, h))
            })
            .collect();
        ground_truth.push(Trajectory {
            track_id: obj as u32 + 1,
            entries,
            source_tracklets: vec![],
        });
    }

    // noisy detections
    let mut detections = Vec::new();
    for f in 1..=frames {
        for obj in 0..n {
            if cfg.miss_rate > 0.0 && rng.gen_bool(cfg.miss_rate) {
                continue;
            }
            let (cx, cy) = paths[obj].at(f);
            let (w, h) = sizes[obj];
            let nx: f64 = rng.sample(StandardNormal);
            let ny: f64 = rng.sample(StandardNormal);
            let nw: f64 = rng.sample(StandardNormal);
            let nh: f64 = rng.sample(StandardNormal);
            let cx = cx + cfg.sigma_pos * nx;
            let cy = cy + cfg.sigma_pos * ny;
            let w = (w * (1.0 + cfg.sigma_size * nw)).max(1.0);
            let h = (h * (1.0 + cfg.sigma_size * nh)).max(1.0);
            let confidence = rng.gen_range(0.5..1.0);
            let feature = &means[obj][(f - 1) as usize]
                + DVector::from_fn(cfg.d_in, |_, _| {
                    cfg.sigma_feat * rng.sample::<f64, _>(StandardNormal)
                });
            detections.push(
                Detection::new(f, BBox::new(cx - w / 2.0, cy - h / 2.0, w, h), confidence, feature)
                    .with_id_hint(obj as u32 + 1),
            );
        }
    }

    Ok((detections, ground_truth))
}
