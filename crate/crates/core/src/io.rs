//! File formats: detection CSV (`frame,id,left,top,width,height,conf`), the
//! plain-text feature sidecar (one line of space-separated reals per
//! detection row), and trajectory CSV output.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::types::{BBox, Detection, Trajectory};

fn parse_field<T: std::str::FromStr>(
    token: &str,
    field: &'static str,
    path: &Path,
    line: usize,
) -> Result<T> {
    token.trim().parse::<T>().map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        line,
        reason: format!("bad {field}: {token:?}"),
    })
}

struct MotRow {
    frame: u32,
    id: i64,
    bbox: BBox,
    conf: f64,
    line: usize,
}

fn read_mot_rows(path: &Path) -> Result<Vec<MotRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').collect();
        if fields.len() < 7 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                reason: format!("expected at least 7 comma-separated fields, got {}", fields.len()),
            });
        }
        let frame: u32 = parse_field(fields[0], "frame", path, line)?;
        if frame < 1 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                reason: "frame index must be >= 1".to_string(),
            });
        }
        let id: i64 = parse_field(fields[1], "id", path, line)?;
        let left: f64 = parse_field(fields[2], "left", path, line)?;
        let top: f64 = parse_field(fields[3], "top", path, line)?;
        let width: f64 = parse_field(fields[4], "width", path, line)?;
        let height: f64 = parse_field(fields[5], "height", path, line)?;
        let conf: f64 = parse_field(fields[6], "conf", path, line)?;
        if width <= 0.0 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                reason: format!("width must be positive, got {width}"),
            });
        }
        if height <= 0.0 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                reason: format!("height must be positive, got {height}"),
            });
        }
        rows.push(MotRow {
            frame,
            id,
            bbox: BBox::new(left, top, width, height),
            conf,
            line,
        });
    }
    Ok(rows)
}

/// Read the feature sidecar: one line per detection row, space-separated.
pub fn read_features(path: &Path) -> Result<Vec<DVector<f64>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut dim: Option<usize> = None;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let vals: Vec<f64> = raw
            .split_whitespace()
            .map(|t| parse_field(t, "feature value", path, line))
            .collect::<Result<_>>()?;
        if let Some(d) = dim {
            if vals.len() != d {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    reason: format!("feature dimension {} != {} of earlier rows", vals.len(), d),
                });
            }
        } else {
            dim = Some(vals.len());
        }
        out.push(DVector::from_vec(vals));
    }
    Ok(out)
}

/// Load detections from a MOT-style CSV plus its feature sidecar. The id
/// column is stored only as an evaluation hint (negative ids mean none).
pub fn load_detections(det_path: &Path, feat_path: &Path) -> Result<Vec<Detection>> {
    let rows = read_mot_rows(det_path)?;
    let features = read_features(feat_path)?;
    if rows.len() != features.len() {
        return Err(Error::Parse {
            path: feat_path.to_path_buf(),
            line: 0,
            reason: format!(
                "{} feature rows for {} detections",
                features.len(),
                rows.len()
            ),
        });
    }
    Ok(rows
        .into_iter()
        .zip(features)
        .map(|(r, f)| {
            let det = Detection::new(r.frame, r.bbox, r.conf, f);
            if r.id >= 0 {
                det.with_id_hint(r.id as u32)
            } else {
                det
            }
        })
        .collect())
}

/// Load trajectories from a MOT-style CSV (tracker output or ground truth).
pub fn load_trajectories(path: &Path) -> Result<Vec<Trajectory>> {
    let rows = read_mot_rows(path)?;
    let mut by_id: std::collections::BTreeMap<i64, Vec<(u32, BBox, usize)>> =
        std::collections::BTreeMap::new();
    for r in rows {
        by_id.entry(r.id).or_default().push((r.frame, r.bbox, r.line));
    }
    let mut out = Vec::new();
    for (id, mut entries) in by_id {
        if id < 0 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: entries[0].2,
                reason: "trajectory rows need a nonnegative id".to_string(),
            });
        }
        entries.sort_by_key(|e| e.0);
        for w in entries.windows(2) {
            if w[1].0 == w[0].0 {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: w[1].2,
                    reason: format!("track {id} has two boxes at frame {}", w[1].0),
                });
            }
        }
        out.push(Trajectory {
            track_id: id as u32,
            entries: entries.into_iter().map(|(f, b, _)| (f, b)).collect(),
            source_tracklets: vec![],
        });
    }
    Ok(out)
}

/// Write trajectories as `frame,track_id,left,top,width,height,1,-1,-1,-1`,
/// sorted by frame then track id, boxes at two decimal places.
pub fn emit_trajectories(trajectories: &[Trajectory], path: &Path) -> Result<()> {
    let mut rows: Vec<(u32, u32, BBox)> = Vec::new();
    for t in trajectories {
        for &(f, b) in &t.entries {
            rows.push((f, t.track_id, b));
        }
    }
    rows.sort_by_key(|&(f, id, _)| (f, id));
    let mut out = String::new();
    for (f, id, b) in rows {
        let _ = writeln!(
            out,
            "{f},{id},{:.2},{:.2},{:.2},{:.2},1,-1,-1,-1",
            b.left, b.top, b.width, b.height
        );
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Write detections plus their feature sidecar.
pub fn emit_detections(detections: &[Detection], det_path: &Path, feat_path: &Path) -> Result<()> {
    let mut det_out = String::new();
    let mut feat_out = String::new();
    for d in detections {
        let id = d.eval_id_hint().map(|v| v as i64).unwrap_or(-1);
        let _ = writeln!(
            det_out,
            "{},{},{:.2},{:.2},{:.2},{:.2},{:.6}",
            d.frame, id, d.bbox.left, d.bbox.top, d.bbox.width, d.bbox.height, d.confidence
        );
        let feat: Vec<String> = d.feature.iter().map(|v| format!("{v}")).collect();
        feat_out.push_str(&feat.join(" "));
        feat_out.push('\n');
    }
    std::fs::write(det_path, det_out).map_err(|e| Error::io(det_path, e))?;
    std::fs::write(feat_path, feat_out).map_err(|e| Error::io(feat_path, e))
}

/// Ground-truth trajectories as MOT rows with confidence 1 and no features.
pub fn emit_ground_truth(trajectories: &[Trajectory], path: &Path) -> Result<()> {
    emit_trajectories(trajectories, path)
}

/// Tracklet dump: `frame,tid,left,top,width,height,conf` per member
/// detection, sorted by frame then tid.
pub fn emit_tracklets(tracklets: &[crate::types::Tracklet], path: &Path) -> Result<()> {
    let mut rows: Vec<(u32, u32, BBox, f64)> = Vec::new();
    for t in tracklets {
        for d in t.detections() {
            rows.push((d.frame, t.tid, d.bbox, d.confidence));
        }
    }
    rows.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
    let mut out = String::new();
    for (f, tid, b, conf) in rows {
        let _ = writeln!(
            out,
            "{f},{tid},{:.2},{:.2},{:.2},{:.2},{conf:.6}",
            b.left, b.top, b.width, b.height
        );
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn empty_file_gives_empty_list() {
        let dir = tempdir().unwrap();
        let det = dir.path().join("d.csv");
        let feat = dir.path().join("d.feat");
        std::fs::write(&det, "").unwrap();
        std::fs::write(&feat, "").unwrap();
        assert!(load_detections(&det, &feat).unwrap().is_empty());
    }

    #[test]
    fn well_formed_rows_parse() {
        let dir = tempdir().unwrap();
        let det = dir.path().join("d.csv");
        let feat = dir.path().join("d.feat");
        std::fs::write(
            &det,
            "1,3,10.00,20.00,30.00,60.00,0.900000\n1,-1,50.00,20.00,30.00,60.00,0.800000\n2,3,13.00,20.00,30.00,60.00,0.700000\n",
        )
        .unwrap();
        std::fs::write(&feat, "1 0\n0 1\n0.5 0.5\n").unwrap();
        let dets = load_detections(&det, &feat).unwrap();
        assert_eq!(dets.len(), 3);
        assert_eq!(dets[0].frame, 1);
        assert_eq!(dets[0].eval_id_hint(), Some(3));
        assert_eq!(dets[1].eval_id_hint(), None);
        assert_eq!(dets[2].feature.len(), 2);
        assert!((dets[2].confidence - 0.7).abs() < 1e-9);
    }

    #[test]
    fn negative_width_names_line_and_field() {
        let dir = tempdir().unwrap();
        let det = dir.path().join("d.csv");
        let feat = dir.path().join("d.feat");
        std::fs::write(&det, "1,1,0,0,30,60,1\n2,1,0,0,-5,60,1\n").unwrap();
        std::fs::write(&feat, "1\n1\n").unwrap();
        let err = load_detections(&det, &feat).unwrap_err().to_string();
        assert!(err.contains(":2:"), "{err}");
        assert!(err.contains("width"), "{err}");
    }

    #[test]
    fn feature_count_mismatch_is_an_error() {
        let dir = tempdir().unwrap();
        let det = dir.path().join("d.csv");
        let feat = dir.path().join("d.feat");
        std::fs::write(&det, "1,1,0,0,30,60,1\n2,1,0,0,30,60,1\n").unwrap();
        std::fs::write(&feat, "1 0\n").unwrap();
        let err = load_detections(&det, &feat).unwrap_err().to_string();
        assert!(err.contains("feature rows"), "{err}");
    }

    #[test]
    fn inconsistent_feature_dims_rejected() {
        let dir = tempdir().unwrap();
        let feat = dir.path().join("d.feat");
        std::fs::write(&feat, "1 0\n1 0 0\n").unwrap();
        let err = read_features(&feat).unwrap_err().to_string();
        assert!(err.contains("dimension"), "{err}");
    }

    #[test]
    fn trajectory_round_trip_preserves_two_decimals() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let trajs = vec![Trajectory {
            track_id: 2,
            entries: vec![
                (1, BBox::new(10.123, 20.457, 30.0, 60.0)),
                (2, BBox::new(12.0, 21.0, 30.0, 60.0)),
            ],
            source_tracklets: vec![],
        }];
        emit_trajectories(&trajs, &path).unwrap();
        let loaded = load_trajectories(&path).unwrap();
        assert_eq!(loaded.len(), 1);
        assert!((loaded[0].entries[0].1.left - 10.12).abs() < 1e-9);
        assert!((loaded[0].entries[0].1.top - 20.46).abs() < 1e-9);

        // emit -> load -> emit fixpoint
        let path2 = dir.path().join("t2.csv");
        emit_trajectories(&loaded, &path2).unwrap();
        assert_eq!(
            std::fs::read_to_string(&path).unwrap(),
            std::fs::read_to_string(&path2).unwrap()
        );
    }

    #[test]
    fn emit_trajectories_sorted_by_frame_then_id() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let trajs = vec![
            Trajectory {
                track_id: 9,
                entries: vec![(1, BBox::new(0.0, 0.0, 1.0, 1.0)), (2, BBox::new(0.0, 0.0, 1.0, 1.0))],
                source_tracklets: vec![],
            },
            Trajectory {
                track_id: 3,
                entries: vec![(1, BBox::new(5.0, 0.0, 1.0, 1.0))],
                source_tracklets: vec![],
            },
        ];
        emit_trajectories(&trajs, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let ids: Vec<&str> = text
            .lines()
            .map(|l| l.split(',').nth(1).unwrap())
            .collect();
        assert_eq!(ids, vec!["3", "9", "9"]);
    }

    #[test]
    fn empty_trajectories_give_empty_file() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.csv");
        emit_trajectories(&[], &path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "");
    }

    #[test]
    fn detection_emit_load_round_trip() {
        let dir = tempdir().unwrap();
        let (det, feat) = (dir.path().join("d.csv"), dir.path().join("d.feat"));
        let dets = vec![
            Detection::new(
                1,
                BBox::new(1.0, 2.0, 3.0, 4.0),
                0.75,
                DVector::from_vec(vec![0.25, -1.5]),
            )
            .with_id_hint(4),
            Detection::new(
                2,
                BBox::new(5.0, 6.0, 7.0, 8.0),
                0.5,
                DVector::from_vec(vec![1.0, 0.125]),
            ),
        ];
        emit_detections(&dets, &det, &feat).unwrap();
        let loaded = load_detections(&det, &feat).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[0].eval_id_hint(), Some(4));
        assert_eq!(loaded[1].eval_id_hint(), None);
        assert_eq!(loaded[0].feature, dets[0].feature);
        assert_eq!(loaded[1].bbox, dets[1].bbox);
    }
}
