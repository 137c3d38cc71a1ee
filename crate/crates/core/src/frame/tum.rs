//! TUM RGB-D dataset ingestion: association files, 16-bit depth PNGs and
//! trajectory files in `timestamp tx ty tz qx qy qz qw` format.

use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use thiserror::Error;

use crate::frame::{Grid, RgbdFrame, Z_MAX};
use crate::geometry::{Intrinsics, RigidTransform, Z_MIN};

/// TUM depth PNGs store millimetres/5: value 5000 is exactly 1 metre.
pub const TUM_DEPTH_SCALE: f64 = 5000.0;

/// Maximum color/depth timestamp distance for an association pair, seconds.
pub const ASSOCIATION_TOLERANCE: f64 = 0.02;

#[derive(Debug, Error)]
pub enum TumError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        source: image::ImageError,
    },
    #[error("{path} is not a 16-bit grayscale depth image")]
    DepthFormat { path: PathBuf },
    #[error("{file} line {line}: {msg}")]
    Malformed {
        file: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("association line {line}: color/depth timestamps differ by {dt:.4}s (limit {ASSOCIATION_TOLERANCE}s)")]
    AssociationGap { line: usize, dt: f64 },
    #[error("frame {path}: image is {got_w}x{got_h}, intrinsics declare {want_w}x{want_h}")]
    DimensionMismatch {
        path: PathBuf,
        got_w: usize,
        got_h: usize,
        want_w: usize,
        want_h: usize,
    },
}

/// One timestamped ground-truth or estimated pose.
#[derive(Clone, Copy, Debug)]
pub struct TrajectoryPoint {
    pub time: f64,
    pub pose: RigidTransform,
}

#[derive(Debug)]
pub struct TumSequence {
    pub frames: Vec<RgbdFrame>,
    pub ground_truth: Option<Vec<TrajectoryPoint>>,
}

/// Loads an associated TUM RGB-D sequence. `association` lines are
/// `ts_rgb rgb_path ts_depth depth_path` with paths relative to `dir`;
/// `dir/groundtruth.txt` is attached when present. Depth readings outside
/// [Z_MIN, Z_MAX] are zeroed as invalid.
pub fn load_tum_sequence(
    dir: &Path,
    association: &Path,
    intrinsics: &Intrinsics,
    camera_id: u32,
) -> Result<TumSequence, TumError> {
    let text = std::fs::read_to_string(association).map_err(|source| TumError::Io {
        path: association.to_path_buf(),
        source,
    })?;
    let mut pairs = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(TumError::Malformed {
                file: association.to_path_buf(),
                line: line_no,
                msg: format!("expected 4 fields, found {}", fields.len()),
            });
        }
        let parse_ts = |s: &str| {
            s.parse::<f64>().map_err(|_| TumError::Malformed {
                file: association.to_path_buf(),
                line: line_no,
                msg: format!("bad timestamp '{s}'"),
            })
        };
        let ts_rgb = parse_ts(fields[0])?;
        let ts_depth = parse_ts(fields[2])?;
        let dt = (ts_rgb - ts_depth).abs();
        if dt > ASSOCIATION_TOLERANCE {
            return Err(TumError::AssociationGap { line: line_no, dt });
        }
        pairs.push((ts_rgb, fields[1].to_string(), fields[3].to_string()));
    }
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());

    let mut frames = Vec::with_capacity(pairs.len());
    for (index, (ts, rgb_rel, depth_rel)) in pairs.into_iter().enumerate() {
        let color = load_color(&dir.join(&rgb_rel), intrinsics)?;
        let depth = load_depth(&dir.join(&depth_rel), intrinsics)?;
        frames.push(
            RgbdFrame::new(camera_id, index as u64, ts, color, depth, *intrinsics)
                .expect("dimensions validated against intrinsics"),
        );
    }

    let gt_path = dir.join("groundtruth.txt");
    let ground_truth = if gt_path.is_file() {
        Some(load_trajectory(&gt_path)?)
    } else {
        None
    };
    Ok(TumSequence {
        frames,
        ground_truth,
    })
}

fn load_color(path: &Path, k: &Intrinsics) -> Result<Grid<[u8; 3]>, TumError> {
    let img = image::open(path)
        .map_err(|source| TumError::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    check_dims(path, img.width(), img.height(), k)?;
    let data = img.pixels().map(|p| p.0).collect();
    Ok(Grid::from_vec(k.width, k.height, data))
}

fn load_depth(path: &Path, k: &Intrinsics) -> Result<Grid<f32>, TumError> {
    let img = image::open(path).map_err(|source| TumError::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let image::DynamicImage::ImageLuma16(img) = img else {
        return Err(TumError::DepthFormat {
            path: path.to_path_buf(),
        });
    };
    check_dims(path, img.width(), img.height(), k)?;
    let data = img
        .pixels()
        .map(|p| {
            let z = p.0[0] as f64 / TUM_DEPTH_SCALE;
            if z > Z_MIN && z <= Z_MAX {
                z as f32
            } else {
                0.0
            }
        })
        .collect();
    Ok(Grid::from_vec(k.width, k.height, data))
}

fn check_dims(path: &Path, w: u32, h: u32, k: &Intrinsics) -> Result<(), TumError> {
    if w as usize != k.width || h as usize != k.height {
        return Err(TumError::DimensionMismatch {
            path: path.to_path_buf(),
            got_w: w as usize,
            got_h: h as usize,
            want_w: k.width,
            want_h: k.height,
        });
    }
    Ok(())
}

/// Parses a TUM trajectory file; quaternions are normalized on load.
pub fn load_trajectory(path: &Path) -> Result<Vec<TrajectoryPoint>, TumError> {
    let text = std::fs::read_to_string(path).map_err(|source| TumError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut points = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 8 {
            return Err(TumError::Malformed {
                file: path.to_path_buf(),
                line: line_no,
                msg: format!("expected 8 fields, found {}", fields.len()),
            });
        }
        let mut v = [0.0f64; 8];
        for (i, f) in fields.iter().enumerate() {
            v[i] = f.parse().map_err(|_| TumError::Malformed {
                file: path.to_path_buf(),
                line: line_no,
                msg: format!("bad number '{f}'"),
            })?;
        }
        points.push(TrajectoryPoint {
            time: v[0],
            pose: RigidTransform::from_quaternion_translation(
                [v[4], v[5], v[6], v[7]],
                Vector3::new(v[1], v[2], v[3]),
            ),
        });
    }
    points.sort_by(|a, b| a.time.partial_cmp(&b.time).unwrap());
    Ok(points)
}

/// Writes a trajectory in TUM format: `timestamp tx ty tz qx qy qz qw`.
pub fn save_trajectory(path: &Path, points: &[TrajectoryPoint]) -> Result<(), TumError> {
    let mut out = String::new();
    for p in points {
        let t = p.pose.translation();
        let q = p.pose.quaternion_xyzw();
        out.push_str(&format!(
            "{:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6}\n",
            p.time, t.x, t.y, t.z, q[0], q[1], q[2], q[3]
        ));
    }
    std::fs::write(path, out).map_err(|source| TumError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use image::{ImageBuffer, Luma, Rgb};

    fn small_k() -> Intrinsics {
        Intrinsics::new(40.0, 40.0, 20.0, 15.0, 40, 30).unwrap()
    }

    fn write_fixture(dir: &Path, with_gt: bool) {
        std::fs::create_dir(dir.join("rgb")).unwrap();
        std::fs::create_dir(dir.join("depth")).unwrap();
        for i in 0..3u32 {
            let rgb = ImageBuffer::from_fn(40, 30, |x, y| {
                Rgb([(x * 6) as u8, (y * 8) as u8, (i * 50) as u8])
            });
            rgb.save(dir.join(format!("rgb/{i}.png"))).unwrap();
            // Row 0 holds sentinel values: 5000 -> exactly 1 m, 0 -> invalid,
            // 65535 -> 13.1 m which exceeds Z_MAX and must be zeroed.
            let depth = ImageBuffer::from_fn(40, 30, |x, y| {
                if y == 0 {
                    match x {
                        0 => Luma([5000u16]),
                        1 => Luma([0u16]),
                        2 => Luma([65535u16]),
                        _ => Luma([10000u16]),
                    }
                } else {
                    Luma([7500u16 + (i * 100) as u16])
                }
            });
            depth.save(dir.join(format!("depth/{i}.png"))).unwrap();
        }
        let assoc = "\
# ts_rgb rgb ts_depth depth
1.00 rgb/0.png 1.005 depth/0.png
1.05 rgb/1.png 1.055 depth/1.png
1.10 rgb/2.png 1.105 depth/2.png
";
        std::fs::write(dir.join("assoc.txt"), assoc).unwrap();
        if with_gt {
            std::fs::write(
                dir.join("groundtruth.txt"),
                "# gt\n0 0 0 0 0 0 0 1\n1.0 0.5 0 0 0 0 0 1\n",
            )
            .unwrap();
        }
    }

    #[test]
    fn loads_sequence_with_scale_and_invalid_handling() {
        let tmp = tempfile::tempdir().unwrap();
        write_fixture(tmp.path(), true);
        let seq =
            load_tum_sequence(tmp.path(), &tmp.path().join("assoc.txt"), &small_k(), 3).unwrap();
        assert_eq!(seq.frames.len(), 3);
        let f = &seq.frames[0];
        assert_eq!(f.camera_id, 3);
        assert_eq!(f.index, 0);
        assert_abs_diff_eq!(f.wall_time, 1.0);
        assert_eq!(f.depth.get(0, 0), 1.0);
        assert_eq!(f.depth.get(1, 0), 0.0);
        assert_eq!(f.depth.get(2, 0), 0.0);
        assert_abs_diff_eq!(f.depth.get(5, 5) as f64, 1.5, epsilon = 1e-9);
        assert_eq!(f.color.get(1, 2), [6, 16, 0]);

        let gt = seq.ground_truth.expect("groundtruth.txt present");
        assert_eq!(gt.len(), 2);
        assert!(gt[0].pose.approx_eq(&RigidTransform::identity(), 1e-12));
        assert_abs_diff_eq!(gt[1].pose.translation().x, 0.5);
    }

    #[test]
    fn association_gap_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        write_fixture(tmp.path(), false);
        std::fs::write(
            tmp.path().join("bad.txt"),
            "1.00 rgb/0.png 1.05 depth/0.png\n",
        )
        .unwrap();
        match load_tum_sequence(tmp.path(), &tmp.path().join("bad.txt"), &small_k(), 0) {
            Err(TumError::AssociationGap { line: 1, dt }) => {
                assert!((dt - 0.05).abs() < 1e-9)
            }
            other => panic!("expected association gap, got {other:?}"),
        }
    }

    #[test]
    fn malformed_association_line_reports_position() {
        let tmp = tempfile::tempdir().unwrap();
        write_fixture(tmp.path(), false);
        std::fs::write(
            tmp.path().join("bad.txt"),
            "1.00 rgb/0.png 1.005 depth/0.png\noops\n",
        )
        .unwrap();
        match load_tum_sequence(tmp.path(), &tmp.path().join("bad.txt"), &small_k(), 0) {
            Err(TumError::Malformed { line: 2, .. }) => {}
            other => panic!("expected malformed error, got {other:?}"),
        }
    }

    #[test]
    fn eight_bit_depth_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        write_fixture(tmp.path(), false);
        let bad = ImageBuffer::from_fn(40, 30, |_, _| Luma([100u8]));
        bad.save(tmp.path().join("depth/bad.png")).unwrap();
        std::fs::write(
            tmp.path().join("bad.txt"),
            "1.00 rgb/0.png 1.005 depth/bad.png\n",
        )
        .unwrap();
        assert!(matches!(
            load_tum_sequence(tmp.path(), &tmp.path().join("bad.txt"), &small_k(), 0),
            Err(TumError::DepthFormat { .. })
        ));
    }

    #[test]
    fn trajectory_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let points = vec![
            TrajectoryPoint {
                time: 0.0,
                pose: RigidTransform::identity(),
            },
            TrajectoryPoint {
                time: 0.5,
                pose: RigidTransform::from_quaternion_translation(
                    [0.0, 0.3826834323650898, 0.0, 0.9238795325112867],
                    Vector3::new(1.0, -2.0, 3.0),
                ),
            },
        ];
        let path = tmp.path().join("traj.txt");
        save_trajectory(&path, &points).unwrap();
        let loaded = load_trajectory(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        for (a, b) in points.iter().zip(&loaded) {
            assert_abs_diff_eq!(a.time, b.time, epsilon = 1e-9);
            assert!(a.pose.approx_eq(&b.pose, 1e-5));
        }
    }
}
