//! RGB-D frame representation and vertex/normal/intensity pyramids.

pub mod synthetic;
pub mod tum;

use nalgebra::Vector3;
use thiserror::Error;

use crate::geometry::Intrinsics;

/// Depth readings beyond this are treated as invalid (metres).
pub const Z_MAX: f64 = 12.0;

/// Number of pyramid levels used throughout the pipeline.
pub const PYRAMID_LEVELS: usize = 3;

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("image is {got_w}x{got_h} but intrinsics declare {want_w}x{want_h}")]
    DimensionMismatch {
        got_w: usize,
        got_h: usize,
        want_w: usize,
        want_h: usize,
    },
}

/// Dense row-major 2-D buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T: Copy> Grid<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), width * height);
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> T {
        debug_assert!(x < self.width && y < self.height);
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: T) {
        debug_assert!(x < self.width && y < self.height);
        self.data[y * self.width + x] = value;
    }

    #[inline]
    pub fn try_get(&self, x: i64, y: i64) -> Option<T> {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            None
        } else {
            Some(self.data[y as usize * self.width + x as usize])
        }
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
}

/// A timestamped color + depth image pair from one camera.
#[derive(Clone, Debug)]
pub struct RgbdFrame {
    pub camera_id: u32,
    /// Monotone per-camera frame index.
    pub index: u64,
    /// Wall-clock timestamp, seconds.
    pub wall_time: f64,
    pub color: Grid<[u8; 3]>,
    /// Metres; 0 marks an invalid reading.
    pub depth: Grid<f32>,
    pub intrinsics: Intrinsics,
}

impl RgbdFrame {
    pub fn new(
        camera_id: u32,
        index: u64,
        wall_time: f64,
        color: Grid<[u8; 3]>,
        depth: Grid<f32>,
        intrinsics: Intrinsics,
    ) -> Result<Self, FrameError> {
        for (w, h) in [(color.width(), color.height()), (depth.width(), depth.height())] {
            if w != intrinsics.width || h != intrinsics.height {
                return Err(FrameError::DimensionMismatch {
                    got_w: w,
                    got_h: h,
                    want_w: intrinsics.width,
                    want_h: intrinsics.height,
                });
            }
        }
        Ok(Self {
            camera_id,
            index,
            wall_time,
            color,
            depth,
            intrinsics,
        })
    }

    pub fn valid_depth_count(&self) -> usize {
        self.depth.data().iter().filter(|d| **d > 0.0).count()
    }
}

/// One pyramid level: intensity, depth and the maps derived from depth.
#[derive(Clone, Debug)]
pub struct PyramidLevel {
    pub intrinsics: Intrinsics,
    /// Greyscale in [0, 1].
    pub intensity: Grid<f32>,
    /// Metres; 0 invalid.
    pub depth: Grid<f32>,
    /// Camera-frame points; meaningful only where depth > 0.
    pub vertex: Grid<Vector3<f64>>,
    /// Unit normals facing the camera; the zero vector marks invalid.
    pub normal: Grid<Vector3<f64>>,
}

impl PyramidLevel {
    #[inline]
    pub fn vertex_at(&self, x: usize, y: usize) -> Option<Vector3<f64>> {
        if self.depth.get(x, y) > 0.0 {
            Some(self.vertex.get(x, y))
        } else {
            None
        }
    }

    #[inline]
    pub fn normal_at(&self, x: usize, y: usize) -> Option<Vector3<f64>> {
        let n = self.normal.get(x, y);
        if n == Vector3::zeros() {
            None
        } else {
            Some(n)
        }
    }

    /// Bilinear intensity sample; `None` if any corner of the cell is outside
    /// the image.
    #[inline]
    pub fn intensity_bilinear(&self, u: f64, v: f64) -> Option<f64> {
        bilinear(&self.intensity, u, v).map(|(i, _, _)| i)
    }

    /// Bilinear intensity together with the exact spatial gradient of the
    /// interpolated surface at `(u, v)`.
    #[inline]
    pub fn intensity_bilinear_grad(&self, u: f64, v: f64) -> Option<(f64, f64, f64)> {
        bilinear(&self.intensity, u, v)
    }
}

fn bilinear(g: &Grid<f32>, u: f64, v: f64) -> Option<(f64, f64, f64)> {
    let x0 = u.floor();
    let y0 = v.floor();
    let xi = x0 as i64;
    let yi = y0 as i64;
    if xi < 0 || yi < 0 || xi + 1 >= g.width() as i64 || yi + 1 >= g.height() as i64 {
        return None;
    }
    let (x, y) = (xi as usize, yi as usize);
    let fx = u - x0;
    let fy = v - y0;
    let i00 = g.get(x, y) as f64;
    let i10 = g.get(x + 1, y) as f64;
    let i01 = g.get(x, y + 1) as f64;
    let i11 = g.get(x + 1, y + 1) as f64;
    let value = i00 * (1.0 - fx) * (1.0 - fy)
        + i10 * fx * (1.0 - fy)
        + i01 * (1.0 - fx) * fy
        + i11 * fx * fy;
    let du = (i10 - i00) * (1.0 - fy) + (i11 - i01) * fy;
    let dv = (i01 - i00) * (1.0 - fx) + (i11 - i10) * fx;
    Some((value, du, dv))
}

/// Three-level coarse-to-fine image pyramid.
#[derive(Clone, Debug)]
pub struct FramePyramid {
    pub levels: Vec<PyramidLevel>,
}

impl FramePyramid {
    pub fn level(&self, l: usize) -> &PyramidLevel {
        &self.levels[l]
    }

    pub fn finest(&self) -> &PyramidLevel {
        &self.levels[0]
    }
}

/// Build the tracking pyramid for a frame: greyscale intensity, vertex maps
/// from backprojection and normals from central differences of the vertex
/// map. Intensity is downsampled with a 5x5 Gaussian, depth with the median
/// of the valid samples in each 2x2 block.
pub fn build_pyramid(frame: &RgbdFrame) -> FramePyramid {
    build_pyramid_from_parts(&frame.color, &frame.depth, frame.intrinsics)
}

/// `build_pyramid` with an optional bilateral pre-filter on depth. Off by
/// default everywhere; normals are computed from raw depth otherwise.
pub fn build_pyramid_filtered(frame: &RgbdFrame, bilateral: bool) -> FramePyramid {
    if bilateral {
        let depth = bilateral_filter_depth(&frame.depth);
        build_pyramid_from_parts(&frame.color, &depth, frame.intrinsics)
    } else {
        build_pyramid(frame)
    }
}

/// 5x5 bilateral filter on depth: spatial sigma 1.5 px, range sigma 3 cm.
/// Invalid readings neither contribute nor get filled.
pub fn bilateral_filter_depth(depth: &Grid<f32>) -> Grid<f32> {
    const SIGMA_S2: f64 = 1.5 * 1.5;
    const SIGMA_R2: f64 = 0.03 * 0.03;
    let mut out = Grid::filled(depth.width(), depth.height(), 0.0f32);
    for y in 0..depth.height() {
        for x in 0..depth.width() {
            let center = depth.get(x, y) as f64;
            if center == 0.0 {
                continue;
            }
            let mut acc = 0.0;
            let mut weight = 0.0;
            for dy in -2i64..=2 {
                for dx in -2i64..=2 {
                    let Some(z) = depth.try_get(x as i64 + dx, y as i64 + dy) else {
                        continue;
                    };
                    let z = z as f64;
                    if z == 0.0 {
                        continue;
                    }
                    let dz = z - center;
                    let w = (-((dx * dx + dy * dy) as f64) / (2.0 * SIGMA_S2)
                        - dz * dz / (2.0 * SIGMA_R2))
                        .exp();
                    acc += w * z;
                    weight += w;
                }
            }
            out.set(x, y, (acc / weight) as f32);
        }
    }
    out
}

pub fn build_pyramid_from_parts(
    color: &Grid<[u8; 3]>,
    depth: &Grid<f32>,
    intrinsics: Intrinsics,
) -> FramePyramid {
    // Pre-blurring the finest intensity keeps the photometric term's
    // bilinear lookups honest: interpolating one side of a sharp edge while
    // point-sampling the other pulls subpixel alignments toward integer
    // shifts (pixel locking). The blur is symmetric so it cancels from the
    // residual at the true alignment.
    let mut intensity = gaussian_blur_5x5(&intensity_from_color(color));
    let mut depth = depth.clone();
    let mut levels = Vec::with_capacity(PYRAMID_LEVELS);
    for l in 0..PYRAMID_LEVELS {
        let k = intrinsics.level(l);
        if l > 0 {
            intensity = decimate(&gaussian_blur_5x5(&intensity), k.width, k.height);
            depth = downsample_depth_median(&depth, k.width, k.height);
        }
        let vertex = vertex_map(&depth, &k);
        let normal = normal_map(&depth, &vertex);
        levels.push(PyramidLevel {
            intrinsics: k,
            intensity: intensity.clone(),
            depth: depth.clone(),
            vertex,
            normal,
        });
    }
    FramePyramid { levels }
}

pub fn intensity_from_color(color: &Grid<[u8; 3]>) -> Grid<f32> {
    let data = color
        .data()
        .iter()
        .map(|c| {
            ((0.299 * c[0] as f64 + 0.587 * c[1] as f64 + 0.114 * c[2] as f64) / 255.0) as f32
        })
        .collect();
    Grid::from_vec(color.width(), color.height(), data)
}

pub(crate) fn vertex_map(depth: &Grid<f32>, k: &Intrinsics) -> Grid<Vector3<f64>> {
    let mut out = Grid::filled(depth.width(), depth.height(), Vector3::zeros());
    for y in 0..depth.height() {
        for x in 0..depth.width() {
            let z = depth.get(x, y) as f64;
            if z > 0.0 {
                if let Some(p) = k.backproject(x as f64, y as f64, z) {
                    out.set(x, y, p);
                }
            }
        }
    }
    out
}

pub(crate) fn normal_map(depth: &Grid<f32>, vertex: &Grid<Vector3<f64>>) -> Grid<Vector3<f64>> {
    let mut out = Grid::filled(depth.width(), depth.height(), Vector3::zeros());
    if depth.width() < 3 || depth.height() < 3 {
        return out;
    }
    for y in 1..depth.height() - 1 {
        for x in 1..depth.width() - 1 {
            if depth.get(x, y) == 0.0
                || depth.get(x - 1, y) == 0.0
                || depth.get(x + 1, y) == 0.0
                || depth.get(x, y - 1) == 0.0
                || depth.get(x, y + 1) == 0.0
            {
                continue;
            }
            let dx = vertex.get(x + 1, y) - vertex.get(x - 1, y);
            let dy = vertex.get(x, y + 1) - vertex.get(x, y - 1);
            let mut n = dx.cross(&dy);
            let len = n.norm();
            if len < 1e-12 {
                continue;
            }
            n /= len;
            // Orient toward the camera.
            if n.dot(&vertex.get(x, y)) > 0.0 {
                n = -n;
            }
            out.set(x, y, n);
        }
    }
    out
}

/// Separable 5x5 binomial blur with clamped borders.
fn gaussian_blur_5x5(g: &Grid<f32>) -> Grid<f32> {
    const K: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];
    let (w, h) = (g.width(), g.height());
    let mut tmp = Grid::filled(w, h, 0.0f32);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, k) in K.iter().enumerate() {
                let xi = (x as i64 + i as i64 - 2).clamp(0, w as i64 - 1) as usize;
                acc += k * g.get(xi, y) as f64;
            }
            tmp.set(x, y, acc as f32);
        }
    }
    let mut out = Grid::filled(w, h, 0.0f32);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, k) in K.iter().enumerate() {
                let yi = (y as i64 + i as i64 - 2).clamp(0, h as i64 - 1) as usize;
                acc += k * tmp.get(x, yi) as f64;
            }
            out.set(x, y, acc as f32);
        }
    }
    out
}

fn decimate(g: &Grid<f32>, out_w: usize, out_h: usize) -> Grid<f32> {
    let mut out = Grid::filled(out_w, out_h, 0.0f32);
    for y in 0..out_h {
        for x in 0..out_w {
            out.set(x, y, g.get((2 * x).min(g.width() - 1), (2 * y).min(g.height() - 1)));
        }
    }
    out
}

/// Median of the valid depths in each 2x2 block; the lower median for even
/// counts so foreground and background never mix across discontinuities.
fn downsample_depth_median(depth: &Grid<f32>, out_w: usize, out_h: usize) -> Grid<f32> {
    let mut out = Grid::filled(out_w, out_h, 0.0f32);
    for y in 0..out_h {
        for x in 0..out_w {
            let mut valid: [f32; 4] = [0.0; 4];
            let mut n = 0;
            for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                if let Some(d) = depth.try_get((2 * x + dx) as i64, (2 * y + dy) as i64) {
                    if d > 0.0 {
                        valid[n] = d;
                        n += 1;
                    }
                }
            }
            if n > 0 {
                valid[..n].sort_by(|a, b| a.partial_cmp(b).unwrap());
                out.set(x, y, valid[(n - 1) / 2]);
            }
        }
    }
    out
}
