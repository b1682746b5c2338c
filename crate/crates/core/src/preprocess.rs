//! Skeleton-guided cropping and clip sampling.
//!
//! 3D joints are projected into the image with a pinhole model
//! `px = c_x * x / z + b_x`, `py = c_y * y / z + b_y` (y grows downward). The
//! union bounding box of all joints of a clip, widened by a margin on every
//! side and clamped to the frame, selects the region that is rescaled and fed
//! to the network.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::Mode;

/// Joint positions of one subject over a clip, `[T, J, D]` with `D` 2 or 3.
#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonSequence {
    frames: usize,
    joints: usize,
    dims: usize,
    data: Vec<f64>,
}

impl SkeletonSequence {
    pub fn new(frames: usize, joints: usize, dims: usize, data: Vec<f64>) -> Result<Self> {
        if dims != 2 && dims != 3 {
            return Err(Error::Shape(format!("joints must be 2D or 3D, got {dims}D")));
        }
        if data.len() != frames * joints * dims {
            return Err(Error::Shape(format!(
                "{frames} frames x {joints} joints x {dims} coords need {} values, got {}",
                frames * joints * dims,
                data.len()
            )));
        }
        Ok(SkeletonSequence {
            frames,
            joints,
            dims,
            data,
        })
    }

    pub fn from_frames(frames: &[Vec<Vec<f64>>]) -> Result<Self> {
        let joints = frames.first().map_or(0, Vec::len);
        let dims = frames.first().and_then(|f| f.first()).map_or(2, Vec::len);
        let mut data = Vec::new();
        for (t, f) in frames.iter().enumerate() {
            if f.len() != joints {
                return Err(Error::Shape(format!("frame {t} has {} joints, expected {joints}", f.len())));
            }
            for j in f {
                if j.len() != dims {
                    return Err(Error::Shape(format!("frame {t} mixes {dims}D and {}D joints", j.len())));
                }
                data.extend_from_slice(j);
            }
        }
        Self::new(frames.len(), joints, dims, data)
    }

    pub fn num_frames(&self) -> usize {
        self.frames
    }

    pub fn num_joints(&self) -> usize {
        self.joints
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn is_empty(&self) -> bool {
        self.frames == 0 || self.joints == 0
    }

    pub fn joint(&self, t: usize, j: usize) -> &[f64] {
        let start = (t * self.joints + j) * self.dims;
        &self.data[start..start + self.dims]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    fn points(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.dims)
    }
}

/// Pinhole coefficients in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectionParams {
    pub c_x: f64,
    pub c_y: f64,
    pub b_x: f64,
    pub b_y: f64,
}

impl Default for ProjectionParams {
    /// Coefficients fitted for 640x480 Kinect-style footage, centered biases.
    fn default() -> Self {
        ProjectionParams {
            c_x: 558.1,
            c_y: 579.5,
            b_x: 320.0,
            b_y: 240.0,
        }
    }
}

impl ProjectionParams {
    /// Default coefficients with biases at the center of a `width` x `height` frame.
    pub fn centered(width: usize, height: usize) -> Self {
        ProjectionParams {
            b_x: width as f64 / 2.0,
            b_y: height as f64 / 2.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c_x.is_finite() && self.c_y.is_finite() && self.c_x != 0.0 && self.c_y != 0.0) {
            return Err(Error::Config(format!(
                "projection coefficients must be finite and nonzero, got ({}, {})",
                self.c_x, self.c_y
            )));
        }
        Ok(())
    }

    pub fn project_point(&self, p: &[f64]) -> [f64; 2] {
        [self.c_x * p[0] / p[2] + self.b_x, self.c_y * p[1] / p[2] + self.b_y]
    }

    /// World coordinates of a pixel at depth `z`.
    pub fn unproject(&self, px: f64, py: f64, z: f64) -> [f64; 3] {
        [(px - self.b_x) * z / self.c_x, (py - self.b_y) * z / self.c_y, z]
    }
}

/// Project every 3D joint onto the image plane.
pub fn project(skeleton: &SkeletonSequence, params: &ProjectionParams) -> Result<SkeletonSequence> {
    if skeleton.dims != 3 {
        return Err(Error::Projection("projection needs 3D joints".into()));
    }
    params.validate()?;
    let mut data = Vec::with_capacity(skeleton.frames * skeleton.joints * 2);
    for t in 0..skeleton.frames {
        for j in 0..skeleton.joints {
            let p = skeleton.joint(t, j);
            if !(p[2] > 0.0) {
                return Err(Error::Projection(format!(
                    "frame {t} joint {j} has non-positive depth {}",
                    p[2]
                )));
            }
            data.extend_from_slice(&params.project_point(p));
        }
    }
    SkeletonSequence::new(skeleton.frames, skeleton.joints, 2, data)
}

/// A 3D joint with its annotated pixel position.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correspondence {
    pub world: [f64; 3],
    pub pixel: [f64; 2],
}

/// Least-squares focal coefficients with the biases held fixed.
///
/// Each axis is a one-parameter regression of `pixel - bias` on `x / z`, so
/// the minimizer is `sum(u * r) / sum(u * u)`.
pub fn fit_projection(samples: &[Correspondence], b_x: f64, b_y: f64) -> Result<ProjectionParams> {
    let mut sums = [[0.0; 2]; 2];
    for s in samples {
        if !(s.world[2] > 0.0) {
            return Err(Error::Fit(format!("sample with non-positive depth {}", s.world[2])));
        }
        let bias = [b_x, b_y];
        for axis in 0..2 {
            let u = s.world[axis] / s.world[2];
            sums[axis][0] += u * (s.pixel[axis] - bias[axis]);
            sums[axis][1] += u * u;
        }
    }
    let mut c = [0.0; 2];
    for axis in 0..2 {
        if sums[axis][1] == 0.0 {
            return Err(Error::Fit(format!(
                "no sample with a nonzero {} coordinate",
                ["x", "y"][axis]
            )));
        }
        c[axis] = sums[axis][0] / sums[axis][1];
    }
    Ok(ProjectionParams {
        c_x: c[0],
        c_y: c[1],
        b_x,
        b_y,
    })
}

/// Sum of squared pixel residuals of the projection model over `samples`.
pub fn projection_residual(samples: &[Correspondence], params: &ProjectionParams) -> f64 {
    samples
        .iter()
        .map(|s| {
            let p = params.project_point(&s.world);
            (p[0] - s.pixel[0]).powi(2) + (p[1] - s.pixel[1]).powi(2)
        })
        .sum()
}

/// Half-open pixel rectangle `[x0, x1) x [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropRect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl CropRect {
    pub fn full(width: usize, height: usize) -> Self {
        CropRect {
            x0: 0,
            y0: 0,
            x1: width,
            y1: height,
        }
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        if self.x0 < self.x1 && self.y0 < self.y1 && self.x1 <= width && self.y1 <= height {
            Ok(())
        } else {
            Err(Error::Crop(format!(
                "rect [{}, {}) x [{}, {}) does not fit a {width}x{height} frame",
                self.x0, self.x1, self.y0, self.y1
            )))
        }
    }
}

fn outward(lo: f64, hi: f64, margin: f64, limit: usize) -> Option<(usize, usize)> {
    let pad = margin * (hi - lo);
    let a = (lo - pad).floor().max(0.0);
    let b = (hi + pad).ceil().min(limit as f64);
    if !(a < limit as f64) || !(b > 0.0) {
        return None;
    }
    let a = a as usize;
    let b = (b as usize).max(a + 1).min(limit);
    (a < b).then_some((a, b))
}

/// Margin-expanded bounding box over every joint of every given 2D skeleton.
pub fn crop_rect_union(
    skeletons: &[&SkeletonSequence],
    frame_width: usize,
    frame_height: usize,
    margin: f64,
) -> Result<CropRect> {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for s in skeletons {
        if s.dims != 2 {
            return Err(Error::Crop("cropping needs 2D joints; project 3D skeletons first".into()));
        }
        for p in s.points() {
            for a in 0..2 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
    }
    if lo[0] > hi[0] {
        return Err(Error::Crop("skeleton has no joints".into()));
    }
    if !(lo.iter().chain(&hi).all(|v| v.is_finite())) {
        return Err(Error::Crop("skeleton has non-finite joints".into()));
    }
    let (x0, x1) = outward(lo[0], hi[0], margin, frame_width)
        .ok_or_else(|| Error::Crop(format!("joints x in [{}, {}] miss a frame of width {frame_width}", lo[0], hi[0])))?;
    let (y0, y1) = outward(lo[1], hi[1], margin, frame_height)
        .ok_or_else(|| Error::Crop(format!("joints y in [{}, {}] miss a frame of height {frame_height}", lo[1], hi[1])))?;
    Ok(CropRect { x0, y0, x1, y1 })
}

pub fn crop_rect(skeleton: &SkeletonSequence, frame_width: usize, frame_height: usize, margin: f64) -> Result<CropRect> {
    crop_rect_union(&[skeleton], frame_width, frame_height, margin)
}

/// Bilinearly resample `rect` of every `[T,C,H,W]` frame to `out_h` x `out_w`.
///
/// Sample centers are aligned (half-pixel convention) and source coordinates
/// are clamped to the rectangle's edge pixels.
pub fn crop_resize(frames: &Tensor, rect: CropRect, out_h: usize, out_w: usize) -> Result<Tensor> {
    let s = frames.shape();
    if s.len() != 4 {
        return Err(Error::Shape(format!("crop_resize expects [T,C,H,W], got {s:?}")));
    }
    let (t, c, h, w) = (s[0], s[1], s[2], s[3]);
    rect.validate(w, h)?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::Shape("output size must be positive".into()));
    }
    let taps = |out: usize, start: usize, len: usize| -> Vec<(usize, usize, f64)> {
        let scale = len as f64 / out as f64;
        (0..out)
            .map(|i| {
                let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(len - 1);
                (start + lo, start + hi, src - lo as f64)
            })
            .collect()
    };
    let ys = taps(out_h, rect.y0, rect.height());
    let xs = taps(out_w, rect.x0, rect.width());
    let src = frames.data();
    let mut out = Vec::with_capacity(t * c * out_h * out_w);
    for plane in src.chunks(h * w) {
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Tensor::new(vec![t, c, out_h, out_w], out)
}

/// Frame indices at `floor(offset + k * T/n)`, clamped into the clip.
pub fn sample_frames_at(clip_len: usize, n: usize, offset: f64) -> Vec<usize> {
    let seg = clip_len as f64 / n as f64;
    (0..n)
        .map(|k| ((offset + k as f64 * seg).floor().max(0.0) as usize).min(clip_len.saturating_sub(1)))
        .collect()
}

/// One frame per segment of `n` equal segments.
///
/// Train mode draws the first offset uniformly within the first segment;
/// test mode uses the segment midpoint.
pub fn sample_frames<R: Rng + ?Sized>(clip_len: usize, n: usize, mode: Mode, rng: &mut R) -> Vec<usize> {
    let seg = clip_len as f64 / n as f64;
    let offset = match mode {
        Mode::Train => rng.random::<f64>() * seg,
        Mode::Test => seg / 2.0,
    };
    sample_frames_at(clip_len, n, offset)
}

/// Mirror every `[.., W]` row.
pub fn hflip(frames: &Tensor) -> Tensor {
    let w = *frames.shape().last().expect("non-scalar");
    let mut data = frames.data().to_vec();
    for row in data.chunks_mut(w) {
        row.reverse();
    }
    Tensor::new(frames.shape().to_vec(), data).expect("same shape")
}

/// Square crop of `[T,C,H,W]` frames at `(y0, x0)`.
pub fn crop_square(frames: &Tensor, y0: usize, x0: usize, size: usize) -> Result<Tensor> {
    let s = frames.shape();
    let (t, c, h, w) = (s[0], s[1], s[2], s[3]);
    if y0 + size > h || x0 + size > w || size == 0 {
        return Err(Error::Crop(format!("{size}x{size} crop at ({y0}, {x0}) exceeds {h}x{w} frames")));
    }
    let mut out = Vec::with_capacity(t * c * size * size);
    for plane in frames.data().chunks(h * w) {
        for y in y0..y0 + size {
            out.extend_from_slice(&plane[y * w + x0..y * w + x0 + size]);
        }
    }
    Tensor::new(vec![t, c, size, size], out)
}

/// Clip-level augmentation of `[T,C,H,W]` frames.
///
/// Train: one fair coin decides a horizontal flip for the whole clip, then one
/// random square crop is shared by all frames. Test: center crop, no flip.
pub fn augment<R: Rng + ?Sized>(frames: &Tensor, mode: Mode, crop_size: usize, rng: &mut R) -> Result<Tensor> {
    let s = frames.shape();
    if s.len() != 4 {
        return Err(Error::Shape(format!("augment expects [T,C,H,W], got {s:?}")));
    }
    let (h, w) = (s[2], s[3]);
    if crop_size == 0 || crop_size > h || crop_size > w {
        return Err(Error::Crop(format!("crop size {crop_size} does not fit {h}x{w} frames")));
    }
    match mode {
        Mode::Train => {
            let flip = rng.random_bool(0.5);
            let y0 = rng.random_range(0..=h - crop_size);
            let x0 = rng.random_range(0..=w - crop_size);
            let cropped = crop_square(frames, y0, x0, crop_size)?;
            Ok(if flip { hflip(&cropped) } else { cropped })
        }
        Mode::Test => crop_square(frames, (h - crop_size) / 2, (w - crop_size) / 2, crop_size),
    }
}

/// Gather frames `indices` of a `[T,C,H,W]` clip.
pub fn gather_frames(frames: &Tensor, indices: &[usize]) -> Result<Tensor> {
    let s = frames.shape();
    let per = s[1..].iter().product::<usize>();
    let mut out = Vec::with_capacity(indices.len() * per);
    for &i in indices {
        if i >= s[0] {
            return Err(Error::Index(format!("frame {i} outside a clip of {} frames", s[0])));
        }
        out.extend_from_slice(&frames.data()[i * per..(i + 1) * per]);
    }
    let mut shape = s.to_vec();
    shape[0] = indices.len();
    Tensor::new(shape, out)
}
