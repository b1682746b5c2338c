//! Synthetic action clips: a stick figure performing one of several motions
//! over a cluttered background.
//!
//! Classes come in planted superfamilies. All classes of a superfamily move
//! the same limbs; they differ only in the phase relation between left and
//! right limbs or in the motion speed. Every clip carries the rendered 2D joint
//! pixels and 3D joints placed on the corresponding camera rays.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::preprocess::{ProjectionParams, SkeletonSequence};
use crate::tensor::Tensor;

pub const BASE_JOINTS: usize = 11;

/// Joint order of the base skeleton.
pub const JOINT_NAMES: [&str; BASE_JOINTS] = [
    "head", "neck", "pelvis", "l_elbow", "l_hand", "r_elbow", "r_hand", "l_knee", "l_foot", "r_knee", "r_foot",
];

const BONES: [(usize, usize); 10] = [(0, 1), (1, 2), (1, 3), (3, 4), (1, 5), (5, 6), (2, 7), (7, 8), (2, 9), (9, 10)];

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub superfamilies: usize,
    pub clips_per_class: usize,
    pub width: usize,
    pub height: usize,
    pub clip_len: usize,
    /// 0 leaves a flat background; 1 adds the most rectangles, blobs and noise.
    pub clutter: f64,
    /// 0 centers the subject; 1 lets it wander to the frame edges.
    pub offset_range: f64,
    pub joints: usize,
    /// Fraction of each class assigned to the training split.
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_classes: 8,
            superfamilies: 4,
            clips_per_class: 40,
            width: 96,
            height: 72,
            clip_len: 24,
            clutter: 0.6,
            offset_range: 0.8,
            joints: BASE_JOINTS,
            train_fraction: 0.5,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.superfamilies == 0 || self.num_classes == 0 || !self.num_classes.is_multiple_of(self.superfamilies) {
            return err(format!(
                "{} classes cannot be split evenly into {} superfamilies",
                self.num_classes, self.superfamilies
            ));
        }
        if self.clips_per_class == 0 || self.clip_len == 0 {
            return err("clips per class and clip length must be positive".into());
        }
        if self.width < 32 || self.height < 32 {
            return err(format!("frames must be at least 32x32, got {}x{}", self.width, self.height));
        }
        if self.joints < BASE_JOINTS {
            return err(format!("at least {BASE_JOINTS} joints are needed, got {}", self.joints));
        }
        if !(0.0..=1.0).contains(&self.clutter) || !(0.0..=1.0).contains(&self.offset_range) {
            return err("clutter and offset range must lie in [0, 1]".into());
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return err(format!("train fraction must lie in (0, 1), got {}", self.train_fraction));
        }
        Ok(())
    }

    pub fn classes_per_family(&self) -> usize {
        self.num_classes / self.superfamilies
    }

    pub fn superfamily_of(&self, class: usize) -> usize {
        class / self.classes_per_family()
    }

    /// Camera used to lift the rendered joints into 3D.
    pub fn projection(&self) -> ProjectionParams {
        ProjectionParams::centered(self.width, self.height)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticClip {
    pub id: u64,
    pub label: usize,
    pub superfamily: usize,
    pub train: bool,
    pub width: usize,
    pub height: usize,
    /// Grayscale frames, `[T, H, W]` row-major.
    pub frames: Vec<u8>,
    pub skeleton_3d: SkeletonSequence,
    pub skeleton_2d: SkeletonSequence,
}

impl SyntheticClip {
    pub fn num_frames(&self) -> usize {
        self.frames.len() / (self.width * self.height)
    }

    /// Frames as `[T, 1, H, W]` intensities in `[0, 1]`.
    pub fn frames_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.num_frames(), 1, self.height, self.width],
            self.frames.iter().map(|&v| f64::from(v) / 255.0).collect(),
        )
        .expect("consistent frame buffer")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub spec: SyntheticSpec,
    pub clips: Vec<SyntheticClip>,
}

impl SyntheticDataset {
    pub fn train(&self) -> impl Iterator<Item = &SyntheticClip> {
        self.clips.iter().filter(|c| c.train)
    }

    pub fn test(&self) -> impl Iterator<Item = &SyntheticClip> {
        self.clips.iter().filter(|c| !c.train)
    }

    /// Planted groups of class ids.
    pub fn superfamilies(&self) -> Vec<Vec<usize>> {
        let per = self.spec.classes_per_family();
        (0..self.spec.superfamilies).map(|f| (f * per..(f + 1) * per).collect()).collect()
    }
}

/// Per-clip motion parameters.
struct Motion {
    motif: usize,
    /// Phase offset between left and right limbs.
    lag: f64,
    cycles: f64,
    phase: f64,
    amplitude: f64,
}

impl Motion {
    fn new(spec: &SyntheticSpec, label: usize, rng: &mut ChaCha8Rng) -> Self {
        let family = spec.superfamily_of(label);
        let variant = label % spec.classes_per_family();
        let variants = spec.classes_per_family();
        let motif = family % 4;
        let tier = (family / 4) as f64;
        let (lag, cycles) = if motif < 2 {
            let lag = if variants > 1 { PI * variant as f64 / (variants - 1) as f64 } else { 0.0 };
            (lag, 2.0 + tier)
        } else {
            (0.0, 1.0 + 2.0 * variant as f64 + tier)
        };
        Motion {
            motif,
            lag,
            cycles: cycles * rng.random_range(0.9..1.1),
            phase: rng.random_range(0.0..2.0 * PI),
            amplitude: rng.random_range(0.85..1.15),
        }
    }

    /// Joint positions in figure units: feet near y = 0, head near y = -1, y down.
    fn pose(&self, t: f64, clip_len: usize) -> [[f64; 2]; BASE_JOINTS] {
        let w = 2.0 * PI * self.cycles / clip_len as f64;
        let s = |lag: f64| (w * t + self.phase + lag).sin();
        let a = self.amplitude;
        let mut arm = [0.35, 0.35];
        let mut forearm = [0.15, 0.15];
        let mut leg = [0.12, 0.12];
        let mut knee = [0.0, 0.0];
        let mut drop = 0.0;
        let mut lean = 0.0;
        match self.motif {
            0 => {
                for (k, lag) in [0.0, self.lag].into_iter().enumerate() {
                    arm[k] = 1.6 + 0.9 * a * s(lag);
                    forearm[k] = 0.5 + 0.4 * a * s(lag + 0.8);
                }
            }
            1 => {
                for (k, lag) in [0.0, self.lag].into_iter().enumerate() {
                    let lift = 0.5 * (1.0 + s(lag));
                    leg[k] = 0.12 + 0.75 * a * lift;
                    knee[k] = 0.6 * a * lift;
                }
            }
            2 => {
                let d = 0.5 * (1.0 - s(0.0));
                drop = 0.22 * a * d;
                knee = [1.2 * a * d; 2];
                leg = [0.12 + 0.35 * a * d; 2];
                arm = [0.35 + 0.9 * a * d; 2];
            }
            _ => {
                lean = 0.45 * a * s(0.0);
                arm = [0.5, 0.5];
            }
        }
        let pelvis = [0.0, -0.47 + drop];
        let up = [lean.sin(), -lean.cos()];
        let along = |o: [f64; 2], d: [f64; 2], l: f64| [o[0] + l * d[0], o[1] + l * d[1]];
        let neck = along(pelvis, up, 0.3);
        let head = along(neck, up, 0.13);
        let mut j = [[0.0; 2]; BASE_JOINTS];
        j[0] = head;
        j[1] = neck;
        j[2] = pelvis;
        for (k, side) in [-1.0, 1.0].into_iter().enumerate() {
            let dir = |angle: f64| [side * (angle + lean).sin(), (angle + lean).cos()];
            let elbow = along(neck, dir(arm[k]), 0.19);
            let hand = along(elbow, dir(arm[k] + forearm[k]), 0.18);
            j[3 + 2 * k] = elbow;
            j[4 + 2 * k] = hand;
            let leg_dir = |angle: f64| [side * angle.sin(), angle.cos()];
            let kn = along(pelvis, leg_dir(leg[k]), 0.24);
            let foot = along(kn, leg_dir(leg[k] - 0.5 * knee[k]), 0.24 - 0.1 * knee[k].min(1.0));
            j[7 + 2 * k] = kn;
            j[8 + 2 * k] = foot;
        }
        j
    }
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 { 0.0 } else { (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0) };
    ((p[0] - a[0] - t * dx).powi(2) + (p[1] - a[1] - t * dy).powi(2)).sqrt()
}

fn paint_max(canvas: &mut [f64], w: usize, h: usize, lo: [f64; 2], hi: [f64; 2], mut f: impl FnMut([f64; 2]) -> f64) {
    let x0 = lo[0].floor().max(0.0) as usize;
    let y0 = lo[1].floor().max(0.0) as usize;
    let x1 = (hi[0].ceil().max(0.0) as usize).min(w);
    let y1 = (hi[1].ceil().max(0.0) as usize).min(h);
    for y in y0..y1 {
        for x in x0..x1 {
            let v = f([x as f64 + 0.5, y as f64 + 0.5]);
            let px = &mut canvas[y * w + x];
            if v > *px {
                *px = v;
            }
        }
    }
}

struct Blob {
    pos: [f64; 2],
    vel: [f64; 2],
    radius: f64,
    value: f64,
}

struct Scene {
    background: Vec<f64>,
    blobs: Vec<Blob>,
    noise: f64,
}

impl Scene {
    fn new(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Self {
        let (w, h) = (spec.width, spec.height);
        let base = rng.random_range(0.1..0.25);
        let mut background = vec![base; w * h];
        let rects = (10.0 * spec.clutter).round() as usize;
        for _ in 0..rects {
            let rw = rng.random_range(4.0..24.0);
            let rh = rng.random_range(4.0..24.0);
            let x = rng.random_range(0.0..w as f64);
            let y = rng.random_range(0.0..h as f64);
            let v = rng.random_range(0.3..0.55);
            for yy in (y as usize)..((y + rh) as usize).min(h) {
                for xx in (x as usize)..((x + rw) as usize).min(w) {
                    background[yy * w + xx] = v;
                }
            }
        }
        let blobs = (0..(4.0 * spec.clutter).round() as usize)
            .map(|_| Blob {
                pos: [rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64)],
                vel: [rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)],
                radius: rng.random_range(2.0..5.0),
                value: rng.random_range(0.4..0.65),
            })
            .collect();
        Scene {
            background,
            blobs,
            noise: 0.08 * spec.clutter,
        }
    }

    fn frame(&self, t: usize, spec: &SyntheticSpec) -> Vec<f64> {
        let (w, h) = (spec.width as f64, spec.height as f64);
        let mut canvas = self.background.clone();
        for b in &self.blobs {
            let bounce = |p: f64, v: f64, limit: f64| {
                let period = 2.0 * limit;
                let q = (p + v * t as f64).rem_euclid(period);
                if q > limit { period - q } else { q }
            };
            let c = [bounce(b.pos[0], b.vel[0], w), bounce(b.pos[1], b.vel[1], h)];
            let r = b.radius;
            paint_max(&mut canvas, spec.width, spec.height, [c[0] - r - 1.0, c[1] - r - 1.0], [c[0] + r + 1.0, c[1] + r + 1.0], |p| {
                let d = ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)).sqrt();
                b.value * (r + 0.5 - d).clamp(0.0, 1.0)
            });
        }
        canvas
    }
}

/// Bone midpoints appended after the base joints, cycling over the bones.
fn extend_joints(base: &[[f64; 2]; BASE_JOINTS], total: usize) -> Vec<[f64; 2]> {
    let mut out = base.to_vec();
    let mut k = 0usize;
    while out.len() < total {
        let (a, b) = BONES[k % BONES.len()];
        let level = (k / BONES.len()) as f64 + 1.0;
        let f = level / (level + 1.0);
        out.push([base[a][0] + f * (base[b][0] - base[a][0]), base[a][1] + f * (base[b][1] - base[a][1])]);
        k += 1;
    }
    out
}

fn generate_clip(spec: &SyntheticSpec, id: u64, label: usize, train: bool) -> Result<SyntheticClip> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(id);
    let (w, h) = (spec.width, spec.height);
    let motion = Motion::new(spec, label, &mut rng);
    let scene = Scene::new(spec, &mut rng);
    let scale = h as f64 * rng.random_range(0.38..0.48);
    // Figure extents in figure units, with room for raised arms and lifted legs.
    let (left, right, top, bottom) = (-0.45, 0.45, -1.05, 0.05);
    let cx_lo = -left * scale + 1.0;
    let cx_hi = w as f64 - right * scale - 1.0;
    let cy_lo = -top * scale + 1.0;
    let cy_hi = h as f64 - bottom * scale - 1.0;
    let mid = [(cx_lo + cx_hi) / 2.0, (cy_lo + cy_hi) / 2.0];
    let origin = [
        mid[0] + spec.offset_range * rng.random_range(-1.0..1.0) * (cx_hi - cx_lo) / 2.0,
        mid[1] + spec.offset_range * rng.random_range(-1.0..1.0) * (cy_hi - cy_lo) / 2.0,
    ];
    let intensity = rng.random_range(0.85..1.0);
    let depth = rng.random_range(3.0..4.5);
    let projection = spec.projection();
    let noise = Normal::new(0.0, scene.noise.max(1e-12)).expect("positive sigma");

    let mut frames = Vec::with_capacity(spec.clip_len * w * h);
    let mut px = Vec::with_capacity(spec.clip_len * spec.joints * 2);
    let mut world = Vec::with_capacity(spec.clip_len * spec.joints * 3);
    for t in 0..spec.clip_len {
        let pose = motion.pose(t as f64, spec.clip_len);
        let pixels: Vec<[f64; 2]> = pose.iter().map(|p| [origin[0] + scale * p[0], origin[1] + scale * p[1]]).collect();
        let mut canvas = scene.frame(t, spec);
        let thick = 0.05 * scale;
        for &(a, b) in &BONES {
            let (pa, pb) = (pixels[a], pixels[b]);
            let lo = [pa[0].min(pb[0]) - thick - 1.0, pa[1].min(pb[1]) - thick - 1.0];
            let hi = [pa[0].max(pb[0]) + thick + 1.0, pa[1].max(pb[1]) + thick + 1.0];
            paint_max(&mut canvas, w, h, lo, hi, |p| intensity * (thick + 0.5 - segment_distance(p, pa, pb)).clamp(0.0, 1.0));
        }
        let r = 0.075 * scale;
        let c = pixels[0];
        paint_max(&mut canvas, w, h, [c[0] - r - 1.0, c[1] - r - 1.0], [c[0] + r + 1.0, c[1] + r + 1.0], |p| {
            let d = ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)).sqrt();
            intensity * (r + 0.5 - d).clamp(0.0, 1.0)
        });
        for v in &mut canvas {
            if scene.noise > 0.0 {
                *v += noise.sample(&mut rng);
            }
            frames.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        let pose_px: [[f64; 2]; BASE_JOINTS] = pixels.try_into().expect("base joints");
        for (j, p) in extend_joints(&pose_px, spec.joints).into_iter().enumerate() {
            let z = depth + 0.1 * ((j as f64) * 1.7 + t as f64 * 0.3).sin();
            px.extend_from_slice(&p);
            world.extend_from_slice(&projection.unproject(p[0], p[1], z));
        }
    }
    Ok(SyntheticClip {
        id,
        label,
        superfamily: spec.superfamily_of(label),
        train,
        width: w,
        height: h,
        frames,
        skeleton_3d: SkeletonSequence::new(spec.clip_len, spec.joints, 3, world)?,
        skeleton_2d: SkeletonSequence::new(spec.clip_len, spec.joints, 2, px)?,
    })
}

/// Render the whole dataset. Clip `id` draws from stream `id` of a generator
/// seeded with `spec.seed`, so clips are independent of each other.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let n_train = ((spec.train_fraction * spec.clips_per_class as f64).round() as usize).clamp(1, spec.clips_per_class);
    let mut clips = Vec::with_capacity(spec.num_classes * spec.clips_per_class);
    for label in 0..spec.num_classes {
        for k in 0..spec.clips_per_class {
            let id = (label * spec.clips_per_class + k) as u64;
            clips.push(generate_clip(spec, id, label, k < n_train)?);
        }
    }
    Ok(SyntheticDataset { spec: spec.clone(), clips })
}
