//! Synthetic desk-scale scenes for end-to-end exercises.
//!
//! A scene is a handful of posed primitives (boxes, cylinders, rectangular
//! planes) near the origin; a cloud is a fixed number of points sampled
//! uniformly over the primitives' total surface area. Scenes sit on a
//! coarse world grid far enough apart that different scenes are always
//! negatives, while all copies of a scene share one world position and are
//! therefore positives of each other. Copies differ by a small rotation
//! about z and per-point gaussian jitter, so their voxelizations overlap
//! heavily but are not identical.
//!
//! All randomness is drawn from named substreams of one seed: scene `s`
//! from `("dataset.scene", s)` and copy `c` of scene `s` from
//! `("dataset.copy", s << 32 | c)`, so any item can be regenerated in
//! isolation.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::rng;

/// A surface primitive with its pose. Yaw rotates about the world z axis;
/// planes additionally tilt about their local x axis before yaw.
#[derive(Debug, Clone, Copy)]
pub enum Primitive {
    Box {
        center: [f64; 3],
        yaw: f64,
        half: [f64; 3],
    },
    Cylinder {
        center: [f64; 3],
        radius: f64,
        half_height: f64,
    },
    Plane {
        center: [f64; 3],
        yaw: f64,
        tilt: f64,
        half_w: f64,
        half_h: f64,
    },
}

fn rot_z(p: [f64; 3], yaw: f64) -> [f64; 3] {
    let (s, c) = yaw.sin_cos();
    [c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]]
}

fn rot_x(p: [f64; 3], tilt: f64) -> [f64; 3] {
    let (s, c) = tilt.sin_cos();
    [p[0], c * p[1] - s * p[2], s * p[1] + c * p[2]]
}

impl Primitive {
    pub fn surface_area(&self) -> f64 {
        match *self {
            Primitive::Box { half: [x, y, z], .. } => 8.0 * (x * y + y * z + x * z),
            Primitive::Cylinder {
                radius,
                half_height,
                ..
            } => 4.0 * PI * radius * half_height + 2.0 * PI * radius * radius,
            Primitive::Plane { half_w, half_h, .. } => 4.0 * half_w * half_h,
        }
    }

    /// Uniform point on the surface, in world coordinates.
    pub fn sample_surface<R: Rng>(&self, r: &mut R) -> [f64; 3] {
        match *self {
            Primitive::Box { center, yaw, half } => {
                let [hx, hy, hz] = half;
                let areas = [hy * hz, hy * hz, hx * hz, hx * hz, hx * hy, hx * hy];
                let face = weighted_pick(&areas, r);
                let (u, v) = (r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0));
                let local = match face {
                    0 => [-hx, u * hy, v * hz],
                    1 => [hx, u * hy, v * hz],
                    2 => [u * hx, -hy, v * hz],
                    3 => [u * hx, hy, v * hz],
                    4 => [u * hx, v * hy, -hz],
                    _ => [u * hx, v * hy, hz],
                };
                translate(rot_z(local, yaw), center)
            }
            Primitive::Cylinder {
                center,
                radius,
                half_height,
            } => {
                let lateral = 4.0 * PI * radius * half_height;
                let cap = PI * radius * radius;
                let part = weighted_pick(&[lateral, cap, cap], r);
                let theta = r.gen_range(0.0..2.0 * PI);
                let local = match part {
                    0 => [
                        radius * theta.cos(),
                        radius * theta.sin(),
                        r.gen_range(-half_height..half_height),
                    ],
                    side => {
                        // sqrt keeps the radial density uniform over the disc.
                        let rr = radius * r.gen::<f64>().sqrt();
                        let z = if side == 1 { half_height } else { -half_height };
                        [rr * theta.cos(), rr * theta.sin(), z]
                    }
                };
                translate(local, center)
            }
            Primitive::Plane {
                center,
                yaw,
                tilt,
                half_w,
                half_h,
            } => {
                let local = [
                    r.gen_range(-half_w..half_w),
                    r.gen_range(-half_h..half_h),
                    0.0,
                ];
                translate(rot_z(rot_x(local, tilt), yaw), center)
            }
        }
    }
}

fn translate(p: [f64; 3], by: [f64; 3]) -> [f64; 3] {
    [p[0] + by[0], p[1] + by[1], p[2] + by[2]]
}

/// Index into `weights` chosen with probability proportional to the weight.
fn weighted_pick<R: Rng>(weights: &[f64], r: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let t = r.gen_range(0.0..total);
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if t < acc {
            return i;
        }
    }
    weights.len() - 1
}

/// Geometry shared by every copy of one scene.
#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub primitives: Vec<Primitive>,
    pub position: [f64; 3],
}

/// One generated cloud.
#[derive(Debug, Clone)]
pub struct SynthItem {
    pub points: Vec<[f64; 3]>,
    /// World position shared by all copies of the scene.
    pub position: [f64; 3],
    pub scene: u32,
    pub copy: u32,
}

impl SynthItem {
    /// Stable identifier used for file names and descriptor ids.
    pub fn id(&self) -> String {
        format!("scene{:03}_copy{}", self.scene, self.copy)
    }
}

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub n_scenes: usize,
    pub copies_per_scene: usize,
    pub points_per_cloud: usize,
    pub min_primitives: usize,
    pub max_primitives: usize,
    /// Primitive centers are uniform in a cube of this half-extent.
    pub placement_extent: f64,
    /// Box half-sizes and cylinder radii are uniform in this range.
    pub min_half: f64,
    pub max_half: f64,
    /// Standard deviation of per-point jitter, applied per copy.
    pub jitter_sigma: f64,
    /// Copies are rotated about z by a uniform angle within this bound
    /// (radians).
    pub max_rotation: f64,
    /// World-grid spacing between scene positions.
    pub spacing: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_scenes: 30,
            copies_per_scene: 3,
            points_per_cloud: 4096,
            min_primitives: 4,
            max_primitives: 8,
            placement_extent: 0.08,
            min_half: 0.02,
            max_half: 0.05,
            jitter_sigma: 0.002,
            max_rotation: 0.06,
            spacing: 60.0,
            seed: 0,
        }
    }
}

/// World position of scene `s`: a square grid with `spacing` between
/// neighbours.
pub fn scene_position(config: &SynthConfig, scene: usize) -> [f64; 3] {
    let width = (config.n_scenes as f64).sqrt().ceil() as usize;
    let col = scene % width;
    let row = scene / width;
    [
        col as f64 * config.spacing,
        row as f64 * config.spacing,
        0.0,
    ]
}

/// Deterministic geometry for scene `s`.
pub fn scene_spec(config: &SynthConfig, scene: usize) -> SceneSpec {
    let mut r = rng::indexed_stream(config.seed, "dataset.scene", scene as u64);
    let n = r.gen_range(config.min_primitives..=config.max_primitives);
    let primitives = (0..n)
        .map(|_| {
            let e = config.placement_extent;
            let center = [
                r.gen_range(-e..e),
                r.gen_range(-e..e),
                r.gen_range(-e..e),
            ];
            fn size<R: Rng>(r: &mut R, config: &SynthConfig) -> f64 {
                r.gen_range(config.min_half..config.max_half)
            }
            match r.gen_range(0..3) {
                0 => Primitive::Box {
                    center,
                    yaw: r.gen_range(0.0..2.0 * PI),
                    half: [size(&mut r, config), size(&mut r, config), size(&mut r, config)],
                },
                1 => Primitive::Cylinder {
                    center,
                    radius: size(&mut r, config),
                    half_height: size(&mut r, config) * 1.4,
                },
                _ => Primitive::Plane {
                    center,
                    yaw: r.gen_range(0.0..2.0 * PI),
                    tilt: r.gen_range(-0.5 * PI..0.5 * PI),
                    half_w: size(&mut r, config) * 1.8,
                    half_h: size(&mut r, config) * 1.8,
                },
            }
        })
        .collect();
    SceneSpec {
        primitives,
        position: scene_position(config, scene),
    }
}

/// Samples copy `c` of scene `s`: area-weighted surface points, rotated
/// about z and jittered with the copy's own substream.
pub fn sample_item(config: &SynthConfig, spec: &SceneSpec, scene: usize, copy: usize) -> SynthItem {
    assert!(config.points_per_cloud >= 64, "clouds need at least 64 points");
    let key = ((scene as u64) << 32) | copy as u64;
    let mut r = rng::indexed_stream(config.seed, "dataset.copy", key);
    let angle = r.gen_range(-config.max_rotation..config.max_rotation);
    let noise = Normal::new(0.0, config.jitter_sigma).expect("sigma is finite");

    let areas: Vec<f64> = spec.primitives.iter().map(|p| p.surface_area()).collect();
    let points = (0..config.points_per_cloud)
        .map(|_| {
            let which = weighted_pick(&areas, &mut r);
            let p = spec.primitives[which].sample_surface(&mut r);
            let rotated = rot_z(p, angle);
            [
                rotated[0] + noise.sample(&mut r),
                rotated[1] + noise.sample(&mut r),
                rotated[2] + noise.sample(&mut r),
            ]
        })
        .collect();

    SynthItem {
        points,
        position: spec.position,
        scene: scene as u32,
        copy: copy as u32,
    }
}

/// Generates the full corpus: `n_scenes * copies_per_scene` items, scene
/// major, copy minor.
pub fn generate(config: &SynthConfig) -> Vec<SynthItem> {
    (0..config.n_scenes)
        .flat_map(|s| {
            let spec = scene_spec(config, s);
            (0..config.copies_per_scene)
                .map(move |c| sample_item(config, &spec, s, c))
                .collect::<Vec<_>>()
        })
        .collect()
}
