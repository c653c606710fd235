//! Analytic synthetic scenes: a posed capsule body behind a textured box
//! occluder, inside a textured environment sphere. Frames are rendered by
//! marching the exact signed distances, so every mask is ground truth.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::deform::{Pose, Rigid, Skeleton};
use crate::error::{Error, Result};
use crate::geometry::{ray_sphere_intersections, Camera, Intersections, Ray, SphereLayout, Vec3};
use crate::io::{Dataset, FrameRecord};
use crate::par::{self, Exec};
use crate::raster::Image;
use crate::render::{sdf_to_density, Deformer};

/// Renderer samples per ray that the generator's march density is scaled from.
pub const RENDERER_SAMPLES: usize = 64;
/// Marching steps per ray: ten times the renderer's sample density.
pub const MARCH_STEPS: usize = 10 * RENDERER_SAMPLES;
const BISECT_ITERS: usize = 60;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Texture {
    /// Alternating 3D cells of edge `1 / scale`.
    Checker {
        scale: f64,
        a: [f64; 3],
        b: [f64; 3],
    },
    /// Bands along `x`.
    Stripes {
        scale: f64,
        a: [f64; 3],
        b: [f64; 3],
    },
    /// Smooth sinusoidal blend between two colors.
    Waves {
        scale: f64,
        a: [f64; 3],
        b: [f64; 3],
    },
}

impl Texture {
    pub fn eval(&self, p: &Vec3) -> [f64; 3] {
        let mix = |a: &[f64; 3], b: &[f64; 3], t: f64| [0, 1, 2].map(|i| a[i] + (b[i] - a[i]) * t);
        match self {
            Texture::Checker { scale, a, b } => {
                let k = (p * *scale).map(f64::floor);
                if (k.x + k.y + k.z).rem_euclid(2.0) < 1.0 {
                    *a
                } else {
                    *b
                }
            }
            Texture::Stripes { scale, a, b } => {
                if (p.x * scale).floor().rem_euclid(2.0) < 1.0 {
                    *a
                } else {
                    *b
                }
            }
            Texture::Waves { scale, a, b } => {
                let t = 0.5
                    + 0.25 * (scale * p.x + 1.3 * scale * p.y).sin()
                    + 0.25 * (0.7 * scale * p.z - scale * p.y).cos();
                mix(a, b, t)
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let (Texture::Checker { scale, a, b }
        | Texture::Stripes { scale, a, b }
        | Texture::Waves { scale, a, b }) = self;
        if !(scale.is_finite() && *scale > 0.0) {
            return Err(Error::InvalidSpec("texture scale must be positive".into()));
        }
        if a.iter().chain(b).any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::InvalidSpec(
                "texture colors must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Axis-aligned static box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Occluder {
    pub center: [f64; 3],
    pub half_extents: [f64; 3],
    pub texture: Texture,
}

impl Occluder {
    pub fn sdf(&self, p: &Vec3) -> f64 {
        let q = (p - Vec3::from(self.center)).abs() - Vec3::from(self.half_extents);
        q.map(|v| v.max(0.0)).norm() + q.max().min(0.0)
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        self.sdf(p) < 0.0
    }

    /// Entry distance of a slab test, if the ray hits the box ahead of its origin.
    pub fn intersect(&self, ray: &Ray) -> Option<f64> {
        let c = Vec3::from(self.center);
        let h = Vec3::from(self.half_extents);
        let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
        for i in 0..3 {
            let (o, d) = (ray.origin[i] - c[i], ray.dir[i]);
            if d.abs() < 1e-300 {
                if o.abs() > h[i] {
                    return None;
                }
                continue;
            }
            let (a, b) = ((-h[i] - o) / d, (h[i] - o) / d);
            t0 = t0.max(a.min(b));
            t1 = t1.min(a.max(b));
        }
        (t1 >= t0.max(0.0)).then_some(t0.max(0.0))
    }

    fn corners(&self) -> Vec<Vec3> {
        let c = Vec3::from(self.center);
        let h = Vec3::from(self.half_extents);
        (0..8)
            .map(|k| c + Vec3::new(sgn(k & 1) * h.x, sgn(k & 2) * h.y, sgn(k & 4) * h.z))
            .collect()
    }
}

fn sgn(bit: usize) -> f64 {
    if bit == 0 {
        -1.0
    } else {
        1.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub radius: f64,
    pub texture: Texture,
}

/// Periodic motion: arms flap about the shoulders while the whole body yaws
/// and sways sideways. Angles in radians.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Motion {
    pub arm_swing: f64,
    pub yaw: f64,
    pub sway: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraSpec {
    pub origin: [f64; 3],
    pub target: [f64; 3],
    pub up: [f64; 3],
    pub focal: f64,
    /// Total yaw of the camera about the world `y` axis over the sequence; 0 is static.
    #[serde(default)]
    pub orbit: f64,
}

impl CameraSpec {
    /// The camera rotated by `yaw` about the world `y` axis through the target.
    pub fn at_yaw(&self, yaw: f64, width: usize, height: usize) -> Camera {
        let target = Vec3::from(self.target);
        let rot = Rigid::rotation_about(Vec3::y(), yaw, target);
        Camera::look_at(
            rot.apply(&Vec3::from(self.origin)),
            target,
            Vec3::from(self.up),
            self.focal,
            width,
            height,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    /// Radius `R` of the outer sphere the body must stay inside.
    pub outer_radius: f64,
    pub skeleton: Skeleton,
    pub motion: Motion,
    /// Explicit per-frame poses; overrides `motion` when present.
    pub poses: Option<Vec<Pose>>,
    pub occluder: Option<Occluder>,
    pub environment: Environment,
    pub camera: CameraSpec,
    /// Standard deviation of Gaussian pixel noise in `[0, 1]` units.
    pub noise: f64,
    /// Fraction of frames in which the occluder must sit between camera and body.
    pub min_occluded_frames: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            frames: 20,
            width: 64,
            height: 64,
            outer_radius: 2.0,
            skeleton: Skeleton::default_rig(),
            motion: Motion {
                arm_swing: 0.6,
                yaw: 0.25,
                sway: 0.05,
            },
            poses: None,
            occluder: Some(Occluder {
                center: [0.2, -0.2, -1.5],
                half_extents: [0.28, 0.25, 0.05],
                texture: Texture::Checker {
                    scale: 10.0,
                    a: [0.85, 0.75, 0.2],
                    b: [0.25, 0.2, 0.15],
                },
            }),
            environment: Environment {
                radius: 8.0,
                texture: Texture::Waves {
                    scale: 3.0,
                    a: [0.2, 0.35, 0.55],
                    b: [0.55, 0.7, 0.8],
                },
            },
            camera: CameraSpec {
                origin: [0.0, 0.0, -5.0],
                target: [0.0; 3],
                up: [0.0, 1.0, 0.0],
                focal: 180.0,
                orbit: 0.0,
            },
            noise: 0.0,
            min_occluded_frames: 0.5,
        }
    }
}

/// Pose of the default rig at `frame` of `frames`.
pub fn motion_pose(skeleton: &Skeleton, motion: &Motion, frame: usize, frames: usize) -> Pose {
    let phi = 2.0 * PI * frame as f64 / frames.max(1) as f64;
    let global = Rigid::translation(Vec3::new(motion.sway * (2.0 * phi).sin(), 0.0, 0.0)).compose(
        &Rigid::rotation_about(Vec3::y(), motion.yaw * phi.sin(), Vec3::zeros()),
    );
    let swing = motion.arm_swing * phi.sin();
    Pose(
        skeleton
            .bones
            .iter()
            .map(|b| {
                let rest = b.capsule.transformed(&b.rest);
                let local = match b.name.as_str() {
                    "arm_left" => Rigid::rotation_about(Vec3::z(), swing, Vec3::from(rest.a)),
                    "arm_right" => Rigid::rotation_about(Vec3::z(), -swing, Vec3::from(rest.a)),
                    _ => Rigid::identity(),
                };
                global.compose(&local)
            })
            .collect(),
    )
}

impl SceneSpec {
    pub fn pose(&self, frame: usize) -> Pose {
        match &self.poses {
            Some(p) => p[frame].clone(),
            None => motion_pose(&self.skeleton, &self.motion, frame, self.frames),
        }
    }

    pub fn camera(&self, frame: usize) -> Camera {
        let yaw = self.camera.orbit * frame as f64 / self.frames.max(1) as f64;
        self.camera.at_yaw(yaw, self.width, self.height)
    }

    /// The occluder sits between camera and body in `frame`: all of it lies
    /// outside the body's bounding sphere on the camera side, and the line of
    /// sight through its center meets that sphere.
    pub fn occluder_between(&self, frame: usize) -> bool {
        let Some(occ) = &self.occluder else {
            return false;
        };
        let cam = self.camera(frame);
        let o = cam.origin();
        let radius = self.skeleton.bounding_radius(Some(&self.pose(frame)));
        let to_body = -o;
        let body_depth = to_body.norm();
        let corners_ok = occ
            .corners()
            .iter()
            .all(|c| c.norm() > radius && (c - o).dot(&to_body) / body_depth < body_depth);
        let sight = Ray::new(o, (Vec3::from(occ.center) - o).normalize());
        corners_ok
            && matches!(
                ray_sphere_intersections(&sight, radius),
                Ok(Intersections::Two(..))
            )
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.frames == 0 || self.width == 0 || self.height == 0 {
            return bad("frames and resolution must be positive".into());
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise must be nonnegative, got {}", self.noise));
        }
        if !(0.0..=1.0).contains(&self.min_occluded_frames) {
            return bad("min_occluded_frames must lie in [0, 1]".into());
        }
        if !(self.environment.radius >= self.outer_radius) {
            return bad("environment sphere must lie at or beyond the outer radius".into());
        }
        self.environment.texture.validate()?;
        self.skeleton
            .validate()
            .map_err(|e| Error::InvalidSpec(e.to_string()))?;
        if let Some(p) = &self.poses {
            if p.len() != self.frames {
                return bad(format!("{} poses for {} frames", p.len(), self.frames));
            }
        }
        if let Some(o) = &self.occluder {
            if o.half_extents.iter().any(|h| !(*h > 0.0)) {
                return bad("occluder half-extents must be positive".into());
            }
            o.texture.validate()?;
        }
        let mut between = 0;
        for f in 0..self.frames {
            let pose = self.pose(f);
            pose.validate(&self.skeleton)
                .map_err(|e| Error::InvalidSpec(format!("frame {f}: {e}")))?;
            let cam = self.camera(f);
            cam.validate()
                .map_err(|e| Error::InvalidSpec(e.to_string()))?;
            if cam.origin().norm() <= self.outer_radius {
                return bad(format!("frame {f}: camera inside the outer sphere"));
            }
            let layout = SphereLayout::for_camera(&cam, self.outer_radius)
                .map_err(|e| Error::InvalidSpec(e.to_string()))?;
            let reach = self.skeleton.bounding_radius(Some(&pose));
            if reach >= layout.inner {
                return bad(format!(
                    "frame {f}: body reaches {reach:.3}, beyond the inner sphere {:.3}",
                    layout.inner
                ));
            }
            if let Some(o) = &self.occluder {
                if o.contains(&cam.origin()) {
                    return bad(format!("frame {f}: camera inside the occluder"));
                }
            }
            between += self.occluder_between(f) as usize;
        }
        if self.occluder.is_some()
            && (between as f64) < self.min_occluded_frames * self.frames as f64
        {
            return bad(format!(
                "occluder is between camera and body in {between} of {} frames, need {:.0}%",
                self.frames,
                100.0 * self.min_occluded_frames
            ));
        }
        Ok(())
    }
}

/// Result of [`AnalyticScene::query`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneQuery {
    pub s_body: f64,
    /// Box signed distance, `+inf` without an occluder.
    pub s_box: f64,
    pub inside_occluder: bool,
    /// At or beyond the environment sphere.
    pub background: bool,
}

/// One traced pixel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelTrace {
    pub rgb: [f64; 3],
    pub gt_human: [f64; 3],
    pub silhouette: bool,
    pub visible: bool,
    pub occluder_hit: bool,
}

struct FrameGeom {
    deformer: Deformer,
    posed: Vec<crate::deform::Capsule>,
    reach: f64,
    camera: Camera,
}

/// Density of the environment shell in [`AnalyticScene::volume_sample`]; half a
/// unit of it is opaque to about `1e-11`.
pub const ENVIRONMENT_DENSITY: f64 = 50.0;

/// A validated spec with per-frame geometry precomputed.
pub struct AnalyticScene {
    pub spec: SceneSpec,
    frames: Vec<FrameGeom>,
}

/// Smooth body albedo over canonical coordinates.
pub fn body_color(x_c: &Vec3) -> [f64; 3] {
    [
        0.55 + 0.3 * (5.0 * x_c.y + 1.0).sin(),
        0.45 + 0.25 * (4.0 * x_c.x - 2.0 * x_c.z).cos(),
        0.4 + 0.25 * (3.0 * (x_c.x + x_c.y) + 0.5).sin(),
    ]
}

impl AnalyticScene {
    pub fn new(spec: &SceneSpec) -> Result<Self> {
        spec.validate()?;
        let frames = (0..spec.frames)
            .map(|f| {
                let pose = spec.pose(f);
                Ok(FrameGeom {
                    deformer: Deformer::new(&spec.skeleton, &pose)?,
                    posed: spec.skeleton.posed_capsules(&pose),
                    reach: spec.skeleton.bounding_radius(Some(&pose)),
                    camera: spec.camera(f),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            spec: spec.clone(),
            frames,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn camera(&self, frame: usize) -> &Camera {
        &self.frames[frame].camera
    }

    fn geom(&self, frame: usize) -> Result<&FrameGeom> {
        self.frames
            .get(frame)
            .ok_or_else(|| Error::Contract(format!("frame {frame} out of range")))
    }

    pub fn query(&self, x: &Vec3, frame: usize) -> Result<SceneQuery> {
        let g = self.geom(frame)?;
        let s_box = self
            .spec
            .occluder
            .as_ref()
            .map_or(f64::INFINITY, |o| o.sdf(x));
        Ok(SceneQuery {
            s_body: Skeleton::union_sdf(&g.posed, x),
            s_box,
            inside_occluder: s_box < 0.0,
            background: x.norm() >= self.spec.environment.radius,
        })
    }

    /// Body albedo at an observation-space point.
    pub fn body_color_at(&self, x: &Vec3, frame: usize) -> Result<[f64; 3]> {
        Ok(body_color(&self.geom(frame)?.deformer.canonical(x)))
    }

    pub fn environment_color(&self, dir: &Vec3) -> [f64; 3] {
        self.spec.environment.texture.eval(&dir.normalize())
    }

    /// Volumetric view of the scene: body and box both turn their signed
    /// distances into Laplace densities of scale `beta`, and the environment
    /// sphere is a shell of density [`ENVIRONMENT_DENSITY`].
    pub fn volume_sample(&self, x: &Vec3, frame: usize, beta: f64) -> Result<(f64, [f64; 3])> {
        let q = self.query(x, frame)?;
        if q.background {
            return Ok((ENVIRONMENT_DENSITY, self.environment_color(x)));
        }
        let sb = sdf_to_density(q.s_body, beta);
        let so = if q.s_box.is_finite() {
            sdf_to_density(q.s_box, beta)
        } else {
            0.0
        };
        let total = sb + so;
        if total <= 0.0 {
            return Ok((0.0, [0.0; 3]));
        }
        let cb = self.body_color_at(x, frame)?;
        let co = match &self.spec.occluder {
            Some(o) => o.texture.eval(&(x - Vec3::from(o.center))),
            None => [0.0; 3],
        };
        Ok((total, [0, 1, 2].map(|i| (sb * cb[i] + so * co[i]) / total)))
    }

    /// First body surface crossing along `ray`: a fixed-step march over the
    /// chord of the body's bounding sphere, refined by bisection.
    pub fn body_hit(&self, ray: &Ray, frame: usize) -> Result<Option<f64>> {
        let g = self.geom(frame)?;
        let (t0, t1) = match ray_sphere_intersections(ray, g.reach + 1e-3)? {
            Intersections::Two(a, b) if b > 0.0 => (a.max(0.0), b),
            _ => return Ok(None),
        };
        let f = |t: f64| Skeleton::union_sdf(&g.posed, &ray.at(t));
        let dt = (t1 - t0) / MARCH_STEPS as f64;
        let mut prev = t0;
        if f(prev) < 0.0 {
            return Ok(Some(prev));
        }
        for k in 1..=MARCH_STEPS {
            let t = t0 + k as f64 * dt;
            if f(t) < 0.0 {
                let (mut lo, mut hi) = (prev, t);
                for _ in 0..BISECT_ITERS {
                    let mid = 0.5 * (lo + hi);
                    if f(mid) < 0.0 {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                }
                return Ok(Some(hi));
            }
            prev = t;
        }
        Ok(None)
    }

    pub fn trace_pixel(&self, frame: usize, x: usize, y: usize) -> Result<PixelTrace> {
        let g = self.geom(frame)?;
        let ray = g.camera.pixel_ray(x, y)?;
        let body = self.body_hit(&ray, frame)?;
        let occ = self
            .spec
            .occluder
            .as_ref()
            .and_then(|o| o.intersect(&ray).map(|t| (t, o)));
        let env = match ray_sphere_intersections(&ray, self.spec.environment.radius)? {
            Intersections::Two(_, b) => self.environment_color(&ray.at(b)),
            _ => self.environment_color(&ray.dir),
        };
        let body_rgb = body.map(|t| body_color(&g.deformer.canonical(&ray.at(t))));
        let gt_human = body_rgb.unwrap_or(env);
        let visible = match (body, occ) {
            (Some(tb), Some((to, _))) => tb < to,
            (Some(_), None) => true,
            _ => false,
        };
        let rgb = match occ {
            Some((to, o)) if !visible => o.texture.eval(&(ray.at(to) - Vec3::from(o.center))),
            _ => gt_human,
        };
        Ok(PixelTrace {
            rgb,
            gt_human,
            silhouette: body.is_some(),
            visible,
            occluder_hit: occ.is_some(),
        })
    }

    pub fn render_frame(&self, frame: usize, seed: u64) -> Result<FrameRecord> {
        let (w, h) = (self.spec.width, self.spec.height);
        let mut rgb = Image::new(w, h, 3);
        let mut gt = Image::new(w, h, 3);
        let mut mask = vec![false; w * h];
        let mut sil = vec![false; w * h];
        let mut occluded = vec![false; w * h];
        for y in 0..h {
            for x in 0..w {
                let p = self.trace_pixel(frame, x, y)?;
                let i = y * w + x;
                for c in 0..3 {
                    rgb.set(x, y, c, p.rgb[c]);
                    gt.set(x, y, c, p.gt_human[c]);
                }
                mask[i] = p.visible;
                sil[i] = p.silhouette;
                occluded[i] = p.silhouette && !p.visible;
            }
        }
        if let Some(i) = (0..w * h).find(|&i| mask[i] != (sil[i] && !occluded[i])) {
            return Err(Error::Contract(format!(
                "frame {frame}: visible mask inconsistent at pixel {i}"
            )));
        }
        if self.spec.noise > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(
                seed ^ (frame as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15),
            );
            let n =
                Normal::new(0.0, self.spec.noise).map_err(|e| Error::InvalidSpec(e.to_string()))?;
            for v in &mut rgb.data {
                *v = (*v + n.sample(&mut rng)).clamp(0.0, 1.0);
            }
        }
        Ok(FrameRecord {
            index: frame,
            rgb,
            mask,
            gt_human: gt,
            silhouette: sil,
        })
    }
}

/// Renders every frame of `spec`. Only the pixel noise depends on `seed`.
pub fn generate(spec: &SceneSpec, seed: u64, exec: Exec) -> Result<Dataset> {
    let scene = AnalyticScene::new(spec)?;
    let frames = par::map_range(exec, spec.frames, |f| scene.render_frame(f, seed))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        spec: spec.clone(),
        cameras: (0..spec.frames).map(|f| spec.camera(f)).collect(),
        poses: (0..spec.frames).map(|f| spec.pose(f)).collect(),
        frames,
    })
}

/// Occluded share of each frame's silhouette.
#[derive(Clone, Debug, PartialEq)]
pub struct OcclusionSummary {
    pub per_frame: Vec<f64>,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl OcclusionSummary {
    pub fn of(dataset: &Dataset) -> Self {
        let per_frame: Vec<f64> = dataset
            .frames
            .iter()
            .map(FrameRecord::occluded_fraction)
            .collect();
        let n = per_frame.len().max(1) as f64;
        Self {
            mean: per_frame.iter().sum::<f64>() / n,
            min: per_frame.iter().copied().fold(f64::INFINITY, f64::min),
            max: per_frame.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            per_frame,
        }
    }
}
