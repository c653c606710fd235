//! Cameras, rays, the two concentric spheres and the per-layer sample
//! coordinates.
//!
//! The scene is centered on the body at the origin. The outer sphere (radius
//! `R`) bounds the body; everything beyond it is background. The inner sphere
//! (radius `r < R`) is inscribed to the outermost camera rays, so every pixel
//! ray reaches it; the stretch from the camera to the first inner-sphere hit
//! is the occlusion layer.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

const UNIT_TOL: f64 = 1e-9;

/// Near bound of the occlusion segment, in world units.
pub const DEFAULT_NEAR: f64 = 1e-3;

/// Step length used for the last background sample (the ray continues to infinity).
pub const FAR_DELTA: f64 = 1e10;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
}

impl Ray {
    /// Builds a ray, normalizing `dir`.
    pub fn new(origin: Vec3, dir: Vec3) -> Self {
        Self {
            origin,
            dir: dir.normalize(),
        }
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.dir * t
    }

    fn check_unit(&self) -> Result<()> {
        let n = self.dir.norm();
        if (n - 1.0).abs() > UNIT_TOL {
            return Err(Error::Contract(format!(
                "ray direction has norm {n}, expected 1"
            )));
        }
        Ok(())
    }
}

/// Pinhole camera. `rotation` maps camera axes (x right, y down, z forward)
/// to world axes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Row-major world-from-camera rotation.
    pub rotation: [f64; 9],
    pub origin: [f64; 3],
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Contract("camera image size must be positive".into()));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Contract(
                "camera focal lengths must be positive".into(),
            ));
        }
        let r = self.rotation_matrix();
        let err = (r * r.transpose() - Matrix3::identity()).abs().max();
        if err > 1e-9 || r.determinant() < 0.0 {
            return Err(Error::Contract(format!(
                "camera rotation is not a rotation (|RR^T - I| = {err:e})"
            )));
        }
        Ok(())
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_row_slice(&self.rotation)
    }

    pub fn origin(&self) -> Vec3 {
        Vec3::from(self.origin)
    }

    pub fn forward(&self) -> Vec3 {
        self.rotation_matrix() * Vec3::z()
    }

    /// Ray through image-plane point `(u, v)` in continuous pixel coordinates.
    pub fn ray_through(&self, u: f64, v: f64) -> Ray {
        let d_cam = Vec3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0);
        Ray::new(self.origin(), self.rotation_matrix() * d_cam)
    }

    /// Ray through the center of pixel `(x, y)`.
    pub fn pixel_ray(&self, x: usize, y: usize) -> Result<Ray> {
        if x >= self.width || y >= self.height {
            return Err(Error::PixelOutOfBounds {
                x,
                y,
                width: self.width,
                height: self.height,
            });
        }
        Ok(self.ray_through(x as f64 + 0.5, y as f64 + 0.5))
    }

    /// Rays through the four outer corners of the image.
    pub fn corner_rays(&self) -> [Ray; 4] {
        let (w, h) = (self.width as f64, self.height as f64);
        [
            self.ray_through(0.0, 0.0),
            self.ray_through(w, 0.0),
            self.ray_through(0.0, h),
            self.ray_through(w, h),
        ]
    }

    /// Camera at `origin` looking at `target`, with world `up` mapped to image up.
    pub fn look_at(
        origin: Vec3,
        target: Vec3,
        up: Vec3,
        focal: f64,
        width: usize,
        height: usize,
    ) -> Self {
        let z = (target - origin).normalize();
        let x = z.cross(&up).normalize();
        let y = z.cross(&x);
        let r = Matrix3::from_columns(&[x, y, z]);
        let mut rotation = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                rotation[i * 3 + j] = r[(i, j)];
            }
        }
        Self {
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            rotation,
            origin: [origin.x, origin.y, origin.z],
        }
    }
}

/// One ray per pixel index `(x, y)`.
pub fn generate_rays(camera: &Camera, pixels: &[(usize, usize)]) -> Result<Vec<Ray>> {
    pixels
        .iter()
        .map(|&(x, y)| camera.pixel_ray(x, y))
        .collect()
}

/// Real roots of `|o + t d| = radius`, ascending.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Intersections {
    None,
    Tangent(f64),
    Two(f64, f64),
}

impl Intersections {
    pub fn count(&self) -> usize {
        match self {
            Intersections::None => 0,
            Intersections::Tangent(_) => 1,
            Intersections::Two(..) => 2,
        }
    }

    pub fn roots(&self) -> Vec<f64> {
        match *self {
            Intersections::None => vec![],
            Intersections::Tangent(t) => vec![t],
            Intersections::Two(a, b) => vec![a, b],
        }
    }
}

/// Solves `t^2 + 2 (o.d) t + |o|^2 - radius^2 = 0` for a unit-direction ray.
pub fn ray_sphere_intersections(ray: &Ray, radius: f64) -> Result<Intersections> {
    ray.check_unit()?;
    if !(radius > 0.0) {
        return Err(Error::Contract(format!(
            "sphere radius must be positive, got {radius}"
        )));
    }
    let b = ray.origin.dot(&ray.dir);
    let c = ray.origin.norm_squared() - radius * radius;
    let disc = b * b - c;
    let scale = (b * b).max(c.abs()).max(1.0);
    if disc.abs() <= 1e-14 * scale {
        return Ok(Intersections::Tangent(-b));
    }
    if disc < 0.0 {
        return Ok(Intersections::None);
    }
    let sq = disc.sqrt();
    // Cancellation-free pair: q = -(b + sign(b) sq); roots q and c / q.
    let q = -(b + b.signum() * sq);
    let (t0, t1) = if q == 0.0 { (-sq, sq) } else { (q, c / q) };
    Ok(if t0 <= t1 {
        Intersections::Two(t0, t1)
    } else {
        Intersections::Two(t1, t0)
    })
}

/// Distance from the origin to the forward half-line of `ray`.
pub fn forward_distance_to_center(ray: &Ray) -> f64 {
    let b = ray.origin.dot(&ray.dir);
    if b >= 0.0 {
        // Pointing away: the closest forward point is the ray origin.
        ray.origin.norm()
    } else {
        (ray.origin.norm_squared() - b * b).max(0.0).sqrt()
    }
}

fn hits_forward(ray: &Ray, radius: f64) -> bool {
    ray_sphere_intersections(ray, radius)
        .map(|i| i.roots().iter().any(|&t| t >= 0.0))
        .unwrap_or(false)
}

/// Default inner-radius floor as a fraction of the outer radius.
pub const MIN_INNER_FRACTION: f64 = 1e-3;

/// Default bisection tolerance as a fraction of the outer radius.
pub const INNER_TOL_FRACTION: f64 = 1e-6;

/// Smallest `r` in `(0, outer)` such that every ray meets the sphere of radius
/// `r` on its forward half-line, found by bisection to within `tol`.
///
/// The result is clamped below at `min_radius`.
pub fn find_inner_radius_with_floor(
    rays: &[Ray],
    outer: f64,
    tol: f64,
    min_radius: f64,
) -> Result<f64> {
    if !(tol > 0.0) || !(outer > 0.0) {
        return Err(Error::Contract(
            "tolerance and outer radius must be positive".into(),
        ));
    }
    for ray in rays {
        ray.check_unit()?;
        if ray.origin.norm() < min_radius {
            return Err(Error::Contract(
                "ray origin lies inside the candidate sphere".into(),
            ));
        }
    }
    let all_hit = |r: f64| rays.iter().all(|ray| hits_forward(ray, r));
    if !all_hit(outer) {
        let needed = rays
            .iter()
            .map(forward_distance_to_center)
            .fold(0.0, f64::max);
        return Err(Error::InnerSphereEngulfs { needed, outer });
    }
    if all_hit(min_radius) {
        return Ok(min_radius);
    }
    let (mut lo, mut hi) = (min_radius, outer);
    while hi - lo >= tol {
        let mid = 0.5 * (lo + hi);
        if all_hit(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    if hi >= outer {
        return Err(Error::InnerSphereEngulfs { needed: hi, outer });
    }
    Ok(hi)
}

/// [`find_inner_radius_with_floor`] with the default floor `1e-3 R`.
pub fn find_inner_radius(rays: &[Ray], outer: f64, tol: f64) -> Result<f64> {
    find_inner_radius_with_floor(rays, outer, tol, MIN_INNER_FRACTION * outer)
}

/// The outer sphere of radius `outer` and the inscribed inner sphere of
/// radius `inner`, both centered at the origin.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SphereLayout {
    pub outer: f64,
    pub inner: f64,
}

impl SphereLayout {
    pub fn new(outer: f64, inner: f64) -> Result<Self> {
        if !(inner > 0.0 && inner < outer) {
            return Err(Error::Contract(format!(
                "need 0 < r < R, got r = {inner}, R = {outer}"
            )));
        }
        Ok(Self { outer, inner })
    }

    /// Fits the inner sphere to a camera's image corners.
    pub fn for_camera(camera: &Camera, outer: f64) -> Result<Self> {
        let r = find_inner_radius(&camera.corner_rays(), outer, INNER_TOL_FRACTION * outer)?;
        Self::new(outer, r)
    }
}

/// A layer sample coordinate: direction on the unit sphere plus a signed
/// inverse-depth channel (`+R/|x|` for background, `-r/|x|` for occlusion).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerSample4 {
    pub dir: Vec3,
    pub depth: f64,
}

impl LayerSample4 {
    pub fn to_array(self) -> [f64; 4] {
        [self.dir.x, self.dir.y, self.dir.z, self.depth]
    }
}

/// Occlusion-layer coordinate of a point on the camera side of the inner sphere.
pub fn param_occlusion(x: &Vec3, layout: &SphereLayout) -> Result<LayerSample4> {
    let n = x.norm();
    if n < layout.inner - 1e-9 {
        return Err(Error::InsideInnerSphere {
            norm: n,
            radius: layout.inner,
        });
    }
    Ok(LayerSample4 {
        dir: x / n,
        depth: -(layout.inner / n).min(1.0),
    })
}

/// Background coordinate of a point outside the outer sphere.
pub fn param_background(x: &Vec3, layout: &SphereLayout) -> Result<LayerSample4> {
    let n = x.norm();
    if n < layout.outer - 1e-9 {
        return Err(Error::InsideOuterSphere {
            norm: n,
            radius: layout.outer,
        });
    }
    Ok(LayerSample4 {
        dir: x / n,
        depth: (layout.outer / n).min(1.0),
    })
}

/// First positive `t` where the ray reaches the inner sphere.
pub fn occlusion_first_hit(ray: &Ray, layout: &SphereLayout) -> Result<f64> {
    match ray_sphere_intersections(ray, layout.inner)? {
        Intersections::None => Err(Error::NoInnerSphereHit),
        Intersections::Tangent(t) if t > 0.0 => Ok(t),
        Intersections::Two(a, _) if a > 0.0 => Ok(a),
        Intersections::Two(_, b) if b > 0.0 => Ok(b),
        _ => Err(Error::NoInnerSphereHit),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layer {
    Occlusion,
    Foreground,
    Background,
}

/// Quadrature samples along one ray for one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RaySegment {
    pub layer: Layer,
    pub t: Vec<f64>,
    pub delta: Vec<f64>,
    /// Background only: the inverse-depth value of each sample.
    pub inv_depth: Vec<f64>,
}

impl RaySegment {
    fn empty(layer: Layer) -> Self {
        Self {
            layer,
            t: Vec::new(),
            delta: Vec::new(),
            inv_depth: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleCounts {
    pub occlusion: usize,
    pub foreground: usize,
    pub background: usize,
}

/// Stratified positions; `Midpoint` places every sample at its bin center.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Jitter {
    Midpoint,
    Seeded(u64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Segments {
    pub occlusion: RaySegment,
    pub foreground: RaySegment,
    pub background: RaySegment,
    /// Set when the ray only grazes the outer sphere and the foreground is empty.
    pub foreground_degenerate: bool,
}

fn stratified(lo: f64, hi: f64, n: usize, rng: &mut Option<ChaCha8Rng>) -> Vec<f64> {
    let w = (hi - lo) / n as f64;
    (0..n)
        .map(|i| {
            let u = match rng {
                Some(r) => r.random::<f64>(),
                None => 0.5,
            };
            lo + (i as f64 + u) * w
        })
        .collect()
}

/// Spacing between consecutive samples; the last sample extends to `end`.
fn spacings(t: &[f64], end: f64) -> Vec<f64> {
    (0..t.len())
        .map(|i| {
            if i + 1 < t.len() {
                t[i + 1] - t[i]
            } else {
                (end - t[i]).max(f64::MIN_POSITIVE)
            }
        })
        .collect()
}

/// Stratified samples for the three layers of one ray.
///
/// * occlusion: uniform in `t` over `[near, first inner-sphere hit]`;
/// * foreground: uniform in `t` over the outer-sphere chord;
/// * background: uniform in inverse depth `R/|x|` over `(0, 1]`, mapped to
///   `t` beyond the outer sphere and ordered by increasing `t`.
pub fn stratified_segments(
    ray: &Ray,
    layout: &SphereLayout,
    counts: SampleCounts,
    near: f64,
    jitter: Jitter,
) -> Result<Segments> {
    if counts.occlusion == 0 || counts.foreground == 0 || counts.background == 0 {
        return Err(Error::Contract("sample counts must be at least 1".into()));
    }
    let mut rng = match jitter {
        Jitter::Midpoint => None,
        Jitter::Seeded(s) => Some(ChaCha8Rng::seed_from_u64(s)),
    };

    let t_occ_end = occlusion_first_hit(ray, layout)?;
    let near = near.min(0.5 * t_occ_end);
    let t = stratified(near, t_occ_end, counts.occlusion, &mut rng);
    let delta = spacings(&t, t_occ_end);
    let occlusion = RaySegment {
        layer: Layer::Occlusion,
        t,
        delta,
        inv_depth: Vec::new(),
    };

    let (foreground, degenerate, t_exit) = match ray_sphere_intersections(ray, layout.outer)? {
        Intersections::Two(a, b) if b > 0.0 => {
            let a = a.max(0.0);
            let t = stratified(a, b, counts.foreground, &mut rng);
            let delta = spacings(&t, b);
            (
                RaySegment {
                    layer: Layer::Foreground,
                    t,
                    delta,
                    inv_depth: Vec::new(),
                },
                false,
                b,
            )
        }
        Intersections::Tangent(t) => (RaySegment::empty(Layer::Foreground), true, t.max(0.0)),
        _ => return Err(Error::Contract("ray misses the outer sphere".into())),
    };

    // Background: u = R/|x| in (0, 1], bins visited from u = 1 downward so t increases.
    let n = counts.background;
    let mut inv_depth = Vec::with_capacity(n);
    let mut t = Vec::with_capacity(n);
    for i in 0..n {
        let j = match &mut rng {
            Some(r) => r.random::<f64>(),
            None => 0.5,
        };
        let hi = 1.0 - i as f64 / n as f64;
        let u = (hi - j / n as f64).max(1e-6);
        let dist = layout.outer / u;
        let b = ray.origin.dot(&ray.dir);
        let c = ray.origin.norm_squared() - dist * dist;
        let tt = -b + (b * b - c).max(0.0).sqrt();
        inv_depth.push(u);
        t.push(tt.max(t_exit));
    }
    let mut delta = spacings(&t, f64::INFINITY);
    if let Some(last) = delta.last_mut() {
        *last = FAR_DELTA;
    }
    let background = RaySegment {
        layer: Layer::Background,
        t,
        delta,
        inv_depth,
    };

    Ok(Segments {
        occlusion,
        foreground,
        background,
        foreground_degenerate: degenerate,
    })
}
