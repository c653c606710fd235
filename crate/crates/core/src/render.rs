//! SDF-to-density transform, per-layer quadrature, the three-layer composition
//! and the batched renderer shared by training and image synthesis.

use serde::{Deserialize, Serialize};

use crate::deform::{to_canonical, weights_from_capsules, Capsule, Pose, Skeleton};
use crate::error::{Error, Result};
use crate::fields::{
    ForegroundField, Mat, ParamStore, ParamVars, SceneField, SceneLayer, Tape, Var,
};
use crate::geometry::{
    param_background, param_occlusion, stratified_segments, Camera, Jitter, Ray, SampleCounts,
    SphereLayout, Vec3,
};
use crate::par::{self, Exec};
use crate::raster::Image;

/// `sigma = Psi_beta(-s) / beta`, the scaled Laplace CDF of the negated distance.
pub fn sdf_to_density(s: f64, beta: f64) -> f64 {
    let (a, b) = laplace_coeffs(s);
    (a + b * (-s.abs() / beta).exp()) / beta
}

/// `Psi_beta(-s) = a + b exp(-|s| / beta)`
#[inline]
fn laplace_coeffs(s: f64) -> (f64, f64) {
    if s > 0.0 {
        (0.0, 0.5)
    } else {
        (1.0, -0.5)
    }
}

/// Quadrature result for one layer of one ray. `color` is premultiplied.
#[derive(Clone, Debug, PartialEq)]
pub struct RayIntegral {
    pub color: [f64; 3],
    pub alpha: f64,
    pub transmittance: Vec<f64>,
    pub weights: Vec<f64>,
}

impl RayIntegral {
    pub fn empty() -> Self {
        Self {
            color: [0.0; 3],
            alpha: 0.0,
            transmittance: Vec::new(),
            weights: Vec::new(),
        }
    }
}

/// Alpha compositing of piecewise-constant samples along a ray.
pub fn integrate_ray(sigma: &[f64], color: &[[f64; 3]], delta: &[f64]) -> Result<RayIntegral> {
    if sigma.len() != color.len() || sigma.len() != delta.len() {
        return Err(Error::Contract(
            "sigma, color and delta lengths differ".into(),
        ));
    }
    if let Some(i) = sigma.iter().position(|s| !(*s >= 0.0)) {
        return Err(Error::Contract(format!(
            "sample {i}: density must be nonnegative"
        )));
    }
    if let Some(i) = delta.iter().position(|d| !(*d > 0.0)) {
        return Err(Error::Contract(format!(
            "sample {i}: spacing must be positive"
        )));
    }
    let mut out = RayIntegral::empty();
    let mut acc = 0.0f64;
    for i in 0..sigma.len() {
        let sd = sigma[i] * delta[i];
        let tau = (-acc).exp();
        let w = tau * (1.0 - (-sd).exp());
        acc += sd;
        out.transmittance.push(tau);
        out.weights.push(w);
        for c in 0..3 {
            out.color[c] += w * color[i][c];
        }
    }
    // Equal to the sum of the weights, but never rounds above one.
    out.alpha = 1.0 - (-acc).exp();
    Ok(out)
}

/// `C = C_occ + (1 - a_occ) C_fg + (1 - a_occ)(1 - a_fg) C_bg`
pub fn compose_values(
    c_occ: [f64; 3],
    a_occ: f64,
    c_fg: [f64; 3],
    a_fg: f64,
    c_bg: [f64; 3],
) -> [f64; 3] {
    let t_occ = 1.0 - a_occ;
    let t_both = t_occ * (1.0 - a_fg);
    std::array::from_fn(|c| c_occ[c] + t_occ * c_fg[c] + t_both * c_bg[c])
}

pub fn compose(occ: &RayIntegral, fg: &RayIntegral, bg: &RayIntegral) -> [f64; 3] {
    compose_values(occ.color, occ.alpha, fg.color, fg.alpha, bg.color)
}

/// Foreground over background, with no occlusion layer.
pub fn compose_two(fg: &RayIntegral, bg: &RayIntegral) -> [f64; 3] {
    let t = 1.0 - fg.alpha;
    std::array::from_fn(|c| fg.color[c] + t * bg.color[c])
}

/// Total opacity of the three-layer stack.
pub fn composed_alpha(a_occ: f64, a_fg: f64, a_bg: f64) -> f64 {
    a_occ + (1.0 - a_occ) * a_fg + (1.0 - a_occ) * (1.0 - a_fg) * a_bg
}

/// How rays are split between the layers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerMode {
    #[default]
    Full,
    /// Drops the occlusion layer; composition reduces to foreground over background.
    NoOcclusionLayer,
    /// No occlusion parameterization: the occlusion sample budget moves to the
    /// foreground chord and composition is two-layer.
    NoParam,
}

impl LayerMode {
    pub fn has_occlusion(self) -> bool {
        self == LayerMode::Full
    }
}

/// Observation-to-canonical mapping for one frame.
#[derive(Clone, Debug)]
pub struct Deformer {
    pub skeleton: Skeleton,
    pub pose: Pose,
    posed: Vec<Capsule>,
    rest: Vec<Capsule>,
    inverses: Vec<nalgebra::Matrix4<f64>>,
}

impl Deformer {
    pub fn new(skeleton: &Skeleton, pose: &Pose) -> Result<Self> {
        skeleton.validate()?;
        pose.validate(skeleton)?;
        let inverses = pose
            .0
            .iter()
            .map(|b| {
                b.matrix()
                    .try_inverse()
                    .ok_or_else(|| Error::Contract("bone transform not invertible".into()))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            skeleton: skeleton.clone(),
            pose: pose.clone(),
            posed: skeleton.posed_capsules(pose),
            rest: skeleton.rest_capsules(),
            inverses,
        })
    }

    /// Backward skinning; a near-singular blend falls back to the dominant bone.
    pub fn canonical(&self, x_o: &Vec3) -> Vec3 {
        match to_canonical(x_o, &self.skeleton, &self.pose, &self.posed) {
            Ok(x) => x,
            Err(_) => {
                let w = weights_from_capsules(x_o, &self.posed, self.skeleton.temperature);
                let k = (0..w.0.len())
                    .max_by(|&a, &b| w.0[a].total_cmp(&w.0[b]))
                    .unwrap_or(0);
                let v = self.inverses[k] * nalgebra::Vector4::new(x_o.x, x_o.y, x_o.z, 1.0);
                Vec3::new(v.x, v.y, v.z)
            }
        }
    }

    /// Distance to the rest-pose capsule body.
    pub fn rest_sdf(&self, x_c: &Vec3) -> f64 {
        Skeleton::union_sdf(&self.rest, x_c)
    }
}

/// Occlusion or background samples for a batch: `k` per ray.
#[derive(Clone, Debug)]
pub struct SceneSamples {
    pub per_ray: usize,
    /// `N*k x 4` layer coordinates.
    pub coords: Mat,
    /// `N*k x 3` ray directions.
    pub dirs: Mat,
    /// `N x k`
    pub delta: Mat,
}

impl SceneSamples {
    fn empty(n: usize) -> Self {
        Self {
            per_ray: 0,
            coords: Mat::zeros(0, 4),
            dirs: Mat::zeros(0, 3),
            delta: Mat::zeros(n, 0),
        }
    }
}

/// Foreground samples for a batch, already mapped to canonical space.
#[derive(Clone, Debug)]
pub struct BodySamples {
    pub per_ray: usize,
    /// `N*k x 3`
    pub points: Mat,
    /// `N x k`; zero on rays that only graze the outer sphere.
    pub delta: Mat,
    /// Rows of `points` within the completeness band of the body proxy.
    pub near: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct SampleBatch {
    pub frame: usize,
    pub n_rays: usize,
    pub mode: LayerMode,
    pub occ: SceneSamples,
    pub fg: BodySamples,
    pub bg: SceneSamples,
}

/// Sampling parameters for building a batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub counts: SampleCounts,
    pub near: f64,
    /// Distance from the body proxy under which a canonical sample joins the completeness set.
    pub near_band: f64,
}

impl SamplingConfig {
    pub fn new(counts: SampleCounts) -> Self {
        Self {
            counts,
            near: crate::geometry::DEFAULT_NEAR,
            near_band: 0.05,
        }
    }
}

fn ray_jitter(jitter: Jitter, i: usize) -> Jitter {
    match jitter {
        Jitter::Midpoint => Jitter::Midpoint,
        Jitter::Seeded(s) => Jitter::Seeded(s ^ (i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
    }
}

pub fn build_samples(
    rays: &[Ray],
    frame: usize,
    layout: &SphereLayout,
    deform: Option<&Deformer>,
    sampling: &SamplingConfig,
    mode: LayerMode,
    jitter: Jitter,
) -> Result<SampleBatch> {
    let n = rays.len();
    let c = sampling.counts;
    let counts = match mode {
        LayerMode::NoParam => SampleCounts {
            occlusion: 1,
            foreground: c.occlusion + c.foreground,
            background: c.background,
        },
        _ => c,
    };
    let k_occ = if mode.has_occlusion() {
        counts.occlusion
    } else {
        0
    };
    let (k_fg, k_bg) = (counts.foreground, counts.background);
    let mut occ = SceneSamples {
        per_ray: k_occ,
        coords: Mat::zeros(n * k_occ, 4),
        dirs: Mat::zeros(n * k_occ, 3),
        delta: Mat::zeros(n, k_occ),
    };
    if k_occ == 0 {
        occ = SceneSamples::empty(n);
    }
    let mut bg = SceneSamples {
        per_ray: k_bg,
        coords: Mat::zeros(n * k_bg, 4),
        dirs: Mat::zeros(n * k_bg, 3),
        delta: Mat::zeros(n, k_bg),
    };
    let mut fg = BodySamples {
        per_ray: k_fg,
        points: Mat::zeros(n * k_fg, 3),
        delta: Mat::zeros(n, k_fg),
        near: Vec::new(),
    };

    for (i, ray) in rays.iter().enumerate() {
        let seg = stratified_segments(ray, layout, counts, sampling.near, ray_jitter(jitter, i))?;
        let d = [ray.dir.x, ray.dir.y, ray.dir.z];
        for j in 0..k_occ {
            let row = i * k_occ + j;
            let s = param_occlusion(&ray.at(seg.occlusion.t[j]), layout)?.to_array();
            occ.coords.data[row * 4..row * 4 + 4].copy_from_slice(&s);
            occ.dirs.data[row * 3..row * 3 + 3].copy_from_slice(&d);
            occ.delta.data[i * k_occ + j] = seg.occlusion.delta[j];
        }
        for j in 0..k_bg {
            let row = i * k_bg + j;
            let s = param_background(&ray.at(seg.background.t[j]), layout)?.to_array();
            bg.coords.data[row * 4..row * 4 + 4].copy_from_slice(&s);
            bg.dirs.data[row * 3..row * 3 + 3].copy_from_slice(&d);
            bg.delta.data[i * k_bg + j] = seg.background.delta[j];
        }
        for j in 0..k_fg {
            let row = i * k_fg + j;
            // A grazing ray keeps placeholder points with zero spacing.
            let (t, delta) = if seg.foreground_degenerate {
                (seg.background.t.first().copied().unwrap_or(0.0), 0.0)
            } else {
                (seg.foreground.t[j], seg.foreground.delta[j])
            };
            let x_o = ray.at(t);
            let x_c = match deform {
                Some(df) => df.canonical(&x_o),
                None => x_o,
            };
            fg.points.data[row * 3..row * 3 + 3].copy_from_slice(&[x_c.x, x_c.y, x_c.z]);
            fg.delta.data[i * k_fg + j] = delta;
            if let Some(df) = deform {
                if delta > 0.0 && df.rest_sdf(&x_c).abs() <= sampling.near_band {
                    fg.near.push(row);
                }
            }
        }
    }
    Ok(SampleBatch {
        frame,
        n_rays: n,
        mode,
        occ,
        fg,
        bg,
    })
}

/// Tape nodes for one layer of a traced batch.
#[derive(Clone, Copy, Debug)]
pub struct LayerTrace {
    /// `N x 3`, premultiplied
    pub color: Var,
    /// `N x 1`
    pub alpha: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct Traced {
    /// `N x 3`, the image-formation output for the batch's mode.
    pub composed: Var,
    /// `N x 3`, foreground over background with the occlusion layer removed.
    pub fg_only: Var,
    pub occ: LayerTrace,
    pub fg: LayerTrace,
    pub bg: LayerTrace,
    /// Input node holding the canonical foreground samples (`N*k x 3`).
    pub points: Var,
    /// `N*k x 1` signed distances at `points`.
    pub sdf: Var,
}

/// Quadrature on the tape: `sigma` is `N*k x 1`, `color` `N*k x 3`, `delta` `N x k`.
pub fn integrate_tape(tape: &mut Tape, sigma: Var, color: Var, delta: &Mat) -> LayerTrace {
    let (n, k) = delta.shape();
    if k == 0 {
        return empty_layer(tape, n);
    }
    let sig = tape.reshape(sigma, n, k);
    let d = tape.constant(delta.clone());
    let sd = tape.mul(sig, d);
    let acc = tape.cumsum_cols(sd, false);
    let nacc = tape.neg(acc);
    let tau = tape.exp(nacc);
    let nsd = tape.neg(sd);
    let e = tape.exp(nsd);
    let a = tape.rsub_scalar(1.0, e);
    let w = tape.mul(tau, a);
    let total = tape.sum_cols(sd);
    let ntotal = tape.neg(total);
    let survive = tape.exp(ntotal);
    let alpha = tape.rsub_scalar(1.0, survive);
    let wcol = tape.reshape(w, n * k, 1);
    let wb = tape.broadcast_cols(wcol, 3);
    let wc = tape.mul(wb, color);
    let wide = tape.reshape(wc, n, 3 * k);
    let mut sel = Mat::zeros(3 * k, 3);
    for j in 0..k {
        for c in 0..3 {
            sel.set(3 * j + c, c, 1.0);
        }
    }
    let sel = tape.constant(sel);
    let color = tape.matmul(wide, sel);
    LayerTrace { color, alpha }
}

fn empty_layer(tape: &mut Tape, n: usize) -> LayerTrace {
    let color = tape.constant(Mat::zeros(n, 3));
    let alpha = tape.constant(Mat::zeros(n, 1));
    LayerTrace { color, alpha }
}

/// Laplace density on the tape; `beta` is `1 x 1`.
pub fn density_tape(tape: &mut Tape, sdf: Var, beta: Var) -> Var {
    let s = tape.value(sdf);
    let (rows, cols) = s.shape();
    let mut a = Mat::zeros(rows, cols);
    let mut b = Mat::zeros(rows, cols);
    for (i, &v) in s.data.iter().enumerate() {
        let (ai, bi) = laplace_coeffs(v);
        a.data[i] = ai;
        b.data[i] = bi;
    }
    let beta_b = tape.broadcast_scalar(beta, rows, cols);
    let abs = tape.abs(sdf);
    let ratio = tape.div(abs, beta_b);
    let neg = tape.neg(ratio);
    let e = tape.exp(neg);
    let b = tape.constant(b);
    let be = tape.mul(e, b);
    let a = tape.constant(a);
    let psi = tape.add(a, be);
    tape.div(psi, beta_b)
}

/// `C_occ + (1 - a_occ) C_fg + (1 - a_occ)(1 - a_fg) C_bg` on the tape.
pub fn compose_tape(tape: &mut Tape, occ: LayerTrace, fg: LayerTrace, bg: LayerTrace) -> Var {
    let t_occ = tape.rsub_scalar(1.0, occ.alpha);
    let t_fg = tape.rsub_scalar(1.0, fg.alpha);
    let t_both = tape.mul(t_occ, t_fg);
    let t_occ3 = tape.broadcast_cols(t_occ, 3);
    let t_both3 = tape.broadcast_cols(t_both, 3);
    let f = tape.mul(t_occ3, fg.color);
    let b = tape.mul(t_both3, bg.color);
    let of = tape.add(occ.color, f);
    tape.add(of, b)
}

/// `C_fg + (1 - a_fg) C_bg` on the tape.
pub fn compose_two_tape(tape: &mut Tape, fg: LayerTrace, bg: LayerTrace) -> Var {
    let t_fg = tape.rsub_scalar(1.0, fg.alpha);
    let t3 = tape.broadcast_cols(t_fg, 3);
    let b = tape.mul(t3, bg.color);
    tape.add(fg.color, b)
}

fn trace_scene(
    tape: &mut Tape,
    pv: &ParamVars,
    scene: &dyn SceneField,
    layer: SceneLayer,
    frame: usize,
    s: &SceneSamples,
) -> Result<LayerTrace> {
    if s.per_ray == 0 {
        return Ok(empty_layer(tape, s.delta.rows));
    }
    let coords = tape.constant(s.coords.clone());
    let dirs = tape.constant(s.dirs.clone());
    let e = scene.eval(tape, pv, layer, frame, coords, dirs)?;
    Ok(integrate_tape(tape, e.sigma, e.color, &s.delta))
}

/// Evaluates every layer of a batch and composes it on `tape`.
pub fn trace(
    tape: &mut Tape,
    pv: &ParamVars,
    fg: &dyn ForegroundField,
    scene: &dyn SceneField,
    batch: &SampleBatch,
) -> Result<Traced> {
    let occ = trace_scene(
        tape,
        pv,
        scene,
        SceneLayer::Occlusion,
        batch.frame,
        &batch.occ,
    )?;
    let bg = trace_scene(
        tape,
        pv,
        scene,
        SceneLayer::Background,
        batch.frame,
        &batch.bg,
    )?;
    let points = tape.input(batch.fg.points.clone());
    let e = fg.eval(tape, pv, points);
    let beta = fg.beta(tape, pv);
    let sigma = density_tape(tape, e.sdf, beta);
    let fgt = integrate_tape(tape, sigma, e.color, &batch.fg.delta);
    let fg_only = compose_two_tape(tape, fgt, bg);
    let composed = if batch.mode.has_occlusion() {
        compose_tape(tape, occ, fgt, bg)
    } else {
        fg_only
    };
    Ok(Traced {
        composed,
        fg_only,
        occ,
        fg: fgt,
        bg,
        points,
        sdf: e.sdf,
    })
}

/// Renderer settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderConfig {
    pub sampling: SamplingConfig,
    pub mode: LayerMode,
    /// Pixels per independent tape.
    pub tile: usize,
    pub exec: Exec,
}

impl RenderConfig {
    pub fn new(counts: SampleCounts) -> Self {
        Self {
            sampling: SamplingConfig::new(counts),
            mode: LayerMode::Full,
            tile: 256,
            exec: Exec::default(),
        }
    }
}

/// A rendered frame and its per-layer decomposition.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub composed: Image,
    /// Foreground over background, occlusion layer removed.
    pub fg_only: Image,
    pub occ: Image,
    pub fg: Image,
    pub bg: Image,
    pub alpha_occ: Image,
    pub alpha_fg: Image,
    pub alpha_bg: Image,
}

struct TileResult {
    start: usize,
    rows: [Vec<f64>; 8],
}

pub fn render_image(
    camera: &Camera,
    frame: usize,
    fg: &dyn ForegroundField,
    scene: &dyn SceneField,
    store: &ParamStore,
    layout: &SphereLayout,
    deform: Option<&Deformer>,
    cfg: &RenderConfig,
) -> Result<RenderOutput> {
    camera.validate()?;
    let (w, h) = (camera.width, camera.height);
    let total = w * h;
    let tile = cfg.tile.max(1);
    let n_tiles = total.div_ceil(tile);
    let tiles = par::map_range(cfg.exec, n_tiles, |t| -> Result<TileResult> {
        let start = t * tile;
        let end = (start + tile).min(total);
        let rays = (start..end)
            .map(|i| camera.pixel_ray(i % w, i / w))
            .collect::<Result<Vec<_>>>()?;
        let batch = build_samples(
            &rays,
            frame,
            layout,
            deform,
            &cfg.sampling,
            cfg.mode,
            Jitter::Midpoint,
        )?;
        let mut tape = Tape::new();
        let pv = store.bind(&mut tape);
        let tr = trace(&mut tape, &pv, fg, scene, &batch)?;
        let grab = |v: Var| tape.value(v).data.clone();
        Ok(TileResult {
            start,
            rows: [
                grab(tr.composed),
                grab(tr.fg_only),
                grab(tr.occ.color),
                grab(tr.fg.color),
                grab(tr.bg.color),
                grab(tr.occ.alpha),
                grab(tr.fg.alpha),
                grab(tr.bg.alpha),
            ],
        })
    });
    let mut imgs: Vec<Image> = (0..8)
        .map(|k| Image::new(w, h, if k < 5 { 3 } else { 1 }))
        .collect();
    for t in tiles {
        let t = t?;
        for (img, src) in imgs.iter_mut().zip(&t.rows) {
            let ch = img.channels;
            img.data[t.start * ch..t.start * ch + src.len()].copy_from_slice(src);
        }
    }
    let mut it = imgs.into_iter();
    let mut next = || it.next().expect("eight images");
    Ok(RenderOutput {
        composed: next(),
        fg_only: next(),
        occ: next(),
        fg: next(),
        bg: next(),
        alpha_occ: next(),
        alpha_fg: next(),
        alpha_bg: next(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{AnalyticSphere, EmptyScene, FieldSet, NetworkSpec};
    use crate::geometry::ray_sphere_intersections;
    use proptest::prelude::*;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn laplace_density_limits() {
        let beta = 0.1;
        assert_eq!(sdf_to_density(0.0, beta), 1.0 / (2.0 * beta));
        assert!(sdf_to_density(50.0, beta) < 1e-200);
        assert!((sdf_to_density(-50.0, beta) - 1.0 / beta).abs() < 1e-12);
        // Continuous across the surface.
        assert!((sdf_to_density(1e-12, beta) - sdf_to_density(-1e-12, beta)).abs() < 1e-9);
    }

    #[test]
    fn quadrature_examples() {
        let v = integrate_ray(&[0.0; 3], &[[1.0, 1.0, 1.0]; 3], &[0.5; 3]).unwrap();
        assert_eq!((v.color, v.alpha), ([0.0; 3], 0.0));
        assert!(v.transmittance.iter().all(|&t| t == 1.0));

        let v = integrate_ray(&[1e6], &[[0.2, 0.4, 0.6]], &[1.0]).unwrap();
        assert_eq!((v.color, v.alpha), ([0.2, 0.4, 0.6], 1.0));

        let v = integrate_ray(
            &[LN2, LN2],
            &[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            &[1.0, 1.0],
        )
        .unwrap();
        assert!(
            (v.color[0] - 0.5).abs() < 1e-15
                && (v.color[1] - 0.25).abs() < 1e-15
                && v.color[2] == 0.0
        );
        assert!((v.alpha - 0.75).abs() < 1e-15);

        let e = integrate_ray(&[], &[], &[]).unwrap();
        assert_eq!(e, RayIntegral::empty());
        assert!(integrate_ray(&[-1.0], &[[0.0; 3]], &[1.0]).is_err());
        assert!(integrate_ray(&[1.0], &[[0.0; 3]], &[0.0]).is_err());
    }

    #[test]
    fn composition_examples() {
        assert_eq!(
            compose_values([0.125, 0.25, 0.5], 0.0, [0.0; 3], 0.0, [0.25, 0.5, 0.25]),
            [0.375, 0.75, 0.75]
        );
        assert_eq!(
            compose_values([0.0; 3], 0.0, [0.0; 3], 0.0, [0.3, 0.6, 0.9]),
            [0.3, 0.6, 0.9]
        );
        assert_eq!(
            compose_values([0.2, 0.3, 0.4], 1.0, [1.0; 3], 0.7, [1.0; 3]),
            [0.2, 0.3, 0.4]
        );
        assert_eq!(
            compose_values([0.5, 0.0, 0.0], 0.5, [0.0, 0.5, 0.0], 0.5, [0.0, 0.0, 1.0]),
            [0.5, 0.25, 0.25]
        );
        assert_eq!(composed_alpha(0.5, 0.5, 1.0), 1.0);
    }

    /// Fine midpoint-rule integration of the continuous integral for a density
    /// and color that are functions of `t` on `[a, b]`.
    fn fine_integral(
        sigma: impl Fn(f64) -> f64,
        color: impl Fn(f64) -> [f64; 3],
        a: f64,
        b: f64,
        steps: usize,
    ) -> ([f64; 3], f64) {
        let h = (b - a) / steps as f64;
        let mut optical = 0.0;
        let mut out = [0.0; 3];
        let mut alpha = 0.0;
        for i in 0..steps {
            let t = a + (i as f64 + 0.5) * h;
            let s = sigma(t);
            let c = color(t);
            // Transmittance at the step midpoint times the local density.
            let w = (-(optical + 0.5 * s * h)).exp() * s * h;
            alpha += w;
            for k in 0..3 {
                out[k] += w * c[k];
            }
            optical += s * h;
        }
        (out, alpha)
    }

    #[test]
    fn piecewise_constant_media_match_fine_integration() {
        let sigma = |t: f64| {
            if (1.0..1.5).contains(&t) {
                0.8
            } else if (2.0..2.25).contains(&t) {
                6.0
            } else {
                0.0
            }
        };
        let color = |t: f64| {
            if t < 1.75 {
                [0.9, 0.1, 0.2]
            } else {
                [0.1, 0.7, 0.3]
            }
        };
        let (a, b) = (0.0, 4.0);
        let (oracle, oracle_alpha) = fine_integral(sigma, color, a, b, 10_000);
        let mut errs = Vec::new();
        for n in [24, 96, 512] {
            let w = (b - a) / n as f64;
            let t: Vec<f64> = (0..n).map(|i| a + (i as f64 + 0.5) * w).collect();
            let s: Vec<f64> = t.iter().map(|&t| sigma(t)).collect();
            let c: Vec<[f64; 3]> = t.iter().map(|&t| color(t)).collect();
            let v = integrate_ray(&s, &c, &vec![w; n]).unwrap();
            let err = (0..3)
                .map(|k| (v.color[k] - oracle[k]).abs())
                .fold((v.alpha - oracle_alpha).abs(), f64::max);
            errs.push(err);
        }
        assert!(errs[2] < 1e-3, "{errs:?}");
        assert!(errs[2] < errs[0]);
    }

    #[test]
    fn tape_quadrature_matches_plain() {
        let sigma = [0.0, 0.3, 2.0, 0.7, 5.0, 0.0];
        let colors = [
            [0.1, 0.2, 0.3],
            [0.9, 0.1, 0.4],
            [0.3, 0.3, 0.3],
            [1.0, 0.0, 0.5],
            [0.2, 0.8, 0.6],
            [0.4, 0.4, 0.1],
        ];
        let delta = [0.2, 0.1, 0.3, 0.25, 0.05, 1e10];
        let mut tape = Tape::new();
        // Two rays of three samples each.
        let s = tape.constant(Mat::from_vec(6, 1, sigma.to_vec()));
        let c = tape.constant(Mat::from_rows(&colors));
        let lt = integrate_tape(&mut tape, s, c, &Mat::from_vec(2, 3, delta.to_vec()));
        for r in 0..2 {
            let p = integrate_ray(
                &sigma[3 * r..3 * r + 3],
                &colors[3 * r..3 * r + 3],
                &delta[3 * r..3 * r + 3],
            )
            .unwrap();
            assert!((tape.value(lt.alpha).get(r, 0) - p.alpha).abs() < 1e-15);
            for k in 0..3 {
                assert!((tape.value(lt.color).get(r, k) - p.color[k]).abs() < 1e-15);
            }
        }
        let s = tape.constant(Mat::from_rows(&[[-0.3], [0.0], [0.2]]));
        let b = tape.constant(Mat::scalar(0.1));
        let d = density_tape(&mut tape, s, b);
        for (i, v) in [-0.3, 0.0, 0.2].iter().enumerate() {
            assert_eq!(tape.value(d).data[i], sdf_to_density(*v, 0.1));
        }
    }

    #[test]
    fn zero_occlusion_composition_is_exactly_two_layer() {
        let mut tape = Tape::new();
        let fg = LayerTrace {
            color: tape.constant(Mat::from_rows(&[[0.3, 0.1, 0.25], [0.0, 0.7, 0.123456789]])),
            alpha: tape.constant(Mat::from_rows(&[[0.37], [0.91]])),
        };
        let bg = LayerTrace {
            color: tape.constant(Mat::from_rows(&[[0.6, 0.2, 0.1], [0.333, 0.1, 0.9]])),
            alpha: tape.constant(Mat::from_rows(&[[1.0], [1.0]])),
        };
        let occ = empty_layer(&mut tape, 2);
        let three = compose_tape(&mut tape, occ, fg, bg);
        let two = compose_two_tape(&mut tape, fg, bg);
        assert_eq!(tape.value(three).data, tape.value(two).data);
    }

    fn sphere_camera() -> Camera {
        Camera::look_at(
            Vec3::new(0.0, 0.0, -5.0),
            Vec3::zeros(),
            Vec3::y(),
            40.0,
            16,
            16,
        )
    }

    #[test]
    fn sphere_silhouette_matches_dense_march() {
        let cam = sphere_camera();
        let layout = SphereLayout::for_camera(&cam, 2.0).unwrap();
        let sphere = AnalyticSphere {
            radius: 0.5,
            color: [0.9, 0.6, 0.3],
            beta: 0.05,
        };
        let mut cfg = RenderConfig::new(SampleCounts {
            occlusion: 4,
            foreground: 512,
            background: 4,
        });
        cfg.tile = 64;
        let store = ParamStore::default();
        let out = render_image(&cam, 0, &sphere, &EmptyScene, &store, &layout, None, &cfg).unwrap();
        let mut max_dev: f64 = 0.0;
        for y in 0..16 {
            for x in 0..16 {
                let ray = cam.pixel_ray(x, y).unwrap();
                let (a, b) = match ray_sphere_intersections(&ray, 2.0).unwrap() {
                    crate::geometry::Intersections::Two(a, b) => (a, b),
                    _ => unreachable!(),
                };
                let sig = |t: f64| sdf_to_density(ray.at(t).norm() - 0.5, 0.05);
                let (c, _) = fine_integral(sig, |_| sphere.color, a, b, 20_000);
                for k in 0..3 {
                    max_dev = max_dev.max((out.composed.get(x, y, k) - c[k]).abs());
                }
            }
        }
        assert!(max_dev < 1e-3, "max deviation {max_dev}");
        assert!(out.composed.get(8, 8, 0) > 0.85 && out.composed.get(0, 0, 0) < 1e-6);
        assert_eq!(out.composed, out.fg_only);
        for a in [&out.alpha_occ, &out.alpha_fg, &out.alpha_bg] {
            assert!(a.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn tiling_and_execution_policy_do_not_change_pixels() {
        let cam = sphere_camera();
        let layout = SphereLayout::for_camera(&cam, 2.0).unwrap();
        let f = FieldSet::new(NetworkSpec::desk(), 1, 4).unwrap();
        let mut cfg = RenderConfig::new(SampleCounts {
            occlusion: 4,
            foreground: 8,
            background: 4,
        });
        cfg.tile = 16;
        cfg.exec = Exec::Sequential;
        let a = render_image(&cam, 0, &f, &f, &f.store, &layout, None, &cfg).unwrap();
        cfg.exec = Exec::Parallel;
        let b = render_image(&cam, 0, &f, &f, &f.store, &layout, None, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            render_image(&cam, 1, &f, &f, &f.store, &layout, None, &cfg),
            Err(Error::MissingLatent(1))
        ));
    }

    #[test]
    fn occlusion_free_mode_equals_two_layer_render() {
        let cam = sphere_camera();
        let layout = SphereLayout::for_camera(&cam, 2.0).unwrap();
        let f = FieldSet::new(NetworkSpec::desk(), 1, 9).unwrap();
        let mut cfg = RenderConfig::new(SampleCounts {
            occlusion: 4,
            foreground: 8,
            background: 4,
        });
        let full = render_image(&cam, 0, &f, &f, &f.store, &layout, None, &cfg).unwrap();
        cfg.mode = LayerMode::NoOcclusionLayer;
        let two = render_image(&cam, 0, &f, &f, &f.store, &layout, None, &cfg).unwrap();
        assert_eq!(two.composed, full.fg_only);
        assert!(two.alpha_occ.data.iter().all(|&a| a == 0.0));
    }

    #[test]
    fn no_param_mode_moves_occlusion_budget_to_foreground() {
        let cam = sphere_camera();
        let layout = SphereLayout::for_camera(&cam, 2.0).unwrap();
        let rays = vec![cam.pixel_ray(3, 4).unwrap()];
        let s = SamplingConfig::new(SampleCounts {
            occlusion: 5,
            foreground: 7,
            background: 3,
        });
        let b = build_samples(
            &rays,
            0,
            &layout,
            None,
            &s,
            LayerMode::NoParam,
            Jitter::Midpoint,
        )
        .unwrap();
        assert_eq!((b.occ.per_ray, b.fg.per_ray, b.bg.per_ray), (0, 12, 3));
        let b = build_samples(
            &rays,
            0,
            &layout,
            None,
            &s,
            LayerMode::Full,
            Jitter::Seeded(3),
        )
        .unwrap();
        assert_eq!((b.occ.per_ray, b.fg.per_ray, b.bg.per_ray), (5, 7, 3));
        assert!(b.occ.coords.data.chunks(4).all(|c| c[3] < 0.0));
        assert!(b.bg.coords.data.chunks(4).all(|c| c[3] > 0.0));
    }

    proptest! {
        #[test]
        fn inserting_vacuum_changes_nothing(
            sig in prop::collection::vec(0.0..5.0f64, 1..12),
            at in 0usize..12, d in 0.01..1.0f64,
        ) {
            let n = sig.len();
            let colors: Vec<[f64; 3]> = (0..n).map(|i| [i as f64 / n as f64, 0.5, 1.0 - i as f64 / n as f64]).collect();
            let delta: Vec<f64> = (0..n).map(|i| 0.1 + 0.05 * i as f64).collect();
            let base = integrate_ray(&sig, &colors, &delta).unwrap();
            let k = at.min(n);
            let (mut s2, mut c2, mut d2) = (sig.clone(), colors.clone(), delta.clone());
            s2.insert(k, 0.0);
            c2.insert(k, [0.3, 0.9, 0.1]);
            d2.insert(k, d);
            let more = integrate_ray(&s2, &c2, &d2).unwrap();
            prop_assert!((base.alpha - more.alpha).abs() < 1e-12);
            for c in 0..3 {
                prop_assert!((base.color[c] - more.color[c]).abs() < 1e-12);
            }
        }

        #[test]
        fn transmittance_is_monotone_and_weights_sum_to_alpha(
            sig in prop::collection::vec(0.0..50.0f64, 0..40),
        ) {
            let n = sig.len();
            let v = integrate_ray(&sig, &vec![[0.5; 3]; n], &vec![0.07; n]).unwrap();
            prop_assert!(v.transmittance.windows(2).all(|w| w[1] <= w[0]));
            prop_assert!((v.weights.iter().sum::<f64>() - v.alpha).abs() < 1e-9);
            prop_assert!((0.0..=1.0).contains(&v.alpha));
        }

        #[test]
        fn composed_opacity_stays_in_unit_interval(a in 0.0..=1.0f64, b in 0.0..=1.0f64, c in 0.0..=1.0f64) {
            let t = composed_alpha(a, b, c);
            prop_assert!((0.0..=1.0 + 1e-15).contains(&t));
        }
    }
}
