//! The foreground SDF field and the shared occlusion/background scene field.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

use super::encoding::PositionalEncoding;
use super::mat::Mat;
use super::params::{ParamStore, ParamVars};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::Vec3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Softplus { beta: f64 },
}

/// Shape of a fully connected network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
    /// Hidden layer that also receives the network input (concatenated, scaled by 1/sqrt 2).
    pub skip: Option<usize>,
}

impl MlpSpec {
    /// `(in, out)` of every linear layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let n = self.hidden.len() + 1;
        let mut dims = Vec::with_capacity(n);
        let mut prev = self.input_dim;
        for l in 0..n {
            let in_dim = if Some(l) == self.skip {
                prev + self.input_dim
            } else {
                prev
            };
            let out_dim = if l == n - 1 {
                self.output_dim
            } else if Some(l + 1) == self.skip {
                self.hidden[l] - self.input_dim
            } else {
                self.hidden[l]
            };
            dims.push((in_dim, out_dim));
            prev = out_dim;
        }
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| (i + 1) * o).sum()
    }

    fn validate(&self, what: &str) -> Result<()> {
        if self.hidden.iter().any(|&w| w == 0) || self.output_dim == 0 {
            return Err(Error::InvalidConfig(format!(
                "{what}: layer widths must be positive"
            )));
        }
        if let Some(s) = self.skip {
            if s == 0 || s >= self.hidden.len() {
                return Err(Error::InvalidConfig(format!(
                    "{what}: skip layer {s} out of range"
                )));
            }
            if self.hidden[s - 1] <= self.input_dim {
                return Err(Error::InvalidConfig(format!(
                    "{what}: hidden width {} must exceed input width {} to host the skip",
                    self.hidden[s - 1],
                    self.input_dim
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
enum Init {
    /// `U(-1/sqrt(in), 1/sqrt(in))` for weights and biases.
    Uniform,
    /// SDF initialization whose zero level set is a sphere of `radius`.
    Geometric { radius: f64, raw_input: usize },
}

#[derive(Clone, Debug)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub spec: MlpSpec,
    layers: Vec<Linear>,
}

impl Mlp {
    fn build(
        store: &mut ParamStore,
        prefix: &str,
        spec: MlpSpec,
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        spec.validate(prefix)?;
        let dims = spec.layer_dims();
        let n = dims.len();
        let mut layers = Vec::with_capacity(n);
        for (l, &(in_dim, out_dim)) in dims.iter().enumerate() {
            let mut w = Mat::zeros(in_dim, out_dim);
            let mut b = Mat::zeros(1, out_dim);
            match init {
                Init::Uniform => {
                    let k = 1.0 / (in_dim as f64).sqrt();
                    let u = Uniform::new_inclusive(-k, k).expect("valid range");
                    w.data.iter_mut().for_each(|v| *v = u.sample(rng));
                    b.data.iter_mut().for_each(|v| *v = u.sample(rng));
                }
                Init::Geometric { radius, raw_input } => {
                    if l == n - 1 {
                        let mean = std::f64::consts::PI.sqrt() / (in_dim as f64).sqrt();
                        let d = Normal::new(mean, 1e-4).expect("valid normal");
                        w.data.iter_mut().for_each(|v| *v = d.sample(rng));
                        b.data.iter_mut().for_each(|v| *v = -radius);
                    } else {
                        let d = Normal::new(0.0, 2f64.sqrt() / (out_dim as f64).sqrt())
                            .expect("valid normal");
                        w.data.iter_mut().for_each(|v| *v = d.sample(rng));
                        if l == 0 {
                            // Only the raw coordinates feed the first layer.
                            w.data[raw_input * out_dim..]
                                .iter_mut()
                                .for_each(|v| *v = 0.0);
                        } else if Some(l) == spec.skip {
                            // The re-injected encoding, except its raw coordinates, starts silent.
                            let start = (in_dim - spec.input_dim + raw_input) * out_dim;
                            w.data[start..].iter_mut().for_each(|v| *v = 0.0);
                        }
                    }
                }
            }
            let w = store.add(format!("{prefix}.{l}.weight"), w);
            let b = store.add(format!("{prefix}.{l}.bias"), b);
            layers.push(Linear { w, b });
        }
        Ok(Self { spec, layers })
    }

    /// Output before any terminal activation.
    pub fn forward(&self, tape: &mut Tape, pv: &ParamVars, input: Var) -> Var {
        let h = self.penultimate(tape, pv, input);
        let last = self.layers.last().expect("at least one layer");
        tape.affine(h, pv.get(last.w), pv.get(last.b))
    }

    /// Activations feeding the last linear layer.
    pub fn penultimate(&self, tape: &mut Tape, pv: &ParamVars, input: Var) -> Var {
        let n = self.layers.len();
        let mut h = input;
        for (l, lin) in self.layers[..n - 1].iter().enumerate() {
            if Some(l) == self.spec.skip {
                let cat = tape.concat(&[h, input]);
                h = tape.scale(cat, std::f64::consts::FRAC_1_SQRT_2);
            }
            h = tape.affine(h, pv.get(lin.w), pv.get(lin.b));
            h = match self.spec.activation {
                Activation::Relu => tape.relu(h),
                Activation::Softplus { beta } => tape.softplus(h, beta),
            };
        }
        h
    }

    /// Parameter group ids of the last linear layer `(weight, bias)`.
    pub fn last_layer(&self) -> (usize, usize) {
        let l = self.layers.last().expect("at least one layer");
        (l.w, l.b)
    }
}

/// Sizes and initialization constants of both fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkSpec {
    pub fg_sdf_width: usize,
    pub fg_sdf_layers: usize,
    pub fg_skip_layer: Option<usize>,
    pub fg_feature_dim: usize,
    pub fg_color_width: usize,
    pub fg_color_layers: usize,
    pub scene_width: usize,
    pub scene_layers: usize,
    pub scene_skip_layer: Option<usize>,
    pub scene_feature_dim: usize,
    pub scene_color_width: usize,
    pub scene_color_layers: usize,
    pub latent_dim: usize,
    pub position_octaves: usize,
    pub direction_octaves: usize,
    pub sdf_softplus_beta: f64,
    pub init_sphere_radius: f64,
    pub beta_init: f64,
    pub beta_floor: f64,
    pub scene_density_bias: f64,
    pub latent_init_std: f64,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self {
            fg_sdf_width: 256,
            fg_sdf_layers: 8,
            fg_skip_layer: Some(4),
            fg_feature_dim: 256,
            fg_color_width: 256,
            fg_color_layers: 4,
            scene_width: 256,
            scene_layers: 8,
            scene_skip_layer: None,
            scene_feature_dim: 256,
            scene_color_width: 256,
            scene_color_layers: 1,
            latent_dim: 32,
            position_octaves: 6,
            direction_octaves: 4,
            sdf_softplus_beta: 100.0,
            init_sphere_radius: 0.5,
            beta_init: 0.1,
            beta_floor: 1e-4,
            scene_density_bias: -5.0,
            latent_init_std: 0.1,
        }
    }
}

impl NetworkSpec {
    /// Reduced widths and depths for single-core desk-scale runs.
    pub fn desk() -> Self {
        Self {
            fg_sdf_width: 64,
            fg_sdf_layers: 4,
            fg_skip_layer: Some(2),
            fg_feature_dim: 32,
            fg_color_width: 64,
            fg_color_layers: 2,
            scene_width: 64,
            scene_layers: 3,
            scene_feature_dim: 32,
            scene_color_width: 32,
            scene_color_layers: 1,
            ..Self::default()
        }
    }

    pub fn position_encoding(&self) -> PositionalEncoding {
        PositionalEncoding::new(self.position_octaves)
    }

    pub fn direction_encoding(&self) -> PositionalEncoding {
        PositionalEncoding::new(self.direction_octaves)
    }

    pub fn fg_sdf_mlp(&self) -> MlpSpec {
        MlpSpec {
            input_dim: self.position_encoding().output_dim(3),
            hidden: vec![self.fg_sdf_width; self.fg_sdf_layers],
            output_dim: 1 + self.fg_feature_dim,
            activation: Activation::Softplus {
                beta: self.sdf_softplus_beta,
            },
            skip: self.fg_skip_layer,
        }
    }

    pub fn fg_color_mlp(&self) -> MlpSpec {
        MlpSpec {
            input_dim: 3 + self.fg_feature_dim,
            hidden: vec![self.fg_color_width; self.fg_color_layers],
            output_dim: 3,
            activation: Activation::Relu,
            skip: None,
        }
    }

    pub fn scene_density_mlp(&self) -> MlpSpec {
        MlpSpec {
            input_dim: self.position_encoding().output_dim(4) + self.latent_dim,
            hidden: vec![self.scene_width; self.scene_layers],
            output_dim: 1 + self.scene_feature_dim,
            activation: Activation::Relu,
            skip: self.scene_skip_layer,
        }
    }

    pub fn scene_color_mlp(&self) -> MlpSpec {
        MlpSpec {
            input_dim: self.scene_feature_dim + self.direction_encoding().output_dim(3),
            hidden: vec![self.scene_color_width; self.scene_color_layers],
            output_dim: 3,
            activation: Activation::Relu,
            skip: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::InvalidConfig("latent_dim must be positive".into()));
        }
        if !(self.beta_init > self.beta_floor && self.beta_floor > 0.0) {
            return Err(Error::InvalidConfig(
                "need beta_init > beta_floor > 0".into(),
            ));
        }
        self.fg_sdf_mlp().validate("fg.sdf")?;
        self.fg_color_mlp().validate("fg.color")?;
        self.scene_density_mlp().validate("scene.density")?;
        self.scene_color_mlp().validate("scene.color")
    }
}

/// Signed distance and radiance at canonical points.
#[derive(Clone, Copy, Debug)]
pub struct FgEval {
    /// `N x 1`
    pub sdf: Var,
    /// `N x 3`, in `[0, 1]`
    pub color: Var,
}

/// Density and radiance at layer samples.
#[derive(Clone, Copy, Debug)]
pub struct SceneEval {
    /// `N x 1`, non-negative
    pub sigma: Var,
    /// `N x 3`, in `[0, 1]`
    pub color: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SceneLayer {
    Occlusion,
    Background,
}

/// A foreground signed-distance field with radiance, evaluated on a tape.
pub trait ForegroundField: Sync {
    /// `x` is an `N x 3` node of canonical points.
    fn eval(&self, tape: &mut Tape, pv: &ParamVars, x: Var) -> FgEval;

    /// Laplace scale of the SDF-to-density transform, as a `1 x 1` node.
    fn beta(&self, tape: &mut Tape, pv: &ParamVars) -> Var;
}

/// The field shared by the occlusion and background layers.
pub trait SceneField: Sync {
    /// `samples` is `N x 4` (unit direction, signed inverse depth), `dirs` is `N x 3`.
    fn eval(
        &self,
        tape: &mut Tape,
        pv: &ParamVars,
        layer: SceneLayer,
        frame: usize,
        samples: Var,
        dirs: Var,
    ) -> Result<SceneEval>;
}

/// Both learned fields, the per-frame latent banks and the density scale.
#[derive(Clone, Debug)]
pub struct FieldSet {
    pub spec: NetworkSpec,
    pub store: ParamStore,
    pub n_frames: usize,
    fg_sdf: Mlp,
    fg_color: Mlp,
    scene_density: Mlp,
    scene_color: Mlp,
    occ_latents: usize,
    bg_latents: usize,
    log_beta: usize,
}

impl FieldSet {
    pub fn new(spec: NetworkSpec, n_frames: usize, seed: u64) -> Result<Self> {
        spec.validate()?;
        if n_frames == 0 {
            return Err(Error::InvalidConfig("need at least one frame".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        let fg_sdf = Mlp::build(
            &mut store,
            "fg.sdf",
            spec.fg_sdf_mlp(),
            Init::Geometric {
                radius: spec.init_sphere_radius,
                raw_input: 3,
            },
            &mut rng,
        )?;
        let fg_color = Mlp::build(
            &mut store,
            "fg.color",
            spec.fg_color_mlp(),
            Init::Uniform,
            &mut rng,
        )?;
        let scene_density = Mlp::build(
            &mut store,
            "scene.density",
            spec.scene_density_mlp(),
            Init::Uniform,
            &mut rng,
        )?;
        let (_, b) = scene_density.last_layer();
        store.groups[b].value.data[0] = spec.scene_density_bias;
        let scene_color = Mlp::build(
            &mut store,
            "scene.color",
            spec.scene_color_mlp(),
            Init::Uniform,
            &mut rng,
        )?;
        let normal = Normal::new(0.0, spec.latent_init_std.max(0.0)).expect("valid normal");
        let bank = |rng: &mut ChaCha8Rng| {
            Mat::from_vec(
                n_frames,
                spec.latent_dim,
                (0..n_frames * spec.latent_dim)
                    .map(|_| normal.sample(rng))
                    .collect(),
            )
        };
        let occ_latents = store.add("latent.occlusion", bank(&mut rng));
        let bg_latents = store.add("latent.background", bank(&mut rng));
        let log_beta = store.add(
            "density.log_beta",
            Mat::scalar((spec.beta_init - spec.beta_floor).ln()),
        );
        let mut fields = Self {
            spec,
            store,
            n_frames,
            fg_sdf,
            fg_color,
            scene_density,
            scene_color,
            occ_latents,
            bg_latents,
            log_beta,
        };
        fields.round_initial_sphere();
        Ok(fields)
    }

    /// Refits the distance column of the SDF output layer so the initial field
    /// matches `|x| - radius` on a shell of points around the init sphere.
    /// Ridge-regularized towards the geometric init, which on its own leaves the
    /// zero level set tens of percent out of round.
    fn round_initial_sphere(&mut self) {
        let radius = self.spec.init_sphere_radius;
        let n_dirs = 96;
        let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
        let mut pts = Vec::new();
        for k in 1..=6 {
            let rr = radius * (0.4 + 0.2 * k as f64);
            for i in 0..n_dirs {
                let y = 1.0 - 2.0 * (i as f64 + 0.5) / n_dirs as f64;
                let rho = (1.0 - y * y).sqrt();
                let phi = golden * i as f64 + k as f64;
                pts.push([rr * rho * phi.cos(), rr * y, rr * rho * phi.sin()]);
            }
        }
        let mut tape = Tape::new();
        let pv = self.store.bind(&mut tape);
        let x = tape.constant(Mat::from_rows(&pts));
        let enc = self.spec.position_encoding().encode_tape(&mut tape, x);
        let hv = self.fg_sdf.penultimate(&mut tape, &pv, enc);
        let h = tape.value(hv).clone();
        let (wg, bg) = self.fg_sdf.last_layer();
        let width = h.cols;
        let out_cols = self.store.groups[wg].value.cols;
        // Unknowns: the distance column of the weight followed by its bias.
        let dim = width + 1;
        let mut prior = nalgebra::DVector::zeros(dim);
        for r in 0..width {
            prior[r] = self.store.groups[wg].value.get(r, 0);
        }
        prior[width] = self.store.groups[bg].value.data[0];
        let a =
            nalgebra::DMatrix::from_fn(
                pts.len(),
                dim,
                |i, j| if j < width { h.get(i, j) } else { 1.0 },
            );
        let target = nalgebra::DVector::from_iterator(
            pts.len(),
            pts.iter()
                .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() - radius),
        );
        let ata = a.transpose() * &a;
        let lambda = 1e-6 * ata.trace() / dim as f64;
        let lhs = &ata + nalgebra::DMatrix::identity(dim, dim) * lambda;
        let rhs = a.transpose() * target + &prior * lambda;
        if let Some(sol) = lhs.cholesky().map(|c| c.solve(&rhs)) {
            if sol.iter().all(|v| v.is_finite()) {
                for r in 0..width {
                    self.store.groups[wg].value.data[r * out_cols] = sol[r];
                }
                self.store.groups[bg].value.data[0] = sol[width];
            }
        }
    }

    /// Rebuilds the fields described by a checkpoint and loads its values.
    pub fn from_checkpoint(ck: &super::checkpoint::Checkpoint) -> Result<Self> {
        let mut f = Self::new(ck.network.clone(), ck.n_frames, 0)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        f.store.load_from(&ck.store)?;
        Ok(f)
    }

    /// Current Laplace scale.
    pub fn beta_value(&self) -> f64 {
        self.spec.beta_floor + self.store.groups[self.log_beta].value.item().exp()
    }

    /// Zeroes the radiance network's final layer.
    pub fn zero_fg_color_output(&mut self) {
        let (w, b) = self.fg_color.last_layer();
        self.store.groups[w]
            .value
            .data
            .iter_mut()
            .for_each(|v| *v = 0.0);
        self.store.groups[b]
            .value
            .data
            .iter_mut()
            .for_each(|v| *v = 0.0);
    }

    pub fn latent_group(&self, layer: SceneLayer) -> usize {
        match layer {
            SceneLayer::Occlusion => self.occ_latents,
            SceneLayer::Background => self.bg_latents,
        }
    }

    /// Foreground evaluation returning the intermediate feature too.
    pub fn eval_fg_full(&self, tape: &mut Tape, pv: &ParamVars, x: Var) -> (FgEval, Var) {
        let enc = self.spec.position_encoding().encode_tape(tape, x);
        let out = self.fg_sdf.forward(tape, pv, enc);
        let sdf = tape.slice_cols(out, 0, 1);
        let feat = tape.slice_cols(out, 1, self.spec.fg_feature_dim);
        let cin = tape.concat(&[x, feat]);
        let raw = self.fg_color.forward(tape, pv, cin);
        let color = tape.sigmoid(raw);
        (FgEval { sdf, color }, feat)
    }

    /// Plain evaluation at one canonical point: `(s, feature, color)`.
    pub fn eval_fg_point(&self, x: &Vec3) -> (f64, Vec<f64>, [f64; 3]) {
        let mut tape = Tape::new();
        let pv = self.store.bind(&mut tape);
        let xv = tape.constant(Mat::from_rows(&[[x.x, x.y, x.z]]));
        let (e, feat) = self.eval_fg_full(&mut tape, &pv, xv);
        let c = tape.value(e.color);
        (
            tape.value(e.sdf).item(),
            tape.value(feat).data.clone(),
            [c.data[0], c.data[1], c.data[2]],
        )
    }

    /// Plain evaluation at one layer sample: `(sigma, color)`.
    pub fn eval_scene_point(
        &self,
        layer: SceneLayer,
        frame: usize,
        sample: [f64; 4],
        dir: &Vec3,
    ) -> Result<(f64, [f64; 3])> {
        let mut tape = Tape::new();
        let pv = self.store.bind(&mut tape);
        let s = tape.constant(Mat::from_rows(&[sample]));
        let d = tape.constant(Mat::from_rows(&[[dir.x, dir.y, dir.z]]));
        let e = SceneField::eval(self, &mut tape, &pv, layer, frame, s, d)?;
        let c = tape.value(e.color);
        Ok((
            tape.value(e.sigma).item(),
            [c.data[0], c.data[1], c.data[2]],
        ))
    }
}

impl ForegroundField for FieldSet {
    fn eval(&self, tape: &mut Tape, pv: &ParamVars, x: Var) -> FgEval {
        self.eval_fg_full(tape, pv, x).0
    }

    fn beta(&self, tape: &mut Tape, pv: &ParamVars) -> Var {
        let e = tape.exp(pv.get(self.log_beta));
        tape.add_scalar(e, self.spec.beta_floor)
    }
}

impl SceneField for FieldSet {
    fn eval(
        &self,
        tape: &mut Tape,
        pv: &ParamVars,
        layer: SceneLayer,
        frame: usize,
        samples: Var,
        dirs: Var,
    ) -> Result<SceneEval> {
        if frame >= self.n_frames {
            return Err(Error::MissingLatent(frame));
        }
        let n = tape.shape(samples).0;
        let idx: Arc<[usize]> = vec![frame; n].into();
        let latent = tape.gather_rows(pv.get(self.latent_group(layer)), idx);
        let enc = self.spec.position_encoding().encode_tape(tape, samples);
        let input = tape.concat(&[enc, latent]);
        let out = self.scene_density.forward(tape, pv, input);
        let raw_sigma = tape.slice_cols(out, 0, 1);
        let sigma = tape.softplus(raw_sigma, 1.0);
        let feat = tape.slice_cols(out, 1, self.spec.scene_feature_dim);
        let denc = self.spec.direction_encoding().encode_tape(tape, dirs);
        let cin = tape.concat(&[feat, denc]);
        let raw = self.scene_color.forward(tape, pv, cin);
        let color = tape.sigmoid(raw);
        Ok(SceneEval { sigma, color })
    }
}

/// `s(x) = |x| - radius` with a constant color and fixed density scale.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnalyticSphere {
    pub radius: f64,
    pub color: [f64; 3],
    pub beta: f64,
}

impl ForegroundField for AnalyticSphere {
    fn eval(&self, tape: &mut Tape, _pv: &ParamVars, x: Var) -> FgEval {
        let sq = tape.mul(x, x);
        let n2 = tape.sum_cols(sq);
        let n = tape.sqrt(n2);
        let sdf = tape.add_scalar(n, -self.radius);
        let rows = tape.shape(x).0;
        let color = tape.constant(Mat::from_vec(rows, 3, self.color.repeat(rows)));
        FgEval { sdf, color }
    }

    fn beta(&self, tape: &mut Tape, _pv: &ParamVars) -> Var {
        tape.constant(Mat::scalar(self.beta))
    }
}

/// `s(x) = a . x` with black radiance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearProbe {
    pub a: [f64; 3],
}

impl ForegroundField for LinearProbe {
    fn eval(&self, tape: &mut Tape, _pv: &ParamVars, x: Var) -> FgEval {
        let a = tape.constant(Mat::from_vec(3, 1, self.a.to_vec()));
        let sdf = tape.matmul(x, a);
        let rows = tape.shape(x).0;
        let color = tape.constant(Mat::zeros(rows, 3));
        FgEval { sdf, color }
    }

    fn beta(&self, tape: &mut Tape, _pv: &ParamVars) -> Var {
        tape.constant(Mat::scalar(0.1))
    }
}

/// A scene field with zero density everywhere.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EmptyScene;

impl SceneField for EmptyScene {
    fn eval(
        &self,
        tape: &mut Tape,
        _pv: &ParamVars,
        _layer: SceneLayer,
        _frame: usize,
        samples: Var,
        _dirs: Var,
    ) -> Result<SceneEval> {
        let n = tape.shape(samples).0;
        let sigma = tape.constant(Mat::zeros(n, 1));
        let color = tape.constant(Mat::zeros(n, 3));
        Ok(SceneEval { sigma, color })
    }
}

/// Exact `grad s` at each point, through the field's encoding and network.
pub fn spatial_gradient(
    field: &dyn ForegroundField,
    store: &ParamStore,
    points: &[Vec3],
) -> Vec<Vec3> {
    let mut tape = Tape::new();
    let pv = store.bind(&mut tape);
    let rows: Vec<[f64; 3]> = points.iter().map(|p| [p.x, p.y, p.z]).collect();
    let x = tape.input(Mat::from_rows(&rows));
    let e = field.eval(&mut tape, &pv, x);
    let g = tape.grad(e.sdf, None, &[x])[0];
    match g {
        Some(g) => {
            let m = tape.value(g);
            (0..points.len())
                .map(|r| Vec3::new(m.get(r, 0), m.get(r, 1), m.get(r, 2)))
                .collect()
        }
        None => vec![Vec3::zeros(); points.len()],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn full_fields() -> FieldSet {
        FieldSet::new(NetworkSpec::default(), 3, 11).unwrap()
    }

    #[test]
    fn parameter_count_formula() {
        let spec = MlpSpec {
            input_dim: 5,
            hidden: vec![7, 9],
            output_dim: 2,
            activation: Activation::Relu,
            skip: None,
        };
        assert_eq!(spec.param_count(), 6 * 7 + 8 * 9 + 10 * 2);
        let f = full_fields();
        let counted: usize = f
            .store
            .groups
            .iter()
            .filter(|g| g.name.starts_with("fg.sdf"))
            .map(|g| g.value.len())
            .sum();
        assert_eq!(counted, NetworkSpec::default().fg_sdf_mlp().param_count());
    }

    #[test]
    fn geometric_init_gives_half_unit_sphere() {
        let f = full_fields();
        let (s, _, _) = f.eval_fg_point(&Vec3::new(0.5, 0.0, 0.0));
        assert!(s.abs() < 0.05, "s(0.5,0,0) = {s}");
        // Radius sweep: sign change across 0.5 along every radial line, with
        // the crossing close to 0.5.
        for seed in [1, 2, 3] {
            let f = FieldSet::new(NetworkSpec::default(), 1, seed).unwrap();
            for i in 0..20 {
                let t = i as f64;
                let dir =
                    Vec3::new((t * 1.3).sin(), (t * 0.7).cos(), (t * 2.1).sin() + 0.1).normalize();
                let inside = f.eval_fg_point(&(dir * 0.45)).0;
                let outside = f.eval_fg_point(&(dir * 0.55)).0;
                assert!(
                    inside < 0.0 && outside > 0.0,
                    "seed {seed} dir {i}: {inside} {outside}"
                );
            }
        }
    }

    #[test]
    fn zero_radiance_head_gives_mid_gray() {
        let mut f = full_fields();
        f.zero_fg_color_output();
        let (_, _, c) = f.eval_fg_point(&Vec3::new(0.1, 0.2, -0.3));
        assert_eq!(c, [0.5, 0.5, 0.5]);
    }

    #[test]
    fn outputs_are_finite_and_bounded() {
        let f = FieldSet::new(NetworkSpec::desk(), 2, 3).unwrap();
        let mut tape = Tape::new();
        let pv = f.store.bind(&mut tape);
        let pts: Vec<[f64; 3]> = (0..10_000)
            .map(|i| {
                let t = i as f64;
                [
                    (t * 0.37).sin() * 2.0,
                    (t * 0.91).cos() * 2.0,
                    (t * 0.13).sin() * 2.0,
                ]
            })
            .collect();
        let x = tape.constant(Mat::from_rows(&pts));
        let e = ForegroundField::eval(&f, &mut tape, &pv, x);
        assert!(tape.value(e.sdf).all_finite());
        assert!(tape
            .value(e.color)
            .data
            .iter()
            .all(|c| (0.0..=1.0).contains(c)));
    }

    #[test]
    fn scene_density_is_nonnegative_and_latent_conditioned() {
        let mut f = FieldSet::new(NetworkSpec::desk(), 2, 5).unwrap();
        let d = Vec3::new(0.0, 0.0, 1.0);
        for layer in [SceneLayer::Occlusion, SceneLayer::Background] {
            let a = f
                .eval_scene_point(layer, 0, [0.0, 0.6, 0.8, -0.4], &d)
                .unwrap();
            assert!(a.0 >= 0.0);
            assert_eq!(
                a,
                f.eval_scene_point(layer, 0, [0.0, 0.6, 0.8, -0.4], &d)
                    .unwrap()
            );
            let g = f.latent_group(layer);
            f.store.groups[g].value.data[3] += 0.5;
            let b = f
                .eval_scene_point(layer, 0, [0.0, 0.6, 0.8, -0.4], &d)
                .unwrap();
            assert!((a.0 - b.0).abs() + (a.1[0] - b.1[0]).abs() > 0.0);
        }
        assert!(matches!(
            f.eval_scene_point(SceneLayer::Background, 2, [0.0, 0.0, 1.0, 0.5], &d),
            Err(Error::MissingLatent(2))
        ));
    }

    #[test]
    fn gradient_of_linear_probe_and_sphere() {
        let pts = [Vec3::new(0.3, -0.4, 0.5), Vec3::new(-1.0, 2.0, 0.1)];
        let empty = ParamStore::default();
        let g = spatial_gradient(
            &LinearProbe {
                a: [0.2, -1.0, 3.0],
            },
            &empty,
            &pts,
        );
        assert!(g
            .iter()
            .all(|v| (v - Vec3::new(0.2, -1.0, 3.0)).norm() < 1e-15));
        let sphere = AnalyticSphere {
            radius: 0.5,
            color: [1.0; 3],
            beta: 0.1,
        };
        let g = spatial_gradient(&sphere, &empty, &pts);
        for (p, v) in pts.iter().zip(&g) {
            assert!((v - p.normalize()).norm() < 1e-14);
        }
    }

    #[test]
    fn network_gradient_matches_central_differences() {
        let f = full_fields();
        let pts = [Vec3::new(0.21, -0.33, 0.4), Vec3::new(-0.6, 0.1, 0.05)];
        let g = spatial_gradient(&f, &f.store, &pts);
        let h = 1e-5;
        for (p, gv) in pts.iter().zip(&g) {
            for k in 0..3 {
                let mut e = Vec3::zeros();
                e[k] = h;
                let fd = (f.eval_fg_point(&(p + e)).0 - f.eval_fg_point(&(p - e)).0) / (2.0 * h);
                let rel = (fd - gv[k]).abs() / fd.abs().max(gv[k].abs()).max(1e-8);
                assert!(rel < 1e-4, "axis {k}: fd {fd} vs {}", gv[k]);
            }
        }
    }
}
