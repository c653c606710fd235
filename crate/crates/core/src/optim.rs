//! Adam, the learning-rate schedule, and the training loop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::deform::Capsule;
use crate::error::{Error, Result};
use crate::fields::checkpoint::{Checkpoint, Moments};
use crate::fields::{FieldSet, Gradients, Mat, NetworkSpec, ParamStore, ParamVars, Tape};
use crate::geometry::{Camera, Jitter, SampleCounts, SphereLayout, Vec3};
use crate::io::Dataset;
use crate::losses::{self, LossParts, LossVars, LossWeights, OcclusionPrior};
use crate::par::{self, Exec};
use crate::render::{
    build_samples, trace, Deformer, LayerMode, SampleBatch, SamplingConfig, Traced,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moments shaped like the parameter groups, plus the number of steps taken.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
    pub step: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros = || {
            store
                .groups
                .iter()
                .map(|g| Mat::zeros(g.value.rows, g.value.cols))
                .collect()
        };
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
            config,
        }
    }

    pub fn moments(&self) -> Moments {
        Moments {
            m: self.m.clone(),
            v: self.v.clone(),
        }
    }

    pub fn from_moments(moments: Moments, step: u64, config: AdamConfig) -> Self {
        Self {
            m: moments.m,
            v: moments.v,
            step,
            config,
        }
    }
}

/// One bias-corrected Adam update. Non-finite gradients abort before any
/// parameter changes, naming the group.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &Gradients,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if grads.0.len() != store.groups.len() || state.m.len() != store.groups.len() {
        return Err(Error::Contract(
            "gradient and moment counts must match parameter groups".into(),
        ));
    }
    for ((g, p), m) in grads.0.iter().zip(&store.groups).zip(&state.m) {
        if g.shape() != p.value.shape() || m.shape() != p.value.shape() {
            return Err(Error::Contract(format!(
                "shape mismatch in group {}",
                p.name
            )));
        }
    }
    if let Some(name) = grads.first_non_finite(store) {
        return Err(Error::NonFiniteGradient(name.to_string()));
    }
    state.step += 1;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let bc1 = 1.0 - beta1.powi(state.step as i32);
    let bc2 = 1.0 - beta2.powi(state.step as i32);
    for (k, group) in store.groups.iter_mut().enumerate() {
        let (m, v, g) = (&mut state.m[k], &mut state.v[k], &grads.0[k]);
        for i in 0..g.data.len() {
            m.data[i] = beta1 * m.data[i] + (1.0 - beta1) * g.data[i];
            v.data[i] = beta2 * v.data[i] + (1.0 - beta2) * g.data[i] * g.data[i];
            let mhat = m.data[i] / bc1;
            let vhat = v.data[i] / bc2;
            group.value.data[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// What one unit of `decay_steps` counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayUnit {
    #[default]
    Iteration,
    /// One pass over every bounding-box pixel of every frame.
    Epoch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub rays_per_step: usize,
    pub train_samples: SampleCounts,
    pub eval_samples: SampleCounts,
    pub steps: u64,
    pub lr: f64,
    pub decay_steps: Vec<u64>,
    pub decay_factor: f64,
    pub decay_unit: DecayUnit,
    pub seed: u64,
    pub adam: AdamConfig,
    pub weights: LossWeights,
    pub occlusion_prior: OcclusionPrior,
    pub network: NetworkSpec,
    pub mode: LayerMode,
    /// Bounding-box dilation as a fraction of its diagonal.
    pub bbox_margin: f64,
    /// Canonical distance to the rest capsules below which a sample counts as near the surface.
    pub near_band: f64,
    /// Rays per independent tape.
    pub chunk_rays: usize,
    /// Checkpoint every this many steps; 0 saves only the final one.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            rays_per_step: 512,
            train_samples: SampleCounts {
                occlusion: 16,
                foreground: 32,
                background: 16,
            },
            eval_samples: SampleCounts {
                occlusion: 32,
                foreground: 64,
                background: 32,
            },
            steps: 2000,
            lr: 5e-4,
            decay_steps: vec![200, 500],
            decay_factor: 0.5,
            decay_unit: DecayUnit::Iteration,
            seed: 0,
            adam: AdamConfig::default(),
            weights: LossWeights::default(),
            occlusion_prior: OcclusionPrior::default(),
            network: NetworkSpec::default(),
            mode: LayerMode::Full,
            bbox_margin: 0.1,
            near_band: 0.05,
            chunk_rays: 64,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    /// Smaller networks and batches that train in minutes on one core.
    pub fn desk() -> Self {
        Self {
            network: NetworkSpec::desk(),
            rays_per_step: 128,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.rays_per_step == 0 || self.chunk_rays == 0 {
            return bad("ray counts must be positive");
        }
        for c in [self.train_samples, self.eval_samples] {
            if c.occlusion == 0 || c.foreground == 0 || c.background == 0 {
                return bad("sample counts must be positive");
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be positive");
        }
        if self.decay_steps.windows(2).any(|w| w[0] > w[1]) {
            return bad("decay steps must be sorted");
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return bad("decay factor must lie in (0, 1]");
        }
        if !(self.bbox_margin >= 0.0) || !(self.near_band >= 0.0) {
            return bad("margins must be nonnegative");
        }
        let a = self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return bad("invalid Adam constants");
        }
        self.weights.validate()?;
        self.network.validate()?;
        Ok(())
    }

    pub fn sampling(&self, counts: SampleCounts) -> SamplingConfig {
        SamplingConfig {
            near_band: self.near_band,
            ..SamplingConfig::new(counts)
        }
    }
}

/// Ablation switches mirroring the command-line flags.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub no_occ_layer: bool,
    pub no_locc: bool,
    pub no_lcomp: bool,
    pub no_param: bool,
}

impl Ablation {
    pub fn apply(&self, cfg: &mut TrainConfig) {
        if self.no_occ_layer {
            cfg.mode = LayerMode::NoOcclusionLayer;
        }
        if self.no_param {
            cfg.mode = LayerMode::NoParam;
        }
        if self.no_locc {
            cfg.weights.occ = 0.0;
        }
        if self.no_lcomp {
            cfg.weights.comp = 0.0;
        }
    }
}

/// Learning rate after `step` completed units.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    let passed = cfg.decay_steps.iter().filter(|&&s| step >= s).count();
    cfg.lr * cfg.decay_factor.powi(passed as i32)
}

/// Global normalizers for a batch split over several tapes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Denominators {
    /// Rays times color channels.
    pub rgb: f64,
    pub rays: f64,
    pub fg_points: f64,
    pub near: f64,
}

impl Denominators {
    pub fn of(batches: &[&SampleBatch]) -> Self {
        let rays: usize = batches.iter().map(|b| b.n_rays).sum();
        Self {
            rgb: 3.0 * rays as f64,
            rays: rays as f64,
            fg_points: batches.iter().map(|b| b.fg.points.rows).sum::<usize>() as f64,
            near: batches.iter().map(|b| b.fg.near.len()).sum::<usize>() as f64,
        }
    }
}

/// The objective for one batch on one tape.
#[allow(clippy::too_many_arguments)]
pub fn batch_objective(
    tape: &mut Tape,
    pv: &ParamVars,
    fields: &FieldSet,
    batch: &SampleBatch,
    target: &Mat,
    mask: &[bool],
    cfg: &TrainConfig,
    denom: &Denominators,
) -> Result<(LossVars, Traced)> {
    let tr = trace(tape, pv, fields, fields, batch)?;
    let rgb = losses::photometric_tape(tape, tr.composed, target, denom.rgb);
    let g = tape.grad(tr.sdf, None, &[tr.points])[0];
    let eik = match g {
        Some(g) => losses::eikonal_tape(tape, g, denom.fg_points),
        None => tape.constant(Mat::scalar(0.0)),
    };
    let dec = losses::decomposition_tape(tape, tr.fg.alpha, mask, denom.rays);
    let occ = if batch.mode.has_occlusion() {
        losses::occlusion_tape(
            tape,
            tr.occ.alpha,
            tr.fg.alpha,
            mask,
            &cfg.occlusion_prior,
            denom.rays,
        )
    } else {
        tape.constant(Mat::scalar(0.0))
    };
    let comp = losses::completeness_tape(tape, tr.sdf, &batch.fg.near, denom.near);
    Ok((
        LossVars {
            rgb,
            eik,
            dec,
            occ,
            comp,
        },
        tr,
    ))
}

/// Pixel rectangle `[x0, x1) x [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PixelBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl PixelBox {
    pub fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }
}

fn project(camera: &Camera, p: &Vec3) -> Option<(f64, f64)> {
    let q = camera.rotation_matrix().transpose() * (p - camera.origin());
    (q.z > 1e-9).then(|| {
        (
            camera.fx * q.x / q.z + camera.cx,
            camera.fy * q.y / q.z + camera.cy,
        )
    })
}

/// Image-space box around the posed capsules, dilated by `margin` times its diagonal.
pub fn body_bbox(camera: &Camera, capsules: &[Capsule], margin: f64) -> PixelBox {
    let (mut lo, mut hi) = (
        (f64::INFINITY, f64::INFINITY),
        (f64::NEG_INFINITY, f64::NEG_INFINITY),
    );
    for c in capsules {
        let (a, b) = (Vec3::from(c.a), Vec3::from(c.b));
        let min = a.inf(&b).add_scalar(-c.radius);
        let max = a.sup(&b).add_scalar(c.radius);
        for k in 0..8 {
            let p = Vec3::new(
                if k & 1 == 0 { min.x } else { max.x },
                if k & 2 == 0 { min.y } else { max.y },
                if k & 4 == 0 { min.z } else { max.z },
            );
            if let Some((u, v)) = project(camera, &p) {
                lo = (lo.0.min(u), lo.1.min(v));
                hi = (hi.0.max(u), hi.1.max(v));
            }
        }
    }
    let (w, h) = (camera.width as f64, camera.height as f64);
    if !lo.0.is_finite() {
        return PixelBox {
            x0: 0,
            y0: 0,
            x1: camera.width,
            y1: camera.height,
        };
    }
    let pad = margin * ((hi.0 - lo.0).powi(2) + (hi.1 - lo.1).powi(2)).sqrt();
    let clampf = |v: f64, max: f64| v.clamp(0.0, max);
    let b = PixelBox {
        x0: clampf((lo.0 - pad).floor(), w) as usize,
        y0: clampf((lo.1 - pad).floor(), h) as usize,
        x1: clampf((hi.0 + pad).ceil(), w) as usize,
        y1: clampf((hi.1 + pad).ceil(), h) as usize,
    };
    if b.x1 <= b.x0 || b.y1 <= b.y0 {
        return PixelBox {
            x0: 0,
            y0: 0,
            x1: camera.width,
            y1: camera.height,
        };
    }
    b
}

/// Everything about one frame the loop needs, computed once.
pub struct FrameSetup {
    pub camera: Camera,
    pub layout: SphereLayout,
    pub deformer: Deformer,
    pub bbox: PixelBox,
}

pub fn frame_setups(dataset: &Dataset, margin: f64) -> Result<Vec<FrameSetup>> {
    let skeleton = &dataset.spec.skeleton;
    dataset
        .cameras
        .iter()
        .zip(&dataset.poses)
        .map(|(cam, pose)| {
            Ok(FrameSetup {
                camera: cam.clone(),
                layout: SphereLayout::for_camera(cam, dataset.spec.outer_radius)?,
                deformer: Deformer::new(skeleton, pose)?,
                bbox: body_bbox(cam, &skeleton.posed_capsules(pose), margin),
            })
        })
        .collect()
}

/// One ray chunk of a step: its frame and pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct ChunkPlan {
    pub frame: usize,
    pub pixels: Vec<(usize, usize)>,
    pub jitter: u64,
}

/// Ray selection for `step`; depends only on the seed and the step index.
pub fn plan_step(step: u64, cfg: &TrainConfig, setups: &[FrameSetup]) -> Vec<ChunkPlan> {
    let mut rng = ChaCha8Rng::seed_from_u64(
        cfg.seed
            .wrapping_add(step.wrapping_mul(0x9E37_79B9_7F4A_7C15)),
    );
    let n_chunks = cfg.rays_per_step.div_ceil(cfg.chunk_rays);
    (0..n_chunks)
        .map(|c| {
            let frame = rng.random_range(0..setups.len());
            let b = setups[frame].bbox;
            let n = cfg.chunk_rays.min(cfg.rays_per_step - c * cfg.chunk_rays);
            let pixels = (0..n)
                .map(|_| (rng.random_range(b.x0..b.x1), rng.random_range(b.y0..b.y1)))
                .collect();
            ChunkPlan {
                frame,
                pixels,
                jitter: rng.random(),
            }
        })
        .collect()
}

/// Loss terms of one step, averaged over the whole batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub parts: LossParts,
    pub total: f64,
    pub lr: f64,
}

pub const LOSS_CSV_HEADER: &str = "step,L_rgb,L_eik,L_dec,L_occ,L_comp,total";

impl StepLog {
    pub fn csv_row(&self) -> String {
        let p = &self.parts;
        format!(
            "{},{:e},{:e},{:e},{:e},{:e},{:e}",
            self.step, p.rgb, p.eik, p.dec, p.occ, p.comp, self.total
        )
    }
}

/// Gradient and loss for one step, summed over chunks in order.
pub fn step_gradients(
    fields: &FieldSet,
    dataset: &Dataset,
    setups: &[FrameSetup],
    plans: &[ChunkPlan],
    cfg: &TrainConfig,
    exec: Exec,
) -> Result<(Gradients, LossParts)> {
    let sampling = cfg.sampling(cfg.train_samples);
    let batches = par::map(exec, plans, |p| -> Result<SampleBatch> {
        let s = &setups[p.frame];
        let rays = p
            .pixels
            .iter()
            .map(|&(x, y)| s.camera.pixel_ray(x, y))
            .collect::<Result<Vec<_>>>()?;
        build_samples(
            &rays,
            p.frame,
            &s.layout,
            Some(&s.deformer),
            &sampling,
            cfg.mode,
            Jitter::Seeded(p.jitter),
        )
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let denom = Denominators::of(&batches.iter().collect::<Vec<_>>());
    let items: Vec<(&ChunkPlan, &SampleBatch)> = plans.iter().zip(&batches).collect();
    let results = par::map(
        exec,
        &items,
        |&(p, batch)| -> Result<(Gradients, LossParts)> {
            let frame = &dataset.frames[p.frame];
            let w = frame.rgb.width;
            let target = Mat::from_vec(
                p.pixels.len(),
                3,
                p.pixels
                    .iter()
                    .flat_map(|&(x, y)| frame.rgb.pixel(y * w + x).to_vec())
                    .collect(),
            );
            let mask: Vec<bool> = p
                .pixels
                .iter()
                .map(|&(x, y)| frame.mask[y * w + x])
                .collect();
            let mut tape = Tape::new();
            let pv = fields.store.bind(&mut tape);
            let (lv, _) =
                batch_objective(&mut tape, &pv, fields, batch, &target, &mask, cfg, &denom)?;
            let parts = lv.values(&tape);
            let root = lv.total(&mut tape, &cfg.weights);
            let grads = Gradients::from_tape(&fields.store, tape.backward(root)?);
            Ok((grads, parts))
        },
    );
    let mut grads = Gradients::zeros(&fields.store);
    let mut parts = LossParts::default();
    for r in results {
        let (g, p) = r?;
        grads.accumulate(&g);
        parts.rgb += p.rgb;
        parts.eik += p.eik;
        parts.dec += p.dec;
        parts.occ += p.occ;
        parts.comp += p.comp;
    }
    Ok((grads, parts))
}

/// Outcome of [`train`].
#[derive(Clone, Debug)]
pub struct TrainReport {
    pub log: Vec<StepLog>,
    pub final_checkpoint: PathBuf,
}

pub fn checkpoint_path(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join(format!("step_{step:06}.ckpt"))
}

pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const ABORT_CHECKPOINT: &str = "abort.ckpt";
pub const LOSS_CSV: &str = "losses.csv";

/// A training run in progress.
pub struct Trainer<'a> {
    pub cfg: TrainConfig,
    pub fields: FieldSet,
    pub adam: AdamState,
    dataset: &'a Dataset,
    setups: Vec<FrameSetup>,
    units_per_epoch: u64,
}

impl<'a> Trainer<'a> {
    pub fn new(dataset: &'a Dataset, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if dataset.is_empty() {
            return Err(Error::MissingData("dataset has no frames".into()));
        }
        let fields = FieldSet::new(cfg.network.clone(), dataset.len(), cfg.seed)?;
        let adam = AdamState::new(&fields.store, cfg.adam);
        Self::assemble(dataset, cfg, fields, adam)
    }

    /// Continues from `ck`, which must hold optimizer moments.
    pub fn resume(dataset: &'a Dataset, cfg: TrainConfig, ck: Checkpoint) -> Result<Self> {
        cfg.validate()?;
        if ck.n_frames != dataset.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} frames, dataset {}",
                ck.n_frames,
                dataset.len()
            )));
        }
        if ck.network != cfg.network {
            return Err(Error::Checkpoint(
                "checkpoint network differs from the configuration".into(),
            ));
        }
        let fields = FieldSet::from_checkpoint(&ck)?;
        let moments = ck
            .moments
            .clone()
            .ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state".into()))?;
        let adam = AdamState::from_moments(moments, ck.step, cfg.adam);
        Self::assemble(dataset, cfg, fields, adam)
    }

    fn assemble(
        dataset: &'a Dataset,
        cfg: TrainConfig,
        fields: FieldSet,
        adam: AdamState,
    ) -> Result<Self> {
        let setups = frame_setups(dataset, cfg.bbox_margin)?;
        let pixels: usize = setups.iter().map(|s| s.bbox.area()).sum();
        let units_per_epoch = match cfg.decay_unit {
            DecayUnit::Iteration => 1,
            DecayUnit::Epoch => (pixels.div_ceil(cfg.rays_per_step) as u64).max(1),
        };
        Ok(Self {
            cfg,
            fields,
            adam,
            dataset,
            setups,
            units_per_epoch,
        })
    }

    pub fn step(&self) -> u64 {
        self.adam.step
    }

    pub fn lr(&self) -> f64 {
        lr_at(self.adam.step / self.units_per_epoch, &self.cfg)
    }

    pub fn setups(&self) -> &[FrameSetup] {
        &self.setups
    }

    /// One optimizer step.
    pub fn advance(&mut self, exec: Exec) -> Result<StepLog> {
        let step = self.adam.step;
        let plans = plan_step(step, &self.cfg, &self.setups);
        let (grads, parts) = step_gradients(
            &self.fields,
            self.dataset,
            &self.setups,
            &plans,
            &self.cfg,
            exec,
        )?;
        let total = losses::total(&parts, &self.cfg.weights)?;
        let lr = self.lr();
        adam_step(&mut self.fields.store, &grads, &mut self.adam, lr)?;
        Ok(StepLog {
            step: step + 1,
            parts,
            total,
            lr,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            step: self.adam.step,
            n_frames: self.fields.n_frames,
            network: self.fields.spec.clone(),
            store: self.fields.store.clone(),
            moments: Some(self.adam.moments()),
            config: serde_json::to_value(&self.cfg).unwrap_or(serde_json::Value::Null),
        }
    }

    /// Runs to `cfg.steps`, appending to the loss CSV and checkpointing on schedule.
    /// A numeric failure saves the last good state and aborts.
    pub fn run(
        &mut self,
        out_dir: &Path,
        exec: Exec,
        mut progress: impl FnMut(&StepLog),
    ) -> Result<TrainReport> {
        std::fs::create_dir_all(out_dir)?;
        let csv_path = out_dir.join(LOSS_CSV);
        let fresh = self.adam.step == 0 || !csv_path.exists();
        if fresh {
            std::fs::write(&csv_path, format!("{LOSS_CSV_HEADER}\n"))?;
        } else {
            truncate_csv(&csv_path, self.adam.step)?;
        }
        let mut csv = std::fs::OpenOptions::new().append(true).open(&csv_path)?;
        let mut log = Vec::new();
        while self.adam.step < self.cfg.steps {
            let entry = match self.advance(exec) {
                Ok(e) => e,
                Err(e @ (Error::NonFiniteLoss(_) | Error::NonFiniteGradient(_))) => {
                    let step = self.adam.step as usize + 1;
                    self.checkpoint().save(&out_dir.join(ABORT_CHECKPOINT))?;
                    return Err(Error::NumericAbort {
                        step,
                        detail: e.to_string(),
                    });
                }
                Err(e) => return Err(e),
            };
            writeln!(csv, "{}", entry.csv_row())?;
            progress(&entry);
            log.push(entry);
            let every = self.cfg.checkpoint_every;
            if every > 0 && self.adam.step % every == 0 && self.adam.step < self.cfg.steps {
                self.checkpoint()
                    .save(&checkpoint_path(out_dir, self.adam.step))?;
            }
        }
        csv.flush()?;
        let final_checkpoint = out_dir.join(FINAL_CHECKPOINT);
        self.checkpoint().save(&final_checkpoint)?;
        Ok(TrainReport {
            log,
            final_checkpoint,
        })
    }
}

/// Drops loss rows past `step`, so a resumed run rewrites them.
fn truncate_csv(path: &Path, step: u64) -> Result<()> {
    let text = std::fs::read_to_string(path)?;
    let kept: Vec<&str> = text
        .lines()
        .enumerate()
        .filter(|(i, l)| {
            *i == 0
                || l.split(',')
                    .next()
                    .and_then(|s| s.parse::<u64>().ok())
                    .is_some_and(|s| s <= step)
        })
        .map(|(_, l)| l)
        .collect();
    std::fs::write(path, kept.join("\n") + "\n")?;
    Ok(())
}

/// Trains from scratch into `out_dir`.
pub fn train(
    dataset: &Dataset,
    cfg: &TrainConfig,
    out_dir: &Path,
    exec: Exec,
) -> Result<TrainReport> {
    Trainer::new(dataset, cfg.clone())?.run(out_dir, exec, |_| {})
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::ParamGroup;
    use crate::synth::{generate, SceneSpec};

    fn one_group(v: Vec<f64>) -> ParamStore {
        let n = v.len();
        ParamStore {
            groups: vec![ParamGroup {
                name: "w".into(),
                value: Mat::from_vec(1, n, v),
            }],
        }
    }

    #[test]
    fn schedule_examples() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, &cfg), 5e-4);
        assert_eq!(lr_at(199, &cfg), 5e-4);
        assert_eq!(lr_at(200, &cfg), 2.5e-4);
        assert_eq!(lr_at(499, &cfg), 2.5e-4);
        assert_eq!(lr_at(500, &cfg), 1.25e-4);
        assert_eq!(lr_at(10_000, &cfg), 1.25e-4);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut store = one_group(vec![1.0, -2.0]);
        let mut st = AdamState::new(&store, AdamConfig::default());
        adam_step(
            &mut store,
            &Gradients(vec![Mat::zeros(1, 2)]),
            &mut st,
            1e-3,
        )
        .unwrap();
        assert_eq!(store.groups[0].value.data, vec![1.0, -2.0]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = one_group(vec![0.0, 0.0, 0.0]);
        let mut st = AdamState::new(&store, AdamConfig::default());
        let g = Gradients(vec![Mat::from_vec(1, 3, vec![3.0, -0.2, 1e-3])]);
        adam_step(&mut store, &g, &mut st, 0.01).unwrap();
        for (p, s) in store.groups[0].value.data.iter().zip([-1.0, 1.0, -1.0]) {
            assert!((p - s * 0.01).abs() < 1e-5 * 0.01, "{p}");
        }
    }

    #[test]
    fn nan_gradient_names_the_group() {
        let mut store = one_group(vec![1.0]);
        let mut st = AdamState::new(&store, AdamConfig::default());
        let g = Gradients(vec![Mat::from_vec(1, 1, vec![f64::NAN])]);
        match adam_step(&mut store, &g, &mut st, 1e-3) {
            Err(Error::NonFiniteGradient(name)) => assert_eq!(name, "w"),
            other => panic!("{other:?}"),
        }
        assert_eq!(store.groups[0].value.data, vec![1.0]);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn ablation_flags_edit_config() {
        let mut cfg = TrainConfig::default();
        Ablation {
            no_locc: true,
            no_lcomp: true,
            ..Default::default()
        }
        .apply(&mut cfg);
        assert_eq!(cfg.weights.occ, 0.0);
        assert_eq!(cfg.weights.comp, 0.0);
        assert_eq!(cfg.mode, LayerMode::Full);
        Ablation {
            no_param: true,
            ..Default::default()
        }
        .apply(&mut cfg);
        assert_eq!(cfg.mode, LayerMode::NoParam);
    }

    #[test]
    fn config_json_fills_defaults() {
        let cfg: TrainConfig =
            serde_json::from_str(r#"{"steps": 7, "weights": {"occ": 0.0}}"#).unwrap();
        assert_eq!(cfg.steps, 7);
        assert_eq!(cfg.weights.occ, 0.0);
        assert_eq!(cfg.weights.eik, 0.1);
        assert_eq!(cfg.rays_per_step, 512);
        let mut bad = TrainConfig::default();
        bad.decay_steps = vec![500, 200];
        assert!(matches!(bad.validate(), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn bbox_covers_silhouette() {
        let d = generate(&SceneSpec::default(), 0, Exec::Parallel).unwrap();
        let setups = frame_setups(&d, 0.1).unwrap();
        for (s, f) in setups.iter().zip(&d.frames) {
            let w = f.rgb.width;
            for (i, _) in f.silhouette.iter().enumerate().filter(|(_, &v)| v) {
                let (x, y) = (i % w, i / w);
                assert!(x >= s.bbox.x0 && x < s.bbox.x1 && y >= s.bbox.y0 && y < s.bbox.y1);
            }
            assert!(s.bbox.area() < w * f.rgb.height);
        }
    }

    fn tiny() -> (Dataset, TrainConfig) {
        let spec = SceneSpec {
            frames: 2,
            width: 32,
            height: 32,
            ..SceneSpec::default()
        };
        let spec = SceneSpec {
            camera: crate::synth::CameraSpec {
                focal: 90.0,
                ..spec.camera.clone()
            },
            ..spec
        };
        let d = generate(&spec, 0, Exec::Sequential).unwrap();
        let cfg = TrainConfig {
            rays_per_step: 32,
            chunk_rays: 16,
            steps: 10,
            checkpoint_every: 5,
            ..TrainConfig::desk()
        };
        (d, cfg)
    }

    #[test]
    fn smoke_run_writes_csv_and_checkpoints() {
        let (d, cfg) = tiny();
        let dir = tempfile::tempdir().unwrap();
        let report = train(&d, &cfg, dir.path(), Exec::Parallel).unwrap();
        assert_eq!(report.log.len(), 10);
        let csv = std::fs::read_to_string(dir.path().join(LOSS_CSV)).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], LOSS_CSV_HEADER);
        assert_eq!(lines.len(), 11);
        assert!(checkpoint_path(dir.path(), 5).exists());
        let ck = Checkpoint::load(&report.final_checkpoint).unwrap();
        assert_eq!(ck.step, 10);
    }

    #[test]
    fn resume_is_bit_identical() {
        let (d, cfg) = tiny();
        let a = tempfile::tempdir().unwrap();
        let full = train(&d, &cfg, a.path(), Exec::Sequential).unwrap();
        let b = tempfile::tempdir().unwrap();
        let half = TrainConfig {
            steps: 5,
            ..cfg.clone()
        };
        let first = train(&d, &half, b.path(), Exec::Parallel).unwrap();
        let ck = Checkpoint::load(&first.final_checkpoint).unwrap();
        let mut t = Trainer::resume(&d, cfg.clone(), ck).unwrap();
        let rest = t.run(b.path(), Exec::Parallel, |_| {}).unwrap();
        assert_eq!(rest.log.len(), 5);
        let x = Checkpoint::load(&full.final_checkpoint).unwrap();
        let y = Checkpoint::load(&rest.final_checkpoint).unwrap();
        assert_eq!(x.store, y.store);
        assert_eq!(x.moments, y.moments);
        assert_eq!(
            std::fs::read_to_string(a.path().join(LOSS_CSV)).unwrap(),
            std::fs::read_to_string(b.path().join(LOSS_CSV)).unwrap()
        );
    }

    #[test]
    fn two_layer_modes_train() {
        let (d, mut cfg) = tiny();
        cfg.steps = 2;
        for mode in [LayerMode::NoOcclusionLayer, LayerMode::NoParam] {
            cfg.mode = mode;
            let dir = tempfile::tempdir().unwrap();
            let r = train(&d, &cfg, dir.path(), Exec::Parallel).unwrap();
            assert!(r
                .log
                .iter()
                .all(|l| l.parts.occ == 0.0 && l.total.is_finite()));
        }
    }
}
