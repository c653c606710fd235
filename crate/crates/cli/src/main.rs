//! `trilayer`: dataset generation, training, rendering, evaluation and ablations.
//!
//! Exit codes: 0 ok, 2 bad input, 3 numeric failure, 4 checkpoint problem,
//! 5 missing data.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use trilayer::eval::{compare_runs, render_dataset, write_run};
use trilayer::fields::checkpoint::Checkpoint;
use trilayer::fields::FieldSet;
use trilayer::geometry::SphereLayout;
use trilayer::io::{Dataset, RunLayout};
use trilayer::optim::{Ablation, TrainConfig, Trainer};
use trilayer::par::Exec;
use trilayer::render::{render_image, Deformer, RenderConfig, SamplingConfig};
use trilayer::synth::{generate, OcclusionSummary, SceneSpec};
use trilayer::Error;

#[derive(Parser, Debug)]
#[command(
    name = "trilayer",
    version,
    about = "Occlusion-aware three-layer SDF renderer and trainer"
)]
struct Cli {
    /// Seed for every random choice of the run.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true, env = "TRILAYER_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic occluded dataset.
    Gen {
        /// Scene description (JSON); defaults to the built-in 20-frame scene.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a dataset.
    Train {
        #[command(flatten)]
        run: TrainArgs,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint holding optimizer state.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        ablation: AblationArgs,
    },
    /// Render every dataset frame from a checkpoint.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write per-layer renders and opacity maps.
        #[arg(long)]
        layers: bool,
        /// Also render an orbit around the body.
        #[arg(long)]
        novel_view: bool,
        /// Views in the orbit.
        #[arg(long, default_value_t = 8)]
        orbit_views: usize,
    },
    /// Compare rendered runs against a dataset.
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// Where to write the per-frame CSV.
        #[arg(long, default_value = "report.csv")]
        csv: PathBuf,
        /// Run directories; the first is the baseline.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
    /// Train, render and compare several ablation variants.
    Ablate {
        #[command(flatten)]
        run: TrainArgs,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated variants; flags joined by `+`, e.g. `full,no-param+no-locc`.
        #[arg(long, default_value = "full,no-param+no-locc")]
        variants: String,
    },
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Training configuration (JSON), applied over the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Preset::Full)]
    preset: Preset,
    /// Overrides the configured step count.
    #[arg(long)]
    steps: Option<u64>,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Preset {
    /// Full-size networks and 512 rays per step.
    Full,
    /// Small networks and 128 rays per step.
    Desk,
}

#[derive(Args, Debug, Default)]
struct AblationArgs {
    /// Two-layer composition with the occlusion layer removed.
    #[arg(long)]
    no_occ_layer: bool,
    /// Set the occlusion-decoupling weight to zero.
    #[arg(long)]
    no_locc: bool,
    /// Set the completeness weight to zero.
    #[arg(long)]
    no_lcomp: bool,
    /// Two-layer composition with the occlusion samples given to the foreground.
    #[arg(long)]
    no_param: bool,
}

impl AblationArgs {
    fn to_ablation(&self) -> Ablation {
        Ablation {
            no_occ_layer: self.no_occ_layer,
            no_locc: self.no_locc,
            no_lcomp: self.no_lcomp,
            no_param: self.no_param,
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NumericAbort { .. } | Error::NonFiniteLoss(_) | Error::NonFiniteGradient(_) => 3,
        Error::Checkpoint(_) | Error::MissingLatent(_) => 4,
        Error::MissingData(_) | Error::FrameCountMismatch { .. } => 5,
        _ => 2,
    }
}

fn print_config(command: &str, v: &Value) {
    println!("effective config ({command}):");
    println!("{}", serde_json::to_string_pretty(v).unwrap_or_default());
}

fn read_json(path: &Path) -> trilayer::Result<Value> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

/// Recursively overlays `top` on `base`.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, t) => *b = t,
    }
}

fn train_config(
    args: &TrainArgs,
    seed: Option<u64>,
    ablation: Ablation,
) -> trilayer::Result<TrainConfig> {
    let preset = match args.preset {
        Preset::Full => TrainConfig::default(),
        Preset::Desk => TrainConfig::desk(),
    };
    let mut v = serde_json::to_value(&preset)?;
    if let Some(p) = &args.config {
        merge(&mut v, read_json(p)?);
    }
    let mut cfg: TrainConfig =
        serde_json::from_value(v).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    if let Some(s) = args.steps {
        cfg.steps = s;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    ablation.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn run_gen(spec: Option<&Path>, out: &Path, seed: u64, exec: Exec) -> trilayer::Result<()> {
    let spec: SceneSpec = match spec {
        Some(p) => {
            serde_json::from_value(read_json(p)?).map_err(|e| Error::InvalidSpec(e.to_string()))?
        }
        None => SceneSpec::default(),
    };
    print_config("gen", &json!({ "seed": seed, "out": out, "spec": spec }));
    let d = generate(&spec, seed, exec)?;
    d.write(out)?;
    let s = OcclusionSummary::of(&d);
    println!("wrote {} frames to {}", d.len(), out.display());
    println!(
        "occluded fraction of silhouette: mean {:.3}, min {:.3}, max {:.3}",
        s.mean, s.min, s.max
    );
    Ok(())
}

fn train_into(
    dataset: &Dataset,
    cfg: TrainConfig,
    out: &Path,
    resume: Option<&Path>,
    exec: Exec,
) -> trilayer::Result<PathBuf> {
    let mut trainer = match resume {
        Some(p) => Trainer::resume(dataset, cfg.clone(), Checkpoint::load(p)?)?,
        None => Trainer::new(dataset, cfg.clone())?,
    };
    let every = (cfg.steps / 20).max(1);
    let report = trainer.run(out, exec, |l| {
        if l.step % every == 0 || l.step == 1 {
            println!(
                "step {:>6}  total {:.5}  rgb {:.5}  lr {:.2e}",
                l.step, l.total, l.parts.rgb, l.lr
            );
        }
    })?;
    println!("checkpoint {}", report.final_checkpoint.display());
    Ok(report.final_checkpoint)
}

fn run_train(
    args: &TrainArgs,
    out: &Path,
    resume: Option<&Path>,
    ablation: Ablation,
    seed: Option<u64>,
    exec: Exec,
) -> trilayer::Result<()> {
    let cfg = train_config(args, seed, ablation)?;
    print_config(
        "train",
        &json!({ "data": args.data, "out": out, "resume": resume, "ablation": ablation, "train": cfg }),
    );
    let dataset = Dataset::load(&args.data)?;
    train_into(&dataset, cfg, out, resume, exec)?;
    Ok(())
}

fn load_fields(checkpoint: &Path, dataset: &Dataset) -> trilayer::Result<(FieldSet, TrainConfig)> {
    let ck = Checkpoint::load(checkpoint)?;
    if ck.n_frames != dataset.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint covers {} frames, dataset has {}",
            ck.n_frames,
            dataset.len()
        )));
    }
    let cfg: TrainConfig = serde_json::from_value(ck.config.clone())
        .map_err(|e| Error::Checkpoint(format!("stored configuration unreadable: {e}")))?;
    if cfg.network != ck.network {
        return Err(Error::Checkpoint(
            "stored configuration disagrees with the stored network".into(),
        ));
    }
    Ok((FieldSet::from_checkpoint(&ck)?, cfg))
}

fn render_into(
    fields: &FieldSet,
    cfg: &TrainConfig,
    dataset: &Dataset,
    out: &Path,
    layers: bool,
    exec: Exec,
) -> trilayer::Result<()> {
    let outputs = render_dataset(fields, dataset, cfg.eval_samples, cfg.mode, exec)?;
    write_run(out, &outputs, layers)?;
    println!("rendered {} frames to {}", outputs.len(), out.display());
    Ok(())
}

fn render_orbit(
    fields: &FieldSet,
    cfg: &TrainConfig,
    dataset: &Dataset,
    out: &Path,
    views: usize,
    layers: bool,
    exec: Exec,
) -> trilayer::Result<()> {
    let spec = &dataset.spec;
    let rc = RenderConfig {
        sampling: SamplingConfig::new(cfg.eval_samples),
        mode: cfg.mode,
        tile: 256,
        exec,
    };
    let outputs = (0..views)
        .map(|v| {
            let frame = v % dataset.len();
            let yaw = 2.0 * std::f64::consts::PI * v as f64 / views as f64;
            let cam = spec.camera.at_yaw(yaw, spec.width, spec.height);
            let layout = SphereLayout::for_camera(&cam, spec.outer_radius)?;
            let deform = Deformer::new(&spec.skeleton, &dataset.poses[frame])?;
            render_image(
                &cam,
                frame,
                fields,
                fields,
                &fields.store,
                &layout,
                Some(&deform),
                &rc,
            )
        })
        .collect::<trilayer::Result<Vec<_>>>()?;
    write_run(&RunLayout::new(out.join("novel")).root, &outputs, layers)?;
    println!(
        "rendered {views} orbit views to {}",
        out.join("novel").display()
    );
    Ok(())
}

fn run_render(
    checkpoint: &Path,
    data: &Path,
    out: &Path,
    layers: bool,
    novel: Option<usize>,
    exec: Exec,
) -> trilayer::Result<()> {
    let dataset = Dataset::load(data)?;
    let (fields, cfg) = load_fields(checkpoint, &dataset)?;
    print_config(
        "render",
        &json!({
            "checkpoint": checkpoint, "data": data, "out": out, "layers": layers,
            "novel_view": novel, "samples": cfg.eval_samples, "mode": cfg.mode,
        }),
    );
    render_into(&fields, &cfg, &dataset, out, layers, exec)?;
    if let Some(views) = novel {
        render_orbit(&fields, &cfg, &dataset, out, views, layers, exec)?;
    }
    Ok(())
}

fn run_eval(data: &Path, csv: &Path, runs: &[PathBuf], exec: Exec) -> trilayer::Result<()> {
    print_config("eval", &json!({ "data": data, "csv": csv, "runs": runs }));
    let dataset = Dataset::load(data)?;
    let refs: Vec<&Path> = runs.iter().map(PathBuf::as_path).collect();
    let cmp = compare_runs(&refs, &dataset, exec)?;
    print!("{}", cmp.table());
    std::fs::write(csv, cmp.csv())?;
    println!("wrote {}", csv.display());
    Ok(())
}

fn parse_variant(v: &str) -> trilayer::Result<Ablation> {
    let mut a = Ablation::default();
    for flag in v.split('+').map(str::trim) {
        match flag {
            "full" => {}
            "no-occ-layer" => a.no_occ_layer = true,
            "no-locc" => a.no_locc = true,
            "no-lcomp" => a.no_lcomp = true,
            "no-param" => a.no_param = true,
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown ablation flag `{other}`"
                )))
            }
        }
    }
    Ok(a)
}

fn run_ablate(
    args: &TrainArgs,
    out: &Path,
    variants: &str,
    seed: Option<u64>,
    exec: Exec,
) -> trilayer::Result<()> {
    let variants: Vec<(String, Ablation)> = variants
        .split(',')
        .map(|v| Ok((v.trim().to_string(), parse_variant(v)?)))
        .collect::<trilayer::Result<_>>()?;
    let configs = variants
        .iter()
        .map(|(name, a)| Ok((name.clone(), train_config(args, seed, *a)?)))
        .collect::<trilayer::Result<Vec<_>>>()?;
    print_config(
        "ablate",
        &json!({
            "data": args.data, "out": out,
            "variants": configs.iter().map(|(n, c)| json!({ "name": n, "train": c })).collect::<Vec<_>>(),
        }),
    );
    let dataset = Dataset::load(&args.data)?;
    let mut run_dirs = Vec::new();
    for (name, cfg) in configs {
        println!("== {name}");
        let dir = out.join(&name);
        let ck = train_into(&dataset, cfg, &dir, None, exec)?;
        let (fields, cfg) = load_fields(&ck, &dataset)?;
        let render_dir = dir.join("render");
        render_into(&fields, &cfg, &dataset, &render_dir, true, exec)?;
        run_dirs.push(render_dir);
    }
    let refs: Vec<&Path> = run_dirs.iter().map(PathBuf::as_path).collect();
    let mut cmp = compare_runs(&refs, &dataset, exec)?;
    for (r, (name, _)) in cmp.reports.iter_mut().zip(&variants) {
        r.run = name.clone();
    }
    print!("{}", cmp.table());
    let csv = out.join("report.csv");
    std::fs::write(&csv, cmp.csv())?;
    println!("wrote {}", csv.display());
    Ok(())
}

fn run(cli: Cli) -> trilayer::Result<()> {
    #[cfg(feature = "parallel")]
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    }
    let exec = if cli.threads == Some(1) {
        Exec::Sequential
    } else {
        Exec::Parallel
    };
    match &cli.command {
        Command::Gen { spec, out } => run_gen(spec.as_deref(), out, cli.seed.unwrap_or(0), exec),
        Command::Train {
            run,
            out,
            resume,
            ablation,
        } => run_train(
            run,
            out,
            resume.as_deref(),
            ablation.to_ablation(),
            cli.seed,
            exec,
        ),
        Command::Render {
            checkpoint,
            data,
            out,
            layers,
            novel_view,
            orbit_views,
        } => run_render(
            checkpoint,
            data,
            out,
            *layers,
            novel_view.then_some(*orbit_views),
            exec,
        ),
        Command::Eval { data, csv, runs } => run_eval(data, csv, runs, exec),
        Command::Ablate { run, out, variants } => run_ablate(run, out, variants, cli.seed, exec),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
