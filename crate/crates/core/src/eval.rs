//! Image metrics, rendering a trained model over a dataset, and run comparison.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fields::FieldSet;
use crate::geometry::{SampleCounts, SphereLayout};
use crate::io::{self, Dataset, FrameRecord, RunLayout};
use crate::par::{self, Exec};
use crate::raster::Image;
use crate::render::{
    render_image, Deformer, LayerMode, RenderConfig, RenderOutput, SamplingConfig,
};

pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

/// PSNR over masked pixels, all channels; `None` for an empty mask.
pub fn masked_psnr(pred: &Image, target: &Image, mask: &[bool]) -> Result<Option<f64>> {
    pred.same_shape(target)?;
    if mask.len() != pred.pixels() {
        return Err(Error::Contract(format!(
            "mask has {} entries for {} pixels",
            mask.len(),
            pred.pixels()
        )));
    }
    let ch = pred.channels;
    let (mut sum, mut n) = (0.0, 0usize);
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        for c in 0..ch {
            let d = pred.data[i * ch + c] - target.data[i * ch + c];
            sum += d * d;
        }
        n += ch;
    }
    Ok((n > 0).then(|| psnr_from_mse(sum / n as f64)))
}

pub fn psnr(pred: &Image, target: &Image) -> Result<f64> {
    let all = vec![true; pred.pixels()];
    Ok(masked_psnr(pred, target, &all)?.unwrap_or(PSNR_CAP))
}

/// `|A ∩ B| / |A ∪ B|`, 1 for two empty masks.
pub fn mask_iou(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Contract("mask lengths differ".into()));
    }
    let inter = a.iter().zip(b).filter(|(&x, &y)| x && y).count();
    let union = a.iter().zip(b).filter(|(&x, &y)| x || y).count();
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// IoU of the opacity map thresholded at 0.5 against a silhouette.
pub fn silhouette_iou(opacity: &Image, silhouette: &[bool]) -> Result<f64> {
    mask_iou(&opacity.threshold(0.5), silhouette)
}

fn gaussian_kernel() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let k: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian filter over the valid region.
fn filter_valid(img: &[f64], w: usize, h: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..n).map(|i| k[i] * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    (out, ow, oh)
}

/// Single-scale SSIM on luma, dynamic range 1.
pub fn ssim(pred: &Image, target: &Image) -> Result<f64> {
    pred.same_shape(target)?;
    let (w, h) = (pred.width, pred.height);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::ImageTooSmall {
            width: w,
            height: h,
            window: SSIM_WINDOW,
        });
    }
    let (x, y) = (pred.luma().data, target.luma().data);
    let k = gaussian_kernel();
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
    let (mx, ow, oh) = filter_valid(&x, w, h, &k);
    let (my, ..) = filter_valid(&y, w, h, &k);
    let (sxx, ..) = filter_valid(&prod(&x, &x), w, h, &k);
    let (syy, ..) = filter_valid(&prod(&y, &y), w, h, &k);
    let (sxy, ..) = filter_valid(&prod(&x, &y), w, h, &k);
    let (c1, c2) = ((SSIM_K1).powi(2), (SSIM_K2).powi(2));
    let total: f64 = (0..ow * oh)
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / (ow * oh) as f64)
}

/// What the metrics need from one rendered frame.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedFrame {
    pub composed: Image,
    /// The body over the background, occlusion layer removed.
    pub fg_only: Image,
    pub alpha_fg: Image,
}

impl From<&RenderOutput> for RenderedFrame {
    fn from(r: &RenderOutput) -> Self {
        Self {
            composed: r.composed.clone(),
            fg_only: r.fg_only.clone(),
            alpha_fg: r.alpha_fg.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameMetrics {
    pub frame: usize,
    /// PSNR of the composed render on visible-body pixels; absent for an empty mask.
    pub psnr_visible: Option<f64>,
    pub iou: f64,
    /// PSNR of the occluder-free render against the unoccluded ground truth.
    pub psnr_full: f64,
    pub ssim: f64,
}

pub fn frame_metrics(r: &RenderedFrame, gt: &FrameRecord) -> Result<FrameMetrics> {
    Ok(FrameMetrics {
        frame: gt.index,
        psnr_visible: masked_psnr(&r.composed, &gt.rgb, &gt.mask)?,
        iou: silhouette_iou(&r.alpha_fg, &gt.silhouette)?,
        psnr_full: psnr(&r.fg_only, &gt.gt_human)?,
        ssim: ssim(&r.fg_only, &gt.gt_human)?,
    })
}

/// Per-frame metrics and their per-frame means.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub run: String,
    pub frames: Vec<FrameMetrics>,
    pub psnr_visible: Option<f64>,
    pub iou_completeness: f64,
    pub psnr_full: f64,
    pub ssim: f64,
}

impl MetricReport {
    pub fn new(run: impl Into<String>, frames: Vec<FrameMetrics>) -> Self {
        let n = frames.len().max(1) as f64;
        let vis: Vec<f64> = frames.iter().filter_map(|f| f.psnr_visible).collect();
        Self {
            run: run.into(),
            psnr_visible: (!vis.is_empty()).then(|| vis.iter().sum::<f64>() / vis.len() as f64),
            iou_completeness: frames.iter().map(|f| f.iou).sum::<f64>() / n,
            psnr_full: frames.iter().map(|f| f.psnr_full).sum::<f64>() / n,
            ssim: frames.iter().map(|f| f.ssim).sum::<f64>() / n,
            frames,
        }
    }

    fn values(&self) -> [Option<f64>; 4] {
        [
            self.psnr_visible,
            Some(self.iou_completeness),
            Some(self.psnr_full),
            Some(self.ssim),
        ]
    }
}

pub fn evaluate(
    run: &str,
    rendered: &[RenderedFrame],
    dataset: &Dataset,
    exec: Exec,
) -> Result<MetricReport> {
    if rendered.len() != dataset.len() {
        return Err(Error::FrameCountMismatch {
            expected: dataset.len(),
            found: rendered.len(),
            what: format!("run {run}"),
        });
    }
    let idx: Vec<usize> = (0..rendered.len()).collect();
    let frames = par::map(exec, &idx, |&i| {
        frame_metrics(&rendered[i], &dataset.frames[i])
    })
    .into_iter()
    .collect::<Result<_>>()?;
    Ok(MetricReport::new(run, frames))
}

/// Renders every dataset frame from its own camera and pose.
pub fn render_dataset(
    fields: &FieldSet,
    dataset: &Dataset,
    counts: SampleCounts,
    mode: LayerMode,
    exec: Exec,
) -> Result<Vec<RenderOutput>> {
    let cfg = RenderConfig {
        sampling: SamplingConfig::new(counts),
        mode,
        tile: 256,
        exec,
    };
    (0..dataset.len())
        .map(|f| {
            let cam = &dataset.cameras[f];
            let layout = SphereLayout::for_camera(cam, dataset.spec.outer_radius)?;
            let deform = Deformer::new(&dataset.spec.skeleton, &dataset.poses[f])?;
            render_image(
                cam,
                f,
                fields,
                fields,
                &fields.store,
                &layout,
                Some(&deform),
                &cfg,
            )
        })
        .collect()
}

fn ensure_parent(p: &Path) -> Result<()> {
    if let Some(d) = p.parent() {
        std::fs::create_dir_all(d)?;
    }
    Ok(())
}

/// Writes renders in the run layout. Always: `composed/`, `fg_only/` and the
/// foreground opacity as `raw/alpha_fg_NNNN.npy`. With `layers`, also
/// `occlusion/`, `foreground/`, `background/`, and `opacity/` holding
/// `(alpha_occ, alpha_fg, alpha_bg)` as RGB, plus raw arrays of every opacity.
pub fn write_run(dir: &Path, outputs: &[RenderOutput], layers: bool) -> Result<()> {
    let run = RunLayout::new(dir);
    for (i, o) in outputs.iter().enumerate() {
        let mut files: Vec<(std::path::PathBuf, &Image)> = vec![
            (run.composed(i), &o.composed),
            (run.layer("fg_only", i), &o.fg_only),
        ];
        if layers {
            files.extend([
                (run.layer("occlusion", i), &o.occ),
                (run.layer("foreground", i), &o.fg),
                (run.layer("background", i), &o.bg),
            ]);
        }
        for (p, img) in files {
            ensure_parent(&p)?;
            io::write_png(&p, img)?;
        }
        let p = run.raw("alpha_fg", i);
        ensure_parent(&p)?;
        io::write_npy(&p, &o.alpha_fg)?;
        if layers {
            io::write_npy(&run.raw("alpha_occ", i), &o.alpha_occ)?;
            io::write_npy(&run.raw("alpha_bg", i), &o.alpha_bg)?;
            let op = Image::from_fn(o.alpha_fg.width, o.alpha_fg.height, 3, |x, y, c| {
                [&o.alpha_occ, &o.alpha_fg, &o.alpha_bg][c].get(x, y, 0)
            });
            let p = run.layer("opacity", i);
            ensure_parent(&p)?;
            io::write_png(&p, &op)?;
        }
    }
    Ok(())
}

/// Reads the frames [`write_run`] always emits.
pub fn read_run(dir: &Path, frames: usize) -> Result<Vec<RenderedFrame>> {
    let run = RunLayout::new(dir);
    (0..frames)
        .map(|i| {
            let need = |p: std::path::PathBuf| {
                if p.exists() {
                    Ok(p)
                } else {
                    Err(Error::MissingData(p.display().to_string()))
                }
            };
            Ok(RenderedFrame {
                composed: io::read_png(&need(run.composed(i))?, 3)?,
                fg_only: io::read_png(&need(run.layer("fg_only", i))?, 3)?,
                alpha_fg: io::read_npy(&need(run.raw("alpha_fg", i))?)?,
            })
        })
        .collect()
}

/// Number of consecutive composed frames in a run directory.
pub fn count_run_frames(dir: &Path) -> usize {
    let run = RunLayout::new(dir);
    (0..).take_while(|&i| run.composed(i).exists()).count()
}

pub const REPORT_CSV_HEADER: &str = "run,frame,psnr_visible,iou,psnr_full,ssim";

/// Reports of several runs; the first is the baseline for deltas.
#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub reports: Vec<MetricReport>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v:.6}"))
}

impl Comparison {
    /// Mean deltas of each run against the first, in column order.
    pub fn deltas(&self) -> Vec<[Option<f64>; 4]> {
        let Some(base) = self.reports.first() else {
            return Vec::new();
        };
        let b = base.values();
        self.reports
            .iter()
            .map(|r| {
                let v = r.values();
                [0, 1, 2, 3].map(|k| Some(v[k]? - b[k]?))
            })
            .collect()
    }

    /// One row per frame and a `mean` row per run.
    pub fn csv(&self) -> String {
        let mut s = format!("{REPORT_CSV_HEADER}\n");
        for r in &self.reports {
            for f in &r.frames {
                let _ = writeln!(
                    s,
                    "{},{},{},{:.6},{:.6},{:.6}",
                    r.run,
                    f.frame,
                    fmt_opt(f.psnr_visible),
                    f.iou,
                    f.psnr_full,
                    f.ssim
                );
            }
            let _ = writeln!(
                s,
                "{},mean,{},{:.6},{:.6},{:.6}",
                r.run,
                fmt_opt(r.psnr_visible),
                r.iou_completeness,
                r.psnr_full,
                r.ssim
            );
        }
        s
    }

    /// Aligned summary, one row per run in input order, with deltas.
    pub fn table(&self) -> String {
        let head = [
            "run",
            "psnr_visible",
            "iou",
            "psnr_full",
            "ssim",
            "d_psnr_visible",
            "d_iou",
            "d_psnr_full",
            "d_ssim",
        ];
        let mut rows: Vec<Vec<String>> = vec![head.iter().map(|s| s.to_string()).collect()];
        for (r, d) in self.reports.iter().zip(self.deltas()) {
            let mut row = vec![r.run.clone()];
            row.extend(
                r.values()
                    .iter()
                    .map(|v| v.map_or("-".into(), |v| format!("{v:.4}"))),
            );
            row.extend(
                d.iter()
                    .map(|v| v.map_or("-".into(), |v| format!("{v:+.4}"))),
            );
            rows.push(row);
        }
        let widths: Vec<usize> = (0..head.len())
            .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
            .collect();
        let mut s = String::new();
        for row in rows {
            let cells: Vec<String> = row
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:>w$}"))
                .collect();
            let _ = writeln!(s, "{}", cells.join("  ").trim_end());
        }
        s
    }
}

/// Evaluates run directories against a dataset.
pub fn compare_runs(runs: &[&Path], dataset: &Dataset, exec: Exec) -> Result<Comparison> {
    let reports = runs
        .iter()
        .map(|dir| {
            let name = dir.file_name().map_or_else(
                || dir.display().to_string(),
                |n| n.to_string_lossy().into_owned(),
            );
            let found = count_run_frames(dir);
            if found == 0 {
                return Err(Error::MissingData(format!(
                    "no rendered frames in {}",
                    dir.display()
                )));
            }
            if found != dataset.len() {
                return Err(Error::FrameCountMismatch {
                    expected: dataset.len(),
                    found,
                    what: dir.display().to_string(),
                });
            }
            evaluate(&name, &read_run(dir, found)?, dataset, exec)
        })
        .collect::<Result<_>>()?;
    Ok(Comparison { reports })
}
