//! The four commands: train, fuse, eval and ablate.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crossfuse_core::image::{max_value, YCbCrPlanes};
use crossfuse_core::metrics::{evaluate_triple, MetricReport, PairMetrics};
use crossfuse_core::training::{LossRecord, Trainer};
use crossfuse_core::{AblationFlags, Checkpoint, ColorSpace, FeatureMap, FusionNet, ImageSample};
use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::{checkpoint, io, report, CliError, CliResult, Context};

/// Reads every supported image in `dir` as a `[1, 1, H, W]` network input.
/// Unreadable files are skipped with a warning.
pub fn load_corpus(dir: &Path) -> CliResult<Vec<FeatureMap>> {
    if !dir.is_dir() {
        return Err(CliError::data(anyhow::anyhow!("corpus directory {} does not exist", dir.display())));
    }
    let mut corpus = Vec::new();
    for path in io::list_images(dir)? {
        match io::read_image(&path) {
            Ok(img) => corpus.push(img.to_network_input()),
            Err(e) => warn!("skipping {}: {e}", path.display()),
        }
    }
    if corpus.is_empty() {
        return Err(CliError::data(anyhow::anyhow!("no readable images in {}", dir.display())));
    }
    Ok(corpus)
}

/// Loss log path next to a checkpoint (`model.ckpt` -> `model.ckpt.loss.csv`).
pub fn loss_log_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".loss.csv");
    PathBuf::from(s)
}

pub fn write_loss_log(path: &Path, log: &[LossRecord]) -> CliResult<()> {
    let mut text = String::from("step,lr,loss\n");
    for r in log {
        let _ = writeln!(text, "{},{:?},{:?}", r.step, r.lr, r.loss);
    }
    fs::write(path, text)?;
    Ok(())
}

/// Trains on a corpus directory; writes the checkpoint and its loss log.
pub fn cmd_train(corpus_dir: &Path, cfg: &RunConfig, out: &Path) -> CliResult<(Checkpoint, Vec<LossRecord>)> {
    cfg.validate()?;
    let corpus = load_corpus(corpus_dir)?;
    let mut trainer = Trainer::new(cfg.network.clone(), cfg.train.clone())?;
    let total = cfg.train.total_steps(corpus.len());
    info!("training on {} images for {total} steps (seed {})", corpus.len(), cfg.train.seed);
    let log = trainer
        .fit(&corpus, &mut |r| {
            if r.step == 1 || r.step % 10 == 0 || r.step == total {
                info!("step {}/{total} lr {:.3e} loss {:.6}", r.step, r.lr, r.loss);
            }
        })
        .ctx(|| "training failed".into())?;
    let ckpt = trainer.checkpoint();
    checkpoint::save(out, &ckpt)?;
    write_loss_log(&loss_log_path(out), &log)?;
    Ok((ckpt, log))
}

/// How color inputs are handled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, clap::ValueEnum, Serialize, Deserialize)]
pub enum ColorPolicy {
    /// Fuse luminance; chroma comes from the color input(s).
    #[default]
    LuminanceFuse,
    /// Fuse intensities and write a grayscale result.
    GrayOnly,
}

#[derive(Debug, Clone)]
pub struct FusionRequest {
    pub path_a: PathBuf,
    pub path_b: PathBuf,
    pub checkpoint: PathBuf,
    pub output: PathBuf,
    pub color_policy: ColorPolicy,
}

/// Output of one fusion, before encoding to a file.
#[derive(Debug, Clone)]
pub struct FusedImage {
    /// Fused luminance plus the chroma that was reattached, present when the
    /// result is in color.
    pub planes: Option<YCbCrPlanes>,
    pub image: ImageSample,
}

/// Fuses two decoded images with a loaded model.
pub fn fuse_images(model: &FusionNet, a: &ImageSample, b: &ImageSample, policy: ColorPolicy) -> CliResult<FusedImage> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(CliError::data(anyhow::anyhow!(
            "input sizes differ: {}x{} vs {}x{}",
            a.width,
            a.height,
            b.width,
            b.height
        )));
    }
    let fused = model.fuse(&a.to_network_input(), &b.to_network_input())?;
    let color: Vec<&ImageSample> = [a, b].into_iter().filter(|i| i.color_space != ColorSpace::Gray).collect();
    if policy == ColorPolicy::GrayOnly || color.is_empty() {
        let depth = a.bit_depth.max(b.bit_depth);
        return Ok(FusedImage {
            planes: None,
            image: ImageSample::from_network_output(&fused, depth)?,
        });
    }
    let depth = color[0].bit_depth;
    let mut chroma = color[0].to_ycbcr();
    if let Some(second) = color.get(1) {
        let other = second.to_ycbcr();
        let rescale = max_value(depth) / max_value(other.bit_depth);
        for (c, o) in chroma.cb.iter_mut().zip(&other.cb).chain(chroma.cr.iter_mut().zip(&other.cr)) {
            *c = 0.5 * (*c + o * rescale);
        }
    }
    let luma = ImageSample::from_network_output(&fused, depth)?;
    let planes = YCbCrPlanes { y: luma.pixels, ..chroma };
    let image = planes.to_rgb(color[0].modality.clone());
    Ok(FusedImage {
        planes: Some(planes),
        image,
    })
}

pub fn load_model(path: &Path) -> CliResult<FusionNet> {
    let ckpt = checkpoint::load(path)?;
    ckpt.restore().ctx(|| format!("cannot restore {}", path.display()))
}

pub fn cmd_fuse(req: &FusionRequest) -> CliResult<FusedImage> {
    let model = load_model(&req.checkpoint)?;
    let a = io::read_image(&req.path_a)?;
    let b = io::read_image(&req.path_b)?;
    let fused = fuse_images(&model, &a, &b, req.color_policy)?;
    io::write_image(&req.output, &fused.image)?;
    Ok(fused)
}

/// Result of evaluating a directory triple.
#[derive(Debug, Clone)]
pub struct DirEvaluation {
    pub report: MetricReport,
    /// Fused files lacking a counterpart in one of the source directories.
    pub missing: Vec<String>,
}

/// Metrics for every fused image that has same-named sources in `dir_a` and
/// `dir_b`. Pairs are evaluated in parallel and reported in file-name order.
pub fn evaluate_dir(dir_a: &Path, dir_b: &Path, dir_fused: &Path) -> CliResult<DirEvaluation> {
    let fused = io::list_images(dir_fused)?;
    if fused.is_empty() {
        return Err(CliError::data(anyhow::anyhow!("no fused images in {}", dir_fused.display())));
    }
    let mut jobs = Vec::new();
    let mut missing = Vec::new();
    for f in fused {
        let name = f.file_name().expect("listed files have names").to_string_lossy().into_owned();
        let (a, b) = (dir_a.join(&name), dir_b.join(&name));
        if a.is_file() && b.is_file() {
            jobs.push((name, a, b, f));
        } else {
            warn!("no counterpart for {name}; skipped");
            missing.push(name);
        }
    }
    let rows: Vec<CliResult<PairMetrics>> = jobs
        .par_iter()
        .map(|(name, a, b, f)| {
            let planes = [a, b, f].map(|p| io::read_image(p).map(|i| i.to_metric_plane()));
            let [a, b, f] = planes;
            let (a, b, f) = (a?, b?, f?);
            evaluate_triple(name.clone(), &f, &a, &b).ctx(|| format!("metrics for {name}"))
        })
        .collect();
    let per_pair = rows.into_iter().collect::<CliResult<Vec<_>>>()?;
    Ok(DirEvaluation {
        report: MetricReport::from_pairs(per_pair),
        missing,
    })
}

/// Writes the report; missing counterparts make the command fail after the
/// report is written.
pub fn cmd_eval(dir_a: &Path, dir_b: &Path, dir_fused: &Path, report_path: &Path) -> CliResult<MetricReport> {
    let eval = evaluate_dir(dir_a, dir_b, dir_fused)?;
    report::write(report_path, &eval.report)?;
    if !eval.missing.is_empty() {
        return Err(CliError::data(anyhow::anyhow!(
            "missing counterparts for: {}",
            eval.missing.join(", ")
        )));
    }
    Ok(eval.report)
}

/// One row of the ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub flags: AblationFlags,
    pub seed: u64,
    pub num_params: usize,
    /// `None` when the variant failed to train or evaluate.
    pub metrics: Option<[f64; 3]>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seed: u64,
    pub rows: Vec<AblationRow>,
    /// Set when some variant failed and its row has no metrics.
    pub partial: bool,
}

impl AblationTable {
    pub fn to_text(&self) -> String {
        let mut out = format!("# ablation seed={}{}\n", self.seed, if self.partial { " PARTIAL" } else { "" });
        let _ = writeln!(out, "{:<10} {:>12} {:>12} {:>12}", "variant", "PSNR", "FMI", "Q_cv");
        for r in &self.rows {
            match (&r.metrics, &r.error) {
                (Some([p, f, q]), _) => {
                    let _ = writeln!(out, "{:<10} {p:>12.4} {f:>12.4} {q:>12.4}", r.variant);
                }
                (None, err) => {
                    let _ = writeln!(out, "{:<10} {:>12} {:>12} {:>12}  # {}", r.variant, "-", "-", "-", err.as_deref().unwrap_or("failed"));
                }
            }
        }
        out
    }
}

/// Source pairs (same file names in both directories) used for ablation
/// evaluation.
fn eval_pairs(dir_a: &Path, dir_b: &Path) -> CliResult<Vec<(String, ImageSample, ImageSample)>> {
    let mut pairs = Vec::new();
    for a in io::list_images(dir_a)? {
        let name = a.file_name().expect("listed files have names").to_string_lossy().into_owned();
        let b = dir_b.join(&name);
        if !b.is_file() {
            warn!("no counterpart for {name} in {}; skipped", dir_b.display());
            continue;
        }
        pairs.push((name, io::read_image(&a)?, io::read_image(&b)?));
    }
    if pairs.is_empty() {
        return Err(CliError::data(anyhow::anyhow!(
            "no evaluation pairs in {} / {}",
            dir_a.display(),
            dir_b.display()
        )));
    }
    Ok(pairs)
}

fn run_variant(
    corpus: &[FeatureMap],
    pairs: &[(String, ImageSample, ImageSample)],
    cfg: &RunConfig,
) -> CliResult<(usize, [f64; 3])> {
    let mut trainer = Trainer::new(cfg.network.clone(), cfg.train.clone())?;
    trainer.fit(corpus, &mut |_| {})?;
    let model = trainer.model();
    let mut rows = Vec::with_capacity(pairs.len());
    for (name, a, b) in pairs {
        let fused = fuse_images(model, a, b, ColorPolicy::GrayOnly)?.image;
        rows.push(evaluate_triple(name.clone(), &fused.to_metric_plane(), &a.to_metric_plane(), &b.to_metric_plane())?);
    }
    let report = MetricReport::from_pairs(rows);
    Ok((model.params().num_scalars(), [report.psnr, report.fmi, report.qcv]))
}

/// Trains the four variants with one seed, fuses the evaluation pairs with
/// each and tabulates mean PSNR, FMI and Q_cv. The table (text and JSON) is
/// written to `out_dir` even when a variant fails; the failure is then
/// returned.
pub fn cmd_ablate(corpus_dir: &Path, eval_a: &Path, eval_b: &Path, cfg: &RunConfig, out_dir: &Path) -> CliResult<AblationTable> {
    cfg.validate()?;
    let corpus = load_corpus(corpus_dir)?;
    let pairs = eval_pairs(eval_a, eval_b)?;
    let mut table = AblationTable {
        seed: cfg.train.seed,
        rows: Vec::new(),
        partial: false,
    };
    let mut first_error = None;
    for (name, flags) in AblationFlags::variants() {
        info!("ablation variant {name}");
        let vcfg = cfg.with_ablation(flags);
        let row = match run_variant(&corpus, &pairs, &vcfg) {
            Ok((num_params, metrics)) => AblationRow {
                variant: name.to_string(),
                flags,
                seed: vcfg.train.seed,
                num_params,
                metrics: Some(metrics),
                error: None,
            },
            Err(e) => {
                table.partial = true;
                let msg = e.to_string();
                first_error.get_or_insert(e);
                AblationRow {
                    variant: name.to_string(),
                    flags,
                    seed: vcfg.train.seed,
                    num_params: 0,
                    metrics: None,
                    error: Some(msg),
                }
            }
        };
        table.rows.push(row);
    }
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("ablation.txt"), table.to_text())?;
    fs::write(out_dir.join("ablation.json"), serde_json::to_string_pretty(&table)?)?;
    match first_error {
        Some(e) => Err(CliError {
            kind: e.kind,
            error: e.error.context("ablation incomplete; partial table written"),
        }),
        None => Ok(table),
    }
}
