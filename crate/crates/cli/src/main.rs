//! `pim`: train and apply probabilistic index map models from the command line.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use pim_core::bgsub::{self, ThresholdPolicy, DEFAULT_BACKGROUND_SIZE};
use pim_core::cluster::best_assignment;
use pim_core::hmm::{self, PimHmm, Topology, DEFAULT_BAND_PALETTE_SIZE};
use pim_core::io::{self, ModelFile, ModelPayload};
use pim_core::synth::{self, BackgroundPlant, HmmPlant, PaletteSpec, PimPlant, TmpimPlant};
use pim_core::tmpim::{self, TmpimModel};
use pim_core::transform::TransformSet;
use pim_core::{fit_pim, infer_palette, EmConfig, PimModel, SignalGrid};

#[derive(Parser)]
#[command(
    name = "pim",
    version,
    about = "Probabilistic index maps: learning, clustering, background subtraction and sequence models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Relative free-energy change at which EM stops.
    #[arg(long)]
    tol: Option<f64>,
    /// Maximum number of EM iterations.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    max_iters: Option<u64>,
    /// Seed for every random choice.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
}

impl Common {
    fn config(&self, default_max_iters: usize) -> Result<EmConfig> {
        let base = EmConfig::default();
        let cfg = EmConfig {
            tol: self.tol.unwrap_or(base.tol),
            max_iters: self.max_iters.map_or(default_max_iters, |m| m as usize),
            seed: self.seed,
            ..base
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn out_dir(&self) -> Result<&Path> {
        fs::create_dir_all(&self.out)
            .with_context(|| format!("creating {}", self.out.display()))?;
        Ok(&self.out)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Learn a PIM from a collection of images.
    TrainPim {
        /// Image files (P5/P6) or directories of them.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Palette entries per image.
        #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u64).range(1..))]
        palette_size: u64,
        #[command(flatten)]
        common: Common,
    },
    /// Re-infer palettes and index maps of images under a trained PIM.
    InferPim {
        /// Model file written by the matching training command.
        #[arg(long)]
        model: PathBuf,
        /// Image files (P5/P6) or directories of them.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Learn a background PIM from background frames.
    BgsubTrain {
        /// Background frames (P5/P6) or directories of them.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Palette entries per image.
        #[arg(long, default_value_t = DEFAULT_BACKGROUND_SIZE as u64, value_parser = clap::value_parser!(u64).range(1..))]
        palette_size: u64,
        #[command(flatten)]
        common: Common,
    },
    /// Detect foreground in frames against a trained background PIM.
    BgsubDetect {
        /// Model file written by the matching training command.
        #[arg(long)]
        model: PathBuf,
        /// Frames to test, or directories of them.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// `mad`, `mad:<k>` or `fixed:<v>`.
        #[arg(long, default_value = "mad")]
        threshold_policy: ThresholdPolicy,
        #[command(flatten)]
        common: Common,
    },
    /// Cluster images with a transformed mixture of PIMs.
    Cluster {
        /// Image files (P5/P6) or directories of them.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Number of clusters.
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        classes: u64,
        /// Palette entries per image.
        #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u64).range(1..))]
        palette_size: u64,
        /// Largest cyclic shift as `dy_max,dx_max`.
        #[arg(long, default_value = "0,0", value_parser = parse_shifts)]
        shifts: (usize, usize),
        /// Ground-truth sidecar written by `synth tmpim`; adds accuracy to the report.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Learn a PIM-HMM from spectrogram CSV files.
    HmmTrain {
        /// Spectrogram CSV files of one class, or directories of them.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Number of HMM states.
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        states: u64,
        /// Palette entries per frequency band.
        #[arg(long, default_value_t = DEFAULT_BAND_PALETTE_SIZE as u64, value_parser = clap::value_parser!(u64).range(1..))]
        palette_size: u64,
        /// Start from a fully connected transition matrix instead of left-to-right.
        #[arg(long)]
        ergodic: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Classify spectrograms by the lowest free energy over trained PIM-HMMs.
    HmmClassify {
        /// One model file per class, in class order.
        #[arg(long = "model", required = true)]
        models: Vec<PathBuf>,
        /// Spectrogram CSV files to classify, or directories of them.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Ground-truth sidecar written by `synth hmm`; adds accuracy to the report.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Write a planted dataset and its ground-truth sidecar.
    Synth {
        /// Kind of dataset to write.
        #[arg(value_enum)]
        kind: SynthKind,
        /// Image height, or number of bands for hmm.
        #[arg(long)]
        height: Option<usize>,
        /// Image width (unused by hmm).
        #[arg(long)]
        width: Option<usize>,
        /// Number of signals (pim, tmpim), training frames (background) or
        /// training utterances per word (hmm).
        #[arg(long)]
        signals: Option<usize>,
        /// Palette entries per signal (per band for hmm).
        #[arg(long)]
        palette_size: Option<usize>,
        /// Number of classes (tmpim) or words (hmm).
        #[arg(long)]
        classes: Option<usize>,
        /// HMM states per word.
        #[arg(long)]
        states: Option<usize>,
        /// Largest planted cyclic shift as `dy_max,dx_max` (tmpim).
        #[arg(long, value_parser = parse_shifts)]
        shifts: Option<(usize, usize)>,
        /// Minimum distance between palette means, in noise deviations.
        #[arg(long, default_value_t = 10.0)]
        separation: f64,
        /// Seed for every random choice.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory (created if missing).
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthKind {
    Pim,
    Tmpim,
    Background,
    Hmm,
}

fn parse_shifts(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s.split_once(',').ok_or("expected dy_max,dx_max")?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("`{v}`: {e}"));
    Ok((p(a)?, p(b)?))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::TrainPim {
            inputs,
            palette_size,
            common,
        } => train_pim(&inputs, palette_size as usize, &common),
        Command::InferPim {
            model,
            inputs,
            common,
        } => infer_pim(&model, &inputs, &common),
        Command::BgsubTrain {
            inputs,
            palette_size,
            common,
        } => train_pim(&inputs, palette_size as usize, &common),
        Command::BgsubDetect {
            model,
            inputs,
            threshold_policy,
            common,
        } => bgsub_detect(&model, &inputs, threshold_policy, &common),
        Command::Cluster {
            inputs,
            classes,
            palette_size,
            shifts,
            truth,
            common,
        } => cluster(
            &inputs,
            classes as usize,
            palette_size as usize,
            shifts,
            truth.as_deref(),
            &common,
        ),
        Command::HmmTrain {
            inputs,
            states,
            palette_size,
            ergodic,
            common,
        } => {
            let topology = if ergodic {
                Topology::Ergodic
            } else {
                Topology::LeftToRight
            };
            hmm_train(
                &inputs,
                states as usize,
                palette_size as usize,
                topology,
                &common,
            )
        }
        Command::HmmClassify {
            models,
            inputs,
            truth,
            common,
        } => hmm_classify(&models, &inputs, truth.as_deref(), &common),
        Command::Synth {
            kind,
            height,
            width,
            signals,
            palette_size,
            classes,
            states,
            shifts,
            separation,
            seed,
            out,
        } => {
            let opts = SynthOptions {
                height,
                width,
                signals,
                palette_size,
                classes,
                states,
                shifts,
                separation,
            };
            synth_cmd(kind, &opts, seed, &out)
        }
    }
}

/// Files named on the command line, with directories expanded (sorted) to
/// the files carrying one of `extensions`.
fn expand_inputs(inputs: &[PathBuf], extensions: &[&str]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for path in inputs {
        if path.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(path)
                .with_context(|| format!("reading {}", path.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    p.extension()
                        .and_then(|e| e.to_str())
                        .is_some_and(|e| extensions.contains(&e.to_ascii_lowercase().as_str()))
                })
                .collect();
            found.sort();
            out.extend(found);
        } else {
            out.push(path.clone());
        }
    }
    if out.is_empty() {
        bail!("no input files found");
    }
    Ok(out)
}

const IMAGE_EXTENSIONS: &[&str] = &["pgm", "ppm", "pnm"];
const CSV_EXTENSIONS: &[&str] = &["csv"];

fn load_images(paths: &[PathBuf]) -> Result<Vec<SignalGrid>> {
    paths
        .iter()
        .map(|p| io::load_image(p).with_context(|| format!("reading {}", p.display())))
        .collect()
}

fn load_spectrograms(paths: &[PathBuf]) -> Result<Vec<SignalGrid>> {
    paths
        .iter()
        .map(|p| io::load_spectrogram_csv(p).with_context(|| format!("reading {}", p.display())))
        .collect()
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map_or_else(String::new, |n| n.to_string_lossy().into_owned())
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map_or_else(|| "signal".into(), |n| n.to_string_lossy().into_owned())
}

fn write_trace(dir: &Path, trace: &[f64]) -> Result<()> {
    let mut text = String::from("iteration,free_energy\n");
    for (i, f) in trace.iter().enumerate() {
        text.push_str(&format!("{i},{f}\n"));
    }
    fs::write(dir.join("trace.csv"), text)?;
    Ok(())
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// Label map as a gray image, labels spread over `[0, 1]`.
fn label_image(height: usize, width: usize, labels: &[usize], size: usize) -> Result<SignalGrid> {
    let scale = if size > 1 { (size - 1) as f64 } else { 1.0 };
    Ok(SignalGrid::new(
        height,
        width,
        1,
        labels.iter().map(|&l| l as f64 / scale).collect(),
    )?)
}

fn load_model(path: &Path) -> Result<ModelFile> {
    io::load_model(path).with_context(|| format!("reading model {}", path.display()))
}

fn load_pim(path: &Path) -> Result<PimModel> {
    match load_model(path)?.model {
        ModelPayload::Pim(m) => Ok(m),
        other => bail!(
            "{} holds a {} model, expected pim",
            path.display(),
            other.kind()
        ),
    }
}

fn load_hmm(path: &Path) -> Result<PimHmm> {
    match load_model(path)?.model {
        ModelPayload::PimHmm(m) => Ok(m),
        other => bail!(
            "{} holds a {} model, expected pim_hmm",
            path.display(),
            other.kind()
        ),
    }
}

fn train_pim(inputs: &[PathBuf], size: usize, common: &Common) -> Result<()> {
    let cfg = common.config(EmConfig::default().max_iters)?;
    let paths = expand_inputs(inputs, IMAGE_EXTENSIONS)?;
    let grids = load_images(&paths)?;
    let model = fit_pim(&grids, size, &cfg)?;
    let dir = common.out_dir()?;
    write_trace(dir, &model.trace)?;
    let (h, w) = (model.prior.height(), model.prior.width());
    io::save_image(
        dir.join("index_map.pgm"),
        &label_image(h, w, &model.index_map(), size)?,
    )?;
    write_json(
        &dir.join("summary.json"),
        &json!({
            "signals": paths.iter().map(|p| file_name(p)).collect::<Vec<_>>(),
            "iterations": model.trace.len(),
            "final_free_energy": model.final_free_energy,
        }),
    )?;
    io::save_model(
        dir.join("model.json"),
        &ModelFile::new(ModelPayload::Pim(model), &cfg),
    )?;
    Ok(())
}

fn infer_pim(model_path: &Path, inputs: &[PathBuf], common: &Common) -> Result<()> {
    let cfg = common.config(bgsub::default_test_config().max_iters)?;
    let model = load_pim(model_path)?;
    let paths = expand_inputs(inputs, IMAGE_EXTENSIONS)?;
    let dir = common.out_dir()?;
    let mut table = String::from("file,free_energy\n");
    for path in &paths {
        let grid = io::load_image(path).with_context(|| format!("reading {}", path.display()))?;
        let fit = infer_palette(&grid, &model.prior, &cfg)
            .with_context(|| format!("inferring {}", path.display()))?;
        let labels = fit.resps.argmax_map();
        io::save_image(
            dir.join(format!("{}_index.pgm", stem(path))),
            &label_image(grid.height(), grid.width(), &labels, model.palette_size)?,
        )?;
        table.push_str(&format!("{},{}\n", file_name(path), fit.free_energy));
    }
    fs::write(dir.join("free_energies.csv"), table)?;
    Ok(())
}

fn bgsub_detect(
    model_path: &Path,
    inputs: &[PathBuf],
    policy: ThresholdPolicy,
    common: &Common,
) -> Result<()> {
    let cfg = common.config(bgsub::default_test_config().max_iters)?;
    let model = load_pim(model_path)?;
    let paths = expand_inputs(inputs, IMAGE_EXTENSIONS)?;
    let dir = common.out_dir()?;
    let mut table = String::from("file,threshold,foreground_fraction\n");
    for path in &paths {
        let grid = io::load_image(path).with_context(|| format!("reading {}", path.display()))?;
        let r = bgsub::detect(&grid, Some(&model.prior), policy, &cfg)
            .with_context(|| format!("detecting in {}", path.display()))?;
        let (h, w) = (grid.height(), grid.width());
        let name = stem(path);
        io::save_mask(dir.join(format!("{name}_mask.pgm")), h, w, &r.mask)?;
        let lo = r.energy_map.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = r
            .energy_map
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let scaled = SignalGrid::new(
            h,
            w,
            1,
            r.energy_map.iter().map(|f| (f - lo) / span).collect(),
        )?;
        io::save_image(dir.join(format!("{name}_energy.pgm")), &scaled)?;
        let raw = SignalGrid::new(h, w, 1, r.energy_map.clone())?;
        io::save_spectrogram_csv(dir.join(format!("{name}_energy.csv")), &raw)?;
        let ext = if r.expected_background.dim() == 3 {
            "ppm"
        } else {
            "pgm"
        };
        if matches!(r.expected_background.dim(), 1 | 3) {
            io::save_image(
                dir.join(format!("{name}_background.{ext}")),
                &r.expected_background,
            )?;
        }
        let fraction = r.mask.iter().filter(|&&m| m).count() as f64 / r.mask.len() as f64;
        table.push_str(&format!(
            "{},{},{}\n",
            file_name(path),
            r.threshold,
            fraction
        ));
    }
    fs::write(dir.join("detections.csv"), table)?;
    Ok(())
}

/// Fraction of signals whose cluster matches the truth under the best
/// one-to-one relabelling of clusters.
fn clustering_accuracy(found: &[usize], truth: &[usize]) -> f64 {
    let k = found.iter().chain(truth).max().map_or(1, |m| m + 1);
    let mut score = vec![vec![0.0; k]; k];
    for (&t, &f) in truth.iter().zip(found) {
        score[t][f] += 1.0;
    }
    let perm = best_assignment(&score);
    let hits: f64 = perm.iter().enumerate().map(|(t, &f)| score[t][f]).sum();
    hits / truth.len().max(1) as f64
}

/// Truth labels from a sidecar list, matched by the sidecar's relative path
/// being a suffix of the input path.
fn truth_labels(path: &Path, list: &str, field: &str, files: &[PathBuf]) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let entries = value[list]
        .as_array()
        .with_context(|| format!("{} has no `{list}` list", path.display()))?;
    files
        .iter()
        .map(|f| {
            entries
                .iter()
                .find(|e| e["file"].as_str().is_some_and(|n| f.ends_with(n)))
                .and_then(|e| e[field].as_u64())
                .map(|c| c as usize)
                .with_context(|| format!("{} has no `{field}` for {}", path.display(), f.display()))
        })
        .collect()
}

fn cluster(
    inputs: &[PathBuf],
    classes: usize,
    size: usize,
    shifts: (usize, usize),
    truth: Option<&Path>,
    common: &Common,
) -> Result<()> {
    let cfg = common.config(EmConfig::default().max_iters)?;
    let paths = expand_inputs(inputs, IMAGE_EXTENSIONS)?;
    let grids = load_images(&paths)?;
    let (h, w) = (grids[0].height(), grids[0].width());
    let tset = TransformSet::centered_shifts(shifts.0, shifts.1, h, w);
    let fit = tmpim::fit_tmpim(&grids, classes, size, tset, &cfg)?;
    let dir = common.out_dir()?;
    write_trace(dir, &fit.trace)?;
    let assignments = tmpim::cluster_assignments(&fit.posteriors);
    let mut table = String::from("file,class,dy,dx\n");
    for ((path, post), &c) in paths.iter().zip(&fit.posteriors).zip(&assignments) {
        let (dy, dx) = post.transform(&fit.model.tset).signed(h, w);
        table.push_str(&format!("{},{c},{dy},{dx}\n", file_name(path)));
    }
    fs::write(dir.join("assignments.csv"), table)?;
    for (c, map) in fit.model.class_pims.iter().enumerate() {
        io::save_image(
            dir.join(format!("class_{c}_index_map.pgm")),
            &label_image(h, w, &map.argmax_map(), size)?,
        )?;
    }
    let accuracy = match truth {
        Some(t) => Some(clustering_accuracy(
            &assignments,
            &truth_labels(t, "signals", "class", &paths)?,
        )),
        None => None,
    };
    write_json(
        &dir.join("report.json"),
        &json!({
            "signals": paths.len(),
            "classes": classes,
            "iterations": fit.trace.len(),
            "final_free_energy": fit.final_free_energy,
            "class_sizes": (0..classes).map(|c| assignments.iter().filter(|&&a| a == c).count()).collect::<Vec<_>>(),
            "accuracy": accuracy,
        }),
    )?;
    let model: TmpimModel = fit.model;
    io::save_model(
        dir.join("model.json"),
        &ModelFile::new(ModelPayload::Tmpim(model), &cfg),
    )?;
    Ok(())
}

fn hmm_train(
    inputs: &[PathBuf],
    states: usize,
    size: usize,
    topology: Topology,
    common: &Common,
) -> Result<()> {
    let cfg = common.config(EmConfig::default().max_iters)?;
    let paths = expand_inputs(inputs, CSV_EXTENSIONS)?;
    let utterances = load_spectrograms(&paths)?;
    let fit = hmm::fit_pim_hmm(&utterances, states, size, topology, &cfg)?;
    let dir = common.out_dir()?;
    write_trace(dir, &fit.trace)?;
    write_json(
        &dir.join("summary.json"),
        &json!({
            "utterances": paths.iter().map(|p| file_name(p)).collect::<Vec<_>>(),
            "iterations": fit.trace.len(),
            "final_free_energy": fit.final_free_energy,
        }),
    )?;
    io::save_model(
        dir.join("model.json"),
        &ModelFile::new(ModelPayload::PimHmm(fit.model), &cfg),
    )?;
    Ok(())
}

fn hmm_classify(
    model_paths: &[PathBuf],
    inputs: &[PathBuf],
    truth: Option<&Path>,
    common: &Common,
) -> Result<()> {
    let cfg = common.config(EmConfig::default().max_iters)?;
    let models = model_paths
        .iter()
        .map(|p| load_hmm(p))
        .collect::<Result<Vec<_>>>()?;
    let paths = expand_inputs(inputs, CSV_EXTENSIONS)?;
    let dir = common.out_dir()?;
    let mut header = String::from("file,best");
    for m in 0..models.len() {
        header.push_str(&format!(",free_energy_{m}"));
    }
    let mut table = header + "\n";
    let mut decisions = Vec::with_capacity(paths.len());
    for path in &paths {
        let utt = io::load_spectrogram_csv(path)
            .with_context(|| format!("reading {}", path.display()))?;
        let (best, energies) = hmm::classify_utterance(&utt, &models, &cfg)
            .with_context(|| format!("classifying {}", path.display()))?;
        table.push_str(&format!("{},{best}", path.display()));
        for f in energies {
            table.push_str(&format!(",{f}"));
        }
        table.push('\n');
        decisions.push(best);
    }
    fs::write(dir.join("classification.csv"), table)?;
    let accuracy = match truth {
        Some(t) => {
            let labels = truth_labels(t, "test", "word", &paths)?;
            Some(
                labels
                    .iter()
                    .zip(&decisions)
                    .filter(|(a, b)| a == b)
                    .count() as f64
                    / labels.len() as f64,
            )
        }
        None => None,
    };
    write_json(
        &dir.join("report.json"),
        &json!({ "utterances": paths.len(), "accuracy": accuracy }),
    )?;
    Ok(())
}

struct SynthOptions {
    height: Option<usize>,
    width: Option<usize>,
    signals: Option<usize>,
    palette_size: Option<usize>,
    classes: Option<usize>,
    states: Option<usize>,
    shifts: Option<(usize, usize)>,
    separation: f64,
}

fn image_palette(size: usize, separation: f64, noise_std: f64) -> PaletteSpec {
    PaletteSpec {
        dim: 3,
        size,
        separation,
        noise_std,
        low: 0.1,
        high: 0.9,
    }
}

fn synth_cmd(kind: SynthKind, o: &SynthOptions, seed: u64, out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    match kind {
        SynthKind::Pim => {
            let plant = PimPlant {
                height: o.height.unwrap_or(8),
                width: o.width.unwrap_or(8),
                signals: o.signals.unwrap_or(20),
                block: 2,
                palette: image_palette(o.palette_size.unwrap_or(3), o.separation, 0.03),
            };
            let data = plant.generate(seed)?;
            let files = write_images(out, "signals", "signal", &data.grids)?;
            write_json(
                &out.join("truth.json"),
                &json!({
                    "kind": "pim",
                    "seed": seed,
                    "plant": plant,
                    "height": plant.height,
                    "width": plant.width,
                    "index_map": data.index_map,
                    "signals": files.iter().zip(&data.palettes).map(|(f, p)| json!({ "file": f, "palette": p })).collect::<Vec<_>>(),
                }),
            )?;
        }
        SynthKind::Tmpim => {
            let (dy, dx) = o.shifts.unwrap_or((3, 3));
            let plant = TmpimPlant {
                height: o.height.unwrap_or(12),
                width: o.width.unwrap_or(12),
                classes: o.classes.unwrap_or(2),
                signals: o.signals.unwrap_or(40),
                max_shift: dy.max(dx),
                block: 3,
                palette: image_palette(o.palette_size.unwrap_or(3), o.separation, 0.03),
            };
            let data = plant.generate(seed)?;
            let files = write_images(out, "signals", "signal", &data.grids)?;
            write_json(
                &out.join("truth.json"),
                &json!({
                    "kind": "tmpim",
                    "seed": seed,
                    "plant": plant,
                    "class_maps": data.class_maps,
                    "signals": files.iter().zip(&data.classes).zip(&data.shifts)
                        .map(|((f, c), s)| json!({ "file": f, "class": c, "shift": [s.0, s.1] }))
                        .collect::<Vec<_>>(),
                }),
            )?;
        }
        SynthKind::Background => {
            let plant = BackgroundPlant {
                height: o.height.unwrap_or(32),
                width: o.width.unwrap_or(32),
                frames: o.signals.unwrap_or(10),
                block: 4,
                palette: image_palette(
                    o.palette_size.unwrap_or(DEFAULT_BACKGROUND_SIZE),
                    o.separation,
                    0.02,
                ),
                gain_low: 0.8,
                gain_high: 1.2,
                flip_rate: 0.01,
            };
            let data = plant.generate(seed)?;
            let files = write_images(out, "train", "frame", &data.frames)?;
            let pure = data.test_frame(0.3, 0.0, 20.0, seed.wrapping_add(1))?;
            let blob = data.test_frame(0.3, 0.05, 20.0, seed.wrapping_add(2))?;
            fs::create_dir_all(out.join("test"))?;
            io::save_image(out.join("test/pure.ppm"), &pure.grid)?;
            io::save_image(out.join("test/blob.ppm"), &blob.grid)?;
            fs::create_dir_all(out.join("truth"))?;
            io::save_mask(
                out.join("truth/blob_mask.pgm"),
                plant.height,
                plant.width,
                &blob.foreground,
            )?;
            write_json(
                &out.join("truth.json"),
                &json!({
                    "kind": "background",
                    "seed": seed,
                    "plant": plant,
                    "index_map": data.index_map,
                    "train": files,
                    "test": [
                        { "file": "test/pure.ppm", "gain": 0.3, "foreground": pure.foreground },
                        { "file": "test/blob.ppm", "gain": 0.3, "foreground": blob.foreground },
                    ],
                }),
            )?;
        }
        SynthKind::Hmm => {
            let bands = o.height.unwrap_or(10);
            let plant = HmmPlant {
                bands,
                states: o.states.unwrap_or(5),
                palette: PaletteSpec {
                    dim: 1,
                    size: o.palette_size.unwrap_or(4),
                    separation: o.separation,
                    noise_std: 1.0,
                    low: 0.0,
                    high: 60.0,
                },
                confidence: 0.95,
                min_duration: 4,
                max_duration: 8,
            };
            let words = o.classes.unwrap_or(2);
            let per_word = o.signals.unwrap_or(10);
            let mut labels = Vec::with_capacity(words);
            let mut test = Vec::new();
            for w in 0..words {
                let word = plant.word(seed.wrapping_mul(1000).wrapping_add(w as u64))?;
                let base = seed.wrapping_mul(100_000).wrapping_add(1000 * w as u64);
                for n in 0..per_word {
                    let u = word.utterance(None, base + n as u64)?;
                    let rel = format!("word_{w}/train/utt_{n:03}.csv");
                    write_csv(out, &rel, &u.grid)?;
                }
                for n in 0..per_word {
                    let offsets = synth::band_offsets(bands, 20.0, base + 500 + n as u64);
                    let u = word.utterance(Some(&offsets), base + 700 + n as u64)?;
                    let rel = format!("word_{w}/test/utt_{n:03}.csv");
                    write_csv(out, &rel, &u.grid)?;
                    test.push(
                        json!({ "file": rel, "word": w, "states": u.states, "offsets": offsets }),
                    );
                }
                labels.push(word.labels);
            }
            write_json(
                &out.join("truth.json"),
                &json!({ "kind": "hmm", "seed": seed, "plant": plant, "word_labels": labels, "test": test }),
            )?;
        }
    }
    Ok(())
}

fn write_images(out: &Path, sub: &str, prefix: &str, grids: &[SignalGrid]) -> Result<Vec<String>> {
    fs::create_dir_all(out.join(sub))?;
    grids
        .iter()
        .enumerate()
        .map(|(n, g)| {
            let rel = format!("{sub}/{prefix}_{n:03}.ppm");
            io::save_image(out.join(&rel), g)?;
            Ok(rel)
        })
        .collect()
}

fn write_csv(out: &Path, rel: &str, grid: &SignalGrid) -> Result<()> {
    let path = out.join(rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    io::save_spectrogram_csv(path, grid)?;
    Ok(())
}
