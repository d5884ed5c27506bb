use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use dkdenoise::checkpoint::ModelCheckpoint;
use dkdenoise::color_noise::{gamma_forward, gamma_inverse, synthesize_noise, NoiseParams};
use dkdenoise::config::{apply, KvConfig};
use dkdenoise::dataio::{
    denoise_color_sequence, denoise_sequence, evaluate_sequence, make_toy_dataset, write_image, PatternFamily,
    SceneEntry, SequenceManifest, ToyDatasetConfig,
};
use dkdenoise::gradcheck::{run_gradcheck, GradcheckConfig};
use dkdenoise::metrics::QualityReport;
use dkdenoise::network::{Mode, NetConfig};
use dkdenoise::par::Exec;
use dkdenoise::trainer::{Dataset, StepStats, TrainConfig, Trainer};
use dkdenoise::{Error, Tensor};

const EXIT_FAILURE: u8 = 1;
const EXIT_IO: u8 = 3;
const EXIT_INCOMPATIBLE: u8 = 4;
const EXIT_GRADCHECK: u8 = 5;
const EXIT_NON_FINITE: u8 = 6;

#[derive(Parser)]
#[command(name = "dkdenoise", version, about = "Deformable-kernel video denoising")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic toy dataset and its manifest.
    GenData(GenData),
    /// Add signal-dependent noise to every frame of a manifest.
    SynthNoise(SynthNoise),
    /// Train a network on the clean frames of a manifest.
    Train(Train),
    /// Denoise every full temporal window of a manifest.
    Denoise(Denoise),
    /// Score predictions against ground truth.
    Eval(Eval),
    /// Finite-difference check of every differentiable operator.
    Gradcheck(Gradcheck),
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 16)]
    scenes: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 5)]
    frames: usize,
    /// Largest per-frame translation in pixels.
    #[arg(long, default_value_t = 3)]
    motion: usize,
    #[arg(long, default_value = "mixed")]
    pattern: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Low,
    High,
}

#[derive(Args)]
struct NoiseArgs {
    #[arg(long, value_enum, conflicts_with_all = ["sigma_s", "sigma_r"])]
    preset: Option<Preset>,
    #[arg(long, requires = "sigma_r")]
    sigma_s: Option<f64>,
    #[arg(long, requires = "sigma_s")]
    sigma_r: Option<f64>,
}

impl NoiseArgs {
    fn resolve(&self) -> dkdenoise::Result<Option<NoiseParams>> {
        Ok(match (self.preset, self.sigma_s, self.sigma_r) {
            (Some(Preset::Low), _, _) => Some(NoiseParams::LOW),
            (Some(Preset::High), _, _) => Some(NoiseParams::HIGH),
            (None, Some(s), Some(r)) => Some(NoiseParams::new(s, r)?),
            _ => None,
        })
    }
}

#[derive(Args)]
struct SynthNoise {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    noise: NoiseArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct Train {
    /// Manifest of clean training sequences.
    #[arg(long)]
    manifest: PathBuf,
    /// key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any configuration key, e.g. `--set batch_size=8`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    blind: bool,
    #[arg(long)]
    fixed_grid: bool,
    #[arg(long)]
    no_anneal: bool,
    #[arg(long)]
    no_dynamic_weights: bool,
    #[arg(long)]
    iters: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from a checkpoint; its network configuration wins.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Output checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// Training log; defaults to `<out>.log`.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct Denoise {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Process R, G and B independently with the grayscale network.
    #[arg(long)]
    color: bool,
    /// Noise parameters; defaults to the manifest's `#noise` directive.
    #[command(flatten)]
    noise: NoiseArgs,
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct Eval {
    /// Manifest of predictions.
    #[arg(long)]
    pred: PathBuf,
    /// Manifest of ground truth.
    #[arg(long)]
    truth: PathBuf,
    /// Report prefix; writes `<out>.tsv` and `<out>.json`.
    #[arg(long)]
    out: PathBuf,
    /// Score only the center frame of each prediction.
    #[arg(long)]
    center_only: bool,
}

#[derive(Args)]
struct Gradcheck {
    #[arg(long, default_value_t = 200)]
    instances: usize,
    #[arg(long, default_value_t = 40)]
    probes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

enum Failure {
    Lib(Error),
    Gradcheck,
    NonFinite(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } => EXIT_IO,
        Error::Incompatible(_) | Error::Format { .. } | Error::Image { .. } | Error::Invalid(_) => EXIT_INCOMPATIBLE,
        Error::NonFinite(_) => EXIT_NON_FINITE,
        _ => EXIT_FAILURE,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::SynthNoise(a) => synth_noise(a),
        Command::Train(a) => train(a),
        Command::Denoise(a) => denoise(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
        Err(Failure::NonFinite(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_NON_FINITE)
        }
        Err(Failure::Gradcheck) => ExitCode::from(EXIT_GRADCHECK),
    }
}

fn gen_data(a: GenData) -> CmdResult {
    let cfg = ToyDatasetConfig {
        num_scenes: a.scenes,
        size: a.size,
        frames: a.frames,
        motion: a.motion,
        pattern: a.pattern.parse::<PatternFamily>()?,
        seed: a.seed,
    };
    let m = make_toy_dataset(&cfg, &a.out)?;
    println!("wrote {} scenes to {}", m.scenes.len(), a.out.join("manifest.txt").display());
    Ok(())
}

fn create_dir(p: &Path) -> dkdenoise::Result<()> {
    std::fs::create_dir_all(p).map_err(|source| Error::Io {
        path: p.display().to_string(),
        source,
    })
}

/// Writes `[L·C, H, W]` frames of one scene and returns the manifest entry.
fn write_scene(out: &Path, id: &str, frames: &Tensor, channels: usize, m: &SequenceManifest) -> dkdenoise::Result<SceneEntry> {
    let dir = out.join(id);
    create_dir(&dir)?;
    let format = m.format.with_channels(channels);
    let n = frames.shape()[0] / channels;
    let mut paths = Vec::with_capacity(n);
    for k in 0..n {
        let rel = PathBuf::from(id).join(format!("f{k:03}.png"));
        write_image(&out.join(&rel), &frames.narrow0(k * channels, (k + 1) * channels)?, format)?;
        paths.push(rel);
    }
    Ok(SceneEntry {
        id: id.to_string(),
        frames: paths,
    })
}

fn synth_noise(a: SynthNoise) -> CmdResult {
    let noise = a
        .noise
        .resolve()?
        .ok_or_else(|| Error::Invalid("give --preset or both --sigma-s and --sigma-r".into()))?;
    let input = SequenceManifest::load(&a.manifest)?;
    create_dir(&a.out)?;
    let mut out = SequenceManifest::new(input.format, &a.out);
    out.noise = Some(noise);
    for (i, scene) in input.scenes.iter().enumerate() {
        let (clean, c) = input.load_scene(scene)?;
        let noisy = synthesize_noise(&gamma_inverse(&clean), &noise, a.seed.wrapping_add(i as u64));
        out.scenes.push(write_scene(&a.out, &scene.id, &gamma_forward(&noisy), c, &input)?);
    }
    out.save(&a.out.join("manifest.txt"))?;
    println!("wrote {} noisy scenes to {}", out.scenes.len(), a.out.join("manifest.txt").display());
    Ok(())
}

fn train(a: Train) -> CmdResult {
    let mut net = NetConfig::default();
    let mut cfg = TrainConfig::default();
    if let Some(p) = &a.config {
        apply(&KvConfig::load(p)?, &mut net, &mut cfg)?;
    }
    let mut kv = KvConfig::default();
    for o in &a.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Invalid(format!("--set expects KEY=VALUE, got `{o}`")))?;
        kv.push(k.trim(), v.trim());
    }
    apply(&kv, &mut net, &mut cfg)?;
    if let Some(m) = a.mode {
        net.mode = m;
    }
    net.blind |= a.blind;
    net.fixed_grid |= a.fixed_grid;
    if a.no_dynamic_weights {
        net.dynamic_weights = false;
    }
    if a.no_anneal {
        cfg.anneal.enabled = false;
    }
    if let Some(n) = a.iters {
        cfg.max_iters = n;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if a.sequential {
        cfg.exec = Exec::Sequential;
    }

    let manifest = SequenceManifest::load(&a.manifest)?;
    let seqs = manifest
        .scenes
        .iter()
        .map(|s| manifest.load_gray_scene(s).map(|t| gamma_inverse(&t)))
        .collect::<dkdenoise::Result<Vec<_>>>()?;
    let data = Dataset::new(seqs)?;

    let mut trainer = match &a.resume {
        Some(p) => {
            let ck = ModelCheckpoint::load(p)?;
            if a.config.is_some() || !a.overrides.is_empty() {
                net.validate()?;
                if net != ck.config {
                    return Err(Error::Incompatible(format!(
                        "{} was trained with a different network configuration",
                        p.display()
                    ))
                    .into());
                }
            }
            Trainer::from_checkpoint(ck, cfg.clone())?
        }
        None => Trainer::new(net, cfg.clone())?,
    };

    let log_path = a.log.clone().unwrap_or_else(|| a.out.with_extension("log"));
    let append = a.resume.is_some() && log_path.exists();
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(append)
        .write(true)
        .truncate(!append)
        .open(&log_path)
        .map_err(|source| Error::Io {
            path: log_path.display().to_string(),
            source,
        })?;
    let mut log = BufWriter::new(file);
    let log_err = |source| Error::Io {
        path: log_path.display().to_string(),
        source,
    };
    if !append {
        writeln!(log, "{}", StepStats::LOG_HEADER).map_err(log_err)?;
    }

    let mut last: Option<StepStats> = None;
    let every = cfg.log_every.max(1);
    let result = trainer.run(&data, |s, t| {
        if s.iteration % every == 0 || s.iteration + 1 == cfg.max_iters {
            writeln!(log, "{}", s.log_line()).map_err(log_err)?;
        }
        if cfg.checkpoint_every > 0 && (s.iteration + 1) % cfg.checkpoint_every == 0 {
            log.flush().map_err(log_err)?;
            t.checkpoint().save(&a.out)?;
        }
        last = Some(s.clone());
        Ok(())
    });
    log.flush().map_err(log_err)?;
    match result {
        Ok(()) => {
            trainer.checkpoint().save(&a.out)?;
            if let Some(s) = last {
                println!("iteration {} loss {:.6} l1 {:.6}", s.iteration, s.loss, s.l1);
            }
            println!("saved {}", a.out.display());
            Ok(())
        }
        Err(e @ Error::NonFinite(_)) => {
            let dump = a.out.with_extension("nonfinite.ckpt");
            trainer.checkpoint().save(&dump)?;
            let mut text = format!("error\t{e}\niteration\t{}\n", trainer.iteration());
            if let Some(s) = &last {
                text.push_str(&format!("last_good\t{}\n", s.log_line()));
            }
            text.push_str(&trainer.cfg.to_kv().to_text());
            text.push_str(&trainer.net.to_kv().to_text());
            let txt = a.out.with_extension("nonfinite.txt");
            std::fs::write(&txt, text).map_err(|source| Error::Io {
                path: txt.display().to_string(),
                source,
            })?;
            eprintln!("state dumped to {} and {}", dump.display(), txt.display());
            Err(Failure::NonFinite(e))
        }
        Err(e) => Err(e.into()),
    }
}

fn denoise(a: Denoise) -> CmdResult {
    let ck = ModelCheckpoint::load(&a.checkpoint)?;
    let input = SequenceManifest::load(&a.manifest)?;
    let noise = match a.noise.resolve()?.or(input.noise) {
        Some(n) => Some(n),
        None if ck.config.blind => None,
        None => {
            return Err(Error::Invalid(
                "non-blind checkpoint needs noise parameters (manifest #noise or --preset/--sigma-s/--sigma-r)".into(),
            )
            .into())
        }
    };
    let exec = if a.sequential { Exec::Sequential } else { Exec::default() };
    create_dir(&a.out)?;
    let mut out = SequenceManifest::new(input.format, &a.out);
    out.noise = input.noise;
    for scene in &input.scenes {
        let (frames, c) = input.load_scene(scene)?;
        let result = match (c, a.color) {
            (1, false) => denoise_sequence(&ck.config, &ck.params, &frames, noise.as_ref(), exec)?,
            (3, true) => denoise_color_sequence(&ck.config, &ck.params, &frames, noise.as_ref(), exec)?,
            (3, false) => {
                return Err(Error::Format {
                    what: "manifest",
                    detail: format!("scene `{}` is color; pass --color", scene.id),
                }
                .into())
            }
            _ => {
                return Err(Error::Format {
                    what: "manifest",
                    detail: format!("scene `{}` has {c} channels, --color expects 3", scene.id),
                }
                .into())
            }
        };
        out.scenes.push(write_scene(&a.out, &scene.id, &result, c, &input)?);
    }
    out.save(&a.out.join("manifest.txt"))?;
    println!("wrote {} scenes to {}", out.scenes.len(), a.out.join("manifest.txt").display());
    Ok(())
}

fn eval(a: Eval) -> CmdResult {
    let pred = SequenceManifest::load(&a.pred)?;
    let truth = SequenceManifest::load(&a.truth)?;
    let mut reports: Vec<QualityReport> = Vec::with_capacity(pred.scenes.len());
    for scene in &pred.scenes {
        let t = truth
            .scenes
            .iter()
            .find(|s| s.id == scene.id)
            .ok_or_else(|| Error::Format {
                what: "manifest",
                detail: format!("scene `{}` missing from {}", scene.id, a.truth.display()),
            })?;
        let (mut p, c) = pred.load_scene(scene)?;
        let (g, _) = truth.load_scene(t)?;
        if a.center_only {
            let mid = p.shape()[0] / c / 2;
            p = p.narrow0(mid * c, (mid + 1) * c)?;
        }
        let mut g = g;
        if a.center_only {
            let mid = g.shape()[0] / c / 2;
            g = g.narrow0(mid * c, (mid + 1) * c)?;
        }
        reports.push(evaluate_sequence(&scene.id, &p, &g, c)?);
    }
    if reports.is_empty() {
        return Err(Error::Format {
            what: "manifest",
            detail: format!("{} lists no scenes", a.pred.display()),
        }
        .into());
    }
    let mut tsv = String::from("id\tpsnr\tssim\n");
    for r in &reports {
        tsv.push_str(&format!("{}\t{:.4}\t{:.6}\n", r.id, r.psnr, r.ssim));
    }
    let n = reports.len() as f64;
    let mean_psnr = reports.iter().map(|r| r.psnr).sum::<f64>() / n;
    let mean_ssim = reports.iter().map(|r| r.ssim).sum::<f64>() / n;
    let write = |path: PathBuf, text: String| {
        std::fs::write(&path, text).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })
    };
    write(with_suffix(&a.out, "tsv"), tsv)?;
    let json = serde_json::to_string_pretty(&reports).map_err(|e| Error::Invalid(e.to_string()))?;
    write(with_suffix(&a.out, "json"), json + "\n")?;
    println!("scenes {}\tmean_psnr {mean_psnr:.4}\tmean_ssim {mean_ssim:.6}", reports.len());
    Ok(())
}

fn with_suffix(prefix: &Path, ext: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn gradcheck(a: Gradcheck) -> CmdResult {
    let report = run_gradcheck(&GradcheckConfig {
        seed: a.seed,
        instances: a.instances,
        e2e_probes: a.probes,
    })?;
    print!("{}", report.to_text());
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Gradcheck)
    }
}
