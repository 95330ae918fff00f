use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use prnuda::augment::gaussian_blur;
use prnuda::checkpoint;
use prnuda::config::{DataSource, RunConfig};
use prnuda::data::io::{default_palette, write_image, write_labels};
use prnuda::data::{benchmark, write_folder, DatasetManifest, Domain, SynthConfig};
use prnuda::gradcheck::{format_report, run_gradcheck};
use prnuda::numerics::{argmax_labels, Grid, LabelMap, IGNORE};
use prnuda::render::{colorize, hstack, mask_image};
use prnuda::runner::{ablation_table, run_eval, run_train, runs_root, RunSummary, RUNS_DIR_ENV};
use prnuda::segnet::segment;
use prnuda::spectral::{fda_image, make_noise_mask_gt, perturb_logits};

#[derive(Parser)]
#[command(name = "prnuda", version, about = "Self-training domain adaptation for segmentation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one configuration and write a run directory.
    Train {
        /// Config file of `key = value` lines.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Extra `key=value` assignments applied after the file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        /// Shorthand for `switches.preset`.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long, env = RUNS_DIR_ENV)]
        runs_dir: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset manifest or on a run's own split.
    Eval {
        /// Run directory; uses its final checkpoint and validation manifest.
        #[arg(long, conflicts_with_all = ["checkpoint", "manifest"])]
        run: Option<PathBuf>,
        #[arg(long, requires = "manifest")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Write image/prediction/ground-truth panels here.
        #[arg(long)]
        overlays: Option<PathBuf>,
    },
    /// Render label maps before and after a logit amplitude swap.
    PerturbDemo {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        eps: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Take logits from this checkpoint instead of smoothed ground truth.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Render a source image restyled with a target image's amplitude.
    FdaDemo {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.005)]
        eps: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference check of every loss gradient.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write the synthetic benchmark as source/, target/ and val/ folders.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
    /// Print an ablation table from run directories.
    Table { runs: Vec<PathBuf> },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.cmd {
        Cmd::Train { config, mut sets, preset, seed, steps, runs_dir } => {
            if let Some(p) = preset {
                sets.push(format!("switches.preset={p}"));
            }
            if let Some(s) = seed {
                sets.push(format!("run.seed={s}"));
            }
            if let Some(s) = steps {
                sets.push(format!("run.steps={s}"));
            }
            let cfg = RunConfig::load(config.as_deref(), &sets)?;
            let (dir, summary) = run_train(&cfg, &runs_dir.unwrap_or_else(runs_root))?;
            println!("{}", dir.display());
            println!("{}", serde_json::to_string_pretty(&summary.final_eval)?);
        }
        Cmd::Eval { run, checkpoint, manifest, overlays } => {
            let (ckpt, manifest_path, expected) = match run {
                Some(dir) => {
                    let cfg = RunConfig::load(Some(&dir.join("config.txt")), &[])?;
                    let arch = prnuda::segnet::Arch::segmenter(cfg.data.num_classes());
                    (dir.join("checkpoints/final.ckpt"), dir.join("val/manifest.json"), Some(arch))
                }
                None => match (checkpoint, manifest) {
                    (Some(c), Some(m)) => (c, m, None),
                    _ => bail!("eval needs --run, or --checkpoint with --manifest"),
                },
            };
            let manifest = DatasetManifest::load(&manifest_path)?;
            let report = run_eval(&ckpt, &manifest, expected.as_ref(), overlays.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Cmd::PerturbDemo { out, eps, seed, checkpoint } => perturb_demo(&out, eps, seed, checkpoint.as_deref())?,
        Cmd::FdaDemo { out, eps, seed } => {
            let (src, tgt) = demo_pair(seed)?;
            let styled = fda_image(&src.0, &tgt.0, eps)?;
            std::fs::create_dir_all(&out)?;
            let path = out.join("fda.png");
            write_image(&path, &hstack(&[src.0, tgt.0, styled])?)?;
            println!("{}", path.display());
        }
        Cmd::Gradcheck { seed } => {
            let rows = run_gradcheck(seed)?;
            print!("{}", format_report(&rows));
            if rows.iter().any(|r| !r.passed) {
                return Ok(ExitCode::FAILURE);
            }
        }
        Cmd::GenData { out, config, sets } => {
            let cfg = RunConfig::load(config.as_deref(), &sets)?;
            let DataSource::Synthetic { synth, n_source, n_target, n_val } = &cfg.data else {
                bail!("gen-data needs data.kind = synthetic");
            };
            let b = benchmark(synth, *n_source, *n_target, *n_val)?;
            for (name, split) in [("source", &b.source_train), ("target", &b.target_train), ("val", &b.target_val)] {
                let dir = out.join(name);
                let items: Vec<_> = split.iter().map(|s| (&s.image, Some(&s.labels))).collect();
                let m = write_folder(&dir, &items, name, synth.num_classes, IGNORE)?;
                m.save(&dir.join("manifest.json"))?;
                println!("{} {} images", dir.display(), m.len());
            }
        }
        Cmd::Table { runs } => {
            let mut rows = Vec::new();
            for r in runs {
                let p = r.join("summary.json");
                let s: RunSummary = serde_json::from_str(
                    &std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?,
                )?;
                rows.push(s.ablation_row);
            }
            print!("{}", ablation_table(&rows));
        }
    }
    Ok(ExitCode::SUCCESS)
}

type Pair = (Grid, LabelMap);

fn demo_pair(seed: u64) -> Result<(Pair, Pair)> {
    let synth = SynthConfig { rng_seed: seed, ..Default::default() };
    let src = prnuda::data::synth::gen_synthetic_seeded(&synth, seed, 1, Domain::Source).remove(0);
    let tgt = prnuda::data::synth::gen_synthetic_seeded(&synth, seed + 1, 1, Domain::Target).remove(0);
    Ok(((src.image, src.labels), (tgt.image, tgt.labels)))
}

/// One-hot labels scaled and blurred into smooth logits.
fn soft_logits(y: &LabelMap, k: usize) -> Result<Grid> {
    let mut g = Grid::zeros(k, y.height, y.width);
    for (p, &c) in y.data.iter().enumerate() {
        if (c as usize) < k {
            g.data[c as usize * y.len() + p] = 4.0;
        }
    }
    Ok(gaussian_blur(&g, 2.0)?)
}

fn perturb_demo(out: &Path, eps: f64, seed: u64, ckpt: Option<&Path>) -> Result<()> {
    let (src, tgt) = demo_pair(seed)?;
    let (ls, lt, k) = match ckpt {
        Some(p) => {
            let st = checkpoint::load(p)?;
            let k = st.student.arch.num_classes();
            (segment(&st.student, &src.0)?.logits, segment(&st.teacher.model, &tgt.0)?.logits, k)
        }
        None => {
            let k = SynthConfig::default().num_classes;
            (soft_logits(&src.1, k)?, soft_logits(&tgt.1, k)?, k)
        }
    };
    let pert = perturb_logits(&ls, &lt, eps)?;
    let mask = make_noise_mask_gt(&ls, &pert)?;
    std::fs::create_dir_all(out)?;
    let pal = default_palette();
    let before = argmax_labels(&ls);
    let after = argmax_labels(&pert);
    write_labels(&out.join("labels_original.png"), &before, &pal)?;
    write_labels(&out.join("labels_perturbed.png"), &after, &pal)?;
    write_labels(&out.join("noise_mask.png"), &LabelMap::from_vec(mask.height, mask.width, mask.data.iter().map(|&b| b as u8).collect())?, &[[0, 0, 0], [255, 255, 255]])?;
    let panel = hstack(&[src.0, colorize(&before, &pal), colorize(&after, &pal), mask_image(&mask)])?;
    let path = out.join("perturb.png");
    write_image(&path, &panel)?;
    println!("{} ({} of {} labels changed, {k} classes)", path.display(), mask.count_noisy(), mask.data.len());
    Ok(())
}
