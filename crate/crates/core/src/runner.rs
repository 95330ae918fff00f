//! Training and evaluation runs with on-disk artifacts.
//!
//! A run directory holds `config.txt`, `metrics.jsonl` (windowed training
//! losses), `eval.jsonl` (periodic validation), `checkpoints/`, the
//! validation split under `val/` with its `manifest.json`, `summary.json` and
//! `ablation_row.tsv`. Together they are enough to re-evaluate the run.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::{DataSource, RunConfig};
use crate::data::{benchmark, load_folder, write_folder, DatasetManifest};
use crate::error::{Error, Result};
use crate::metrics::{mask_quality_pooled, miou, spearman, MetricsRecord};
use crate::numerics::{argmax_labels, Grid, LabelMap, NoiseMask, IGNORE};
use crate::render::write_overlay;
use crate::segnet::{prn_decode, segment, Arch};
use crate::selftrain::{confidence_mask, train_step, Batch, LossReport, StepOutcome, Switches, TrainState};

/// Environment variable naming the directory new runs are created under.
pub const RUNS_DIR_ENV: &str = "PRNUDA_RUNS_DIR";

pub fn runs_root() -> PathBuf {
    std::env::var_os(RUNS_DIR_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

#[derive(Clone, Debug)]
pub struct Labeled {
    pub image: Grid,
    pub labels: LabelMap,
}

/// In-memory splits with labels remapped so the ignore index is [`IGNORE`].
#[derive(Clone, Debug)]
pub struct RunData {
    pub source: Vec<Labeled>,
    pub target: Vec<Grid>,
    pub val: Vec<Labeled>,
    pub num_classes: usize,
}

fn remap_ignore(mut y: LabelMap, ignore: u8) -> LabelMap {
    if ignore != IGNORE {
        y.data.iter_mut().filter(|v| **v == ignore).for_each(|v| *v = IGNORE);
    }
    y
}

fn read_split(root: &Path, k: usize, ignore: u8, split: &str, need_labels: bool) -> Result<Vec<(Grid, Option<LabelMap>)>> {
    let report = load_folder(root, k, ignore, split)?;
    if !report.rejected.is_empty() {
        return Err(Error::Dataset(format!(
            "{split} split at {}: {} rejected file(s), first: {} ({})",
            root.display(),
            report.rejected.len(),
            report.rejected[0].path.display(),
            report.rejected[0].reason
        )));
    }
    let items = report.manifest.read_all()?;
    if need_labels && items.iter().any(|(_, y)| y.is_none()) {
        return Err(Error::Dataset(format!("{split} split at {} has unlabeled images", root.display())));
    }
    Ok(items
        .into_iter()
        .map(|(g, y)| (g, y.map(|y| remap_ignore(y, ignore))))
        .collect())
}

impl RunData {
    pub fn load(source: &DataSource) -> Result<Self> {
        let data = match source {
            DataSource::Synthetic { synth, n_source, n_target, n_val } => {
                let b = benchmark(synth, *n_source, *n_target, *n_val)?;
                let lab = |v: Vec<crate::data::Sample>| {
                    v.into_iter()
                        .map(|s| Labeled { image: s.image, labels: s.labels })
                        .collect()
                };
                RunData {
                    source: lab(b.source_train),
                    target: b.target_train.into_iter().map(|s| s.image).collect(),
                    val: lab(b.target_val),
                    num_classes: synth.num_classes,
                }
            }
            DataSource::Folder { source, target, val, num_classes, ignore_index } => {
                let k = *num_classes;
                let lab = |v: Vec<(Grid, Option<LabelMap>)>| {
                    v.into_iter()
                        .map(|(image, y)| Labeled { image, labels: y.unwrap() })
                        .collect()
                };
                RunData {
                    source: lab(read_split(source, k, *ignore_index, "source", true)?),
                    target: read_split(target, k, *ignore_index, "target", false)?
                        .into_iter()
                        .map(|(g, _)| g)
                        .collect(),
                    val: lab(read_split(val, k, *ignore_index, "val", true)?),
                    num_classes: k,
                }
            }
        };
        data.validate()?;
        Ok(data)
    }

    /// Non-empty splits, RGB images with sides divisible by 4, and source
    /// and target of one size (mixing pastes pixel to pixel).
    pub fn validate(&self) -> Result<()> {
        if self.source.is_empty() || self.target.is_empty() || self.val.is_empty() {
            return Err(Error::Dataset(format!(
                "empty split: {} source, {} target, {} val",
                self.source.len(),
                self.target.len(),
                self.val.len()
            )));
        }
        let shape = self.source[0].image.shape();
        let check = |what: &str, i: usize, g: &Grid, same: bool| -> Result<()> {
            if g.channels != 3 || g.height % 4 != 0 || g.width % 4 != 0 {
                return Err(Error::Dataset(format!(
                    "{what} image {i}: need 3 channels and sides divisible by 4, got {:?}",
                    g.shape()
                )));
            }
            if same && g.shape() != shape {
                return Err(Error::Dataset(format!(
                    "{what} image {i} is {:?}, expected {shape:?}",
                    g.shape()
                )));
            }
            Ok(())
        };
        for (i, s) in self.source.iter().enumerate() {
            check("source", i, &s.image, true)?;
            s.labels.validate(self.num_classes)?;
        }
        for (i, g) in self.target.iter().enumerate() {
            check("target", i, g, true)?;
        }
        for (i, s) in self.val.iter().enumerate() {
            check("val", i, &s.image, false)?;
            s.labels.validate(self.num_classes)?;
        }
        Ok(())
    }
}

/// Validation metrics of the student plus, when a refinement decoder is
/// trained, how well its noise mask finds the teacher's pseudo-label errors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: MetricsRecord,
    /// Pixel accuracy of the teacher's pseudo-labels.
    pub pseudo_label_accuracy: f64,
    /// Spearman correlation between per-image mask confidence and per-image
    /// pseudo-label accuracy.
    pub confidence_spearman: Option<f64>,
    pub mean_mask_confidence: Option<f64>,
}

/// Evaluates `state` on labelled images. `with_mask` adds the noise-mask
/// statistics.
pub fn evaluate(state: &TrainState, val: &[Labeled], k: usize, with_mask: bool) -> Result<EvalReport> {
    let mut preds = Vec::with_capacity(val.len());
    let mut mask_pairs = Vec::new();
    let (mut pl_ok, mut pl_tot) = (0usize, 0usize);
    let (mut clean_ok, mut clean_tot) = (0usize, 0usize);
    let mut conf = Vec::new();
    let mut acc = Vec::new();
    for s in val {
        preds.push(argmax_labels(&segment(&state.student, &s.image)?.logits));
        let t = segment(&state.teacher.model, &s.image)?;
        let yhat = argmax_labels(&t.logits);
        let valid: Vec<usize> = (0..yhat.len()).filter(|&p| s.labels.data[p] != IGNORE).collect();
        let ok = valid.iter().filter(|&&p| yhat.data[p] == s.labels.data[p]).count();
        pl_ok += ok;
        pl_tot += valid.len();
        if with_mask {
            let out = prn_decode(&state.prn, &t.features, &t.logits)?;
            let m = NoiseMask::from_logits(&out.noise_logits);
            let pick = |f: &dyn Fn(usize) -> bool| NoiseMask {
                height: 1,
                width: valid.len(),
                data: valid.iter().map(|&p| f(p)).collect(),
            };
            let pred = pick(&|p| m.data[p]);
            let truth = pick(&|p| yhat.data[p] != s.labels.data[p]);
            for (&p, &noisy) in valid.iter().zip(&pred.data) {
                if !noisy {
                    clean_tot += 1;
                    clean_ok += (yhat.data[p] == s.labels.data[p]) as usize;
                }
            }
            conf.push(confidence_mask(&m));
            acc.push(if valid.is_empty() { 1.0 } else { ok as f64 / valid.len() as f64 });
            mask_pairs.push((pred, truth));
        }
    }
    let gts: Vec<LabelMap> = val.iter().map(|s| s.labels.clone()).collect();
    let mut metrics = miou(&preds, &gts, k, IGNORE)?;
    let mut report = EvalReport {
        pseudo_label_accuracy: if pl_tot == 0 { 0.0 } else { pl_ok as f64 / pl_tot as f64 },
        ..Default::default()
    };
    if with_mask {
        let (p, r, f) = mask_quality_pooled(&mask_pairs)?;
        metrics.mask_precision = Some(p);
        metrics.mask_recall = Some(r);
        metrics.mask_f1 = Some(f);
        metrics.clean_pixel_accuracy = (clean_tot > 0).then(|| clean_ok as f64 / clean_tot as f64);
        report.confidence_spearman = Some(spearman(&conf, &acc));
        report.mean_mask_confidence = Some(conf.iter().sum::<f64>() / conf.len().max(1) as f64);
    }
    report.metrics = metrics;
    Ok(report)
}

/// One `metrics.jsonl` line: means over the window ending at `step`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub lr_encoder: f64,
    pub lr_decoder: f64,
    #[serde(flatten)]
    pub losses: LossReport,
    pub confidence_mean: f64,
    pub noise_density_mean: Option<f64>,
}

#[derive(Default)]
struct Window {
    n: usize,
    losses: [f64; 9],
    conf: f64,
    density: f64,
    has_density: bool,
}

impl Window {
    fn push(&mut self, o: &StepOutcome) {
        self.n += 1;
        for (acc, (_, v)) in self.losses.iter_mut().zip(o.losses.fields()) {
            *acc += v;
        }
        self.conf += o.confidence;
        if let Some(d) = o.noise_density {
            self.density += d;
            self.has_density = true;
        }
    }

    fn flush(&mut self, last: &StepOutcome) -> StepRecord {
        let n = self.n.max(1) as f64;
        let l = self.losses.map(|v| v / n);
        let rec = StepRecord {
            step: last.step + 1,
            lr_encoder: last.lr_encoder,
            lr_decoder: last.lr_decoder,
            losses: LossReport {
                source_ce: l[0],
                target_ce: l[1],
                contrastive: l[2],
                prn_source_ce: l[3],
                prn_source_bce: l[4],
                prn_target_ce: l[5],
                prn_target_bce: l[6],
                total_student: l[7],
                total_prn: l[8],
            },
            confidence_mean: self.conf / n,
            noise_density_mean: self.has_density.then(|| self.density / n),
        };
        *self = Window::default();
        rec
    }
}

/// Something that happened during [`Trainer::run`].
pub enum Event<'a> {
    Log(&'a StepRecord),
    Eval(u64, &'a EvalReport),
    Checkpoint(u64, &'a TrainState),
}

/// Training loop over in-memory data, free of file I/O.
pub struct Trainer {
    pub cfg: RunConfig,
    pub data: RunData,
    pub state: TrainState,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(cfg: RunConfig, data: RunData) -> Result<Self> {
        cfg.validate()?;
        data.validate()?;
        let k = data.num_classes;
        let state = TrainState::new(Arch::segmenter(k), Arch::refiner(k), cfg.train.ema_beta, cfg.seed)?;
        Ok(Trainer {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            cfg,
            data,
            state,
        })
    }

    pub fn step(&mut self) -> Result<StepOutcome> {
        let si = self.rng.gen_range(0..self.data.source.len());
        let ti = self.rng.gen_range(0..self.data.target.len());
        let s = &self.data.source[si];
        let batch = Batch {
            id: self.state.step,
            source: &s.image,
            source_labels: &s.labels,
            target: &self.data.target[ti],
        };
        train_step(&mut self.state, &batch, &self.cfg.train, &mut self.rng)
    }

    pub fn evaluate(&self) -> Result<EvalReport> {
        evaluate(
            &self.state,
            &self.data.val,
            self.data.num_classes,
            self.cfg.train.switches.refine,
        )
    }

    /// Runs to `cfg.steps` and returns the final evaluation.
    pub fn run(&mut self, mut sink: impl FnMut(Event) -> Result<()>) -> Result<EvalReport> {
        let mut win = Window::default();
        let mut last = None;
        while self.state.step < self.cfg.steps {
            let o = self.step()?;
            win.push(&o);
            let done = o.step + 1;
            if done % self.cfg.log_every == 0 || done == self.cfg.steps {
                sink(Event::Log(&win.flush(&o)))?;
            }
            if done % self.cfg.eval_every == 0 && done != self.cfg.steps {
                let r = self.evaluate()?;
                log::info!("step {done}: val mIoU {:.2}", 100.0 * r.metrics.miou);
                sink(Event::Eval(done, &r))?;
            }
            if self.cfg.checkpoint_every > 0 && done % self.cfg.checkpoint_every == 0 || done == self.cfg.steps {
                sink(Event::Checkpoint(done, &self.state))?;
            }
            last = Some(o);
        }
        let r = self.evaluate()?;
        if last.is_some() {
            sink(Event::Eval(self.state.step, &r))?;
        }
        Ok(r)
    }
}

/// One ablation table row: switch marks and final mIoU.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub st: bool,
    pub prn: bool,
    pub nm: bool,
    pub cl: String,
    pub fa: bool,
    pub miou: f64,
}

impl AblationRow {
    pub fn new(s: &Switches, miou: f64) -> Self {
        AblationRow {
            st: s.self_training,
            prn: s.refine,
            nm: s.noise_mask,
            cl: format!("{:?}", s.contrast).to_lowercase(),
            fa: s.fourier,
            miou,
        }
    }

    pub const HEADER: &'static str = "ST\tPRN\tNM\tCL\tFA\tmIoU";

    pub fn to_tsv(&self) -> String {
        let mark = |b: bool| if b { "x" } else { "-" };
        format!(
            "{}\t{}\t{}\t{}\t{}\t{:.2}",
            mark(self.st),
            mark(self.prn),
            mark(self.nm),
            self.cl,
            mark(self.fa),
            100.0 * self.miou
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub tag: String,
    pub seed: u64,
    pub steps: u64,
    pub final_eval: EvalReport,
    /// `(step, mIoU)` at every evaluation.
    pub history: Vec<(u64, f64)>,
    pub ablation_row: AblationRow,
    pub wall_seconds: f64,
}

fn create_run_dir(root: &Path, name: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut dir = root.join(name);
    let mut i = 1;
    while dir.exists() {
        dir = root.join(format!("{name}-{i}"));
        i += 1;
    }
    std::fs::create_dir_all(dir.join("checkpoints")).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn jsonl(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn write_line<T: Serialize>(w: &mut BufWriter<File>, path: &Path, v: &T) -> Result<()> {
    serde_json::to_writer(&mut *w, v)?;
    w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

/// Loads data (failing before any training if it does not validate),
/// trains, and writes the run directory under `root`.
pub fn run_train(cfg: &RunConfig, root: &Path) -> Result<(PathBuf, RunSummary)> {
    cfg.validate()?;
    let data = RunData::load(&cfg.data)?;
    let dir = create_run_dir(root, &cfg.run_name())?;
    log::info!("run directory {}", dir.display());
    cfg.write_snapshot(&dir.join("config.txt"))?;
    let val_items: Vec<(&Grid, Option<&LabelMap>)> = data.val.iter().map(|s| (&s.image, Some(&s.labels))).collect();
    write_folder(&dir.join("val"), &val_items, "val", data.num_classes, IGNORE)?.save(&dir.join("val/manifest.json"))?;

    let start = Instant::now();
    let metrics_path = dir.join("metrics.jsonl");
    let eval_path = dir.join("eval.jsonl");
    let mut metrics = jsonl(&metrics_path)?;
    let mut evals = jsonl(&eval_path)?;
    let mut history = Vec::new();
    let mut trainer = Trainer::new(cfg.clone(), data)?;
    let final_eval = trainer.run(|ev| match ev {
        Event::Log(r) => write_line(&mut metrics, &metrics_path, r),
        Event::Eval(step, r) => {
            history.push((step, r.metrics.miou));
            #[derive(Serialize)]
            struct Line<'a> {
                step: u64,
                #[serde(flatten)]
                report: &'a EvalReport,
            }
            write_line(&mut evals, &eval_path, &Line { step, report: r })
        }
        Event::Checkpoint(step, s) => {
            let ck = dir.join("checkpoints");
            checkpoint::save(s, &ck.join(format!("step-{step:06}.ckpt")))?;
            if step == cfg.steps {
                checkpoint::save(s, &ck.join("final.ckpt"))?;
            }
            Ok(())
        }
    })?;

    let row = AblationRow::new(&cfg.train.switches, final_eval.metrics.miou);
    let tsv = dir.join("ablation_row.tsv");
    std::fs::write(&tsv, format!("{}\n{}\n", AblationRow::HEADER, row.to_tsv())).map_err(|e| Error::io(&tsv, e))?;
    let summary = RunSummary {
        name: cfg.run_name(),
        tag: cfg.train.switches.tag(),
        seed: cfg.seed,
        steps: cfg.steps,
        final_eval,
        history,
        ablation_row: row,
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    let sp = dir.join("summary.json");
    std::fs::write(&sp, serde_json::to_string_pretty(&summary)?).map_err(|e| Error::io(&sp, e))?;
    Ok((dir, summary))
}

/// Evaluates a checkpoint on a manifest. Unlabelled entries only get
/// overlays. `expected` (for example the architecture recorded by a run)
/// must match the checkpoint when given.
pub fn run_eval(
    ckpt: &Path,
    manifest: &DatasetManifest,
    expected: Option<&Arch>,
    overlays: Option<&Path>,
) -> Result<EvalReport> {
    if manifest.is_empty() {
        return Err(Error::Dataset("empty manifest".into()));
    }
    let state = checkpoint::load(ckpt)?;
    let want = expected.cloned().unwrap_or_else(|| Arch::segmenter(manifest.num_classes));
    if state.student.arch != want || state.student.arch.num_classes() != manifest.num_classes {
        return Err(Error::ArchMismatch {
            expected: want.to_string(),
            actual: state.student.arch.to_string(),
        });
    }
    let items = manifest.read_all()?;
    if let Some(dir) = overlays {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut labeled = Vec::new();
    for ((img, y), entry) in items.into_iter().zip(&manifest.entries) {
        let y = y.map(|y| remap_ignore(y, manifest.ignore_index));
        if let Some(dir) = overlays {
            let pred = argmax_labels(&segment(&state.student, &img)?.logits);
            write_overlay(&dir.join(format!("{}.png", entry.stem)), &img, &pred, y.as_ref())?;
        }
        if let Some(labels) = y {
            labeled.push(Labeled { image: img, labels });
        }
    }
    if labeled.is_empty() {
        return Ok(EvalReport {
            metrics: MetricsRecord {
                empty: true,
                ..Default::default()
            },
            ..Default::default()
        });
    }
    evaluate(&state, &labeled, manifest.num_classes, true)
}

/// Formats summaries as an ablation table with per-configuration means.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = format!("{}\truns\n", AblationRow::HEADER);
    let mut seen: Vec<(String, Vec<f64>, AblationRow)> = Vec::new();
    for r in rows {
        let key = r.to_tsv().rsplit_once('\t').unwrap().0.to_string();
        match seen.iter_mut().find(|(k, _, _)| *k == key) {
            Some((_, v, _)) => v.push(r.miou),
            None => seen.push((key, vec![r.miou], r.clone())),
        }
    }
    for (_, v, mut r) in seen {
        r.miou = v.iter().sum::<f64>() / v.len() as f64;
        out.push_str(&format!("{}\t{}\n", r.to_tsv(), v.len()));
    }
    out
}
