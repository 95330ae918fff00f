use std::path::Path;

use prnuda::config::RunConfig;
use prnuda::data::{write_folder, DatasetManifest};
use prnuda::numerics::IGNORE;
use prnuda::runner::{run_eval, run_train, RunData, Trainer};
use prnuda::segnet::Arch;
use prnuda::Error;

fn tiny(preset: &str, extra: &[&str]) -> RunConfig {
    let mut sets: Vec<String> = [
        "synth.image_size=16",
        "synth.n_source=6",
        "synth.n_target=6",
        "synth.n_val=3",
        "run.steps=12",
        "run.eval_every=6",
        "run.log_every=4",
        "run.checkpoint_every=6",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    sets.push(format!("switches.preset={preset}"));
    sets.extend(extra.iter().map(|s| s.to_string()));
    RunConfig::load(None, &sets).unwrap()
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap()
}

#[test]
fn run_directory_is_complete_and_reproducible() {
    let root = tempfile::tempdir().unwrap();
    let cfg = tiny("full", &[]);
    let (a, sa) = run_train(&cfg, root.path()).unwrap();
    let (b, sb) = run_train(&cfg, root.path()).unwrap();
    assert_ne!(a, b, "second run gets a fresh directory");
    for f in [
        "config.txt",
        "metrics.jsonl",
        "eval.jsonl",
        "summary.json",
        "ablation_row.tsv",
        "val/manifest.json",
        "checkpoints/step-000006.ckpt",
        "checkpoints/final.ckpt",
    ] {
        assert!(a.join(f).is_file(), "{f} missing");
    }
    assert_eq!(read(&a.join("metrics.jsonl")), read(&b.join("metrics.jsonl")));
    assert_eq!(read(&a.join("eval.jsonl")), read(&b.join("eval.jsonl")));
    assert_eq!(sa.final_eval, sb.final_eval);
    assert_eq!(read(&a.join("metrics.jsonl")).lines().count(), 3);
    assert_eq!(sa.history.iter().map(|h| h.0).collect::<Vec<_>>(), vec![6, 12]);

    // The snapshot reproduces the configuration.
    let again = RunConfig::load(Some(&a.join("config.txt")), &[]).unwrap();
    assert_eq!(again, cfg);

    // Evaluating the final checkpoint on the stored split gives the
    // reported numbers, every time.
    let manifest = DatasetManifest::load(&a.join("val/manifest.json")).unwrap();
    let overlays = root.path().join("ov");
    let e1 = run_eval(&a.join("checkpoints/final.ckpt"), &manifest, None, Some(&overlays)).unwrap();
    let e2 = run_eval(&a.join("checkpoints/final.ckpt"), &manifest, None, None).unwrap();
    assert_eq!(e1, e2);
    assert!((e1.metrics.miou - sa.final_eval.metrics.miou).abs() < 1e-12);
    assert_eq!(std::fs::read_dir(&overlays).unwrap().count(), manifest.len());
}

#[test]
fn eval_rejects_empty_manifest_and_foreign_architecture() {
    let root = tempfile::tempdir().unwrap();
    let (dir, _) = run_train(&tiny("source-only", &[]), root.path()).unwrap();
    let ckpt = dir.join("checkpoints/final.ckpt");
    let mut manifest = DatasetManifest::load(&dir.join("val/manifest.json")).unwrap();

    let other = Arch::segmenter(7);
    match run_eval(&ckpt, &manifest, Some(&other), None) {
        Err(Error::ArchMismatch { expected, actual }) => {
            assert!(expected.contains('7'));
            assert_ne!(expected, actual);
        }
        r => panic!("expected an architecture mismatch, got {r:?}"),
    }
    manifest.num_classes = 7;
    assert!(matches!(run_eval(&ckpt, &manifest, None, None), Err(Error::ArchMismatch { .. })));

    manifest.entries.clear();
    assert!(matches!(run_eval(&ckpt, &manifest, None, None), Err(Error::Dataset(_))));
}

#[test]
fn bad_folder_data_fails_before_a_run_directory_exists() {
    let root = tempfile::tempdir().unwrap();
    let data = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(data.path().join("images")).unwrap();
    std::fs::write(data.path().join("images/a.png"), b"garbage").unwrap();
    let d = data.path().display();
    let cfg = tiny(
        "st",
        &[
            "data.kind=folder",
            &format!("data.source={d}"),
            &format!("data.target={d}"),
            &format!("data.val={d}"),
            "data.num_classes=3",
        ],
    );
    let runs = root.path().join("runs");
    assert!(run_train(&cfg, &runs).is_err());
    assert!(!runs.exists() || std::fs::read_dir(&runs).unwrap().next().is_none());
}

#[test]
fn folder_run_memorises_its_training_images() {
    use prnuda::data::{benchmark, SynthConfig};
    let synth = SynthConfig {
        image_size: 16,
        num_classes: 3,
        shapes_per_image: 2,
        ..Default::default()
    };
    let b = benchmark(&synth, 4, 1, 1).unwrap();
    let data = tempfile::tempdir().unwrap();
    let items: Vec<_> = b.source_train.iter().map(|s| (&s.image, Some(&s.labels))).collect();
    write_folder(data.path(), &items, "train", 3, IGNORE).unwrap();
    let d = data.path().display();
    let cfg = tiny(
        "source-only",
        &[
            "data.kind=folder",
            &format!("data.source={d}"),
            &format!("data.target={d}"),
            &format!("data.val={d}"),
            "data.num_classes=3",
            "run.steps=400",
            "run.eval_every=400",
            "optim.lr_encoder=3e-3",
            "optim.lr_decoder=3e-3",
            "aug.jitter_prob=0",
            "aug.blur_prob=0",
        ],
    );
    let mut t = Trainer::new(cfg.clone(), RunData::load(&cfg.data).unwrap()).unwrap();
    let report = t.run(|_| Ok(())).unwrap();
    assert!(report.metrics.miou > 0.85, "mIoU {}", report.metrics.miou);
}
