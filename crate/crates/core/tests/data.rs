mod common;

use common::*;
use prnuda::data::io::{default_palette, write_labels};
use prnuda::data::{benchmark, load_folder, write_folder, SynthConfig};
use prnuda::numerics::{Grid, LabelMap, IGNORE};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn pair(rng: &mut ChaCha8Rng, h: usize, w: usize) -> (Grid, LabelMap) {
    (rand_grid(rng, 3, h, w, 1.0).map(f64::abs), rand_labels(rng, h, w, 4, 0.0))
}

#[test]
fn ten_pair_folder_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let items: Vec<_> = (0..10).map(|_| pair(&mut rng, 8, 12)).collect();
    let refs: Vec<_> = items.iter().map(|(g, y)| (g, Some(y))).collect();
    write_folder(dir.path(), &refs, "train", 4, IGNORE).unwrap();

    let report = load_folder(dir.path(), 4, IGNORE, "train").unwrap();
    assert!(report.rejected.is_empty());
    assert_eq!(report.manifest.len(), 10);
    assert_eq!(report.manifest.labeled(), 10);
    for ((img, y), (g, l)) in report.manifest.read_all().unwrap().iter().zip(&items) {
        assert_eq!(y.as_ref().unwrap(), l);
        // 8-bit storage.
        assert!(img.max_abs_diff(g) <= 0.5 / 255.0 + 1e-12);
    }
}

#[test]
fn missing_labels_mean_unlabeled() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (g, _) = pair(&mut rng, 8, 8);
    write_folder(dir.path(), &[(&g, None), (&g, None)], "target", 4, IGNORE).unwrap();
    let report = load_folder(dir.path(), 4, IGNORE, "target").unwrap();
    assert_eq!(report.manifest.len(), 2);
    assert_eq!(report.manifest.labeled(), 0);
    assert!(report.rejected.is_empty());
}

#[test]
fn bad_pairs_are_rejected_and_the_rest_kept() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let items: Vec<_> = (0..3).map(|_| pair(&mut rng, 8, 8)).collect();
    let refs: Vec<_> = items.iter().map(|(g, y)| (g, Some(y))).collect();
    write_folder(dir.path(), &refs, "train", 4, IGNORE).unwrap();
    let pal = default_palette();
    // Label of the wrong size.
    write_labels(&dir.path().join("labels/00001.png"), &LabelMap::filled(4, 4, 0), &pal).unwrap();
    // Label with a class outside 0..4.
    write_labels(&dir.path().join("labels/00002.png"), &LabelMap::filled(8, 8, 7), &pal).unwrap();
    // Unreadable image.
    std::fs::write(dir.path().join("images/00003.png"), b"not a png").unwrap();

    let report = load_folder(dir.path(), 4, IGNORE, "train").unwrap();
    assert_eq!(report.manifest.len(), 1);
    assert_eq!(report.manifest.entries[0].stem, "00000");
    assert_eq!(report.rejected.len(), 3);
}

#[test]
fn custom_ignore_index_is_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let mut y = LabelMap::filled(8, 8, 1);
    y.data[0] = 9;
    let g = Grid::filled(3, 8, 8, 0.5);
    write_folder(dir.path(), &[(&g, Some(&y))], "val", 3, 9).unwrap();
    let report = load_folder(dir.path(), 3, 9, "val").unwrap();
    assert!(report.rejected.is_empty());
    assert!(load_folder(dir.path(), 3, IGNORE, "val").unwrap().rejected.len() == 1);
}

#[test]
fn benchmark_is_seeded_and_labelled() {
    let cfg = SynthConfig {
        image_size: 16,
        ..Default::default()
    };
    let a = benchmark(&cfg, 4, 3, 2).unwrap();
    let b = benchmark(&cfg, 4, 3, 2).unwrap();
    assert_eq!(a.source_train.len(), 4);
    assert_eq!(a.target_train.len(), 3);
    assert_eq!(a.target_val.len(), 2);
    for (x, y) in a.source_train.iter().zip(&b.source_train) {
        assert_eq!(x.image, y.image);
        assert_eq!(x.labels, y.labels);
    }
    for s in a.source_train.iter().chain(&a.target_val) {
        s.labels.validate(cfg.num_classes).unwrap();
        assert!(s.image.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
