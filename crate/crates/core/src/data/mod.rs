//! Synthetic benchmarks and folder datasets.

pub mod folder;
pub mod io;
pub mod synth;

pub use folder::{load_folder, write_folder, DatasetManifest, LoadReport, ManifestEntry, Rejection};
pub use synth::{benchmark, gen_synthetic, Benchmark, Domain, Sample, Style, SynthConfig};
