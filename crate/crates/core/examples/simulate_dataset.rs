//! Builds a small phantom dataset on disk and checks it against its manifest.

use deepprior::data_io::{build_dataset, manifest_path, DatasetConfig, DatasetManifest, Split};
use deepprior::geometry::GeometryConfig;

fn main() -> deepprior::Result<()> {
    let out = std::env::temp_dir().join("deepprior_simulate_example");
    let cfg = DatasetConfig {
        n_phantoms: 4,
        geometry: GeometryConfig::desk(32, 48),
        ratios: vec![1, 6],
        ..DatasetConfig::default()
    };
    build_dataset(&cfg, &out)?;

    let manifest = DatasetManifest::load(&manifest_path(&out))?;
    manifest.verify(&out)?;
    println!("dataset in {}", out.display());
    for split in [Split::Train, Split::Val, Split::Test] {
        println!("  {split}: {} phantoms", manifest.split(split).len());
    }
    println!("  {} files, all hashes match", manifest.files().len());
    Ok(())
}
