//! Runs the three training stages and the direct variant on a toy dataset and
//! compares them with sparse-view FDK on the held-out phantoms.
//!
//! The networks are tiny and train for a few dozen short epochs, so the numbers only
//! show the plumbing; use `TrainConfig::desk()` for meaningful results.

use deepprior::cli::{evaluate_fdk, evaluate_pipeline, summarize};
use deepprior::data_io::{build_dataset, manifest_path, DatasetConfig};
use deepprior::geometry::GeometryConfig;
use deepprior::networks::NetworkConfig;
use deepprior::training::{train_direct, train_stage1, train_stage2, train_stage3, TrainConfig, TrainingData};

fn main() -> deepprior::Result<()> {
    let dir = std::env::temp_dir().join("deepprior_train_example");
    let ds = DatasetConfig {
        n_phantoms: 6,
        geometry: GeometryConfig::desk(32, 48),
        ratios: vec![1, 6],
        ..DatasetConfig::default()
    };
    build_dataset(&ds, &dir)?;
    let manifest = manifest_path(&dir);

    let cfg = TrainConfig {
        network: NetworkConfig {
            base_channels: 4,
            codebook_size: 32,
            code_dim: 8,
            classifier_hidden: 16,
            discriminator_channels: 4,
            ..NetworkConfig::desk()
        },
        patch_size: 16,
        epochs_stage1: 40,
        epochs_stage2: 40,
        epochs_stage3: 40,
        epochs_direct: 40,
        ..TrainConfig::desk()
    };
    let data = TrainingData::from_manifest(&manifest, cfg.sparse_ratio)?;

    let s1 = train_stage1(&data, &cfg, None)?;
    let s2 = train_stage2(&data, &s1.pipeline, None)?;
    let s3 = train_stage3(&data, &s2.pipeline, None)?;
    let direct = train_direct(&data, &cfg, None)?;
    for (name, run) in [("stage 1", &s1), ("stage 2", &s2), ("stage 3", &s3), ("direct", &direct)] {
        let last = run.log.last().map(|r| r.get("loss").unwrap_or(f64::NAN)).unwrap_or(f64::NAN);
        println!("{name:<8} {} steps, final loss {last:.4}", run.log.len());
    }

    let ratio = cfg.sparse_ratio;
    let rows = [
        ("fdk", evaluate_fdk(&manifest, ratio)?),
        ("without s2+s3", evaluate_pipeline(&manifest, &direct.pipeline, ratio)?),
        ("without s3", evaluate_pipeline(&manifest, &s2.pipeline, ratio)?),
        ("full", evaluate_pipeline(&manifest, &s3.pipeline, ratio)?),
    ];
    println!("\nvariant         psnr_db  ssim");
    for (name, cases) in rows {
        let s = summarize(&cases);
        println!("{name:<15} {:>7.2}  {:.4}", s.psnr_mean, s.ssim_mean);
    }
    Ok(())
}
