//! FDK reconstructions from full and thinned view sets, scored against truth.

use deepprior::data_io::{generate_phantom, FieldOfView, PhantomSpec};
use deepprior::fdk::{fdk_reconstruct, Window};
use deepprior::geometry::{make_geometry, subsample_views, GeometryConfig};
use deepprior::metrics_stats::{MetricReport, DataRange};
use deepprior::projector::forward_project;

fn main() -> deepprior::Result<()> {
    let cfg = GeometryConfig::desk(48, 120);
    let geom = make_geometry(&cfg)?;
    let spec = PhantomSpec::random(3, 24, FieldOfView::of_grid(cfg.volume_shape, cfg.voxel_spacing));
    let truth = generate_phantom(&spec, cfg.volume_shape, cfg.voxel_spacing)?.volume;
    let proj = forward_project(&truth, &geom)?;

    println!("ratio  views  psnr_db  ssim");
    for ratio in [1, 2, 4, 6] {
        let sub = proj.select(&subsample_views(&geom, ratio)?)?;
        let rec = fdk_reconstruct(&sub, cfg.volume_shape, Window::RamLak)?;
        let m = MetricReport::compute(&truth, &rec, DataRange::Auto)?;
        println!("1/{ratio:<4} {:>5}  {:>7.2}  {:.4}", sub.n_views(), m.psnr.db(), m.ssim);
    }
    Ok(())
}
