//! Voxelize a random thorax phantom and simulate cone-beam projections.

use deepprior::data_io::{generate_phantom, FieldOfView, PhantomSpec};
use deepprior::geometry::{make_geometry, subsample_views, GeometryConfig};
use deepprior::projector::{forward_project, forward_project_subset};

fn main() -> deepprior::Result<()> {
    let cfg = GeometryConfig::desk(32, 64);
    let geom = make_geometry(&cfg)?;
    let spec = PhantomSpec::random(7, 16, FieldOfView::of_grid(cfg.volume_shape, cfg.voxel_spacing));
    let phantom = generate_phantom(&spec, cfg.volume_shape, cfg.voxel_spacing)?;
    let (lo, hi) = phantom.volume.min_max();
    println!("phantom {:?}, attenuation {lo:.4}..{hi:.4} /mm", phantom.volume.shape);

    let full = forward_project(&phantom.volume, &geom)?;
    let peak = full.data.iter().cloned().fold(0.0, f64::max);
    println!("{} views of {} pixels, longest line integral {peak:.3}", full.n_views(), full.view_len());

    let quarter = subsample_views(&geom, 4)?;
    let sparse = forward_project_subset(&phantom.volume, &quarter)?;
    println!("1/4 subset keeps views {:?}...", &quarter.indices[..4]);
    assert_eq!(sparse.view(1), full.view(4));
    Ok(())
}
