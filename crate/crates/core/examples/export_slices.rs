//! Render orthogonal slices of a phantom as PNG files.

use deepprior::data_io::{export_slice, generate_phantom, DisplayWindow, FieldOfView, PhantomSpec};
use deepprior::tensor::Axis;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let shape = [40, 40, 40];
    let spec = PhantomSpec::random(11, 20, FieldOfView::of_grid(shape, 1.0));
    let vol = generate_phantom(&spec, shape, 1.0)?.volume;
    let dir = std::env::temp_dir().join("deepprior_slices");
    std::fs::create_dir_all(&dir)?;
    let (lo, hi) = vol.min_max();
    let window = DisplayWindow { level: 0.5 * (lo + hi), width: 0.6 * (hi - lo) };
    for axis in Axis::ALL {
        let path = dir.join(format!("{axis:?}.png").to_lowercase());
        export_slice(&vol, axis, 20, Some(window), &path)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}
