//! PSNR and slice-averaged SSIM on synthetic volumes.

use deepprior::metrics_stats::{psnr, ssim, MetricReport, DataRange};
use deepprior::volume::Volume;

fn main() -> deepprior::Result<()> {
    let shape = [8, 32, 32];
    let mut data = Vec::with_capacity(8 * 32 * 32);
    for z in 0..8 {
        for y in 0..32 {
            for x in 0..32 {
                data.push(((x + y + z) % 7) as f64 / 6.0);
            }
        }
    }
    let reference = Volume::from_data(shape, 1.0, data)?;
    let offset = reference.map(|v| v + 0.1);
    println!("+0.1 offset: {} dB", psnr(&reference, &offset, DataRange::Fixed(1.0))?);
    println!("identical: {}", psnr(&reference, &reference, DataRange::Auto)?);
    println!("ssim identical {}", ssim(&reference, &reference, DataRange::Auto)?);

    let blurred = reference.map(|v| 0.5 * v + 0.25);
    let report = MetricReport::compute(&reference, &blurred, DataRange::Auto)?;
    println!("contrast-halved: psnr {} ssim {:.4}", report.psnr, report.ssim);
    for s in report.slices.iter().take(3) {
        println!("  slice {} psnr {} ssim {:.4}", s.slice, s.psnr, s.ssim);
    }
    Ok(())
}
