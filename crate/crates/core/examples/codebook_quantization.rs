//! Nearest-code quantization, the straight-through estimator and code usage.

use deepprior::codebook::{codebook_usage, quantize_nearest, vq_loss, Codebook};
use deepprior::tensor::{mse, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> deepprior::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (k, c) = (16, 4);
    let book = Codebook::random(k, c, 1.0, 9)?;
    let data: Vec<f64> = (0..c * 64).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let z = Tensor::param(&[1, c, 4, 4, 4], data)?;

    let a = quantize_nearest(&z, &book)?;
    let again = quantize_nearest(&a.quantized, &book)?;
    println!("idempotent: {}", again.indices == a.indices);
    let usage = codebook_usage(k, [a.indices.as_slice()]);
    println!("{} of {k} codes used", usage.used());

    // decoder-side gradient reaches the encoder unchanged
    let zq = a.straight_through(&z)?;
    let target = Tensor::zeros(zq.shape());
    mse(&zq, &target)?.backward()?;
    let g = z.grad().expect("encoder gradient");
    println!("|dL/dz| = {:.4}", g.iter().map(|v| v * v).sum::<f64>().sqrt());

    let image = Tensor::zeros(&[1, 1, 4, 4, 4]);
    let l = vq_loss(&image, &image, &z, &a.quantized)?;
    println!("codebook + commitment terms {:.4}", l.item());
    Ok(())
}
