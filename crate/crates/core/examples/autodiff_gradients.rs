//! Build a small conv + norm + loss graph, backpropagate, and compare against
//! central finite differences.

use deepprior::tensor::{conv3d, finite_difference_check_many, instance_norm3d, mse, Adam, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng, trainable: bool) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect();
    if trainable { Tensor::param(shape, data).unwrap() } else { Tensor::new(shape, data).unwrap() }
}

fn main() -> deepprior::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&[1, 2, 6, 6, 6], &mut rng, false);
    let target = random(&[1, 3, 6, 6, 6], &mut rng, false);
    let w = random(&[3, 2, 3, 3, 3], &mut rng, true);
    let gain = Tensor::param(&[3], vec![1.0; 3])?;
    let bias = Tensor::param(&[3], vec![0.0; 3])?;

    let loss = || {
        let h = conv3d(&x, &w, None, 1, 1)?;
        let h = instance_norm3d(&h, &gain, &bias, 1e-5)?.leaky_relu(0.2)?;
        mse(&h, &target)
    };
    let err = finite_difference_check_many(loss, &[&w, &gain, &bias], 1e-6)?;
    println!("max relative gradient error {err:.2e}");

    let mut opt = Adam::new(vec![w.clone(), gain.clone(), bias.clone()], 1e-2);
    for step in 0..=50 {
        let l = loss()?;
        if step % 10 == 0 {
            println!("step {step:>2} loss {:.5}", l.item());
        }
        l.backward()?;
        opt.step()?;
    }
    Ok(())
}
