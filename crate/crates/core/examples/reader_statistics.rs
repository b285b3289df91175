//! Reader-study statistics: weighted kappa, Kendall's W and sample size.

use deepprior::metrics_stats::{kendall_w, noninferiority_sample_size, weighted_kappa, ReaderTable, SampleSizeInputs};

fn main() -> deepprior::Result<()> {
    let a = [5, 4, 4, 3, 5, 2, 4, 3, 5, 4, 3, 4];
    let b = [5, 4, 3, 3, 5, 2, 4, 4, 4, 4, 3, 4];
    let k = weighted_kappa(&a, &b)?;
    println!("weighted kappa {:.4} (p = {:.2e}, {:?})", k.kappa, k.p_value, k.band);

    let rows = vec![vec![5, 4, 5], vec![3, 3, 2], vec![4, 4, 4], vec![2, 1, 2], vec![4, 5, 4]];
    let w = kendall_w(&ReaderTable::likert(rows)?)?;
    println!("Kendall's W {:.4} (chi2 {:.3}, df {}, {:?})", w.w, w.chi_square, w.df, w.band);

    let n = noninferiority_sample_size(&SampleSizeInputs {
        alpha: 0.025,
        beta: 0.1,
        sigma_d: 0.23,
        delta: 0.05,
        mu_d: 0.02,
        dropout_fraction: 0.2,
    })?;
    println!("paired non-inferiority: {:.2} -> {} cases, {} enrolled", n.raw, n.n_required, n.n_enrolled);
    Ok(())
}
