//! Reader-study statistics: linear-weighted kappa, Kendall's W, paired
//! non-inferiority sample size, Turing-test confusion and a paired t-test.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum KappaBand {
    Poor,
    Fair,
    Moderate,
    Good,
    Excellent,
}

impl KappaBand {
    pub fn of(kappa: f64) -> Self {
        if kappa < 0.2 {
            KappaBand::Poor
        } else if kappa < 0.4 {
            KappaBand::Fair
        } else if kappa < 0.6 {
            KappaBand::Moderate
        } else if kappa <= 0.8 {
            KappaBand::Good
        } else {
            KappaBand::Excellent
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConcordanceBand {
    Poor,
    Fair,
    Moderate,
    Strong,
    Super,
}

impl ConcordanceBand {
    pub fn of(w: f64) -> Self {
        if w < 0.2 {
            ConcordanceBand::Poor
        } else if w < 0.4 {
            ConcordanceBand::Fair
        } else if w < 0.6 {
            ConcordanceBand::Moderate
        } else if w < 0.8 {
            ConcordanceBand::Strong
        } else {
            ConcordanceBand::Super
        }
    }
}

/// Integer ratings, one row per item and one column per reader.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReaderTable {
    pub ratings: Vec<Vec<i64>>,
}

impl ReaderTable {
    pub fn new(ratings: Vec<Vec<i64>>) -> Result<Self> {
        let m = ratings.first().map_or(0, Vec::len);
        if ratings.iter().any(|r| r.len() != m) {
            return Err(Error::Shape("every item needs one rating per reader".into()));
        }
        Ok(ReaderTable { ratings })
    }

    /// Like `new`, additionally requiring 5-point Likert scores.
    pub fn likert(ratings: Vec<Vec<i64>>) -> Result<Self> {
        if let Some(v) = ratings.iter().flatten().find(|v| !(1..=5).contains(*v)) {
            return Err(Error::Parameter(format!("Likert score {v} outside 1..=5")));
        }
        Self::new(ratings)
    }

    pub fn n_items(&self) -> usize {
        self.ratings.len()
    }

    pub fn n_readers(&self) -> usize {
        self.ratings.first().map_or(0, Vec::len)
    }

    pub fn reader(&self, j: usize) -> Vec<i64> {
        self.ratings.iter().map(|r| r[j]).collect()
    }
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KappaResult {
    pub kappa: f64,
    /// Null-hypothesis standard error.
    pub std_error: f64,
    pub z: f64,
    /// Two-sided.
    pub p_value: f64,
    pub band: KappaBand,
}

/// Contingency proportions over the sorted union of observed categories.
pub fn contingency(a: &[i64], b: &[i64]) -> Result<(Vec<i64>, Vec<Vec<f64>>)> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape(format!("rater lengths {} and {} must match and be non-zero", a.len(), b.len())));
    }
    let mut cats: Vec<i64> = a.iter().chain(b).copied().collect();
    cats.sort_unstable();
    cats.dedup();
    let k = cats.len();
    let mut table = vec![vec![0.0; k]; k];
    let pos = |v: i64| cats.binary_search(&v).expect("category present");
    let w = 1.0 / a.len() as f64;
    for (&x, &y) in a.iter().zip(b) {
        table[pos(x)][pos(y)] += w;
    }
    Ok((cats, table))
}

/// Linear-weighted kappa from a table of joint proportions (rows: rater A).
pub fn weighted_kappa_table(table: &[Vec<f64>], n: usize) -> Result<KappaResult> {
    let k = table.len();
    if k < 2 {
        return Err(Error::Degenerate(format!("weighted kappa needs at least 2 categories, got {k}")));
    }
    let rows: Vec<f64> = table.iter().map(|r| r.iter().sum()).collect();
    let cols: Vec<f64> = (0..k).map(|j| table.iter().map(|r| r[j]).sum()).collect();
    // agreement weights 1 − |i−j|/(k−1)
    let agree = |i: usize, j: usize| 1.0 - (i as f64 - j as f64).abs() / (k - 1) as f64;
    let mut p_o = 0.0;
    let mut p_e = 0.0;
    for i in 0..k {
        for j in 0..k {
            p_o += agree(i, j) * table[i][j];
            p_e += agree(i, j) * rows[i] * cols[j];
        }
    }
    if (1.0 - p_e).abs() < 1e-15 {
        return Err(Error::Degenerate("expected disagreement is zero".into()));
    }
    let kappa = (p_o - p_e) / (1.0 - p_e);
    let w_row: Vec<f64> = (0..k).map(|i| (0..k).map(|j| cols[j] * agree(i, j)).sum()).collect();
    let w_col: Vec<f64> = (0..k).map(|j| (0..k).map(|i| rows[i] * agree(i, j)).sum()).collect();
    let mut acc = 0.0;
    for i in 0..k {
        for j in 0..k {
            acc += rows[i] * cols[j] * (agree(i, j) - (w_row[i] + w_col[j])).powi(2);
        }
    }
    let var0 = ((acc - p_e * p_e) / (n as f64 * (1.0 - p_e).powi(2))).max(0.0);
    let std_error = var0.sqrt();
    let z = if std_error > 0.0 { kappa / std_error } else { f64::INFINITY * kappa.signum() };
    let p_value = 2.0 * std_normal().sf(z.abs());
    Ok(KappaResult {
        kappa,
        std_error,
        z,
        p_value,
        band: KappaBand::of(kappa),
    })
}

/// Linear-weighted kappa between two raters over the same items.
pub fn weighted_kappa(a: &[i64], b: &[i64]) -> Result<KappaResult> {
    let (_, table) = contingency(a, b)?;
    weighted_kappa_table(&table, a.len())
}

/// Mid-ranks (1-based) of `values`.
pub fn mid_ranks(values: &[i64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by_key(|&i| values[i]);
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = 0.5 * ((i + 1) + (j + 1)) as f64;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

/// `Σ (t³ − t)` over tie groups.
fn tie_term(values: &[i64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_unstable();
    v.chunk_by(|a, b| a == b)
        .map(|g| {
            let t = g.len() as f64;
            t * t * t - t
        })
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KendallResult {
    pub w: f64,
    pub chi_square: f64,
    pub df: usize,
    pub p_value: f64,
    pub band: ConcordanceBand,
}

/// Kendall's coefficient of concordance with tie correction.
pub fn kendall_w(table: &ReaderTable) -> Result<KendallResult> {
    let (n, m) = (table.n_items(), table.n_readers());
    if m < 2 || n < 3 {
        return Err(Error::Parameter(format!(
            "Kendall's W needs at least 2 readers and 3 items, got {m} readers and {n} items"
        )));
    }
    let mut rank_sums = vec![0.0; n];
    let mut ties = 0.0;
    for j in 0..m {
        let scores = table.reader(j);
        for (s, r) in rank_sums.iter_mut().zip(mid_ranks(&scores)) {
            *s += r;
        }
        ties += tie_term(&scores);
    }
    let (nf, mf) = (n as f64, m as f64);
    let mean = mf * (nf + 1.0) / 2.0;
    let s: f64 = rank_sums.iter().map(|r| (r - mean).powi(2)).sum();
    let denom = mf * mf * (nf * nf * nf - nf) - mf * ties;
    if denom <= 0.0 {
        return Err(Error::Degenerate("all readers gave constant ratings; W is undefined".into()));
    }
    let w = 12.0 * s / denom;
    let df = n - 1;
    let chi_square = mf * (nf - 1.0) * w;
    let p_value = ChiSquared::new(df as f64).expect("positive df").sf(chi_square);
    Ok(KendallResult {
        w,
        chi_square,
        df,
        p_value,
        band: ConcordanceBand::of(w),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleSizeInputs {
    /// One-sided significance level.
    pub alpha: f64,
    /// `1 − power`.
    pub beta: f64,
    pub sigma_d: f64,
    pub delta: f64,
    pub mu_d: f64,
    pub dropout_fraction: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleSize {
    /// `((z₁₋α + z₁₋β)·σ_d / (δ + μ_d))²` before rounding.
    pub raw: f64,
    pub n_required: u64,
    pub n_enrolled: u64,
}

/// Upper-tail standard normal quantile `z_{1−p}`.
pub fn normal_upper_quantile(p: f64) -> f64 {
    std_normal().inverse_cdf(1.0 - p)
}

pub fn noninferiority_sample_size(inp: &SampleSizeInputs) -> Result<SampleSize> {
    for (name, v) in [("alpha", inp.alpha), ("beta", inp.beta)] {
        if !(v > 0.0 && v < 1.0) {
            return Err(Error::Parameter(format!("{name} must lie in (0, 1), got {v}")));
        }
    }
    if !(inp.sigma_d > 0.0) {
        return Err(Error::Parameter(format!("sigma_d must be positive, got {}", inp.sigma_d)));
    }
    if !(inp.delta + inp.mu_d > 0.0) {
        return Err(Error::Parameter("delta + mu_d must be positive".into()));
    }
    if !(0.0..1.0).contains(&inp.dropout_fraction) {
        return Err(Error::Parameter(format!(
            "dropout fraction must lie in [0, 1), got {}",
            inp.dropout_fraction
        )));
    }
    let z = normal_upper_quantile(inp.alpha) + normal_upper_quantile(inp.beta);
    let raw = (z * inp.sigma_d / (inp.delta + inp.mu_d)).powi(2);
    let n_required = (raw.ceil() as u64).max(1);
    let n_enrolled = (n_required as f64 / (1.0 - inp.dropout_fraction) - 1e-9).ceil() as u64;
    Ok(SampleSize {
        raw,
        n_required,
        n_enrolled,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuringConfusion {
    /// `counts[truth][given]`, 0 = false, 1 = true.
    pub counts: [[u64; 2]; 2],
    pub accuracy: f64,
    /// Agreement with the truth; `None` when it is undefined (one label only).
    pub kappa: Option<KappaResult>,
}

pub fn turing_confusion(truth: &[bool], given: &[bool]) -> Result<TuringConfusion> {
    if truth.len() != given.len() || truth.is_empty() {
        return Err(Error::Shape("label vectors must be non-empty and equally long".into()));
    }
    let mut counts = [[0u64; 2]; 2];
    for (&t, &g) in truth.iter().zip(given) {
        counts[t as usize][g as usize] += 1;
    }
    let accuracy = (counts[0][0] + counts[1][1]) as f64 / truth.len() as f64;
    let n = truth.len() as f64;
    let table: Vec<Vec<f64>> = counts.iter().map(|r| r.iter().map(|&c| c as f64 / n).collect()).collect();
    let kappa = weighted_kappa_table(&table, truth.len()).ok();
    Ok(TuringConfusion {
        counts,
        accuracy,
        kappa,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedTTest {
    pub mean_difference: f64,
    pub sd_difference: f64,
    pub t: f64,
    pub df: usize,
    /// Two-sided.
    pub p_value: f64,
}

/// Paired t-test on `a − b`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<PairedTTest> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Shape("paired samples need equal lengths of at least 2".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let sd = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    if sd == 0.0 {
        return Err(Error::Degenerate("paired differences have zero variance".into()));
    }
    let t = mean / (sd / n.sqrt());
    let df = d.len() - 1;
    let dist = StudentsT::new(0.0, 1.0, df as f64).expect("positive df");
    Ok(PairedTTest {
        mean_difference: mean,
        sd_difference: sd,
        t,
        df,
        p_value: 2.0 * dist.sf(t.abs()),
    })
}
