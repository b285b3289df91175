//! Held-out evaluation of trained variants against full-view FDK.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data_io::{load_projections, load_volume, DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::metrics_stats::{DataRange, MetricReport};
use crate::training::{infer, StagePipeline};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub psnr_mean: f64,
    pub psnr_sd: f64,
    pub ssim_mean: f64,
    pub ssim_sd: f64,
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var.sqrt())
}

pub fn summarize(cases: &[CaseResult]) -> Summary {
    let (psnr_mean, psnr_sd) = mean_sd(&cases.iter().map(|c| c.psnr).collect::<Vec<_>>());
    let (ssim_mean, ssim_sd) = mean_sd(&cases.iter().map(|c| c.ssim).collect::<Vec<_>>());
    Summary {
        n: cases.len(),
        psnr_mean,
        psnr_sd,
        ssim_mean,
        ssim_sd,
    }
}

fn test_entries(manifest: &DatasetManifest) -> Result<Vec<&crate::data_io::ManifestEntry>> {
    let entries = manifest.split(Split::Test);
    if entries.is_empty() {
        return Err(Error::Parameter("dataset has no test split".into()));
    }
    Ok(entries)
}

fn record<'a>(map: &'a std::collections::BTreeMap<usize, crate::data_io::FileRecord>, r: usize, id: &str) -> Result<&'a str> {
    map.get(&r)
        .map(|f| f.path.as_str())
        .ok_or_else(|| Error::Parameter(format!("{id} has no 1/{r}-view data")))
}

/// `1/ratio`-view FDK against full-view FDK over the test split.
pub fn evaluate_fdk(manifest_path: &Path, ratio: usize) -> Result<Vec<CaseResult>> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    test_entries(&manifest)?
        .iter()
        .map(|e| {
            let reference = load_volume(&root.join(record(&e.fdk, 1, &e.id)?))?;
            let test = load_volume(&root.join(record(&e.fdk, ratio, &e.id)?))?;
            let r = MetricReport::compute(&reference, &test, DataRange::Auto)?;
            Ok(CaseResult { id: e.id.clone(), psnr: r.psnr.db(), ssim: r.ssim })
        })
        .collect()
}

/// Inference from `1/ratio`-view projections against full-view FDK over the test split.
pub fn evaluate_pipeline(manifest_path: &Path, pipeline: &StagePipeline, ratio: usize) -> Result<Vec<CaseResult>> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    test_entries(&manifest)?
        .iter()
        .map(|e| {
            let reference = load_volume(&root.join(record(&e.fdk, 1, &e.id)?))?;
            let proj = load_projections(&root.join(record(&e.projections, ratio, &e.id)?))?;
            let out = infer(&proj, pipeline)?;
            let r = MetricReport::compute(&reference, &out, DataRange::Auto)?;
            Ok(CaseResult { id: e.id.clone(), psnr: r.psnr.db(), ssim: r.ssim })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub summary: Summary,
    pub cases: Vec<CaseResult>,
}

/// Evaluate each named checkpoint; every missing one is reported at once.
pub fn ablate(manifest_path: &Path, variants: &[(&str, &Path)], ratio: usize) -> Result<Vec<AblationRow>> {
    let missing: Vec<String> = variants
        .iter()
        .filter(|(_, p)| !p.is_file())
        .map(|(name, p)| format!("{name} ({})", p.display()))
        .collect();
    if !missing.is_empty() {
        return Err(Error::Parameter(format!("missing checkpoints: {}", missing.join(", "))));
    }
    variants
        .iter()
        .map(|(name, path)| {
            let cases = evaluate_pipeline(manifest_path, &StagePipeline::load(path)?, ratio)?;
            Ok(AblationRow {
                variant: name.to_string(),
                summary: summarize(&cases),
                cases,
            })
        })
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("variant,n,psnr_mean,psnr_sd,ssim_mean,ssim_sd\n");
    for r in rows {
        let s = &r.summary;
        writeln!(out, "{},{},{:.6},{:.6},{:.6},{:.6}", r.variant, s.n, s.psnr_mean, s.psnr_sd, s.ssim_mean, s.ssim_sd).unwrap();
    }
    out
}

pub fn ablation_text(rows: &[AblationRow], baseline: Option<&Summary>) -> String {
    let mut out = format!("{:<12} {:>4} {:>18} {:>18}\n", "variant", "n", "PSNR (dB)", "SSIM");
    let line = |name: &str, s: &Summary| {
        format!(
            "{:<12} {:>4} {:>9.3} ± {:<6.3} {:>9.4} ± {:<6.4}\n",
            name, s.n, s.psnr_mean, s.psnr_sd, s.ssim_mean, s.ssim_sd
        )
    };
    for r in rows {
        out.push_str(&line(&r.variant, &r.summary));
    }
    if let Some(b) = baseline {
        out.push_str(&line("fdk", b));
    }
    out
}
