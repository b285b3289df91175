//! Simulated datasets: phantoms, projections per view ratio, FDK volumes and
//! a JSON manifest with content hashes and a seeded train/val/test split.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::files::{round_to_storage, save_projections, save_volume, sha256_file};
use super::phantom::{generate_phantom, FieldOfView, PhantomSpec};
use crate::error::{Error, Result};
use crate::fdk::{fdk_reconstruct, Window};
use crate::geometry::{make_geometry, subsample_views, GeometryConfig};
use crate::projector::{add_poisson_noise, forward_project, ProjectionSet};
use crate::volume::Volume;

/// Independent sub-seed for item `index` of stream `tag` under `root`.
pub fn derive_seed(root: u64, tag: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(root ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(index);
    rng.next_u64()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub n_phantoms: usize,
    pub seed: u64,
    pub geometry: GeometryConfig,
    pub ratios: Vec<usize>,
    pub window: Window,
    pub n_ellipsoids: usize,
    pub val_fraction: f64,
    pub test_fraction: f64,
    /// Incident photons per ray; noiseless when absent.
    #[serde(default)]
    pub incident_photons: Option<f64>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_phantoms: 24,
            seed: 0,
            geometry: GeometryConfig::desk(48, 96),
            ratios: vec![1, 2, 4, 6, 8],
            window: Window::Hann,
            n_ellipsoids: 32,
            val_fraction: 0.0,
            test_fraction: 0.25,
            incident_photons: None,
        }
    }
}

/// A file relative to the manifest directory plus its SHA-256.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub seed: u64,
    pub split: Split,
    pub phantom: FileRecord,
    /// Region labels: 0 background, 1 lesion, 2 vessel.
    pub labels: FileRecord,
    /// Keyed by view-ratio denominator.
    pub projections: BTreeMap<usize, FileRecord>,
    pub fdk: BTreeMap<usize, FileRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config: DatasetConfig,
    pub geometry_hash: String,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    /// Every recorded file, as `(path relative to root, record)`.
    pub fn files(&self) -> Vec<&FileRecord> {
        self.entries
            .iter()
            .flat_map(|e| {
                [&e.phantom, &e.labels]
                    .into_iter()
                    .chain(e.projections.values())
                    .chain(e.fdk.values())
            })
            .collect()
    }

    /// Recompute every hash under `root`; the first mismatch is an error.
    pub fn verify(&self, root: &Path) -> Result<()> {
        for rec in self.files() {
            let path = root.join(&rec.path);
            let got = sha256_file(&path)?;
            if got != rec.sha256 {
                return Err(Error::format(&path, format!("content hash {got} differs from manifest {}", rec.sha256)));
            }
        }
        Ok(())
    }
}

/// Seeded partition of `n` items: test first, then validation, rest train.
pub fn assign_splits(n: usize, val_fraction: f64, test_fraction: f64, seed: u64) -> Result<Vec<Split>> {
    if !(0.0..1.0).contains(&val_fraction) || !(0.0..1.0).contains(&test_fraction) || val_fraction + test_fraction >= 1.0 {
        return Err(Error::Parameter(format!(
            "split fractions val {val_fraction} + test {test_fraction} must lie in [0, 1)"
        )));
    }
    let n_test = (n as f64 * test_fraction).round() as usize;
    let n_val = (n as f64 * val_fraction).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, 2, 0)));
    let mut splits = vec![Split::Train; n];
    for (rank, &i) in order.iter().enumerate() {
        splits[i] = if rank < n_test {
            Split::Test
        } else if rank < n_test + n_val {
            Split::Val
        } else {
            Split::Train
        };
    }
    Ok(splits)
}

fn record(root: &Path, rel: String) -> Result<FileRecord> {
    let sha256 = sha256_file(&root.join(&rel))?;
    Ok(FileRecord { path: rel, sha256 })
}

/// Simulate one phantom: ground truth, labels, projections and FDK per ratio.
fn simulate_one(cfg: &DatasetConfig, index: usize, split: Split, out_dir: &Path) -> Result<ManifestEntry> {
    let geom = make_geometry(&cfg.geometry)?;
    let shape = cfg.geometry.volume_shape;
    let seed = derive_seed(cfg.seed, 1, index as u64);
    let spec = PhantomSpec::random(seed, cfg.n_ellipsoids, FieldOfView::of_grid(shape, cfg.geometry.voxel_spacing));
    let phantom = generate_phantom(&spec, shape, cfg.geometry.voxel_spacing)?;
    let id = format!("phantom_{index:04}");
    let labels = Volume {
        data: phantom
            .lesion_mask
            .iter()
            .zip(&phantom.vessel_mask)
            .map(|(&l, &v)| if l { 1.0 } else if v { 2.0 } else { 0.0 })
            .collect(),
        ..phantom.volume.clone()
    };
    save_volume(&out_dir.join(format!("{id}_gt.vol")), &phantom.volume)?;
    save_volume(&out_dir.join(format!("{id}_labels.vol")), &labels)?;
    let mut full = forward_project(&phantom.volume, &geom)?;
    if let Some(i0) = cfg.incident_photons {
        full = add_poisson_noise(&full, i0, derive_seed(cfg.seed, 3, index as u64))?;
    }
    // reconstruct from the stored precision so files alone reproduce the volumes
    full.data = round_to_storage(&full.data);
    let mut projections = BTreeMap::new();
    let mut fdk = BTreeMap::new();
    for &r in &cfg.ratios {
        let proj: ProjectionSet = full.select(&subsample_views(&geom, r)?)?;
        let rec = fdk_reconstruct(&proj, shape, cfg.window)?;
        let (p_rel, f_rel) = (format!("{id}_r{r}.proj"), format!("{id}_r{r}_fdk.vol"));
        save_projections(&out_dir.join(&p_rel), &proj)?;
        save_volume(&out_dir.join(&f_rel), &rec)?;
        projections.insert(r, record(out_dir, p_rel)?);
        fdk.insert(r, record(out_dir, f_rel)?);
    }
    Ok(ManifestEntry {
        id: id.clone(),
        seed,
        split,
        phantom: record(out_dir, format!("{id}_gt.vol"))?,
        labels: record(out_dir, format!("{id}_labels.vol"))?,
        projections,
        fdk,
    })
}

/// Simulate `cfg.n_phantoms` phantoms into `out_dir` and write `manifest.json`.
pub fn build_dataset(cfg: &DatasetConfig, out_dir: &Path) -> Result<DatasetManifest> {
    if cfg.ratios.is_empty() || !cfg.ratios.contains(&1) {
        return Err(Error::Parameter("ratios must include 1 (the full view set)".into()));
    }
    let geom = make_geometry(&cfg.geometry)?;
    for &r in &cfg.ratios {
        subsample_views(&geom, r)?;
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let splits = assign_splits(cfg.n_phantoms, cfg.val_fraction, cfg.test_fraction, cfg.seed)?;
    let entries = (0..cfg.n_phantoms)
        .into_par_iter()
        .map(|i| simulate_one(cfg, i, splits[i], out_dir))
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest {
        config: cfg.clone(),
        geometry_hash: geom.hash(),
        entries,
    };
    manifest.save(&manifest_path(out_dir))?;
    Ok(manifest)
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.json")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> DatasetConfig {
        DatasetConfig {
            n_phantoms: 3,
            seed: 4,
            geometry: GeometryConfig::desk(16, 12),
            ratios: vec![1, 2, 6],
            n_ellipsoids: 6,
            test_fraction: 0.34,
            ..Default::default()
        }
    }

    #[test]
    fn empty_dataset_has_empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let m = build_dataset(&DatasetConfig { n_phantoms: 0, ..tiny() }, dir.path()).unwrap();
        assert!(m.entries.is_empty());
        assert_eq!(DatasetManifest::load(&manifest_path(dir.path())).unwrap(), m);
    }

    #[test]
    fn manifest_round_trips_and_hashes_verify() {
        let dir = tempfile::tempdir().unwrap();
        let m = build_dataset(&tiny(), dir.path()).unwrap();
        assert_eq!(m.entries.len(), 3);
        assert_eq!(DatasetManifest::load(&manifest_path(dir.path())).unwrap(), m);
        m.verify(dir.path()).unwrap();
        assert_eq!(m.split(Split::Test).len(), 1);
        let victim = dir.path().join(&m.entries[0].fdk[&6].path);
        let mut bytes = std::fs::read(&victim).unwrap();
        *bytes.last_mut().unwrap() ^= 1;
        std::fs::write(&victim, bytes).unwrap();
        assert!(m.verify(dir.path()).is_err());
    }

    #[test]
    fn rebuilding_is_byte_identical() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let ma = build_dataset(&tiny(), a.path()).unwrap();
        let mb = build_dataset(&tiny(), b.path()).unwrap();
        assert_eq!(ma, mb);
    }

    #[test]
    fn splits_partition_all_items() {
        let s = assign_splits(20, 0.1, 0.25, 3).unwrap();
        let count = |k| s.iter().filter(|&&x| x == k).count();
        assert_eq!((count(Split::Test), count(Split::Val), count(Split::Train)), (5, 2, 13));
        assert_eq!(s, assign_splits(20, 0.1, 0.25, 3).unwrap());
        assert!(assign_splits(5, 0.5, 0.5, 0).is_err());
    }

    #[test]
    fn bad_ratio_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(build_dataset(&DatasetConfig { ratios: vec![1, 3], ..tiny() }, dir.path()).is_err());
    }
}
