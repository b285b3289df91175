//! Staged training: codebook prior learning on full-view volumes, sparse-view
//! code classification, and fusion fine-tuning. A direct sparse-to-full
//! autoencoder without codebook is trained the same way as an ablation
//! baseline.
//!
//! All volumes enter the networks min-max normalized with one mapping fitted
//! on the full-view training reconstructions and stored in the checkpoint.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codebook::{codebook_usage, nearest_indices, quantize_nearest, vq_loss, Codebook};
use crate::data_io::{crop_corner, derive_seed, load_projections, load_volume, DatasetManifest, MinMax, Split};
use crate::error::{Error, Result};
use crate::fdk::{fdk_reconstruct, Window};
use crate::geometry::{make_geometry, subsample_views, GeometryConfig, SUPPORTED_RATIOS};
use crate::networks::{
    argmax_channels, checksum, discriminator_loss, generator_adversarial_loss, load_params, perceptual_loss,
    set_trainable, to_checkpoint_entries, Classifier, Decoder, Discriminator, Encoder, Fusion, NamedParams,
    NetworkConfig, PerceptualExtractor,
};
use crate::projector::ProjectionSet;
use crate::tensor::{load_checkpoint, mse, no_grad, save_checkpoint, softmax_cross_entropy, Adam, Checkpoint, Tensor};
use crate::volume::Volume;

const TAG_ENC: u64 = 1;
const TAG_DEC: u64 = 2;
const TAG_DISC: u64 = 3;
const TAG_BOOK: u64 = 4;
const TAG_CLF: u64 = 5;
const TAG_FUSION: u64 = 6;
const TAG_PERCEPTUAL: u64 = 7;
const TAG_SHUFFLE: u64 = 10;
const TAG_CROP: u64 = 20;
const TAG_PLANES: u64 = 30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StageKind {
    /// Full-view autoencoder with codebook.
    Prior,
    /// Sparse-view encoder and code classifier.
    Classify,
    /// Fusion of sparse-view encoder features into the decoder.
    Fusion,
    /// Sparse-to-full autoencoder, no codebook.
    Direct,
}

impl StageKind {
    fn tag(self) -> u64 {
        match self {
            StageKind::Prior => 1,
            StageKind::Classify => 2,
            StageKind::Fusion => 3,
            StageKind::Direct => 4,
        }
    }
}

impl std::fmt::Display for StageKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StageKind::Prior => "stage1",
            StageKind::Classify => "stage2",
            StageKind::Fusion => "stage3",
            StageKind::Direct => "direct",
        })
    }
}

impl FromStr for StageKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stage1" | "1" => Ok(StageKind::Prior),
            "stage2" | "2" => Ok(StageKind::Classify),
            "stage3" | "3" => Ok(StageKind::Fusion),
            "direct" => Ok(StageKind::Direct),
            other => Err(Error::Parameter(format!("unknown stage `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub network: NetworkConfig,
    pub learning_rate: f64,
    pub batch_stage1: usize,
    pub batch_stage2: usize,
    pub batch_stage3: usize,
    /// Edge of the cubic training crops.
    pub patch_size: usize,
    /// One epoch draws one crop from every training volume.
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub epochs_stage3: usize,
    pub epochs_direct: usize,
    pub seed: u64,
    pub lambda_adv: f64,
    pub lambda_p: f64,
    /// Denominator of the sparse view ratio the sparse-view networks learn.
    pub sparse_ratio: usize,
    /// Inference runs on overlapping patch-sized tiles this far apart and
    /// averages them; 0 runs the whole volume in one pass.
    #[serde(default)]
    pub tile_stride: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            network: NetworkConfig::default(),
            learning_rate: Adam::DEFAULT_LR,
            batch_stage1: 3,
            batch_stage2: 4,
            batch_stage3: 3,
            patch_size: 32,
            epochs_stage1: 200,
            epochs_stage2: 200,
            epochs_stage3: 200,
            epochs_direct: 200,
            seed: 0,
            lambda_adv: 0.1,
            lambda_p: 1.0,
            sparse_ratio: 6,
            tile_stride: 8,
        }
    }
}

impl TrainConfig {
    /// Narrow networks and short schedules for a single CPU core.
    pub fn desk() -> Self {
        TrainConfig {
            network: NetworkConfig::desk(),
            learning_rate: 1e-3,
            epochs_stage1: 150,
            epochs_stage2: 100,
            epochs_stage3: 100,
            epochs_direct: 150,
            lambda_adv: 0.0,
            lambda_p: 0.0,
            ..Default::default()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Parameter(format!("train config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("train config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Parameter(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if [self.batch_stage1, self.batch_stage2, self.batch_stage3].contains(&0) {
            return Err(Error::Parameter("batch sizes must be positive".into()));
        }
        if self.patch_size == 0 || !self.patch_size.is_multiple_of(self.network.factor()) {
            return Err(Error::Parameter(format!(
                "patch size {} must be a positive multiple of {}",
                self.patch_size,
                self.network.factor()
            )));
        }
        if self.patch_size < 16 {
            return Err(Error::Parameter("patch size must be at least 16 for the discriminator".into()));
        }
        if !(self.lambda_adv >= 0.0 && self.lambda_p >= 0.0) {
            return Err(Error::Parameter("loss weights must be non-negative".into()));
        }
        if !SUPPORTED_RATIOS.contains(&self.sparse_ratio) {
            return Err(Error::Parameter(format!("unsupported sparse ratio {}", self.sparse_ratio)));
        }
        if self.tile_stride > self.patch_size {
            return Err(Error::Parameter(format!(
                "tile stride {} exceeds the patch size {}",
                self.tile_stride, self.patch_size
            )));
        }
        Ok(())
    }

    fn batch(&self, stage: StageKind) -> usize {
        match stage {
            StageKind::Prior | StageKind::Direct => self.batch_stage1,
            StageKind::Classify => self.batch_stage2,
            StageKind::Fusion => self.batch_stage3,
        }
    }

    fn epochs(&self, stage: StageKind) -> usize {
        match stage {
            StageKind::Prior => self.epochs_stage1,
            StageKind::Classify => self.epochs_stage2,
            StageKind::Fusion => self.epochs_stage3,
            StageKind::Direct => self.epochs_direct,
        }
    }

    pub fn hash(&self) -> String {
        crate::data_io::sha256_hex(self.to_toml_string().as_bytes())
    }
}

/// Acquisition and intensity mapping the networks were trained for.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineData {
    pub geometry: GeometryConfig,
    pub window: Window,
    pub sparse_ratio: usize,
    pub norm: MinMax,
}

/// Registered normalized full-view and sparse-view reconstructions.
#[derive(Clone, Debug, Default)]
pub struct PairedVolumes {
    pub ids: Vec<String>,
    pub full: Vec<Volume>,
    pub sparse: Vec<Volume>,
}

impl PairedVolumes {
    pub fn len(&self) -> usize {
        self.full.len()
    }

    pub fn is_empty(&self) -> bool {
        self.full.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct TrainingData {
    pub info: PipelineData,
    pub train: PairedVolumes,
    pub test: PairedVolumes,
}

impl TrainingData {
    /// FDK volumes of the manifest at full and `1/sparse_ratio` views.
    pub fn from_manifest(path: &Path, sparse_ratio: usize) -> Result<Self> {
        let manifest = DatasetManifest::load(path)?;
        let root = path.parent().unwrap_or(Path::new("."));
        let load = |split: Split| -> Result<(Vec<String>, Vec<Volume>, Vec<Volume>)> {
            let mut out = (Vec::new(), Vec::new(), Vec::new());
            for e in manifest.split(split) {
                let rec = |r: usize| {
                    e.fdk.get(&r).ok_or_else(|| {
                        Error::Parameter(format!("dataset has no 1/{r}-view reconstruction for {}", e.id))
                    })
                };
                out.0.push(e.id.clone());
                out.1.push(load_volume(&root.join(&rec(1)?.path))?);
                out.2.push(load_volume(&root.join(&rec(sparse_ratio)?.path))?);
            }
            Ok(out)
        };
        let (train_ids, train_full, train_sparse) = load(Split::Train)?;
        let (test_ids, test_full, test_sparse) = load(Split::Test)?;
        let info = PipelineData {
            geometry: manifest.config.geometry.clone(),
            window: manifest.config.window,
            sparse_ratio,
            norm: MinMax::fit(&train_full.iter().collect::<Vec<_>>())?,
        };
        let norm = |v: Vec<Volume>| v.iter().map(|x| info.norm.apply(x)).collect();
        Ok(TrainingData {
            train: PairedVolumes {
                ids: train_ids,
                full: norm(train_full),
                sparse: norm(train_sparse),
            },
            test: PairedVolumes {
                ids: test_ids,
                full: norm(test_full),
                sparse: norm(test_sparse),
            },
            info,
        })
    }
}

/// One optimization step's loss values.
#[derive(Clone, Debug, PartialEq)]
pub struct LossRecord {
    pub stage: StageKind,
    pub step: usize,
    pub epoch: usize,
    pub terms: Vec<(&'static str, f64)>,
}

impl LossRecord {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|t| t.0 == name).map(|t| t.1)
    }
}

pub fn write_loss_csv(path: &Path, records: &[LossRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let csv_err = |e: csv::Error| Error::format(path, e.to_string());
    if let Some(first) = records.first() {
        let mut header = vec!["stage".to_string(), "step".into(), "epoch".into()];
        header.extend(first.terms.iter().map(|t| t.0.to_string()));
        w.write_record(&header).map_err(csv_err)?;
    }
    for r in records {
        let mut row = vec![r.stage.to_string(), r.step.to_string(), r.epoch.to_string()];
        row.extend(r.terms.iter().map(|t| format!("{:?}", t.1)));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Trailing moving average with window `n` (shorter at the start).
pub fn moving_average(values: &[f64], n: usize) -> Vec<f64> {
    let n = n.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    for (i, v) in values.iter().enumerate() {
        acc += v;
        if i >= n {
            acc -= values[i - n];
        }
        out.push(acc / (i + 1).min(n) as f64);
    }
    out
}

/// Networks, codebook and freeze bookkeeping at one point of the schedule.
#[derive(Clone, Debug)]
pub struct StagePipeline {
    pub stage: StageKind,
    pub config: TrainConfig,
    pub data: PipelineData,
    pub enc_f: Encoder,
    pub dec_f: Decoder,
    pub codebook: Codebook,
    pub disc: Discriminator,
    pub enc_s: Option<Encoder>,
    pub clf: Option<Classifier>,
    pub fusion: Option<Fusion>,
    /// Checksums of components that were frozen when this stage began.
    pub frozen: BTreeMap<String, String>,
}

impl StagePipeline {
    /// Freshly initialized Stage-1 (or direct) components.
    pub fn init(stage: StageKind, config: &TrainConfig, data: &PipelineData) -> Result<Self> {
        if !matches!(stage, StageKind::Prior | StageKind::Direct) {
            return Err(Error::Contract(format!("{stage} starts from an earlier stage")));
        }
        config.validate()?;
        let net = &config.network;
        let s = config.seed;
        Ok(StagePipeline {
            stage,
            config: config.clone(),
            data: data.clone(),
            enc_f: Encoder::new(net, derive_seed(s, TAG_ENC, 0))?,
            dec_f: Decoder::new(net, derive_seed(s, TAG_DEC, 0))?,
            codebook: Codebook::random(net.codebook_size, net.code_dim, 1.0, derive_seed(s, TAG_BOOK, 0))?,
            disc: Discriminator::new(net, derive_seed(s, TAG_DISC, 0))?,
            enc_s: None,
            clf: None,
            fusion: None,
            frozen: BTreeMap::new(),
        })
    }

    pub fn components(&self) -> Vec<&'static str> {
        let mut out = vec!["enc_f", "dec_f", "codebook", "disc"];
        if self.enc_s.is_some() {
            out.push("enc_s");
        }
        if self.clf.is_some() {
            out.push("clf");
        }
        if self.fusion.is_some() {
            out.push("fusion");
        }
        out
    }

    pub fn component_params(&self, name: &str) -> NamedParams {
        match name {
            "enc_f" => self.enc_f.params(name),
            "dec_f" => self.dec_f.params(name),
            "codebook" => vec![("codebook.codes".to_string(), self.codebook.codes.clone())],
            "disc" => self.disc.params(name),
            "enc_s" => self.enc_s.as_ref().map(|e| e.params(name)).unwrap_or_default(),
            "clf" => self.clf.as_ref().map(|c| c.params(name)).unwrap_or_default(),
            "fusion" => self.fusion.as_ref().map(|f| f.params(name)).unwrap_or_default(),
            _ => Vec::new(),
        }
    }

    pub fn params(&self) -> NamedParams {
        self.components().iter().flat_map(|c| self.component_params(c)).collect()
    }

    pub fn checksums(&self) -> BTreeMap<String, String> {
        self.components()
            .iter()
            .map(|c| (c.to_string(), checksum(&self.component_params(c))))
            .collect()
    }

    /// Components that stay fixed while this stage trains.
    pub fn frozen_components(&self) -> Vec<&'static str> {
        match self.stage {
            StageKind::Prior | StageKind::Direct => vec![],
            StageKind::Classify => vec!["enc_f", "dec_f", "codebook", "disc"],
            StageKind::Fusion => vec!["enc_f", "dec_f", "codebook", "clf"],
        }
    }

    fn trainable_components(&self) -> Vec<&'static str> {
        match self.stage {
            StageKind::Prior => vec!["enc_f", "dec_f", "codebook"],
            StageKind::Direct => vec!["enc_f", "dec_f"],
            StageKind::Classify => vec!["enc_s", "clf"],
            StageKind::Fusion => vec!["enc_s", "fusion"],
        }
    }

    fn record_frozen(&mut self) {
        self.frozen = self
            .frozen_components()
            .iter()
            .map(|c| (c.to_string(), checksum(&self.component_params(c))))
            .collect();
    }

    /// Contract error if any frozen component differs from its recorded checksum.
    pub fn verify_frozen(&self) -> Result<()> {
        for (name, want) in &self.frozen {
            let got = checksum(&self.component_params(name));
            if &got != want {
                return Err(Error::Contract(format!(
                    "frozen component `{name}` changed during {}: {want} -> {got}",
                    self.stage
                )));
            }
        }
        Ok(())
    }

    /// Parameters updated by this stage's optimizer. In Stage 3 the sparse
    /// encoder's code projection only feeds the classifier argmax, so it
    /// receives no gradient and stays fixed.
    pub fn trainable_params(&self) -> NamedParams {
        self.trainable_components()
            .iter()
            .flat_map(|c| self.component_params(c))
            .filter(|(name, _)| !(self.stage == StageKind::Fusion && name.starts_with("enc_s.to_code.")))
            .collect()
    }

    /// Set requires_grad for the current stage; the discriminator is handled
    /// separately by its own update.
    pub fn apply_freeze(&self) {
        for c in self.components() {
            set_trainable(&self.component_params(c), false);
        }
        set_trainable(&self.trainable_params(), true);
    }

    /// Continue into the next codebook stage.
    pub fn advance(&self) -> Result<StagePipeline> {
        // the next stage trains some of these weights; keep this pipeline intact
        let mut next = self.independent_copy()?;
        let net = &self.config.network;
        match self.stage {
            StageKind::Prior => {
                next.stage = StageKind::Classify;
                next.enc_s = Some(self.enc_f.deep_copy());
                next.clf = Some(Classifier::new(net, derive_seed(self.config.seed, TAG_CLF, 0))?);
            }
            StageKind::Classify => {
                next.stage = StageKind::Fusion;
                next.fusion = Some(Fusion::new(net, derive_seed(self.config.seed, TAG_FUSION, 0))?);
            }
            other => return Err(Error::Contract(format!("no stage follows {other}"))),
        }
        next.record_frozen();
        Ok(next)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut meta = BTreeMap::new();
        meta.insert("stage".into(), self.stage.to_string());
        meta.insert("train_config".into(), serde_json::to_string(&self.config).expect("serializes"));
        meta.insert("data".into(), serde_json::to_string(&self.data).expect("serializes"));
        meta.insert("frozen".into(), serde_json::to_string(&self.frozen).expect("serializes"));
        meta.insert("perceptual".into(), self.perceptual().checksum());
        Checkpoint {
            meta,
            entries: to_checkpoint_entries(&self.params()),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let field = |k: &str| {
            ckpt.meta
                .get(k)
                .ok_or_else(|| Error::Contract(format!("checkpoint lacks `{k}` metadata")))
        };
        let json_err = |e: serde_json::Error| Error::Contract(format!("checkpoint metadata: {e}"));
        let stage: StageKind = field("stage")?.parse()?;
        let config: TrainConfig = serde_json::from_str(field("train_config")?).map_err(json_err)?;
        let data: PipelineData = serde_json::from_str(field("data")?).map_err(json_err)?;
        let base = if stage == StageKind::Direct { StageKind::Direct } else { StageKind::Prior };
        let mut p = StagePipeline::init(base, &config, &data)?;
        if matches!(stage, StageKind::Classify | StageKind::Fusion) {
            p = p.advance()?;
        }
        if stage == StageKind::Fusion {
            p = p.advance()?;
        }
        p.frozen = serde_json::from_str(field("frozen")?).map_err(json_err)?;
        load_params(&p.params(), ckpt)?;
        Ok(p)
    }

    /// Same pipeline with its own parameter storage.
    pub fn independent_copy(&self) -> Result<StagePipeline> {
        Self::from_checkpoint(&self.to_checkpoint())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.to_checkpoint())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&load_checkpoint(path)?)
    }

    pub fn perceptual(&self) -> PerceptualExtractor {
        PerceptualExtractor::new(derive_seed(self.config.seed, TAG_PERCEPTUAL, 0))
    }

    fn sparse_encoder(&self) -> Result<&Encoder> {
        self.enc_s
            .as_ref()
            .ok_or_else(|| Error::Contract(format!("{} has no sparse-view encoder", self.stage)))
    }

    /// Codes chosen by the classifier for sparse-view features.
    pub fn classified_codes(&self, z_s: &Tensor) -> Result<Tensor> {
        let clf = self
            .clf
            .as_ref()
            .ok_or_else(|| Error::Contract(format!("{} has no code classifier", self.stage)))?;
        let (indices, grid) = no_grad(|| argmax_channels(&clf.classify(&z_s.detach())?))?;
        no_grad(|| self.codebook.lookup(&indices, &grid))
    }

    /// Normalized `[N, 1, D, H, W]` input → normalized output, as `stage` would.
    pub fn reconstruct_as(&self, stage: StageKind, x: &Tensor) -> Result<Tensor> {
        match stage {
            StageKind::Prior => {
                let z = self.enc_f.encode(x)?.z;
                let a = quantize_nearest(&z, &self.codebook)?;
                self.dec_f.decode(&a.quantized, None)
            }
            StageKind::Direct => self.dec_f.decode(&self.enc_f.encode(x)?.z, None),
            StageKind::Classify => {
                let z_q = self.classified_codes(&self.sparse_encoder()?.encode(x)?.z)?;
                self.dec_f.decode(&z_q, None)
            }
            StageKind::Fusion => {
                let fusion = self
                    .fusion
                    .as_ref()
                    .ok_or_else(|| Error::Contract(format!("{} has no fusion module", self.stage)))?;
                let enc = self.sparse_encoder()?.encode(x)?;
                let z_q = self.classified_codes(&enc.z)?;
                self.dec_f.decode(&z_q, Some((fusion, &enc.skips)))
            }
        }
    }

    pub fn reconstruct(&self, x: &Tensor) -> Result<Tensor> {
        self.reconstruct_as(self.stage, x)
    }

    /// [`reconstruct`](Self::reconstruct) of a normalized volume, tiled as
    /// the config's `tile_stride` asks.
    pub fn reconstruct_volume(&self, x: &Volume) -> Result<Volume> {
        let t = self.config.patch_size;
        let stride = self.config.tile_stride;
        if stride == 0 || x.shape.iter().any(|&n| n <= t) {
            let y = no_grad(|| self.reconstruct(&x.to_tensor()))?;
            return x.with_tensor_sample(&y, 0);
        }
        let starts = x.shape.map(|n| tile_starts(n, t, stride));
        let mut sum = vec![0.0; x.len()];
        let mut count = vec![0u32; x.len()];
        for &z in &starts[0] {
            for &y in &starts[1] {
                for &w in &starts[2] {
                    let tile = x.crop([z, y, w], [t; 3])?;
                    let out = no_grad(|| self.reconstruct(&tile.to_tensor()))?;
                    let out = out.data();
                    for a in 0..t {
                        for b in 0..t {
                            let row = x.index(z + a, y + b, w);
                            let src = (a * t + b) * t;
                            for c in 0..t {
                                sum[row + c] += out[src + c];
                                count[row + c] += 1;
                            }
                        }
                    }
                }
            }
        }
        let data = sum.iter().zip(&count).map(|(s, &c)| s / c as f64).collect();
        Volume::from_data(x.shape, x.spacing, data)
    }

    /// Network output for a sparse-view FDK volume, in its original units.
    pub fn infer_volume(&self, sparse_fdk: &Volume) -> Result<Volume> {
        let y = self.reconstruct_volume(&self.data.norm.apply(sparse_fdk))?;
        Ok(self.data.norm.restore(&y))
    }
}

/// Tile origins along one axis: every `stride`, plus a last tile flush with the end.
fn tile_starts(n: usize, tile: usize, stride: usize) -> Vec<usize> {
    let mut starts: Vec<usize> = (0..=n - tile).step_by(stride).collect();
    if starts.last() != Some(&(n - tile)) {
        starts.push(n - tile);
    }
    starts
}

/// FDK of sparse projections followed by the trained networks.
pub fn infer(sparse: &ProjectionSet, pipeline: &StagePipeline) -> Result<Volume> {
    let full = make_geometry(&pipeline.data.geometry)?;
    let hash = sparse.geometry.hash();
    let known = SUPPORTED_RATIOS
        .iter()
        .any(|&r| subsample_views(&full, r).map(|s| s.geometry().hash() == hash).unwrap_or(false));
    if !known {
        return Err(Error::Contract(format!(
            "projection geometry {hash} is not a view subset of the training geometry {}",
            full.hash()
        )));
    }
    let fdk = fdk_reconstruct(sparse, pipeline.data.geometry.volume_shape, pipeline.data.window)?;
    pipeline.infer_volume(&fdk)
}

/// Convenience: load projections and a checkpoint, then infer.
pub fn infer_files(projections: &Path, checkpoint: &Path) -> Result<Volume> {
    infer(&load_projections(projections)?, &StagePipeline::load(checkpoint)?)
}

/// Scalar loss and its logged components.
pub struct Loss {
    pub total: Tensor,
    pub terms: Vec<(&'static str, f64)>,
    pub output: Tensor,
    pub indices: Vec<usize>,
    /// Encoder features before quantization (Stage 1 only).
    pub features: Option<Tensor>,
}

fn weighted(total: Tensor, term: &Tensor, weight: f64) -> Result<Tensor> {
    if weight == 0.0 {
        Ok(total)
    } else {
        total.add(&term.scale(weight))
    }
}

/// Adversarial and perceptual terms for a generator output.
fn realism_terms(p: &StagePipeline, target: &Tensor, output: &Tensor, plane_seed: u64) -> Result<(Tensor, Tensor)> {
    let cfg = &p.config;
    let adv = if cfg.lambda_adv > 0.0 {
        generator_adversarial_loss(&p.disc.discriminate(output)?)
    } else {
        Tensor::scalar(0.0)
    };
    let perc = if cfg.lambda_p > 0.0 {
        perceptual_loss(target, output, &p.perceptual(), plane_seed)?
    } else {
        Tensor::scalar(0.0)
    };
    Ok((adv, perc))
}

/// `L_VQ + λ_Adv·L_Adv + λ_p·L_p` for a batch of full-view volumes.
pub fn stage1_loss(p: &StagePipeline, x: &Tensor, plane_seed: u64) -> Result<Loss> {
    let z = p.enc_f.encode(x)?.z;
    let a = quantize_nearest(&z, &p.codebook)?;
    let out = p.dec_f.decode(&a.straight_through(&z)?, None)?;
    let vq = vq_loss(x, &out, &z, &a.quantized)?;
    let rec = mse(x, &out)?.item();
    let (adv, perc) = realism_terms(p, x, &out, plane_seed)?;
    let total = weighted(weighted(vq.clone(), &adv, p.config.lambda_adv)?, &perc, p.config.lambda_p)?;
    Ok(Loss {
        terms: vec![
            ("loss", total.item()),
            ("vq", vq.item()),
            ("reconstruction", rec),
            ("adversarial", adv.item()),
            ("perceptual", perc.item()),
        ],
        total,
        output: out,
        indices: a.indices,
        features: Some(z.detach()),
    })
}

/// `mse(I_F, Î) + λ_Adv·L_Adv + λ_p·L_p` for the direct sparse-to-full mapping.
pub fn direct_loss(p: &StagePipeline, sparse: &Tensor, full: &Tensor, plane_seed: u64) -> Result<Loss> {
    let out = p.dec_f.decode(&p.enc_f.encode(sparse)?.z, None)?;
    let rec = mse(full, &out)?;
    let (adv, perc) = realism_terms(p, full, &out, plane_seed)?;
    let total = weighted(weighted(rec.clone(), &adv, p.config.lambda_adv)?, &perc, p.config.lambda_p)?;
    Ok(Loss {
        terms: vec![
            ("loss", total.item()),
            ("reconstruction", rec.item()),
            ("adversarial", adv.item()),
            ("perceptual", perc.item()),
        ],
        total,
        output: out,
        indices: Vec::new(),
        features: None,
    })
}

/// Code labels of full-view volumes under the frozen encoder and codebook.
pub fn code_labels(p: &StagePipeline, full: &Tensor) -> Result<Vec<usize>> {
    no_grad(|| Ok(nearest_indices(&p.enc_f.encode(full)?.z, &p.codebook)?.0))
}

/// `mse(Z_S, Z_F) + CE(φ(Z_S), y)`.
pub fn stage2_loss(p: &StagePipeline, sparse: &Tensor, full: &Tensor) -> Result<Loss> {
    let enc_s = p.sparse_encoder()?;
    let clf = p.clf.as_ref().ok_or_else(|| Error::Contract("stage 2 needs a classifier".into()))?;
    let z_f = no_grad(|| p.enc_f.encode(full))?.z.detach();
    let labels = no_grad(|| nearest_indices(&z_f, &p.codebook))?.0;
    let z_s = enc_s.encode(sparse)?.z;
    let logits = clf.classify(&z_s)?;
    let feature = mse(&z_s, &z_f)?;
    let ce = softmax_cross_entropy(&logits, &labels)?;
    let (pred, _) = argmax_channels(&logits)?;
    let acc = pred.iter().zip(&labels).filter(|(a, b)| a == b).count() as f64 / labels.len() as f64;
    let total = feature.add(&ce)?;
    Ok(Loss {
        terms: vec![
            ("loss", total.item()),
            ("feature", feature.item()),
            ("cross_entropy", ce.item()),
            ("code_accuracy", acc),
        ],
        total,
        output: z_s,
        indices: pred,
        features: None,
    })
}

/// `mse(I_F, Î_F) + λ_Adv·L_Adv + λ_p·L_p` with the fused decoder output.
pub fn stage3_loss(p: &StagePipeline, sparse: &Tensor, full: &Tensor, plane_seed: u64) -> Result<Loss> {
    let out = p.reconstruct_as(StageKind::Fusion, sparse)?;
    let rec = mse(full, &out)?;
    let (adv, perc) = realism_terms(p, full, &out, plane_seed)?;
    let total = weighted(weighted(rec.clone(), &adv, p.config.lambda_adv)?, &perc, p.config.lambda_p)?;
    Ok(Loss {
        terms: vec![
            ("loss", total.item()),
            ("reconstruction", rec.item()),
            ("adversarial", adv.item()),
            ("perceptual", perc.item()),
        ],
        total,
        output: out,
        indices: Vec::new(),
        features: None,
    })
}

/// Trained pipeline and its per-step loss log.
pub struct StageRun {
    pub pipeline: StagePipeline,
    pub log: Vec<LossRecord>,
}

/// Crops `(sparse, full)` for the samples of one step, same corner in both.
fn batch(data: &PairedVolumes, order: &[usize], size: usize, seed: u64, call: &mut u64) -> Result<(Tensor, Tensor)> {
    let mut sparse = Vec::with_capacity(order.len());
    let mut full = Vec::with_capacity(order.len());
    for &i in order {
        let c = crop_corner(data.full[i].shape, size, seed, *call)?;
        *call += 1;
        sparse.push(data.sparse[i].crop(c, [size; 3])?);
        full.push(data.full[i].crop(c, [size; 3])?);
    }
    Ok((
        Volume::batch_tensor(&sparse.iter().collect::<Vec<_>>())?,
        Volume::batch_tensor(&full.iter().collect::<Vec<_>>())?,
    ))
}

fn check_finite(p: &StagePipeline, value: f64, step: usize, abort_path: Option<&Path>) -> Result<()> {
    if value.is_finite() {
        return Ok(());
    }
    if let Some(path) = abort_path {
        p.save(path)?;
        log::error!("non-finite loss at step {step}; last good weights in {}", path.display());
    }
    Err(Error::NonFinite { step })
}

fn train_loop(p: StagePipeline, data: &TrainingData, abort_path: Option<&Path>) -> Result<StageRun> {
    let train = &data.train;
    if train.is_empty() {
        return Err(Error::Parameter("training split is empty".into()));
    }
    let stage = p.stage;
    let cfg = p.config.clone();
    let phi_sum = p.perceptual().checksum();
    p.apply_freeze();
    let params: Vec<Tensor> = p.trainable_params().into_iter().map(|t| t.1).collect();
    let mut opt = Adam::new(params, cfg.learning_rate);
    let use_disc = cfg.lambda_adv > 0.0 && stage != StageKind::Classify;
    let disc_params = p.component_params("disc");
    let mut opt_d = Adam::new(disc_params.iter().map(|t| t.1.clone()).collect(), cfg.learning_rate);
    set_trainable(&disc_params, false);

    let crop_seed = derive_seed(cfg.seed, TAG_CROP, stage.tag());
    let mut call = 0u64;
    let mut log = Vec::new();
    let mut step = 0usize;
    let mut last_features = None;
    for epoch in 0..cfg.epochs(stage) {
        let mut usage = vec![0u64; cfg.network.codebook_size];
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, TAG_SHUFFLE + stage.tag(), epoch as u64)));
        for chunk in order.chunks(cfg.batch(stage)) {
            let (sparse, full) = batch(train, chunk, cfg.patch_size, crop_seed, &mut call)?;
            let plane_seed = derive_seed(cfg.seed, TAG_PLANES + stage.tag(), step as u64);
            if stage == StageKind::Prior && step == 0 {
                let z = no_grad(|| p.enc_f.encode(&full))?.z;
                let init = Codebook::from_features(&z, cfg.network.codebook_size, derive_seed(cfg.seed, TAG_BOOK, 1))?;
                p.codebook.codes.data_mut().copy_from_slice(&init.codes.data());
            }
            if stage == StageKind::Fusion && step == 0 {
                let before = no_grad(|| p.reconstruct_as(StageKind::Classify, &sparse))?;
                let after = no_grad(|| p.reconstruct_as(StageKind::Fusion, &sparse))?;
                if before.to_vec() != after.to_vec() {
                    return Err(Error::Contract("stage 3 does not start from the stage 2 output".into()));
                }
            }
            let loss = match stage {
                StageKind::Prior => stage1_loss(&p, &full, plane_seed)?,
                StageKind::Direct => direct_loss(&p, &sparse, &full, plane_seed)?,
                StageKind::Classify => stage2_loss(&p, &sparse, &full)?,
                StageKind::Fusion => stage3_loss(&p, &sparse, &full, plane_seed)?,
            };
            check_finite(&p, loss.total.item(), step, abort_path)?;
            loss.total.backward()?;
            opt.step()?;
            let mut terms = loss.terms.clone();
            if stage == StageKind::Prior {
                let u = codebook_usage(cfg.network.codebook_size, [loss.indices.as_slice()]);
                usage.iter_mut().zip(&u.counts).for_each(|(a, b)| *a += b);
                terms.push(("code_usage", u.fraction()));
                last_features = loss.features.clone();
            }
            if use_disc {
                set_trainable(&disc_params, true);
                let real = p.disc.discriminate(&full)?;
                let fake = p.disc.discriminate(&loss.output.detach())?;
                let d_loss = discriminator_loss(&real, &fake)?;
                check_finite(&p, d_loss.item(), step, abort_path)?;
                d_loss.backward()?;
                opt_d.step()?;
                set_trainable(&disc_params, false);
                terms.push(("discriminator", d_loss.item()));
            }
            drop(loss);
            log::debug!("{stage} epoch {epoch} step {step}: {terms:?}");
            log.push(LossRecord { stage, step, epoch, terms });
            step += 1;
        }
        if let (Some(z), true) = (&last_features, epoch + 1 < cfg.epochs(stage)) {
            let seed = derive_seed(cfg.seed, TAG_BOOK, 2 + epoch as u64);
            let moved = p.codebook.restart_unused(&usage, z, seed)?;
            if moved > 0 {
                log::info!("{stage} epoch {}: restarted {moved} unused codes", epoch + 1);
            }
        }
        if let Some(last) = log.last() {
            log::info!("{stage} epoch {}/{}: {:?}", epoch + 1, cfg.epochs(stage), last.terms);
        }
    }
    p.verify_frozen()?;
    if p.perceptual().checksum() != phi_sum {
        return Err(Error::Contract("perceptual extractor changed during training".into()));
    }
    for c in p.components() {
        set_trainable(&p.component_params(c), true);
    }
    Ok(StageRun { pipeline: p, log })
}

/// Joint encoder, decoder, codebook and discriminator training on full-view volumes.
pub fn train_stage1(data: &TrainingData, cfg: &TrainConfig, abort_path: Option<&Path>) -> Result<StageRun> {
    check_ratio(data, cfg)?;
    train_loop(StagePipeline::init(StageKind::Prior, cfg, &data.info)?, data, abort_path)
}

/// Sparse-view encoder (copied from the full-view encoder) and classifier;
/// decoder and codebook frozen.
pub fn train_stage2(data: &TrainingData, stage1: &StagePipeline, abort_path: Option<&Path>) -> Result<StageRun> {
    expect_stage(stage1, StageKind::Prior)?;
    check_ratio(data, &stage1.config)?;
    train_loop(stage1.advance()?, data, abort_path)
}

/// Fusion module and sparse-view encoder; everything else frozen.
pub fn train_stage3(data: &TrainingData, stage2: &StagePipeline, abort_path: Option<&Path>) -> Result<StageRun> {
    expect_stage(stage2, StageKind::Classify)?;
    check_ratio(data, &stage2.config)?;
    train_loop(stage2.advance()?, data, abort_path)
}

/// Stage-1 architecture mapping sparse-view to full-view volumes directly.
pub fn train_direct(data: &TrainingData, cfg: &TrainConfig, abort_path: Option<&Path>) -> Result<StageRun> {
    check_ratio(data, cfg)?;
    train_loop(StagePipeline::init(StageKind::Direct, cfg, &data.info)?, data, abort_path)
}

/// Use `cfg` for the schedule of later stages, keeping the trained architecture.
pub fn with_schedule(p: &StagePipeline, cfg: &TrainConfig) -> Result<StagePipeline> {
    if cfg.network != p.config.network || cfg.seed != p.config.seed {
        return Err(Error::Parameter("network and seed must match the checkpoint being continued".into()));
    }
    cfg.validate()?;
    let mut out = p.clone();
    out.config = cfg.clone();
    Ok(out)
}

fn expect_stage(p: &StagePipeline, want: StageKind) -> Result<()> {
    if p.stage != want {
        return Err(Error::Contract(format!("expected a {want} checkpoint, got {}", p.stage)));
    }
    Ok(())
}

fn check_ratio(data: &TrainingData, cfg: &TrainConfig) -> Result<()> {
    if data.info.sparse_ratio != cfg.sparse_ratio {
        return Err(Error::Parameter(format!(
            "data holds 1/{} views but the config trains 1/{}",
            data.info.sparse_ratio, cfg.sparse_ratio
        )));
    }
    Ok(())
}

/// Held-out top-1 agreement between classifier and full-view code labels.
pub fn code_accuracy(p: &StagePipeline, set: &PairedVolumes) -> Result<f64> {
    let clf = p.clf.as_ref().ok_or_else(|| Error::Contract("no classifier".into()))?;
    let enc_s = p.sparse_encoder()?;
    let (mut hit, mut total) = (0usize, 0usize);
    for (s, f) in set.sparse.iter().zip(&set.full) {
        let labels = code_labels(p, &f.to_tensor())?;
        let (pred, _) = no_grad(|| argmax_channels(&clf.classify(&enc_s.encode(&s.to_tensor())?.z)?))?;
        hit += pred.iter().zip(&labels).filter(|(a, b)| a == b).count();
        total += labels.len();
    }
    Ok(hit as f64 / total.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_difference_check_many;
    use rand::Rng;

    fn toy_config() -> TrainConfig {
        TrainConfig {
            network: NetworkConfig {
                base_channels: 2,
                levels: 1,
                res_blocks: 1,
                code_dim: 3,
                codebook_size: 6,
                leaky_slope: 0.2,
                classifier_hidden: 4,
                fusion_kernels: vec![3, 1],
                discriminator_channels: 2,
            },
            learning_rate: 1e-3,
            batch_stage1: 2,
            batch_stage2: 2,
            batch_stage3: 2,
            patch_size: 16,
            epochs_stage1: 2,
            epochs_stage2: 2,
            epochs_stage3: 2,
            epochs_direct: 1,
            seed: 3,
            lambda_adv: 0.1,
            lambda_p: 1.0,
            sparse_ratio: 6,
            tile_stride: 8,
        }
    }

    fn toy_data(n: usize) -> TrainingData {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut set = PairedVolumes::default();
        for i in 0..n {
            let full: Vec<f64> = (0..18 * 18 * 18).map(|j| ((j % 18) as f64 * 0.2 + (j / 324) as f64 * 0.1 + i as f64).sin()).collect();
            let sparse = full.iter().map(|v| v + rng.gen_range(-0.2..0.2)).collect();
            set.ids.push(format!("toy{i}"));
            set.full.push(Volume::from_data([18; 3], 1.0, full).unwrap());
            set.sparse.push(Volume::from_data([18; 3], 1.0, sparse).unwrap());
        }
        TrainingData {
            info: PipelineData {
                geometry: GeometryConfig::desk(18, 12),
                window: Window::Hann,
                sparse_ratio: 6,
                norm: MinMax::new(-1.0, 1.0).unwrap(),
            },
            train: set.clone(),
            test: set,
        }
    }

    fn toy_batch(seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(&[1, 1, 16, 16, 16], (0..4096).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = TrainConfig::desk();
        assert_eq!(TrainConfig::from_toml_str(&cfg.to_toml_string()).unwrap(), cfg);
        let bad = TrainConfig { patch_size: 31, ..TrainConfig::desk() };
        assert!(bad.validate().is_err());
        assert!(TrainConfig::from_toml_str("learning_rate = 1.0\nbogus = 2").is_err());
    }

    #[test]
    fn stage1_loss_reduces_to_vq_without_weights() {
        let cfg = TrainConfig { lambda_adv: 0.0, lambda_p: 0.0, ..toy_config() };
        let p = StagePipeline::init(StageKind::Prior, &cfg, &toy_data(1).info).unwrap();
        let x = toy_batch(2);
        let loss = stage1_loss(&p, &x, 0).unwrap();
        let z = p.enc_f.encode(&x).unwrap().z;
        let a = quantize_nearest(&z, &p.codebook).unwrap();
        let out = p.dec_f.decode(&a.quantized, None).unwrap();
        let vq = vq_loss(&x, &out, &z, &a.quantized).unwrap().item();
        assert_eq!(loss.total.item(), vq);
    }

    #[test]
    fn stage1_loss_gradient_matches_finite_differences() {
        let p = StagePipeline::init(StageKind::Prior, &toy_config(), &toy_data(1).info).unwrap();
        let x = toy_batch(4);
        let params: Vec<Tensor> = p
            .component_params("dec_f")
            .into_iter()
            .chain(p.component_params("codebook"))
            .map(|t| t.1)
            .collect();
        let refs: Vec<&Tensor> = params.iter().collect();
        set_trainable(&p.component_params("disc"), false);
        let err = finite_difference_check_many(|| Ok(stage1_loss(&p, &x, 7)?.total), &refs[..4], 1e-6).unwrap();
        assert!(err < 1e-3, "decoder {err}");
        // the codebook reaches the loss through its own term only; the decoder
        // path is straight-through and carries no codebook gradient
        let err = finite_difference_check_many(
            || {
                let z = p.enc_f.encode(&x)?.z.detach();
                mse(&z, &quantize_nearest(&z, &p.codebook)?.quantized)
            },
            &[&p.codebook.codes],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "codebook {err}");
    }

    #[test]
    fn later_stage_losses_pass_gradient_checks() {
        let data = toy_data(1);
        let s1 = StagePipeline::init(StageKind::Prior, &toy_config(), &data.info).unwrap();
        let s2 = s1.advance().unwrap();
        let (sparse, full) = (toy_batch(5), toy_batch(6));
        s2.apply_freeze();
        let clf: Vec<Tensor> = s2.component_params("clf").into_iter().map(|t| t.1).collect();
        let refs: Vec<&Tensor> = clf.iter().collect();
        let err = finite_difference_check_many(|| Ok(stage2_loss(&s2, &sparse, &full)?.total), &refs, 1e-6).unwrap();
        assert!(err < 1e-3, "stage 2 {err}");

        let s3 = s2.advance().unwrap();
        s3.apply_freeze();
        set_trainable(&s3.component_params("disc"), false);
        // perturb the zero-initialized output conv so every fusion weight matters
        for (_, t) in s3.component_params("fusion") {
            let mut d = t.data_mut();
            for (i, v) in d.iter_mut().enumerate() {
                *v += 0.01 * ((i % 7) as f64 - 3.0);
            }
        }
        let fusion: Vec<Tensor> = s3.component_params("fusion").into_iter().map(|t| t.1).collect();
        let refs: Vec<&Tensor> = fusion.iter().collect();
        let err = finite_difference_check_many(|| Ok(stage3_loss(&s3, &sparse, &full, 1)?.total), &refs, 1e-6).unwrap();
        assert!(err < 1e-3, "stage 3 {err}");
    }

    #[test]
    fn stage2_feature_loss_vanishes_on_full_view_input() {
        let data = toy_data(1);
        let s2 = StagePipeline::init(StageKind::Prior, &toy_config(), &data.info).unwrap().advance().unwrap();
        let x = toy_batch(8);
        let loss = stage2_loss(&s2, &x, &x).unwrap();
        assert_eq!(loss.get_term("feature"), 0.0);
    }

    impl Loss {
        fn get_term(&self, name: &str) -> f64 {
            self.terms.iter().find(|t| t.0 == name).unwrap().1
        }
    }

    #[test]
    fn schedule_freezes_and_chains() {
        let data = toy_data(3);
        let cfg = toy_config();
        let s1 = train_stage1(&data, &cfg, None).unwrap();
        assert_eq!(s1.log.len(), 4);
        let before = s1.pipeline.checksums();
        let s2 = train_stage2(&data, &s1.pipeline, None).unwrap();
        let after = s2.pipeline.checksums();
        for c in ["enc_f", "dec_f", "codebook", "disc"] {
            assert_eq!(before[c], after[c], "{c}");
        }
        assert_ne!(checksum(&s2.pipeline.component_params("enc_s")), before["enc_f"]);
        let s3 = train_stage3(&data, &s2.pipeline, None).unwrap();
        let fin = s3.pipeline.checksums();
        for c in ["enc_f", "dec_f", "codebook", "clf"] {
            assert_eq!(after[c], fin[c], "{c}");
        }
        assert_ne!(after["disc"], fin["disc"]);
        // later stages train copies; the earlier pipelines keep their weights
        assert_eq!(s1.pipeline.checksums(), before);
        assert_eq!(s2.pipeline.checksums(), after);
        assert!(matches!(train_stage3(&data, &s1.pipeline, None), Err(Error::Contract(_))));
    }

    #[test]
    fn frozen_drift_is_detected() {
        let s2 = StagePipeline::init(StageKind::Prior, &toy_config(), &toy_data(1).info).unwrap().advance().unwrap();
        s2.verify_frozen().unwrap();
        s2.dec_f.params("dec_f")[0].1.data_mut()[0] += 1e-12;
        assert!(matches!(s2.verify_frozen(), Err(Error::Contract(_))));
    }

    #[test]
    fn training_is_deterministic_and_checkpoints_round_trip() {
        let data = toy_data(2);
        let a = train_stage1(&data, &toy_config(), None).unwrap();
        let b = train_stage1(&data, &toy_config(), None).unwrap();
        assert_eq!(a.pipeline.to_checkpoint().to_bytes(), b.pipeline.to_checkpoint().to_bytes());
        assert_eq!(a.log, b.log);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s1.ckpt");
        a.pipeline.save(&path).unwrap();
        let back = StagePipeline::load(&path).unwrap();
        assert_eq!(back.checksums(), a.pipeline.checksums());
        let v = &data.test.sparse[0];
        assert_eq!(back.infer_volume(v).unwrap(), a.pipeline.infer_volume(v).unwrap());
    }

    #[test]
    fn non_finite_loss_aborts_with_last_good_weights() {
        let data = toy_data(2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("last_good.ckpt");
        // an absurd step size overflows the loss after the first update
        let cfg = TrainConfig { epochs_stage1: 3, learning_rate: 1e200, ..toy_config() };
        match train_stage1(&data, &cfg, Some(&path)) {
            Err(Error::NonFinite { step }) => assert!(step >= 1),
            other => panic!("expected abort, got {:?}", other.map(|r| r.log.len())),
        }
        let saved = StagePipeline::load(&path).unwrap();
        assert!(saved.params().iter().all(|(_, t)| t.data().iter().all(|v| v.is_finite())));
    }

    #[test]
    fn direct_variant_trains_without_codebook() {
        let data = toy_data(2);
        let run = train_direct(&data, &toy_config(), None).unwrap();
        assert_eq!(run.pipeline.stage, StageKind::Direct);
        assert!(run.log[0].get("vq").is_none());
        let out = run.pipeline.infer_volume(&data.test.sparse[0]).unwrap();
        assert_eq!(out.shape, [18; 3]);
        assert!(out.is_finite());
    }

    #[test]
    fn moving_average_of_constant_is_constant() {
        assert_eq!(moving_average(&[2.0; 5], 3), vec![2.0; 5]);
        assert_eq!(moving_average(&[0.0, 2.0, 4.0, 6.0], 2), vec![0.0, 1.0, 3.0, 5.0]);
    }

    #[test]
    fn tiles_cover_every_axis() {
        assert_eq!(tile_starts(48, 32, 8), vec![0, 8, 16]);
        assert_eq!(tile_starts(50, 32, 8), vec![0, 8, 16, 18]);
        assert_eq!(tile_starts(32, 32, 8), vec![0]);
    }

    #[test]
    fn tiled_inference_averages_overlapping_tiles() {
        let data = toy_data(1);
        let mut p = StagePipeline::init(StageKind::Direct, &toy_config(), &data.info).unwrap();
        let x = &data.test.sparse[0];
        p.config.tile_stride = 0;
        let whole = p.reconstruct_volume(x).unwrap();
        p.config.tile_stride = 8;
        let tiled = p.reconstruct_volume(x).unwrap();
        assert_eq!(tiled.shape, whole.shape);
        // the corner voxel lies in exactly one tile
        let t = no_grad(|| p.reconstruct(&x.crop([0; 3], [16; 3]).unwrap().to_tensor())).unwrap();
        assert_eq!(tiled.data[0], t.data()[0]);
        assert_ne!(tiled.data, whole.data);
    }
}
