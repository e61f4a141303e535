//! Two-stage optimization of TIDE networks and latent extraction.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use log::{debug, info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::{fingerprint, sha256_hex, write_atomic, Container};
use crate::error::{Error, Result};
use crate::net::{build_tide_loss, Architecture, Hyperparameters, LossBreakdown, TideNet, WindowBatch};
use crate::sysgen::Dataset;
use crate::tensor::{Adam, Graph, Tensor};

/// Latent size of the first-stage network.
pub const STAGE1_LATENT: usize = 64;

fn default_epochs() -> usize {
    50
}
fn default_batch_windows() -> usize {
    8
}
fn default_window() -> usize {
    8
}
fn default_learning_rate() -> f64 {
    1e-3
}
fn default_patience() -> usize {
    10
}
fn default_hidden() -> Vec<usize> {
    vec![512, 256]
}
fn default_dynamics_width() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Windows (each from one video) per optimization step.
    #[serde(default = "default_batch_windows")]
    pub batch_windows: usize,
    /// Consecutive observation pairs per window.
    #[serde(default = "default_window")]
    pub window: usize,
    /// Optimization steps per epoch; by default enough windows to cover
    /// the training pairs once.
    #[serde(default)]
    pub steps_per_epoch: Option<usize>,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub hyper: Hyperparameters,
    /// Epochs without validation improvement before stopping.
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_dynamics_width")]
    pub dynamics_width: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            batch_windows: default_batch_windows(),
            window: default_window(),
            steps_per_epoch: None,
            learning_rate: default_learning_rate(),
            seed: 0,
            hyper: Hyperparameters::default(),
            patience: default_patience(),
            hidden: default_hidden(),
            dynamics_width: default_dynamics_width(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_windows == 0 {
            return Err(Error::Config("batch_windows must be at least 1".into()));
        }
        if self.window < self.hyper.order + 1 {
            return Err(Error::Config(format!(
                "window length {} is shorter than derivative order + 1 = {}",
                self.window,
                self.hyper.order + 1
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }

    fn architecture(&self, input_dim: usize, latent_dim: usize, output_dim: usize) -> Architecture {
        Architecture {
            input_dim,
            latent_dim,
            hidden: self.hidden.clone(),
            dynamics_width: self.dynamics_width,
            output_dim: Some(output_dim),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: u8,
    pub epoch: usize,
    pub train: LossBreakdown,
    pub val: LossBreakdown,
}

/// Trained network with everything needed to reproduce and audit it.
#[derive(Debug, Clone, PartialEq)]
pub struct TideCheckpoint {
    pub stage: u8,
    pub net: TideNet,
    pub hyper: Hyperparameters,
    pub config: TrainConfig,
    pub curve: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub dataset_fingerprint: String,
    /// Stage two only: fingerprint of the frozen first-stage checkpoint.
    pub stage1_fingerprint: Option<String>,
    /// Per-dimension `(min, max)` of the latent means seen during the epoch
    /// that produced these weights.
    pub minmax: Vec<(f64, f64)>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    stage: u8,
    arch: Architecture,
    hyper: Hyperparameters,
    config: TrainConfig,
    curve: Vec<EpochRecord>,
    best_epoch: usize,
    dataset_fingerprint: String,
    stage1_fingerprint: Option<String>,
    weights_sha256: String,
}

impl TideCheckpoint {
    fn container(&self) -> Container {
        let mut c = self.net.to_container("");
        let flat: Vec<f64> = self.minmax.iter().flat_map(|&(a, b)| [a, b]).collect();
        c.insert("minmax", Tensor::matrix(self.minmax.len(), 2, flat).expect("pairs"));
        c
    }

    /// Content hash over weights and metadata.
    pub fn fingerprint(&self) -> Result<String> {
        let weights = sha256_hex(&self.container().to_bytes()?);
        fingerprint(&(weights, self.stage, &self.hyper, &self.dataset_fingerprint, &self.stage1_fingerprint))
    }

    /// Writes `<stem>.tide` (weights) and `<stem>.json` (metadata).
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        let bytes = self.container().to_bytes()?;
        let meta = CheckpointMeta {
            stage: self.stage,
            arch: self.net.arch.clone(),
            hyper: self.hyper.clone(),
            config: self.config.clone(),
            curve: self.curve.clone(),
            best_epoch: self.best_epoch,
            dataset_fingerprint: self.dataset_fingerprint.clone(),
            stage1_fingerprint: self.stage1_fingerprint.clone(),
            weights_sha256: sha256_hex(&bytes),
        };
        write_atomic(&dir.join(format!("{stem}.tide")), &bytes)?;
        write_atomic(&dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&meta)?.as_bytes())
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let meta: CheckpointMeta = serde_json::from_slice(&std::fs::read(dir.join(format!("{stem}.json")))?)?;
        let bytes = std::fs::read(dir.join(format!("{stem}.tide")))?;
        let found = sha256_hex(&bytes);
        if found != meta.weights_sha256 {
            return Err(Error::FingerprintMismatch {
                artifact: format!("{stem}.tide"),
                expected: meta.weights_sha256,
                found,
            });
        }
        let c = Container::from_bytes(&bytes)?;
        let net = TideNet::from_container(meta.arch, &c, "")?;
        let mm = c.require("minmax")?;
        let minmax = (0..mm.rows()).map(|r| (mm.at(r, 0), mm.at(r, 1))).collect();
        Ok(Self {
            stage: meta.stage,
            net,
            hyper: meta.hyper,
            config: meta.config,
            curve: meta.curve,
            best_epoch: meta.best_epoch,
            dataset_fingerprint: meta.dataset_fingerprint,
            stage1_fingerprint: meta.stage1_fingerprint,
            minmax,
        })
    }
}

/// Encoder means (and log-variances) of one video, in time order.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSequence {
    pub video: usize,
    pub mean: Tensor,
    pub logvar: Tensor,
}

/// Where training reads its rows from: stage-one inputs are observation
/// pairs; stage-two inputs are first-stage latents with pairs as targets.
struct Source<'a> {
    dataset: &'a Dataset,
    latents: Option<Vec<Tensor>>,
}

impl Source<'_> {
    fn pairs_in(&self, video: usize) -> usize {
        self.dataset.observations[video].rows() - 1
    }

    fn batch(&self, picks: &[(usize, usize)], len: usize) -> Result<WindowBatch> {
        let mut pairs = Vec::with_capacity(picks.len() * len);
        let mut inputs = Vec::new();
        for &(v, start) in picks {
            for t in start..start + len {
                pairs.push(self.dataset.pair(v, t).data);
                if let Some(lat) = &self.latents {
                    inputs.push(lat[v].row(t).to_vec());
                }
            }
        }
        let pairs = Tensor::from_rows(&pairs)?;
        if self.latents.is_some() {
            WindowBatch::new(Tensor::from_rows(&inputs)?, picks.len(), len)?.with_targets(pairs)
        } else {
            WindowBatch::new(pairs, picks.len(), len)
        }
    }
}

fn mean_breakdown(items: &[LossBreakdown]) -> LossBreakdown {
    let n = items.len().max(1) as f64;
    let mut m = LossBreakdown::default();
    for b in items {
        m.total += b.total / n;
        m.elbo += b.elbo / n;
        m.recon += b.recon / n;
        m.kl += b.kl / n;
        m.dynamics += b.dynamics / n;
        m.dyn_recon += b.dyn_recon / n;
        m.dyn_latent += b.dyn_latent / n;
        m.reg += b.reg / n;
        m.y_recon += b.y_recon / n;
    }
    m
}

fn append_jsonl(path: &Path, record: &EpochRecord) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{}", serde_json::to_string(record)?)?;
    Ok(())
}

struct Run<'a> {
    stage: u8,
    source: Source<'a>,
    frozen: Option<&'a TideNet>,
    train_videos: Vec<usize>,
    val_videos: Vec<usize>,
}

impl Run<'_> {
    fn loss(
        &self,
        net: &TideNet,
        batch: &WindowBatch,
        hyper: &Hyperparameters,
        rng: &mut ChaCha8Rng,
        train: bool,
    ) -> Result<(LossBreakdown, Option<Vec<Tensor>>, Tensor)> {
        let mut g = Graph::new();
        let bound = net.bind(&mut g, train);
        let outer = self.frozen.map(|f| f.decoder.bind(&mut g, false));
        let lg = build_tide_loss(&mut g, &bound, net.latent_dim(), outer.as_ref(), batch, hyper, rng)?;
        let b = lg.check_finite(&g)?;
        let means = g.value(lg.mean).clone();
        if !train {
            return Ok((b, None, means));
        }
        let grads = g.backward(lg.total)?;
        if let Some(outer) = &outer {
            let leaked: f64 = outer.nodes().filter_map(|n| grads.get(n)).map(Tensor::norm_sq).sum();
            if leaked != 0.0 {
                return Err(Error::Config(format!("frozen decoder received gradient (norm^2 {leaked})")));
            }
        }
        let params = net.parameters();
        let grads: Vec<Tensor> = bound
            .nodes()
            .into_iter()
            .zip(params)
            .map(|(n, p)| grads.get_or_zeros(n, p))
            .collect();
        Ok((b, Some(grads), means))
    }

    fn validation_picks(&self, window: usize) -> Vec<(usize, usize)> {
        let mut picks = Vec::new();
        for &v in &self.val_videos {
            let n = self.source.pairs_in(v);
            let mut s = 0;
            while s + window <= n {
                picks.push((v, s));
                s += window;
            }
        }
        picks
    }

    fn validate(&self, net: &TideNet, cfg: &TrainConfig, picks: &[(usize, usize)]) -> Result<LossBreakdown> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7a11_da7e);
        let mut parts = Vec::new();
        for chunk in picks.chunks(cfg.batch_windows.max(1)) {
            let batch = self.source.batch(chunk, cfg.window)?;
            parts.push(self.loss(net, &batch, &cfg.hyper, &mut rng, false)?.0);
        }
        Ok(mean_breakdown(&parts))
    }

    fn train(&self, net: TideNet, cfg: &TrainConfig, log_path: Option<&Path>) -> Result<(TideNet, Vec<EpochRecord>, usize, Vec<(f64, f64)>)> {
        let eligible: Vec<usize> = self
            .train_videos
            .iter()
            .copied()
            .filter(|&v| self.source.pairs_in(v) >= cfg.window)
            .collect();
        if eligible.is_empty() {
            return Err(Error::SequenceTooShort {
                len: self.train_videos.iter().map(|&v| self.source.pairs_in(v)).max().unwrap_or(0),
                need: cfg.window,
            });
        }
        let total_pairs: usize = eligible.iter().map(|&v| self.source.pairs_in(v)).sum();
        let steps = cfg
            .steps_per_epoch
            .unwrap_or_else(|| total_pairs.div_ceil(cfg.batch_windows * cfg.window))
            .max(1);
        let val_picks = self.validation_picks(cfg.window);

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut opt = Adam::new(cfg.learning_rate);
        let mut net = net;
        let mut best: Option<(f64, TideNet, usize, Vec<(f64, f64)>)> = None;
        let mut curve = Vec::new();
        let mut since_best = 0;

        for epoch in 0..cfg.epochs {
            let mut parts = Vec::with_capacity(steps);
            let mut minmax = vec![(f64::INFINITY, f64::NEG_INFINITY); net.latent_dim()];
            for step in 0..steps {
                let picks: Vec<(usize, usize)> = (0..cfg.batch_windows)
                    .map(|_| {
                        let v = eligible[rng.random_range(0..eligible.len())];
                        let start = rng.random_range(0..=self.source.pairs_in(v) - cfg.window);
                        (v, start)
                    })
                    .collect();
                let batch = self.source.batch(&picks, cfg.window)?;
                let (b, grads, means) = self
                    .loss(&net, &batch, &cfg.hyper, &mut rng, true)
                    .map_err(|e| Error::Step {
                        step: format!("stage {} epoch {epoch} step {step}", self.stage),
                        source: Box::new(e),
                    })?;
                for r in 0..means.rows() {
                    for (k, &v) in means.row(r).iter().enumerate() {
                        minmax[k].0 = minmax[k].0.min(v);
                        minmax[k].1 = minmax[k].1.max(v);
                    }
                }
                opt.step(net.parameters_mut(), &grads.expect("training pass returns gradients"));
                parts.push(b);
            }
            let train = mean_breakdown(&parts);
            let val = if val_picks.is_empty() { train } else { self.validate(&net, cfg, &val_picks)? };
            let record = EpochRecord {
                stage: self.stage,
                epoch,
                train,
                val,
            };
            info!(
                "stage {} epoch {epoch}: train {:.4} val {:.4} (recon {:.4}, kl {:.4}, dyn {:.4}, reg {:.4})",
                self.stage, train.total, val.total, val.recon, val.kl, val.dynamics, val.reg
            );
            if let Some(p) = log_path {
                append_jsonl(p, &record)?;
            }
            curve.push(record);
            if best.as_ref().is_none_or(|(loss, ..)| val.total < *loss) {
                best = Some((val.total, net.clone(), epoch, minmax));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.patience {
                    debug!("early stop after epoch {epoch}");
                    break;
                }
            }
        }
        let (_, net, best_epoch, minmax) = best.expect("at least one epoch");
        Ok((net, curve, best_epoch, minmax))
    }
}

fn require_split(dataset: &Dataset, name: &str) -> Result<Vec<usize>> {
    let v = dataset.splits.get(name)?.to_vec();
    if v.is_empty() && name == "train" {
        return Err(Error::Config("training split is empty".into()));
    }
    Ok(v)
}

/// Trains the first-stage network on observation pairs.
///
/// `log_path`, when given, receives one JSON record per epoch.
pub fn train_stage1(dataset: &Dataset, cfg: &TrainConfig, log_path: Option<&Path>) -> Result<TideCheckpoint> {
    cfg.validate()?;
    let d = 2 * dataset.observation_dim();
    let net = TideNet::new(cfg.architecture(d, STAGE1_LATENT, d), cfg.seed)?;
    info!("stage 1: {} parameters", net.parameter_count());
    let run = Run {
        stage: 1,
        source: Source { dataset, latents: None },
        frozen: None,
        train_videos: require_split(dataset, "train")?,
        val_videos: require_split(dataset, "val")?,
    };
    let (net, curve, best_epoch, minmax) = run.train(net, cfg, log_path)?;
    Ok(TideCheckpoint {
        stage: 1,
        net,
        hyper: cfg.hyper.clone(),
        config: cfg.clone(),
        curve,
        best_epoch,
        dataset_fingerprint: dataset.fingerprint()?,
        stage1_fingerprint: None,
        minmax,
    })
}

fn check_dataset(ckpt: &TideCheckpoint, dataset: &Dataset) -> Result<()> {
    let found = dataset.fingerprint()?;
    if found != ckpt.dataset_fingerprint {
        return Err(Error::FingerprintMismatch {
            artifact: format!("stage-{} checkpoint dataset", ckpt.stage),
            expected: ckpt.dataset_fingerprint.clone(),
            found,
        });
    }
    Ok(())
}

fn encode_videos(net: &TideNet, dataset: &Dataset, inputs: &[Tensor], videos: &[usize]) -> Result<Vec<LatentSequence>> {
    videos
        .iter()
        .map(|&v| {
            let x = if inputs.is_empty() { dataset.video_pairs(v) } else { inputs[v].clone() };
            let lg = net.encode(&x)?;
            Ok(LatentSequence {
                video: v,
                mean: lg.mean,
                logvar: lg.logvar,
            })
        })
        .collect()
}

/// First-stage means of every video, indexed by video.
fn stage1_means(stage1: &TideCheckpoint, dataset: &Dataset) -> Result<Vec<Tensor>> {
    let all: Vec<usize> = (0..dataset.videos()).collect();
    Ok(encode_videos(&stage1.net, dataset, &[], &all)?
        .into_iter()
        .map(|s| s.mean)
        .collect())
}

/// Trains a second-stage network with latent size `id` on top of a frozen
/// first-stage checkpoint.
pub fn train_stage2(
    dataset: &Dataset,
    stage1: &TideCheckpoint,
    id: usize,
    cfg: &TrainConfig,
    log_path: Option<&Path>,
) -> Result<TideCheckpoint> {
    cfg.validate()?;
    if id == 0 {
        return Err(Error::Config("stage-two latent size must be at least 1".into()));
    }
    if stage1.stage != 1 {
        return Err(Error::Config("stage two must build on a stage-one checkpoint".into()));
    }
    check_dataset(stage1, dataset)?;
    let before = stage1.fingerprint()?;
    let y_dim = stage1.net.latent_dim();
    let net = TideNet::new(cfg.architecture(y_dim, id, y_dim), cfg.seed)?;
    let run = Run {
        stage: 2,
        source: Source {
            dataset,
            latents: Some(stage1_means(stage1, dataset)?),
        },
        frozen: Some(&stage1.net),
        train_videos: require_split(dataset, "train")?,
        val_videos: require_split(dataset, "val")?,
    };
    let (net, curve, best_epoch, minmax) = run.train(net, cfg, log_path)?;
    if stage1.fingerprint()? != before {
        warn!("stage-one checkpoint changed during stage-two training");
        return Err(Error::FingerprintMismatch {
            artifact: "stage-1 checkpoint".into(),
            expected: before,
            found: stage1.fingerprint()?,
        });
    }
    Ok(TideCheckpoint {
        stage: 2,
        net,
        hyper: cfg.hyper.clone(),
        config: cfg.clone(),
        curve,
        best_epoch,
        dataset_fingerprint: dataset.fingerprint()?,
        stage1_fingerprint: Some(before),
        minmax,
    })
}

/// Encoder means per video of `split`, in time order. Stage-two
/// checkpoints need the first-stage checkpoint they were trained against.
pub fn extract_latents(
    ckpt: &TideCheckpoint,
    stage1: Option<&TideCheckpoint>,
    dataset: &Dataset,
    split: &str,
) -> Result<Vec<LatentSequence>> {
    check_dataset(ckpt, dataset)?;
    let videos = dataset.splits.get(split)?.to_vec();
    match ckpt.stage {
        1 => encode_videos(&ckpt.net, dataset, &[], &videos),
        _ => {
            let s1 = stage1.ok_or_else(|| Error::Config("stage-two extraction needs the stage-one checkpoint".into()))?;
            let found = s1.fingerprint()?;
            let expected = ckpt.stage1_fingerprint.clone().unwrap_or_default();
            if found != expected {
                return Err(Error::FingerprintMismatch {
                    artifact: "stage-1 checkpoint".into(),
                    expected,
                    found,
                });
            }
            let ys = stage1_means(s1, dataset)?;
            encode_videos(&ckpt.net, dataset, &ys, &videos)
        }
    }
}
