use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{embed_state, render_frame, sample_initial, simulate, EmbeddingSpec, StateTrajectory, SystemSpec};
use crate::container::{fingerprint, write_atomic, Container};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObservationMode {
    /// Grayscale frames of `height x width` pixels.
    Render,
    /// Fixed random smooth embedding into `embed_dim` dimensions.
    Embed,
}

fn default_dt() -> f64 {
    1.0 / 60.0
}
fn default_videos() -> usize {
    200
}
fn default_frames() -> usize {
    60
}
fn default_side() -> usize {
    32
}
fn default_embed_dim() -> usize {
    64
}
fn default_splits() -> [f64; 3] {
    [0.8, 0.1, 0.1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub system: SystemSpec,
    pub mode: ObservationMode,
    #[serde(default = "default_videos")]
    pub videos: usize,
    #[serde(default = "default_frames")]
    pub frames: usize,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_side")]
    pub height: usize,
    #[serde(default = "default_side")]
    pub width: usize,
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    #[serde(default = "default_embed_dim")]
    pub embed_hidden: usize,
    /// Train / validation / test fractions of the videos.
    #[serde(default = "default_splits")]
    pub splits: [f64; 3],
    #[serde(default)]
    pub seed: u64,
}

impl DatasetConfig {
    pub fn new(system: SystemSpec, mode: ObservationMode) -> Self {
        Self {
            system,
            mode,
            videos: default_videos(),
            frames: default_frames(),
            dt: default_dt(),
            height: default_side(),
            width: default_side(),
            embed_dim: default_embed_dim(),
            embed_hidden: default_embed_dim(),
            splits: default_splits(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.system.validate()?;
        if self.videos == 0 {
            return Err(Error::Config("videos must be positive".into()));
        }
        if self.frames < 2 {
            return Err(Error::SequenceTooShort {
                len: self.frames,
                need: 2,
            });
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if self.splits.iter().any(|f| !(*f >= 0.0)) {
            return Err(Error::Config("split fractions must be non-negative".into()));
        }
        let total: f64 = self.splits.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions sum to {total}, expected 1")));
        }
        match self.mode {
            ObservationMode::Render if self.height < 8 || self.width < 8 => {
                Err(Error::Config(format!("frames must be at least 8x8, got {}x{}", self.height, self.width)))
            }
            ObservationMode::Embed if self.embed_dim == 0 || self.embed_hidden == 0 => {
                Err(Error::Config("embedding sizes must be positive".into()))
            }
            _ => Ok(()),
        }
    }

    /// Length of a single observation (one frame or one embedded vector).
    pub fn observation_dim(&self) -> usize {
        match self.mode {
            ObservationMode::Render => self.height * self.width,
            ObservationMode::Embed => self.embed_dim,
        }
    }

    pub fn embedding(&self) -> Result<EmbeddingSpec> {
        let kind = self.system.kind;
        EmbeddingSpec::new(
            kind.state_dim(),
            self.embed_dim,
            self.embed_hidden,
            self.seed ^ 0x5eed_e3be_dd00_0000,
            kind.angle_indices().to_vec(),
        )
    }
}

/// Video indices of each split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    pub fn get(&self, name: &str) -> Result<&[usize]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// Two consecutive observations of one video, concatenated.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationPair {
    pub video: usize,
    pub time: usize,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    /// Per video, a `frames x observation_dim` tensor.
    pub observations: Vec<Tensor>,
    pub trajectories: Vec<StateTrajectory>,
    pub splits: Splits,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: DatasetConfig,
    splits: Splits,
    fingerprint: String,
}

impl Dataset {
    pub fn videos(&self) -> usize {
        self.observations.len()
    }

    pub fn observation_dim(&self) -> usize {
        self.config.observation_dim()
    }

    pub fn pair_count(&self) -> usize {
        self.observations.iter().map(|o| o.rows() - 1).sum()
    }

    pub fn pair(&self, video: usize, time: usize) -> ObservationPair {
        let obs = &self.observations[video];
        let mut data = obs.row(time).to_vec();
        data.extend_from_slice(obs.row(time + 1));
        ObservationPair { video, time, data }
    }

    /// All pairs of one video stacked as a `(frames - 1) x 2 D` tensor.
    pub fn video_pairs(&self, video: usize) -> Tensor {
        let obs = &self.observations[video];
        let d = obs.cols();
        let m = obs.rows();
        let mut data = Vec::with_capacity((m - 1) * 2 * d);
        for t in 0..m - 1 {
            data.extend_from_slice(obs.row(t));
            data.extend_from_slice(obs.row(t + 1));
        }
        Tensor::matrix(m - 1, 2 * d, data).expect("consistent pair layout")
    }

    /// Content hash of the generating configuration.
    pub fn fingerprint(&self) -> Result<String> {
        fingerprint(&self.config)
    }

    /// Writes `dataset.tide` and `dataset.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut c = Container::new();
        for (i, (obs, traj)) in self.observations.iter().zip(&self.trajectories).enumerate() {
            c.insert(format!("video/{i}/observations"), obs.clone());
            let rows: Vec<Vec<f64>> = traj.states.clone();
            c.insert(format!("video/{i}/states"), Tensor::from_rows(&rows)?);
        }
        c.save(&dir.join("dataset.tide"))?;
        let manifest = Manifest {
            config: self.config.clone(),
            splits: self.splits.clone(),
            fingerprint: self.fingerprint()?,
        };
        write_atomic(&dir.join("dataset.json"), serde_json::to_string_pretty(&manifest)?.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_slice(&std::fs::read(dir.join("dataset.json"))?)?;
        let found = fingerprint(&manifest.config)?;
        if found != manifest.fingerprint {
            return Err(Error::FingerprintMismatch {
                artifact: "dataset".into(),
                expected: manifest.fingerprint,
                found,
            });
        }
        let mut c = Container::load(&dir.join("dataset.tide"))?;
        let cfg = manifest.config;
        let mut observations = Vec::with_capacity(cfg.videos);
        let mut trajectories = Vec::with_capacity(cfg.videos);
        for i in 0..cfg.videos {
            let obs = c.take(&format!("video/{i}/observations"))?;
            let states = c.take(&format!("video/{i}/states"))?;
            if obs.rows() != cfg.frames || obs.cols() != cfg.observation_dim() || states.rows() != cfg.frames {
                return Err(Error::CorruptContainer(format!("video {i} has unexpected shape")));
            }
            observations.push(obs);
            trajectories.push(StateTrajectory {
                system: cfg.system.clone(),
                dt: cfg.dt,
                states: (0..states.rows()).map(|r| states.row(r).to_vec()).collect(),
            });
        }
        Ok(Self {
            config: cfg,
            observations,
            trajectories,
            splits: manifest.splits,
        })
    }
}

fn split_videos(n: usize, fractions: [f64; 3], rng: &mut ChaCha8Rng) -> Splits {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let a = ((fractions[0] * n as f64).round() as usize).min(n);
    let b = (((fractions[0] + fractions[1]) * n as f64).round() as usize).clamp(a, n);
    let sorted = |s: &[usize]| {
        let mut v = s.to_vec();
        v.sort_unstable();
        v
    };
    Splits {
        train: sorted(&order[..a]),
        val: sorted(&order[a..b]),
        test: sorted(&order[b..]),
    }
}

/// Simulates, observes and splits `config.videos` trajectories.
pub fn build_dataset(config: &DatasetConfig) -> Result<Dataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let embedding = match config.mode {
        ObservationMode::Embed => Some(config.embedding()?),
        ObservationMode::Render => None,
    };
    let d = config.observation_dim();
    let mut observations = Vec::with_capacity(config.videos);
    let mut trajectories = Vec::with_capacity(config.videos);
    for _ in 0..config.videos {
        let init = sample_initial(&config.system, &mut rng);
        let traj = simulate(&config.system, &init, config.dt, config.frames)?;
        let mut data = Vec::with_capacity(config.frames * d);
        for s in &traj.states {
            match &embedding {
                Some(e) => data.extend(embed_state(s, e)?),
                None => data.extend(render_frame(&config.system, s, config.height, config.width)?),
            }
        }
        observations.push(Tensor::matrix(config.frames, d, data)?);
        trajectories.push(traj);
    }
    let splits = split_videos(config.videos, config.splits, &mut rng);
    Ok(Dataset {
        config: config.clone(),
        observations,
        trajectories,
        splits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sysgen::SystemKind;

    fn small(mode: ObservationMode) -> DatasetConfig {
        let mut c = DatasetConfig::new(SystemSpec::new(SystemKind::SinglePendulum), mode);
        c.videos = 10;
        c.frames = 12;
        c.height = 12;
        c.width = 12;
        c.embed_dim = 8;
        c.embed_hidden = 8;
        c.seed = 3;
        c
    }

    #[test]
    fn pair_counts_and_split_sizes() {
        let mut c = small(ObservationMode::Embed);
        c.videos = 200;
        c.frames = 60;
        let ds = build_dataset(&c).unwrap();
        assert_eq!(ds.pair_count(), 200 * 59);
        assert_eq!(
            (ds.splits.train.len(), ds.splits.val.len(), ds.splits.test.len()),
            (160, 20, 20)
        );
        let mut all: Vec<usize> = ds.splits.train.iter().chain(&ds.splits.val).chain(&ds.splits.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..200).collect::<Vec<_>>());
    }

    #[test]
    fn fractions_must_sum_to_one() {
        let mut c = small(ObservationMode::Embed);
        c.splits = [0.8, 0.1, 0.2];
        assert!(matches!(build_dataset(&c), Err(Error::Config(_))));
    }

    #[test]
    fn pairs_align_with_states() {
        for mode in [ObservationMode::Embed, ObservationMode::Render] {
            let c = small(mode);
            let ds = build_dataset(&c).unwrap();
            let emb = c.embedding().unwrap();
            let observe = |s: &[f64]| match mode {
                ObservationMode::Embed => embed_state(s, &emb).unwrap(),
                ObservationMode::Render => render_frame(&c.system, s, c.height, c.width).unwrap(),
            };
            for (v, t) in [(0, 0), (3, 5), (9, 10)] {
                let pair = ds.pair(v, t);
                let states = &ds.trajectories[v].states;
                let mut expected = observe(&states[t]);
                expected.extend(observe(&states[t + 1]));
                assert_eq!(pair.data, expected);
                assert_eq!(ds.video_pairs(v).row(t), &expected[..]);
            }
        }
    }

    #[test]
    fn rebuild_and_reload_are_bit_identical() {
        let c = small(ObservationMode::Render);
        let a = build_dataset(&c).unwrap();
        let b = build_dataset(&c).unwrap();
        assert_eq!(a, b);

        let dir = tempfile::tempdir().unwrap();
        let (da, db) = (dir.path().join("a"), dir.path().join("b"));
        a.save(&da).unwrap();
        b.save(&db).unwrap();
        for f in ["dataset.tide", "dataset.json"] {
            assert_eq!(std::fs::read(da.join(f)).unwrap(), std::fs::read(db.join(f)).unwrap());
        }
        assert_eq!(Dataset::load(&da).unwrap(), a);
    }

    #[test]
    fn render_values_in_unit_interval() {
        let ds = build_dataset(&small(ObservationMode::Render)).unwrap();
        for o in &ds.observations {
            assert!(o.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }
}
