//! End-to-end run: generate, train, estimate the intrinsic dimension,
//! retrain, extract, fit expressions, measure and report.
//!
//! Every step records a manifest with the fingerprint of its inputs; a
//! rerun reuses an artifact whose manifest still matches.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::container::{fingerprint, sha256_hex, write_atomic, Container};
use crate::error::{Error, Result};
use crate::idest::{danco_estimate, default_cache_dir, standardize, two_nn, DancoConfig, DancoResult, PointCloud};
use crate::metrics::{amse, mutual_information, normalize_with_training, smoothness, Role, VariableMatrix, MAX_KDE_DIM};
use crate::symreg::{fit, FrontEntry, ParetoFront, Samples};
use crate::sysgen::{build_dataset, Dataset};
use crate::tensor::Tensor;
use crate::trainer::{extract_latents, train_stage1, train_stage2, LatentSequence, TideCheckpoint};

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    step: String,
    input: String,
    output: String,
}

/// Outcome of the intrinsic-dimension step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdReport {
    pub danco: DancoResult,
    pub two_nn: f64,
    pub id_rounded: usize,
    /// Latent size handed to stage two.
    pub id_used: usize,
    pub ground_truth: usize,
    pub points_used: usize,
}

/// Expression fits of every stage-two latent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymfitReport {
    pub inputs: Vec<String>,
    pub holdout_videos: Vec<usize>,
    pub fronts: Vec<ParetoFront>,
    pub selected: Vec<FrontEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsDiagnostics {
    pub split: String,
    pub samples: usize,
    pub latent_dim: usize,
    pub human_variables: Vec<String>,
    pub mi_raw: Option<f64>,
    pub mi_clamped: bool,
    pub mi_near_deterministic: bool,
    pub mi_note: Option<String>,
}

/// Smoothness, mutual information with the human variables, and AMSE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub smoothness: f64,
    pub mi: Option<f64>,
    pub amse: f64,
    pub diagnostics: MetricsDiagnostics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_total: f64,
    pub fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdSummary {
    pub id_fractional: f64,
    pub id_rounded: usize,
    pub id_used: usize,
    pub ground_truth: usize,
    pub two_nn: f64,
    pub grid: Vec<usize>,
    pub kl_curve: Vec<f64>,
    pub points_used: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpressionSummary {
    pub latent: usize,
    pub expression: String,
    pub prefix: String,
    pub complexity: usize,
    pub train_mse: f64,
}

/// Contents of `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub experiment: String,
    pub system: String,
    pub seed: u64,
    pub dataset_fingerprint: String,
    pub intrinsic_dimension: IdSummary,
    pub stage1: StageSummary,
    pub stage2: StageSummary,
    pub metrics: MetricsRecord,
    pub expressions: Vec<ExpressionSummary>,
}

/// Paired-run comparison of two reports (`self` against `other`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub experiment: String,
    pub other: String,
    /// other.smoothness / self.smoothness.
    pub smoothness_ratio: f64,
    pub mi_difference: Option<f64>,
    pub amse_difference: f64,
    pub smoother_by_5x: bool,
    pub mi_not_lower: Option<bool>,
    pub amse_not_higher: bool,
}

pub fn compare(this: &MetricsReport, other: &MetricsReport) -> Comparison {
    let (a, b) = (&this.metrics, &other.metrics);
    let mi_difference = a.mi.zip(b.mi).map(|(x, y)| x - y);
    Comparison {
        experiment: this.experiment.clone(),
        other: other.experiment.clone(),
        smoothness_ratio: b.smoothness / a.smoothness,
        mi_difference,
        amse_difference: a.amse - b.amse,
        smoother_by_5x: a.smoothness <= b.smoothness / 5.0,
        mi_not_lower: mi_difference.map(|d| d >= 0.0),
        amse_not_higher: a.amse <= b.amse,
    }
}

/// Files written by the report step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    pub metrics: PathBuf,
    pub latents_csv: PathBuf,
    pub phase_space_csv: PathBuf,
    pub expressions: PathBuf,
    pub report: MetricsReport,
}

/// Steps that reused on-disk artifacts during [`Pipeline::run`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub cached: Vec<String>,
    pub computed: Vec<String>,
}

/// A configured run rooted at an output directory.
pub struct Pipeline {
    pub config: ExperimentConfig,
    pub out: PathBuf,
}

fn step<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Step { .. } => e,
        other => Error::Step {
            step: name.into(),
            source: Box::new(other),
        },
    })
}

impl Pipeline {
    /// Validates `config` and resolves block seeds; `out` overrides the
    /// configured output directory.
    pub fn new(config: &ExperimentConfig, out: Option<&Path>) -> Result<Self> {
        config.validate()?;
        let config = config.resolved();
        let out = out.map(Path::to_path_buf).unwrap_or_else(|| config.output_dir.clone());
        fs::create_dir_all(&out)?;
        Ok(Self { config, out })
    }

    fn manifest_path(&self, name: &str) -> PathBuf {
        self.out.join("steps").join(format!("{name}.json"))
    }

    fn manifest(&self, name: &str, input: &str) -> Option<Manifest> {
        let m: Manifest = serde_json::from_slice(&fs::read(self.manifest_path(name)).ok()?).ok()?;
        (m.input == input).then_some(m)
    }

    fn record(&self, name: &str, input: &str, output: &str) -> Result<()> {
        let m = Manifest {
            step: name.into(),
            input: input.into(),
            output: output.into(),
        };
        write_atomic(&self.manifest_path(name), serde_json::to_string_pretty(&m)?.as_bytes())
    }

    /// JSON-valued step: reuse `<name>.json` when inputs are unchanged.
    fn json_step<T: Serialize + DeserializeOwned>(
        &self,
        name: &str,
        input: &str,
        compute: impl FnOnce() -> Result<T>,
    ) -> Result<(T, bool)> {
        let path = self.out.join(format!("{name}.json"));
        if let Some(m) = self.manifest(name, input) {
            if let Ok(bytes) = fs::read(&path) {
                if sha256_hex(&bytes) == m.output {
                    if let Ok(v) = serde_json::from_slice(&bytes) {
                        return Ok((v, true));
                    }
                }
            }
        }
        let v = compute()?;
        let bytes = serde_json::to_string_pretty(&v)?.into_bytes();
        write_atomic(&path, &bytes)?;
        self.record(name, input, &sha256_hex(&bytes))?;
        Ok((v, false))
    }

    pub fn dataset(&self) -> Result<(Dataset, bool)> {
        step("gen", (|| {
            let input = fingerprint(&self.config.dataset)?;
            let dir = self.out.join("dataset");
            if self.manifest("gen", &input).is_some() {
                if let Ok(ds) = Dataset::load(&dir) {
                    if ds.fingerprint()? == input {
                        return Ok((ds, true));
                    }
                }
            }
            info!("generating {} videos", self.config.dataset.videos);
            let ds = build_dataset(&self.config.dataset)?;
            ds.save(&dir)?;
            self.record("gen", &input, &ds.fingerprint()?)?;
            Ok((ds, false))
        })())
    }

    fn checkpoint_step(
        &self,
        name: &str,
        input: &str,
        train: impl FnOnce(&Path) -> Result<TideCheckpoint>,
    ) -> Result<(TideCheckpoint, bool)> {
        if let Some(m) = self.manifest(name, input) {
            if let Ok(ck) = TideCheckpoint::load(&self.out, name) {
                if ck.fingerprint()? == m.output {
                    return Ok((ck, true));
                }
            }
        }
        let log = self.out.join("logs").join(format!("{name}.jsonl"));
        fs::create_dir_all(self.out.join("logs"))?;
        let _ = fs::remove_file(&log);
        let ck = train(&log)?;
        ck.save(&self.out, name)?;
        self.record(name, input, &ck.fingerprint()?)?;
        Ok((ck, false))
    }

    pub fn stage1(&self, ds: &Dataset) -> Result<(TideCheckpoint, bool)> {
        step("train stage 1", (|| {
            let input = fingerprint(&(ds.fingerprint()?, &self.config.stage1))?;
            self.checkpoint_step("stage1", &input, |log| {
                info!("training stage 1");
                train_stage1(ds, &self.config.stage1, Some(log))
            })
        })())
    }

    pub fn estimate_id(&self, ds: &Dataset, s1: &TideCheckpoint) -> Result<(IdReport, bool)> {
        step("estimate-id", (|| {
            let input = fingerprint(&(s1.fingerprint()?, &self.config.id, self.config.seed))?;
            self.json_step("id", &input, || {
                let id = &self.config.id;
                let lat = extract_latents(s1, None, ds, "train")?;
                let mut rows: Vec<Vec<f64>> =
                    lat.iter().flat_map(|l| (0..l.mean.rows()).map(|r| l.mean.row(r).to_vec())).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x1d5a_3b1e_0000_0001);
                rows.shuffle(&mut rng);
                rows.truncate(id.max_points);
                let mut cloud_rows = rows;
                if id.standardize {
                    let t = standardize(&Tensor::from_rows(&cloud_rows)?);
                    cloud_rows = (0..t.rows()).map(|r| t.row(r).to_vec()).collect();
                }
                let cloud = PointCloud::from_rows(cloud_rows);
                let cfg = DancoConfig {
                    k: id.k,
                    d_max: id.d_max,
                    seed: self.config.seed,
                };
                info!("estimating intrinsic dimension on {} points", cloud.len());
                let cache = default_cache_dir();
                let danco = danco_estimate(&cloud, &cfg, Some(&cache))?;
                let id_rounded = (danco.id_fractional.round() as usize).max(1);
                Ok(IdReport {
                    two_nn: two_nn(&cloud)?,
                    id_rounded,
                    id_used: id.latent_override.unwrap_or(id_rounded),
                    ground_truth: ds.config.system.state_dim(),
                    points_used: cloud.len(),
                    danco,
                })
            })
        })())
    }

    pub fn stage2(&self, ds: &Dataset, s1: &TideCheckpoint, id: usize) -> Result<(TideCheckpoint, bool)> {
        step("train stage 2", (|| {
            let input = fingerprint(&(s1.fingerprint()?, id, &self.config.stage2))?;
            self.checkpoint_step("stage2", &input, |log| {
                info!("training stage 2 with {id} latents");
                train_stage2(ds, s1, id, &self.config.stage2, Some(log))
            })
        })())
    }

    /// Stage-two latents of the configured evaluation split.
    pub fn extract(&self, ds: &Dataset, s1: &TideCheckpoint, s2: &TideCheckpoint) -> Result<(Vec<LatentSequence>, bool)> {
        step("extract", (|| {
            let split = &self.config.metrics.split;
            let input = fingerprint(&(s2.fingerprint()?, split))?;
            let name = format!("latents_{split}");
            let path = self.out.join(format!("{name}.tide"));
            if let Some(m) = self.manifest(&name, &input) {
                if let Ok(bytes) = fs::read(&path) {
                    if sha256_hex(&bytes) == m.output {
                        if let Ok(c) = Container::from_bytes(&bytes) {
                            return Ok((latents_from_container(&c, ds.splits.get(split)?)?, true));
                        }
                    }
                }
            }
            let lat = extract_latents(s2, Some(s1), ds, split)?;
            let mut c = Container::new();
            for l in &lat {
                c.insert(format!("video/{}/mean", l.video), l.mean.clone());
                c.insert(format!("video/{}/logvar", l.video), l.logvar.clone());
            }
            let bytes = c.to_bytes()?;
            write_atomic(&path, &bytes)?;
            self.record(&name, &input, &sha256_hex(&bytes))?;
            Ok((lat, false))
        })())
    }

    fn human(&self, ds: &Dataset, lat: &[LatentSequence]) -> (Vec<String>, Vec<Vec<f64>>, Vec<String>, Vec<Vec<f64>>) {
        let kind = ds.config.system.kind;
        let names = kind.state_names();
        let angles = kind.angle_indices();
        let mut raw: Vec<Vec<f64>> = vec![Vec::new(); names.len()];
        let mut fit_names = Vec::new();
        for (i, n) in names.iter().enumerate() {
            if angles.contains(&i) {
                fit_names.push(format!("sin_{n}"));
                fit_names.push(format!("cos_{n}"));
            } else {
                fit_names.push((*n).to_string());
            }
        }
        let mut fit_cols: Vec<Vec<f64>> = vec![Vec::new(); fit_names.len()];
        for l in lat {
            let states = &ds.trajectories[l.video].states;
            for t in 0..l.mean.rows() {
                let s = &states[t];
                let mut c = 0;
                for (i, v) in s.iter().enumerate() {
                    raw[i].push(*v);
                    if angles.contains(&i) {
                        fit_cols[c].push(v.sin());
                        fit_cols[c + 1].push(v.cos());
                        c += 2;
                    } else {
                        fit_cols[c].push(*v);
                        c += 1;
                    }
                }
            }
        }
        (names.iter().map(|s| s.to_string()).collect(), raw, fit_names, fit_cols)
    }

    fn fit_samples(&self, ds: &Dataset, lat: &[LatentSequence]) -> Result<Samples> {
        let (_, _, names, cols) = self.human(ds, lat);
        let all = Samples::new(names, cols)?;
        match &self.config.metrics.symreg_inputs {
            None => Ok(all),
            Some(sel) => {
                let cols = sel
                    .iter()
                    .map(|n| all.column(n).map(<[f64]>::to_vec).ok_or_else(|| Error::UnboundVariable(n.clone())))
                    .collect::<Result<Vec<_>>>()?;
                Samples::new(sel.clone(), cols)
            }
        }
    }

    fn holdout(&self, lat: &[LatentSequence]) -> (Vec<usize>, Vec<bool>) {
        let mut videos: Vec<usize> = lat.iter().map(|l| l.video).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x401d_0u64.wrapping_mul(0x9e37_79b9));
        videos.shuffle(&mut rng);
        let n = ((videos.len() as f64 * self.config.metrics.holdout_fraction).ceil() as usize).clamp(1, videos.len().max(1));
        let mut held: Vec<usize> = videos[..n.min(videos.len())].to_vec();
        held.sort_unstable();
        let mask = lat
            .iter()
            .flat_map(|l| std::iter::repeat_n(held.contains(&l.video), l.mean.rows()))
            .collect();
        (held, mask)
    }

    pub fn symfit(&self, ds: &Dataset, lat: &[LatentSequence]) -> Result<(SymfitReport, bool)> {
        step("symfit", (|| {
            let input = fingerprint(&(
                ds.fingerprint()?,
                lat.iter().map(|l| l.mean.data().to_vec()).collect::<Vec<_>>(),
                &self.config.symreg,
                &self.config.metrics,
            ))?;
            self.json_step("symfit", &input, || {
                let samples = self.fit_samples(ds, lat)?;
                let (held, mask) = self.holdout(lat);
                let z = normalize_with_training(&stack(lat)?, &mask)?;
                let train = samples.select(&mask, false);
                let keep = subsample(train.len(), self.config.metrics.max_fit_samples, self.config.seed);
                let train = select_rows(&train, &keep);
                let mut fronts = Vec::new();
                let mut selected = Vec::new();
                for d in 0..z.cols() {
                    let col: Vec<f64> = (0..z.rows()).filter(|&r| !mask[r]).map(|r| z.at(r, d)).collect();
                    let target: Vec<f64> = keep.iter().map(|&i| col[i]).collect();
                    info!("fitting latent {d}");
                    let front = fit(&train, &target, &self.config.symreg)?;
                    selected.push(front.select(self.config.symreg.parsimony).clone());
                    fronts.push(front);
                }
                Ok(SymfitReport {
                    inputs: samples.names.clone(),
                    holdout_videos: held,
                    fronts,
                    selected,
                })
            })
        })())
    }

    pub fn metrics(&self, ds: &Dataset, lat: &[LatentSequence], fits: &SymfitReport) -> Result<(MetricsRecord, bool)> {
        step("metrics", (|| {
            let input = fingerprint(&(
                ds.fingerprint()?,
                lat.iter().map(|l| l.mean.data().to_vec()).collect::<Vec<_>>(),
                fits,
                &self.config.metrics,
            ))?;
            self.json_step("metrics_record", &input, || {
                let m = &self.config.metrics;
                let seqs: Vec<Tensor> = lat.iter().map(|l| l.mean.clone()).collect();
                let smooth = smoothness(&seqs, m.order, m.omega)?;
                let z = stack(lat)?;
                let (human_names, raw, _, _) = self.human(ds, lat);
                let human = Tensor::from_rows(&transpose(&raw))?;
                let model = VariableMatrix::numbered(z.clone(), Role::Model, "z")?;
                let human_vm = VariableMatrix::new(human, Role::Human, human_names.clone())?;
                let (mi, mi_raw, clamped, near, note) = if model.dims() + human_vm.dims() > MAX_KDE_DIM {
                    (None, None, false, false, Some(format!("joint dimension exceeds {MAX_KDE_DIM}; MI skipped")))
                } else {
                    let r = mutual_information(&model, &human_vm)?;
                    (Some(r.mi), Some(r.raw), r.clamped, r.near_deterministic, None)
                };
                let (_, mask) = self.holdout(lat);
                let zn = VariableMatrix::numbered(normalize_with_training(&z, &mask)?, Role::Model, "z")?;
                let samples = self.fit_samples(ds, lat)?;
                let trees: Vec<_> = fits.selected.iter().map(|e| Some(e.expression.clone())).collect();
                let a = amse(&zn, &samples, &trees, &mask)?;
                Ok(MetricsRecord {
                    smoothness: smooth,
                    mi,
                    amse: a,
                    diagnostics: MetricsDiagnostics {
                        split: m.split.clone(),
                        samples: z.rows(),
                        latent_dim: z.cols(),
                        human_variables: human_names,
                        mi_raw,
                        mi_clamped: clamped,
                        mi_near_deterministic: near,
                        mi_note: note,
                    },
                })
            })
        })())
    }

    #[allow(clippy::too_many_arguments)]
    pub fn report(
        &self,
        ds: &Dataset,
        s1: &TideCheckpoint,
        s2: &TideCheckpoint,
        id: &IdReport,
        lat: &[LatentSequence],
        fits: &SymfitReport,
        record: &MetricsRecord,
    ) -> Result<ReportBundle> {
        step("report", (|| {
            let summary = |ck: &TideCheckpoint| -> Result<StageSummary> {
                Ok(StageSummary {
                    epochs_run: ck.curve.len(),
                    best_epoch: ck.best_epoch,
                    best_val_total: ck.curve[ck.best_epoch].val.total,
                    fingerprint: ck.fingerprint()?,
                })
            };
            let report = MetricsReport {
                experiment: self.config.name.clone(),
                system: serde_json::to_value(ds.config.system.kind)?.as_str().unwrap_or_default().to_string(),
                seed: self.config.seed,
                dataset_fingerprint: ds.fingerprint()?,
                intrinsic_dimension: IdSummary {
                    id_fractional: id.danco.id_fractional,
                    id_rounded: id.id_rounded,
                    id_used: id.id_used,
                    ground_truth: id.ground_truth,
                    two_nn: id.two_nn,
                    grid: id.danco.grid.clone(),
                    kl_curve: id.danco.kl_curve.clone(),
                    points_used: id.points_used,
                },
                stage1: summary(s1)?,
                stage2: summary(s2)?,
                metrics: record.clone(),
                expressions: fits
                    .selected
                    .iter()
                    .enumerate()
                    .map(|(i, e)| ExpressionSummary {
                        latent: i,
                        expression: e.expression.to_string(),
                        prefix: e.expression.to_prefix(),
                        complexity: e.complexity,
                        train_mse: e.mse,
                    })
                    .collect(),
            };
            let metrics = self.out.join("metrics.json");
            write_atomic(&metrics, serde_json::to_string_pretty(&report)?.as_bytes())?;

            let split = &self.config.metrics.split;
            let zdim = lat.first().map_or(0, |l| l.mean.cols());
            let zcols: Vec<String> = (0..zdim).map(|i| format!("z{i}")).collect();
            let mut csv = format!("video,t,{}\n", zcols.join(","));
            for l in lat {
                for t in 0..l.mean.rows() {
                    let _ = writeln!(csv, "{},{},{}", l.video, t, join(l.mean.row(t)));
                }
            }
            let latents_csv = self.out.join(format!("latents_{split}.csv"));
            write_atomic(&latents_csv, csv.as_bytes())?;

            let (names, raw, _, _) = self.human(ds, lat);
            let mut csv = format!("{},{}\n", zcols.join(","), names.join(","));
            let mut row = 0;
            for l in lat {
                for t in 0..l.mean.rows() {
                    let human: Vec<f64> = raw.iter().map(|c| c[row]).collect();
                    let _ = writeln!(csv, "{},{}", join(l.mean.row(t)), join(&human));
                    row += 1;
                }
            }
            let phase_space_csv = self.out.join("phase_space.csv");
            write_atomic(&phase_space_csv, csv.as_bytes())?;

            let mut text = String::new();
            for (i, f) in fits.fronts.iter().enumerate() {
                let _ = writeln!(text, "z{i}: {}", fits.selected[i].expression);
                for e in &f.entries {
                    let _ = writeln!(text, "  complexity {:>3}  mse {:.6e}  {}", e.complexity, e.mse, e.expression);
                }
            }
            let expressions = self.out.join("expressions.txt");
            write_atomic(&expressions, text.as_bytes())?;
            write_atomic(&self.out.join("fronts.json"), serde_json::to_string_pretty(&fits.fronts)?.as_bytes())?;
            Ok(ReportBundle {
                metrics,
                latents_csv,
                phase_space_csv,
                expressions,
                report,
            })
        })())
    }

    /// Runs every step, reusing artifacts whose inputs are unchanged.
    pub fn run(&self) -> Result<(ReportBundle, RunSummary)> {
        let mut summary = RunSummary::default();
        let mut note = |name: &str, cached: bool| {
            if cached {
                summary.cached.push(name.into());
            } else {
                summary.computed.push(name.into());
            }
        };
        let (ds, c) = self.dataset()?;
        note("gen", c);
        let (s1, c) = self.stage1(&ds)?;
        note("train-stage1", c);
        let (id, c) = self.estimate_id(&ds, &s1)?;
        note("estimate-id", c);
        info!("intrinsic dimension {:.2} -> {}", id.danco.id_fractional, id.id_used);
        let (s2, c) = self.stage2(&ds, &s1, id.id_used)?;
        note("train-stage2", c);
        let (lat, c) = self.extract(&ds, &s1, &s2)?;
        note("extract", c);
        let (fits, c) = self.symfit(&ds, &lat)?;
        note("symfit", c);
        let (record, c) = self.metrics(&ds, &lat, &fits)?;
        note("metrics", c);
        let bundle = self.report(&ds, &s1, &s2, &id, &lat, &fits, &record)?;
        summary.computed.push("report".into());
        Ok((bundle, summary))
    }
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",")
}

fn stack(lat: &[LatentSequence]) -> Result<Tensor> {
    let rows: Vec<Vec<f64>> = lat.iter().flat_map(|l| (0..l.mean.rows()).map(|r| l.mean.row(r).to_vec())).collect();
    Tensor::from_rows(&rows)
}

fn transpose(cols: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = cols.first().map_or(0, Vec::len);
    (0..n).map(|r| cols.iter().map(|c| c[r]).collect()).collect()
}

/// Sorted indices of a seed-fixed subsample of `0..n` of size `max`.
fn subsample(n: usize, max: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    if n > max {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5a3b_1e00_0000_0002);
        idx.shuffle(&mut rng);
        idx.truncate(max);
        idx.sort_unstable();
    }
    idx
}

fn select_rows(s: &Samples, rows: &[usize]) -> Samples {
    Samples {
        names: s.names.clone(),
        columns: s.columns.iter().map(|c| rows.iter().map(|&r| c[r]).collect()).collect(),
    }
}

fn latents_from_container(c: &Container, videos: &[usize]) -> Result<Vec<LatentSequence>> {
    videos
        .iter()
        .map(|&v| {
            Ok(LatentSequence {
                video: v,
                mean: c.require(&format!("video/{v}/mean"))?.clone(),
                logvar: c.require(&format!("video/{v}/logvar"))?.clone(),
            })
        })
        .collect()
}

/// Loads a `metrics.json` written by [`Pipeline::report`].
pub fn load_report(path: &Path) -> Result<MetricsReport> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}
