//! Intrinsic-dimension estimation from angle and norm concentration of
//! nearest neighbors.

mod special;

pub use special::{bessel_ratio, concentration_from_resultant, distance_ratio_kl, ln_bessel_i0, von_mises_kl};

use std::path::{Path, PathBuf};

use log::debug;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::container::{fingerprint, write_atomic, Container};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Environment variable that overrides the reference-table cache directory.
pub const CACHE_ENV: &str = "TIDE_CACHE_DIR";
const DUPLICATE_TOL: f64 = 1e-12;

/// Deduplicated points, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Vec<f64>>,
    pub duplicates_removed: usize,
}

impl PointCloud {
    /// Builds a cloud from the rows of `t`, dropping points within 1e-12
    /// of an earlier one.
    pub fn new(t: &Tensor) -> Self {
        let rows: Vec<Vec<f64>> = (0..t.rows()).map(|r| t.row(r).to_vec()).collect();
        Self::from_rows(rows)
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        let n = rows.len();
        // Sorting by first coordinate confines duplicate search to a band.
        let mut order: Vec<usize> = (0..n).collect();
        let lead = |i: usize| rows[i].first().copied().unwrap_or(0.0);
        order.sort_by(|&a, &b| lead(a).total_cmp(&lead(b)).then(a.cmp(&b)));
        let mut drop = vec![false; n];
        for (pos, &i) in order.iter().enumerate() {
            if drop[i] {
                continue;
            }
            for &j in &order[pos + 1..] {
                let gap = lead(j) - lead(i);
                if gap > DUPLICATE_TOL {
                    break;
                }
                if !drop[j] && sq_dist(&rows[i], &rows[j]).sqrt() <= DUPLICATE_TOL {
                    drop[j.max(i)] = true;
                }
            }
        }
        let removed = drop.iter().filter(|&&d| d).count();
        let points = rows.into_iter().zip(drop).filter(|(_, d)| !d).map(|(r, _)| r).collect();
        Self {
            points,
            duplicates_removed: removed,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points.first().map_or(0, Vec::len)
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Neighbor lists of every point, nearest first.
#[derive(Debug, Clone, PartialEq)]
pub struct Neighbors {
    pub indices: Vec<Vec<usize>>,
    pub distances: Vec<Vec<f64>>,
}

/// Exact Euclidean k-nearest neighbors, excluding each point itself; ties
/// are broken by index.
pub fn knn(points: &[Vec<f64>], k: usize) -> Result<Neighbors> {
    let n = points.len();
    if k == 0 || k >= n {
        return Err(Error::TooFewPoints { points: n, k });
    }
    let mut row = vec![0.0; n];
    let mut indices = Vec::with_capacity(n);
    let mut distances = Vec::with_capacity(n);
    let mut cand: Vec<usize> = Vec::with_capacity(n);
    for i in 0..n {
        for (j, r) in row.iter_mut().enumerate() {
            *r = sq_dist(&points[i], &points[j]);
        }
        cand.clear();
        cand.extend((0..n).filter(|&j| j != i));
        let cmp = |a: &usize, b: &usize| row[*a].total_cmp(&row[*b]).then(a.cmp(b));
        if k < cand.len() {
            cand.select_nth_unstable_by(k - 1, cmp);
            cand.truncate(k);
        }
        cand.sort_by(cmp);
        distances.push(cand.iter().map(|&j| row[j].sqrt()).collect());
        indices.push(cand.clone());
    }
    Ok(Neighbors { indices, distances })
}

/// Summary statistics compared between data and reference clouds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DancoStats {
    /// Maximum-likelihood dimension from nearest/k-th neighbor ratios.
    pub d_ml: f64,
    /// Mean of the per-point von Mises mean angles.
    pub nu: f64,
    /// Von Mises concentration of the averaged per-point resultant length.
    pub tau: f64,
}

fn log_likelihood_slope(d: f64, ln_r: &[f64], k: usize) -> f64 {
    let p = ln_r.len() as f64;
    let km1 = k as f64 - 1.0;
    let mut s = p / d;
    for &l in ln_r {
        s += l;
        let rd = (d * l).exp();
        s -= km1 * rd * l / (1.0 - rd);
    }
    s
}

/// Maximizes `sum_i ln g(r_i; k, d)` over `d`; the log-likelihood is
/// concave, so bisection on its slope suffices.
fn ml_dimension(ratios: &[f64], k: usize) -> f64 {
    let ln_r: Vec<f64> = ratios.iter().map(|&r| r.min(1.0 - 1e-12).ln()).collect();
    let (mut lo, mut hi) = (1e-6, 1.0);
    while log_likelihood_slope(hi, &ln_r, k) > 0.0 && hi < 1e4 {
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if log_likelihood_slope(mid, &ln_r, k) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-13 * hi {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Pairwise angles between the centered, normalized neighbor directions
/// of one point.
fn neighbor_angles(points: &[Vec<f64>], center: usize, nbrs: &[usize]) -> Vec<f64> {
    let c = &points[center];
    let dirs: Vec<Vec<f64>> = nbrs
        .iter()
        .map(|&j| {
            let v: Vec<f64> = points[j].iter().zip(c).map(|(a, b)| a - b).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect();
    let mut out = Vec::with_capacity(dirs.len() * (dirs.len() - 1) / 2);
    for a in 0..dirs.len() {
        for b in a + 1..dirs.len() {
            let dot: f64 = dirs[a].iter().zip(&dirs[b]).map(|(x, y)| x * y).sum();
            out.push(dot.clamp(-1.0, 1.0).acos());
        }
    }
    out
}

/// Von Mises mean direction and mean resultant length of angle data.
fn circular_moments(angles: &[f64]) -> (f64, f64) {
    let n = angles.len() as f64;
    let c = angles.iter().map(|a| a.cos()).sum::<f64>() / n;
    let s = angles.iter().map(|a| a.sin()).sum::<f64>() / n;
    (s.atan2(c), (c * c + s * s).sqrt())
}

/// Per-point angle sets and the pooled statistics of a cloud.
///
/// The concentration is fitted to the averaged resultant length rather than
/// averaged over per-point fits, which diverge whenever every neighbor of a
/// point lies on one ray.
fn cloud_stats(points: &[Vec<f64>], k: usize) -> Result<DancoStats> {
    let nb = knn(points, k)?;
    let ratios: Vec<f64> = nb.distances.iter().map(|d| d[0] / d[k - 1]).collect();
    let d_ml = ml_dimension(&ratios, k);
    let mut nu = 0.0;
    let mut resultant = 0.0;
    for (i, idx) in nb.indices.iter().enumerate() {
        let (m, r) = circular_moments(&neighbor_angles(points, i, idx));
        nu += m;
        resultant += r;
    }
    let n = points.len() as f64;
    Ok(DancoStats {
        d_ml,
        nu: nu / n,
        tau: concentration_from_resultant(resultant / n),
    })
}

/// Reference statistics for one candidate dimension.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceEntry {
    pub d: usize,
    pub stats: DancoStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceTable {
    pub k: usize,
    pub points: usize,
    pub seed: u64,
    pub entries: Vec<ReferenceEntry>,
}

impl ReferenceTable {
    fn interpolate(&self, d: f64) -> DancoStats {
        let e = &self.entries;
        let pos = e.partition_point(|x| (x.d as f64) <= d);
        if pos == 0 {
            return e[0].stats;
        }
        if pos == e.len() {
            return e[e.len() - 1].stats;
        }
        let (a, b) = (&e[pos - 1], &e[pos]);
        let w = (d - a.d as f64) / (b.d - a.d) as f64;
        let mix = |x: f64, y: f64| x + w * (y - x);
        DancoStats {
            d_ml: mix(a.stats.d_ml, b.stats.d_ml),
            nu: mix(a.stats.nu, b.stats.nu),
            tau: mix(a.stats.tau, b.stats.tau),
        }
    }
}

/// `points` samples uniform in the unit `d`-ball.
fn sample_ball(d: usize, points: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let unit = Uniform::new(0.0_f64, 1.0).expect("valid range");
    (0..points)
        .map(|_| {
            let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let radius = unit.sample(rng).powf(1.0 / d as f64);
            v.iter_mut().for_each(|x| *x *= radius / norm);
            v
        })
        .collect()
}

/// Default cache directory: `$TIDE_CACHE_DIR` or a folder under the system
/// temp directory.
pub fn default_cache_dir() -> PathBuf {
    std::env::var_os(CACHE_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("tide-cache"))
}

#[derive(Serialize, Deserialize)]
struct CacheKey {
    kind: String,
    d: usize,
    k: usize,
    points: usize,
    seed: u64,
}

fn reference_entry(d: usize, k: usize, points: usize, seed: u64) -> Result<ReferenceEntry> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (d as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let cloud = PointCloud::from_rows(sample_ball(d, points, &mut rng));
    let stats = cloud_stats(cloud.points(), k)?;
    Ok(ReferenceEntry { d, stats })
}

/// Monte-Carlo reference statistics for every `d` in `grid`, read from or
/// written to `cache` when given. Returns the table and the number of
/// cache hits.
pub fn calibrate_reference(
    grid: &[usize],
    k: usize,
    points: usize,
    seed: u64,
    cache: Option<&Path>,
) -> Result<(ReferenceTable, usize)> {
    if grid.is_empty() || grid.contains(&0) {
        return Err(Error::Config("reference grid must contain dimensions >= 1".into()));
    }
    let mut grid = grid.to_vec();
    grid.sort_unstable();
    grid.dedup();
    let mut hits = 0;
    let mut entries = Vec::with_capacity(grid.len());
    for &d in &grid {
        let key = CacheKey {
            kind: "danco-reference".into(),
            d,
            k,
            points,
            seed,
        };
        let name = format!("danco_d{d}_k{k}_p{points}_s{seed}");
        let cached = cache.and_then(|dir| {
            let c = Container::load(&dir.join(format!("{name}.tide"))).ok()?;
            let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.join(format!("{name}.json"))).ok()?).ok()?;
            if manifest.get("key_fingerprint")?.as_str()? != fingerprint(&key).ok()? {
                return None;
            }
            let t = c.get("stats")?;
            (t.len() == 3).then(|| ReferenceEntry {
                d,
                stats: DancoStats {
                    d_ml: t.data()[0],
                    nu: t.data()[1],
                    tau: t.data()[2],
                },
            })
        });
        let entry = match cached {
            Some(e) => {
                hits += 1;
                e
            }
            None => {
                let e = reference_entry(d, k, points, seed)?;
                if let Some(dir) = cache {
                    let s = e.stats;
                    Container::new()
                        .with("stats", Tensor::new(vec![3], vec![s.d_ml, s.nu, s.tau])?)
                        .save(&dir.join(format!("{name}.tide")))?;
                    let manifest = serde_json::json!({ "key": key, "key_fingerprint": fingerprint(&key)? });
                    write_atomic(&dir.join(format!("{name}.json")), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
                }
                e
            }
        };
        debug!("reference d={d}: {:?}", entry.stats);
        entries.push(entry);
    }
    Ok((
        ReferenceTable {
            k,
            points,
            seed,
            entries,
        },
        hits,
    ))
}

fn default_k() -> usize {
    10
}
fn default_d_max() -> usize {
    16
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DancoConfig {
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_d_max")]
    pub d_max: usize,
    /// Seed of the reference Monte-Carlo draws.
    #[serde(default)]
    pub seed: u64,
}

impl Default for DancoConfig {
    fn default() -> Self {
        Self {
            k: default_k(),
            d_max: default_d_max(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DancoResult {
    pub id_fractional: f64,
    /// Integer grid point with the smallest combined divergence.
    pub id_grid: usize,
    pub data: DancoStats,
    pub grid: Vec<usize>,
    pub kl_distance: Vec<f64>,
    pub kl_angle: Vec<f64>,
    pub kl_curve: Vec<f64>,
    pub points: usize,
    pub k: usize,
    pub duplicates_removed: usize,
    pub cache_hits: usize,
}

fn combined_kl(data: &DancoStats, reference: &DancoStats, k: usize) -> (f64, f64) {
    (
        distance_ratio_kl(k, data.d_ml, reference.d_ml),
        von_mises_kl(data.nu, data.tau, reference.nu, reference.tau),
    )
}

/// Fractional intrinsic dimension of `cloud`.
///
/// Reference statistics are computed for every dimension `1..=d_max` from
/// the same number of points and neighbors; the estimate minimizes the sum
/// of the distance-ratio and angle divergences, with reference statistics
/// linearly interpolated between grid points.
pub fn danco_estimate(cloud: &PointCloud, cfg: &DancoConfig, cache: Option<&Path>) -> Result<DancoResult> {
    let (k, d_max) = (cfg.k, cfg.d_max);
    if k < 2 {
        return Err(Error::Config("DANCo needs k >= 2 neighbors".into()));
    }
    if !(1..=64).contains(&d_max) {
        return Err(Error::DimensionTooHigh { dim: d_max, max: 64 });
    }
    let p = cloud.len();
    if p < k + 2 {
        return Err(Error::TooFewPoints { points: p, k });
    }
    let spread: f64 = (0..cloud.dim())
        .map(|c| {
            let col = cloud.points().iter().map(|r| r[c]);
            let mean = col.clone().sum::<f64>() / p as f64;
            col.map(|v| (v - mean).powi(2)).sum::<f64>()
        })
        .sum();
    if !(spread > 0.0) {
        return Err(Error::DegenerateCloud("all points coincide".into()));
    }

    let data = cloud_stats(cloud.points(), k)?;
    let grid: Vec<usize> = (1..=d_max).collect();
    let (table, cache_hits) = calibrate_reference(&grid, k, p, cfg.seed, cache)?;

    let mut kl_distance = Vec::with_capacity(grid.len());
    let mut kl_angle = Vec::with_capacity(grid.len());
    for e in &table.entries {
        let (a, b) = combined_kl(&data, &e.stats, k);
        kl_distance.push(a);
        kl_angle.push(b);
    }
    let kl_curve: Vec<f64> = kl_distance.iter().zip(&kl_angle).map(|(a, b)| a + b).collect();
    let best = kl_curve
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .expect("non-empty grid");
    let id_grid = grid[best];

    // Refine between the neighboring grid points.
    let lo = (id_grid as f64 - 1.0).max(1.0);
    let hi = (id_grid as f64 + 1.0).min(d_max as f64);
    let steps = ((hi - lo) * 100.0).round() as usize;
    let mut id_fractional = id_grid as f64;
    let mut best_kl = kl_curve[best];
    for s in 0..=steps {
        let d = lo + (hi - lo) * s as f64 / steps.max(1) as f64;
        let (a, b) = combined_kl(&data, &table.interpolate(d), k);
        if a + b < best_kl {
            best_kl = a + b;
            id_fractional = d;
        }
    }

    Ok(DancoResult {
        id_fractional,
        id_grid,
        data,
        grid,
        kl_distance,
        kl_angle,
        kl_curve,
        points: p,
        k,
        duplicates_removed: cloud.duplicates_removed,
        cache_hits,
    })
}

/// Two-nearest-neighbor maximum-likelihood dimension. A cross-check only;
/// the pipeline uses [`danco_estimate`].
pub fn two_nn(cloud: &PointCloud) -> Result<f64> {
    let nb = knn(cloud.points(), 2)?;
    let s: f64 = nb.distances.iter().map(|d| (d[1] / d[0]).ln()).sum();
    Ok(cloud.len() as f64 / s)
}

/// Per-dimension zero-mean, unit-variance copy of `t` (constant columns
/// are only centered).
pub fn standardize(t: &Tensor) -> Tensor {
    let (r, c) = (t.rows(), t.cols());
    let mut out = t.clone();
    for j in 0..c {
        let mean = (0..r).map(|i| t.at(i, j)).sum::<f64>() / r as f64;
        let var = (0..r).map(|i| (t.at(i, j) - mean).powi(2)).sum::<f64>() / r as f64;
        let scale = if var > 0.0 { 1.0 / var.sqrt() } else { 1.0 };
        for i in 0..r {
            out.data_mut()[i * c + j] = (t.at(i, j) - mean) * scale;
        }
    }
    out
}

/// Rounds a fractional estimate, letting a known ground truth win.
pub fn choose_latent_dim(estimate: f64, ground_truth: Option<usize>) -> usize {
    ground_truth.unwrap_or_else(|| (estimate.round() as usize).max(1))
}
