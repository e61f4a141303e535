//! Interpretability measurements: latent smoothness, kernel-density mutual
//! information against human variables, and analytical-fit error.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::reg_loss;
use crate::symreg::{mse, ExpressionTree, Samples};
use crate::tensor::Tensor;

/// Joint dimensions above this are rejected by [`mutual_information`].
pub const MAX_KDE_DIM: usize = 10;
/// Estimates above this many nats are flagged as near-deterministic.
pub const NEAR_DETERMINISTIC_NATS: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Model,
    Human,
}

/// Samples by dimensions, with column names.
#[derive(Debug, Clone, PartialEq)]
pub struct VariableMatrix {
    pub data: Tensor,
    pub role: Role,
    pub names: Vec<String>,
}

impl VariableMatrix {
    pub fn new(data: Tensor, role: Role, names: Vec<String>) -> Result<Self> {
        if data.shape().len() != 2 {
            return Err(Error::Config("variable matrix must be two-dimensional".into()));
        }
        if names.len() != data.cols() {
            return Err(Error::DimensionMismatch {
                expected: data.cols(),
                got: names.len(),
            });
        }
        if !data.is_finite() {
            return Err(Error::Config("variable matrix has non-finite entries".into()));
        }
        Ok(Self { data, role, names })
    }

    /// Columns named `{prefix}0`, `{prefix}1`, ...
    pub fn numbered(data: Tensor, role: Role, prefix: &str) -> Result<Self> {
        let names = (0..data.cols()).map(|i| format!("{prefix}{i}")).collect();
        Self::new(data, role, names)
    }

    pub fn samples(&self) -> usize {
        self.data.rows()
    }

    pub fn dims(&self) -> usize {
        self.data.cols()
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.samples()).map(|r| self.data.at(r, c)).collect()
    }

    pub fn to_samples(&self) -> Samples {
        Samples {
            names: self.names.clone(),
            columns: (0..self.dims()).map(|c| self.column(c)).collect(),
        }
    }
}

/// Mean time-derivative penalty of held-out latent sequences, normalized
/// over all of them jointly. Same computation as the training regularizer.
pub fn smoothness(latents: &[Tensor], order: usize, omega: f64) -> Result<f64> {
    reg_loss(latents, order, omega)
}

/// Product-Gaussian kernel density estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KdeModel {
    pub samples: Vec<Vec<f64>>,
    pub bandwidths: Vec<f64>,
}

impl KdeModel {
    pub fn new(samples: Vec<Vec<f64>>, bandwidths: Vec<f64>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::TooFewPoints { points: 0, k: 1 });
        }
        for s in &samples {
            if s.len() != bandwidths.len() {
                return Err(Error::DimensionMismatch {
                    expected: bandwidths.len(),
                    got: s.len(),
                });
            }
        }
        if bandwidths.iter().any(|h| !(*h > 0.0 && h.is_finite())) {
            return Err(Error::DegenerateCloud("KDE bandwidths must be positive".into()));
        }
        Ok(Self { samples, bandwidths })
    }

    /// Bandwidths by Scott's rule, `sigma_l * P^(-1/(dim + 4))`.
    pub fn scott(samples: Vec<Vec<f64>>) -> Result<Self> {
        let p = samples.len();
        if p < 2 {
            return Err(Error::TooFewPoints { points: p, k: 1 });
        }
        let dim = samples[0].len();
        let factor = (p as f64).powf(-1.0 / (dim as f64 + 4.0));
        let bandwidths = (0..dim)
            .map(|d| {
                let mean = samples.iter().map(|s| s[d]).sum::<f64>() / p as f64;
                let var = samples.iter().map(|s| (s[d] - mean).powi(2)).sum::<f64>() / (p as f64 - 1.0);
                var.sqrt() * factor
            })
            .collect();
        Self::new(samples, bandwidths)
    }

    pub fn dim(&self) -> usize {
        self.bandwidths.len()
    }
}

/// Log density of `model` at each query point.
pub fn kde_logdensity(model: &KdeModel, queries: &[Vec<f64>]) -> Result<Vec<f64>> {
    let dim = model.dim();
    let inv: Vec<f64> = model.bandwidths.iter().map(|h| 1.0 / h).collect();
    let norm = -(model.samples.len() as f64).ln()
        - model.bandwidths.iter().map(|h| h.ln()).sum::<f64>()
        - 0.5 * dim as f64 * (2.0 * std::f64::consts::PI).ln();
    let mut expo = vec![0.0; model.samples.len()];
    queries
        .iter()
        .map(|q| {
            if q.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: q.len() });
            }
            let mut top = f64::NEG_INFINITY;
            for (e, s) in expo.iter_mut().zip(&model.samples) {
                let mut acc = 0.0;
                for d in 0..dim {
                    let z = (q[d] - s[d]) * inv[d];
                    acc += z * z;
                }
                *e = -0.5 * acc;
                top = top.max(*e);
            }
            let sum: f64 = expo.iter().map(|e| (e - top).exp()).sum();
            Ok(norm + top + sum.ln())
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MutualInformation {
    /// Estimate in nats, clamped at zero.
    pub mi: f64,
    /// Unclamped resubstitution estimate.
    pub raw: f64,
    pub clamped: bool,
    pub near_deterministic: bool,
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

/// Resubstitution estimate of `MI(X, Y)` from three Scott-bandwidth KDE
/// fits (joint, and each marginal).
pub fn mutual_information(x: &VariableMatrix, y: &VariableMatrix) -> Result<MutualInformation> {
    if x.samples() != y.samples() {
        return Err(Error::SampleMismatch {
            left: x.samples(),
            right: y.samples(),
        });
    }
    let dim = x.dims() + y.dims();
    if dim > MAX_KDE_DIM {
        return Err(Error::DimensionTooHigh { dim, max: MAX_KDE_DIM });
    }
    let xs = rows(&x.data);
    let ys = rows(&y.data);
    let joint: Vec<Vec<f64>> = xs.iter().zip(&ys).map(|(a, b)| a.iter().chain(b).copied().collect()).collect();
    let lj = kde_logdensity(&KdeModel::scott(joint.clone())?, &joint)?;
    let lx = kde_logdensity(&KdeModel::scott(xs.clone())?, &xs)?;
    let ly = kde_logdensity(&KdeModel::scott(ys.clone())?, &ys)?;
    let p = x.samples() as f64;
    let raw = lj.iter().zip(&lx).zip(&ly).map(|((j, a), b)| j - a - b).sum::<f64>() / p;
    Ok(MutualInformation {
        mi: raw.max(0.0),
        raw,
        clamped: raw < 0.0,
        near_deterministic: raw > NEAR_DETERMINISTIC_NATS,
    })
}

/// Min-max normalizes every column with the range of the rows where
/// `holdout` is false.
pub fn normalize_with_training(latents: &Tensor, holdout: &[bool]) -> Result<Tensor> {
    if holdout.len() != latents.rows() {
        return Err(Error::SampleMismatch {
            left: latents.rows(),
            right: holdout.len(),
        });
    }
    let (r, c) = (latents.rows(), latents.cols());
    let mut out = latents.clone();
    for j in 0..c {
        let train = (0..r).filter(|&i| !holdout[i]).map(|i| latents.at(i, j));
        let lo = train.clone().fold(f64::INFINITY, f64::min);
        let hi = train.fold(f64::NEG_INFINITY, f64::max);
        let range = if hi > lo { hi - lo } else { 1.0 };
        for i in 0..r {
            out.data_mut()[i * c + j] = (latents.at(i, j) - lo) / range;
        }
    }
    Ok(out)
}

/// Mean over latent dimensions of the holdout squared error between each
/// latent and its fitted expression of the human variables.
pub fn amse(latents: &VariableMatrix, human: &Samples, fits: &[Option<ExpressionTree>], holdout: &[bool]) -> Result<f64> {
    if human.len() != latents.samples() {
        return Err(Error::SampleMismatch {
            left: latents.samples(),
            right: human.len(),
        });
    }
    if holdout.len() != latents.samples() {
        return Err(Error::SampleMismatch {
            left: latents.samples(),
            right: holdout.len(),
        });
    }
    if !holdout.iter().any(|&h| h) {
        return Err(Error::Config("AMSE holdout mask selects no samples".into()));
    }
    let held = human.select(holdout, true);
    let mut total = 0.0;
    for d in 0..latents.dims() {
        let tree = fits.get(d).and_then(Option::as_ref).ok_or(Error::FitMissing(d))?;
        let pred = tree.evaluate(&held)?;
        let truth: Vec<f64> = latents.column(d).into_iter().zip(holdout).filter(|(_, &h)| h).map(|(v, _)| v).collect();
        total += mse(&pred, &truth);
    }
    Ok(total / latents.dims() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::symreg::Expr;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn normals(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect()).collect()
    }

    fn matrix(rows: &[Vec<f64>], role: Role, prefix: &str) -> VariableMatrix {
        VariableMatrix::numbered(Tensor::from_rows(rows).unwrap(), role, prefix).unwrap()
    }

    #[test]
    fn constant_latents_are_perfectly_smooth() {
        let seq = Tensor::filled(&[10, 3], 0.4);
        assert_eq!(smoothness(&[seq.clone(), seq], 4, 5.0).unwrap(), 0.0);
    }

    #[test]
    fn smoothness_is_the_training_regularizer() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let seqs: Vec<Tensor> = (0..3)
            .map(|_| Tensor::matrix(9, 2, (0..18).map(|_| rng.random::<f64>()).collect()).unwrap())
            .collect();
        assert_eq!(smoothness(&seqs, 4, 5.0).unwrap().to_bits(), reg_loss(&seqs, 4, 5.0).unwrap().to_bits());
        let short = [Tensor::zeros(&[3, 2])];
        assert!(matches!(smoothness(&short, 4, 5.0), Err(Error::SequenceTooShort { .. })));
    }

    #[test]
    fn single_kernel_density() {
        let m = KdeModel::new(vec![vec![0.3]], vec![1.0]).unwrap();
        let l = kde_logdensity(&m, &[vec![0.3]]).unwrap()[0];
        assert!((l - (1.0 / (2.0 * std::f64::consts::PI).sqrt()).ln()).abs() < 1e-15);
        assert!(kde_logdensity(&m, &[vec![0.0, 1.0]]).is_err());
        assert!(KdeModel::new(vec![vec![0.0]], vec![0.0]).is_err());
    }

    #[test]
    fn density_integrates_to_one() {
        let m = KdeModel::scott(normals(1000, 2, 2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let half = 6.0;
        let n = 40_000;
        let q: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random_range(-half..half), rng.random_range(-half..half)]).collect();
        let integral = kde_logdensity(&m, &q).unwrap().iter().map(|l| l.exp()).sum::<f64>() / n as f64 * (2.0 * half).powi(2);
        assert!((integral - 1.0).abs() < 0.02, "{integral}");
    }

    #[test]
    fn symmetric_data_gives_symmetric_density() {
        let base = normals(200, 1, 4);
        let data: Vec<Vec<f64>> = base.iter().flat_map(|p| [p.clone(), vec![-p[0]]]).collect();
        let m = KdeModel::scott(data).unwrap();
        for x in [0.1, 0.7, 2.3] {
            let l = kde_logdensity(&m, &[vec![x], vec![-x]]).unwrap();
            assert!((l[0] - l[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn mi_is_symmetric_and_scale_free() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xs: Vec<Vec<f64>> = (0..800).map(|_| vec![rng.random::<f64>()]).collect();
        let ys: Vec<Vec<f64>> = xs.iter().map(|x| vec![(3.0 * x[0]).sin() + 0.2 * rng.random::<f64>()]).collect();
        let x = matrix(&xs, Role::Model, "z");
        let y = matrix(&ys, Role::Human, "h");
        let a = mutual_information(&x, &y).unwrap();
        let b = mutual_information(&y, &x).unwrap();
        assert!((a.mi - b.mi).abs() < 1e-9);
        let moved: Vec<Vec<f64>> = xs.iter().map(|v| vec![-4.0 * v[0] + 7.0]).collect();
        let c = mutual_information(&matrix(&moved, Role::Model, "z"), &y).unwrap();
        assert!((a.mi - c.mi).abs() < 0.02 * a.mi);
    }

    #[test]
    fn mi_input_checks() {
        let x = matrix(&normals(10, 6, 1), Role::Model, "z");
        let y = matrix(&normals(10, 5, 2), Role::Human, "h");
        assert!(matches!(mutual_information(&x, &y), Err(Error::DimensionTooHigh { .. })));
        let short = matrix(&normals(9, 1, 3), Role::Human, "h");
        assert!(matches!(mutual_information(&x, &short), Err(Error::SampleMismatch { .. })));
    }

    fn planted() -> (VariableMatrix, Samples, Vec<bool>) {
        let theta: Vec<f64> = (0..100).map(|i| i as f64 * 0.07).collect();
        let z: Vec<Vec<f64>> = theta.iter().map(|t| vec![0.5 * t.sin() + 0.1]).collect();
        let human = Samples::new(vec!["theta".into()], vec![theta]).unwrap();
        let mask = (0..100).map(|i| i % 4 == 0).collect();
        (matrix(&z, Role::Model, "z"), human, mask)
    }

    #[test]
    fn exact_fit_has_no_error() {
        let (z, human, mask) = planted();
        let tree = ExpressionTree::parse_prefix("(add (mul 0.5 (sin theta)) 0.1)").unwrap();
        assert!(amse(&z, &human, &[Some(tree)], &mask).unwrap() < 1e-10);
        assert!(matches!(amse(&z, &human, &[None], &mask), Err(Error::FitMissing(0))));
    }

    #[test]
    fn constant_fit_gives_holdout_variance() {
        let (z, human, mask) = planted();
        let held: Vec<f64> = z.column(0).into_iter().zip(&mask).filter(|(_, &m)| m).map(|(v, _)| v).collect();
        let mean = held.iter().sum::<f64>() / held.len() as f64;
        let var = held.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / held.len() as f64;
        let tree = ExpressionTree::new(vec![], Expr::Const(mean)).unwrap();
        assert!((amse(&z, &human, &[Some(tree)], &mask).unwrap() - var).abs() < 1e-15);
    }

    #[test]
    fn training_normalization_uses_training_rows() {
        let t = Tensor::matrix(4, 1, vec![0.0, 10.0, 5.0, 20.0]).unwrap();
        let out = normalize_with_training(&t, &[false, false, false, true]).unwrap();
        assert_eq!(out.data(), &[0.0, 1.0, 0.5, 2.0]);
    }
}
