use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A fixed random smooth map from states to `output_dim`-dimensional
/// observations: `A2 tanh(A1 features + b1) + b2`, where every angle enters
/// the features through its cosine and sine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub hidden: usize,
    pub seed: u64,
    /// State indices encoded as (cos, sin) pairs.
    pub angles: Vec<usize>,
    #[serde(skip)]
    weights: Option<EmbeddingWeights>,
}

#[derive(Debug, Clone, PartialEq)]
struct EmbeddingWeights {
    a1: Vec<f64>,
    b1: Vec<f64>,
    a2: Vec<f64>,
    b2: Vec<f64>,
}

impl EmbeddingSpec {
    pub fn new(input_dim: usize, output_dim: usize, hidden: usize, seed: u64, angles: Vec<usize>) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 || hidden == 0 {
            return Err(Error::Config("embedding dimensions must be positive".into()));
        }
        if angles.iter().any(|&a| a >= input_dim) {
            return Err(Error::Config("angle index outside the state".into()));
        }
        let mut spec = Self {
            input_dim,
            output_dim,
            hidden,
            seed,
            angles,
            weights: None,
        };
        spec.weights = Some(spec.generate());
        Ok(spec)
    }

    fn feature_dim(&self) -> usize {
        self.input_dim + self.angles.len()
    }

    fn generate(&self) -> EmbeddingWeights {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let f = self.feature_dim();
        let w1 = Normal::new(0.0, 1.0 / (f as f64).sqrt()).expect("positive std");
        let w2 = Normal::new(0.0, 1.0 / (self.hidden as f64).sqrt()).expect("positive std");
        let bias = Normal::new(0.0, 0.1).expect("positive std");
        EmbeddingWeights {
            a1: (0..self.hidden * f).map(|_| w1.sample(&mut rng)).collect(),
            b1: (0..self.hidden).map(|_| bias.sample(&mut rng)).collect(),
            a2: (0..self.output_dim * self.hidden).map(|_| w2.sample(&mut rng)).collect(),
            b2: (0..self.output_dim).map(|_| bias.sample(&mut rng)).collect(),
        }
    }

    fn features(&self, state: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.feature_dim());
        for (i, &v) in state.iter().enumerate() {
            if self.angles.contains(&i) {
                out.push(v.cos());
                out.push(v.sin());
            } else {
                out.push(v);
            }
        }
        out
    }
}

/// Maps a state to its observation vector under `emb`.
pub fn embed_state(state: &[f64], emb: &EmbeddingSpec) -> Result<Vec<f64>> {
    if state.len() != emb.input_dim {
        return Err(Error::DimensionMismatch {
            expected: emb.input_dim,
            got: state.len(),
        });
    }
    let generated;
    let w = match &emb.weights {
        Some(w) => w,
        None => {
            generated = emb.generate();
            &generated
        }
    };
    let x = emb.features(state);
    let f = x.len();
    let hidden: Vec<f64> = (0..emb.hidden)
        .map(|h| {
            let row = &w.a1[h * f..(h + 1) * f];
            (row.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>() + w.b1[h]).tanh()
        })
        .collect();
    Ok((0..emb.output_dim)
        .map(|o| {
            let row = &w.a2[o * emb.hidden..(o + 1) * emb.hidden];
            row.iter().zip(&hidden).map(|(a, b)| a * b).sum::<f64>() + w.b2[o]
        })
        .collect())
}
