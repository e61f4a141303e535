//! Gradient-check fixtures shared by the integration tests.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tide_core::net::{build_tide_loss, Architecture, BoundMlp, BoundNet, Hyperparameters, TideNet, WindowBatch};
use tide_core::tensor::{grad_check, Graph, NodeId, Tensor};
use tide_core::Result;

type Build = fn(&mut Graph, &[NodeId]) -> Result<NodeId>;

pub struct Primitive {
    pub name: &'static str,
    pub shapes: Vec<[usize; 2]>,
    /// Inputs are drawn from `[lo, hi]`, away from kinks and poles.
    pub range: (f64, f64),
    pub build: Build,
}

fn p(name: &'static str, shapes: &[[usize; 2]], range: (f64, f64), build: Build) -> Primitive {
    Primitive {
        name,
        shapes: shapes.to_vec(),
        range,
        build,
    }
}

pub fn primitives() -> Vec<Primitive> {
    const ANY: (f64, f64) = (-2.0, 2.0);
    const POS: (f64, f64) = (0.5, 3.0);
    vec![
        p("matmul", &[[3, 4], [4, 2]], ANY, |g, x| g.matmul(x[0], x[1])),
        p("add", &[[3, 4], [3, 4]], ANY, |g, x| g.add(x[0], x[1])),
        p("add_row_broadcast", &[[3, 4], [1, 4]], ANY, |g, x| g.add(x[0], x[1])),
        p("sub", &[[3, 4], [3, 4]], ANY, |g, x| g.sub(x[0], x[1])),
        p("mul", &[[3, 4], [3, 4]], ANY, |g, x| g.mul(x[0], x[1])),
        p("scale", &[[3, 4]], ANY, |g, x| g.scale(x[0], -1.7)),
        p("add_scalar", &[[3, 4]], ANY, |g, x| g.add_scalar(x[0], 0.3)),
        p("tanh", &[[3, 4]], ANY, |g, x| g.tanh(x[0])),
        p("exp", &[[3, 4]], ANY, |g, x| g.exp(x[0])),
        p("ln", &[[3, 4]], POS, |g, x| g.ln(x[0])),
        p("square", &[[3, 4]], ANY, |g, x| g.square(x[0])),
        p("sin", &[[3, 4]], ANY, |g, x| g.sin(x[0])),
        p("abs", &[[3, 4]], POS, |g, x| {
            let n = g.scale(x[0], -1.0)?;
            let both = g.concat_rows(&[x[0], n])?;
            g.abs(both)
        }),
        p("recip", &[[3, 4]], POS, |g, x| g.recip(x[0])),
        p("clamp", &[[3, 4]], POS, |g, x| {
            let s = g.add_scalar(x[0], -1.0)?;
            // Values in (-0.5, 2): some clipped at 1.5, some pass through.
            g.clamp(s, -1.0, 1.5)
        }),
        p("sum", &[[3, 4]], ANY, |g, x| g.sum(x[0])),
        p("mean", &[[3, 4]], ANY, |g, x| g.mean(x[0])),
        p("col_min", &[[5, 3]], ANY, |g, x| g.col_min(x[0])),
        p("col_max", &[[5, 3]], ANY, |g, x| g.col_max(x[0])),
        p("reshape", &[[3, 4]], ANY, |g, x| g.reshape(x[0], vec![2, 6])),
        p("concat_rows", &[[2, 3], [4, 3]], ANY, |g, x| g.concat_rows(&[x[0], x[1]])),
        p("concat_cols", &[[3, 2], [3, 4]], ANY, |g, x| g.concat_cols(&[x[0], x[1]])),
        p("slice_rows", &[[5, 3]], ANY, |g, x| g.slice_rows(x[0], 1, 4)),
        p("slice_cols", &[[3, 5]], ANY, |g, x| g.slice_cols(x[0], 2, 5)),
        p("select_rows", &[[4, 3]], ANY, |g, x| g.select_rows(x[0], vec![3, 0, 0, 2])),
        p("affine", &[[3, 4], [4, 2], [1, 2]], ANY, |g, x| g.affine(x[0], x[1], x[2])),
    ]
}

/// Max relative error of one primitive, contracted to a scalar with fixed
/// random weights so every output element contributes.
pub fn check_primitive(prim: &Primitive, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = prim.range;
    let point: Vec<Tensor> = prim
        .shapes
        .iter()
        .map(|&[r, c]| Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(lo..hi)).collect()).unwrap())
        .collect();
    let weight_seed: u64 = rng.random();
    let build = prim.build;
    grad_check(
        move |g, x| {
            let out = build(g, x)?;
            let shape = g.value(out).shape().to_vec();
            let mut wr = ChaCha8Rng::seed_from_u64(weight_seed);
            let n: usize = shape.iter().product();
            let w = Tensor::new(shape, (0..n).map(|_| wr.random_range(0.5..1.5)).collect()).unwrap();
            let w = g.constant(w);
            let prod = g.mul(out, w)?;
            g.sum(prod)
        },
        &point,
        1e-6,
    )
    .unwrap()
}

/// Max relative error of the full objective with respect to every network
/// parameter, for `windows` windows of `len` steps and latent size `latent`.
pub fn check_full_loss(windows: usize, len: usize, latent: usize, seed: u64) -> f64 {
    let input = 4;
    let mut arch = Architecture::new(input, latent);
    arch.hidden = vec![5];
    arch.dynamics_width = 4;
    let net = TideNet::new(arch, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x55);
    let data = (0..windows * len * input).map(|_| rng.random_range(-1.0..1.0)).collect();
    let batch = WindowBatch::new(Tensor::matrix(windows * len, input, data).unwrap(), windows, len).unwrap();
    let hyper = Hyperparameters {
        obs_variance: 1.0,
        beta: 0.5,
        lambda1: 0.5,
        lambda2: 0.5,
        ..Hyperparameters::default()
    };
    let params: Vec<Tensor> = net.parameters().into_iter().cloned().collect();
    grad_check(
        |g, p| {
            let mut it = p.iter().copied();
            let mut take = |layers: usize| BoundMlp {
                layers: (0..layers).map(|_| (it.next().unwrap(), it.next().unwrap())).collect(),
            };
            let bound = BoundNet {
                encoder: take(net.encoder.layers.len()),
                decoder: take(net.decoder.layers.len()),
                dynamics: take(net.dynamics.layers.len()),
            };
            let mut noise = ChaCha8Rng::seed_from_u64(seed ^ 0xaa);
            Ok(build_tide_loss(g, &bound, latent, None, &batch, &hyper, &mut noise)?.total)
        },
        &params,
        // The objective is O(1e3) while some parameter gradients are O(1e-5);
        // smaller steps drown those coordinates in rounding error.
        1e-4,
    )
    .unwrap()
}
