use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use tide_core::metrics::{mutual_information, Role, VariableMatrix};
use tide_core::tensor::Tensor;

fn gaussian_pair(n: usize, rho: f64, seed: u64) -> (VariableMatrix, VariableMatrix) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let a: f64 = StandardNormal.sample(&mut rng);
        let b: f64 = StandardNormal.sample(&mut rng);
        xs.push(a);
        ys.push(rho * a + (1.0 - rho * rho).sqrt() * b);
    }
    (
        VariableMatrix::numbered(Tensor::matrix(n, 1, xs).unwrap(), Role::Model, "z").unwrap(),
        VariableMatrix::numbered(Tensor::matrix(n, 1, ys).unwrap(), Role::Human, "h").unwrap(),
    )
}

#[test]
fn correlated_gaussians_match_closed_form() {
    let (x, y) = gaussian_pair(5000, 0.9, 1);
    let exact = -0.5 * (1.0 - 0.81_f64).ln();
    let est = mutual_information(&x, &y).unwrap();
    println!("rho=0.9 estimate {} exact {exact}", est.mi);
    assert!((est.mi - exact).abs() <= 0.15 * exact);
    assert!(!est.near_deterministic);
}

#[test]
fn independent_gaussians_near_zero() {
    let (x, y) = gaussian_pair(5000, 0.0, 2);
    let est = mutual_information(&x, &y).unwrap();
    println!("independent estimate {}", est.mi);
    assert!(est.mi < 0.05);
}

#[test]
fn identical_variables_are_flagged() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut estimates = Vec::new();
    for n in [500, 5000] {
        let v: Vec<f64> = (0..2 * n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let x = VariableMatrix::numbered(Tensor::matrix(n, 2, v).unwrap(), Role::Model, "z").unwrap();
        let y = VariableMatrix { role: Role::Human, ..x.clone() };
        estimates.push(mutual_information(&x, &y).unwrap());
    }
    println!("self MI {:?}", estimates.iter().map(|e| e.mi).collect::<Vec<_>>());
    assert!(estimates[1].mi > estimates[0].mi);
    assert!(estimates[1].mi > 2.0 && estimates[1].near_deterministic);
}
