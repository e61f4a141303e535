use super::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};

/// Compares reverse-mode gradients against central differences.
///
/// `build` records a scalar function of one parameter leaf per tensor in
/// `point`. Returns the maximum over all coordinates of
/// `|analytic - numeric| / max(1e-12, |numeric|, |analytic|)`.
pub fn grad_check<F>(build: F, point: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    if eps <= 0.0 {
        return Err(Error::Config(format!("finite-difference step must be positive, got {eps}")));
    }
    let mut g = Graph::new();
    let leaves: Vec<NodeId> = point.iter().map(|p| g.param(p.clone())).collect();
    let out = build(&mut g, &leaves)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor> = leaves
        .iter()
        .zip(point)
        .map(|(&id, p)| grads.get_or_zeros(id, p))
        .collect();

    let mut worst = 0.0_f64;
    for (li, (&leaf, base)) in leaves.iter().zip(point).enumerate() {
        for c in 0..base.len() {
            let mut probe = base.clone();
            probe.data_mut()[c] = base.data()[c] + eps;
            g.set_leaf(leaf, probe.clone())?;
            g.recompute()?;
            let up = g.value(out).item();
            probe.data_mut()[c] = base.data()[c] - eps;
            g.set_leaf(leaf, probe)?;
            g.recompute()?;
            let down = g.value(out).item();
            g.set_leaf(leaf, base.clone())?;

            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[li].data()[c];
            let denom = 1e-12_f64.max(numeric.abs()).max(a.abs());
            let rel = (a - numeric).abs() / denom;
            if !rel.is_finite() {
                return Ok(f64::INFINITY);
            }
            worst = worst.max(rel);
        }
    }
    g.recompute()?;
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_form_is_exact() {
        let a = Tensor::matrix(3, 3, vec![2.0, 0.5, 0.0, 0.5, 1.0, -0.3, 0.0, -0.3, 3.0]).unwrap();
        let x = Tensor::matrix(1, 3, vec![0.3, -1.2, 0.7]).unwrap();
        let err = grad_check(
            |g, p| {
                let am = g.constant(a.clone());
                let xa = g.matmul(p[0], am)?;
                let xax = g.mul(xa, p[0])?;
                g.sum(xax)
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "err = {err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let err = grad_check(
            |g, p| {
                let z = g.scale(p[0], 0.0)?;
                let s = g.sum(z)?;
                g.add_scalar(s, 4.0)
            },
            &[Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap()],
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn rejects_nonpositive_step() {
        let r = grad_check(|g, p| g.sum(p[0]), &[Tensor::scalar(1.0)], 0.0);
        assert!(matches!(r, Err(Error::Config(_))));
    }
}
