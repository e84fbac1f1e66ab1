//! Central-difference gradient checking.

use crate::error::{Result, TensorError};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

/// Outcome of [`grad_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// max |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub elements: usize,
}

/// Relative error used by [`grad_check`].
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn evaluate<F>(
    build: &F,
    inputs: &[Tensor],
    requires_grad: bool,
) -> Result<(Graph, Vec<NodeId>, NodeId)>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs
        .iter()
        .map(|t| g.leaf(t.clone(), requires_grad))
        .collect();
    let out = build(&mut g, &ids)?;
    let out = if g.value(out).numel() == 1 {
        out
    } else {
        // Project a non-scalar output onto fixed, uneven weights so every
        // output element contributes a distinct amount.
        let n = g.value(out).numel();
        let w: Vec<f64> = (0..n)
            .map(|i| 0.5 + ((i * 7919) % 97) as f64 / 97.0)
            .collect();
        let w = g.constant(Tensor::new(g.value(out).shape().to_vec(), w)?);
        let p = g.mul(out, w)?;
        g.sum(p)?
    };
    Ok((g, ids, out))
}

/// Compares the tape gradient of `build(inputs)` against central
/// differences with step `eps` for every input element.
///
/// `build` must be deterministic; two evaluations at the same point are
/// compared bit for bit before differencing.
pub fn grad_check<F>(build: F, inputs: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let (mut g, ids, out) = evaluate(&build, inputs, true)?;
    let base = g.value(out).data()[0];
    let (g2, _, out2) = evaluate(&build, inputs, false)?;
    if g2.value(out2).data()[0].to_bits() != base.to_bits() {
        return Err(TensorError::NonDeterministic);
    }
    let grads = g.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        elements: 0,
    };
    let mut probe = inputs.to_vec();
    for (k, id) in ids.iter().enumerate() {
        let analytic = grads.get(*id).expect("leaf gradient").data().to_vec();
        for (e, &a) in analytic.iter().enumerate() {
            let orig = probe[k].data()[e];
            probe[k].data_mut()[e] = orig + eps;
            let (gp, _, op) = evaluate(&build, &probe, false)?;
            let fp = gp.value(op).data()[0];
            probe[k].data_mut()[e] = orig - eps;
            let (gm, _, om) = evaluate(&build, &probe, false)?;
            let fm = gm.value(om).data()[0];
            probe[k].data_mut()[e] = orig;

            let numeric = (fp - fm) / (2.0 * eps);
            report.max_rel_error = report.max_rel_error.max(relative_error(a, numeric));
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            report.elements += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_is_exact() {
        let x = Tensor::from_vec(vec![0.3, -1.2, 2.5]);
        let r = grad_check(|_, ids| Ok(ids[0]), &[x], 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-10, "{r:?}");
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
    }
}
