//! Central finite-difference verification of [`Graph::backward`].

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// Pass threshold on the maximum relative error.
    pub tolerance: f64,
    /// Lower bound of the relative-error denominator.
    pub floor: f64,
    /// Probe at most this many coordinates per input tensor (chosen with
    /// `seed`); `None` probes every coordinate.
    pub max_probes_per_tensor: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
            max_probes_per_tensor: None,
            seed: 0,
        }
    }
}

impl GradCheckOptions {
    pub fn with_tolerance(tolerance: f64) -> Self {
        GradCheckOptions { tolerance, ..Self::default() }
    }

    pub fn probes(mut self, n: usize) -> Self {
        self.max_probes_per_tensor = Some(n);
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorstProbe {
    pub tensor: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub probes: usize,
    /// Probes whose ±step perturbation crossed a non-differentiable point.
    pub skipped: usize,
    pub worst: Option<WorstProbe>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

/// Relative error with a floored denominator.
pub fn relative_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Checks the gradient of the scalar built by `recipe` with respect to every
/// tensor in `inputs`. The recipe receives one trainable leaf per input and
/// must be deterministic.
///
/// Probes whose perturbation changes [`Graph::branch_signature`] are skipped:
/// a finite difference across a kink does not estimate either one-sided
/// derivative.
pub fn grad_check<F>(recipe: F, inputs: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let run = |vals: &[Tensor]| -> Result<(Graph, Vec<NodeId>, NodeId)> {
        let mut g = Graph::new();
        let leaves: Vec<NodeId> = vals.iter().map(|t| g.param(t.clone())).collect();
        let root = recipe(&mut g, &leaves)?;
        if let Some((id, kind)) = g.first_non_finite() {
            return Err(Error::NonFinite { node: id.0, kind: kind.name() });
        }
        Ok((g, leaves, root))
    };

    let (graph, leaves, root) = run(inputs)?;
    let base_sig = graph.branch_signature();
    let grads = graph.backward(root)?;
    let analytic: Vec<Tensor> = leaves
        .iter()
        .zip(inputs)
        .map(|(&l, t)| grads.get_or_zeros(l, t.shape()))
        .collect();
    drop(graph);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        tolerance: opts.tolerance,
        probes: 0,
        skipped: 0,
        worst: None,
    };
    let mut vals = inputs.to_vec();
    for ti in 0..inputs.len() {
        let numel = inputs[ti].numel();
        let coords: Vec<usize> = match opts.max_probes_per_tensor {
            Some(k) if k < numel => {
                let mut v = sample(&mut rng, numel, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..numel).collect(),
        };
        for idx in coords {
            let orig = inputs[ti].data()[idx];
            vals[ti].data_mut()[idx] = orig + opts.step;
            let (gp, _, rp) = run(&vals)?;
            vals[ti].data_mut()[idx] = orig - opts.step;
            let (gm, _, rm) = run(&vals)?;
            vals[ti].data_mut()[idx] = orig;
            if gp.branch_signature() != base_sig || gm.branch_signature() != base_sig {
                report.skipped += 1;
                continue;
            }
            let numeric = (gp.value(rp).item() - gm.value(rm).item()) / (2.0 * opts.step);
            let a = analytic[ti].data()[idx];
            let err = relative_error(a, numeric, opts.floor);
            report.probes += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some(WorstProbe { tensor: ti, index: idx, analytic: a, numeric });
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_graph_has_zero_error() {
        let x = Tensor::full(&[3], 0.2);
        let rep = grad_check(
            |g, _| {
                let c = g.constant(Tensor::full(&[2], 4.0));
                g.sum(c)
            },
            &[x],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(rep.max_rel_error, 0.0);
        assert!(rep.passed());
    }

    #[test]
    fn reports_non_finite_node() {
        let x = Tensor::full(&[2], -1.0);
        let err = grad_check(
            |g, p| {
                let l = g.log(p[0])?;
                g.sum(l)
            },
            &[x],
            &GradCheckOptions::default(),
        )
        .unwrap_err();
        match err {
            Error::NonFinite { node, kind } => {
                assert_eq!(node, 1);
                assert_eq!(kind, "log");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // stop_gradient hides the true dependence, so the analytic gradient
        // of sum(x * sg(x)) is x while the numeric one is 2x.
        let x = Tensor::full(&[2], 0.5);
        let rep = grad_check(
            |g, p| {
                let c = g.stop_gradient(p[0])?;
                let m = g.mul(p[0], c)?;
                g.sum(m)
            },
            &[x],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(!rep.passed());
    }
}
