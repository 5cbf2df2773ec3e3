//! Central finite-difference verification of analytic gradients.
//!
//! The harness is generic over the scalar type but is meant to run at `f64`:
//! cast an `f32` net with `ParamSet::cast`, check there, and the result
//! vouches for the shared generic code path.

use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::params::ParamSet;
use crate::scalar::Scalar;

/// One offending (or worst-ranked) parameter element.
#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tol: f64,
    pub max_rel_err: f64,
    pub passed: bool,
    /// Worst entries, highest relative error first (capped at 10).
    pub worst: Vec<GradCheckEntry>,
    pub n_elements: usize,
}

impl GradCheckReport {
    pub fn summary(&self) -> String {
        let status = if self.passed { "PASS" } else { "FAIL" };
        let mut s = format!(
            "[{status}] gradient check: max rel err {:.3e} over {} elements (tol {:.1e})",
            self.max_rel_err, self.n_elements, self.tol
        );
        if !self.passed {
            for e in self.worst.iter().take(3) {
                s.push_str(&format!(
                    "\n  {}[{}]: analytic {:.6e} vs numeric {:.6e} (rel {:.3e})",
                    e.param, e.index, e.analytic, e.numeric, e.rel_err
                ));
            }
        }
        s
    }
}

/// Denominator floor: gradients below this magnitude are compared on an
/// absolute scale of `tol * floor`, which matches the truncation error of
/// central differences at eps ~ 1e-3.
const REL_FLOOR: f64 = 1e-3;

/// Backward-pass gradients, one flat `f64` vector per parameter slot.
pub fn analytic_grads<S, F>(params: &mut ParamSet<S>, loss_fn: &F) -> Result<Vec<Vec<f64>>>
where
    S: Scalar,
    F: Fn(&mut Graph<S>, &ParamSet<S>) -> Result<NodeId>,
{
    params.zero_grad();
    let mut graph = Graph::new();
    let loss = loss_fn(&mut graph, params)?;
    graph.backward(loss, params)?;
    let mut out = Vec::with_capacity(params.len());
    for slot in 0..params.len() {
        let t = params.get(slot);
        let g = t
            .grad()
            .map(|g| g.iter().map(|v| v.to_f64_lossy()).collect())
            .unwrap_or_else(|| vec![0.0; t.numel()]);
        out.push(g);
    }
    Ok(out)
}

/// Central differences `(f(x+eps) - f(x-eps)) / (2 eps)` per element.
pub fn numeric_grads<S, F>(params: &mut ParamSet<S>, loss_fn: &F, eps: f64) -> Result<Vec<Vec<f64>>>
where
    S: Scalar,
    F: Fn(&mut Graph<S>, &ParamSet<S>) -> Result<NodeId>,
{
    let eval = |params: &ParamSet<S>, loss_fn: &F| -> Result<f64> {
        let mut graph = Graph::new();
        let loss = loss_fn(&mut graph, params)?;
        Ok(graph.value(loss).item().to_f64_lossy())
    };
    let h = S::from_f64_lossy(eps);
    let mut out = Vec::with_capacity(params.len());
    for slot in 0..params.len() {
        let n = params.get(slot).numel();
        let mut g = vec![0.0f64; n];
        for i in 0..n {
            let orig = params.get(slot).data()[i];
            params.get_mut(slot).data_mut()[i] = orig + h;
            let f_plus = eval(params, loss_fn)?;
            params.get_mut(slot).data_mut()[i] = orig - h;
            let f_minus = eval(params, loss_fn)?;
            params.get_mut(slot).data_mut()[i] = orig;
            g[i] = (f_plus - f_minus) / (2.0 * eps);
        }
        out.push(g);
    }
    Ok(out)
}

/// Rank analytic-vs-numeric disagreement. `names` must parallel the grids.
pub fn compare_grads(
    names: &[String],
    analytic: &[Vec<f64>],
    numeric: &[Vec<f64>],
    tol: f64,
) -> GradCheckReport {
    let mut entries: Vec<GradCheckEntry> = Vec::new();
    let mut n_elements = 0usize;
    for (slot, name) in names.iter().enumerate() {
        for (i, (&a, &n)) in analytic[slot].iter().zip(&numeric[slot]).enumerate() {
            n_elements += 1;
            let denom = a.abs().max(n.abs()).max(REL_FLOOR);
            let rel = (a - n).abs() / denom;
            entries.push(GradCheckEntry {
                param: name.clone(),
                index: i,
                analytic: a,
                numeric: n,
                rel_err: rel,
            });
        }
    }
    entries.sort_by(|x, y| y.rel_err.total_cmp(&x.rel_err));
    let max_rel_err = entries.first().map(|e| e.rel_err).unwrap_or(0.0);
    entries.truncate(10);
    GradCheckReport {
        tol,
        max_rel_err,
        passed: max_rel_err <= tol,
        worst: entries,
        n_elements,
    }
}

/// Full check: analytic backward vs central differences for every parameter
/// element, using the provided deterministic loss builder.
pub fn gradient_check<S, F>(
    params: &mut ParamSet<S>,
    loss_fn: F,
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    S: Scalar,
    F: Fn(&mut Graph<S>, &ParamSet<S>) -> Result<NodeId>,
{
    let analytic = analytic_grads(params, &loss_fn)?;
    let numeric = numeric_grads(params, &loss_fn, eps)?;
    let names: Vec<String> = (0..params.len())
        .map(|s| params.name(s).to_string())
        .collect();
    Ok(compare_grads(&names, &analytic, &numeric, tol))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn linear_loss_gradient_is_exact() {
        // loss = w . x  =>  dloss/dw = x exactly.
        let mut params = ParamSet::<f64>::new();
        params.add("w", Tensor::new(&[1, 3], vec![0.2, -0.4, 1.0]).unwrap());
        let x = vec![1.5, -2.0, 0.25];
        let report = gradient_check(
            &mut params,
            move |g, p| {
                let w = g.param(p, 0);
                let xn = g.input(Tensor::new(&[3, 1], x.clone()).unwrap());
                let y = g.matmul(w, xn)?;
                Ok(g.sum_all(y))
            },
            1e-3,
            1e-6,
        )
        .unwrap();
        assert!(report.passed, "{}", report.summary());
    }

    #[test]
    fn corrupted_gradient_fails_and_names_parameter() {
        let mut params = ParamSet::<f64>::new();
        params.add("w", Tensor::new(&[1, 2], vec![0.5, -0.5]).unwrap());
        let loss_fn = |g: &mut Graph<f64>, p: &ParamSet<f64>| {
            let w = g.param(p, 0);
            let sq = g.square(w);
            Ok(g.sum_all(sq))
        };
        let mut analytic = analytic_grads(&mut params, &loss_fn).unwrap();
        analytic[0][1] *= 2.0;
        let numeric = numeric_grads(&mut params, &loss_fn, 1e-3).unwrap();
        let report = compare_grads(&["w".to_string()], &analytic, &numeric, 1e-3);
        assert!(!report.passed);
        assert_eq!(report.worst[0].param, "w");
        assert_eq!(report.worst[0].index, 1);
    }

    #[test]
    fn random_matmul_gradients_match_finite_differences() {
        // 4x5 by 5x3 product under a weighted sum, seeds 0..10.
        use rand::{Rng, SeedableRng};
        for seed in 0..10u64 {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let a: Vec<f64> = (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let wsum: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut params = ParamSet::<f64>::new();
            params.add("a", Tensor::new(&[4, 5], a).unwrap());
            params.add("b", Tensor::new(&[5, 3], b).unwrap());
            let report = gradient_check(
                &mut params,
                move |g, p| {
                    let a = g.param(p, 0);
                    let b = g.param(p, 1);
                    let c = g.matmul(a, b)?;
                    let w = g.input(Tensor::new(&[4, 3], wsum.clone()).unwrap());
                    let cw = g.mul(c, w)?;
                    Ok(g.sum_all(cw))
                },
                1e-3,
                1e-3,
            )
            .unwrap();
            assert!(report.passed, "seed {seed}: {}", report.summary());
        }
    }
}
