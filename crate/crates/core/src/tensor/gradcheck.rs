use super::{Graph, Result, Tensor, TensorError, Var};

/// Outcome of [`finite_difference_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub max_rel_err: f64,
    /// (parameter, flat coordinate) where the worst error occurred.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
}

/// Compares reverse-mode gradients of `f` against central differences.
///
/// `f` builds a scalar on a fresh graph from leaves bound to `params`. For
/// each probed coordinate the relative error is
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-12)`, and the
/// maximum is returned. `max_coords` caps the probes per parameter; the
/// probed coordinates are evenly strided, so the result is deterministic.
///
/// Central differences hide kinks, so they are detected explicitly: a
/// coordinate whose one-sided slopes disagree by an amount that does not
/// shrink when the step is halved is reported as [`TensorError::NonSmooth`].
pub fn finite_difference_check<F>(
    f: F,
    params: &[Tensor],
    eps: f64,
    max_coords: Option<usize>,
) -> Result<FdReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    finite_difference_check_floored(f, params, eps, max_coords, 1e-12)
}

/// [`finite_difference_check`] with the denominator floor set to `floor`.
///
/// On a whole network some derivatives are exactly zero (e.g. attention key
/// biases, by softmax shift invariance) or far below the rounding noise of
/// the difference quotient, about `1e-16·|f|/eps`; a floor above that noise
/// turns those coordinates into absolute-error checks.
pub fn finite_difference_check_floored<F>(
    f: F,
    params: &[Tensor],
    eps: f64,
    max_coords: Option<usize>,
    floor: f64,
) -> Result<FdReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(floor > 0.0) {
        return Err(TensorError::Invalid(format!("floor must be positive, got {floor}")));
    }
    if !(eps > 0.0) {
        return Err(TensorError::Invalid(format!("step must be positive, got {eps}")));
    }
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.constant(p.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out).item()?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(TensorError::NonFinite { op: "finite_difference_check" })
        }
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    let f0 = g.value(out).item()?;
    if !f0.is_finite() {
        return Err(TensorError::NonFinite { op: "finite_difference_check" });
    }
    let grads = g.backward(out)?;

    let mut report = FdReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        coords_checked: 0,
    };
    let mut probe: Vec<Tensor> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[pi], p.shape());
        let n = p.numel();
        let stride = match max_coords {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        for idx in (0..n).step_by(stride) {
            let orig = p.data()[idx];
            probe[pi].data_mut()[idx] = orig + eps;
            let up = eval(&probe)?;
            probe[pi].data_mut()[idx] = orig - eps;
            let down = eval(&probe)?;
            probe[pi].data_mut()[idx] = orig;

            // One-sided slopes differ by about f''·ε on smooth functions but
            // by a step-independent jump at a kink; halving ε tells them apart.
            let gap = (up - f0) / eps - (f0 - down) / eps;
            let scale = ((up - down) / (2.0 * eps)).abs().max(1.0);
            if gap.abs() > 1e-6 * scale {
                let h = eps / 2.0;
                probe[pi].data_mut()[idx] = orig + h;
                let up_h = eval(&probe)?;
                probe[pi].data_mut()[idx] = orig - h;
                let down_h = eval(&probe)?;
                probe[pi].data_mut()[idx] = orig;
                let gap_h = (up_h - f0) / h - (f0 - down_h) / h;
                if gap_h.abs() > 0.75 * gap.abs() {
                    return Err(TensorError::NonSmooth { param: pi, index: idx });
                }
            }
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.data()[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            report.coords_checked += 1;
            if rel > report.max_rel_err || report.coords_checked == 1 {
                report.max_rel_err = rel;
                report.worst = (pi, idx);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
