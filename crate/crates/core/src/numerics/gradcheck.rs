use super::{Graph, NumericsError, Result, Tensor, Var};

/// Compares reverse-mode gradients of a scalar function against central
/// differences and returns the largest relative error
/// `|analytic - numeric| / (|analytic| + 1e-8)` over all coordinates.
pub fn finite_diff_check<F>(f: F, point: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    finite_diff_check_many(
        |g: &mut Graph, vars: &[Var]| f(g, vars[0]),
        std::slice::from_ref(point),
        h,
    )
}

/// Multi-input form of [`finite_diff_check`]; every input is perturbed.
pub fn finite_diff_check_many<F>(f: F, points: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(h.is_finite() && h > 0.0) {
        return Err(NumericsError::InvalidArgument(format!(
            "finite difference step must be positive and finite, got {h}"
        )));
    }
    let eval = |pts: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = pts.iter().map(|p| g.constant(p.clone())).collect();
        let out = f(&mut g, &vars)?;
        g.value(out).item()
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = points.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(points)
        .map(|(&v, p)| g.grad(v).map_or_else(|| vec![0.0; p.len()], <[f64]>::to_vec))
        .collect();

    let mut worst = 0.0f64;
    let mut pts = points.to_vec();
    for (i, grads) in analytic.iter().enumerate() {
        for (j, &a) in grads.iter().enumerate() {
            let orig = pts[i].data()[j];
            pts[i].data_mut()[j] = orig + h;
            let plus = eval(&pts)?;
            pts[i].data_mut()[j] = orig - h;
            let minus = eval(&pts)?;
            pts[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let rel = (a - numeric).abs() / (a.abs() + 1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
