use super::{Graph, ParameterStore, TensorError, Var};

/// Denominator floor for relative errors, so that gradients that are zero on
/// both sides do not divide by zero.
pub const RELATIVE_FLOOR: f64 = 1e-8;

/// Relative error of one parameter tensor: the largest elementwise deviation
/// divided by the largest gradient magnitude in that tensor.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    /// Flat index of the largest deviation.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(|p| p.max_rel_error > self.tol)
    }
}

/// `max|a − n| / max(max|a|, max|n|)` over two equally long gradient buffers.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(RELATIVE_FLOOR, |m, v| m.max(v.abs()));
    diff / scale
}

fn forward<F>(program: &F, params: &ParameterStore) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph, &ParameterStore) -> Result<Var, TensorError>,
{
    let mut g = Graph::new();
    let root = program(&mut g, params)?;
    Ok(g.value(root).data()[0])
}

/// Compare reverse-mode gradients of `program` against central differences
/// for every element of every parameter.
///
/// `program` must be deterministic in `params`; any sampling noise has to be
/// fixed outside of it.
pub fn grad_check<F>(
    program: F,
    params: &ParameterStore,
    step: f64,
    tol: f64,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Graph, &ParameterStore) -> Result<Var, TensorError>,
{
    let mut g = Graph::new();
    let root = program(&mut g, params)?;
    let first = g.value(root).data()[0];
    let analytic = g.backward(root)?.for_store(params);

    let second = forward(&program, params)?;
    if first.to_bits() != second.to_bits() {
        return Err(TensorError::NonDeterministic { first, second });
    }

    let mut probe = params.clone();
    let mut report = Vec::with_capacity(params.len());
    for (name, tensor) in params.iter() {
        let grad = analytic.get(name).expect("gradient for every parameter");
        let mut numeric = vec![0.0; tensor.len()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let original = tensor.data()[i];
            probe.get_mut(name).unwrap().data_mut()[i] = original + step;
            let plus = forward(&program, &probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = original - step;
            let minus = forward(&program, &probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = original;

            *slot = (plus - minus) / (2.0 * step);
        }
        let a = grad.data();
        let worst_index = (0..a.len())
            .max_by(|&i, &j| (a[i] - numeric[i]).abs().total_cmp(&(a[j] - numeric[j]).abs()))
            .unwrap_or(0);
        report.push(ParamCheck {
            name: name.to_string(),
            max_rel_error: relative_error(a, &numeric),
            worst_index,
            analytic: a.get(worst_index).copied().unwrap_or(0.0),
            numeric: numeric.get(worst_index).copied().unwrap_or(0.0),
        });
    }
    let passed = report.iter().all(|p| p.max_rel_error <= tol);
    Ok(GradCheckReport {
        params: report,
        tol,
        passed,
    })
}
