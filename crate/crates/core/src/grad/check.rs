use super::params::ParamStore;
use super::tape::{Tape, Var};
use super::GradError;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

/// Error between an analytic and a numeric derivative, relative to the larger
/// magnitude with a floor of one so that near-zero gradients are compared
/// absolutely.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

fn eval<F>(f: &F, point: &ParamStore<f64>) -> Result<f64, GradError>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, GradError>,
{
    let mut tape = Tape::new();
    let vars = point.bind(&mut tape);
    let loss = f(&mut tape, &vars)?;
    Ok(tape.value(loss).item())
}

/// Compares backprop gradients against central differences
/// `(f(x+eps) - f(x-eps)) / (2 eps)` for every element of every parameter.
pub fn grad_check<F>(f: F, point: &ParamStore<f64>, eps: f64, tol: f64) -> Result<GradCheckReport, GradError>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, GradError>,
{
    let mut tape = Tape::new();
    let vars = point.bind(&mut tape);
    let loss = f(&mut tape, &vars)?;
    let first = tape.value(loss).item();
    let second = eval(&f, point)?;
    if first.to_bits() != second.to_bits() {
        return Err(GradError::NonDeterministic { first, second });
    }
    let grads = tape.backward(loss)?;

    let mut probe = point.clone();
    let mut params = Vec::with_capacity(point.len());
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var);
        let mut worst = ParamCheck {
            name: point.iter().nth(pi).map(|p| p.name.clone()).unwrap_or_default(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        let id = point.id(&worst.name)?;
        for i in 0..analytic.numel() {
            let orig = point.get(id).value.data()[i];
            probe.get_mut(id).value.data_mut()[i] = orig + eps;
            let up = eval(&f, &probe)?;
            probe.get_mut(id).value.data_mut()[i] = orig - eps;
            let down = eval(&f, &probe)?;
            probe.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.data()[i];
            let err = relative_error(a, numeric);
            if err > worst.max_rel_err || i == 0 {
                worst.max_rel_err = err;
                worst.worst_index = i;
                worst.analytic = a;
                worst.numeric = numeric;
            }
        }
        params.push(worst);
    }
    let max_rel_err = params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport { params, max_rel_err, tol })
}
