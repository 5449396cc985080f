use super::{Tape, Tensor, TensorError, Var};

/// Worst disagreement found by [`grad_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// `max |analytic - numeric| / max(1, |analytic|)` over all components.
    pub max_rel_error: f64,
    pub leaf: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Number of scalar components compared.
    pub checked: usize,
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences `(f(x+h) - f(x-h)) / 2h`, one leaf component at a time.
pub fn grad_check<F, E>(f: F, leaves: &[Tensor], h: f64) -> Result<GradCheck, E>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    let mut tape = Tape::new();
    let vars = leaves
        .iter()
        .map(|t| tape.leaf(t.clone(), true))
        .collect::<Result<Vec<_>, _>>()?;
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_default())
        .collect();

    let eval = |inputs: &[Tensor]| -> Result<f64, E> {
        let mut tape = Tape::new();
        let vars = inputs
            .iter()
            .map(|t| tape.constant(t.clone()))
            .collect::<Result<Vec<_>, _>>()?;
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut report = GradCheck {
        max_rel_error: 0.0,
        leaf: 0,
        index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut work = leaves.to_vec();
    for (l, leaf) in leaves.iter().enumerate() {
        for i in 0..leaf.numel() {
            let x = leaf.data()[i];
            work[l].data_mut()[i] = x + h;
            let up = eval(&work)?;
            work[l].data_mut()[i] = x - h;
            let down = eval(&work)?;
            work[l].data_mut()[i] = x;

            let numeric = (up - down) / (2.0 * h);
            let a = analytic[l][i];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            report.checked += 1;
            if err > report.max_rel_error || report.checked == 1 {
                report = GradCheck {
                    max_rel_error: err,
                    leaf: l,
                    index: i,
                    analytic: a,
                    numeric,
                    checked: report.checked,
                };
            }
        }
    }
    Ok(report)
}
