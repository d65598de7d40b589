//! Centered finite-difference gradient checking. This is the independent
//! oracle every analytic backward formula is held against: perturb one
//! parameter entry by ±step, re-evaluate the loss, and compare the secant
//! slope with the tape's gradient.

use super::Tensor;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `name[index]` of the worst entry.
    pub worst: String,
    pub entries_checked: usize,
}

/// Check `analytic` (one tensor per parameter, same order as `params`)
/// against centered differences of `loss_fn`. Relative error per entry is
/// `|fd - an| / (|fd| + |an| + 1e-12)`; the report carries the worst one.
///
/// `loss_fn` sees the full parameter list and must be deterministic; any
/// stochastic pieces of the loss (e.g. random relabeling draws) have to be
/// frozen by the caller before checking.
pub fn grad_check<F>(
    names: &[&str],
    params: &[Tensor],
    analytic: &[Tensor],
    step: f64,
    mut loss_fn: F,
) -> Result<GradCheckReport, String>
where
    F: FnMut(&[Tensor]) -> Result<f64, String>,
{
    if names.len() != params.len() || params.len() != analytic.len() {
        return Err(format!(
            "grad_check: {} names, {} params, {} grads",
            names.len(),
            params.len(),
            analytic.len()
        ));
    }
    let mut work: Vec<Tensor> = params.to_vec();
    let mut max_rel = 0.0f64;
    let mut worst = String::from("-");
    let mut checked = 0usize;
    for (pi, name) in names.iter().enumerate() {
        if params[pi].shape() != analytic[pi].shape() {
            return Err(format!(
                "grad_check: {} shape {:?} vs grad shape {:?}",
                name,
                params[pi].shape(),
                analytic[pi].shape()
            ));
        }
        for ei in 0..params[pi].numel() {
            let orig = params[pi].data()[ei];
            work[pi].data_mut()[ei] = orig + step;
            let up = loss_fn(&work)?;
            work[pi].data_mut()[ei] = orig - step;
            let down = loss_fn(&work)?;
            work[pi].data_mut()[ei] = orig;
            let fd = (up - down) / (2.0 * step);
            let an = analytic[pi].data()[ei];
            let rel = (fd - an).abs() / (fd.abs() + an.abs() + 1e-12);
            if rel > max_rel {
                max_rel = rel;
                worst = format!("{name}[{ei}]");
            }
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_err: max_rel,
        worst,
        entries_checked: checked,
    })
}
