//! Finite-difference verification of analytic gradients.
//!
//! The checker perturbs a random subsample of parameter coordinates and
//! compares central differences of the scalar loss against the supplied
//! analytic gradient. It only ever calls the forward closure, so it stays
//! independent of whatever backward path produced the analytic values.

use crate::error::{Error, Result};
use crate::rng::Rng;

use super::store::{Gradients, ParamStore};

pub const FD_STEP: f64 = 1e-4;

/// Floor for the relative-error denominator; keeps near-zero gradient
/// coordinates from drowning the report in roundoff noise.
const DENOM_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradientCheckResult {
    pub max_relative_error: f64,
    pub worst_parameter: String,
    pub coords_checked: usize,
}

/// Compares `analytic` against central finite differences of `loss_fn`,
/// sampling at least `min_coords` coordinates (all of them if the store is
/// smaller).
pub fn gradient_check<F>(
    store: &ParamStore,
    analytic: &Gradients,
    loss_fn: F,
    rng: &mut Rng,
    min_coords: usize,
) -> Result<GradientCheckResult>
where
    F: Fn(&ParamStore) -> Result<f64>,
{
    let base = loss_fn(store)?;
    if !base.is_finite() {
        return Err(Error::Numeric("gradient_check: non-finite loss".into()));
    }

    // Flat index space over all parameters, in name order.
    let names: Vec<String> = store.names().map(|s| s.to_string()).collect();
    let sizes: Vec<usize> = names.iter().map(|n| store.raw(n).len()).collect();
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return Err(Error::Shape("gradient_check: empty store".into()));
    }
    let n_check = min_coords.max(50).min(total);
    let picks = rng.sample_distinct(total, n_check);

    let mut max_rel = 0.0_f64;
    let mut worst = names[0].clone();
    for flat in picks {
        let (name, offset) = locate(&names, &sizes, flat);
        let a = analytic
            .get(&name)
            .ok_or_else(|| Error::Shape(format!("gradient_check: no gradient for {name}")))?
            [offset];

        let mut perturbed = store.clone();
        perturbed.raw_mut(&name)[offset] += FD_STEP;
        let up = loss_fn(&perturbed)?;
        perturbed.raw_mut(&name)[offset] -= 2.0 * FD_STEP;
        let down = loss_fn(&perturbed)?;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Numeric("gradient_check: non-finite loss".into()));
        }
        let fd = (up - down) / (2.0 * FD_STEP);

        let rel = (a - fd).abs() / fd.abs().max(DENOM_FLOOR);
        if rel > max_rel {
            max_rel = rel;
            worst = format!("{name}[{offset}]");
        }
    }

    Ok(GradientCheckResult {
        max_relative_error: max_rel,
        worst_parameter: worst,
        coords_checked: n_check,
    })
}

fn locate(names: &[String], sizes: &[usize], mut flat: usize) -> (String, usize) {
    for (name, &size) in names.iter().zip(sizes) {
        if flat < size {
            return (name.clone(), flat);
        }
        flat -= size;
    }
    unreachable!("flat index out of range")
}
