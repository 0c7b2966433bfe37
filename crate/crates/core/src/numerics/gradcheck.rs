use rand::seq::IndexedRandom;
use rand::Rng;

use super::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::stream;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    /// Analytic and numeric derivative at the worst coordinate.
    pub worst_values: (f64, f64),
    pub loss: f64,
}

/// Relative error used for gradient checks.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares analytic gradients against central finite differences.
///
/// At least one coordinate of every parameter is checked; the remainder of
/// `coords` is sampled uniformly over all coordinates. `loss_fn` must be
/// deterministic and bind parameters through the tape it is given.
pub fn grad_check<F>(
    params: &ParamStore,
    epsilon: f64,
    coords: usize,
    seed: u64,
    loss_fn: F,
) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &ParamStore) -> Result<Var>,
{
    if epsilon <= 0.0 {
        return Err(Error::invalid("epsilon must be positive"));
    }
    let tape = Tape::new();
    let loss = loss_fn(&tape, params)?;
    let loss_value = tape.scalar_value(loss);
    if !loss_value.is_finite() {
        return Err(Error::NonFinite(format!("loss {loss_value}")));
    }
    let grads = tape.backward(loss)?;

    let mut rng = stream(seed, &[0x6772_6164]);
    let mut picks: Vec<(ParamId, usize)> = params
        .ids()
        .map(|id| (id, rng.random_range(0..params.get(id).numel())))
        .collect();
    let all: Vec<(ParamId, usize)> = params
        .ids()
        .flat_map(|id| (0..params.get(id).numel()).map(move |j| (id, j)))
        .collect();
    let extra = coords.saturating_sub(picks.len());
    picks.extend(all.choose_multiple(&mut rng, extra.min(all.len())).copied());

    let eval = |p: &ParamStore| -> Result<f64> {
        let tape = Tape::inference();
        let v = loss_fn(&tape, p)?;
        let x = tape.scalar_value(v);
        if !x.is_finite() {
            return Err(Error::NonFinite(format!("perturbed loss {x}")));
        }
        Ok(x)
    };

    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coords_checked: 0,
        worst: None,
        worst_values: (0.0, 0.0),
        loss: loss_value,
    };
    for (id, j) in picks {
        let orig = work.get(id).data()[j];
        work.get_mut(id).data_mut()[j] = orig + epsilon;
        let plus = eval(&work)?;
        work.get_mut(id).data_mut()[j] = orig - epsilon;
        let minus = eval(&work)?;
        work.get_mut(id).data_mut()[j] = orig;

        let numeric = (plus - minus) / (2.0 * epsilon);
        let analytic = grads.param(id).map(|g| g.data()[j]).unwrap_or(0.0);
        let err = relative_error(analytic, numeric);
        report.coords_checked += 1;
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = err;
            report.worst = Some((params.name(id).to_string(), j));
            report.worst_values = (analytic, numeric);
        }
    }
    Ok(report)
}
