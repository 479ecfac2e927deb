use super::{ParamId, ParamStore, Tape, TensorError, Var};
use crate::scalar::Scalar;

/// Outcome of comparing analytic gradients with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport<T> {
    /// `max |analytic - numeric| / max(1e-8, |numeric|)` over every checked entry.
    pub max_rel_error: T,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub entries_checked: usize,
}

const DENOM_FLOOR: f64 = 1e-8;

/// Checks every parameter of `store` for the scalar-valued `f`.
///
/// `f` must rebuild the full computation on the tape it is handed; it is
/// called once for the analytic pass and twice per parameter entry.
pub fn grad_check<T, F>(store: &mut ParamStore<T>, eps: T, f: F) -> Result<GradCheckReport<T>, TensorError>
where
    T: Scalar,
    F: for<'a> Fn(&mut Tape<'a, T>) -> Result<Var, TensorError>,
{
    let ids: Vec<ParamId> = store.ids().collect();
    grad_check_params(store, &ids, eps, f)
}

/// Like [`grad_check`] restricted to the listed parameters.
pub fn grad_check_params<T, F>(
    store: &mut ParamStore<T>,
    ids: &[ParamId],
    eps: T,
    f: F,
) -> Result<GradCheckReport<T>, TensorError>
where
    T: Scalar,
    F: for<'a> Fn(&mut Tape<'a, T>) -> Result<Var, TensorError>,
{
    let analytic = {
        let mut tape = Tape::new(store);
        let out = f(&mut tape)?;
        check_finite(tape.scalar(out), "objective")?;
        tape.backward(out)?
    };

    let eval = |store: &ParamStore<T>| -> Result<T, TensorError> {
        let mut tape = Tape::new(store);
        let out = f(&mut tape)?;
        let v = tape.scalar(out);
        check_finite(v, "perturbed objective")?;
        Ok(v)
    };

    let floor = T::lit(DENOM_FLOOR);
    let two_eps = eps + eps;
    let mut report = GradCheckReport {
        max_rel_error: T::zero(),
        worst: None,
        entries_checked: 0,
    };
    for &id in ids {
        let len = store.get(id).len();
        for flat in 0..len {
            let orig = *flat_mut(store, id, flat);
            *flat_mut(store, id, flat) = orig + eps;
            let plus = eval(store)?;
            *flat_mut(store, id, flat) = orig - eps;
            let minus = eval(store)?;
            *flat_mut(store, id, flat) = orig;

            let numeric = (plus - minus) / two_eps;
            let exact = analytic
                .get(id)
                .map(|g| g[[flat / g.ncols(), flat % g.ncols()]])
                .unwrap_or_else(T::zero);
            check_finite(exact, "analytic gradient")?;
            let rel = (exact - numeric).abs() / numeric.abs().max(floor);
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel.max(report.max_rel_error);
                report.worst = Some((store.get(id).name.clone(), flat));
            }
            report.entries_checked += 1;
        }
    }
    Ok(report)
}

fn flat_mut<T: Scalar>(store: &mut ParamStore<T>, id: ParamId, flat: usize) -> &mut T {
    let data = &mut store.get_mut(id).data;
    let cols = data.ncols();
    &mut data[[flat / cols, flat % cols]]
}

fn check_finite<T: Scalar>(v: T, what: &str) -> Result<(), TensorError> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(TensorError::NonFinite(format!("{what} = {v}")))
    }
}
