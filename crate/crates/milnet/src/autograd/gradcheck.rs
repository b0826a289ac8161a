use std::collections::BTreeMap;

use super::{AutogradError, Tape, Tensor, TensorId};

/// Worst relative error observed for one named tensor.
#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_error: f64,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tolerance: f64,
    pub step: f64,
}

impl GradCheckReport {
    pub fn all_pass(&self) -> bool {
        self.entries.iter().all(|e| e.pass)
    }

    pub fn worst(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_rel_error)
            .fold(0.0, f64::max)
    }
}

/// Denominator floor: below this magnitude the comparison is effectively
/// absolute, which keeps finite-difference roundoff from failing parameters
/// whose true gradient is tiny or exactly zero.
const REL_ERROR_FLOOR: f64 = 1e-3;

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Builds the loss for a set of named tensors bound onto a fresh tape. The
/// error type only needs a conversion from [`AutogradError`], so builders may
/// assemble full models with their own error enums.
pub trait LossBuilder<E = AutogradError> {
    fn build(
        &self,
        tape: &mut Tape,
        params: &BTreeMap<String, TensorId>,
    ) -> Result<TensorId, E>;
}

impl<F, E> LossBuilder<E> for F
where
    F: Fn(&mut Tape, &BTreeMap<String, TensorId>) -> Result<TensorId, E>,
{
    fn build(&self, tape: &mut Tape, params: &BTreeMap<String, TensorId>) -> Result<TensorId, E> {
        self(tape, params)
    }
}

fn eval_loss<E>(
    builder: &dyn LossBuilder<E>,
    params: &BTreeMap<String, Tensor>,
) -> Result<f64, E> {
    let mut tape = Tape::new();
    let ids = bind(&mut tape, params);
    let loss = builder.build(&mut tape, &ids)?;
    Ok(tape.item(loss))
}

fn bind(tape: &mut Tape, params: &BTreeMap<String, Tensor>) -> BTreeMap<String, TensorId> {
    params
        .iter()
        .map(|(name, tensor)| (name.clone(), tape.leaf(tensor)))
        .collect()
}

/// Compares analytic gradients against central finite differences for every
/// tensor with `requires_grad` set. Frozen tensors are absent from the report.
///
/// The builder must be deterministic: it is evaluated twice up front and a
/// disagreement is a structured error.
pub fn gradcheck<E: From<AutogradError>>(
    builder: &dyn LossBuilder<E>,
    params: &BTreeMap<String, Tensor>,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport, E> {
    gradcheck_with_corruption(builder, params, step, tolerance, None)
}

/// Same as [`gradcheck`], but optionally scales the analytic gradient of one
/// named tensor to verify that a wrong gradient rule is actually reported.
pub fn gradcheck_with_corruption<E: From<AutogradError>>(
    builder: &dyn LossBuilder<E>,
    params: &BTreeMap<String, Tensor>,
    step: f64,
    tolerance: f64,
    corrupt: Option<&str>,
) -> Result<GradCheckReport, E> {
    let first = eval_loss(builder, params)?;
    let second = eval_loss(builder, params)?;
    if first != second {
        return Err(AutogradError::NonDeterministicBuilder { first, second }.into());
    }

    // analytic gradients from one recorded backward pass
    let mut tape = Tape::new();
    let ids = bind(&mut tape, params);
    let loss = builder.build(&mut tape, &ids)?;
    tape.backward(loss)?;
    let mut analytic: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (name, tensor) in params {
        if !tensor.requires_grad() {
            continue;
        }
        let grad = tape
            .grad(ids[name])
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; tensor.numel()]);
        analytic.insert(name.clone(), grad);
    }
    if let Some(target) = corrupt {
        if let Some(g) = analytic.get_mut(target) {
            for v in g.iter_mut() {
                *v = *v * 1.5 + 1.0;
            }
        }
    }

    let mut entries = Vec::new();
    let mut scratch = params.clone();
    for (name, tensor) in params {
        if !tensor.requires_grad() {
            continue;
        }
        let grads = &analytic[name];
        let mut worst = 0.0f64;
        for i in 0..tensor.numel() {
            let original = tensor.data()[i];
            scratch.get_mut(name).unwrap().data_mut()[i] = original + step;
            let plus = eval_loss(builder, &scratch)?;
            scratch.get_mut(name).unwrap().data_mut()[i] = original - step;
            let minus = eval_loss(builder, &scratch)?;
            scratch.get_mut(name).unwrap().data_mut()[i] = original;
            let numeric = (plus - minus) / (2.0 * step);
            worst = worst.max(rel_error(grads[i], numeric));
        }
        entries.push(GradCheckEntry {
            name: name.clone(),
            max_rel_error: worst,
            pass: worst <= tolerance,
        });
    }
    Ok(GradCheckReport {
        entries,
        tolerance,
        step,
    })
}
