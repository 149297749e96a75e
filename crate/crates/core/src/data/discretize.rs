//! Regular two-hour resampling of irregular clinical events into fixed-width rows.

use super::registry::{VariableKind, VariableRegistry};
use crate::autograd::Tensor;
use crate::error::{Error, Result};

pub const BIN_HOURS: f64 = 2.0;

#[derive(Clone, Debug, PartialEq)]
pub enum EventValue {
    Numeric(f64),
    /// Index into the variable's category list.
    Category(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Event {
    /// Hours since ICU admission.
    pub time: f64,
    /// Index into the registry.
    pub variable: usize,
    pub value: EventValue,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RawTimeSeries {
    pub events: Vec<Event>,
}

/// Discretizes `raw` into `T×width` rows, one per two-hour bin.
///
/// `T = ⌈horizon/2⌉` when a horizon is given (events at or after it are
/// ignored), otherwise enough bins to cover the last event. Each row holds the
/// last value seen so far for every variable, falling back to the registry
/// normal value, followed by one mask bit per variable that is 1 once the
/// variable has been observed.
pub fn discretize(
    raw: &RawTimeSeries,
    horizon_hours: Option<f64>,
    registry: &VariableRegistry,
) -> Result<Tensor> {
    for e in &raw.events {
        if !e.time.is_finite() || e.time < 0.0 {
            return Err(Error::invalid(format!(
                "event time {} must be finite and non-negative",
                e.time
            )));
        }
        let var = registry.variables.get(e.variable).ok_or_else(|| {
            Error::invalid(format!("variable index {} not in registry", e.variable))
        })?;
        match (&var.kind, &e.value) {
            (VariableKind::Continuous { .. }, EventValue::Numeric(v)) if v.is_finite() => {}
            (VariableKind::Categorical { categories, .. }, EventValue::Category(c))
                if *c < categories.len() => {}
            _ => {
                return Err(Error::invalid(format!(
                    "value {:?} is not valid for `{}`",
                    e.value, var.name
                )))
            }
        }
    }

    let steps = match horizon_hours {
        Some(h) if h > 0.0 && h.is_finite() => (h / BIN_HOURS).ceil() as usize,
        Some(h) => return Err(Error::invalid(format!("horizon {h} must be positive"))),
        None => {
            let last = raw.events.iter().map(|e| e.time).fold(0.0, f64::max);
            (last / BIN_HOURS).floor() as usize + 1
        }
    };

    let mut order: Vec<&Event> = raw
        .events
        .iter()
        .filter(|e| horizon_hours.is_none_or(|h| e.time < h))
        .collect();
    order.sort_by(|a, b| a.time.total_cmp(&b.time));

    let mut current: Vec<Option<&EventValue>> = vec![None; registry.len()];
    let width = registry.width;
    let mut data = vec![0.0; steps * width];
    let mut next = 0;
    for bin in 0..steps {
        let end = (bin + 1) as f64 * BIN_HOURS;
        while next < order.len() && order[next].time < end {
            current[order[next].variable] = Some(&order[next].value);
            next += 1;
        }
        let row = &mut data[bin * width..(bin + 1) * width];
        for (var, seen) in registry.variables.iter().zip(&current) {
            match &var.kind {
                VariableKind::Continuous { normal, mean, std } => {
                    let v = match seen {
                        Some(EventValue::Numeric(v)) => *v,
                        _ => *normal,
                    };
                    row[var.columns.start] = (v - mean) / std;
                }
                VariableKind::Categorical { normal, .. } => {
                    let c = match seen {
                        Some(EventValue::Category(c)) => *c,
                        _ => *normal,
                    };
                    row[var.columns.start + c] = 1.0;
                }
            }
            row[var.mask_column] = if seen.is_some() { 1.0 } else { 0.0 };
        }
    }
    Tensor::new([steps, width], data)
}
