use crate::data::Example;
use crate::error::{Error, Result};
use crate::model::{Architecture, Model};

/// Routes paired examples to `fusion` and image-missing ones to `unimodal`,
/// returning predictions in input order.
pub fn ensemble_predict(unimodal: &Model, fusion: &Model, batch: &[Example]) -> Result<Vec<Vec<f64>>> {
    if unimodal.spec.task != fusion.spec.task {
        return Err(Error::invalid(format!(
            "ensemble members predict different tasks: {:?} vs {:?}",
            unimodal.spec.task, fusion.spec.task
        )));
    }
    if unimodal.architecture() != Architecture::LstmUni {
        return Err(Error::invalid("the uni-modal member must be the time-series model"));
    }
    let (paired, missing): (Vec<usize>, Vec<usize>) = (0..batch.len()).partition(|&i| batch[i].image.is_some());
    let mut out = vec![Vec::new(); batch.len()];
    for (rows, model) in [(paired, fusion), (missing, unimodal)] {
        if rows.is_empty() {
            continue;
        }
        let sub: Vec<Example> = rows.iter().map(|&i| batch[i].clone()).collect();
        for (row, pred) in rows.into_iter().zip(model.predict(&sub)?) {
            out[row] = pred;
        }
    }
    Ok(out)
}
