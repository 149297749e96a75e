use crate::autograd::Tensor;
use crate::config::{Task, RADIOLOGY_LABELS};
use crate::error::{Error, Result};

/// One sample with a time series, an optional image and task labels.
///
/// The pairing flag is derived from the presence of the image, so the two
/// can never disagree.
#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalInstance {
    pub instance_id: String,
    pub subject_id: String,
    pub task: Task,
    /// `T×76` discretized time series.
    pub x_ehr: Tensor,
    /// `C×H×W` image.
    pub x_cxr: Option<Tensor>,
    pub y_task: Vec<f64>,
    pub y_cxr: Option<Vec<f64>>,
    pub age: Option<f64>,
}

impl MultimodalInstance {
    pub fn is_paired(&self) -> bool {
        self.x_cxr.is_some()
    }

    pub fn steps(&self) -> usize {
        self.x_ehr.shape()[0]
    }

    /// The same instance with its image removed.
    pub fn without_image(&self) -> Self {
        MultimodalInstance {
            x_cxr: None,
            y_cxr: None,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.x_ehr.shape();
        if s.len() != 2 {
            return Err(Error::invalid(format!(
                "instance {}: time series must be T×F, got {s:?}",
                self.instance_id
            )));
        }
        if self.y_task.len() != self.task.label_count() {
            return Err(Error::invalid(format!(
                "instance {}: {} labels for task {} (expected {})",
                self.instance_id,
                self.y_task.len(),
                self.task.name(),
                self.task.label_count()
            )));
        }
        if let Some(img) = &self.x_cxr {
            if img.shape().len() != 3 {
                return Err(Error::invalid(format!(
                    "instance {}: image must be C×H×W, got {:?}",
                    self.instance_id,
                    img.shape()
                )));
            }
        }
        if self.y_cxr.is_some() && self.x_cxr.is_none() {
            return Err(Error::invalid(format!(
                "instance {}: radiology labels without an image",
                self.instance_id
            )));
        }
        Ok(())
    }
}

/// Image-only sample used to pretrain the image encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct CxrSample {
    pub sample_id: String,
    pub subject_id: String,
    pub image: Tensor,
    pub labels: Vec<f64>,
}

impl CxrSample {
    pub fn from_instance(inst: &MultimodalInstance) -> Option<Self> {
        Some(CxrSample {
            sample_id: inst.instance_id.clone(),
            subject_id: inst.subject_id.clone(),
            image: inst.x_cxr.clone()?,
            labels: inst.y_cxr.clone()?,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.len() != RADIOLOGY_LABELS {
            return Err(Error::invalid(format!(
                "image sample {}: {} radiology labels, expected {RADIOLOGY_LABELS}",
                self.sample_id,
                self.labels.len()
            )));
        }
        Ok(())
    }
}

/// Replicates a single-channel `H×W` or `1×H×W` image across three channels.
pub fn replicate_channels(gray: &Tensor) -> Result<Tensor> {
    let (h, w) = match gray.shape() {
        [h, w] | [1, h, w] => (*h, *w),
        s => {
            return Err(Error::dim(format!(
                "channel replication expects H×W or 1×H×W, got {s:?}"
            )))
        }
    };
    let mut data = Vec::with_capacity(3 * h * w);
    for _ in 0..3 {
        data.extend_from_slice(gray.data());
    }
    Tensor::new([3, h, w], data)
}

/// Model-facing view of one sample: whichever inputs exist plus the targets
/// the current stage trains on.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    /// `T×76` time series.
    pub ehr: Option<Tensor>,
    /// `C×H×W` image, already resized/augmented for the encoder.
    pub image: Option<Tensor>,
    pub targets: Vec<f64>,
}

impl Example {
    /// Targets are the task labels, for both uni-modal and fusion training.
    pub fn from_instance(inst: &MultimodalInstance) -> Self {
        Example {
            id: inst.instance_id.clone(),
            ehr: Some(inst.x_ehr.clone()),
            image: inst.x_cxr.clone(),
            targets: inst.y_task.clone(),
        }
    }

    pub fn from_cxr(sample: &CxrSample) -> Self {
        Example {
            id: sample.sample_id.clone(),
            ehr: None,
            image: Some(sample.image.clone()),
            targets: sample.labels.clone(),
        }
    }

    pub fn is_paired(&self) -> bool {
        self.ehr.is_some() && self.image.is_some()
    }
}
