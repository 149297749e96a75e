//! Dataset directories: `dataset.json` plus one sub-directory per split with
//! binary records (`instances.bin`) and a CSV manifest.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::instance::{CxrSample, MultimodalInstance};
use super::split::{DatasetSplit, SplitFractions, SplitName};
use super::synthetic::SyntheticConfig;
use crate::autograd::Tensor;
use crate::bytes::{ByteReader, ByteWriter};
use crate::config::Task;
use crate::error::{Error, Result};

pub const DATASET_MAGIC: &[u8; 5] = b"MFDS1";
pub const META_FILE: &str = "dataset.json";
pub const RECORDS_FILE: &str = "instances.bin";
pub const MANIFEST_FILE: &str = "manifest.csv";

const KIND_INSTANCE: u8 = 0;
const KIND_IMAGE_ONLY: u8 = 1;
const NO_TASK: u8 = 255;
const FLAG_IMAGE: u8 = 1;
const FLAG_RADIOLOGY: u8 = 2;
const FLAG_AGE: u8 = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub instances: usize,
    pub paired: usize,
    pub image_only: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub format_version: u32,
    pub task: Task,
    pub registry_hash: String,
    pub fractions: SplitFractions,
    pub train: SplitCounts,
    pub val: SplitCounts,
    pub test: SplitCounts,
    #[serde(default)]
    pub synthetic: Option<SyntheticConfig>,
}

fn counts(split: &DatasetSplit, name: SplitName) -> SplitCounts {
    let part = split.part(name);
    SplitCounts {
        instances: part.len(),
        paired: part.iter().filter(|i| i.is_paired()).count(),
        image_only: split.cxr_only(name).len(),
    }
}

/// Writes `split` under `dir`, creating it if needed.
pub fn save_dataset(
    dir: &Path,
    split: &DatasetSplit,
    task: Task,
    registry_hash: &str,
    synthetic: Option<&SyntheticConfig>,
) -> Result<DatasetMeta> {
    fs::create_dir_all(dir)?;
    let meta = DatasetMeta {
        format_version: 1,
        task,
        registry_hash: registry_hash.to_string(),
        fractions: split.fractions,
        train: counts(split, SplitName::Train),
        val: counts(split, SplitName::Val),
        test: counts(split, SplitName::Test),
        synthetic: synthetic.cloned(),
    };
    for name in SplitName::ALL {
        let sub = dir.join(name.as_str());
        fs::create_dir_all(&sub)?;
        fs::write(sub.join(RECORDS_FILE), encode_records(split.part(name), split.cxr_only(name)))?;
        fs::write(sub.join(MANIFEST_FILE), manifest(split.part(name)))?;
    }
    fs::write(dir.join(META_FILE), serde_json::to_string_pretty(&meta)? + "\n")?;
    Ok(meta)
}

pub fn load_meta(dir: &Path) -> Result<DatasetMeta> {
    let path = dir.join(META_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io_at(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
}

pub fn load_dataset(dir: &Path) -> Result<(DatasetMeta, DatasetSplit)> {
    let meta = load_meta(dir)?;
    let mut split = DatasetSplit {
        fractions: meta.fractions,
        ..Default::default()
    };
    for name in SplitName::ALL {
        let path = dir.join(name.as_str()).join(RECORDS_FILE);
        let bytes = fs::read(&path).map_err(|e| Error::io_at(&path, e))?;
        let (instances, images) = decode_records(&bytes, &path)?;
        if let Some(bad) = instances.iter().find(|i| i.task != meta.task) {
            return Err(Error::format(
                &path,
                format!("instance {} has task {}, dataset is {}", bad.instance_id, bad.task.name(), meta.task.name()),
            ));
        }
        match name {
            SplitName::Train => (split.train, split.cxr_train) = (instances, images),
            SplitName::Val => (split.val, split.cxr_val) = (instances, images),
            SplitName::Test => (split.test, split.cxr_test) = (instances, images),
        }
    }
    Ok((meta, split))
}

/// `instance_id,subject_id,is_paired,label_summary` where the summary lists
/// the indices of positive task labels separated by `;`.
pub fn manifest(instances: &[MultimodalInstance]) -> String {
    let mut out = String::from("instance_id,subject_id,is_paired,label_summary\n");
    for i in instances {
        let positives: Vec<String> = i
            .y_task
            .iter()
            .enumerate()
            .filter(|(_, y)| **y > 0.5)
            .map(|(k, _)| k.to_string())
            .collect();
        let _ = writeln!(out, "{},{},{},{}", i.instance_id, i.subject_id, i.is_paired(), positives.join(";"));
    }
    out
}

fn image_dims(image: Option<&Tensor>) -> [usize; 3] {
    match image {
        Some(t) => [t.shape()[0], t.shape()[1], t.shape()[2]],
        None => [0; 3],
    }
}

pub fn encode_records(instances: &[MultimodalInstance], images: &[CxrSample]) -> Vec<u8> {
    let mut w = ByteWriter::default();
    w.bytes(DATASET_MAGIC);
    w.u32(instances.len() + images.len());
    for inst in instances {
        let mut r = ByteWriter::default();
        let flags = if inst.x_cxr.is_some() { FLAG_IMAGE } else { 0 }
            | if inst.y_cxr.is_some() { FLAG_RADIOLOGY } else { 0 }
            | if inst.age.is_some() { FLAG_AGE } else { 0 };
        r.u8(KIND_INSTANCE);
        r.u8(inst.task.id());
        r.u8(flags);
        r.str(&inst.instance_id);
        r.str(&inst.subject_id);
        r.u32(inst.x_ehr.shape()[0]);
        r.u32(inst.x_ehr.shape()[1]);
        for d in image_dims(inst.x_cxr.as_ref()) {
            r.u32(d);
        }
        r.u32(inst.y_task.len());
        r.u32(inst.y_cxr.as_ref().map_or(0, Vec::len));
        r.f64(inst.age.unwrap_or(0.0));
        r.f64s(inst.x_ehr.data());
        if let Some(img) = &inst.x_cxr {
            r.f64s(img.data());
        }
        r.f64s(&inst.y_task);
        if let Some(y) = &inst.y_cxr {
            r.f64s(y);
        }
        w.u64(r.buf.len() as u64);
        w.bytes(&r.buf);
    }
    for s in images {
        let mut r = ByteWriter::default();
        r.u8(KIND_IMAGE_ONLY);
        r.u8(NO_TASK);
        r.u8(FLAG_IMAGE | FLAG_RADIOLOGY);
        r.str(&s.sample_id);
        r.str(&s.subject_id);
        r.u32(0);
        r.u32(0);
        for d in image_dims(Some(&s.image)) {
            r.u32(d);
        }
        r.u32(0);
        r.u32(s.labels.len());
        r.f64(0.0);
        r.f64s(s.image.data());
        r.f64s(&s.labels);
        w.u64(r.buf.len() as u64);
        w.bytes(&r.buf);
    }
    w.buf
}

pub fn decode_records(bytes: &[u8], path: &Path) -> Result<(Vec<MultimodalInstance>, Vec<CxrSample>)> {
    let mut outer = ByteReader::new(bytes, path);
    outer.expect_magic(DATASET_MAGIC)?;
    let n = outer.u32()?;
    let (mut instances, mut images) = (Vec::new(), Vec::new());
    for _ in 0..n {
        let len = outer.u64()? as usize;
        let body = outer.take(len)?;
        let mut r = ByteReader::new(body, path);
        let kind = r.u8()?;
        let task = r.u8()?;
        let flags = r.u8()?;
        let id = r.str()?;
        let subject = r.str()?;
        let (t, f) = (r.u32()?, r.u32()?);
        let (c, h, w) = (r.u32()?, r.u32()?, r.u32()?);
        let (l, lc) = (r.u32()?, r.u32()?);
        let age = r.f64()?;
        let shape_err = |e: Error| r_fail(path, &id, e);
        match kind {
            KIND_INSTANCE => {
                let task = Task::from_id(task).map_err(shape_err)?;
                let x_ehr = Tensor::new([t, f], r.f64s(t * f)?).map_err(shape_err)?;
                let x_cxr = if flags & FLAG_IMAGE != 0 {
                    Some(Tensor::new([c, h, w], r.f64s(c * h * w)?).map_err(shape_err)?)
                } else {
                    None
                };
                let y_task = r.f64s(l)?;
                let y_cxr = if flags & FLAG_RADIOLOGY != 0 { Some(r.f64s(lc)?) } else { None };
                let inst = MultimodalInstance {
                    instance_id: id.clone(),
                    subject_id: subject,
                    task,
                    x_ehr,
                    x_cxr,
                    y_task,
                    y_cxr,
                    age: (flags & FLAG_AGE != 0).then_some(age),
                };
                inst.validate().map_err(shape_err)?;
                instances.push(inst);
            }
            KIND_IMAGE_ONLY => {
                let image = Tensor::new([c, h, w], r.f64s(c * h * w)?).map_err(shape_err)?;
                let sample = CxrSample {
                    sample_id: id.clone(),
                    subject_id: subject,
                    image,
                    labels: r.f64s(lc)?,
                };
                sample.validate().map_err(shape_err)?;
                images.push(sample);
            }
            other => return Err(r.fail(format!("unknown record kind {other}"))),
        }
        if !r.is_done() {
            return Err(r.fail(format!("record `{id}` has trailing bytes")));
        }
    }
    if !outer.is_done() {
        return Err(outer.fail("trailing bytes after last record"));
    }
    Ok((instances, images))
}

fn r_fail(path: &Path, id: &str, e: Error) -> Error {
    Error::format(path, format!("record `{id}`: {e}"))
}
