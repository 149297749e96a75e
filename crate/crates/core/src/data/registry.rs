//! Versioned layout of the clinical variables inside a discretized row.

use std::collections::HashMap;
use std::ops::Range;
use std::path::Path;

use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::config::EHR_FEATURES;
use crate::error::{Error, Result};

/// Registry shipped with the crate.
pub const DEFAULT_REGISTRY: &str = include_str!("../../assets/variables_v1.toml");

pub const VARIABLE_COUNT: usize = 17;
pub const CATEGORICAL_COUNT: usize = 5;
pub const CONTINUOUS_COUNT: usize = 12;

#[derive(Clone, Debug, PartialEq)]
pub enum VariableKind {
    Continuous { normal: f64, mean: f64, std: f64 },
    Categorical { categories: Vec<String>, normal: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Variable {
    pub name: String,
    pub kind: VariableKind,
    pub columns: Range<usize>,
    pub mask_column: usize,
}

impl Variable {
    pub fn is_categorical(&self) -> bool {
        matches!(self.kind, VariableKind::Categorical { .. })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VariableRegistry {
    pub version: u32,
    pub width: usize,
    pub variables: Vec<Variable>,
    /// SHA-256 of the registry text, recorded wherever features are stored.
    pub hash: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRegistry {
    version: u32,
    width: usize,
    #[serde(default, rename = "variable")]
    variables: Vec<RawVariable>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawVariable {
    name: String,
    kind: String,
    normal: Option<toml::Value>,
    mean: Option<f64>,
    std: Option<f64>,
    categories: Option<Vec<String>>,
    columns: Option<[usize; 2]>,
    mask_column: Option<usize>,
}

impl VariableRegistry {
    pub fn default_registry() -> Self {
        Self::parse(DEFAULT_REGISTRY).expect("shipped registry is valid")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
        Self::parse(&text)
    }

    /// Parses and validates registry text, reporting every violation found.
    pub fn parse(text: &str) -> Result<Self> {
        let raw: RawRegistry =
            toml::from_str(text).map_err(|e| Error::invalid(format!("registry: {e}")))?;
        let mut problems = Vec::new();

        if raw.variables.len() != VARIABLE_COUNT {
            problems.push(format!(
                "expected {VARIABLE_COUNT} variables, found {}",
                raw.variables.len()
            ));
        }
        let mut seen = HashMap::new();
        for v in &raw.variables {
            if seen.insert(v.name.as_str(), ()).is_some() {
                problems.push(format!("duplicate variable name `{}`", v.name));
            }
        }

        let mut variables = Vec::with_capacity(raw.variables.len());
        for v in &raw.variables {
            match build_variable(v) {
                Ok(var) => variables.push(var),
                Err(mut errs) => problems.append(&mut errs),
            }
        }

        let n_cat = variables.iter().filter(|v| v.is_categorical()).count();
        let n_cont = variables.len() - n_cat;
        if variables.len() == raw.variables.len()
            && (n_cat != CATEGORICAL_COUNT || n_cont != CONTINUOUS_COUNT)
        {
            problems.push(format!(
                "expected {CATEGORICAL_COUNT} categorical and {CONTINUOUS_COUNT} continuous variables, found {n_cat} and {n_cont}"
            ));
        }

        if raw.width != EHR_FEATURES {
            problems.push(format!("declared width {} differs from {EHR_FEATURES}", raw.width));
        }
        check_layout(&variables, raw.width, &mut problems);

        if !problems.is_empty() {
            return Err(Error::invalid(format!(
                "registry has {} problem(s): {}",
                problems.len(),
                problems.join("; ")
            )));
        }
        Ok(VariableRegistry {
            version: raw.version,
            width: raw.width,
            variables,
            hash: hex::encode(Sha256::digest(text.as_bytes())),
        })
    }

    pub fn len(&self) -> usize {
        self.variables.len()
    }

    pub fn is_empty(&self) -> bool {
        self.variables.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.variables.iter().position(|v| v.name == name)
    }
}

fn build_variable(v: &RawVariable) -> std::result::Result<Variable, Vec<String>> {
    let mut errs = Vec::new();
    let name = &v.name;
    let kind = match v.kind.as_str() {
        "continuous" => {
            let normal = v.normal.as_ref().and_then(toml_number);
            if normal.is_none() {
                errs.push(format!("`{name}` is missing a numeric normal value"));
            }
            if v.mean.is_none() {
                errs.push(format!("`{name}` is missing a mean"));
            }
            match v.std {
                Some(s) if s > 0.0 => {}
                _ => errs.push(format!("`{name}` needs a positive std")),
            }
            VariableKind::Continuous {
                normal: normal.unwrap_or(f64::NAN),
                mean: v.mean.unwrap_or(f64::NAN),
                std: v.std.unwrap_or(f64::NAN),
            }
        }
        "categorical" => {
            let categories = v.categories.clone().unwrap_or_default();
            if categories.is_empty() {
                errs.push(format!("`{name}` has no categories"));
            }
            let normal = match v.normal.as_ref().and_then(|n| n.as_str()) {
                None => {
                    errs.push(format!("`{name}` is missing a normal category"));
                    0
                }
                Some(n) => categories.iter().position(|c| c == n).unwrap_or_else(|| {
                    errs.push(format!("`{name}` normal category `{n}` is not in its category set"));
                    0
                }),
            };
            VariableKind::Categorical { categories, normal }
        }
        other => {
            errs.push(format!("`{name}` has unknown kind `{other}`"));
            return Err(errs);
        }
    };
    let columns = match v.columns {
        Some([a, b]) if a < b => a..b,
        Some([a, b]) => {
            errs.push(format!("`{name}` has empty column range [{a}, {b})"));
            a..a
        }
        None => {
            errs.push(format!("`{name}` is missing its column range"));
            0..0
        }
    };
    let expected = match &kind {
        VariableKind::Continuous { .. } => 1,
        VariableKind::Categorical { categories, .. } => categories.len(),
    };
    if columns.len() != expected && !columns.is_empty() {
        errs.push(format!(
            "`{name}` spans {} columns but needs {expected}",
            columns.len()
        ));
    }
    let Some(mask_column) = v.mask_column else {
        errs.push(format!("`{name}` is missing its mask column"));
        return Err(errs);
    };
    if errs.is_empty() {
        Ok(Variable {
            name: name.clone(),
            kind,
            columns,
            mask_column,
        })
    } else {
        Err(errs)
    }
}

fn toml_number(v: &toml::Value) -> Option<f64> {
    v.as_float().or_else(|| v.as_integer().map(|i| i as f64))
}

/// Value and mask ranges must be disjoint and tile `[0, width)` exactly.
fn check_layout(variables: &[Variable], width: usize, problems: &mut Vec<String>) {
    let mut ranges: Vec<(Range<usize>, String)> = Vec::new();
    for v in variables {
        ranges.push((v.columns.clone(), format!("`{}` values", v.name)));
        ranges.push((v.mask_column..v.mask_column + 1, format!("`{}` mask", v.name)));
    }
    ranges.sort_by_key(|(r, _)| (r.start, r.end));
    for pair in ranges.windows(2) {
        let ((a, an), (b, bn)) = (&pair[0], &pair[1]);
        if b.start < a.end {
            problems.push(format!(
                "overlapping column ranges: {an} [{}, {}) and {bn} [{}, {})",
                a.start, a.end, b.start, b.end
            ));
        } else if b.start > a.end {
            problems.push(format!("columns [{}, {}) are not assigned", a.end, b.start));
        }
    }
    let total: usize = ranges.iter().map(|(r, _)| r.len()).sum();
    if total != width {
        problems.push(format!("column widths sum to {total}, expected {width}"));
    }
    if let Some((first, _)) = ranges.first() {
        if first.start != 0 {
            problems.push(format!("columns [0, {}) are not assigned", first.start));
        }
    }
    if let Some((last, _)) = ranges.last() {
        if last.end > width {
            problems.push(format!("column {} exceeds width {width}", last.end - 1));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_registry_is_valid() {
        let r = VariableRegistry::default_registry();
        assert_eq!(r.width, 76);
        assert_eq!(r.len(), 17);
        assert_eq!(r.variables.iter().filter(|v| v.is_categorical()).count(), 5);
        let widths: usize = r.variables.iter().map(|v| v.columns.len() + 1).sum();
        assert_eq!(widths, 76);
        assert_eq!(r.hash.len(), 64);
    }

    fn drop_last_variable(text: &str) -> String {
        let cut = text.rfind("[[variable]]").unwrap();
        text[..cut].to_string()
    }

    #[test]
    fn sixteen_variables_rejected_with_count() {
        let err = VariableRegistry::parse(&drop_last_variable(DEFAULT_REGISTRY)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("expected 17 variables, found 16"), "{msg}");
    }

    #[test]
    fn overlapping_ranges_name_both() {
        let text = DEFAULT_REGISTRY.replace("columns = [3, 4]", "columns = [2, 3]");
        let msg = VariableRegistry::parse(&text).unwrap_err().to_string();
        assert!(msg.contains("overlapping column ranges"), "{msg}");
        assert!(msg.contains("Diastolic blood pressure") && msg.contains("Fraction inspired oxygen"), "{msg}");
        assert!(msg.contains("[2, 3)"), "{msg}");
    }

    #[test]
    fn duplicate_and_missing_normal_reported_together() {
        let text = DEFAULT_REGISTRY
            .replace("name = \"Height\"", "name = \"Weight\"")
            .replace("normal = 7.4\n", "");
        let msg = VariableRegistry::parse(&text).unwrap_err().to_string();
        assert!(msg.contains("duplicate variable name `Weight`"), "{msg}");
        assert!(msg.contains("`pH` is missing a numeric normal value"), "{msg}");
    }

    #[test]
    fn width_must_be_76() {
        let text = DEFAULT_REGISTRY.replace("width = 76", "width = 77");
        let msg = VariableRegistry::parse(&text).unwrap_err().to_string();
        assert!(msg.contains("declared width 77"), "{msg}");
    }
}
