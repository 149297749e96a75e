//! Label names and groupings.

use serde::{Deserialize, Serialize};

use crate::config::Task;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhenotypeCategory {
    Acute,
    Mixed,
    Chronic,
}

impl PhenotypeCategory {
    pub fn name(self) -> &'static str {
        match self {
            PhenotypeCategory::Acute => "acute",
            PhenotypeCategory::Mixed => "mixed",
            PhenotypeCategory::Chronic => "chronic",
        }
    }
}

use PhenotypeCategory::{Acute, Chronic, Mixed};

/// The 25 phenotype labels in output order with their condition category.
pub const PHENOTYPES: [(&str, PhenotypeCategory); 25] = [
    ("Acute and unspecified renal failure", Acute),
    ("Acute cerebrovascular disease", Acute),
    ("Acute myocardial infarction", Acute),
    ("Cardiac dysrhythmias", Mixed),
    ("Chronic kidney disease", Chronic),
    ("Chronic obstructive pulmonary disease", Chronic),
    ("Complications of surgical/medical care", Acute),
    ("Conduction disorders", Mixed),
    ("Congestive heart failure; nonhypertensive", Mixed),
    ("Coronary atherosclerosis and related", Chronic),
    ("Diabetes mellitus with complications", Mixed),
    ("Diabetes mellitus without complication", Chronic),
    ("Disorders of lipid metabolism", Chronic),
    ("Essential hypertension", Chronic),
    ("Fluid and electrolyte disorders", Acute),
    ("Gastrointestinal hemorrhage", Acute),
    ("Hypertension with complications", Chronic),
    ("Other liver diseases", Mixed),
    ("Other lower respiratory disease", Acute),
    ("Other upper respiratory disease", Acute),
    ("Pleurisy; pneumothorax; pulmonary collapse", Acute),
    ("Pneumonia", Acute),
    ("Respiratory failure; insufficiency; arrest (adult)", Acute),
    ("Septicemia (except in labor)", Acute),
    ("Shock", Acute),
];

pub const RADIOLOGY_NAMES: [&str; 14] = [
    "Atelectasis",
    "Cardiomegaly",
    "Consolidation",
    "Edema",
    "Enlarged Cardiomediastinum",
    "Fracture",
    "Lung Lesion",
    "Lung Opacity",
    "No Finding",
    "Pleural Effusion",
    "Pleural Other",
    "Pneumonia",
    "Pneumothorax",
    "Support Devices",
];

pub fn task_label_names(task: Task) -> Vec<String> {
    match task {
        Task::Phenotyping => PHENOTYPES.iter().map(|(n, _)| n.to_string()).collect(),
        Task::Mortality => vec!["In-hospital mortality".to_string()],
    }
}

/// Condition category of each task label, when the task has one.
pub fn task_label_categories(task: Task) -> Option<Vec<PhenotypeCategory>> {
    match task {
        Task::Phenotyping => Some(PHENOTYPES.iter().map(|(_, c)| *c).collect()),
        Task::Mortality => None,
    }
}
