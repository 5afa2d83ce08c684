//! Dataset x class annotation-availability table.
//!
//! On disk it is a small CSV: a header of class names after a leading
//! `dataset` cell, then one row per dataset with values in `{1, 0, -1}`.
//!
//! ```text
//! dataset,liver,spleen,skull
//! abdomen_ct,1,0,-1
//! head_mri,-1,-1,1
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::curation::io::DetectionRecord;
use crate::curation::SliceSample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Presence {
    /// The class is annotated in the dataset.
    Annotated,
    /// The class may appear but is not annotated.
    Unannotated,
    /// The class cannot occur in the dataset.
    Impossible,
}

impl Presence {
    pub fn value(self) -> i8 {
        match self {
            Presence::Annotated => 1,
            Presence::Unannotated => 0,
            Presence::Impossible => -1,
        }
    }

    pub fn from_value(v: i8) -> Option<Self> {
        match v {
            1 => Some(Presence::Annotated),
            0 => Some(Presence::Unannotated),
            -1 => Some(Presence::Impossible),
            _ => None,
        }
    }
}

impl fmt::Display for Presence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.value())
    }
}

#[derive(Debug, Error)]
pub enum PresenceError {
    #[error("unknown dataset {0:?}")]
    UnknownDataset(String),
    #[error("unknown class {0:?}")]
    UnknownClass(String),
    #[error("line {line}, column {column}: {reason}")]
    Parse { line: usize, column: usize, reason: String },
    #[error("{0}")]
    Shape(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PresenceMatrix {
    datasets: Vec<String>,
    classes: Vec<String>,
    /// Row-major, `datasets.len() x classes.len()`.
    values: Vec<Presence>,
    dataset_index: HashMap<String, usize>,
    class_index: HashMap<String, usize>,
}

fn index_of(names: &[String], what: &str) -> Result<HashMap<String, usize>, PresenceError> {
    let mut map = HashMap::with_capacity(names.len());
    for (i, n) in names.iter().enumerate() {
        if n.is_empty() {
            return Err(PresenceError::Shape(format!("empty {what} name")));
        }
        if map.insert(n.clone(), i).is_some() {
            return Err(PresenceError::Shape(format!("duplicate {what} {n:?}")));
        }
    }
    Ok(map)
}

impl PresenceMatrix {
    pub fn new(datasets: Vec<String>, classes: Vec<String>, values: Vec<Presence>) -> Result<Self, PresenceError> {
        if classes.is_empty() {
            return Err(PresenceError::Shape("class list is empty".into()));
        }
        if values.len() != datasets.len() * classes.len() {
            return Err(PresenceError::Shape(format!(
                "{} values for {} datasets x {} classes",
                values.len(),
                datasets.len(),
                classes.len()
            )));
        }
        let dataset_index = index_of(&datasets, "dataset")?;
        let class_index = index_of(&classes, "class")?;
        Ok(Self { datasets, classes, values, dataset_index, class_index })
    }

    /// Every pair set to `fill`.
    pub fn filled(datasets: Vec<String>, classes: Vec<String>, fill: Presence) -> Result<Self, PresenceError> {
        let n = datasets.len() * classes.len();
        Self::new(datasets, classes, vec![fill; n])
    }

    pub fn datasets(&self) -> &[String] {
        &self.datasets
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    fn slot(&self, dataset: &str, class: &str) -> Result<usize, PresenceError> {
        let d = *self.dataset_index.get(dataset).ok_or_else(|| PresenceError::UnknownDataset(dataset.to_string()))?;
        let c = *self.class_index.get(class).ok_or_else(|| PresenceError::UnknownClass(class.to_string()))?;
        Ok(d * self.classes.len() + c)
    }

    /// Stored value for a registered pair; unregistered names are errors.
    pub fn lookup(&self, dataset: &str, class: &str) -> Result<Presence, PresenceError> {
        Ok(self.values[self.slot(dataset, class)?])
    }

    pub fn set(&mut self, dataset: &str, class: &str, value: Presence) -> Result<(), PresenceError> {
        let i = self.slot(dataset, class)?;
        self.values[i] = value;
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, PresenceError> {
        let mut reader = csv::ReaderBuilder::new().has_headers(false).flexible(true).trim(csv::Trim::All).from_reader(text.as_bytes());
        let mut rows = reader.records();
        let header = rows
            .next()
            .ok_or_else(|| PresenceError::Parse { line: 1, column: 1, reason: "missing header row".into() })??;
        let classes: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
        if classes.is_empty() {
            return Err(PresenceError::Parse { line: 1, column: 2, reason: "class list is empty".into() });
        }
        let mut datasets = Vec::new();
        let mut values = Vec::new();
        for row in rows {
            let row = row?;
            let line = row.position().map(|p| p.line() as usize).unwrap_or(0);
            if row.len() != classes.len() + 1 {
                return Err(PresenceError::Parse {
                    line,
                    column: row.len().min(classes.len() + 1) + 1,
                    reason: format!("expected {} cells, found {}", classes.len() + 1, row.len()),
                });
            }
            datasets.push(row[0].to_string());
            for (j, cell) in row.iter().enumerate().skip(1) {
                let v = cell.parse::<i8>().ok().and_then(Presence::from_value).ok_or_else(|| PresenceError::Parse {
                    line,
                    column: j + 1,
                    reason: format!("value {cell:?} is not one of 1, 0, -1"),
                })?;
                values.push(v);
            }
        }
        Self::new(datasets, classes, values)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("dataset");
        for c in &self.classes {
            out.push(',');
            out.push_str(&csv_cell(c));
        }
        out.push('\n');
        for (d, name) in self.datasets.iter().enumerate() {
            out.push_str(&csv_cell(name));
            for v in &self.values[d * self.classes.len()..(d + 1) * self.classes.len()] {
                out.push(',');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self, PresenceError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), PresenceError> {
        Ok(std::fs::write(path, self.to_csv())?)
    }

    /// Check observed `(dataset, class)` annotation pairs against the table.
    pub fn validate<'a, I>(&self, annotations: I) -> ValidationReport
    where
        I: IntoIterator<Item = (&'a str, &'a str)>,
    {
        let mut counts: BTreeMap<(String, String), usize> = BTreeMap::new();
        for (d, c) in annotations {
            *counts.entry((d.to_string(), c.to_string())).or_default() += 1;
        }
        let violations = counts
            .into_iter()
            .filter_map(|((dataset, class), count)| {
                let kind = match self.lookup(&dataset, &class) {
                    Ok(Presence::Annotated) => return None,
                    Ok(Presence::Unannotated) => ViolationKind::AnnotatedButUnmarked,
                    Ok(Presence::Impossible) => ViolationKind::AnnotatedButImpossible,
                    Err(PresenceError::UnknownDataset(_)) => ViolationKind::UnknownDataset,
                    Err(_) => ViolationKind::UnknownClass,
                };
                Some(Violation { dataset, class, kind, annotations: count })
            })
            .collect();
        ValidationReport { violations }
    }

    pub fn validate_samples(&self, samples: &[SliceSample]) -> ValidationReport {
        self.validate(
            samples.iter().flat_map(|s| s.annotations.iter().map(move |a| (s.dataset_id.as_str(), a.class_name.as_str()))),
        )
    }

    pub fn validate_records(&self, records: &[DetectionRecord]) -> ValidationReport {
        self.validate(records.iter().flat_map(|r| r.classes.iter().map(move |c| (r.dataset_id.as_str(), c.as_str()))))
    }
}

fn csv_cell(s: &str) -> String {
    if s.contains([',', '"', '\n']) || s.trim() != s {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    /// Annotations exist but the table says 0.
    AnnotatedButUnmarked,
    /// Annotations exist where the table says -1.
    AnnotatedButImpossible,
    UnknownDataset,
    UnknownClass,
}

impl ViolationKind {
    pub fn is_hard(self) -> bool {
        !matches!(self, ViolationKind::AnnotatedButUnmarked)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub dataset: String,
    pub class: String,
    pub kind: ViolationKind,
    pub annotations: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn hard_violations(&self) -> impl Iterator<Item = &Violation> {
        self.violations.iter().filter(|v| v.kind.is_hard())
    }
}
