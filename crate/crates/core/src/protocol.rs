//! Leave-one-subject-out split planning and composite-database relabeling.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::LabelSpace;
use crate::error::{Error, Result};
use crate::ingest::{Manifest, ManifestRow};

/// One held-out subject.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub fold_id: String,
    pub test_subject: String,
    pub train_subjects: Vec<String>,
    /// Sample indices on each side.
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub folds: Vec<Fold>,
}

impl SplitPlan {
    pub fn len(&self) -> usize {
        self.folds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.folds.is_empty()
    }

    /// Checks that every fold splits all samples into disjoint sides by
    /// subject and that the test sides partition the dataset.
    pub fn validate<S: AsRef<str>>(&self, subjects: &[S]) -> Result<()> {
        let n = subjects.len();
        let mut tested = vec![0usize; n];
        for f in &self.folds {
            if f.train_subjects.contains(&f.test_subject) {
                return Err(Error::Invalid(format!("fold {} trains on its test subject", f.fold_id)));
            }
            let mut side = vec![0u8; n];
            for &i in &f.train {
                side[i] += 1;
                if subjects[i].as_ref() == f.test_subject {
                    return Err(Error::Invalid(format!("fold {} leaks sample {i}", f.fold_id)));
                }
            }
            for &i in &f.test {
                side[i] += 1;
                tested[i] += 1;
                if subjects[i].as_ref() != f.test_subject {
                    return Err(Error::Invalid(format!("fold {} tests a foreign sample {i}", f.fold_id)));
                }
            }
            if side.iter().any(|&s| s != 1) {
                return Err(Error::Invalid(format!("fold {} does not split every sample once", f.fold_id)));
            }
        }
        if tested.iter().any(|&t| t != 1) {
            return Err(Error::Invalid("test sets do not partition the samples".into()));
        }
        Ok(())
    }
}

/// One fold per distinct subject, in sorted subject order.
pub fn make_loso_splits<S: AsRef<str>>(subjects: &[S]) -> Result<SplitPlan> {
    if subjects.is_empty() {
        return Err(Error::Invalid("cannot split an empty dataset".into()));
    }
    let distinct: BTreeSet<&str> = subjects.iter().map(|s| s.as_ref()).collect();
    let folds = distinct
        .iter()
        .map(|&subj| {
            let (test, train): (Vec<usize>, Vec<usize>) =
                (0..subjects.len()).partition(|&i| subjects[i].as_ref() == subj);
            Fold {
                fold_id: subj.to_string(),
                test_subject: subj.to_string(),
                train_subjects: distinct.iter().filter(|&&s| s != subj).map(|s| s.to_string()).collect(),
                train,
                test,
            }
        })
        .collect();
    Ok(SplitPlan { folds })
}

/// Shared composite classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CdeClass {
    Positive,
    Negative,
    Surprise,
}

impl CdeClass {
    pub const ALL: [CdeClass; 3] = [CdeClass::Positive, CdeClass::Negative, CdeClass::Surprise];

    pub fn labels() -> LabelSpace {
        LabelSpace::new(Self::ALL.iter().map(|c| c.to_string()).collect()).expect("distinct names")
    }
}

impl fmt::Display for CdeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CdeClass::Positive => "Positive",
            CdeClass::Negative => "Negative",
            CdeClass::Surprise => "Surprise",
        })
    }
}

impl FromStr for CdeClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "positive" => Ok(CdeClass::Positive),
            "negative" => Ok(CdeClass::Negative),
            "surprise" => Ok(CdeClass::Surprise),
            _ => Err(Error::Config(format!("unknown composite class {s:?}"))),
        }
    }
}

/// `dataset -> source class -> target`, where `None` drops the class.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CdeMapping {
    map: BTreeMap<String, BTreeMap<String, Option<CdeClass>>>,
}

impl CdeMapping {
    pub fn insert(&mut self, dataset: &str, class: &str, target: Option<CdeClass>) {
        self.map.entry(dataset.to_string()).or_default().insert(class.to_string(), target);
    }

    /// `Ok(None)` for a dropped class; an error if the class is not covered.
    pub fn target(&self, dataset: &str, class: &str) -> Result<Option<CdeClass>> {
        self.map
            .get(dataset)
            .and_then(|m| m.get(class))
            .copied()
            .ok_or_else(|| Error::Invalid(format!("class {class:?} of dataset {dataset:?} is not in the mapping")))
    }

    pub fn datasets(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    /// Parses `dataset.class=Positive|Negative|Surprise|DROP` lines with `#`
    /// comments.
    pub fn parse(text: &str) -> Result<Self> {
        let mut m = CdeMapping::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |msg: &str| Error::Config(format!("mapping line {}: {msg}", n + 1));
            let (key, value) = line.split_once('=').ok_or_else(|| bad("expected dataset.class=Target"))?;
            let (dataset, class) = key.trim().split_once('.').ok_or_else(|| bad("key must be dataset.class"))?;
            let (dataset, class) = (dataset.trim(), class.trim());
            if dataset.is_empty() || class.is_empty() {
                return Err(bad("empty dataset or class"));
            }
            let value = value.trim();
            let target = if value.eq_ignore_ascii_case("drop") {
                None
            } else {
                Some(value.parse::<CdeClass>().map_err(|_| bad(&format!("unknown target {value:?}")))?)
            };
            m.insert(dataset, class, target);
        }
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (d, classes) in &self.map {
            for (c, t) in classes {
                let t = t.map(|t| t.to_string()).unwrap_or_else(|| "DROP".into());
                s.push_str(&format!("{d}.{c}={t}\n"));
            }
        }
        s
    }

    /// Composite-database convention for CASME II (`casme2`), SMIC-HS
    /// (`smic`) and the full eight-class SAMM (`samm`).
    pub fn megc() -> Self {
        Self::parse(DEFAULT_MAPPING).expect("built-in mapping parses")
    }
}

const DEFAULT_MAPPING: &str = "\
casme2.Happy=Positive
casme2.Disgust=Negative
casme2.Repressed=Negative
casme2.Surprise=Surprise
casme2.Others=DROP
casme2.Fear=DROP
casme2.Sadness=DROP
smic.Positive=Positive
smic.Negative=Negative
smic.Surprise=Surprise
samm.Happy=Positive
samm.Angry=Negative
samm.Contempt=Negative
samm.Disgust=Negative
samm.Fear=Negative
samm.Sadness=Negative
samm.Surprise=Surprise
samm.Others=DROP
";

/// A relabeled composite with subject ids prefixed by dataset.
#[derive(Debug, Clone)]
pub struct Composite {
    pub manifest: Manifest,
    pub plan: SplitPlan,
}

/// Prefix that keeps subjects from different datasets apart.
pub fn composite_subject(dataset: &str, subject: &str) -> String {
    format!("{dataset}/{subject}")
}

/// Merges manifests into the Positive/Negative/Surprise composite and plans
/// LOSO over it. The label space keeps only the composite classes that
/// survive the mapping, in canonical order.
pub fn make_cde(datasets: &[Manifest], mapping: &CdeMapping) -> Result<Composite> {
    let mut used = BTreeSet::new();
    let mut rows = Vec::new();
    let mut ids = BTreeSet::new();
    for m in datasets {
        for r in &m.rows {
            let Some(target) = mapping.target(&r.dataset_id, &r.label)? else {
                continue;
            };
            let sample_id = if ids.contains(&r.sample_id) {
                format!("{}/{}", r.dataset_id, r.sample_id)
            } else {
                r.sample_id.clone()
            };
            if !ids.insert(sample_id.clone()) {
                return Err(Error::Invalid(format!("duplicate sample {sample_id} in composite")));
            }
            used.insert(target);
            rows.push(ManifestRow {
                sample_id,
                subject_id: composite_subject(&r.dataset_id, &r.subject_id),
                label: target.to_string(),
                ..r.clone()
            });
        }
    }
    if used.len() < 2 {
        return Err(Error::Invalid(format!("composite needs at least two classes, mapping keeps {}", used.len())));
    }
    let labels = LabelSpace::new(used.iter().map(|c| c.to_string()).collect())?;
    let subjects: Vec<&str> = rows.iter().map(|r| r.subject_id.as_str()).collect();
    let plan = make_loso_splits(&subjects)?;
    Ok(Composite { manifest: Manifest { rows, labels }, plan })
}
