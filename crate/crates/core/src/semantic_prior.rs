//! Co-occurrence prior over interaction classes conditioned on the pair's
//! individual actions, estimated by smoothed symmetric counting.

use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PRIOR_FORMAT_VERSION: u32 = 1;

/// Frozen label catalogs. The defaults mirror the class sets named in the
/// source material's prose; everything downstream is parameterized on the
/// catalog, never on the default labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCatalog {
    individual_actions: Vec<String>,
    interactions: Vec<String>,
}

impl Default for ClassCatalog {
    fn default() -> Self {
        ClassCatalog::new(
            ["grazing", "lying", "standing", "riding"],
            ["mounting", "fighting", "smelling"],
        )
        .expect("default catalog is valid")
    }
}

impl ClassCatalog {
    pub fn new<A, B>(
        individual_actions: impl IntoIterator<Item = A>,
        interactions: impl IntoIterator<Item = B>,
    ) -> Result<Self>
    where
        A: Into<String>,
        B: Into<String>,
    {
        let individual_actions: Vec<String> =
            individual_actions.into_iter().map(Into::into).collect();
        let interactions: Vec<String> = interactions.into_iter().map(Into::into).collect();
        for (name, labels) in [
            ("individual action", &individual_actions),
            ("interaction", &interactions),
        ] {
            let mut seen = std::collections::BTreeSet::new();
            for label in labels {
                if !seen.insert(label.as_str()) {
                    return Err(Error::InvalidArgument(format!(
                        "duplicate {name} label {label:?}"
                    )));
                }
            }
        }
        if individual_actions.is_empty() || interactions.is_empty() {
            return Err(Error::InvalidArgument(
                "catalogs must contain at least one label each".into(),
            ));
        }
        Ok(ClassCatalog {
            individual_actions,
            interactions,
        })
    }

    pub fn individual_actions(&self) -> &[String] {
        &self.individual_actions
    }

    pub fn interactions(&self) -> &[String] {
        &self.interactions
    }

    pub fn num_actions(&self) -> usize {
        self.individual_actions.len()
    }

    pub fn num_interactions(&self) -> usize {
        self.interactions.len()
    }

    pub fn action_index(&self, label: &str) -> Result<usize> {
        self.individual_actions
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::UnknownLabel {
                label: label.to_string(),
                catalog: "individual action",
            })
    }

    pub fn interaction_index(&self, label: &str) -> Result<usize> {
        self.interactions
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::UnknownLabel {
                label: label.to_string(),
                catalog: "interaction",
            })
    }
}

/// Result of a prior lookup: a distribution over interaction classes plus
/// a flag marking the uniform fallback taken for unsmoothed never-seen
/// pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorLookup {
    pub probs: Vec<f64>,
    pub uniform_fallback: bool,
}

/// The fitted conditional table. Counts are symmetric in the two action
/// indices by construction; the table is immutable after fitting and
/// lookups are read-only.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticPriorTable {
    counts: Array3<u64>,
    alpha: f64,
    catalog: ClassCatalog,
}

/// Counts interaction occurrences per unordered action pair. Each sample
/// `(a, b, k)` increments both `[a, b, k]` and `[b, a, k]`.
pub fn fit_prior<S1, S2, S3>(
    catalog: &ClassCatalog,
    samples: &[(S1, S2, S3)],
    alpha: f64,
) -> Result<SemanticPriorTable>
where
    S1: AsRef<str>,
    S2: AsRef<str>,
    S3: AsRef<str>,
{
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "smoothing alpha {alpha} must be nonnegative"
        )));
    }
    let na = catalog.num_actions();
    let n = catalog.num_interactions();
    let mut counts = Array3::zeros((na, na, n));
    for (a, b, k) in samples {
        let ia = catalog.action_index(a.as_ref())?;
        let ib = catalog.action_index(b.as_ref())?;
        let ik = catalog.interaction_index(k.as_ref())?;
        counts[[ia, ib, ik]] += 1;
        counts[[ib, ia, ik]] += 1;
    }
    Ok(SemanticPriorTable {
        counts,
        alpha,
        catalog: catalog.clone(),
    })
}

impl SemanticPriorTable {
    pub fn catalog(&self) -> &ClassCatalog {
        &self.catalog
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn counts(&self) -> &Array3<u64> {
        &self.counts
    }

    pub fn lookup(&self, a1: &str, a2: &str) -> Result<PriorLookup> {
        let ia = self.catalog.action_index(a1)?;
        let ib = self.catalog.action_index(a2)?;
        Ok(self.lookup_indices(ia, ib))
    }

    /// Additive-smoothed conditional distribution for an action-index
    /// pair. With `alpha == 0` and no observations the lookup falls back
    /// to uniform and sets the flag.
    pub fn lookup_indices(&self, a1: usize, a2: usize) -> PriorLookup {
        let n = self.catalog.num_interactions();
        let row = self.counts.slice(ndarray::s![a1, a2, ..]);
        let total: u64 = row.sum();
        if total == 0 && self.alpha == 0.0 {
            return PriorLookup {
                probs: vec![1.0 / n as f64; n],
                uniform_fallback: true,
            };
        }
        let denom = total as f64 + self.alpha * n as f64;
        PriorLookup {
            probs: row.iter().map(|&c| (c as f64 + self.alpha) / denom).collect(),
            uniform_fallback: false,
        }
    }

    pub fn ensure_catalog(&self, expected: &ClassCatalog) -> Result<()> {
        if &self.catalog != expected {
            return Err(Error::CatalogMismatch(format!(
                "prior was fitted on actions {:?} / interactions {:?}, expected {:?} / {:?}",
                self.catalog.individual_actions,
                self.catalog.interactions,
                expected.individual_actions,
                expected.interactions
            )));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct PriorFile {
    format_version: u32,
    individual_actions: Vec<String>,
    interactions: Vec<String>,
    alpha: f64,
    /// Row-major `|A| x |A| x N` counts.
    counts: Vec<u64>,
}

pub fn save_prior(table: &SemanticPriorTable, path: impl AsRef<Path>) -> Result<()> {
    let file = PriorFile {
        format_version: PRIOR_FORMAT_VERSION,
        individual_actions: table.catalog.individual_actions.clone(),
        interactions: table.catalog.interactions.clone(),
        alpha: table.alpha,
        counts: table.counts.iter().copied().collect(),
    };
    let json = serde_json::to_string_pretty(&file)
        .map_err(|e| Error::corrupt(path.as_ref().display().to_string(), e.to_string()))?;
    std::fs::write(path.as_ref(), json)?;
    Ok(())
}

pub fn load_prior(path: impl AsRef<Path>) -> Result<SemanticPriorTable> {
    let display = path.as_ref().display().to_string();
    let text = std::fs::read_to_string(path.as_ref())?;
    let file: PriorFile =
        serde_json::from_str(&text).map_err(|e| Error::corrupt(&display, e.to_string()))?;
    if file.format_version != PRIOR_FORMAT_VERSION {
        return Err(Error::FormatVersion {
            found: file.format_version,
            expected: PRIOR_FORMAT_VERSION,
        });
    }
    let catalog = ClassCatalog::new(file.individual_actions, file.interactions)?;
    let na = catalog.num_actions();
    let n = catalog.num_interactions();
    if file.counts.len() != na * na * n {
        return Err(Error::corrupt(
            &display,
            format!(
                "count array has {} entries, expected {}",
                file.counts.len(),
                na * na * n
            ),
        ));
    }
    let counts = Array3::from_shape_vec((na, na, n), file.counts)
        .map_err(|e| Error::corrupt(&display, e.to_string()))?;
    if !(file.alpha >= 0.0 && file.alpha.is_finite()) {
        return Err(Error::corrupt(&display, "negative or non-finite alpha"));
    }
    Ok(SemanticPriorTable {
        counts,
        alpha: file.alpha,
        catalog,
    })
}
