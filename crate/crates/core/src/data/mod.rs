//! Domain datasets: CSV/manifest ingestion, synthetic multi-domain data,
//! evaluation protocols and batching.

mod batch;
mod io;
mod protocol;
mod synth;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use batch::{batches, BatchStream};
pub use io::{load_de_features, read_domain_csv, write_dataset, write_domain_csv, Manifest, ManifestEntry};
pub use protocol::{make_protocol, Fold, ProtocolKind, ProtocolPlan};
pub use synth::{generate_synth, SynthSpec};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DomainKey {
    pub subject: u32,
    pub session: u32,
}

impl DomainKey {
    pub fn new(subject: u32, session: u32) -> Self {
        Self { subject, session }
    }
}

impl fmt::Display for DomainKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "s{}/{}", self.subject, self.session)
    }
}

/// Features of one subject session, with labels when known.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    pub key: DomainKey,
    pub features: Tensor,
    pub labels: Option<Vec<usize>>,
    pub class_count: usize,
}

impl DomainDataset {
    pub fn new(key: DomainKey, features: Tensor, labels: Option<Vec<usize>>, class_count: usize) -> Result<Self> {
        if let Some(l) = &labels {
            if l.len() != features.rows() {
                return Err(Error::dim("dataset", features.shape_str(), format!("{} labels", l.len())));
            }
            if let Some(&bad) = l.iter().find(|&&y| y >= class_count) {
                return Err(Error::Label {
                    label: bad,
                    classes: class_count,
                });
            }
        }
        Ok(Self {
            key,
            features,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    /// Labels, or an error naming the domain when it has none.
    pub fn require_labels(&self) -> Result<&[usize]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::Protocol(format!("domain {} has no labels", self.key)))
    }

    /// Copy with labels dropped, as seen by a target-role consumer.
    pub fn unlabeled(&self) -> Self {
        Self {
            labels: None,
            ..self.clone()
        }
    }
}

/// Checks that every dataset shares one feature dimension and class count.
pub fn check_consistent(datasets: &[DomainDataset]) -> Result<(usize, usize)> {
    let first = datasets.first().ok_or(Error::EmptyDomain("no datasets"))?;
    for d in datasets {
        if d.feature_dim() != first.feature_dim() {
            return Err(Error::dim("feature_dim", d.feature_dim(), first.feature_dim()));
        }
        if d.class_count != first.class_count {
            return Err(Error::dim("class_count", d.class_count, first.class_count));
        }
    }
    Ok((first.feature_dim(), first.class_count))
}
