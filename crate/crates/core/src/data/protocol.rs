use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{DomainDataset, DomainKey};
use crate::error::{Error, Result};
use crate::numerics::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolKind {
    /// Each subject is the target once; all other subjects are sources.
    CrossSubjectLoso,
    /// Per subject, earlier sessions are sources and the final session is the target.
    CrossSession,
    /// One fold: the last domain is the target, every other domain a source.
    Holdout,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub sources: Vec<DomainKey>,
    pub target: DomainKey,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolPlan {
    pub kind: ProtocolKind,
    pub folds: Vec<Fold>,
}

impl ProtocolPlan {
    /// Keeps at most `count` sources per fold, drawn without replacement by
    /// a seeded shuffle. Source order stays sorted by domain key.
    pub fn subsample_sources(&mut self, count: usize, seed: u64) {
        let rng = Rng::new(seed);
        for (i, fold) in self.folds.iter_mut().enumerate() {
            if fold.sources.len() <= count {
                continue;
            }
            let mut r = rng.split(i as u64);
            r.shuffle(&mut fold.sources);
            fold.sources.truncate(count);
            fold.sources.sort();
        }
    }
}

/// Builds the folds for `kind`. For leave-one-subject-out, a subject with
/// several sessions contributes only its earliest one.
pub fn make_protocol(datasets: &[DomainDataset], kind: ProtocolKind) -> Result<ProtocolPlan> {
    let mut by_subject: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
    for d in datasets {
        by_subject.entry(d.key.subject).or_default().push(d.key.session);
    }
    for sessions in by_subject.values_mut() {
        sessions.sort_unstable();
    }
    let folds = match kind {
        ProtocolKind::CrossSubjectLoso => {
            let first: Vec<DomainKey> = by_subject
                .iter()
                .map(|(&s, sessions)| DomainKey::new(s, sessions[0]))
                .collect();
            if first.len() < 2 {
                return Err(Error::Protocol(format!(
                    "leave-one-subject-out needs at least 2 subjects, found {}",
                    first.len()
                )));
            }
            first
                .iter()
                .map(|&target| Fold {
                    sources: first.iter().copied().filter(|k| k.subject != target.subject).collect(),
                    target,
                })
                .collect()
        }
        ProtocolKind::CrossSession => {
            let offenders: Vec<String> = by_subject
                .iter()
                .filter(|(_, s)| s.len() < 2)
                .map(|(subject, _)| subject.to_string())
                .collect();
            if !offenders.is_empty() {
                return Err(Error::Protocol(format!(
                    "cross-session needs at least 2 sessions per subject; single-session subjects: {}",
                    offenders.join(", ")
                )));
            }
            if by_subject.is_empty() {
                return Err(Error::Protocol("no domains".into()));
            }
            by_subject
                .iter()
                .map(|(&subject, sessions)| {
                    let (last, earlier) = sessions.split_last().expect("at least two sessions");
                    Fold {
                        sources: earlier.iter().map(|&s| DomainKey::new(subject, s)).collect(),
                        target: DomainKey::new(subject, *last),
                    }
                })
                .collect()
        }
        ProtocolKind::Holdout => {
            let mut keys: Vec<DomainKey> = datasets.iter().map(|d| d.key).collect();
            keys.sort();
            let target = keys.pop().ok_or_else(|| Error::Protocol("no domains".into()))?;
            if keys.is_empty() {
                return Err(Error::Protocol("holdout needs at least one source domain".into()));
            }
            vec![Fold { sources: keys, target }]
        }
    };
    Ok(ProtocolPlan { kind, folds })
}
