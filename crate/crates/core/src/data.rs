//! In-memory cohort data shared by the oracle, inference and io layers.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::confounder::ConfounderRecord;
use crate::effects::{Stratum, StratumWeights};
use crate::mediator::LongitudinalRecord;
use crate::survival::SurvivalOutcome;

/// One cohort member with standardized mediator measurements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subject {
    pub id: String,
    pub arm: u8,
    pub u: u8,
    /// Dummy-coded baseline covariates.
    pub w: Vec<f64>,
    pub exit_time: f64,
    pub event: bool,
    /// Sorted by time.
    pub visits: Vec<LongitudinalRecord>,
}

impl Subject {
    pub fn outcome(&self) -> SurvivalOutcome {
        SurvivalOutcome {
            exit_time: self.exit_time,
            event: self.event,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Dataset {
    pub subjects: Vec<Subject>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn w_dim(&self) -> Option<usize> {
        self.subjects.first().map(|s| s.w.len())
    }

    pub fn confounder_records(&self) -> Vec<ConfounderRecord> {
        self.subjects
            .iter()
            .map(|s| ConfounderRecord {
                a: s.arm,
                w: s.w.clone(),
                u: s.u,
            })
            .collect()
    }

    pub fn outcomes(&self, arm: u8) -> Vec<SurvivalOutcome> {
        self.subjects.iter().filter(|s| s.arm == arm).map(Subject::outcome).collect()
    }

    /// Empirical covariate-pattern frequencies. `label` names a pattern.
    pub fn empirical_strata(&self, label: impl Fn(&[f64]) -> String) -> StratumWeights {
        let mut counts: BTreeMap<Vec<u64>, (Vec<f64>, usize)> = BTreeMap::new();
        for s in &self.subjects {
            let key = s.w.iter().map(|v| v.to_bits()).collect();
            counts.entry(key).or_insert_with(|| (s.w.clone(), 0)).1 += 1;
        }
        let n = self.subjects.len() as f64;
        let mut strata: Vec<Stratum> = counts
            .into_values()
            .map(|(w, c)| Stratum {
                label: label(&w),
                mass: c as f64 / n,
                w,
            })
            .collect();
        strata.sort_by(|a, b| a.label.cmp(&b.label));
        StratumWeights { strata }
    }
}
