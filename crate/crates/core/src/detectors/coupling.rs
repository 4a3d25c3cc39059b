use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::telemetry::CollaborationEvent;
use crate::types::ServiceId;

use super::{DetectorId, DetectorVote};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CouplingParams {
    pub tau: f64,
}

impl Default for CouplingParams {
    fn default() -> Self {
        CouplingParams { tau: 0.5 }
    }
}

/// Jaccard overlap of two contributor sets.
pub fn jaccard(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 0.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct CouplingVote {
    pub pair: (ServiceId, ServiceId),
    pub vote: DetectorVote,
}

/// One vote per pair of services that both saw contributors in the window.
pub fn org_coupling(events: &[CollaborationEvent], tau: f64) -> Vec<CouplingVote> {
    let mut teams: BTreeMap<&ServiceId, BTreeSet<String>> = BTreeMap::new();
    for ev in events {
        teams.entry(&ev.service_id).or_default().insert(ev.contributor_id.clone());
    }
    let services: Vec<_> = teams.iter().filter(|(_, c)| !c.is_empty()).collect();
    let mut out = Vec::new();
    for (i, (s1, c1)) in services.iter().enumerate() {
        for (s2, c2) in &services[i + 1..] {
            let coupling = jaccard(c1, c2);
            out.push(CouplingVote {
                pair: ((**s1).clone(), (**s2).clone()),
                vote: DetectorVote { detector_id: DetectorId::Coupling, anomalous: coupling >= tau, score: coupling },
            });
        }
    }
    out
}
