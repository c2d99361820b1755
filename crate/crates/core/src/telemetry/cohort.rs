use super::{Expertise, Session};
use serde::Serialize;
use std::collections::{BTreeMap, BTreeSet};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ExpertiseCounts {
    pub resident: usize,
    pub general: usize,
    pub specialist: usize,
}

impl ExpertiseCounts {
    pub fn get(&self, e: Expertise) -> usize {
        match e {
            Expertise::Resident => self.resident,
            Expertise::General => self.general,
            Expertise::Specialist => self.specialist,
        }
    }

    fn bump(&mut self, e: Expertise) {
        match e {
            Expertise::Resident => self.resident += 1,
            Expertise::General => self.general += 1,
            Expertise::Specialist => self.specialist += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.resident + self.general + self.specialist
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CohortSummary {
    pub n_sessions: usize,
    /// Sessions (scanpaths) per expertise.
    pub sessions: ExpertiseCounts,
    /// Distinct pathologists per expertise.
    pub pathologists: ExpertiseCounts,
    /// Sessions per expertise for every slide.
    pub per_wsi: BTreeMap<String, ExpertiseCounts>,
    pub mean_duration_ms: f64,
    /// (wsi, expertise) pairs read by exactly one reader of that expertise;
    /// these cannot contribute to pairwise agreement.
    pub flagged: Vec<(String, Expertise)>,
}

impl CohortSummary {
    pub fn mean_readers_per_wsi(&self) -> f64 {
        if self.per_wsi.is_empty() {
            0.0
        } else {
            self.n_sessions as f64 / self.per_wsi.len() as f64
        }
    }
}

pub fn validate_cohort(sessions: &[Session]) -> CohortSummary {
    let mut summary = CohortSummary::default();
    let mut readers: BTreeMap<Expertise, BTreeSet<&str>> = BTreeMap::new();
    let mut total_ms = 0u128;
    for s in sessions {
        summary.n_sessions += 1;
        summary.sessions.bump(s.expertise);
        summary.per_wsi.entry(s.wsi_id.clone()).or_default().bump(s.expertise);
        readers.entry(s.expertise).or_default().insert(&s.pathologist_id);
        total_ms += s.duration_ms() as u128;
    }
    for (e, ids) in &readers {
        for _ in 0..ids.len() {
            summary.pathologists.bump(*e);
        }
    }
    if !sessions.is_empty() {
        summary.mean_duration_ms = total_ms as f64 / sessions.len() as f64;
    }
    for (wsi, counts) in &summary.per_wsi {
        for e in Expertise::ALL {
            if counts.get(e) == 1 {
                summary.flagged.push((wsi.clone(), e));
            }
        }
    }
    summary
}
