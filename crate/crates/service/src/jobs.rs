//! Learn jobs: queued on request, trained on a blocking thread, committed by
//! swapping in a new snapshot. At most one active job per class name.

use std::collections::BTreeMap;

use dleng::continual::LearnReport;
use serde::Serialize;

use crate::SCHEMA_VERSION;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running,
    Succeeded,
    Failed,
}

impl JobState {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Succeeded | JobState::Failed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    /// `bins + 1` ascending edges.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// Histograms of `a` and `b` over shared equal-width bins.
    pub fn pair(a: &[f64], b: &[f64], bins: usize) -> (Histogram, Histogram) {
        let (lo, hi) = a
            .iter()
            .chain(b)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let (lo, hi) = if lo.is_finite() { (lo, if hi > lo { hi } else { lo + 1.0 }) } else { (0.0, 1.0) };
        let width = (hi - lo) / bins as f64;
        let edges: Vec<f64> = (0..=bins).map(|i| lo + width * i as f64).collect();
        let count = |xs: &[f64]| {
            let mut counts = vec![0; bins];
            for &x in xs {
                let i = (((x - lo) / width) as usize).min(bins - 1);
                counts[i] += 1;
            }
            Histogram { edges: edges.clone(), counts }
        };
        (count(a), count(b))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JobResult {
    pub report: LearnReport,
    /// Generation of the snapshot that first served the new class.
    pub generation: u64,
    pub seed_miou_before: f64,
    pub seed_miou_after: f64,
    /// OoD scores of the submitted sample cells before and after learning.
    pub score_histogram_before: Histogram,
    pub score_histogram_after: Histogram,
    pub mean_score_before: f64,
    pub mean_score_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LearnJob {
    pub schema_version: u32,
    pub job_id: String,
    pub class_name: String,
    pub sample_ids: Vec<u64>,
    pub state: JobState,
    pub progress: f64,
    pub result: Option<JobResult>,
    pub error: Option<String>,
}

#[derive(Debug, Default)]
pub struct JobTable {
    next: u64,
    jobs: BTreeMap<String, LearnJob>,
}

impl JobTable {
    pub fn active_for(&self, class_name: &str) -> Option<&LearnJob> {
        self.jobs
            .values()
            .find(|j| j.class_name == class_name && !j.state.is_terminal())
    }

    pub fn create(&mut self, class_name: &str, sample_ids: Vec<u64>) -> LearnJob {
        self.next += 1;
        let job = LearnJob {
            schema_version: SCHEMA_VERSION,
            job_id: format!("job-{}", self.next),
            class_name: class_name.to_string(),
            sample_ids,
            state: JobState::Queued,
            progress: 0.0,
            result: None,
            error: None,
        };
        self.jobs.insert(job.job_id.clone(), job.clone());
        job
    }

    pub fn get(&self, job_id: &str) -> Option<&LearnJob> {
        self.jobs.get(job_id)
    }

    /// Applies `f` unless the job already reached a terminal state.
    pub fn update(&mut self, job_id: &str, f: impl FnOnce(&mut LearnJob)) {
        if let Some(j) = self.jobs.get_mut(job_id) {
            if !j.state.is_terminal() {
                f(j);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn terminal_states_are_immutable() {
        let mut t = JobTable::default();
        let j = t.create("a", vec![1]);
        t.update(&j.job_id, |j| j.state = JobState::Failed);
        t.update(&j.job_id, |j| j.state = JobState::Running);
        assert_eq!(t.get(&j.job_id).unwrap().state, JobState::Failed);
        assert!(t.active_for("a").is_none());
    }

    #[test]
    fn one_active_job_per_name() {
        let mut t = JobTable::default();
        let a = t.create("a", vec![]);
        assert_eq!(t.active_for("a").unwrap().job_id, a.job_id);
        assert!(t.active_for("b").is_none());
        let b = t.create("b", vec![]);
        assert_ne!(a.job_id, b.job_id);
    }

    #[test]
    fn histogram_pair_counts_everything() {
        let (a, b) = Histogram::pair(&[0.0, 1.0, 2.0], &[2.0, 2.0], 4);
        assert_eq!(a.counts.iter().sum::<usize>(), 3);
        assert_eq!(b.counts, vec![0, 0, 0, 2]);
        assert_eq!(a.edges, b.edges);
        assert_eq!(a.edges.len(), 5);
        let (c, _) = Histogram::pair(&[3.0], &[], 2);
        assert_eq!(c.counts, vec![1, 0]);
    }
}
