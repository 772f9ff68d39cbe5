use std::sync::atomic::{AtomicUsize, Ordering};

use lineage_core::classify::StubClassifier;
use lineage_core::{
    build_default_catalogue, run_probe, BackendError, GenerationRequest, Generator, ImagePayload,
    ProbeError, ProbePlan, RetryPolicy,
};

struct Echo;

impl Generator for Echo {
    fn generate(&self, r: &GenerationRequest) -> Result<ImagePayload, BackendError> {
        Ok(ImagePayload {
            bytes: format!("{}:{}", r.prompt, r.seed).into_bytes(),
            media_type: "image/png".into(),
        })
    }
}

/// Serves `limit` images, then dies.
struct Crashing {
    served: AtomicUsize,
    limit: usize,
}

impl Generator for Crashing {
    fn generate(&self, r: &GenerationRequest) -> Result<ImagePayload, BackendError> {
        if self.served.fetch_add(1, Ordering::SeqCst) >= self.limit {
            return Err(BackendError::Fatal("process killed".into()));
        }
        Echo.generate(r)
    }
}

fn plan() -> (lineage_core::PromptCatalogue, ProbePlan) {
    let catalogue = build_default_catalogue();
    let mut plan = ProbePlan::new("resumable", &catalogue);
    plan.prompt_ids.truncate(3);
    plan.n_per_prompt = 10;
    plan.parallelism = 1;
    plan.retry = RetryPolicy::none();
    (catalogue, plan)
}

#[test]
fn crash_at_seventeen_then_resume() {
    let (catalogue, plan) = plan();
    let classifier = StubClassifier::seeded(5);
    let dir = tempfile::tempdir().unwrap();
    let journal = dir.path().join("run.jsonl");

    let crashing = Crashing {
        served: AtomicUsize::new(0),
        limit: 17,
    };
    let err = run_probe(&crashing, &classifier, &catalogue, &plan, Some(&journal)).unwrap_err();
    match err {
        ProbeError::Incomplete {
            completed,
            journal: Some(path),
            ..
        } => {
            assert_eq!(completed, 17);
            assert_eq!(path, journal);
        }
        other => panic!("unexpected {other}"),
    }
    let lines = std::fs::read_to_string(&journal).unwrap().lines().count();
    assert_eq!(lines, 17);

    let counting = Crashing {
        served: AtomicUsize::new(0),
        limit: usize::MAX,
    };
    let resumed = run_probe(&counting, &classifier, &catalogue, &plan, Some(&journal)).unwrap();
    assert_eq!(resumed.summary.resumed, 17);
    assert_eq!(counting.served.load(Ordering::SeqCst), 13);

    let fresh = run_probe(&Echo, &classifier, &catalogue, &plan, None).unwrap();
    assert_eq!(resumed.store, fresh.store);
    assert_eq!(resumed.store.to_json_string(), fresh.store.to_json_string());
}

#[test]
fn torn_last_line_is_redone() {
    let (catalogue, plan) = plan();
    let classifier = StubClassifier::seeded(5);
    let dir = tempfile::tempdir().unwrap();
    let journal = dir.path().join("run.jsonl");

    let crashing = Crashing {
        served: AtomicUsize::new(0),
        limit: 5,
    };
    run_probe(&crashing, &classifier, &catalogue, &plan, Some(&journal)).unwrap_err();
    let text = std::fs::read_to_string(&journal).unwrap();
    let cut = text.trim_end().len() - 7;
    std::fs::write(&journal, &text[..cut]).unwrap();

    let out = run_probe(&Echo, &classifier, &catalogue, &plan, Some(&journal)).unwrap();
    assert_eq!(out.summary.resumed, 4);
    let fresh = run_probe(&Echo, &classifier, &catalogue, &plan, None).unwrap();
    assert_eq!(out.store, fresh.store);
}

#[test]
fn missing_budget_tolerates_failures() {
    let (catalogue, mut plan) = plan();
    plan.max_missing = 30;
    let crashing = Crashing {
        served: AtomicUsize::new(0),
        limit: 25,
    };
    let out = run_probe(
        &crashing,
        &StubClassifier::seeded(5),
        &catalogue,
        &plan,
        None,
    )
    .unwrap();
    assert_eq!(out.summary.missing, 5);
    assert_eq!(out.store.total_samples(), 25);
}
