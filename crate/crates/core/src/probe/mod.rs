//! Probing protocol: `N` generations per prompt, classification, fingerprint assembly.
//!
//! Every completed sample is appended to a journal before the run moves on, so an
//! interrupted probe resumes where it stopped and produces exactly the fingerprints
//! an uninterrupted run would have.

mod generators;
mod journal;
mod store;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalogue::PromptCatalogue;
use crate::classify::{
    classify_image, BackendError, CategoricalSample, Classifier, ClassifierRequest, ClassifyError,
    ImagePayload,
};

pub use generators::{DirectoryGenerator, HttpGenerator};
pub use journal::{Journal, JournalEntry};
pub use store::{load_fingerprints, save_fingerprints, FingerprintStore, StoreError};

/// Seed stride between consecutive catalogue prompts.
pub const PROMPT_SEED_STRIDE: u64 = 10_000;
pub const DEFAULT_SAMPLES_PER_PROMPT: usize = 30;

/// The uniform empirical measure over `N` classified generations for one (model, prompt).
#[derive(Debug, Clone, PartialEq)]
pub struct Fingerprint {
    pub model_id: String,
    pub prompt_id: String,
    /// Superordinate of the vocabulary the samples were classified against.
    pub vocabulary: String,
    pub samples: Vec<CategoricalSample>,
    pub seeds: Vec<u64>,
}

impl Fingerprint {
    pub fn new(
        model_id: impl Into<String>,
        prompt_id: impl Into<String>,
        vocabulary: impl Into<String>,
        samples: Vec<CategoricalSample>,
        seeds: Vec<u64>,
    ) -> Result<Self, StoreError> {
        let fp = Self {
            model_id: model_id.into(),
            prompt_id: prompt_id.into(),
            vocabulary: vocabulary.into(),
            samples,
            seeds,
        };
        fp.validate()?;
        Ok(fp)
    }

    pub fn validate(&self) -> Result<(), StoreError> {
        let invalid = |reason: String| StoreError::Invariant {
            prompt_id: self.prompt_id.clone(),
            reason,
        };
        if self.samples.is_empty() {
            return Err(invalid("fingerprint has no samples".into()));
        }
        if self.samples.len() != self.seeds.len() {
            return Err(invalid(format!(
                "{} samples but {} seeds",
                self.samples.len(),
                self.seeds.len()
            )));
        }
        let k = self.samples[0].dim();
        if let Some(s) = self.samples.iter().find(|s| s.dim() != k) {
            return Err(invalid(format!("mixed dimensionality {k} and {}", s.dim())));
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        if seeds.windows(2).any(|w| w[0] == w[1]) {
            return Err(invalid("seeds are not distinct".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Number of categories `K` (0 for an empty fingerprint).
    pub fn dim(&self) -> usize {
        self.samples.first().map_or(0, CategoricalSample::dim)
    }

    /// Mean categorical distribution over the samples.
    pub fn mean(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.dim()];
        for s in &self.samples {
            for (m, p) in mean.iter_mut().zip(s.probs()) {
                *m += p;
            }
        }
        let n = self.samples.len() as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        mean
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay_ms: 250,
        }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        Self {
            max_retries: 0,
            base_delay_ms: 0,
        }
    }

    fn delay(&self, attempt: u32) -> Duration {
        Duration::from_millis(self.base_delay_ms.saturating_mul(1 << attempt.min(16)))
    }

    /// Runs `op`, retrying retryable failures with exponential backoff.
    /// Returns the result and the number of retries spent.
    pub fn run<T>(
        &self,
        mut op: impl FnMut() -> Result<T, BackendError>,
    ) -> (Result<T, BackendError>, u32) {
        let mut attempt = 0;
        loop {
            match op() {
                Err(e) if e.is_retryable() && attempt < self.max_retries => {
                    log::debug!("retrying after {e} (attempt {})", attempt + 1);
                    std::thread::sleep(self.delay(attempt));
                    attempt += 1;
                }
                other => return (other, attempt),
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbePlan {
    pub model_id: String,
    pub prompt_ids: Vec<String>,
    pub n_per_prompt: usize,
    pub seed_base: u64,
    pub parallelism: usize,
    /// Samples allowed to stay missing before the run counts as failed.
    pub max_missing: usize,
    pub retry: RetryPolicy,
    pub width: u32,
    pub height: u32,
}

impl ProbePlan {
    /// Every catalogue prompt with the default protocol settings.
    pub fn new(model_id: impl Into<String>, catalogue: &PromptCatalogue) -> Self {
        Self {
            model_id: model_id.into(),
            prompt_ids: catalogue.prompts().iter().map(|p| p.id.clone()).collect(),
            n_per_prompt: DEFAULT_SAMPLES_PER_PROMPT,
            seed_base: 0,
            parallelism: 4,
            max_missing: 0,
            retry: RetryPolicy::default(),
            width: 1024,
            height: 1024,
        }
    }

    /// Seed of sample `index` of the prompt at `prompt_index` in the catalogue.
    pub fn seed_for(&self, prompt_index: usize, index: usize) -> u64 {
        self.seed_base + PROMPT_SEED_STRIDE * prompt_index as u64 + index as u64
    }

    fn validate(&self, catalogue: &PromptCatalogue) -> Result<(), ProbeError> {
        if self.n_per_prompt == 0 || self.n_per_prompt as u64 > PROMPT_SEED_STRIDE {
            return Err(ProbeError::InvalidPlan(format!(
                "n_per_prompt must be in 1..={PROMPT_SEED_STRIDE}"
            )));
        }
        if self.parallelism == 0 {
            return Err(ProbeError::InvalidPlan(
                "parallelism must be at least 1".into(),
            ));
        }
        if let Some(id) = self
            .prompt_ids
            .iter()
            .find(|id| catalogue.prompt(id).is_none())
        {
            return Err(ProbeError::UnknownPrompt(id.clone()));
        }
        Ok(())
    }
}

/// One image-generation call.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenerationRequest {
    pub prompt_id: String,
    /// Sample index within the prompt, `0..n_per_prompt`.
    pub index: usize,
    pub prompt: String,
    pub seed: u64,
    pub width: u32,
    pub height: u32,
}

/// A text-to-image model. Implementations must tolerate concurrent calls.
pub trait Generator: Send + Sync {
    fn generate(&self, request: &GenerationRequest) -> Result<ImagePayload, BackendError>;
}

impl<G: Generator + ?Sized> Generator for &G {
    fn generate(&self, request: &GenerationRequest) -> Result<ImagePayload, BackendError> {
        (**self).generate(request)
    }
}

impl<G: Generator + ?Sized> Generator for Box<G> {
    fn generate(&self, request: &GenerationRequest) -> Result<ImagePayload, BackendError> {
        (**self).generate(request)
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum TaskError {
    #[error("generation failed for {prompt_id}#{index}: {source}")]
    Generation {
        prompt_id: String,
        index: usize,
        source: BackendError,
    },
    #[error("classification failed for {prompt_id}#{index}: {source}")]
    Classification {
        prompt_id: String,
        index: usize,
        source: ClassifyError,
    },
}

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("invalid probe plan: {0}")]
    InvalidPlan(String),
    #[error("prompt `{0}` is not in the catalogue")]
    UnknownPrompt(String),
    #[error("probe incomplete: {completed} samples done, {missing} missing (first failure: {cause}); rerun to resume{}", journal_hint(.journal))]
    Incomplete {
        completed: usize,
        missing: usize,
        journal: Option<PathBuf>,
        cause: TaskError,
    },
    #[error("journal error: {0}")]
    Journal(#[from] std::io::Error),
    #[error(transparent)]
    Store(#[from] StoreError),
}

fn journal_hint(journal: &Option<PathBuf>) -> String {
    journal
        .as_ref()
        .map(|p| format!(" from {}", p.display()))
        .unwrap_or_default()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProbeSummary {
    pub model_id: String,
    pub prompts: usize,
    /// Samples present in the finished store.
    pub samples: usize,
    /// Of those, samples recovered from the journal.
    pub resumed: usize,
    pub retries: u64,
    pub missing: usize,
}

impl ProbeSummary {
    /// Spend for generating every sample in the store at `unit_price` per image.
    pub fn cost_estimate(&self, unit_price: f64) -> f64 {
        self.samples as f64 * unit_price
    }
}

#[derive(Debug, Clone)]
pub struct ProbeOutput {
    pub store: FingerprintStore,
    pub summary: ProbeSummary,
}

struct Task<'a> {
    prompt_id: &'a str,
    rendered: &'a str,
    labels: &'a [String],
    index: usize,
    seed: u64,
}

/// Runs the probing protocol for one model.
///
/// With `journal` set, completed samples found there are reused and new ones are
/// appended as they finish. Output is ordered by catalogue prompt and sample
/// index, independent of `parallelism`.
pub fn run_probe<G, C>(
    generator: &G,
    classifier: &C,
    catalogue: &PromptCatalogue,
    plan: &ProbePlan,
    journal: Option<&Path>,
) -> Result<ProbeOutput, ProbeError>
where
    G: Generator + ?Sized,
    C: Classifier + ?Sized,
{
    plan.validate(catalogue)?;

    let mut done: BTreeMap<(String, usize), (u64, CategoricalSample)> = BTreeMap::new();
    let journal = match journal {
        Some(path) => {
            let (j, entries) = Journal::open(path, &plan.model_id)?;
            for e in entries {
                done.insert((e.prompt_id, e.index), (e.seed, e.sample));
            }
            Some(j)
        }
        None => None,
    };
    let mut tasks = Vec::new();
    for id in &plan.prompt_ids {
        let prompt_index = catalogue.prompt_index(id).expect("validated");
        let prompt = &catalogue.prompts()[prompt_index];
        let labels = &catalogue.vocabulary_for(prompt).labels;
        for index in 0..plan.n_per_prompt {
            let seed = plan.seed_for(prompt_index, index);
            match done.get(&(id.clone(), index)) {
                Some((s, sample)) if *s == seed && sample.dim() == labels.len() => continue,
                Some(_) => {
                    log::warn!("journal entry {id}#{index} does not match the plan, regenerating");
                    done.remove(&(id.clone(), index));
                }
                None => {}
            }
            tasks.push(Task {
                prompt_id: id,
                rendered: &prompt.rendered,
                labels,
                index,
                seed,
            });
        }
    }
    let resumed = plan.prompt_ids.len() * plan.n_per_prompt - tasks.len();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(plan.parallelism)
        .build()
        .map_err(|e| ProbeError::InvalidPlan(e.to_string()))?;
    let retries = AtomicUsize::new(0);
    let failures = AtomicUsize::new(0);
    let abort = AtomicBool::new(false);
    let journal = journal.map(Mutex::new);
    let first_error: Mutex<Option<TaskError>> = Mutex::new(None);
    let journal_error: Mutex<Option<std::io::Error>> = Mutex::new(None);

    let fresh: Vec<(String, usize, u64, CategoricalSample)> = pool.install(|| {
        tasks
            .par_iter()
            .filter_map(|task| {
                if abort.load(Ordering::SeqCst) {
                    return None;
                }
                match run_task(generator, classifier, plan, task, &retries) {
                    Ok(sample) => {
                        if let Some(j) = &journal {
                            let entry = JournalEntry {
                                model_id: plan.model_id.clone(),
                                prompt_id: task.prompt_id.to_string(),
                                index: task.index,
                                seed: task.seed,
                                sample: sample.clone(),
                            };
                            if let Err(e) = j.lock().expect("journal poisoned").append(&entry) {
                                abort.store(true, Ordering::SeqCst);
                                journal_error.lock().unwrap().get_or_insert(e);
                                return None;
                            }
                        }
                        Some((task.prompt_id.to_string(), task.index, task.seed, sample))
                    }
                    Err(e) => {
                        log::warn!("{e}");
                        first_error.lock().unwrap().get_or_insert(e);
                        if failures.fetch_add(1, Ordering::SeqCst) + 1 > plan.max_missing {
                            abort.store(true, Ordering::SeqCst);
                        }
                        None
                    }
                }
            })
            .collect()
    });

    if let Some(e) = journal_error.into_inner().unwrap() {
        return Err(ProbeError::Journal(e));
    }
    for (prompt_id, index, seed, sample) in fresh {
        done.insert((prompt_id, index), (seed, sample));
    }

    let planned = plan.prompt_ids.len() * plan.n_per_prompt;
    let completed = plan
        .prompt_ids
        .iter()
        .flat_map(|id| (0..plan.n_per_prompt).map(move |i| (id.clone(), i)))
        .filter(|k| done.contains_key(k))
        .count();
    let missing = planned - completed;
    let empty_prompt = plan
        .prompt_ids
        .iter()
        .any(|id| !(0..plan.n_per_prompt).any(|i| done.contains_key(&(id.clone(), i))));
    if missing > plan.max_missing || (missing > 0 && empty_prompt) {
        let cause = first_error
            .into_inner()
            .unwrap()
            .unwrap_or(TaskError::Generation {
                prompt_id: String::new(),
                index: 0,
                source: BackendError::Fatal("run aborted".into()),
            });
        return Err(ProbeError::Incomplete {
            completed,
            missing,
            journal: journal.map(|j| j.into_inner().unwrap().path().to_path_buf()),
            cause,
        });
    }

    let mut store = FingerprintStore::new(plan.model_id.clone());
    for id in &plan.prompt_ids {
        let prompt = catalogue.prompt(id).expect("validated");
        let mut samples = Vec::with_capacity(plan.n_per_prompt);
        let mut seeds = Vec::with_capacity(plan.n_per_prompt);
        for index in 0..plan.n_per_prompt {
            if let Some((seed, sample)) = done.get(&(id.clone(), index)) {
                seeds.push(*seed);
                samples.push(sample.clone());
            }
        }
        store.insert(Fingerprint::new(
            plan.model_id.clone(),
            id.clone(),
            prompt.superordinate.clone(),
            samples,
            seeds,
        )?);
    }

    let summary = ProbeSummary {
        model_id: plan.model_id.clone(),
        prompts: plan.prompt_ids.len(),
        samples: completed,
        resumed,
        retries: retries.load(Ordering::SeqCst) as u64,
        missing,
    };
    Ok(ProbeOutput { store, summary })
}

fn run_task<G, C>(
    generator: &G,
    classifier: &C,
    plan: &ProbePlan,
    task: &Task<'_>,
    retries: &AtomicUsize,
) -> Result<CategoricalSample, TaskError>
where
    G: Generator + ?Sized,
    C: Classifier + ?Sized,
{
    let request = GenerationRequest {
        prompt_id: task.prompt_id.to_string(),
        index: task.index,
        prompt: task.rendered.to_string(),
        seed: task.seed,
        width: plan.width,
        height: plan.height,
    };
    let (image, spent) = plan.retry.run(|| generator.generate(&request));
    retries.fetch_add(spent as usize, Ordering::Relaxed);
    let image = image.map_err(|source| TaskError::Generation {
        prompt_id: task.prompt_id.to_string(),
        index: task.index,
        source,
    })?;

    let classification_error = |source| TaskError::Classification {
        prompt_id: task.prompt_id.to_string(),
        index: task.index,
        source,
    };
    let request =
        ClassifierRequest::new(image, task.labels.to_vec()).map_err(classification_error)?;
    let mut spent = 0;
    loop {
        match classify_image(classifier, &request) {
            Err(ClassifyError::Backend(e))
                if e.is_retryable() && spent < plan.retry.max_retries =>
            {
                std::thread::sleep(plan.retry.delay(spent));
                spent += 1;
            }
            other => {
                retries.fetch_add(spent as usize, Ordering::Relaxed);
                return other.map_err(classification_error);
            }
        }
    }
}

/// Maps an HTTP status to the retryable/fatal split used by the backends.
pub(crate) fn http_status(response: &reqwest::blocking::Response) -> Result<(), BackendError> {
    let status = response.status();
    if status.is_success() {
        Ok(())
    } else if status.is_server_error() || status.as_u16() == 429 || status.as_u16() == 408 {
        Err(BackendError::Transport(format!("HTTP {status}")))
    } else {
        Err(BackendError::Fatal(format!("HTTP {status}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalogue::build_default_catalogue;
    use crate::classify::StubClassifier;
    use std::sync::atomic::AtomicU32;

    struct EchoGenerator;

    impl Generator for EchoGenerator {
        fn generate(&self, r: &GenerationRequest) -> Result<ImagePayload, BackendError> {
            Ok(ImagePayload {
                bytes: format!("{}:{}", r.prompt, r.seed).into_bytes(),
                media_type: "image/png".into(),
            })
        }
    }

    struct Flaky {
        failures_left: AtomicU32,
    }

    impl Generator for Flaky {
        fn generate(&self, r: &GenerationRequest) -> Result<ImagePayload, BackendError> {
            if self
                .failures_left
                .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
                .is_ok()
            {
                return Err(BackendError::Transport("reset".into()));
            }
            EchoGenerator.generate(r)
        }
    }

    fn small_plan(cat: &PromptCatalogue, prompts: usize, n: usize) -> ProbePlan {
        let mut plan = ProbePlan::new("m", cat);
        plan.prompt_ids.truncate(prompts);
        plan.n_per_prompt = n;
        plan.retry = RetryPolicy::none();
        plan
    }

    #[test]
    fn single_sample_uses_seed_base() {
        let cat = build_default_catalogue();
        let mut plan = small_plan(&cat, 1, 1);
        plan.seed_base = 77;
        let out = run_probe(
            &EchoGenerator,
            &StubClassifier::seeded(0),
            &cat,
            &plan,
            None,
        )
        .unwrap();
        assert_eq!(out.store.len(), 1);
        let fp = out.store.get(&plan.prompt_ids[0]).unwrap();
        assert_eq!(fp.seeds, vec![77]);
        assert_eq!(fp.len(), 1);
    }

    #[test]
    fn seeds_follow_prompt_stride() {
        let cat = build_default_catalogue();
        let plan = small_plan(&cat, 3, 4);
        let out = run_probe(
            &EchoGenerator,
            &StubClassifier::seeded(0),
            &cat,
            &plan,
            None,
        )
        .unwrap();
        let fp = out.store.get(&plan.prompt_ids[2]).unwrap();
        assert_eq!(fp.seeds, vec![20_000, 20_001, 20_002, 20_003]);
        assert_eq!(out.summary.samples, 12);
    }

    #[test]
    fn parallelism_does_not_change_output() {
        let cat = build_default_catalogue();
        let mut plan = small_plan(&cat, 5, 6);
        plan.parallelism = 1;
        let a = run_probe(
            &EchoGenerator,
            &StubClassifier::seeded(3),
            &cat,
            &plan,
            None,
        )
        .unwrap();
        plan.parallelism = 7;
        let b = run_probe(
            &EchoGenerator,
            &StubClassifier::seeded(3),
            &cat,
            &plan,
            None,
        )
        .unwrap();
        assert_eq!(a.store, b.store);
    }

    #[test]
    fn transport_errors_are_retried() {
        let cat = build_default_catalogue();
        let mut plan = small_plan(&cat, 1, 2);
        plan.retry = RetryPolicy {
            max_retries: 3,
            base_delay_ms: 0,
        };
        plan.parallelism = 1;
        let flaky = Flaky {
            failures_left: AtomicU32::new(3),
        };
        let out = run_probe(&flaky, &StubClassifier::seeded(0), &cat, &plan, None).unwrap();
        assert_eq!(out.summary.retries, 3);
        assert_eq!(out.summary.samples, 2);
    }

    #[test]
    fn exhausted_retries_abort_with_incomplete() {
        let cat = build_default_catalogue();
        let mut plan = small_plan(&cat, 1, 2);
        plan.retry = RetryPolicy {
            max_retries: 1,
            base_delay_ms: 0,
        };
        let flaky = Flaky {
            failures_left: AtomicU32::new(100),
        };
        let err = run_probe(&flaky, &StubClassifier::seeded(0), &cat, &plan, None).unwrap_err();
        assert!(matches!(
            err,
            ProbeError::Incomplete {
                completed: 0,
                missing: 2,
                ..
            }
        ));
    }

    #[test]
    fn unknown_prompt_and_bad_plan_rejected() {
        let cat = build_default_catalogue();
        let mut plan = small_plan(&cat, 1, 1);
        plan.prompt_ids.push("nope".into());
        let err = run_probe(
            &EchoGenerator,
            &StubClassifier::seeded(0),
            &cat,
            &plan,
            None,
        )
        .unwrap_err();
        assert!(matches!(err, ProbeError::UnknownPrompt(id) if id == "nope"));
        let mut plan = small_plan(&cat, 1, 0);
        plan.n_per_prompt = 0;
        assert!(matches!(
            run_probe(
                &EchoGenerator,
                &StubClassifier::seeded(0),
                &cat,
                &plan,
                None
            ),
            Err(ProbeError::InvalidPlan(_))
        ));
    }

    #[test]
    fn fingerprint_invariants() {
        let s = CategoricalSample::uniform(3);
        assert!(Fingerprint::new("m", "p", "v", vec![], vec![]).is_err());
        assert!(Fingerprint::new("m", "p", "v", vec![s.clone(), s.clone()], vec![1, 1]).is_err());
        assert!(Fingerprint::new("m", "p", "v", vec![s.clone()], vec![1, 2]).is_err());
        assert!(Fingerprint::new(
            "m",
            "p",
            "v",
            vec![s.clone(), CategoricalSample::uniform(4)],
            vec![1, 2]
        )
        .is_err());
        let fp = Fingerprint::new(
            "m",
            "p",
            "v",
            vec![s, CategoricalSample::one_hot(3, 0)],
            vec![1, 2],
        )
        .unwrap();
        let mean = fp.mean();
        assert!((mean[0] - (1.0 / 6.0 + 0.5)).abs() < 1e-15);
    }

    #[test]
    fn retry_backoff_doubles() {
        let p = RetryPolicy {
            max_retries: 3,
            base_delay_ms: 100,
        };
        assert_eq!(p.delay(0), Duration::from_millis(100));
        assert_eq!(p.delay(2), Duration::from_millis(400));
    }
}
