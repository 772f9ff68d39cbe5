//! Zero-shot classification boundary and entropy-based prompt filtering.

mod backends;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::probe::Fingerprint;

pub use backends::{
    ClassifierFixture, FixtureEntry, HttpClassifier, RecordingClassifier, ReplayClassifier,
    StubClassifier,
};

/// Maximum allowed deviation of a probability vector's sum from 1.
pub const SIMPLEX_TOLERANCE: f64 = 1e-6;
/// Drift above this (but within [`SIMPLEX_TOLERANCE`]) is renormalized away.
pub const RENORMALIZE_THRESHOLD: f64 = 1e-9;
/// Default fraction of `ln K` above which a prompt's mean entropy marks it unreliable.
pub const DEFAULT_ENTROPY_THRESHOLD: f64 = 0.9;

/// A point on the probability simplex: one classified image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct CategoricalSample {
    probs: Vec<f64>,
}

impl CategoricalSample {
    pub fn new(probs: Vec<f64>) -> Result<Self, ClassifyError> {
        if probs.is_empty() {
            return Err(ClassifyError::Dimension {
                expected: 1,
                got: 0,
            });
        }
        if let Some(&p) = probs.iter().find(|p| !p.is_finite()) {
            return Err(ClassifyError::NonFinite(p));
        }
        if let Some(&p) = probs.iter().find(|&&p| p < 0.0) {
            return Err(ClassifyError::Negative(p));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
            return Err(ClassifyError::OutOfTolerance { sum });
        }
        Ok(Self { probs })
    }

    /// Validates and rescales to unit sum when the drift exceeds [`RENORMALIZE_THRESHOLD`].
    pub fn normalized(probs: Vec<f64>) -> Result<Self, ClassifyError> {
        let mut sample = Self::new(probs)?;
        let sum: f64 = sample.probs.iter().sum();
        if (sum - 1.0).abs() > RENORMALIZE_THRESHOLD {
            sample.probs.iter_mut().for_each(|p| *p /= sum);
        }
        Ok(sample)
    }

    /// Uniform distribution over `k` categories.
    pub fn uniform(k: usize) -> Self {
        Self {
            probs: vec![1.0 / k as f64; k],
        }
    }

    /// All mass on `index`.
    pub fn one_hot(k: usize, index: usize) -> Self {
        let mut probs = vec![0.0; k];
        probs[index] = 1.0;
        Self { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn dim(&self) -> usize {
        self.probs.len()
    }
}

impl TryFrom<Vec<f64>> for CategoricalSample {
    type Error = ClassifyError;

    fn try_from(probs: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(probs)
    }
}

impl From<CategoricalSample> for Vec<f64> {
    fn from(s: CategoricalSample) -> Self {
        s.probs
    }
}

/// Raw image bytes plus their media type. Never decoded here.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImagePayload {
    pub bytes: Vec<u8>,
    pub media_type: String,
}

#[derive(Debug, Clone)]
pub struct ClassifierRequest {
    pub image: ImagePayload,
    labels: Vec<String>,
}

impl ClassifierRequest {
    pub fn new(image: ImagePayload, labels: Vec<String>) -> Result<Self, ClassifyError> {
        if labels.is_empty() {
            return Err(ClassifyError::InvalidRequest("label list is empty".into()));
        }
        Ok(Self { image, labels })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }
}

/// What a backend hands back: either a probability vector or raw logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scores {
    Probs(Vec<f64>),
    Logits(Vec<f64>),
}

impl Scores {
    pub fn len(&self) -> usize {
        match self {
            Scores::Probs(v) | Scores::Logits(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum BackendError {
    /// Network or service hiccup; the call may be retried.
    #[error("transport error: {0}")]
    Transport(String),
    #[error("backend error: {0}")]
    Fatal(String),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Transport(_))
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ClassifyError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("expected {expected} probabilities, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("probabilities sum to {sum}, outside tolerance")]
    OutOfTolerance { sum: f64 },
    #[error("negative probability {0}")]
    Negative(f64),
    #[error("non-finite score {0}")]
    NonFinite(f64),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

/// A zero-shot image classifier. Implementations must tolerate concurrent calls.
pub trait Classifier: Send + Sync {
    fn classify(&self, request: &ClassifierRequest) -> Result<Scores, BackendError>;
}

impl<C: Classifier + ?Sized> Classifier for &C {
    fn classify(&self, request: &ClassifierRequest) -> Result<Scores, BackendError> {
        (**self).classify(request)
    }
}

impl<C: Classifier + ?Sized> Classifier for Box<C> {
    fn classify(&self, request: &ClassifierRequest) -> Result<Scores, BackendError> {
        (**self).classify(request)
    }
}

impl<C: Classifier + ?Sized> Classifier for std::sync::Arc<C> {
    fn classify(&self, request: &ClassifierRequest) -> Result<Scores, BackendError> {
        (**self).classify(request)
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Classifies one image into a probability vector aligned with the request labels.
pub fn classify_image<C: Classifier + ?Sized>(
    backend: &C,
    request: &ClassifierRequest,
) -> Result<CategoricalSample, ClassifyError> {
    let scores = backend.classify(request)?;
    let k = request.labels().len();
    if scores.len() != k {
        return Err(ClassifyError::Dimension {
            expected: k,
            got: scores.len(),
        });
    }
    match scores {
        Scores::Probs(p) => CategoricalSample::normalized(p),
        Scores::Logits(l) => {
            if let Some(&x) = l.iter().find(|x| !x.is_finite()) {
                return Err(ClassifyError::NonFinite(x));
            }
            CategoricalSample::normalized(softmax(&l))
        }
    }
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn entropy(sample: &CategoricalSample) -> f64 {
    let h: f64 = sample
        .probs()
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum();
    h.max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedPrompt {
    pub prompt_id: String,
    pub mean_entropy: f64,
    pub max_entropy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub threshold_fraction: f64,
    pub retained: Vec<String>,
    pub dropped: Vec<DroppedPrompt>,
}

/// Drops prompts whose mean sample entropy exceeds `threshold_fraction * ln K`.
///
/// Only the fingerprints passed in are inspected; callers pass the suspect's.
pub fn filter_unreliable_prompts<'a, I>(
    fingerprints: I,
    threshold_fraction: f64,
) -> Result<FilterReport, ClassifyError>
where
    I: IntoIterator<Item = &'a Fingerprint>,
{
    if !(threshold_fraction > 0.0 && threshold_fraction <= 1.0) {
        return Err(ClassifyError::InvalidInput(format!(
            "threshold fraction {threshold_fraction} outside (0, 1]"
        )));
    }
    // Deduplicate by prompt id while keeping the caller's order.
    let mut seen = BTreeMap::new();
    let mut report = FilterReport {
        threshold_fraction,
        retained: Vec::new(),
        dropped: Vec::new(),
    };
    for fp in fingerprints {
        if seen.insert(fp.prompt_id.clone(), ()).is_some() {
            continue;
        }
        if fp.samples.is_empty() {
            return Err(ClassifyError::InvalidInput(format!(
                "fingerprint for `{}` is empty",
                fp.prompt_id
            )));
        }
        let k = fp.samples[0].dim();
        let max_entropy = (k as f64).ln();
        let mean = fp.samples.iter().map(entropy).sum::<f64>() / fp.samples.len() as f64;
        if mean > threshold_fraction * max_entropy {
            report.dropped.push(DroppedPrompt {
                prompt_id: fp.prompt_id.clone(),
                mean_entropy: mean,
                max_entropy,
            });
        } else {
            report.retained.push(fp.prompt_id.clone());
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    struct Fixed(Scores);

    impl Classifier for Fixed {
        fn classify(&self, _: &ClassifierRequest) -> Result<Scores, BackendError> {
            Ok(self.0.clone())
        }
    }

    fn request(k: usize) -> ClassifierRequest {
        let labels = (0..k).map(|i| format!("l{i}")).collect();
        ClassifierRequest::new(
            ImagePayload {
                bytes: vec![1, 2, 3],
                media_type: "image/png".into(),
            },
            labels,
        )
        .unwrap()
    }

    fn fp(id: &str, samples: Vec<CategoricalSample>) -> Fingerprint {
        let seeds = (0..samples.len() as u64).collect();
        Fingerprint::new("m", id, "v", samples, seeds).unwrap()
    }

    #[test]
    fn equal_logits_give_uniform() {
        let s = classify_image(&Fixed(Scores::Logits(vec![0.0; 3])), &request(3)).unwrap();
        for p in s.probs() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn one_hot_passes_through() {
        let s =
            classify_image(&Fixed(Scores::Probs(vec![0.0, 1.0, 0.0, 0.0])), &request(4)).unwrap();
        assert_eq!(s.probs(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn small_drift_renormalized_large_drift_rejected() {
        let s = classify_image(&Fixed(Scores::Probs(vec![0.5, 0.5000005])), &request(2)).unwrap();
        assert!((s.probs().iter().sum::<f64>() - 1.0).abs() < 1e-15);
        let e = classify_image(&Fixed(Scores::Probs(vec![0.5, 0.51])), &request(2)).unwrap_err();
        assert!(matches!(e, ClassifyError::OutOfTolerance { .. }));
    }

    #[test]
    fn wrong_dimension_rejected() {
        let e = classify_image(&Fixed(Scores::Probs(vec![0.5, 0.5])), &request(3)).unwrap_err();
        assert_eq!(
            e,
            ClassifyError::Dimension {
                expected: 3,
                got: 2
            }
        );
    }

    #[test]
    fn empty_labels_rejected() {
        let img = ImagePayload {
            bytes: vec![],
            media_type: "image/png".into(),
        };
        assert!(ClassifierRequest::new(img, vec![]).is_err());
    }

    #[test]
    fn entropy_examples() {
        assert!((entropy(&CategoricalSample::uniform(6)) - 6f64.ln()).abs() < 1e-12);
        assert!((entropy(&CategoricalSample::uniform(6)) - 1.7918).abs() < 1e-4);
        assert_eq!(entropy(&CategoricalSample::one_hot(5, 2)), 0.0);
        let half = CategoricalSample::new(vec![0.5, 0.5, 0.0, 0.0]).unwrap();
        assert!((entropy(&half) - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn filter_one_hot_keeps_everything() {
        let fps: Vec<_> = (0..4)
            .map(|i| fp(&format!("p{i}"), vec![CategoricalSample::one_hot(5, i); 3]))
            .collect();
        for t in [0.01, 0.5, 1.0] {
            let r = filter_unreliable_prompts(&fps, t).unwrap();
            assert_eq!(r.retained.len(), 4);
            assert!(r.dropped.is_empty());
        }
    }

    #[test]
    fn filter_uniform_drops_everything() {
        let fps: Vec<_> = (0..4)
            .map(|i| fp(&format!("p{i}"), vec![CategoricalSample::uniform(3 + i); 3]))
            .collect();
        let r = filter_unreliable_prompts(&fps, 0.9).unwrap();
        assert!(r.retained.is_empty());
        assert_eq!(r.dropped.len(), 4);
    }

    #[test]
    fn filter_drops_exactly_the_high_entropy_prompts() {
        let k = 6;
        let ln_k = (k as f64).ln();
        let sharp = CategoricalSample::new(vec![0.9, 0.02, 0.02, 0.02, 0.02, 0.02]).unwrap();
        let flat = CategoricalSample::new(vec![0.2, 0.16, 0.16, 0.16, 0.16, 0.16]).unwrap();
        let mut fps = Vec::new();
        for i in 0..10 {
            let samples = if i == 3 || i == 7 {
                vec![flat.clone(), flat.clone(), CategoricalSample::uniform(k)]
            } else {
                vec![sharp.clone(), flat.clone(), sharp.clone()]
            };
            fps.push(fp(&format!("p{i}"), samples));
        }
        // Oracle: mean entropies computed directly from the formula.
        let h = |p: &[f64]| -> f64 { p.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum() };
        let flat_mean = (2.0 * h(flat.probs()) + ln_k) / 3.0;
        let mixed_mean = (2.0 * h(sharp.probs()) + h(flat.probs())) / 3.0;
        assert!(flat_mean > 0.9 * ln_k && mixed_mean < 0.9 * ln_k);

        let r = filter_unreliable_prompts(&fps, 0.9).unwrap();
        let dropped: Vec<_> = r.dropped.iter().map(|d| d.prompt_id.as_str()).collect();
        assert_eq!(dropped, ["p3", "p7"]);
        assert!((r.dropped[0].mean_entropy - flat_mean).abs() < 1e-12);
        assert_eq!(r.retained.len(), 8);
    }

    #[test]
    fn filter_rejects_empty_fingerprint_and_bad_threshold() {
        let empty = Fingerprint {
            model_id: "m".into(),
            prompt_id: "p".into(),
            vocabulary: "v".into(),
            samples: vec![],
            seeds: vec![],
        };
        assert!(filter_unreliable_prompts([&empty], 0.9).is_err());
        let ok = fp("p", vec![CategoricalSample::uniform(2)]);
        assert!(filter_unreliable_prompts([&ok], 0.0).is_err());
        assert!(filter_unreliable_prompts([&ok], 1.5).is_err());
    }

    fn simplex(k: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..1.0, k).prop_filter_map("nonzero", |v| {
            let s: f64 = v.iter().sum();
            (s > 1e-6).then(|| v.into_iter().map(|x| x / s).collect())
        })
    }

    proptest! {
        #[test]
        fn entropy_permutation_invariant(v in simplex(6), rot in 0usize..6) {
            let mut w = v.clone();
            w.rotate_left(rot);
            w.swap(0, 5);
            let a = entropy(&CategoricalSample::new(v).unwrap());
            let b = entropy(&CategoricalSample::new(w).unwrap());
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn entropy_bounded_by_uniform(v in simplex(5)) {
            let h = entropy(&CategoricalSample::new(v.clone()).unwrap());
            let max = 5f64.ln();
            prop_assert!(h <= max + 1e-12);
            let dev = v.iter().map(|p| (p - 0.2).abs()).fold(0.0, f64::max);
            if dev > 1e-3 {
                prop_assert!(h < max);
            }
        }

        #[test]
        fn filter_is_monotone(
            vs in prop::collection::vec(simplex(4), 1..12),
            t1 in 0.05f64..1.0,
            t2 in 0.05f64..1.0,
        ) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let fps: Vec<_> = vs
                .into_iter()
                .enumerate()
                .map(|(i, v)| fp(&format!("p{i}"), vec![CategoricalSample::new(v).unwrap()]))
                .collect();
            let low = filter_unreliable_prompts(&fps, lo).unwrap();
            let high = filter_unreliable_prompts(&fps, hi).unwrap();
            for id in &low.retained {
                prop_assert!(high.retained.contains(id));
            }
        }

        #[test]
        fn classify_output_on_simplex(logits in prop::collection::vec(-50.0f64..50.0, 2..10)) {
            let k = logits.len();
            let s = classify_image(&Fixed(Scores::Logits(logits)), &request(k)).unwrap();
            let sum: f64 = s.probs().iter().sum();
            prop_assert!((sum - 1.0).abs() <= SIMPLEX_TOLERANCE);
            prop_assert!(s.probs().iter().all(|&p| p >= 0.0));
        }
    }
}
