//! Black-box lineage attribution for text-to-image models.
//!
//! A suspect model is probed with compositional, underspecified prompts. Every
//! generated image is reduced to a categorical vector over a fixed vocabulary by
//! a zero-shot classifier, and the `N` vectors per prompt form a uniform
//! empirical measure (a [`Fingerprint`]). Fingerprints are compared with the
//! exact 2-Wasserstein distance, each prompt votes for its nearest base model,
//! and the votes are aggregated in a Beta-Binomial posterior whose credible
//! interval drives the significance and dominance decisions.
//!
//! Module map:
//!
//! - [`catalogue`]: probe prompts and category vocabularies.
//! - [`classify`]: the classifier boundary, categorical samples, entropy filtering.
//! - [`probe`]: the generation boundary, probing protocol, journal and fingerprint stores.
//! - [`simulator`]: a synthetic world of base lineages and fine-tunes.
//! - [`metrics`]: W2, JSD, distance matrices and heatmap normalization.
//! - [`attribution`]: trials, posterior, decision rules and reports.

#![forbid(unsafe_code)]

pub mod attribution;
pub mod catalogue;
pub mod classify;
pub mod metrics;
pub mod probe;
pub mod simulator;

mod assignment;
mod special;
mod util;

pub use attribution::{
    attribute, beta_quantile, classify_trial, count_successes, decide, posterior,
    AttributionConfig, AttributionError, AttributionReport, BaseRow, Decision, Metric,
    PosteriorSummary, TrialOutcome, Verdict,
};
pub use catalogue::{
    build_default_catalogue, load_catalogue, render_prompt, CatalogueError, CategoryVocabulary,
    CompositionalPrompt, PromptCatalogue,
};
pub use classify::{
    classify_image, entropy, filter_unreliable_prompts, BackendError, CategoricalSample,
    Classifier, ClassifierRequest, ClassifyError, FilterReport, ImagePayload, Scores,
};
pub use metrics::{
    average_matrices, distance_matrix, jsd, normalize_columns, wasserstein2, DistanceMatrix,
    MetricError,
};
pub use probe::{
    load_fingerprints, run_probe, save_fingerprints, Fingerprint, FingerprintStore,
    GenerationRequest, Generator, ProbeError, ProbePlan, ProbeSummary, RetryPolicy, StoreError,
};
pub use simulator::{
    fine_tune, make_lineage, sample_fingerprint, FineTuneConfig, LineageParams, SimClassifier,
    SimGenerator, SimModelSpec, WorldSpec,
};
