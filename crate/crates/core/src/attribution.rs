//! Per-prompt attribution trials and their Beta-Binomial aggregation.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classify::{
    filter_unreliable_prompts, ClassifyError, FilterReport, DEFAULT_ENTROPY_THRESHOLD,
};
pub use crate::metrics::Metric;
use crate::metrics::MetricError;
use crate::probe::{Fingerprint, FingerprintStore};
use crate::special::inv_reg_inc_beta;

/// Relative tolerance under which two distances count as tied.
pub const TIE_TOLERANCE: f64 = 1e-9;
pub const CREDIBLE_MASS: f64 = 0.95;

#[derive(Debug, Error)]
pub enum AttributionError {
    #[error("need at least two base models, got {0}")]
    InsufficientBases(usize),
    #[error("base model `{0}` given twice")]
    DuplicateBase(String),
    #[error("fingerprints disagree on prompt: `{0}` vs `{1}`")]
    PromptMismatch(String, String),
    #[error("prompt `{prompt}`: vocabulary `{suspect}` ({suspect_dim}) vs `{base}` ({base_dim})")]
    VocabularyMismatch {
        prompt: String,
        suspect: String,
        suspect_dim: usize,
        base: String,
        base_dim: usize,
    },
    #[error("invalid prior Beta({0}, {1})")]
    InvalidPrior(f64, f64),
    #[error("invalid beta quantile query: a={a}, b={b}, q={q}")]
    InvalidQuantile { a: f64, b: f64, q: f64 },
    #[error("no prompts left to attribute after filtering")]
    NoTrials,
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Classify(#[from] ClassifyError),
    #[error("cannot write report: {0}")]
    Io(#[from] std::io::Error),
}

/// Outcome of one prompt: which base model sits nearest to the suspect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub prompt_id: String,
    pub distances: BTreeMap<String, f64>,
    pub predicted_base: String,
    /// Another base was within tolerance of the minimum.
    pub tie: bool,
    /// At least one base had a different sample count from the suspect.
    pub unequal_sizes: bool,
}

/// Runs one trial. Ties resolve to the lexicographically smallest base id.
pub fn classify_trial(
    suspect: &Fingerprint,
    bases: &[&Fingerprint],
    metric: Metric,
) -> Result<TrialOutcome, AttributionError> {
    if bases.len() < 2 {
        return Err(AttributionError::InsufficientBases(bases.len()));
    }
    let mut distances = BTreeMap::new();
    let mut unequal_sizes = false;
    for base in bases {
        if base.prompt_id != suspect.prompt_id {
            return Err(AttributionError::PromptMismatch(
                suspect.prompt_id.clone(),
                base.prompt_id.clone(),
            ));
        }
        if base.vocabulary != suspect.vocabulary || base.dim() != suspect.dim() {
            return Err(AttributionError::VocabularyMismatch {
                prompt: suspect.prompt_id.clone(),
                suspect: suspect.vocabulary.clone(),
                suspect_dim: suspect.dim(),
                base: base.vocabulary.clone(),
                base_dim: base.dim(),
            });
        }
        if distances.contains_key(&base.model_id) {
            return Err(AttributionError::DuplicateBase(base.model_id.clone()));
        }
        unequal_sizes |= base.len() != suspect.len();
        distances.insert(base.model_id.clone(), metric.distance(suspect, base)?);
    }
    let min = distances.values().copied().fold(f64::INFINITY, f64::min);
    let near: Vec<&String> = distances
        .iter()
        .filter(|(_, &d)| d - min <= TIE_TOLERANCE * min)
        .map(|(id, _)| id)
        .collect();
    Ok(TrialOutcome {
        prompt_id: suspect.prompt_id.clone(),
        predicted_base: near[0].clone(),
        tie: near.len() > 1,
        unequal_sizes,
        distances,
    })
}

/// Number of trials won by `base_id`.
pub fn count_successes(trials: &[TrialOutcome], base_id: &str) -> usize {
    trials
        .iter()
        .filter(|t| t.predicted_base == base_id)
        .count()
}

/// Quantile of `Beta(a, b)`.
pub fn beta_quantile(a: f64, b: f64, q: f64) -> Result<f64, AttributionError> {
    if !(a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite() && (0.0..=1.0).contains(&q)) {
        return Err(AttributionError::InvalidQuantile { a, b, q });
    }
    Ok(match q {
        0.0 => 0.0,
        1.0 => 1.0,
        _ => inv_reg_inc_beta(a, b, q).clamp(0.0, 1.0),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub prior_alpha: f64,
    pub prior_beta: f64,
    pub successes: usize,
    pub failures: usize,
    pub alpha: f64,
    pub beta: f64,
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl PosteriorSummary {
    pub fn trials(&self) -> usize {
        self.successes + self.failures
    }
}

/// Posterior `Beta(alpha0 + s, beta0 + f)` with its mean and equal-tailed 95% interval.
pub fn posterior(
    successes: usize,
    failures: usize,
    prior_alpha: f64,
    prior_beta: f64,
) -> Result<PosteriorSummary, AttributionError> {
    if !(prior_alpha > 0.0 && prior_beta > 0.0 && prior_alpha.is_finite() && prior_beta.is_finite())
    {
        return Err(AttributionError::InvalidPrior(prior_alpha, prior_beta));
    }
    let alpha = prior_alpha + successes as f64;
    let beta = prior_beta + failures as f64;
    let tail = (1.0 - CREDIBLE_MASS) / 2.0;
    Ok(PosteriorSummary {
        prior_alpha,
        prior_beta,
        successes,
        failures,
        alpha,
        beta,
        mean: alpha / (alpha + beta),
        ci_low: beta_quantile(alpha, beta, tail)?,
        ci_high: beta_quantile(alpha, beta, 1.0 - tail)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub chance: f64,
    pub significant: bool,
    pub dominant: bool,
    pub below_chance: bool,
}

/// Flags against chance `1/K` for `K` candidate bases.
pub fn decide(summary: &PosteriorSummary, candidates: usize) -> Decision {
    let chance = 1.0 / candidates.max(1) as f64;
    Decision {
        chance,
        significant: summary.ci_low > chance,
        dominant: summary.ci_low > 0.5,
        below_chance: summary.ci_high < chance,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttributionConfig {
    pub metric: Metric,
    /// Prompts whose mean entropy exceeds this fraction of `ln K` are dropped.
    pub entropy_threshold: f64,
    pub prior_alpha: f64,
    pub prior_beta: f64,
}

impl Default for AttributionConfig {
    fn default() -> Self {
        Self {
            metric: Metric::W2,
            entropy_threshold: DEFAULT_ENTROPY_THRESHOLD,
            prior_alpha: 1.0,
            prior_beta: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseRow {
    pub base_id: String,
    pub posterior: PosteriorSummary,
    pub decision: Decision,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "base", rename_all = "snake_case")]
pub enum Verdict {
    Dominant(String),
    Significant(String),
    Inconclusive,
}

impl Verdict {
    pub fn exit_code(&self) -> i32 {
        match self {
            Verdict::Dominant(_) => 0,
            Verdict::Significant(_) => 10,
            Verdict::Inconclusive => 20,
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Verdict::Dominant(b) => write!(f, "dominant lineage: {b}"),
            Verdict::Significant(b) => write!(f, "significant lineage: {b}"),
            Verdict::Inconclusive => f.write_str("inconclusive"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionReport {
    pub suspect_id: String,
    pub config: AttributionConfig,
    pub base_ids: Vec<String>,
    pub filter: FilterReport,
    /// Retained prompts that some base store lacks.
    pub skipped: Vec<String>,
    pub trials: Vec<TrialOutcome>,
    pub rows: Vec<BaseRow>,
    pub verdict: Verdict,
}

impl AttributionReport {
    pub fn row(&self, base_id: &str) -> Option<&BaseRow> {
        self.rows.iter().find(|r| r.base_id == base_id)
    }

    pub fn to_json_string(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("report serializes");
        text.push('\n');
        text
    }

    /// One row per base model.
    pub fn to_csv_string(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "suspect",
            "base",
            "s",
            "f",
            "T",
            "mean",
            "ci_low",
            "ci_high",
            "significant",
            "dominant",
            "below_chance",
        ])
        .expect("in-memory write");
        for r in &self.rows {
            let p = &r.posterior;
            w.write_record([
                self.suspect_id.clone(),
                r.base_id.clone(),
                p.successes.to_string(),
                p.failures.to_string(),
                p.trials().to_string(),
                format!("{:.6}", p.mean),
                format!("{:.6}", p.ci_low),
                format!("{:.6}", p.ci_high),
                r.decision.significant.to_string(),
                r.decision.dominant.to_string(),
                r.decision.below_chance.to_string(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }

    /// One row per prompt with every base distance.
    pub fn trials_csv_string(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["prompt".to_string(), "predicted".into(), "tie".into()];
        header.extend(self.base_ids.iter().cloned());
        w.write_record(&header).expect("in-memory write");
        for t in &self.trials {
            let mut rec = vec![
                t.prompt_id.clone(),
                t.predicted_base.clone(),
                t.tie.to_string(),
            ];
            rec.extend(
                self.base_ids
                    .iter()
                    .map(|b| format!("{:e}", t.distances[b])),
            );
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }

    /// Writes `report.json`, `posterior.csv` and `trials.csv` into `dir`.
    pub fn write_to_dir(&self, dir: impl AsRef<Path>) -> Result<(), AttributionError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.json"), self.to_json_string())?;
        std::fs::write(dir.join("posterior.csv"), self.to_csv_string())?;
        std::fs::write(dir.join("trials.csv"), self.trials_csv_string())?;
        Ok(())
    }
}

/// Filters the suspect's prompts, runs one trial per remaining prompt and
/// summarizes each base model's share of wins.
pub fn attribute(
    suspect: &FingerprintStore,
    bases: &[&FingerprintStore],
    cfg: &AttributionConfig,
) -> Result<AttributionReport, AttributionError> {
    if bases.len() < 2 {
        return Err(AttributionError::InsufficientBases(bases.len()));
    }
    let mut base_ids: Vec<String> = Vec::with_capacity(bases.len());
    for b in bases {
        if base_ids.contains(&b.model_id) {
            return Err(AttributionError::DuplicateBase(b.model_id.clone()));
        }
        base_ids.push(b.model_id.clone());
    }
    posterior(0, 0, cfg.prior_alpha, cfg.prior_beta)?;

    let filter = filter_unreliable_prompts(suspect.iter(), cfg.entropy_threshold)?;
    let (usable, skipped): (Vec<&String>, Vec<&String>) = filter
        .retained
        .iter()
        .partition(|id| bases.iter().all(|b| b.get(id).is_some()));
    if usable.is_empty() {
        return Err(AttributionError::NoTrials);
    }

    let trials = usable
        .par_iter()
        .map(|id| {
            let fps: Vec<&Fingerprint> =
                bases.iter().map(|b| b.get(id).expect("checked")).collect();
            classify_trial(suspect.get(id).expect("retained"), &fps, cfg.metric)
        })
        .collect::<Result<Vec<_>, _>>()?;

    let t = trials.len();
    let rows = base_ids
        .iter()
        .map(|b| {
            let s = count_successes(&trials, b);
            let p = posterior(s, t - s, cfg.prior_alpha, cfg.prior_beta)?;
            Ok(BaseRow {
                base_id: b.clone(),
                decision: decide(&p, bases.len()),
                posterior: p,
            })
        })
        .collect::<Result<Vec<_>, AttributionError>>()?;

    let top = rows
        .iter()
        .max_by(|a, b| {
            a.posterior
                .successes
                .cmp(&b.posterior.successes)
                .then_with(|| b.base_id.cmp(&a.base_id))
        })
        .expect("at least two rows");
    let verdict = if top.decision.dominant {
        Verdict::Dominant(top.base_id.clone())
    } else if top.decision.significant {
        Verdict::Significant(top.base_id.clone())
    } else {
        Verdict::Inconclusive
    };

    Ok(AttributionReport {
        suspect_id: suspect.model_id.clone(),
        config: *cfg,
        base_ids,
        skipped: skipped.into_iter().cloned().collect(),
        filter,
        trials,
        rows,
        verdict,
    })
}
