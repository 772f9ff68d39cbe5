//! A synthetic world of semantic category generators.
//!
//! Each simulated model holds, per prompt, a mean categorical distribution `m_C`
//! and a concentration `kappa_C`; a "generation" is a draw from
//! `Dirichlet(kappa_C * m_C)`. A base lineage draws its means from a sparse
//! symmetric Dirichlet. Fine-tuning mixes each mean toward a random style
//! distribution with weight `s * (1 - r_C)^gamma`, so rarer prompts (higher `r_C`)
//! move less. Rarity follows the attribute count `k` as `1 - rho^k`.

use std::path::Path;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, OpenClosed01};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalogue::PromptCatalogue;
use crate::classify::{
    BackendError, CategoricalSample, Classifier, ClassifierRequest, ImagePayload, Scores,
};
use crate::probe::{
    run_probe, Fingerprint, FingerprintStore, GenerationRequest, Generator, ProbeError, ProbePlan,
};
use crate::util::{fnv1a, mix};

/// Media type of the payloads exchanged between [`SimGenerator`] and [`SimClassifier`].
pub const SIM_MEDIA_TYPE: &str = "application/vnd.lineage.sim-sample+json";

#[derive(Debug, Error)]
pub enum SimError {
    #[error("prompt `{0}` is not simulated by this model")]
    UnknownPrompt(String),
    #[error("invalid simulator parameter: {0}")]
    InvalidParameter(String),
    #[error("duplicate model id `{0}` in world")]
    DuplicateModel(String),
    #[error("cannot read world spec: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse simulator document: {0}")]
    Parse(#[from] serde_json::Error),
    #[error(transparent)]
    Probe(#[from] ProbeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LineageParams {
    /// Symmetric Dirichlet concentration for base means.
    pub alpha0: f64,
    /// Sampling concentration `kappa` around each mean.
    pub concentration: f64,
    /// Per-attribute commonness `rho` in (0, 1).
    pub commonness: f64,
}

impl Default for LineageParams {
    fn default() -> Self {
        Self {
            alpha0: 0.3,
            concentration: 50.0,
            commonness: 0.5,
        }
    }
}

impl LineageParams {
    fn validate(&self) -> Result<(), SimError> {
        if !(self.alpha0 > 0.0 && self.alpha0.is_finite()) {
            return Err(SimError::InvalidParameter(format!(
                "alpha0 = {}",
                self.alpha0
            )));
        }
        if !(self.concentration > 0.0 && self.concentration.is_finite()) {
            return Err(SimError::InvalidParameter(format!(
                "concentration = {}",
                self.concentration
            )));
        }
        if !(self.commonness > 0.0 && self.commonness < 1.0) {
            return Err(SimError::InvalidParameter(format!(
                "commonness = {}",
                self.commonness
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimPrompt {
    pub vocabulary: String,
    pub mean: Vec<f64>,
    pub concentration: f64,
    pub rarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimModelSpec {
    pub model_id: String,
    pub lineage_id: String,
    pub prompts: IndexMap<String, SimPrompt>,
}

impl SimModelSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        for (id, p) in &self.prompts {
            let sum: f64 = p.mean.iter().sum();
            if p.mean.len() < 2
                || (sum - 1.0).abs() > 1e-9
                || p.mean.iter().any(|&x| x.is_nan() || x < 0.0)
            {
                return Err(SimError::InvalidParameter(format!(
                    "mean of `{id}` is off the simplex"
                )));
            }
            if p.concentration.is_nan() || p.concentration <= 0.0 {
                return Err(SimError::InvalidParameter(format!(
                    "concentration of `{id}`"
                )));
            }
            if !(0.0..=1.0).contains(&p.rarity) {
                return Err(SimError::InvalidParameter(format!("rarity of `{id}`")));
            }
        }
        Ok(())
    }

    pub fn to_json_string(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("spec serializes");
        text.push('\n');
        text
    }

    pub fn from_json_str(text: &str) -> Result<Self, SimError> {
        let spec: Self = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SimError> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), SimError> {
        std::fs::write(path, self.to_json_string())?;
        Ok(())
    }

    fn prompt(&self, prompt_id: &str) -> Result<&SimPrompt, SimError> {
        self.prompts
            .get(prompt_id)
            .ok_or_else(|| SimError::UnknownPrompt(prompt_id.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FineTuneConfig {
    /// Shift strength `s` in [0, 1].
    pub strength: f64,
    pub style_shift_seed: u64,
    /// Rarity exponent `gamma` >= 0.
    pub rarity_exponent: f64,
}

impl FineTuneConfig {
    fn validate(&self) -> Result<(), SimError> {
        if !(0.0..=1.0).contains(&self.strength) {
            return Err(SimError::InvalidParameter(format!(
                "strength = {}",
                self.strength
            )));
        }
        if !(self.rarity_exponent >= 0.0 && self.rarity_exponent.is_finite()) {
            return Err(SimError::InvalidParameter(format!(
                "rarity exponent = {}",
                self.rarity_exponent
            )));
        }
        Ok(())
    }
}

/// Draws from `Dirichlet(alphas)`. Works in log space so tiny concentrations do
/// not underflow; zero entries stay at zero.
pub(crate) fn sample_dirichlet<R: Rng + ?Sized>(rng: &mut R, alphas: &[f64]) -> Vec<f64> {
    // Gamma(a) = Gamma(a + 1) * U^(1/a)
    let logs: Vec<f64> = alphas
        .iter()
        .map(|&a| {
            if a <= 0.0 {
                f64::NEG_INFINITY
            } else {
                let g = Gamma::new(a + 1.0, 1.0)
                    .expect("positive shape")
                    .sample(rng);
                let u: f64 = OpenClosed01.sample(rng);
                g.ln() + u.ln() / a
            }
        })
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logs.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    weights.into_iter().map(|w| w / total).collect()
}

/// `1 - rho^k`.
pub fn rarity(attribute_count: usize, commonness: f64) -> f64 {
    1.0 - commonness.powi(attribute_count as i32)
}

/// Mixing weight `s * (1 - r)^gamma`.
pub fn shift_weight(strength: f64, rarity: f64, rarity_exponent: f64) -> f64 {
    strength * (1.0 - rarity).powf(rarity_exponent)
}

/// `(1 - w) * mean + w * style`.
pub fn shift_mean(mean: &[f64], style: &[f64], weight: f64) -> Vec<f64> {
    mean.iter()
        .zip(style)
        .map(|(m, u)| (1.0 - weight) * m + weight * u)
        .collect()
}

/// A base model: per-prompt means from a symmetric `Dirichlet(alpha0)` over that
/// prompt's vocabulary.
pub fn make_lineage(
    model_id: impl Into<String>,
    seed: u64,
    catalogue: &PromptCatalogue,
    params: &LineageParams,
) -> Result<SimModelSpec, SimError> {
    params.validate()?;
    let model_id = model_id.into();
    let mut prompts = IndexMap::new();
    for prompt in catalogue.prompts() {
        let k = catalogue.vocabulary_for(prompt).len();
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, fnv1a(prompt.id.as_bytes())));
        let mean = sample_dirichlet(&mut rng, &vec![params.alpha0; k]);
        prompts.insert(
            prompt.id.clone(),
            SimPrompt {
                vocabulary: prompt.superordinate.clone(),
                mean,
                concentration: params.concentration,
                rarity: rarity(prompt.attribute_count(), params.commonness),
            },
        );
    }
    Ok(SimModelSpec {
        lineage_id: model_id.clone(),
        model_id,
        prompts,
    })
}

/// A derived model: each mean is mixed toward a style distribution drawn from
/// `Dirichlet(1)` with weight `s * (1 - r_C)^gamma`. Lineage and concentrations are kept.
pub fn fine_tune(
    base: &SimModelSpec,
    cfg: &FineTuneConfig,
    model_id: impl Into<String>,
) -> Result<SimModelSpec, SimError> {
    cfg.validate()?;
    let mut prompts = IndexMap::new();
    for (id, p) in &base.prompts {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.style_shift_seed, fnv1a(id.as_bytes())));
        let style = sample_dirichlet(&mut rng, &vec![1.0; p.mean.len()]);
        let w = shift_weight(cfg.strength, p.rarity, cfg.rarity_exponent);
        let mean = if w == 0.0 {
            p.mean.clone()
        } else {
            shift_mean(&p.mean, &style, w)
        };
        prompts.insert(id.clone(), SimPrompt { mean, ..p.clone() });
    }
    Ok(SimModelSpec {
        model_id: model_id.into(),
        lineage_id: base.lineage_id.clone(),
        prompts,
    })
}

fn draw_sample(spec: &SimModelSpec, prompt: &SimPrompt, seed: u64) -> CategoricalSample {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(fnv1a(spec.model_id.as_bytes()), seed));
    let alphas: Vec<f64> = prompt
        .mean
        .iter()
        .map(|m| m * prompt.concentration)
        .collect();
    let probs = sample_dirichlet(&mut rng, &alphas);
    CategoricalSample::normalized(probs).expect("Dirichlet draws lie on the simplex")
}

/// `n` draws with seeds `seed, seed + 1, ...`.
pub fn sample_fingerprint(
    spec: &SimModelSpec,
    prompt_id: &str,
    n: usize,
    seed: u64,
) -> Result<Fingerprint, SimError> {
    let prompt = spec.prompt(prompt_id)?;
    let seeds: Vec<u64> = (0..n as u64).map(|i| seed + i).collect();
    let samples = seeds
        .iter()
        .map(|&s| draw_sample(spec, prompt, s))
        .collect();
    Fingerprint::new(
        &spec.model_id,
        prompt_id,
        &prompt.vocabulary,
        samples,
        seeds,
    )
    .map_err(|e| SimError::InvalidParameter(e.to_string()))
}

/// Generation boundary backed by a simulated model. The "image" is the sampled
/// probability vector, encoded as JSON.
#[derive(Debug, Clone)]
pub struct SimGenerator {
    spec: SimModelSpec,
}

impl SimGenerator {
    pub fn new(spec: SimModelSpec) -> Self {
        Self { spec }
    }
}

impl Generator for SimGenerator {
    fn generate(&self, request: &GenerationRequest) -> Result<ImagePayload, BackendError> {
        let prompt = self
            .spec
            .prompt(&request.prompt_id)
            .map_err(|e| BackendError::Fatal(e.to_string()))?;
        let sample = draw_sample(&self.spec, prompt, request.seed);
        Ok(ImagePayload {
            bytes: serde_json::to_vec(sample.probs()).expect("floats serialize"),
            media_type: SIM_MEDIA_TYPE.to_string(),
        })
    }
}

/// Classifier boundary that decodes [`SimGenerator`] payloads.
#[derive(Debug, Clone, Copy, Default)]
pub struct SimClassifier;

impl Classifier for SimClassifier {
    fn classify(&self, request: &ClassifierRequest) -> Result<Scores, BackendError> {
        if request.image.media_type != SIM_MEDIA_TYPE {
            return Err(BackendError::Fatal(format!(
                "simulator classifier cannot read {}",
                request.image.media_type
            )));
        }
        let probs: Vec<f64> = serde_json::from_slice(&request.image.bytes)
            .map_err(|e| BackendError::Fatal(format!("corrupt simulator payload: {e}")))?;
        Ok(Scores::Probs(probs))
    }
}

/// Probes a simulated model through the regular pipeline.
pub fn probe_simulated(
    spec: &SimModelSpec,
    catalogue: &PromptCatalogue,
    plan: &ProbePlan,
) -> Result<FingerprintStore, SimError> {
    let out = run_probe(
        &SimGenerator::new(spec.clone()),
        &SimClassifier,
        catalogue,
        plan,
        None,
    )?;
    Ok(out.store)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FineTuneSpec {
    pub id: String,
    pub strength: f64,
    #[serde(default = "default_rarity_exponent")]
    pub rarity_exponent: f64,
    pub style_shift_seed: u64,
}

fn default_rarity_exponent() -> f64 {
    2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineageSpec {
    /// Id of the base model; also the lineage id.
    pub id: String,
    pub seed: u64,
    #[serde(default)]
    pub fine_tunes: Vec<FineTuneSpec>,
}

/// Description of a synthetic world for `simulate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    #[serde(default)]
    pub params: LineageParams,
    #[serde(default = "default_n")]
    pub n_per_prompt: usize,
    #[serde(default)]
    pub seed_base: u64,
    pub lineages: Vec<LineageSpec>,
}

fn default_n() -> usize {
    crate::probe::DEFAULT_SAMPLES_PER_PROMPT
}

impl WorldSpec {
    /// `lineages` base models, each with one fine-tune per entry of `strengths`.
    pub fn standard(lineages: usize, strengths: &[f64], rarity_exponent: f64, seed: u64) -> Self {
        let lineages = (0..lineages)
            .map(|l| LineageSpec {
                id: format!("base-{l}"),
                seed: mix(seed, l as u64),
                fine_tunes: strengths
                    .iter()
                    .enumerate()
                    .map(|(f, &s)| FineTuneSpec {
                        id: format!("base-{l}-ft{f}"),
                        strength: s,
                        rarity_exponent,
                        style_shift_seed: mix(seed ^ 0x5eed, (l * 1000 + f) as u64),
                    })
                    .collect(),
            })
            .collect();
        Self {
            params: LineageParams::default(),
            n_per_prompt: default_n(),
            seed_base: 0,
            lineages,
        }
    }

    pub fn from_json_str(text: &str) -> Result<Self, SimError> {
        Ok(serde_json::from_str(text)?)
    }

    /// Model specs in declaration order: each base followed by its fine-tunes.
    pub fn build(&self, catalogue: &PromptCatalogue) -> Result<Vec<SimModelSpec>, SimError> {
        if self.lineages.is_empty() {
            return Err(SimError::InvalidParameter("world has no lineages".into()));
        }
        let mut out: Vec<SimModelSpec> = Vec::new();
        for lineage in &self.lineages {
            let base = make_lineage(&lineage.id, lineage.seed, catalogue, &self.params)?;
            let mut specs = vec![base.clone()];
            for ft in &lineage.fine_tunes {
                let cfg = FineTuneConfig {
                    strength: ft.strength,
                    style_shift_seed: ft.style_shift_seed,
                    rarity_exponent: ft.rarity_exponent,
                };
                specs.push(fine_tune(&base, &cfg, &ft.id)?);
            }
            for spec in specs {
                if out.iter().any(|s| s.model_id == spec.model_id) {
                    return Err(SimError::DuplicateModel(spec.model_id));
                }
                out.push(spec);
            }
        }
        Ok(out)
    }

    /// Builds every model and probes it with the full catalogue.
    pub fn probe_all(
        &self,
        catalogue: &PromptCatalogue,
    ) -> Result<Vec<(SimModelSpec, FingerprintStore)>, SimError> {
        self.build(catalogue)?
            .into_iter()
            .map(|spec| {
                let mut plan = ProbePlan::new(spec.model_id.clone(), catalogue);
                plan.n_per_prompt = self.n_per_prompt;
                plan.seed_base = self.seed_base;
                let store = probe_simulated(&spec, catalogue, &plan)?;
                Ok((spec, store))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalogue::build_default_catalogue;
    use crate::metrics::wasserstein2;
    use proptest::prelude::*;

    fn linf(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    fn tv(a: &[f64], b: &[f64]) -> f64 {
        0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
    }

    #[test]
    fn huge_alpha_gives_uniform_means() {
        let cat = build_default_catalogue();
        let params = LineageParams {
            alpha0: 1e6,
            ..Default::default()
        };
        let spec = make_lineage("m", 3, &cat, &params).unwrap();
        for p in spec.prompts.values() {
            let k = p.mean.len() as f64;
            assert!(p.mean.iter().all(|m| (m - 1.0 / k).abs() < 1e-2));
        }
    }

    #[test]
    fn lineage_is_deterministic_and_valid() {
        let cat = build_default_catalogue();
        let a = make_lineage("m", 42, &cat, &LineageParams::default()).unwrap();
        let b = make_lineage("m", 42, &cat, &LineageParams::default()).unwrap();
        assert_eq!(a, b);
        a.validate().unwrap();
        assert_eq!(a.prompts.len(), 42);
        let c = make_lineage("m", 43, &cat, &LineageParams::default()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn rarity_formula() {
        assert_eq!(rarity(1, 0.5), 0.5);
        assert_eq!(rarity(2, 0.5), 0.75);
        let cat = build_default_catalogue();
        let spec = make_lineage("m", 1, &cat, &LineageParams::default()).unwrap();
        assert_eq!(
            spec.prompts["a_photo_of_a_wild_animal_in_a_forest"].rarity,
            0.5
        );
        assert_eq!(
            spec.prompts["a_photo_of_a_vibrant_single_flower_on_a_pot"].rarity,
            0.75
        );
    }

    #[test]
    fn invalid_params_rejected() {
        let cat = build_default_catalogue();
        let bad = LineageParams {
            alpha0: 0.0,
            ..Default::default()
        };
        assert!(make_lineage("m", 1, &cat, &bad).is_err());
        let base = make_lineage("m", 1, &cat, &LineageParams::default()).unwrap();
        let cfg = FineTuneConfig {
            strength: 1.5,
            style_shift_seed: 0,
            rarity_exponent: 2.0,
        };
        assert!(fine_tune(&base, &cfg, "ft").is_err());
    }

    #[test]
    fn zero_strength_is_identity() {
        let cat = build_default_catalogue();
        let base = make_lineage("m", 1, &cat, &LineageParams::default()).unwrap();
        let cfg = FineTuneConfig {
            strength: 0.0,
            style_shift_seed: 9,
            rarity_exponent: 2.0,
        };
        let ft = fine_tune(&base, &cfg, "ft").unwrap();
        assert_eq!(ft.lineage_id, base.lineage_id);
        for (id, p) in &ft.prompts {
            assert_eq!(p.mean, base.prompts[id].mean);
        }
    }

    #[test]
    fn maximal_rarity_is_untouched_and_full_strength_replaces() {
        let cat = build_default_catalogue();
        let mut base = make_lineage("m", 1, &cat, &LineageParams::default()).unwrap();
        for p in base.prompts.values_mut() {
            p.rarity = 1.0;
        }
        let cfg = FineTuneConfig {
            strength: 0.8,
            style_shift_seed: 9,
            rarity_exponent: 2.0,
        };
        let ft = fine_tune(&base, &cfg, "ft").unwrap();
        for (id, p) in &ft.prompts {
            assert_eq!(p.mean, base.prompts[id].mean);
        }

        let base = make_lineage("m", 1, &cat, &LineageParams::default()).unwrap();
        let cfg = FineTuneConfig {
            strength: 1.0,
            style_shift_seed: 9,
            rarity_exponent: 0.0,
        };
        let ft = fine_tune(&base, &cfg, "ft").unwrap();
        for (id, p) in &ft.prompts {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(9, fnv1a(id.as_bytes())));
            let style = sample_dirichlet(&mut rng, &vec![1.0; p.mean.len()]);
            assert!(linf(&p.mean, &style) < 1e-15);
        }
    }

    #[test]
    fn huge_concentration_hugs_the_mean() {
        let cat = build_default_catalogue();
        let mut spec = make_lineage("m", 5, &cat, &LineageParams::default()).unwrap();
        for p in spec.prompts.values_mut() {
            p.concentration = 1e9;
        }
        let id = cat.prompts()[0].id.clone();
        let fp = sample_fingerprint(&spec, &id, 50, 0).unwrap();
        for s in &fp.samples {
            assert!(linf(s.probs(), &spec.prompts[&id].mean) < 1e-3);
        }
    }

    #[test]
    fn thirty_valid_samples() {
        let cat = build_default_catalogue();
        let spec = make_lineage("m", 5, &cat, &LineageParams::default()).unwrap();
        let fp = sample_fingerprint(&spec, &cat.prompts()[3].id, 30, 100).unwrap();
        assert_eq!(fp.len(), 30);
        fp.validate().unwrap();
        assert_eq!(fp.seeds[0], 100);
        assert!(matches!(
            sample_fingerprint(&spec, "missing", 3, 0),
            Err(SimError::UnknownPrompt(_))
        ));
    }

    #[test]
    fn sample_mean_matches_dirichlet_moments() {
        let cat = build_default_catalogue();
        let spec = make_lineage("m", 8, &cat, &LineageParams::default()).unwrap();
        let id = cat.prompts()[10].id.clone();
        let n = 10_000;
        let fp = sample_fingerprint(&spec, &id, n, 0).unwrap();
        let p = &spec.prompts[&id];
        let mean = fp.mean();
        for (m_hat, &m) in mean.iter().zip(&p.mean) {
            // Var of one coordinate of Dirichlet(kappa m) is m(1-m)/(kappa+1).
            let se = (m * (1.0 - m) / (p.concentration + 1.0) / n as f64).sqrt();
            assert!(
                (m_hat - m).abs() <= 3.0 * se + 1e-12,
                "{m_hat} vs {m} (se {se})"
            );
        }
    }

    #[test]
    fn simulated_probe_matches_direct_sampling() {
        let cat = build_default_catalogue();
        let spec = make_lineage("m", 8, &cat, &LineageParams::default()).unwrap();
        let mut plan = ProbePlan::new("m", &cat);
        plan.prompt_ids = vec![cat.prompts()[0].id.clone(), cat.prompts()[5].id.clone()];
        plan.n_per_prompt = 7;
        plan.seed_base = 1000;
        let store = probe_simulated(&spec, &cat, &plan).unwrap();
        for id in &plan.prompt_ids {
            let idx = cat.prompt_index(id).unwrap();
            let direct = sample_fingerprint(&spec, id, 7, plan.seed_for(idx, 0)).unwrap();
            assert_eq!(store.get(id).unwrap(), &direct);
        }
    }

    #[test]
    fn lineages_separate_under_fine_tuning() {
        let cat = build_default_catalogue();
        let params = LineageParams::default();
        let a = make_lineage("a", 1, &cat, &params).unwrap();
        let b = make_lineage("b", 2, &cat, &params).unwrap();
        for (i, &s) in [0.1, 0.3, 0.5].iter().enumerate() {
            let cfg = FineTuneConfig {
                strength: s,
                style_shift_seed: 77 + i as u64,
                rarity_exponent: 2.0,
            };
            let ft = fine_tune(&a, &cfg, "ft").unwrap();
            let wins = cat
                .prompts()
                .iter()
                .filter(|p| {
                    let f = sample_fingerprint(&ft, &p.id, 30, 0).unwrap();
                    let own = sample_fingerprint(&a, &p.id, 30, 0).unwrap();
                    let other = sample_fingerprint(&b, &p.id, 30, 0).unwrap();
                    wasserstein2(&f, &own).unwrap() < wasserstein2(&f, &other).unwrap()
                })
                .count();
            assert!(wins as f64 >= 0.9 * cat.len() as f64, "s={s}: {wins}/42");
        }
    }

    #[test]
    fn world_build_counts() {
        let cat = build_default_catalogue();
        let world = WorldSpec::standard(6, &[0.2, 0.4], 2.0, 1);
        let specs = world.build(&cat).unwrap();
        assert_eq!(specs.len(), 18);
        assert_eq!(specs[1].lineage_id, "base-0");
        let text = serde_json::to_string(&world).unwrap();
        assert_eq!(WorldSpec::from_json_str(&text).unwrap(), world);
    }

    #[test]
    fn sim_classifier_rejects_foreign_payloads() {
        let req = ClassifierRequest::new(
            ImagePayload {
                bytes: vec![0],
                media_type: "image/png".into(),
            },
            vec!["a".into(), "b".into()],
        )
        .unwrap();
        assert!(SimClassifier.classify(&req).is_err());
    }

    #[test]
    fn spec_round_trips() {
        let cat = build_default_catalogue();
        let spec = make_lineage("m", 4, &cat, &LineageParams::default()).unwrap();
        assert_eq!(
            SimModelSpec::from_json_str(&spec.to_json_string()).unwrap(),
            spec
        );
    }

    proptest! {
        #[test]
        fn shift_is_monotone_in_rarity(
            seed in 0u64..1000,
            s in 0.0f64..=1.0,
            gamma in 0.01f64..5.0,
            r1 in 0.0f64..=1.0,
            r2 in 0.0f64..=1.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mean = sample_dirichlet(&mut rng, &[0.3; 6]);
            let style = sample_dirichlet(&mut rng, &[1.0; 6]);
            let (lo, hi) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
            let tv_lo = tv(&shift_mean(&mean, &style, shift_weight(s, lo, gamma)), &mean);
            let tv_hi = tv(&shift_mean(&mean, &style, shift_weight(s, hi, gamma)), &mean);
            prop_assert!(tv_hi <= tv_lo + 1e-12);
        }

        #[test]
        fn dirichlet_draws_on_simplex(seed in any::<u64>(), alpha in 1e-4f64..100.0, k in 2usize..10) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v = sample_dirichlet(&mut rng, &vec![alpha; k]);
            prop_assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(v.iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
    }
}
