//! Compositional probe prompts and the category vocabularies they resolve into.
//!
//! A prompt combines one or more attribute tokens, a superordinate category and
//! an optional scene context into `"A photo of <article> <attrs..> <T> <context>"`.
//! The article is stored with the prompt rather than derived from the next word,
//! so the bundled catalogue keeps its original wording (including "an flightless
//! bird") byte for byte.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

const DEFAULT_CATALOGUE: &str = include_str!("../../../data/catalogue.json");

fn default_article() -> String {
    "a".to_string()
}

/// The subordinate labels a superordinate category is resolved into.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CategoryVocabulary {
    pub superordinate: String,
    pub labels: Vec<String>,
}

impl CategoryVocabulary {
    pub fn new(
        superordinate: impl Into<String>,
        labels: Vec<String>,
    ) -> Result<Self, CatalogueError> {
        let vocab = Self {
            superordinate: superordinate.into(),
            labels,
        };
        let mut violations = Vec::new();
        vocab.check(&mut violations);
        if violations.is_empty() {
            Ok(vocab)
        } else {
            Err(CatalogueError::Invalid(violations))
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn check(&self, out: &mut Vec<Violation>) {
        if self.labels.len() < 2 {
            out.push(Violation::VocabularyTooSmall {
                vocabulary: self.superordinate.clone(),
                len: self.labels.len(),
            });
        }
        let mut seen = HashSet::new();
        for label in &self.labels {
            let key = label.trim().to_lowercase();
            if !seen.insert(key) {
                out.push(Violation::DuplicateLabel {
                    vocabulary: self.superordinate.clone(),
                    label: label.clone(),
                });
            }
        }
    }
}

/// One probe prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompositionalPrompt {
    pub id: String,
    #[serde(default = "default_article")]
    pub article: String,
    pub attributes: Vec<String>,
    pub superordinate: String,
    #[serde(default)]
    pub context: String,
    pub rendered: String,
}

impl CompositionalPrompt {
    /// Builds a prompt whose `rendered` text and `id` are derived from the other fields.
    pub fn new(
        article: impl Into<String>,
        attributes: Vec<String>,
        superordinate: impl Into<String>,
        context: impl Into<String>,
    ) -> Result<Self, CatalogueError> {
        let mut prompt = Self {
            id: String::new(),
            article: article.into(),
            attributes,
            superordinate: superordinate.into(),
            context: context.into(),
            rendered: String::new(),
        };
        prompt.rendered = render_prompt(&prompt)?;
        prompt.id = slugify(&prompt.rendered);
        Ok(prompt)
    }

    /// Number of composed attribute tokens (`k`).
    pub fn attribute_count(&self) -> usize {
        self.attributes.len()
    }
}

/// Renders the probe text for a prompt.
///
/// Tokens are joined with single spaces; the context is appended only when non-empty.
pub fn render_prompt(prompt: &CompositionalPrompt) -> Result<String, CatalogueError> {
    if prompt.attributes.is_empty() {
        return Err(CatalogueError::InvalidPrompt {
            id: prompt.id.clone(),
            reason: "attribute list is empty".into(),
        });
    }
    let mut parts: Vec<&str> = vec!["A photo of"];
    if !prompt.article.is_empty() {
        parts.push(&prompt.article);
    }
    parts.extend(prompt.attributes.iter().map(String::as_str));
    parts.push(&prompt.superordinate);
    let context = prompt.context.trim();
    if !context.is_empty() {
        parts.push(context);
    }
    Ok(parts.join(" "))
}

/// Lowercase, with every run of non-alphanumeric characters replaced by `_`.
pub fn slugify(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut pending_sep = false;
    for ch in text.chars() {
        if ch.is_ascii_alphanumeric() {
            if pending_sep && !out.is_empty() {
                out.push('_');
            }
            pending_sep = false;
            out.push(ch.to_ascii_lowercase());
        } else {
            pending_sep = true;
        }
    }
    out
}

/// A single broken catalogue invariant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    DuplicateId(String),
    MissingVocabulary {
        prompt: String,
        superordinate: String,
    },
    EmptyAttributes(String),
    RenderedMismatch {
        prompt: String,
        expected: String,
    },
    VocabularyTooSmall {
        vocabulary: String,
        len: usize,
    },
    DuplicateLabel {
        vocabulary: String,
        label: String,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DuplicateId(id) => write!(f, "duplicate prompt id `{id}`"),
            Violation::MissingVocabulary {
                prompt,
                superordinate,
            } => {
                write!(
                    f,
                    "prompt `{prompt}` references missing vocabulary `{superordinate}`"
                )
            }
            Violation::EmptyAttributes(id) => write!(f, "prompt `{id}` has no attributes"),
            Violation::RenderedMismatch { prompt, expected } => {
                write!(
                    f,
                    "prompt `{prompt}` rendered text differs from `{expected}`"
                )
            }
            Violation::VocabularyTooSmall { vocabulary, len } => {
                write!(
                    f,
                    "vocabulary `{vocabulary}` has {len} labels, need at least 2"
                )
            }
            Violation::DuplicateLabel { vocabulary, label } => {
                write!(f, "vocabulary `{vocabulary}` repeats label `{label}`")
            }
        }
    }
}

#[derive(Debug, Error)]
pub enum CatalogueError {
    #[error("cannot read catalogue {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse catalogue: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid prompt `{id}`: {reason}")]
    InvalidPrompt { id: String, reason: String },
    #[error("catalogue is invalid: {}", join_violations(.0))]
    Invalid(Vec<Violation>),
}

impl CatalogueError {
    pub fn violations(&self) -> &[Violation] {
        match self {
            CatalogueError::Invalid(v) => v,
            _ => &[],
        }
    }
}

fn join_violations(v: &[Violation]) -> String {
    v.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Serialize, Deserialize)]
struct CatalogueDocument {
    vocabularies: IndexMap<String, Vec<String>>,
    prompts: Vec<CompositionalPrompt>,
}

/// The validated prompt set plus its vocabularies. Immutable once built.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptCatalogue {
    prompts: Vec<CompositionalPrompt>,
    vocabularies: IndexMap<String, CategoryVocabulary>,
}

impl PromptCatalogue {
    pub fn new(
        prompts: Vec<CompositionalPrompt>,
        vocabularies: Vec<CategoryVocabulary>,
    ) -> Result<Self, CatalogueError> {
        let vocabularies = vocabularies
            .into_iter()
            .map(|v| (v.superordinate.clone(), v))
            .collect();
        let catalogue = Self {
            prompts,
            vocabularies,
        };
        let violations = catalogue.violations();
        if violations.is_empty() {
            Ok(catalogue)
        } else {
            Err(CatalogueError::Invalid(violations))
        }
    }

    fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        for vocab in self.vocabularies.values() {
            vocab.check(&mut out);
        }
        let mut ids = HashSet::new();
        for p in &self.prompts {
            if !ids.insert(p.id.as_str()) {
                out.push(Violation::DuplicateId(p.id.clone()));
            }
            if !self.vocabularies.contains_key(&p.superordinate) {
                out.push(Violation::MissingVocabulary {
                    prompt: p.id.clone(),
                    superordinate: p.superordinate.clone(),
                });
            }
            match render_prompt(p) {
                Ok(text) if text != p.rendered => out.push(Violation::RenderedMismatch {
                    prompt: p.id.clone(),
                    expected: text,
                }),
                Ok(_) => {}
                Err(_) => out.push(Violation::EmptyAttributes(p.id.clone())),
            }
        }
        out
    }

    pub fn from_json_str(text: &str) -> Result<Self, CatalogueError> {
        let doc: CatalogueDocument = serde_json::from_str(text)?;
        let vocabularies = doc
            .vocabularies
            .into_iter()
            .map(|(name, labels)| CategoryVocabulary {
                superordinate: name,
                labels,
            })
            .collect();
        Self::new(doc.prompts, vocabularies)
    }

    pub fn to_json_string(&self) -> String {
        let doc = CatalogueDocument {
            vocabularies: self
                .vocabularies
                .iter()
                .map(|(k, v)| (k.clone(), v.labels.clone()))
                .collect(),
            prompts: self.prompts.clone(),
        };
        let mut text = serde_json::to_string_pretty(&doc).expect("catalogue serializes");
        text.push('\n');
        text
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CatalogueError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json_string()).map_err(|source| CatalogueError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn prompts(&self) -> &[CompositionalPrompt] {
        &self.prompts
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn prompt(&self, id: &str) -> Option<&CompositionalPrompt> {
        self.prompts.iter().find(|p| p.id == id)
    }

    pub fn prompt_index(&self, id: &str) -> Option<usize> {
        self.prompts.iter().position(|p| p.id == id)
    }

    pub fn vocabularies(&self) -> impl Iterator<Item = &CategoryVocabulary> {
        self.vocabularies.values()
    }

    pub fn vocabulary(&self, superordinate: &str) -> Option<&CategoryVocabulary> {
        self.vocabularies.get(superordinate)
    }

    /// Vocabulary of a prompt. Always present for prompts of this catalogue.
    pub fn vocabulary_for(&self, prompt: &CompositionalPrompt) -> &CategoryVocabulary {
        &self.vocabularies[&prompt.superordinate]
    }

    /// Prompt counts per superordinate, in first-appearance order.
    pub fn counts_by_superordinate(&self) -> Vec<(String, usize)> {
        let mut counts: IndexMap<String, usize> = IndexMap::new();
        for p in &self.prompts {
            *counts.entry(p.superordinate.clone()).or_default() += 1;
        }
        counts.into_iter().collect()
    }
}

/// The 42-prompt catalogue shipped in `data/catalogue.json`.
pub fn build_default_catalogue() -> PromptCatalogue {
    PromptCatalogue::from_json_str(DEFAULT_CATALOGUE).expect("bundled catalogue is valid")
}

pub fn load_catalogue(path: impl AsRef<Path>) -> Result<PromptCatalogue, CatalogueError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| CatalogueError::Io {
        path: path.display().to_string(),
        source,
    })?;
    PromptCatalogue::from_json_str(&text)
}
