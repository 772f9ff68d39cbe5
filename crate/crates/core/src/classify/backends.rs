use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use base64::Engine as _;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{BackendError, Classifier, ClassifierRequest, Scores};
use crate::util::{fnv1a, mix};

/// Offline classifier with deterministic output.
#[derive(Debug, Clone)]
pub enum StubClassifier {
    /// Returns the same scores for every request.
    Fixed(Scores),
    /// Logits drawn uniformly from `[-scale, scale]`, seeded by `seed` and the image bytes.
    Seeded { seed: u64, scale: f64 },
}

impl StubClassifier {
    pub fn seeded(seed: u64) -> Self {
        StubClassifier::Seeded { seed, scale: 4.0 }
    }
}

impl Classifier for StubClassifier {
    fn classify(&self, request: &ClassifierRequest) -> Result<Scores, BackendError> {
        match self {
            StubClassifier::Fixed(scores) => Ok(scores.clone()),
            StubClassifier::Seeded { seed, scale } => {
                let mut rng = ChaCha8Rng::seed_from_u64(mix(*seed, fnv1a(&request.image.bytes)));
                let logits = request
                    .labels()
                    .iter()
                    .map(|_| rng.random_range(-*scale..=*scale))
                    .collect();
                Ok(Scores::Logits(logits))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureEntry {
    pub image_sha256: String,
    pub labels: Vec<String>,
    pub response: Scores,
}

/// Recorded classifier responses keyed by image digest and label list.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassifierFixture {
    pub entries: Vec<FixtureEntry>,
}

impl ClassifierFixture {
    pub fn load(path: impl AsRef<Path>) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(std::io::Error::other)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        std::fs::write(path, text)
    }

    fn find(&self, digest: &str, labels: &[String]) -> Option<&FixtureEntry> {
        self.entries
            .iter()
            .find(|e| e.image_sha256 == digest && e.labels == labels)
    }
}

pub fn image_digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Replays a [`ClassifierFixture`]; unknown requests are a fatal error.
#[derive(Debug, Clone)]
pub struct ReplayClassifier {
    fixture: ClassifierFixture,
}

impl ReplayClassifier {
    pub fn new(fixture: ClassifierFixture) -> Self {
        Self { fixture }
    }

    pub fn from_file(path: impl AsRef<Path>) -> std::io::Result<Self> {
        ClassifierFixture::load(path).map(Self::new)
    }
}

impl Classifier for ReplayClassifier {
    fn classify(&self, request: &ClassifierRequest) -> Result<Scores, BackendError> {
        let digest = image_digest(&request.image.bytes);
        self.fixture
            .find(&digest, request.labels())
            .map(|e| e.response.clone())
            .ok_or_else(|| BackendError::Fatal(format!("no recorded response for image {digest}")))
    }
}

/// Forwards to an inner classifier and records every successful response.
pub struct RecordingClassifier<C> {
    inner: C,
    recorded: Mutex<ClassifierFixture>,
}

impl<C: Classifier> RecordingClassifier<C> {
    pub fn new(inner: C) -> Self {
        Self {
            inner,
            recorded: Mutex::new(ClassifierFixture::default()),
        }
    }

    pub fn fixture(&self) -> ClassifierFixture {
        self.recorded.lock().expect("recorder poisoned").clone()
    }
}

impl<C: Classifier> Classifier for RecordingClassifier<C> {
    fn classify(&self, request: &ClassifierRequest) -> Result<Scores, BackendError> {
        let response = self.inner.classify(request)?;
        let entry = FixtureEntry {
            image_sha256: image_digest(&request.image.bytes),
            labels: request.labels().to_vec(),
            response: response.clone(),
        };
        let mut fixture = self.recorded.lock().expect("recorder poisoned");
        if fixture.find(&entry.image_sha256, &entry.labels).is_none() {
            fixture.entries.push(entry);
        }
        Ok(response)
    }
}

#[derive(Serialize)]
struct ClassifyBody<'a> {
    image: String,
    media_type: &'a str,
    labels: &'a [String],
}

/// Client for a remote service speaking `POST /classify`.
pub struct HttpClassifier {
    url: String,
    client: reqwest::blocking::Client,
}

impl HttpClassifier {
    pub fn new(endpoint: &str, timeout: Duration) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| BackendError::Fatal(e.to_string()))?;
        Ok(Self {
            url: format!("{}/classify", endpoint.trim_end_matches('/')),
            client,
        })
    }
}

impl Classifier for HttpClassifier {
    fn classify(&self, request: &ClassifierRequest) -> Result<Scores, BackendError> {
        let body = ClassifyBody {
            image: base64::engine::general_purpose::STANDARD.encode(&request.image.bytes),
            media_type: &request.image.media_type,
            labels: request.labels(),
        };
        let response = self
            .client
            .post(&self.url)
            .json(&body)
            .send()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        crate::probe::http_status(&response)?;
        response
            .json::<Scores>()
            .map_err(|e| BackendError::Fatal(format!("malformed classifier response: {e}")))
    }
}
