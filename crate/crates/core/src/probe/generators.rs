use std::path::{Path, PathBuf};
use std::time::Duration;

use base64::Engine as _;
use serde::{Deserialize, Serialize};

use super::{http_status, GenerationRequest, Generator};
use crate::classify::{BackendError, ImagePayload};

#[derive(Serialize)]
struct GenerateBody<'a> {
    prompt: &'a str,
    seed: u64,
    width: u32,
    height: u32,
}

#[derive(Deserialize)]
struct GenerateResponse {
    image: String,
    media_type: String,
}

/// Client for a remote service speaking `POST /generate`.
pub struct HttpGenerator {
    url: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl HttpGenerator {
    pub fn new(
        endpoint: &str,
        api_key: Option<String>,
        timeout: Duration,
    ) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| BackendError::Fatal(e.to_string()))?;
        Ok(Self {
            url: format!("{}/generate", endpoint.trim_end_matches('/')),
            api_key,
            client,
        })
    }
}

impl Generator for HttpGenerator {
    fn generate(&self, request: &GenerationRequest) -> Result<ImagePayload, BackendError> {
        let body = GenerateBody {
            prompt: &request.prompt,
            seed: request.seed,
            width: request.width,
            height: request.height,
        };
        let mut call = self.client.post(&self.url).json(&body);
        if let Some(key) = &self.api_key {
            call = call.bearer_auth(key);
        }
        let response = call
            .send()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        http_status(&response)?;
        let decoded: GenerateResponse = response
            .json()
            .map_err(|e| BackendError::Fatal(format!("malformed generation response: {e}")))?;
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(decoded.image.as_bytes())
            .map_err(|e| BackendError::Fatal(format!("image is not valid base64: {e}")))?;
        Ok(ImagePayload {
            bytes,
            media_type: decoded.media_type,
        })
    }
}

const EXTENSIONS: [(&str, &str); 5] = [
    ("png", "image/png"),
    ("jpg", "image/jpeg"),
    ("jpeg", "image/jpeg"),
    ("webp", "image/webp"),
    ("bmp", "image/bmp"),
];

/// Serves pre-generated images stored as `<prompt_id>_<index>.<ext>`.
#[derive(Debug, Clone)]
pub struct DirectoryGenerator {
    root: PathBuf,
}

impl DirectoryGenerator {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }
}

impl Generator for DirectoryGenerator {
    fn generate(&self, request: &GenerationRequest) -> Result<ImagePayload, BackendError> {
        for (ext, media_type) in EXTENSIONS {
            let path = self
                .root
                .join(format!("{}_{}.{ext}", request.prompt_id, request.index));
            if path.is_file() {
                let bytes = std::fs::read(&path)
                    .map_err(|e| BackendError::Fatal(format!("{}: {e}", path.display())))?;
                return Ok(ImagePayload {
                    bytes,
                    media_type: media_type.to_string(),
                });
            }
        }
        Err(BackendError::Fatal(format!(
            "no image for {}_{} in {}",
            request.prompt_id,
            request.index,
            self.root.display()
        )))
    }
}
