use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::classify::CategoricalSample;

/// One completed sample, as written to the append-only journal (one JSON object per line).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JournalEntry {
    pub model_id: String,
    pub prompt_id: String,
    pub index: usize,
    pub seed: u64,
    #[serde(rename = "probs")]
    pub sample: CategoricalSample,
}

#[derive(Debug)]
pub struct Journal {
    path: PathBuf,
    file: File,
}

impl Journal {
    /// Opens (creating if needed) a journal for `model_id` and returns the entries it holds.
    ///
    /// A torn final line from an interrupted write is skipped.
    pub fn open(path: &Path, model_id: &str) -> io::Result<(Self, Vec<JournalEntry>)> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        let mut file = OpenOptions::new()
            .create(true)
            .read(true)
            .append(true)
            .open(path)?;

        let mut entries = Vec::new();
        let mut reader = BufReader::new(&file);
        let mut line = String::new();
        let mut lineno = 0;
        loop {
            line.clear();
            if reader.read_line(&mut line)? == 0 {
                break;
            }
            lineno += 1;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<JournalEntry>(&line) {
                Ok(entry) if entry.model_id == model_id => entries.push(entry),
                Ok(entry) => {
                    return Err(io::Error::new(
                        io::ErrorKind::InvalidData,
                        format!(
                            "journal {} belongs to model `{}`, not `{model_id}`",
                            path.display(),
                            entry.model_id
                        ),
                    ))
                }
                Err(e) => log::warn!("skipping unreadable journal line {lineno}: {e}"),
            }
        }

        // Terminate a torn trailing line so new entries start on their own line.
        let len = file.metadata()?.len();
        if len > 0 {
            let mut last = [0u8; 1];
            file.seek(SeekFrom::Start(len - 1))?;
            file.read_exact(&mut last)?;
            if last[0] != b'\n' {
                file.write_all(b"\n")?;
            }
        }
        Ok((
            Self {
                path: path.to_path_buf(),
                file,
            },
            entries,
        ))
    }

    pub fn append(&mut self, entry: &JournalEntry) -> io::Result<()> {
        let mut line = serde_json::to_string(entry).map_err(io::Error::other)?;
        line.push('\n');
        self.file.write_all(line.as_bytes())?;
        self.file.flush()
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(model: &str, index: usize) -> JournalEntry {
        JournalEntry {
            model_id: model.into(),
            prompt_id: "p".into(),
            index,
            seed: 100 + index as u64,
            sample: CategoricalSample::new(vec![0.1, 0.2, 0.7]).unwrap(),
        }
    }

    #[test]
    fn append_and_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/j.jsonl");
        let (mut j, existing) = Journal::open(&path, "m").unwrap();
        assert!(existing.is_empty());
        j.append(&entry("m", 0)).unwrap();
        j.append(&entry("m", 1)).unwrap();
        drop(j);
        let (_, existing) = Journal::open(&path, "m").unwrap();
        assert_eq!(existing, vec![entry("m", 0), entry("m", 1)]);
    }

    #[test]
    fn torn_tail_is_skipped_and_terminated() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("j.jsonl");
        let mut text = serde_json::to_string(&entry("m", 0)).unwrap();
        text.push('\n');
        text.push_str("{\"model_id\":\"m\",\"prompt_i");
        std::fs::write(&path, text).unwrap();
        let (mut j, existing) = Journal::open(&path, "m").unwrap();
        assert_eq!(existing.len(), 1);
        j.append(&entry("m", 1)).unwrap();
        drop(j);
        let (_, existing) = Journal::open(&path, "m").unwrap();
        assert_eq!(existing, vec![entry("m", 0), entry("m", 1)]);
    }

    #[test]
    fn foreign_model_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("j.jsonl");
        let (mut j, _) = Journal::open(&path, "a").unwrap();
        j.append(&entry("a", 0)).unwrap();
        drop(j);
        assert!(Journal::open(&path, "b").is_err());
    }
}
