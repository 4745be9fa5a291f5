//! Talk manifests and the content-addressed artifact store.
//!
//! Every stage output is persisted as one file under
//! `{root}/{run_id}/{stage}/{talk_id}/{variant}` next to a JSON sidecar
//! (`{variant}.meta.json`) holding its SHA-256 digest. Reads re-hash the
//! payload and refuse to return bytes whose digest disagrees with the sidecar.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Digest algorithm recorded in every sidecar.
pub const HASH_ALGORITHM: &str = "sha256";

/// Hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// One long-form recording and the languages it should be rendered into.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TalkRef {
    pub talk_id: String,
    pub audio_path: String,
    pub duration_s: f64,
    pub source_lang: String,
    pub target_langs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub talks: Vec<TalkRef>,
    pub config_hash: String,
    pub created_at: DateTime<Utc>,
    /// Digest of the manifest file bytes; used to derive run ids.
    #[serde(default)]
    pub source_digest: String,
    /// True when `run_id` was derived rather than read from the file.
    #[serde(default)]
    pub run_id_derived: bool,
}

impl RunManifest {
    /// Records the resolved configuration digest. Derived run ids are
    /// re-derived so that a changed configuration never shares a cache
    /// namespace with an older one.
    pub fn bind_config(&mut self, config_hash: &str) {
        self.config_hash = config_hash.to_string();
        if self.run_id_derived {
            let digest = sha256_hex(format!("{}\n{}", self.source_digest, config_hash).as_bytes());
            self.run_id = format!("run-{}", &digest[..12]);
        }
    }

    pub fn talk(&self, talk_id: &str) -> Option<&TalkRef> {
        self.talks.iter().find(|t| t.talk_id == talk_id)
    }
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("cannot read manifest {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: invalid JSON: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: missing field `{field}`")]
    MissingField { line: usize, field: &'static str },
    #[error("line {line}: field `{field}` is invalid: {reason}")]
    InvalidField {
        line: usize,
        field: &'static str,
        reason: String,
    },
    #[error("duplicate talk_id `{talk_id}` on lines {first_line} and {second_line}")]
    DuplicateTalk {
        talk_id: String,
        first_line: usize,
        second_line: usize,
    },
    #[error("manifest contains no talks")]
    Empty,
}

/// Reads a JSONL manifest, one talk object per line.
///
/// A line holding only `{"run_id": ...}` names the run; otherwise the run id
/// is derived from the file digest (see [`RunManifest::bind_config`]).
pub fn load_manifest(path: impl AsRef<Path>) -> Result<RunManifest, ManifestError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let text = String::from_utf8_lossy(&bytes);
    parse_manifest(&text)
}

pub fn parse_manifest(text: &str) -> Result<RunManifest, ManifestError> {
    let mut talks = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut run_id = None;

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(raw).map_err(|e| ManifestError::Parse {
            line,
            message: e.to_string(),
        })?;
        let obj = value.as_object().ok_or_else(|| ManifestError::Parse {
            line,
            message: "expected a JSON object".into(),
        })?;
        if !obj.contains_key("talk_id") && obj.contains_key("run_id") && obj.len() == 1 {
            run_id = Some(string_field(obj, "run_id", line)?);
            continue;
        }

        let talk = talk_from_object(obj, line)?;
        if let Some(&first_line) = seen.get(&talk.talk_id) {
            return Err(ManifestError::DuplicateTalk {
                talk_id: talk.talk_id,
                first_line,
                second_line: line,
            });
        }
        seen.insert(talk.talk_id.clone(), line);
        talks.push(talk);
    }

    if talks.is_empty() {
        return Err(ManifestError::Empty);
    }
    let source_digest = sha256_hex(text.as_bytes());
    let run_id_derived = run_id.is_none();
    let run_id = run_id.unwrap_or_else(|| format!("run-{}", &source_digest[..12]));
    Ok(RunManifest {
        run_id,
        talks,
        config_hash: String::new(),
        created_at: Utc::now(),
        source_digest,
        run_id_derived,
    })
}

fn talk_from_object(obj: &serde_json::Map<String, Value>, line: usize) -> Result<TalkRef, ManifestError> {
    let talk_id = string_field(obj, "talk_id", line)?;
    if talk_id.is_empty() {
        return Err(ManifestError::InvalidField {
            line,
            field: "talk_id",
            reason: "must be non-empty".into(),
        });
    }
    let audio_path = string_field(obj, "audio_path", line)?;
    let duration_s = obj
        .get("duration_s")
        .ok_or(ManifestError::MissingField {
            line,
            field: "duration_s",
        })?
        .as_f64()
        .ok_or_else(|| ManifestError::InvalidField {
            line,
            field: "duration_s",
            reason: "expected a number".into(),
        })?;
    if !(duration_s > 0.0) || !duration_s.is_finite() {
        return Err(ManifestError::InvalidField {
            line,
            field: "duration_s",
            reason: format!("must be positive, got {duration_s}"),
        });
    }
    let source_lang = string_field(obj, "source_lang", line)?;
    let target_langs = obj
        .get("target_langs")
        .ok_or(ManifestError::MissingField {
            line,
            field: "target_langs",
        })?
        .as_array()
        .and_then(|items| {
            items
                .iter()
                .map(|v| v.as_str().map(str::to_string))
                .collect::<Option<Vec<_>>>()
        })
        .ok_or_else(|| ManifestError::InvalidField {
            line,
            field: "target_langs",
            reason: "expected a list of strings".into(),
        })?;
    Ok(TalkRef {
        talk_id,
        audio_path,
        duration_s,
        source_lang,
        target_langs,
    })
}

fn string_field(
    obj: &serde_json::Map<String, Value>,
    field: &'static str,
    line: usize,
) -> Result<String, ManifestError> {
    obj.get(field)
        .ok_or(ManifestError::MissingField { line, field })?
        .as_str()
        .map(str::to_string)
        .ok_or_else(|| ManifestError::InvalidField {
            line,
            field,
            reason: "expected a string".into(),
        })
}

/// Pipeline stage an artifact belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Vad,
    Segments,
    Asr,
    Fusion,
    Document,
    Sentences,
    Mt,
    Ape,
    Qa,
    Summary,
    Scores,
}

impl Stage {
    pub const ALL: [Stage; 11] = [
        Stage::Vad,
        Stage::Segments,
        Stage::Asr,
        Stage::Fusion,
        Stage::Document,
        Stage::Sentences,
        Stage::Mt,
        Stage::Ape,
        Stage::Qa,
        Stage::Summary,
        Stage::Scores,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Vad => "vad",
            Stage::Segments => "segments",
            Stage::Asr => "asr",
            Stage::Fusion => "fusion",
            Stage::Document => "document",
            Stage::Sentences => "sentences",
            Stage::Mt => "mt",
            Stage::Ape => "ape",
            Stage::Qa => "qa",
            Stage::Summary => "summary",
            Stage::Scores => "scores",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|stage| stage.as_str() == s)
            .ok_or_else(|| format!("unknown stage `{s}`"))
    }
}

/// Identity of one stored artifact.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArtifactKey {
    pub run_id: String,
    pub stage: Stage,
    pub talk_id: String,
    pub variant: String,
}

impl ArtifactKey {
    pub fn new(
        run_id: impl Into<String>,
        stage: Stage,
        talk_id: impl Into<String>,
        variant: impl Into<String>,
    ) -> Self {
        Self {
            run_id: run_id.into(),
            stage,
            talk_id: talk_id.into(),
            variant: variant.into(),
        }
    }

    fn validate(&self) -> Result<(), StoreError> {
        for (name, part) in [
            ("run_id", &self.run_id),
            ("talk_id", &self.talk_id),
            ("variant", &self.variant),
        ] {
            let ok = !part.is_empty()
                && part != "."
                && part != ".."
                && !part.ends_with(".meta.json")
                && part
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.' | '+' | '='));
            if !ok {
                return Err(StoreError::InvalidKey {
                    key: self.clone(),
                    reason: format!("{name} `{part}` is not a safe path component"),
                });
            }
        }
        Ok(())
    }
}

impl fmt::Display for ArtifactKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}/{}", self.run_id, self.stage, self.talk_id, self.variant)
    }
}

/// Whether an artifact came from the primary path or a fallback.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArtifactStatus {
    #[default]
    Ok,
    Fallback,
}

/// Sidecar stored next to each payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub hash: String,
    pub stage: Stage,
    pub created_at: String,
    #[serde(default = "default_algorithm")]
    pub algorithm: String,
    #[serde(default)]
    pub status: ArtifactStatus,
}

fn default_algorithm() -> String {
    HASH_ALGORITHM.to_string()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Receipt {
    pub hash: String,
    /// False when an identical payload was already stored.
    pub written: bool,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct PutOptions {
    pub force: bool,
    pub status: ArtifactStatus,
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("artifact {0} not found")]
    NotFound(ArtifactKey),
    #[error("artifact {key} already stored with hash {existing}; refusing to overwrite with {incoming}")]
    Conflict {
        key: ArtifactKey,
        existing: String,
        incoming: String,
    },
    #[error("artifact {key} failed integrity check: {reason}")]
    Integrity { key: ArtifactKey, reason: String },
    #[error("invalid artifact key {key}: {reason}")]
    InvalidKey { key: ArtifactKey, reason: String },
    #[error("storage I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl StoreError {
    pub fn is_not_found(&self) -> bool {
        matches!(self, StoreError::NotFound(_))
    }
}

/// Filesystem-backed artifact store. Cheap to clone; clones share the
/// per-key write locks.
#[derive(Debug, Clone)]
pub struct ArtifactStore {
    root: PathBuf,
    locks: Arc<Mutex<HashMap<PathBuf, Arc<Mutex<()>>>>>,
}

impl ArtifactStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|source| StoreError::Io {
            path: root.clone(),
            source,
        })?;
        Ok(Self {
            root,
            locks: Arc::default(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn payload_path(&self, key: &ArtifactKey) -> PathBuf {
        self.root
            .join(&key.run_id)
            .join(key.stage.as_str())
            .join(&key.talk_id)
            .join(&key.variant)
    }

    fn sidecar_path(&self, key: &ArtifactKey) -> PathBuf {
        let mut path = self.payload_path(key);
        path.set_file_name(format!("{}.meta.json", key.variant));
        path
    }

    fn key_lock(&self, path: &Path) -> Arc<Mutex<()>> {
        let mut locks = self.locks.lock().unwrap_or_else(|e| e.into_inner());
        locks.entry(path.to_path_buf()).or_default().clone()
    }

    pub fn put_artifact(&self, key: &ArtifactKey, payload: &[u8]) -> Result<Receipt, StoreError> {
        self.put_artifact_with(key, payload, PutOptions::default())
    }

    /// Stores `payload` under `key`. Re-storing identical bytes is a no-op;
    /// different bytes are rejected unless `opts.force` is set. A status
    /// change with identical bytes rewrites only the sidecar.
    pub fn put_artifact_with(
        &self,
        key: &ArtifactKey,
        payload: &[u8],
        opts: PutOptions,
    ) -> Result<Receipt, StoreError> {
        key.validate()?;
        let path = self.payload_path(key);
        let lock = self.key_lock(&path);
        let _guard = lock.lock().unwrap_or_else(|e| e.into_inner());

        let incoming = sha256_hex(payload);
        match self.read_sidecar(key) {
            Ok(existing) if path.exists() => {
                if existing.hash == incoming && existing.status == opts.status {
                    return Ok(Receipt {
                        hash: incoming,
                        written: false,
                    });
                }
                if existing.hash != incoming && !opts.force {
                    return Err(StoreError::Conflict {
                        key: key.clone(),
                        existing: existing.hash,
                        incoming,
                    });
                }
            }
            Ok(_) => {}
            Err(StoreError::NotFound(_)) => {}
            Err(e) if opts.force => log::warn!("overwriting unreadable sidecar for {key}: {e}"),
            Err(e) => return Err(e),
        }

        let dir = path.parent().expect("payload path has a parent");
        fs::create_dir_all(dir).map_err(|source| StoreError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        write_atomic(&path, payload)?;
        let sidecar = Sidecar {
            hash: incoming.clone(),
            stage: key.stage,
            created_at: Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true),
            algorithm: HASH_ALGORITHM.to_string(),
            status: opts.status,
        };
        let sidecar_bytes = serde_json::to_vec(&sidecar).expect("sidecar serializes");
        write_atomic(&self.sidecar_path(key), &sidecar_bytes)?;
        Ok(Receipt {
            hash: incoming,
            written: true,
        })
    }

    /// Returns the stored bytes after verifying them against the sidecar.
    pub fn get_artifact(&self, key: &ArtifactKey) -> Result<Vec<u8>, StoreError> {
        key.validate()?;
        let path = self.payload_path(key);
        let bytes = match fs::read(&path) {
            Ok(bytes) => bytes,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(StoreError::NotFound(key.clone()))
            }
            Err(source) => return Err(StoreError::Io { path, source }),
        };
        let sidecar = match self.read_sidecar(key) {
            Err(StoreError::NotFound(_)) => {
                return Err(StoreError::Integrity {
                    key: key.clone(),
                    reason: "sidecar missing".into(),
                })
            }
            other => other?,
        };
        if sidecar.algorithm != HASH_ALGORITHM {
            return Err(StoreError::Integrity {
                key: key.clone(),
                reason: format!("unsupported digest algorithm `{}`", sidecar.algorithm),
            });
        }
        let actual = sha256_hex(&bytes);
        if actual != sidecar.hash {
            return Err(StoreError::Integrity {
                key: key.clone(),
                reason: format!("expected {}, found {actual}", sidecar.hash),
            });
        }
        Ok(bytes)
    }

    pub fn read_sidecar(&self, key: &ArtifactKey) -> Result<Sidecar, StoreError> {
        key.validate()?;
        let path = self.sidecar_path(key);
        let bytes = match fs::read(&path) {
            Ok(bytes) => bytes,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(StoreError::NotFound(key.clone()))
            }
            Err(source) => return Err(StoreError::Io { path, source }),
        };
        serde_json::from_slice(&bytes).map_err(|e| StoreError::Integrity {
            key: key.clone(),
            reason: format!("unreadable sidecar: {e}"),
        })
    }

    /// Lists the talk ids that hold at least one artifact for `(run_id, stage)`.
    pub fn talks_with(&self, run_id: &str, stage: Stage) -> Result<HashSet<String>, StoreError> {
        let dir = self.root.join(run_id).join(stage.as_str());
        let entries = match fs::read_dir(&dir) {
            Ok(entries) => entries,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(HashSet::new()),
            Err(source) => return Err(StoreError::Io { path: dir, source }),
        };
        let mut out = HashSet::new();
        for entry in entries {
            let entry = entry.map_err(|source| StoreError::Io {
                path: dir.clone(),
                source,
            })?;
            out.insert(entry.file_name().to_string_lossy().into_owned());
        }
        Ok(out)
    }

    pub fn run_exists(&self, run_id: &str) -> bool {
        self.root.join(run_id).is_dir()
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let io_err = |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file_name = path.file_name().expect("artifact path has a file name");
    let tmp = path.with_file_name(format!(
        ".{}.tmp-{}-{:?}",
        file_name.to_string_lossy(),
        std::process::id(),
        std::thread::current().id()
    ));
    let mut file = fs::File::create(&tmp).map_err(io_err)?;
    file.write_all(bytes).map_err(io_err)?;
    file.sync_all().map_err(io_err)?;
    drop(file);
    fs::rename(&tmp, path).map_err(io_err)
}

/// Serializes records as JSONL (one compact object per line, trailing newline).
pub fn to_jsonl<T: Serialize>(records: &[T]) -> Vec<u8> {
    let mut out = Vec::new();
    for record in records {
        serde_json::to_writer(&mut out, record).expect("record serializes");
        out.push(b'\n');
    }
    out
}

pub fn from_jsonl<T: for<'de> Deserialize<'de>>(bytes: &[u8]) -> Result<Vec<T>, serde_json::Error> {
    let text = String::from_utf8_lossy(bytes);
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}
