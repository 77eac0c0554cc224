//! Concurrent download of pending manifest records.
//!
//! Workers only download and write files; every manifest and audit update
//! happens on the calling thread. The HTTP client picks up the standard
//! `HTTP_PROXY` / `HTTPS_PROXY` / `ALL_PROXY` / `NO_PROXY` variables.

use std::path::{Path, PathBuf};
use std::sync::{mpsc, Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::manifest::{AuditLog, Manifest, ManifestRecord, Status};
use crate::error::{Error, Result};
use crate::tensor_file::write_atomic;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_backoff_ms: u64,
    pub multiplier: f64,
    pub max_backoff_ms: u64,
    pub timeout_s: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 4,
            initial_backoff_ms: 500,
            multiplier: 2.0,
            max_backoff_ms: 30_000,
            timeout_s: 60.0,
        }
    }
}

impl RetryPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.max_attempts == 0
            || self.multiplier.is_nan()
            || self.multiplier < 1.0
            || self.timeout_s.is_nan()
            || self.timeout_s <= 0.0
        {
            return Err(Error::Config(format!(
                "retry policy needs max_attempts >= 1, multiplier >= 1 and a positive timeout: {self:?}"
            )));
        }
        Ok(())
    }

    /// Sleep before retry number `retry` (1-based).
    pub fn backoff(&self, retry: u32) -> Duration {
        let ms = self.initial_backoff_ms as f64 * self.multiplier.powi(retry.saturating_sub(1) as i32);
        Duration::from_millis(ms.min(self.max_backoff_ms as f64) as u64)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct FetchSummary {
    pub downloaded: usize,
    /// Already fetched and verified against the recorded hash.
    pub skipped: usize,
    pub failed: usize,
    /// Fetched records whose file was missing or changed; downloaded again.
    pub reset: usize,
}

/// `raw_dir/{id}.{ext}`, with the extension taken from the url path.
pub fn raw_path(raw_dir: &Path, record: &ManifestRecord) -> PathBuf {
    let ext = reqwest::Url::parse(&record.url)
        .ok()
        .and_then(|u| {
            Path::new(u.path())
                .extension()
                .map(|e| e.to_string_lossy().to_ascii_lowercase())
        })
        .filter(|e| matches!(e.as_str(), "png" | "jpg" | "jpeg" | "webp"))
        .unwrap_or_else(|| "img".into());
    raw_dir.join(format!("{}.{ext}", record.id))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn file_hash(path: &Path) -> Option<String> {
    std::fs::read(path).ok().map(|b| sha256_hex(&b))
}

fn retryable(status: reqwest::StatusCode) -> bool {
    status.is_server_error()
        || status == reqwest::StatusCode::TOO_MANY_REQUESTS
        || status == reqwest::StatusCode::REQUEST_TIMEOUT
}

fn download(
    client: &reqwest::blocking::Client,
    url: &str,
    policy: &RetryPolicy,
) -> std::result::Result<Vec<u8>, String> {
    let mut last = String::new();
    for attempt in 1..=policy.max_attempts {
        if attempt > 1 {
            std::thread::sleep(policy.backoff(attempt - 1));
        }
        match client.get(url).send() {
            Ok(resp) if resp.status().is_success() => match resp.bytes() {
                Ok(b) => return Ok(b.to_vec()),
                Err(e) => last = format!("body read failed: {e}"),
            },
            Ok(resp) => {
                last = format!("HTTP {}", resp.status().as_u16());
                if !retryable(resp.status()) {
                    return Err(last);
                }
            }
            Err(e) => last = e.to_string(),
        }
        log::debug!("{url}: attempt {attempt} failed: {last}");
    }
    Err(format!("{last} (after {} attempts)", policy.max_attempts))
}

struct Job {
    id: String,
    url: String,
    path: PathBuf,
}

struct Done {
    id: String,
    outcome: std::result::Result<String, String>,
}

/// Downloads every pending record into `raw_dir` with at most `workers`
/// concurrent requests. Fetched records are re-hashed and skipped when they
/// match. Per-record failures stay `pending` with an error note. When
/// `manifest_path` is given the manifest is saved after every update.
pub fn fetch(
    manifest: &mut Manifest,
    manifest_path: Option<&Path>,
    raw_dir: &Path,
    policy: &RetryPolicy,
    workers: usize,
    mut audit: Option<&mut AuditLog>,
) -> Result<FetchSummary> {
    policy.validate()?;
    std::fs::create_dir_all(raw_dir).map_err(|e| Error::io(raw_dir, e))?;
    let mut summary = FetchSummary::default();
    let record = |m: &mut Manifest,
                  id: &str,
                  to: Status,
                  hash: Option<&str>,
                  error: &str,
                  audit: &mut Option<&mut AuditLog>|
     -> Result<()> {
        let event = m.transition(id, to, hash, error)?;
        if let Some(log) = audit.as_deref_mut() {
            log.append(event)?;
        }
        if let Some(p) = manifest_path {
            m.save(p)?;
        }
        Ok(())
    };

    let mut jobs = Vec::new();
    for i in 0..manifest.records.len() {
        let r = manifest.records[i].clone();
        let path = raw_path(raw_dir, &r);
        if r.status.is_fetched() {
            match file_hash(&path) {
                Some(h) if h == r.content_hash => {
                    summary.skipped += 1;
                    continue;
                }
                found => {
                    let note = if found.is_some() {
                        "content hash mismatch; refetching"
                    } else {
                        "file missing; refetching"
                    };
                    log::warn!("{}: {note}", r.id);
                    record(manifest, &r.id, Status::Pending, Some(""), note, &mut audit)?;
                    summary.reset += 1;
                }
            }
        }
        jobs.push(Job {
            id: r.id,
            url: r.url,
            path,
        });
    }
    if jobs.is_empty() {
        return Ok(summary);
    }

    let client = reqwest::blocking::Client::builder()
        .timeout(Duration::from_secs_f64(policy.timeout_s))
        .user_agent(concat!("uncanny-dataset/", env!("CARGO_PKG_VERSION")))
        .build()
        .map_err(|e| Error::BackendUnavailable(format!("http client: {e}")))?;
    let workers = workers.clamp(1, jobs.len());
    let (job_tx, job_rx) = mpsc::channel::<Job>();
    let job_rx = Arc::new(Mutex::new(job_rx));
    let (done_tx, done_rx) = mpsc::channel::<Done>();
    for job in jobs {
        job_tx.send(job).expect("receiver alive");
    }
    drop(job_tx);

    std::thread::scope(|s| -> Result<()> {
        for _ in 0..workers {
            let (rx, tx, client) = (Arc::clone(&job_rx), done_tx.clone(), client.clone());
            s.spawn(move || loop {
                let job = match rx.lock().expect("job queue poisoned").recv() {
                    Ok(j) => j,
                    Err(_) => break,
                };
                let outcome = download(&client, &job.url, policy).and_then(|bytes| {
                    write_atomic(&job.path, &bytes).map_err(|e| e.to_string())?;
                    Ok(sha256_hex(&bytes))
                });
                if tx.send(Done { id: job.id, outcome }).is_err() {
                    break;
                }
            });
        }
        drop(done_tx);
        for done in done_rx {
            match done.outcome {
                Ok(hash) => {
                    record(manifest, &done.id, Status::Fetched, Some(&hash), "", &mut audit)?;
                    summary.downloaded += 1;
                }
                Err(note) => {
                    log::warn!("{}: {note}", done.id);
                    record(manifest, &done.id, Status::Pending, Some(""), &note, &mut audit)?;
                    summary.failed += 1;
                }
            }
        }
        Ok(())
    })?;
    Ok(summary)
}
