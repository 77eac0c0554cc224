//! URL manifest (CSV) and its append-only status audit log (JSONL).

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_file::write_atomic;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Holdout,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pending,
    Fetched,
    Aligned,
    FilteredOut,
}

impl Status {
    pub fn name(self) -> &'static str {
        match self {
            Status::Pending => "pending",
            Status::Fetched => "fetched",
            Status::Aligned => "aligned",
            Status::FilteredOut => "filtered_out",
        }
    }

    /// The record's bytes are on disk (whatever happened afterwards).
    pub fn is_fetched(self) -> bool {
        self != Status::Pending
    }
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Status {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pending" => Ok(Status::Pending),
            "fetched" => Ok(Status::Fetched),
            "aligned" => Ok(Status::Aligned),
            "filtered_out" => Ok(Status::FilteredOut),
            other => Err(Error::InvalidArgument(format!("unknown status {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub url: String,
    pub license_note: String,
    pub split: Split,
    pub status: Status,
    /// Hex sha256 of the fetched bytes; empty until fetched.
    #[serde(default)]
    pub content_hash: String,
    /// Last failure note; empty when the last operation succeeded.
    #[serde(default)]
    pub error: String,
}

impl ManifestRecord {
    pub fn pending(id: impl Into<String>, url: impl Into<String>, split: Split) -> Self {
        Self {
            id: id.into(),
            url: url.into(),
            license_note: String::new(),
            split,
            status: Status::Pending,
            content_hash: String::new(),
            error: String::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestCounts {
    pub total: usize,
    pub pending: usize,
    pub fetched: usize,
    pub aligned: usize,
    pub filtered_out: usize,
}

impl ManifestCounts {
    /// Records whose bytes were fetched at some point.
    pub fn ever_fetched(&self) -> usize {
        self.fetched + self.aligned + self.filtered_out
    }

    pub fn kept(&self) -> usize {
        self.fetched + self.aligned
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn new(records: Vec<ManifestRecord>) -> Result<Self> {
        let m = Self { records };
        m.validate()?;
        Ok(m)
    }

    /// Ids are unique and non-empty, and every url is absolute http(s).
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if r.id.is_empty() || r.id.contains(['/', '\\']) {
                return Err(Error::InvalidArgument(format!(
                    "manifest id {:?} is empty or contains a path separator",
                    r.id
                )));
            }
            if !seen.insert(r.id.as_str()) {
                return Err(Error::InvalidArgument(format!("duplicate manifest id {:?}", r.id)));
            }
            let url = reqwest::Url::parse(&r.url)
                .map_err(|e| Error::InvalidArgument(format!("{}: bad url {:?}: {e}", r.id, r.url)))?;
            if !matches!(url.scheme(), "http" | "https") || !url.has_host() {
                return Err(Error::InvalidArgument(format!(
                    "{}: url {:?} is not an absolute http(s) url",
                    r.id, r.url
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut reader = csv::Reader::from_path(path)?;
        let records = reader
            .deserialize()
            .collect::<std::result::Result<Vec<ManifestRecord>, _>>()
            .map_err(|e| Error::Format {
                path: path.into(),
                message: e.to_string(),
            })?;
        Self::new(records)
    }

    /// Atomic rewrite with the header `id,url,license_note,split,status,content_hash,error`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.records {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
        write_atomic(path.as_ref(), &bytes)
    }

    pub fn get(&self, id: &str) -> Option<&ManifestRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    fn index_of(&self, id: &str) -> Option<usize> {
        self.records.iter().position(|r| r.id == id)
    }

    pub fn counts(&self) -> ManifestCounts {
        let mut c = ManifestCounts {
            total: self.records.len(),
            ..ManifestCounts::default()
        };
        for r in &self.records {
            match r.status {
                Status::Pending => c.pending += 1,
                Status::Fetched => c.fetched += 1,
                Status::Aligned => c.aligned += 1,
                Status::FilteredOut => c.filtered_out += 1,
            }
        }
        c
    }

    /// Applies one status change and returns the event describing it.
    pub fn transition(&mut self, id: &str, to: Status, content_hash: Option<&str>, error: &str) -> Result<AuditEvent> {
        let i = self
            .index_of(id)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown manifest id {id:?}")))?;
        let r = &mut self.records[i];
        let event = AuditEvent {
            seq: 0,
            unix_ms: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_millis() as u64)
                .unwrap_or(0),
            id: id.to_string(),
            from: r.status,
            to,
            content_hash: content_hash
                .map(str::to_string)
                .unwrap_or_else(|| r.content_hash.clone()),
            error: error.to_string(),
        };
        r.status = to;
        r.content_hash = event.content_hash.clone();
        r.error = event.error.clone();
        Ok(event)
    }
}

/// One status change. `from` is checked on replay.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEvent {
    pub seq: u64,
    pub unix_ms: u64,
    pub id: String,
    pub from: Status,
    pub to: Status,
    pub content_hash: String,
    pub error: String,
}

/// Append-only JSONL log of [`AuditEvent`]s.
#[derive(Debug, Clone)]
pub struct AuditLog {
    path: PathBuf,
    next_seq: u64,
}

impl AuditLog {
    /// Opens (or starts) the log, continuing its sequence numbers.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let next_seq = if path.exists() {
            read_events(&path)?.last().map(|e| e.seq + 1).unwrap_or(0)
        } else {
            0
        };
        Ok(Self { path, next_seq })
    }

    /// Conventional location next to a manifest: `<manifest>.audit.jsonl`.
    pub fn beside(manifest: &Path) -> Result<Self> {
        let mut name = manifest.file_name().unwrap_or_default().to_os_string();
        name.push(".audit.jsonl");
        Self::open(manifest.with_file_name(name))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&mut self, mut event: AuditEvent) -> Result<()> {
        event.seq = self.next_seq;
        let mut line = serde_json::to_vec(&event)?;
        line.push(b'\n');
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| Error::io(&self.path, e))?;
        f.write_all(&line).map_err(|e| Error::io(&self.path, e))?;
        self.next_seq += 1;
        Ok(())
    }

    pub fn events(&self) -> Result<Vec<AuditEvent>> {
        if !self.path.exists() {
            return Ok(Vec::new());
        }
        read_events(&self.path)
    }
}

fn read_events(path: &Path) -> Result<Vec<AuditEvent>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut events = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        events.push(serde_json::from_str(&line).map_err(|e| Error::Format {
            path: path.into(),
            message: format!("line {}: {e}", n + 1),
        })?);
    }
    Ok(events)
}

/// Re-applies `events` to `initial`; every event's `from` must match the
/// record's status at that point.
pub fn replay(initial: &Manifest, events: &[AuditEvent]) -> Result<Manifest> {
    let mut m = initial.clone();
    for e in events {
        let i = m
            .index_of(&e.id)
            .ok_or_else(|| Error::Integrity(format!("audit event {} names unknown id {:?}", e.seq, e.id)))?;
        let r = &mut m.records[i];
        if r.status != e.from {
            return Err(Error::Integrity(format!(
                "audit event {} expects {} in state {}, found {}",
                e.seq, e.id, e.from, r.status
            )));
        }
        r.status = e.to;
        r.content_hash = e.content_hash.clone();
        r.error = e.error.clone();
    }
    Ok(m)
}

/// One id per line; blank lines and `#` comments are ignored.
pub fn read_filterlist(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FilterOutcome {
    pub marked: Vec<String>,
    pub already_filtered: Vec<String>,
    /// Listed but never fetched; left pending.
    pub not_fetched: Vec<String>,
    pub unknown: Vec<String>,
}

/// Marks every listed fetched or aligned record `filtered_out`. Unknown and
/// unfetched ids only produce warnings.
pub fn apply_filterlist(
    manifest: &mut Manifest,
    ids: &[String],
    audit: Option<&mut AuditLog>,
) -> Result<FilterOutcome> {
    let mut out = FilterOutcome::default();
    let mut events = Vec::new();
    let unique: BTreeSet<&String> = ids.iter().collect();
    for id in unique {
        match manifest.get(id).map(|r| r.status) {
            None => {
                log::warn!("filterlist id {id:?} is not in the manifest");
                out.unknown.push(id.clone());
            }
            Some(Status::Pending) => {
                log::warn!("filterlist id {id:?} was never fetched");
                out.not_fetched.push(id.clone());
            }
            Some(Status::FilteredOut) => out.already_filtered.push(id.clone()),
            Some(Status::Fetched | Status::Aligned) => {
                events.push(manifest.transition(id, Status::FilteredOut, None, "")?);
                out.marked.push(id.clone());
            }
        }
    }
    if let Some(log) = audit {
        for e in events {
            log.append(e)?;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(n: usize) -> Manifest {
        Manifest::new(
            (0..n)
                .map(|k| {
                    let mut r = ManifestRecord::pending(
                        format!("img{k:03}"),
                        format!("https://example.org/p/{k}.png"),
                        Split::Train,
                    );
                    r.license_note = "CC-BY, attribution".into();
                    r
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn csv_round_trip_with_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let mut m = sample(3);
        m.transition("img001", Status::Fetched, Some("ab"), "").unwrap();
        m.records[2].split = Split::Holdout;
        m.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("id,url,license_note,split,status,content_hash,error\n"));
        assert_eq!(Manifest::load(&path).unwrap(), m);
    }

    #[test]
    fn rejects_duplicate_ids_and_bad_urls() {
        let r = ManifestRecord::pending("a", "https://example.org/a.png", Split::Train);
        assert!(Manifest::new(vec![r.clone(), r.clone()]).is_err());
        for url in ["not a url", "ftp://example.org/a.png", "/local/a.png"] {
            assert!(
                Manifest::new(vec![ManifestRecord::pending("a", url, Split::Train)]).is_err(),
                "{url}"
            );
        }
    }

    #[test]
    fn replay_reproduces_the_final_state() {
        let dir = tempfile::tempdir().unwrap();
        let initial = sample(4);
        let mut m = initial.clone();
        let mut log = AuditLog::open(dir.path().join("a.jsonl")).unwrap();
        log.append(m.transition("img000", Status::Fetched, Some("h0"), "").unwrap())
            .unwrap();
        log.append(m.transition("img001", Status::Pending, None, "HTTP 404").unwrap())
            .unwrap();
        log.append(m.transition("img000", Status::Aligned, None, "").unwrap())
            .unwrap();
        apply_filterlist(&mut m, &["img000".into()], Some(&mut log)).unwrap();
        let events = log.events().unwrap();
        assert_eq!(events.iter().map(|e| e.seq).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
        assert_eq!(replay(&initial, &events).unwrap(), m);
        assert_eq!(AuditLog::open(log.path()).unwrap().next_seq, 4);
        let mut out_of_order = events.clone();
        out_of_order.swap(0, 2);
        assert!(matches!(replay(&initial, &out_of_order), Err(Error::Integrity(_))));
    }

    #[test]
    fn filterlist_edge_cases() {
        let mut m = sample(3);
        for r in &mut m.records {
            r.status = Status::Aligned;
        }
        let before = m.clone();
        assert_eq!(apply_filterlist(&mut m, &[], None).unwrap(), FilterOutcome::default());
        assert_eq!(m, before);
        let all: Vec<String> = m.records.iter().map(|r| r.id.clone()).collect();
        let out = apply_filterlist(&mut m, &[all.clone(), vec!["ghost".into()]].concat(), None).unwrap();
        assert_eq!(out.unknown, vec!["ghost".to_string()]);
        assert_eq!(m.counts().kept(), 0);
        assert_eq!(m.counts().filtered_out, 3);
    }

    #[test]
    fn filterlist_file_format() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.txt");
        std::fs::write(&p, "# rejected\nimg001\n\n  img002  # blurry\n").unwrap();
        assert_eq!(read_filterlist(&p).unwrap(), vec!["img001", "img002"]);
    }

    proptest! {
        #[test]
        fn filter_counts_reconcile(
            statuses in proptest::collection::vec(0u8..4, 1..30),
            lists in proptest::collection::vec(proptest::collection::vec(0usize..40, 0..10), 0..5),
        ) {
            let mut m = sample(statuses.len());
            for (r, s) in m.records.iter_mut().zip(&statuses) {
                r.status = [Status::Pending, Status::Fetched, Status::Aligned, Status::FilteredOut][*s as usize];
            }
            let start = m.counts();
            let mut listed = BTreeSet::new();
            for list in &lists {
                let ids: Vec<String> = list.iter().map(|k| format!("img{k:03}")).collect();
                apply_filterlist(&mut m, &ids, None).unwrap();
                listed.extend(ids);
                let c = m.counts();
                prop_assert_eq!(c.total, start.total);
                prop_assert_eq!(c.pending, start.pending);
                prop_assert_eq!(c.ever_fetched(), start.ever_fetched());
                prop_assert_eq!(c.kept() + c.filtered_out, c.ever_fetched());
            }
            for r in &m.records {
                let was = statuses[r.id[3..].parse::<usize>().unwrap()];
                let expect_filtered = was == 3 || (listed.contains(&r.id) && (was == 1 || was == 2));
                prop_assert_eq!(r.status == Status::FilteredOut, expect_filtered);
            }
        }
    }
}
