//! The semantic tool library: capitalized tools (validated and too_hard) with
//! usage metrics, durable storage and similarity search for the Coach.

use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedding::{normalized_similarity, EmbeddingError, EmbeddingVector, Embedder};
use crate::env::StepResult;
use crate::sandbox::{ExecutionReport, TestSuite, ToolCode};

#[derive(Debug, thiserror::Error)]
pub enum LibraryError {
    #[error("tool violates its status invariant: {0}")]
    InvariantViolation(String),
    #[error("tool store unavailable: {0}")]
    StoreUnavailable(String),
    #[error("unknown tool `{0}`")]
    UnknownTool(String),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Novelty {
    New,
    Improved,
    Specialized,
}

/// What the Coach asks for.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolSpec {
    pub name: String,
    pub purpose: String,
    #[serde(default)]
    pub input_contract: String,
    #[serde(default)]
    pub output_contract: String,
    #[serde(default)]
    pub test_plan: Vec<String>,
    pub novelty: Novelty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolStatus {
    Validated,
    TooHard,
    Deprecated,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ToolMetrics {
    pub mean_score_delta: f64,
    pub success_rate: f64,
    pub times_used: u64,
    pub successes: u64,
    pub last_used_iteration: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub session_id: String,
    pub iteration: u64,
    #[serde(default)]
    pub human_edited: bool,
    /// Loaded as a code primitive before the first iteration.
    #[serde(default)]
    pub seeded: bool,
    #[serde(default)]
    pub retries_used: u32,
    #[serde(default)]
    pub retry_budget_exhausted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolRecord {
    #[serde(default)]
    pub id: String,
    pub name: String,
    pub description: String,
    #[serde(default)]
    pub usage: String,
    pub spec: ToolSpec,
    pub code: ToolCode,
    pub tests: TestSuite,
    pub last_report: ExecutionReport,
    pub status: ToolStatus,
    #[serde(default)]
    pub metrics: ToolMetrics,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description_embedding: Option<EmbeddingVector>,
    #[serde(default)]
    pub provenance: Provenance,
}

impl ToolRecord {
    pub fn check_invariants(&self) -> Result<(), LibraryError> {
        match self.status {
            ToolStatus::Validated => {
                if self.tests.is_empty() {
                    return Err(LibraryError::InvariantViolation("validated tool has no tests".into()));
                }
                if !self.last_report.passed() {
                    return Err(LibraryError::InvariantViolation("validated tool's last report is failing".into()));
                }
            }
            ToolStatus::TooHard => {
                if !self.provenance.retry_budget_exhausted {
                    return Err(LibraryError::InvariantViolation(
                        "too_hard tool did not exhaust its retry budget".into(),
                    ));
                }
            }
            ToolStatus::Deprecated => {}
        }
        if self.name.trim().is_empty() {
            return Err(LibraryError::InvariantViolation("tool has no name".into()));
        }
        Ok(())
    }

    /// Stable content address over name, spec, code, tests and status.
    pub fn content_id(&self) -> String {
        let body = serde_json::to_vec(&(&self.name, &self.spec, &self.code, &self.tests, self.status))
            .expect("tool content serializes");
        format!("tool-{}", &hex::encode(Sha256::digest(&body))[..16])
    }

    fn search_text(&self) -> &str {
        if self.description.trim().is_empty() {
            &self.spec.purpose
        } else {
            &self.description
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatusFilter {
    Any,
    Only(ToolStatus),
    Active,
}

impl StatusFilter {
    fn admits(self, status: ToolStatus) -> bool {
        match self {
            StatusFilter::Any => true,
            StatusFilter::Only(s) => s == status,
            StatusFilter::Active => status != ToolStatus::Deprecated,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub id: String,
    pub name: String,
    pub similarity: f64,
    pub status: ToolStatus,
}

/// Similarity lookup over description embeddings. Swappable for an external index.
pub trait SearchIndex: Send + Sync {
    fn upsert(&mut self, id: &str, vector: EmbeddingVector);
    /// Similarity of `query` against every indexed id, in insertion order.
    fn similarities(&self, query: &EmbeddingVector) -> Result<Vec<(String, f64)>, EmbeddingError>;
}

#[derive(Debug, Default)]
pub struct LinearIndex {
    entries: Vec<(String, EmbeddingVector)>,
}

impl SearchIndex for LinearIndex {
    fn upsert(&mut self, id: &str, vector: EmbeddingVector) {
        match self.entries.iter_mut().find(|(i, _)| i == id) {
            Some(entry) => entry.1 = vector,
            None => self.entries.push((id.to_owned(), vector)),
        }
    }

    fn similarities(&self, query: &EmbeddingVector) -> Result<Vec<(String, f64)>, EmbeddingError> {
        self.entries
            .iter()
            .map(|(id, v)| normalized_similarity(query, v).map(|s| (id.clone(), s)))
            .collect()
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum StoreLine {
    Archive { record: Box<ToolRecord> },
    Metrics { id: String, metrics: ToolMetrics },
    Status { id: String, status: ToolStatus },
}

/// Append-only `tools.jsonl` plus content-addressed `objects/<id>/` files.
#[derive(Debug, Clone)]
struct FileStore {
    root: PathBuf,
}

impl FileStore {
    fn append(&self, line: &StoreLine) -> Result<(), LibraryError> {
        let path = self.root.join("tools.jsonl");
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| LibraryError::StoreUnavailable(format!("{}: {e}", path.display())))?;
        let mut text = serde_json::to_string(line).expect("store line serializes");
        text.push('\n');
        f.write_all(text.as_bytes())
            .map_err(|e| LibraryError::StoreUnavailable(e.to_string()))
    }

    fn write_objects(&self, record: &ToolRecord, extension: &str) -> Result<(), LibraryError> {
        let dir = self.root.join("objects").join(&record.id);
        let io = |e: std::io::Error| LibraryError::StoreUnavailable(e.to_string());
        fs::create_dir_all(&dir).map_err(io)?;
        fs::write(dir.join(format!("code.{extension}")), &record.code.source).map_err(io)?;
        fs::write(
            dir.join("tests.json"),
            serde_json::to_string_pretty(&record.tests).expect("tests serialize"),
        )
        .map_err(io)
    }

    fn read_lines(&self) -> Result<Vec<StoreLine>, LibraryError> {
        let path = self.root.join("tools.jsonl");
        if !path.exists() {
            return Ok(Vec::new());
        }
        let text = fs::read_to_string(&path).map_err(|e| LibraryError::StoreUnavailable(e.to_string()))?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(n, l)| {
                serde_json::from_str(l)
                    .map_err(|e| LibraryError::StoreUnavailable(format!("tools.jsonl line {}: {e}", n + 1)))
            })
            .collect()
    }
}

pub struct ToolLibrary {
    records: Vec<ToolRecord>,
    index: Box<dyn SearchIndex>,
    embedder: Embedder,
    store: Option<FileStore>,
}

impl std::fmt::Debug for ToolLibrary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ToolLibrary")
            .field("records", &self.records.len())
            .field("store", &self.store.as_ref().map(|s| &s.root))
            .finish()
    }
}

impl ToolLibrary {
    pub fn in_memory(embedder: Embedder) -> Self {
        Self::with_index(embedder, Box::new(LinearIndex::default()))
    }

    pub fn with_index(embedder: Embedder, index: Box<dyn SearchIndex>) -> Self {
        Self {
            records: Vec::new(),
            index,
            embedder,
            store: None,
        }
    }

    /// Opens (or creates) a file-backed library, replaying its store.
    pub fn open(root: &Path, embedder: Embedder) -> Result<Self, LibraryError> {
        fs::create_dir_all(root).map_err(|e| LibraryError::StoreUnavailable(format!("{}: {e}", root.display())))?;
        let store = FileStore { root: root.to_owned() };
        let mut lib = Self::in_memory(embedder);
        for line in store.read_lines()? {
            match line {
                StoreLine::Archive { record } => lib.insert(*record)?,
                StoreLine::Metrics { id, metrics } => lib.get_mut(&id)?.metrics = metrics,
                StoreLine::Status { id, status } => lib.get_mut(&id)?.status = status,
            }
        }
        lib.store = Some(store);
        Ok(lib)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[ToolRecord] {
        &self.records
    }

    pub fn get(&self, id: &str) -> Option<&ToolRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    fn get_mut(&mut self, id: &str) -> Result<&mut ToolRecord, LibraryError> {
        self.records
            .iter_mut()
            .find(|r| r.id == id)
            .ok_or_else(|| LibraryError::UnknownTool(id.to_owned()))
    }

    fn insert(&mut self, record: ToolRecord) -> Result<(), LibraryError> {
        let vector = match &record.description_embedding {
            Some(v) => v.clone(),
            None => self.embedder.embed_text(record.search_text())?,
        };
        self.index.upsert(&record.id, vector);
        self.records.push(record);
        Ok(())
    }

    /// Prepares a draft for archiving: invariants checked, id and embedding filled.
    pub fn prepare(&self, mut draft: ToolRecord) -> Result<ToolRecord, LibraryError> {
        draft.check_invariants()?;
        draft.id = draft.content_id();
        if draft.description_embedding.is_none() {
            draft.description_embedding = Some(self.embedder.embed_text(draft.search_text())?);
        }
        Ok(draft)
    }

    /// Stores a draft. Archiving identical content twice returns the same id.
    pub fn archive_tool(&mut self, draft: ToolRecord) -> Result<String, LibraryError> {
        let record = self.prepare(draft)?;
        self.archive_prepared(record)
    }

    /// Stores an already prepared record (as produced by [`prepare`](Self::prepare)).
    pub fn archive_prepared(&mut self, record: ToolRecord) -> Result<String, LibraryError> {
        let id = record.id.clone();
        if self.get(&id).is_some() {
            return Ok(id);
        }
        if let Some(store) = &self.store {
            let ext = if record.code.profile.starts_with("python") { "py" } else { "txt" };
            store.write_objects(&record, ext)?;
            store.append(&StoreLine::Archive {
                record: Box::new(record.clone()),
            })?;
        }
        self.insert(record)?;
        Ok(id)
    }

    pub fn set_status(&mut self, id: &str, status: ToolStatus) -> Result<(), LibraryError> {
        self.get_mut(id)?.status = status;
        if let Some(store) = &self.store {
            store.append(&StoreLine::Status { id: id.to_owned(), status })?;
        }
        Ok(())
    }

    pub fn search_tools(&self, query: &str, k: usize, filter: StatusFilter) -> Result<Vec<SearchHit>, LibraryError> {
        if self.records.is_empty() || k == 0 {
            return Ok(Vec::new());
        }
        let q = self.embedder.embed_text(query)?;
        let sims = self.index.similarities(&q)?;
        let mut hits: Vec<(usize, &ToolRecord, f64)> = sims
            .into_iter()
            .filter_map(|(id, s)| {
                let pos = self.records.iter().position(|r| r.id == id)?;
                let r = &self.records[pos];
                filter.admits(r.status).then_some((pos, r, s))
            })
            .collect();
        hits.sort_by(|a, b| {
            b.2.total_cmp(&a.2)
                .then(b.1.metrics.mean_score_delta.total_cmp(&a.1.metrics.mean_score_delta))
                .then(b.1.metrics.last_used_iteration.cmp(&a.1.metrics.last_used_iteration))
                .then(a.0.cmp(&b.0))
        });
        Ok(hits
            .into_iter()
            .take(k)
            .map(|(_, r, s)| SearchHit {
                id: r.id.clone(),
                name: r.name.clone(),
                similarity: s,
                status: r.status,
            })
            .collect())
    }

    /// Deterministic summary shown to the Coach.
    pub fn library_digest(&self, max_items: usize) -> String {
        let count = |s| self.records.iter().filter(|r| r.status == s).count();
        let mut out = format!(
            "{} validated, {} too_hard",
            count(ToolStatus::Validated),
            count(ToolStatus::TooHard)
        );
        let deprecated = count(ToolStatus::Deprecated);
        if deprecated > 0 {
            let _ = write!(out, ", {deprecated} deprecated");
        }
        let mut validated: Vec<(usize, &ToolRecord)> = self
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.status == ToolStatus::Validated)
            .collect();
        validated.sort_by(|a, b| {
            b.1.metrics
                .mean_score_delta
                .total_cmp(&a.1.metrics.mean_score_delta)
                .then(a.0.cmp(&b.0))
        });
        if !validated.is_empty() {
            out.push_str("\ntop tools:");
            for (_, r) in validated.iter().take(max_items) {
                let desc = r.description.lines().next().unwrap_or("");
                let _ = write!(
                    out,
                    "\n- {} (mean delta {:+.2}, used {}): {}",
                    r.name, r.metrics.mean_score_delta, r.metrics.times_used, desc
                );
            }
        }
        let too_hard: Vec<&str> = self
            .records
            .iter()
            .rev()
            .filter(|r| r.status == ToolStatus::TooHard)
            .take(max_items)
            .map(|r| r.name.as_str())
            .collect();
        if !too_hard.is_empty() {
            let _ = write!(out, "\nrecent too_hard: {}", too_hard.join(", "));
        }
        out
    }

    pub fn update_metrics(&mut self, id: &str, step: &StepResult, iteration: u64) -> Result<ToolRecord, LibraryError> {
        let record = self.get_mut(id)?;
        let m = &mut record.metrics;
        m.times_used += 1;
        m.mean_score_delta += (step.delta - m.mean_score_delta) / m.times_used as f64;
        if step.delta >= 0.0 {
            m.successes += 1;
        }
        m.success_rate = m.successes as f64 / m.times_used as f64;
        m.last_used_iteration = Some(iteration);
        let updated = record.clone();
        if let Some(store) = &self.store {
            store.append(&StoreLine::Metrics {
                id: id.to_owned(),
                metrics: updated.metrics.clone(),
            })?;
        }
        Ok(updated)
    }

    /// Overwrites metrics verbatim; used when rebuilding from an event log.
    pub fn restore_metrics(&mut self, id: &str, metrics: ToolMetrics) -> Result<(), LibraryError> {
        self.get_mut(id)?.metrics = metrics;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sandbox::{Assertion, PhaseTimings, SyntaxResult, TestCase, TestOrigin, TestOutcome};

    fn passing_report() -> ExecutionReport {
        ExecutionReport {
            syntax: SyntaxResult::Pass,
            tests: vec![TestOutcome {
                name: "smoke".into(),
                passed: true,
                failure: None,
                breach: None,
                output: String::new(),
                wall_ms: 0,
            }],
            breaches: vec![],
            fix_attempts: 0,
            rejected: None,
            timings: PhaseTimings::default(),
        }
    }

    pub(crate) fn draft(name: &str, description: &str, status: ToolStatus) -> ToolRecord {
        ToolRecord {
            id: String::new(),
            name: name.into(),
            description: description.into(),
            usage: String::new(),
            spec: ToolSpec {
                name: name.into(),
                purpose: description.into(),
                input_contract: String::new(),
                output_contract: String::new(),
                test_plan: vec![],
                novelty: Novelty::New,
            },
            code: ToolCode::python("def run(state, args):\n    return state\n"),
            tests: TestSuite {
                cases: vec![TestCase {
                    name: "smoke".into(),
                    setup: None,
                    args: serde_json::json!({}),
                    expected: Assertion::ReturnsValidState,
                }],
                origin: TestOrigin::AutoGenerated,
            },
            last_report: passing_report(),
            status,
            metrics: ToolMetrics::default(),
            description_embedding: None,
            provenance: Provenance {
                retry_budget_exhausted: status == ToolStatus::TooHard,
                ..Provenance::default()
            },
        }
    }

    fn step(delta: f64) -> StepResult {
        StepResult {
            problem_id: "p".into(),
            revision: 1,
            score_before: Some(0.0),
            score_after: Some(delta),
            delta,
            tool_id: String::new(),
            diagnostics: String::new(),
        }
    }

    #[test]
    fn archive_is_idempotent_and_checks_invariants() {
        let mut lib = ToolLibrary::in_memory(Embedder::deterministic());
        let id = lib.archive_tool(draft("writer", "writes sections", ToolStatus::Validated)).unwrap();
        assert_eq!(lib.get(&id).unwrap().name, "writer");
        assert_eq!(lib.archive_tool(draft("writer", "writes sections", ToolStatus::Validated)).unwrap(), id);
        assert_eq!(lib.len(), 1);

        let mut empty = draft("x", "y", ToolStatus::Validated);
        empty.tests.cases.clear();
        assert!(matches!(lib.archive_tool(empty), Err(LibraryError::InvariantViolation(_))));
        let mut hard = draft("x", "y", ToolStatus::TooHard);
        hard.provenance.retry_budget_exhausted = false;
        assert!(matches!(lib.archive_tool(hard), Err(LibraryError::InvariantViolation(_))));
    }

    #[test]
    fn search_ranks_exact_description_first() {
        let mut lib = ToolLibrary::in_memory(Embedder::deterministic());
        assert!(lib.search_tools("anything", 3, StatusFilter::Any).unwrap().is_empty());
        lib.archive_tool(draft("refs", "collect bibliography references", ToolStatus::Validated)).unwrap();
        let x = lib.archive_tool(draft("plan", "draft the outline plan of sections", ToolStatus::Validated)).unwrap();
        let hits = lib.search_tools("draft the outline plan of sections", 2, StatusFilter::Any).unwrap();
        assert_eq!(hits[0].id, x);
        assert!((hits[0].similarity - 1.0).abs() < 1e-12);
    }

    #[test]
    fn digest_lists_names_deterministically() {
        let mut lib = ToolLibrary::in_memory(Embedder::deterministic());
        assert_eq!(lib.library_digest(5), "0 validated, 0 too_hard");
        lib.archive_tool(draft("alpha", "a", ToolStatus::Validated)).unwrap();
        lib.archive_tool(draft("beta", "b", ToolStatus::Validated)).unwrap();
        lib.archive_tool(draft("gamma", "c", ToolStatus::TooHard)).unwrap();
        let d = lib.library_digest(5);
        assert!(d.starts_with("2 validated, 1 too_hard"));
        for n in ["alpha", "beta", "gamma"] {
            assert!(d.contains(n), "{d}");
        }
        assert_eq!(d, lib.library_digest(5));
    }

    #[test]
    fn metrics_running_mean() {
        let mut lib = ToolLibrary::in_memory(Embedder::deterministic());
        let id = lib.archive_tool(draft("w", "writer", ToolStatus::Validated)).unwrap();
        let r = lib.update_metrics(&id, &step(4.0), 1).unwrap();
        assert_eq!((r.metrics.mean_score_delta, r.metrics.times_used), (4.0, 1));
        let r = lib.update_metrics(&id, &step(0.0), 2).unwrap();
        assert_eq!((r.metrics.mean_score_delta, r.metrics.times_used), (2.0, 2));
        assert_eq!(r.metrics.success_rate, 1.0);
        assert!(matches!(lib.update_metrics("nope", &step(1.0), 3), Err(LibraryError::UnknownTool(_))));
    }

    #[test]
    fn file_store_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let id = {
            let mut lib = ToolLibrary::open(dir.path(), Embedder::deterministic()).unwrap();
            let id = lib.archive_tool(draft("w", "writer", ToolStatus::Validated)).unwrap();
            lib.update_metrics(&id, &step(3.0), 1).unwrap();
            lib.set_status(&id, ToolStatus::Deprecated).unwrap();
            id
        };
        assert!(dir.path().join("objects").join(&id).join("code.py").exists());
        let lib = ToolLibrary::open(dir.path(), Embedder::deterministic()).unwrap();
        let r = lib.get(&id).unwrap();
        assert_eq!(r.metrics.times_used, 1);
        assert_eq!(r.status, ToolStatus::Deprecated);
        assert!(lib.search_tools("writer", 5, StatusFilter::Active).unwrap().is_empty());
    }
}
