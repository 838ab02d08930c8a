//! Target documents: ingestion from extracted text, the on-disk dataset layout,
//! and the plan tree that scoring aligns against.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedding::{EmbeddingError, Embedder};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("malformed document: {0}")]
    MalformedDocument(String),
    #[error("unsupported document format `{0}`")]
    UnsupportedFormat(String),
    #[error("io failure on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("schema violation in record `{id}`: field `{field}`")]
    SchemaViolation { id: String, field: String },
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

impl CorpusError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        CorpusError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    fn schema(id: &str, field: impl Into<String>) -> Self {
        CorpusError::SchemaViolation {
            id: id.to_owned(),
            field: field.into(),
        }
    }
}

/// Whitespace-split token count, used for every length measure.
pub fn token_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Slash-joined 1-based child indices from the plan root, e.g. `2/1`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct PlanPath(Vec<usize>);

impl PlanPath {
    pub fn new(indices: Vec<usize>) -> Self {
        debug_assert!(indices.iter().all(|&i| i >= 1));
        Self(indices)
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn child(&self, index: usize) -> Self {
        let mut v = self.0.clone();
        v.push(index);
        Self(v)
    }

    pub fn depth(&self) -> usize {
        self.0.len()
    }
}

impl fmt::Display for PlanPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|i| i.to_string()).collect();
        f.write_str(&parts.join("/"))
    }
}

impl FromStr for PlanPath {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.is_empty() {
            return Ok(PlanPath::default());
        }
        s.split('/')
            .map(|p| match p.parse::<usize>() {
                Ok(i) if i >= 1 => Ok(i),
                _ => Err(format!("invalid plan path segment `{p}` in `{s}`")),
            })
            .collect::<Result<Vec<_>, _>>()
            .map(PlanPath)
    }
}

impl Serialize for PlanPath {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PlanPath {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanNode {
    pub title: String,
    pub depth: usize,
    #[serde(default)]
    pub children: Vec<PlanNode>,
    #[serde(default)]
    pub content_token_count: usize,
}

impl PlanNode {
    pub fn root(title: impl Into<String>) -> Self {
        Self {
            title: title.into(),
            depth: 1,
            children: Vec::new(),
            content_token_count: 0,
        }
    }

    pub fn resolve(&self, path: &PlanPath) -> Option<&PlanNode> {
        path.indices()
            .iter()
            .try_fold(self, |node, &i| node.children.get(i.checked_sub(1)?))
    }

    pub fn resolve_mut(&mut self, path: &PlanPath) -> Option<&mut PlanNode> {
        let mut node = self;
        for &i in path.indices() {
            node = node.children.get_mut(i.checked_sub(1)?)?;
        }
        Some(node)
    }

    /// Depth-first pre-order listing of every node below the root.
    pub fn flatten(&self) -> Vec<(PlanPath, &PlanNode)> {
        fn walk<'a>(node: &'a PlanNode, path: PlanPath, out: &mut Vec<(PlanPath, &'a PlanNode)>) {
            for (i, child) in node.children.iter().enumerate() {
                let p = path.child(i + 1);
                out.push((p.clone(), child));
                walk(child, p, out);
            }
        }
        let mut out = Vec::new();
        walk(self, PlanPath::default(), &mut out);
        out
    }

    pub fn node_count(&self) -> usize {
        self.children.iter().map(|c| 1 + c.node_count()).sum()
    }

    pub fn total_tokens(&self) -> usize {
        self.content_token_count + self.children.iter().map(PlanNode::total_tokens).sum::<usize>()
    }

    /// Checks that every child sits exactly one level below its parent.
    pub fn depths_consistent(&self) -> bool {
        self.children
            .iter()
            .all(|c| c.depth == self.depth + 1 && c.depths_consistent())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Section {
    pub path: PlanPath,
    pub content: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DocClass {
    Survey,
    Encyclopedia,
    Patent,
    Other,
}

impl FromStr for DocClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "survey" => Ok(DocClass::Survey),
            "encyclopedia" => Ok(DocClass::Encyclopedia),
            "patent" => Ok(DocClass::Patent),
            "other" => Ok(DocClass::Other),
            other => Err(format!("unknown doc class `{other}`")),
        }
    }
}

/// Per-field vectors from a single provider.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordEmbeddings {
    pub provider: String,
    pub dim: usize,
    pub vectors: BTreeMap<String, Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentRecord {
    pub id: String,
    pub doc_class: DocClass,
    pub title: String,
    #[serde(rename = "abstract")]
    pub abstract_text: String,
    pub plan: PlanNode,
    pub sections: Vec<Section>,
    pub references: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<RecordEmbeddings>,
}

impl DocumentRecord {
    pub fn section(&self, path: &PlanPath) -> Option<&str> {
        self.sections
            .iter()
            .find(|s| &s.path == path)
            .map(|s| s.content.as_str())
    }

    pub fn content_tokens(&self) -> usize {
        self.sections.iter().map(|s| token_count(&s.content)).sum()
    }

    /// Embedding map keys that this record's fields can carry.
    pub fn embedding_keys(&self) -> Vec<String> {
        let mut keys = vec!["title".to_owned()];
        if !self.abstract_text.trim().is_empty() {
            keys.push("abstract".to_owned());
        }
        for (path, _) in self.plan.flatten() {
            keys.push(format!("section_title:{path}"));
        }
        for s in &self.sections {
            keys.push(format!("section_content:{}", s.path));
        }
        for i in 0..self.references.len() {
            keys.push(format!("reference:{i}"));
        }
        keys
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let id = self.id.as_str();
        if id.trim().is_empty() {
            return Err(CorpusError::schema(id, "id"));
        }
        if self.title.trim().is_empty() {
            return Err(CorpusError::schema(id, "title"));
        }
        if self.plan.depth != 1 || !self.plan.depths_consistent() {
            return Err(CorpusError::schema(id, "plan.depth"));
        }
        let mut seen_paths = HashSet::new();
        for s in &self.sections {
            let Some(node) = self.plan.resolve(&s.path) else {
                return Err(CorpusError::schema(id, format!("sections[{}].path", s.path)));
            };
            if s.path.depth() == 0 || !seen_paths.insert(&s.path) {
                return Err(CorpusError::schema(id, format!("sections[{}].path", s.path)));
            }
            if node.content_token_count != token_count(&s.content) {
                return Err(CorpusError::schema(id, format!("plan[{}].content_token_count", s.path)));
            }
        }
        if self.plan.total_tokens() != self.content_tokens() {
            return Err(CorpusError::schema(id, "plan.content_token_count"));
        }
        let mut seen_refs = HashSet::new();
        for r in &self.references {
            if !seen_refs.insert(normalize_ws(r)) {
                return Err(CorpusError::schema(id, "references"));
            }
        }
        if let Some(emb) = &self.embeddings {
            let allowed: HashSet<String> = self.embedding_keys().into_iter().collect();
            for (key, values) in &emb.vectors {
                if !allowed.contains(key) {
                    return Err(CorpusError::schema(id, format!("embeddings.{key}")));
                }
                if values.len() != emb.dim {
                    return Err(CorpusError::schema(id, format!("embeddings.{key}.dim")));
                }
            }
        }
        Ok(())
    }
}

/// Fills `record.embeddings` for every embeddable field.
pub fn embed_record(record: &mut DocumentRecord, embedder: &Embedder) -> Result<(), CorpusError> {
    let mut fields: Vec<(String, &str)> = vec![("title".into(), record.title.as_str())];
    if !record.abstract_text.trim().is_empty() {
        fields.push(("abstract".into(), record.abstract_text.as_str()));
    }
    for (path, node) in record.plan.flatten() {
        if !node.title.trim().is_empty() {
            fields.push((format!("section_title:{path}"), node.title.as_str()));
        }
    }
    for s in &record.sections {
        if !s.content.trim().is_empty() {
            fields.push((format!("section_content:{}", s.path), s.content.as_str()));
        }
    }
    for (i, r) in record.references.iter().enumerate() {
        fields.push((format!("reference:{i}"), r.as_str()));
    }
    let texts: Vec<&str> = fields.iter().map(|(_, t)| *t).collect();
    let vectors = embedder.embed_many(&texts)?;
    record.embeddings = Some(RecordEmbeddings {
        provider: embedder.provider_id().to_owned(),
        dim: embedder.dim(),
        vectors: fields
            .into_iter()
            .zip(vectors)
            .map(|((k, _), v)| (k, v.values))
            .collect(),
    });
    Ok(())
}

fn normalize_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DocumentFormat {
    MarkdownLike,
    SectionedJson,
}

impl FromStr for DocumentFormat {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "markdown-like" | "markdown" | "md" => Ok(DocumentFormat::MarkdownLike),
            "sectioned-json" | "json" => Ok(DocumentFormat::SectionedJson),
            other => Err(CorpusError::UnsupportedFormat(other.to_owned())),
        }
    }
}

fn is_reference_heading(title: &str) -> bool {
    let t = title
        .trim()
        .trim_start_matches(|c: char| c.is_ascii_digit() || c == '.' || c.is_whitespace())
        .trim_end_matches(':')
        .to_ascii_lowercase();
    t == "references" || t == "bibliography"
}

/// Splits a references block on blank lines or leading enumeration markers.
pub fn split_references(block: &str) -> Vec<String> {
    let marker = regex::Regex::new(r"^\s*(\[\d+\]|\d+[.)]|[-*•])\s+").expect("static regex");
    let mut refs: Vec<String> = Vec::new();
    let mut current = String::new();
    let flush = |current: &mut String, refs: &mut Vec<String>| {
        let r = normalize_ws(current);
        if !r.is_empty() && !refs.contains(&r) {
            refs.push(r);
        }
        current.clear();
    };
    for line in block.lines() {
        if line.trim().is_empty() {
            flush(&mut current, &mut refs);
            continue;
        }
        if let Some(m) = marker.find(line) {
            flush(&mut current, &mut refs);
            current.push_str(&line[m.end()..]);
        } else {
            current.push(' ');
            current.push_str(line);
        }
    }
    flush(&mut current, &mut refs);
    refs
}

struct Builder {
    plan: PlanNode,
    sections: Vec<Section>,
}

impl Builder {
    fn add_section(&mut self, path: &PlanPath, content: &str) {
        let content = content.trim();
        if content.is_empty() {
            return;
        }
        let node = self.plan.resolve_mut(path).expect("path built by ingestion");
        node.content_token_count = token_count(content);
        self.sections.push(Section {
            path: path.clone(),
            content: content.to_owned(),
        });
    }
}

fn derive_id(raw: &str) -> String {
    let digest = Sha256::digest(raw.as_bytes());
    format!("doc-{}", &hex::encode(digest)[..12])
}

/// Parses already-extracted document text into a record (no embeddings).
pub fn ingest_document(raw: &str, format: DocumentFormat) -> Result<DocumentRecord, CorpusError> {
    if raw.trim().is_empty() {
        return Err(CorpusError::MalformedDocument("empty input".into()));
    }
    let record = match format {
        DocumentFormat::MarkdownLike => ingest_markdown(raw)?,
        DocumentFormat::SectionedJson => ingest_sectioned_json(raw)?,
    };
    record.validate()?;
    Ok(record)
}

fn ingest_markdown(raw: &str) -> Result<DocumentRecord, CorpusError> {
    let mut body = raw;
    let mut meta: BTreeMap<String, String> = BTreeMap::new();
    if let Some(rest) = raw.strip_prefix("---\n") {
        if let Some(end) = rest.find("\n---") {
            for line in rest[..end].lines() {
                if let Some((k, v)) = line.split_once(':') {
                    meta.insert(k.trim().to_owned(), v.trim().to_owned());
                }
            }
            body = rest[end + 4..].trim_start_matches('\n');
        }
    }

    let heading = |line: &str| -> Option<(usize, String)> {
        let hashes = line.chars().take_while(|&c| c == '#').count();
        if (1..=6).contains(&hashes) && line[hashes..].starts_with(' ') {
            Some((hashes, line[hashes..].trim().to_owned()))
        } else {
            None
        }
    };

    let lines: Vec<&str> = body.lines().collect();
    let title_idx = lines
        .iter()
        .position(|l| matches!(heading(l), Some((1, _))))
        .ok_or_else(|| CorpusError::MalformedDocument("no `# ` title heading".into()))?;
    let title = heading(lines[title_idx]).map(|(_, t)| t).unwrap_or_default();
    if title.is_empty() {
        return Err(CorpusError::MalformedDocument("empty title".into()));
    }

    let mut b = Builder {
        plan: PlanNode::root(title.clone()),
        sections: Vec::new(),
    };
    let mut abstract_text = String::new();
    let mut references = Vec::new();
    // Stack of (heading level, plan path) for open sections.
    let mut stack: Vec<(usize, PlanPath)> = Vec::new();
    enum Sink {
        Abstract,
        Node(PlanPath),
        References(usize),
    }
    let mut sink = Sink::Abstract;
    let mut buffer = String::new();

    let flush = |sink: &Sink, buffer: &mut String, b: &mut Builder, abs: &mut String, refs: &mut Vec<String>| {
        match sink {
            Sink::Abstract => {
                let t = buffer.trim();
                if !t.is_empty() {
                    if !abs.is_empty() {
                        abs.push('\n');
                    }
                    abs.push_str(t);
                }
            }
            Sink::Node(path) => b.add_section(path, buffer),
            Sink::References(_) => refs.extend(split_references(buffer)),
        }
        buffer.clear();
    };

    for line in &lines[title_idx + 1..] {
        let Some((level, heading_title)) = heading(line) else {
            buffer.push_str(line);
            buffer.push('\n');
            continue;
        };
        if let Sink::References(ref_level) = sink {
            if level > ref_level {
                buffer.push_str(line);
                buffer.push('\n');
                continue;
            }
        }
        flush(&sink, &mut buffer, &mut b, &mut abstract_text, &mut references);
        if level == 1 {
            // A second top-level heading is treated as body text under the root.
            sink = Sink::Abstract;
            continue;
        }
        if heading_title.eq_ignore_ascii_case("abstract") && stack.is_empty() && b.plan.children.is_empty() {
            sink = Sink::Abstract;
            continue;
        }
        if is_reference_heading(&heading_title) {
            sink = Sink::References(level);
            continue;
        }
        while stack.last().is_some_and(|(l, _)| *l >= level) {
            stack.pop();
        }
        let parent_path = stack.last().map(|(_, p)| p.clone()).unwrap_or_default();
        let parent = b.plan.resolve_mut(&parent_path).expect("open section exists");
        parent.children.push(PlanNode {
            title: heading_title,
            depth: parent.depth + 1,
            children: Vec::new(),
            content_token_count: 0,
        });
        let path = parent_path.child(parent.children.len());
        stack.push((level, path.clone()));
        sink = Sink::Node(path);
    }
    flush(&sink, &mut buffer, &mut b, &mut abstract_text, &mut references);

    let doc_class = match meta.get("doc_class") {
        Some(c) => c.parse().map_err(CorpusError::MalformedDocument)?,
        None => DocClass::Other,
    };
    Ok(DocumentRecord {
        id: meta.get("id").cloned().unwrap_or_else(|| derive_id(raw)),
        doc_class,
        title,
        abstract_text,
        plan: b.plan,
        sections: b.sections,
        references,
        embeddings: None,
    })
}

#[derive(Deserialize)]
struct JsonSection {
    title: String,
    #[serde(default)]
    content: String,
    #[serde(default)]
    children: Vec<JsonSection>,
}

#[derive(Deserialize)]
struct JsonDocument {
    id: Option<String>,
    doc_class: Option<DocClass>,
    title: Option<String>,
    #[serde(default, rename = "abstract")]
    abstract_text: String,
    #[serde(default)]
    sections: Vec<JsonSection>,
    #[serde(default)]
    references: Vec<String>,
}

fn ingest_sectioned_json(raw: &str) -> Result<DocumentRecord, CorpusError> {
    let doc: JsonDocument =
        serde_json::from_str(raw).map_err(|e| CorpusError::MalformedDocument(e.to_string()))?;
    let title = doc
        .title
        .filter(|t| !t.trim().is_empty())
        .ok_or_else(|| CorpusError::MalformedDocument("missing title".into()))?;
    let mut b = Builder {
        plan: PlanNode::root(title.trim()),
        sections: Vec::new(),
    };
    fn add(b: &mut Builder, parent: &PlanPath, sections: &[JsonSection]) {
        for s in sections {
            let parent_node = b.plan.resolve_mut(parent).expect("parent exists");
            parent_node.children.push(PlanNode {
                title: s.title.trim().to_owned(),
                depth: parent_node.depth + 1,
                children: Vec::new(),
                content_token_count: 0,
            });
            let path = parent.child(parent_node.children.len());
            b.add_section(&path, &s.content);
            add(b, &path, &s.children);
        }
    }
    add(&mut b, &PlanPath::default(), &doc.sections);
    let mut references: Vec<String> = Vec::new();
    for r in doc.references {
        let r = normalize_ws(&r);
        if !r.is_empty() && !references.contains(&r) {
            references.push(r);
        }
    }
    Ok(DocumentRecord {
        id: doc.id.unwrap_or_else(|| derive_id(raw)),
        doc_class: doc.doc_class.unwrap_or(DocClass::Other),
        title: title.trim().to_owned(),
        abstract_text: doc.abstract_text.trim().to_owned(),
        plan: b.plan,
        sections: b.sections,
        references,
        embeddings: None,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: String,
    pub doc_class: DocClass,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub records: Vec<IndexEntry>,
}

fn safe_id(id: &str) -> bool {
    !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
        && !id.starts_with('.')
}

/// Writes `index.json` plus one `<id>.json` per record.
pub fn export_dataset(records: &[DocumentRecord], dir: &Path) -> Result<usize, CorpusError> {
    fs::create_dir_all(dir).map_err(|e| CorpusError::io(dir, e))?;
    let mut index = DatasetIndex { records: Vec::new() };
    for record in records {
        record.validate()?;
        if !safe_id(&record.id) {
            return Err(CorpusError::schema(&record.id, "id"));
        }
        let path = dir.join(format!("{}.json", record.id));
        let json = serde_json::to_string_pretty(record).expect("record serializes");
        fs::write(&path, json).map_err(|e| CorpusError::io(&path, e))?;
        index.records.push(IndexEntry {
            id: record.id.clone(),
            doc_class: record.doc_class,
        });
    }
    let path = dir.join("index.json");
    fs::write(&path, serde_json::to_string_pretty(&index).expect("index serializes"))
        .map_err(|e| CorpusError::io(&path, e))?;
    Ok(records.len())
}

/// Loads and invariant-checks every record listed in `index.json`.
///
/// A directory without an index is an empty dataset.
pub fn load_dataset(dir: &Path) -> Result<Vec<DocumentRecord>, CorpusError> {
    if !dir.is_dir() {
        return Err(CorpusError::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found"),
        ));
    }
    let index_path = dir.join("index.json");
    if !index_path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(&index_path).map_err(|e| CorpusError::io(&index_path, e))?;
    let index: DatasetIndex =
        serde_json::from_str(&text).map_err(|_| CorpusError::schema("index.json", "records"))?;
    index
        .records
        .iter()
        .map(|entry| {
            if !safe_id(&entry.id) {
                return Err(CorpusError::schema(&entry.id, "id"));
            }
            let path = dir.join(format!("{}.json", entry.id));
            let text = fs::read_to_string(&path).map_err(|e| CorpusError::io(&path, e))?;
            let record = parse_record(&entry.id, &text)?;
            if record.doc_class != entry.doc_class {
                return Err(CorpusError::schema(&entry.id, "doc_class"));
            }
            Ok(record)
        })
        .collect()
}

/// Parses one record file, naming the first missing or ill-typed field.
pub fn parse_record(id: &str, text: &str) -> Result<DocumentRecord, CorpusError> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|_| CorpusError::schema(id, "<json>"))?;
    let obj = value.as_object().ok_or_else(|| CorpusError::schema(id, "<object>"))?;
    match obj.get("title").and_then(|t| t.as_str()) {
        Some(t) if !t.trim().is_empty() => {}
        _ => return Err(CorpusError::schema(id, "title")),
    }
    for field in ["id", "doc_class", "abstract", "plan", "sections", "references"] {
        if !obj.contains_key(field) {
            return Err(CorpusError::schema(id, field));
        }
    }
    let record: DocumentRecord = serde_json::from_value(value).map_err(|e| {
        let field = ["doc_class", "plan", "sections", "references", "embeddings"]
            .into_iter()
            .find(|f| e.to_string().contains(f))
            .unwrap_or("<record>");
        CorpusError::schema(id, field)
    })?;
    if record.id != id {
        return Err(CorpusError::schema(id, "id"));
    }
    record.validate()?;
    Ok(record)
}
