//! Composite document score: plan, title, content and reference similarity,
//! length ratio and coverage, combined under user-adjustable weights.

use serde::{Deserialize, Serialize};

use crate::corpus::{token_count, PlanNode, PlanPath, Section};
use crate::embedding::{normalized_similarity, EmbeddingError, Embedder};

pub const DEFAULT_TAU: f64 = 0.6;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ScoringError {
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error("invalid target: {0}")]
    InvalidTarget(String),
    #[error("invalid weights: {0}")]
    InvalidWeights(String),
    #[error("coverage threshold must lie in (0, 1), got {0}")]
    InvalidThreshold(f64),
}

/// Read access shared by target records and evolving document states.
pub trait DocumentView {
    fn title(&self) -> &str;
    fn plan(&self) -> &PlanNode;
    fn sections(&self) -> &[Section];
    fn references(&self) -> &[String];

    fn section(&self, path: &PlanPath) -> Option<&str> {
        self.sections()
            .iter()
            .find(|s| &s.path == path)
            .map(|s| s.content.as_str())
    }

    fn content_tokens(&self) -> usize {
        self.sections().iter().map(|s| token_count(&s.content)).sum()
    }
}

impl DocumentView for crate::corpus::DocumentRecord {
    fn title(&self) -> &str {
        &self.title
    }
    fn plan(&self) -> &PlanNode {
        &self.plan
    }
    fn sections(&self) -> &[Section] {
        &self.sections
    }
    fn references(&self) -> &[String] {
        &self.references
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreWeights {
    pub plan: f64,
    pub title: f64,
    pub content: f64,
    pub refs: f64,
    pub len: f64,
    pub cov: f64,
}

impl Default for ScoreWeights {
    fn default() -> Self {
        let w = 1.0 / 6.0;
        Self {
            plan: w,
            title: w,
            content: w,
            refs: w,
            len: w,
            cov: w,
        }
    }
}

impl ScoreWeights {
    pub fn as_array(&self) -> [f64; 6] {
        [self.plan, self.title, self.content, self.refs, self.len, self.cov]
    }

    pub fn validate(&self) -> Result<(), ScoringError> {
        let w = self.as_array();
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(ScoringError::InvalidWeights("weights must be finite and non-negative".into()));
        }
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(ScoringError::InvalidWeights(format!("weights sum to {sum}, expected 1")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreConfig {
    #[serde(default)]
    pub weights: ScoreWeights,
    #[serde(default = "default_tau")]
    pub tau: f64,
}

fn default_tau() -> f64 {
    DEFAULT_TAU
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            weights: ScoreWeights::default(),
            tau: DEFAULT_TAU,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreBreakdown {
    pub sim_plan: f64,
    pub sim_titles: f64,
    pub sim_contents: f64,
    pub sim_refs: f64,
    pub ratio_len: f64,
    pub coverage: f64,
    pub total: f64,
}

impl ScoreBreakdown {
    pub fn components(&self) -> [f64; 6] {
        [
            self.sim_plan,
            self.sim_titles,
            self.sim_contents,
            self.sim_refs,
            self.ratio_len,
            self.coverage,
        ]
    }

    /// Builds a breakdown from components, computing the weighted total on a 0-100 scale.
    pub fn from_components(components: [f64; 6], weights: &ScoreWeights) -> Self {
        let total = 100.0
            * components
                .iter()
                .zip(weights.as_array())
                .map(|(c, w)| c * w)
                .sum::<f64>();
        let [sim_plan, sim_titles, sim_contents, sim_refs, ratio_len, coverage] = components;
        Self {
            sim_plan,
            sim_titles,
            sim_contents,
            sim_refs,
            ratio_len,
            coverage,
            total: total.clamp(0.0, 100.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignedPair {
    pub generated: PlanPath,
    pub target: PlanPath,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanAlignment {
    pub pairs: Vec<AlignedPair>,
    pub unmatched_target: Vec<PlanPath>,
    pub unmatched_generated: Vec<PlanPath>,
}

impl PlanAlignment {
    pub fn target_node_count(&self) -> usize {
        self.pairs.len() + self.unmatched_target.len()
    }

    pub fn value(&self) -> f64 {
        self.pairs.iter().map(|p| p.similarity).sum()
    }

    pub fn pair_for_target(&self, target: &PlanPath) -> Option<&AlignedPair> {
        self.pairs.iter().find(|p| &p.target == target)
    }
}

/// Order-preserving alignment maximizing the summed similarity.
///
/// Returns `(value, pairs)` where each pair is `(generated index, target index)`.
/// Zero-similarity pairs are never emitted. Ties prefer pairing, then skipping a
/// generated item, so the result is deterministic.
pub fn align_matrix(sim: &[Vec<f64>]) -> (f64, Vec<(usize, usize)>) {
    let n = sim.len();
    let m = sim.first().map_or(0, Vec::len);
    let mut dp = vec![vec![0.0f64; m + 1]; n + 1];
    for i in 1..=n {
        for j in 1..=m {
            let s = sim[i - 1][j - 1];
            let diag = if s > 0.0 { dp[i - 1][j - 1] + s } else { f64::NEG_INFINITY };
            dp[i][j] = diag.max(dp[i - 1][j]).max(dp[i][j - 1]);
        }
    }
    let mut pairs = Vec::new();
    let (mut i, mut j) = (n, m);
    while i > 0 && j > 0 {
        let s = sim[i - 1][j - 1];
        if s > 0.0 && dp[i][j] == dp[i - 1][j - 1] + s {
            pairs.push((i - 1, j - 1));
            i -= 1;
            j -= 1;
        } else if dp[i][j] == dp[i - 1][j] {
            i -= 1;
        } else {
            j -= 1;
        }
    }
    pairs.reverse();
    (dp[n][m], pairs)
}

pub fn align_plans(generated: &PlanNode, target: &PlanNode, embedder: &Embedder) -> Result<PlanAlignment, ScoringError> {
    let gen_nodes = generated.flatten();
    let tgt_nodes = target.flatten();
    let mut sim = vec![vec![0.0; tgt_nodes.len()]; gen_nodes.len()];
    for (i, (_, g)) in gen_nodes.iter().enumerate() {
        for (j, (_, t)) in tgt_nodes.iter().enumerate() {
            sim[i][j] = embedder.text_similarity(&g.title, &t.title)?;
        }
    }
    let (_, pairs) = align_matrix(&sim);
    let mut gen_used = vec![false; gen_nodes.len()];
    let mut tgt_used = vec![false; tgt_nodes.len()];
    let pairs = pairs
        .into_iter()
        .map(|(i, j)| {
            gen_used[i] = true;
            tgt_used[j] = true;
            AlignedPair {
                generated: gen_nodes[i].0.clone(),
                target: tgt_nodes[j].0.clone(),
                similarity: sim[i][j],
            }
        })
        .collect();
    let unmatched = |nodes: &[(PlanPath, &PlanNode)], used: &[bool]| {
        nodes
            .iter()
            .zip(used)
            .filter(|(_, u)| !**u)
            .map(|((p, _), _)| p.clone())
            .collect()
    };
    Ok(PlanAlignment {
        unmatched_target: unmatched(&tgt_nodes, &tgt_used),
        unmatched_generated: unmatched(&gen_nodes, &gen_used),
        pairs,
    })
}

/// Token-weighted mean of pair similarity over target nodes; unmatched nodes count as 0.
///
/// Falls back to uniform node weights when the target plan carries no content tokens.
pub fn plan_similarity(alignment: &PlanAlignment, target: &PlanNode) -> f64 {
    let nodes = target.flatten();
    if nodes.is_empty() {
        return 0.0;
    }
    let total_tokens: usize = nodes.iter().map(|(_, n)| n.content_token_count).sum();
    let weight = |n: &PlanNode| {
        if total_tokens == 0 {
            1.0
        } else {
            n.content_token_count as f64
        }
    };
    let denom: f64 = nodes.iter().map(|(_, n)| weight(n)).sum();
    let num: f64 = nodes
        .iter()
        .filter_map(|(p, n)| alignment.pair_for_target(p).map(|pair| pair.similarity * weight(n)))
        .sum();
    (num / denom).clamp(0.0, 1.0)
}

pub fn content_similarity(
    generated: &dyn DocumentView,
    target: &dyn DocumentView,
    alignment: &PlanAlignment,
    embedder: &Embedder,
) -> Result<f64, ScoringError> {
    let denom = target.content_tokens();
    if denom == 0 {
        return Err(ScoringError::InvalidTarget("target has no section content".into()));
    }
    let mut num = 0.0;
    for section in target.sections() {
        let tokens = token_count(&section.content);
        if tokens == 0 {
            continue;
        }
        let Some(pair) = alignment.pair_for_target(&section.path) else {
            continue;
        };
        let Some(gen_content) = generated.section(&pair.generated) else {
            continue;
        };
        num += tokens as f64 * embedder.text_similarity(gen_content, &section.content)?;
    }
    Ok((num / denom as f64).clamp(0.0, 1.0))
}

/// Greedy one-to-one matching in descending similarity, normalized by the target count.
///
/// Two empty lists agree perfectly.
pub fn reference_similarity(generated: &[String], target: &[String], embedder: &Embedder) -> Result<f64, ScoringError> {
    if generated.is_empty() && target.is_empty() {
        return Ok(1.0);
    }
    if generated.is_empty() || target.is_empty() {
        return Ok(0.0);
    }
    let gen_vecs = embedder.embed_many(&generated.iter().map(String::as_str).collect::<Vec<_>>())?;
    let tgt_vecs = embedder.embed_many(&target.iter().map(String::as_str).collect::<Vec<_>>())?;
    let mut candidates = Vec::with_capacity(generated.len() * target.len());
    for (i, g) in gen_vecs.iter().enumerate() {
        for (j, t) in tgt_vecs.iter().enumerate() {
            candidates.push((normalized_similarity(g, t)?, i, j));
        }
    }
    Ok(greedy_matching_value(candidates, generated.len(), target.len()) / target.len() as f64)
}

pub(crate) fn greedy_matching_value(mut candidates: Vec<(f64, usize, usize)>, n: usize, m: usize) -> f64 {
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut gen_used = vec![false; n];
    let mut tgt_used = vec![false; m];
    let mut total = 0.0;
    for (s, i, j) in candidates {
        if s <= 0.0 {
            break;
        }
        if !gen_used[i] && !tgt_used[j] {
            gen_used[i] = true;
            tgt_used[j] = true;
            total += s;
        }
    }
    total
}

/// Fraction of target plan nodes whose paired title similarity reaches `tau`.
pub fn coverage(alignment: &PlanAlignment, tau: f64) -> Result<f64, ScoringError> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(ScoringError::InvalidThreshold(tau));
    }
    let total = alignment.target_node_count();
    if total == 0 {
        return Ok(0.0);
    }
    let hit = alignment.pairs.iter().filter(|p| p.similarity >= tau).count();
    Ok(hit as f64 / total as f64)
}

pub fn length_ratio(generated_tokens: usize, target_tokens: usize) -> Result<f64, ScoringError> {
    if target_tokens == 0 {
        return Err(ScoringError::InvalidTarget("target token count is zero".into()));
    }
    if generated_tokens == 0 {
        return Ok(0.0);
    }
    Ok(generated_tokens.min(target_tokens) as f64 / generated_tokens.max(target_tokens) as f64)
}

/// Checks that a target can anchor a score: a non-empty plan with content.
pub fn check_target(target: &dyn DocumentView) -> Result<(), ScoringError> {
    if target.plan().children.is_empty() {
        return Err(ScoringError::InvalidTarget("target plan is empty".into()));
    }
    if target.content_tokens() == 0 {
        return Err(ScoringError::InvalidTarget("target has no section content".into()));
    }
    Ok(())
}

pub fn compute_score(
    generated: &dyn DocumentView,
    target: &dyn DocumentView,
    config: &ScoreConfig,
    embedder: &Embedder,
) -> Result<ScoreBreakdown, ScoringError> {
    config.weights.validate()?;
    check_target(target)?;
    let alignment = align_plans(generated.plan(), target.plan(), embedder)?;
    let sim_plan = plan_similarity(&alignment, target.plan());
    let sim_titles = embedder.text_similarity(generated.title(), target.title())?;
    let sim_contents = content_similarity(generated, target, &alignment, embedder)?;
    let sim_refs = reference_similarity(generated.references(), target.references(), embedder)?;
    let ratio_len = length_ratio(generated.content_tokens(), target.content_tokens())?;
    let cov = coverage(&alignment, config.tau)?;
    Ok(ScoreBreakdown::from_components(
        [sim_plan, sim_titles, sim_contents, sim_refs, ratio_len, cov],
        &config.weights,
    ))
}
