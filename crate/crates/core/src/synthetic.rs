//! Seeded synthetic documents shaped like the three corpus classes.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{ingest_document, DocClass, DocumentFormat, DocumentRecord, PlanNode};

const WORDS: &[&str] = &[
    "reef", "drone", "sensor", "lithium", "cobalt", "membrane", "catalyst", "protocol", "survey", "network",
    "graph", "kernel", "sampling", "imaging", "turbine", "alloy", "enzyme", "polymer", "orbit", "signal",
    "channel", "voltage", "thermal", "optical", "genome", "protein", "ledger", "compiler", "cache", "fiber",
    "coating", "valve", "rotor", "battery", "filter", "spectrum", "lattice", "vessel", "pump", "archive",
];

const HEADINGS: &[(DocClass, &[&str])] = &[
    (DocClass::Survey, &["Introduction", "Background", "Taxonomy", "Methods", "Benchmarks", "Open problems", "Conclusion"]),
    (DocClass::Encyclopedia, &["History", "Etymology", "Description", "Applications", "Production", "Culture", "See also"]),
    (DocClass::Patent, &["Field", "Background art", "Summary", "Drawings", "Detailed description", "Embodiments", "Claims"]),
];

fn words(rng: &mut ChaCha8Rng, n: usize) -> String {
    (0..n).map(|_| *WORDS.choose(rng).expect("non-empty")).collect::<Vec<_>>().join(" ")
}

fn some_words(rng: &mut ChaCha8Rng, range: std::ops::RangeInclusive<usize>) -> String {
    let n = rng.gen_range(range);
    words(rng, n)
}

fn headings(class: DocClass) -> &'static [&'static str] {
    HEADINGS
        .iter()
        .find(|(c, _)| *c == class)
        .map_or(HEADINGS[0].1, |(_, h)| h)
}

/// Markdown-like source for one synthetic document.
pub fn synthetic_markdown(rng: &mut ChaCha8Rng, id: &str, class: DocClass) -> String {
    let title = {
        let t = words(rng, 3);
        let mut c = t.chars();
        c.next().map(|f| f.to_uppercase().collect::<String>() + c.as_str()).unwrap_or_default()
    };
    let class_name = format!("{class:?}").to_lowercase();
    let mut out = format!("---\nid: {id}\ndoc_class: {class_name}\n---\n# {title}\n\n{}.\n", words(rng, 12));
    let pool = headings(class);
    let n_sections = rng.gen_range(2..=pool.len().min(5));
    for heading in pool.iter().take(n_sections) {
        out.push_str(&format!("\n## {heading}\n{}.\n", some_words(rng, 8..=29)));
        for k in 0..rng.gen_range(0..=2) {
            out.push_str(&format!("\n### {heading} part {}\n{}.\n", k + 1, some_words(rng, 6..=19)));
        }
    }
    out.push_str("\n## References\n");
    for i in 0..rng.gen_range(1..=4) {
        out.push_str(&format!("[{}] {}. {}. {}.\n", i + 1, words(rng, 1), words(rng, 4), 1990 + i * 7));
    }
    out
}

/// `per_class` documents of each class (survey, encyclopedia, patent).
pub fn synthetic_corpus(per_class: usize, seed: u64) -> Vec<DocumentRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(per_class * 3);
    for class in [DocClass::Survey, DocClass::Encyclopedia, DocClass::Patent] {
        for i in 0..per_class {
            let id = format!("synthetic-{}-{i}", format!("{class:?}").to_lowercase());
            let raw = synthetic_markdown(&mut rng, &id, class);
            out.push(ingest_document(&raw, DocumentFormat::MarkdownLike).expect("synthetic documents are valid"));
        }
    }
    out
}

/// A partial, noisy copy of `target`: sections dropped or rewritten, title
/// and references perturbed. Used as a generated-document stand-in.
pub fn perturb(target: &DocumentRecord, rng: &mut ChaCha8Rng) -> DocumentRecord {
    let mut raw = format!(
        "---\nid: {}-generated\ndoc_class: {}\n---\n# {}\n\n{}\n",
        target.id,
        format!("{:?}", target.doc_class).to_lowercase(),
        if rng.gen_bool(0.5) { target.title.clone() } else { words(rng, 3) },
        target.abstract_text
    );
    for (path, node) in target.plan.flatten() {
        if path.depth() > 1 || rng.gen_bool(0.3) {
            continue;
        }
        let title = if rng.gen_bool(0.7) { node.title.clone() } else { words(rng, 2) };
        let content = match target.section(&path) {
            Some(c) if rng.gen_bool(0.6) => c.to_owned(),
            _ => some_words(rng, 3..=24),
        };
        raw.push_str(&format!("\n## {title}\n{content}\n"));
    }
    if rng.gen_bool(0.7) && !target.references.is_empty() {
        raw.push_str("\n## References\n");
        for (i, r) in target.references.iter().enumerate() {
            if rng.gen_bool(0.7) {
                raw.push_str(&format!("[{}] {r}\n", i + 1));
            }
        }
    }
    ingest_document(&raw, DocumentFormat::MarkdownLike).unwrap_or_else(|_| target.clone())
}

/// A random outline with exactly `nodes` nodes below the root.
pub fn random_plan(rng: &mut ChaCha8Rng, nodes: usize) -> PlanNode {
    let mut root = PlanNode::root(words(rng, 2));
    // Each new node attaches under the root or under an earlier top-level node.
    for _ in 0..nodes {
        let node = PlanNode {
            title: some_words(rng, 1..=3),
            depth: 2,
            children: Vec::new(),
            content_token_count: 0,
        };
        if root.children.is_empty() || rng.gen_bool(0.6) {
            root.children.push(node);
        } else {
            let i = rng.gen_range(0..root.children.len());
            root.children[i].children.push(PlanNode { depth: 3, ..node });
        }
    }
    root
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_is_seeded_and_valid() {
        let a = synthetic_corpus(2, 11);
        assert_eq!(a.len(), 6);
        assert_eq!(a, synthetic_corpus(2, 11));
        assert_ne!(a, synthetic_corpus(2, 12));
        for r in &a {
            r.validate().unwrap();
            assert!(r.plan.node_count() >= 2);
        }
        let classes: Vec<DocClass> = a.iter().map(|r| r.doc_class).collect();
        assert_eq!(classes[0], DocClass::Survey);
        assert_eq!(classes[5], DocClass::Patent);
    }

    #[test]
    fn plans_have_the_requested_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in 0..7 {
            let p = random_plan(&mut rng, n);
            assert_eq!(p.node_count(), n);
            assert!(p.depths_consistent());
        }
    }

    #[test]
    fn perturbed_copies_validate() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for t in synthetic_corpus(3, 1) {
            perturb(&t, &mut rng).validate().unwrap();
        }
    }
}
