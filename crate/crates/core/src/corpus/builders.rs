use std::collections::{BTreeSet, HashMap};
use std::sync::OnceLock;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;

use super::{CodeSnippet, Label, Origin, Task, TaskExample};

/// Positive clone pairs: distinct submissions that solve the same problem.
/// Pairs are enumerated `(i, j)` with `i < j` in input order; problems with
/// more than `max_pairs_per_problem` pairs are subsampled with `seed`.
pub fn build_clone_pairs(
    submissions: &[(String, CodeSnippet)],
    max_pairs_per_problem: usize,
    seed: u64,
) -> Vec<TaskExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (problem, members) in group_by_problem(submissions) {
        let mut pairs = Vec::new();
        for i in 0..members.len() {
            for j in i + 1..members.len() {
                pairs.push((members[i], members[j]));
            }
        }
        if pairs.len() > max_pairs_per_problem {
            let mut keep = index::sample(&mut rng, pairs.len(), max_pairs_per_problem).into_vec();
            keep.sort_unstable();
            pairs = keep.into_iter().map(|k| pairs[k]).collect();
        }
        for (a, b) in pairs {
            out.push(TaskExample {
                id: format!("{problem}:{}:{}", a.id, b.id),
                task: Task::CloneDetection,
                language: a.language.clone(),
                text_a: a.text.clone(),
                text_b: b.text.clone(),
                label: Label::Positive,
                origin: Origin::Natural,
            });
        }
    }
    out
}

fn group_by_problem(submissions: &[(String, CodeSnippet)]) -> Vec<(&str, Vec<&CodeSnippet>)> {
    let mut order: Vec<(&str, Vec<&CodeSnippet>)> = Vec::new();
    let mut slot: HashMap<&str, usize> = HashMap::new();
    for (problem, snippet) in submissions {
        let i = *slot.entry(problem.as_str()).or_insert_with(|| {
            order.push((problem.as_str(), Vec::new()));
            order.len() - 1
        });
        order[i].1.push(snippet);
    }
    order
}

/// Positive code-search pairs: each submission paired with its problem's
/// description (`text_a` = code, `text_b` = description). Problems with an
/// empty description are skipped.
pub fn build_nlpl_pairs(
    problems: &[(String, String)],
    submissions: &[(String, CodeSnippet)],
) -> Vec<TaskExample> {
    let mut out = Vec::new();
    for (problem, description) in problems {
        if description.trim().is_empty() {
            log::warn!("problem {problem} has an empty description; skipped");
            continue;
        }
        for (p, snippet) in submissions.iter().filter(|(p, _)| p == problem) {
            out.push(TaskExample {
                id: format!("{p}:{}", snippet.id),
                task: Task::CodeSearch,
                language: snippet.language.clone(),
                text_a: snippet.text.clone(),
                text_b: description.clone(),
                label: Label::Positive,
                origin: Origin::Natural,
            });
        }
    }
    out
}

const NOT_NAMES: [&str; 9] = [
    "if", "for", "while", "switch", "catch", "return", "new", "else", "sizeof",
];

fn keyword_decl() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"\b(?:func|function|def|fn|fun|sub)\s+(?:\([^)]*\)\s*)?([A-Za-z_]\w*)\s*\(")
            .expect("valid declaration regex")
    })
}

fn typed_decl() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"\b[A-Za-z_][\w<>\[\]]*\s+([A-Za-z_]\w*)\s*\([^;{)]*\)[^;{]*\{")
            .expect("valid declaration regex")
    })
}

/// Finds the declared name of the first function in `text`, recognising
/// keyword-led declarations (`func`, `function`, `def`, ...) and C-family
/// `type name(...) {` signatures.
pub fn extract_method_name(text: &str) -> Option<String> {
    if let Some(c) = keyword_decl().captures(text) {
        return Some(c[1].to_string());
    }
    typed_decl()
        .captures_iter(text)
        .map(|c| c[1].to_string())
        .find(|n| !NOT_NAMES.contains(&n.as_str()))
}

/// Removes every occurrence of `name` from `text`. Whole-word occurrences go
/// first; any remaining substring matches (inside longer identifiers) are
/// deleted repeatedly until none is left.
pub fn strip_name(text: &str, name: &str) -> String {
    if name.is_empty() {
        return text.to_string();
    }
    let word = Regex::new(&format!(r"\b{}\b", regex::escape(name))).expect("escaped name");
    let mut out = word.replace_all(text, "").into_owned();
    while out.contains(name) {
        out = out.replace(name, "");
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MethodNameDataset {
    pub examples: Vec<TaskExample>,
    /// Functions whose name could not be located.
    pub skipped: usize,
}

/// Builds `<snippet, name>` pairs. Each function yields one positive (body
/// with its own name removed, true name) followed by up to
/// `negatives_per_positive` negatives pairing the same body with names of
/// other functions.
pub fn build_method_name_pairs(
    functions: &[CodeSnippet],
    negatives_per_positive: usize,
    seed: u64,
) -> MethodNameDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut named = Vec::new();
    let mut skipped = 0;
    for f in functions {
        match extract_method_name(&f.text) {
            Some(name) => named.push((f, name)),
            None => skipped += 1,
        }
    }
    if skipped > 0 {
        log::warn!("{skipped} function(s) without a locatable name were skipped");
    }
    let all_names: BTreeSet<&str> = named.iter().map(|(_, n)| n.as_str()).collect();
    let mut examples = Vec::new();
    for (f, name) in &named {
        let body = strip_name(&f.text, name);
        if body.trim().is_empty() {
            skipped += 1;
            continue;
        }
        examples.push(TaskExample {
            id: format!("{}:pos", f.id),
            task: Task::MethodNamePrediction,
            language: f.language.clone(),
            text_a: body.clone(),
            text_b: name.clone(),
            label: Label::Positive,
            origin: Origin::Natural,
        });
        let others: Vec<&str> = all_names
            .iter()
            .copied()
            .filter(|n| *n != name.as_str())
            .collect();
        for (k, other) in others
            .choose_multiple(&mut rng, negatives_per_positive)
            .enumerate()
        {
            examples.push(TaskExample {
                id: format!("{}:neg{k}", f.id),
                task: Task::MethodNamePrediction,
                language: f.language.clone(),
                text_a: body.clone(),
                text_b: other.to_string(),
                label: Label::Negative,
                origin: Origin::Synthetic,
            });
        }
    }
    MethodNameDataset { examples, skipped }
}
