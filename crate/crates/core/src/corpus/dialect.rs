//! Templated toy programs in two lexically different dialects.
//!
//! Dialect A is generated from a fixed set of template families; dialect B
//! is the same output with every keyword renamed through a bijective map.
//! Two programs are clones when they come from the same family sequence:
//! identifiers, literals, independent statement order and optional noise
//! statements all vary between them.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CodeSnippet, DatasetSplit, Label, Origin, Task, TaskExample};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DialectSpec {
    /// Dialect-A keyword -> dialect-B keyword.
    pub keyword_map: BTreeMap<String, String>,
    pub grammar_seed: u64,
    pub program_count: usize,
    pub functions_per_program: usize,
}

pub const DIALECT_A_KEYWORDS: [&str; 14] = [
    "func", "var", "const", "for", "in", "range", "if", "else", "while", "return", "print", "true",
    "false", "not",
];

/// A keyword map that renames every dialect-A keyword.
pub fn default_keyword_map() -> BTreeMap<String, String> {
    let b = [
        "fn",
        "let",
        "fixed",
        "each",
        "of",
        "span",
        "when",
        "otherwise",
        "loop",
        "give",
        "emit",
        "on",
        "off",
        "nay",
    ];
    DIALECT_A_KEYWORDS
        .iter()
        .zip(b)
        .map(|(a, b)| (a.to_string(), b.to_string()))
        .collect()
}

impl Default for DialectSpec {
    fn default() -> Self {
        DialectSpec {
            keyword_map: default_keyword_map(),
            grammar_seed: 0,
            program_count: 200,
            functions_per_program: 1,
        }
    }
}

impl DialectSpec {
    pub fn validate(&self) -> Result<()> {
        let mut targets = HashSet::new();
        for (a, b) in &self.keyword_map {
            if a == b {
                return Err(Error::Config(format!("keyword {a:?} maps to itself")));
            }
            if !targets.insert(b.as_str()) {
                return Err(Error::Config(format!(
                    "keyword map is not injective: {b:?} is used twice"
                )));
            }
            if b.is_empty() || !b.chars().all(|c| c.is_alphanumeric() || c == '_') {
                return Err(Error::Config(format!(
                    "dialect-B keyword {b:?} must be a single word token"
                )));
            }
        }
        if self.functions_per_program == 0 {
            return Err(Error::Config(
                "functions_per_program must be at least 1".into(),
            ));
        }
        if self.program_count < 2 {
            return Err(Error::Config("program_count must be at least 2".into()));
        }
        Ok(())
    }
}

pub const FAMILY_COUNT: usize = 8;

const VAR_NAMES: [&str; 24] = [
    "a", "b", "c", "d", "k", "m", "n", "p", "q", "r", "s", "t", "u", "v", "w", "x", "y", "z",
    "acc", "tmp", "val", "cur", "idx", "res",
];
const FUNC_NAMES: [&str; 16] = [
    "calc", "compute", "run", "apply", "process", "handle", "step", "solve", "eval", "check",
    "update", "merge", "scan", "reduce", "walk", "probe",
];

/// Generated statement: its tokens plus whether it may swap places with
/// its neighbours in the same movable run.
struct Stmt {
    tokens: Vec<String>,
    movable: bool,
}

struct Builder<'r, R: Rng> {
    rng: &'r mut R,
    used: Vec<&'static str>,
}

impl<R: Rng> Builder<'_, R> {
    fn fresh(&mut self) -> &'static str {
        loop {
            let v = VAR_NAMES[self.rng.gen_range(0..VAR_NAMES.len())];
            if !self.used.contains(&v) {
                self.used.push(v);
                return v;
            }
        }
    }

    fn lit(&mut self, lo: u32, hi: u32) -> String {
        self.rng.gen_range(lo..=hi).to_string()
    }
}

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

fn fixed(s: String) -> Stmt {
    Stmt {
        tokens: toks(&s),
        movable: false,
    }
}

fn movable(s: String) -> Stmt {
    Stmt {
        tokens: toks(&s),
        movable: true,
    }
}

/// Statement list for one function body of `family`.
fn family_body<R: Rng>(family: usize, b: &mut Builder<'_, R>, p1: &str, p2: &str) -> Vec<Stmt> {
    match family {
        // accumulate a sum in a counted loop
        0 => {
            let (acc, step, i) = (b.fresh(), b.fresh(), b.fresh());
            vec![
                movable(format!("var {acc} = 0 ;")),
                movable(format!("var {step} = {p2} ;")),
                fixed(format!(
                    "for {i} in range ( {p1} ) {{ {acc} = {acc} + {step} ; }}"
                )),
                fixed(format!("return {acc} ;")),
            ]
        }
        // repeated multiplication
        1 => {
            let (prod, i) = (b.fresh(), b.fresh());
            let base = b.lit(2, 9);
            vec![
                movable(format!("var {prod} = 1 ;")),
                fixed(format!(
                    "for {i} in range ( {p1} ) {{ {prod} = {prod} * {p2} ; }}"
                )),
                fixed(format!("return {prod} * {base} ;")),
            ]
        }
        // running maximum via comparisons
        2 => {
            let best = b.fresh();
            let bound = b.lit(1, 9);
            vec![
                fixed(format!("var {best} = {p1} ;")),
                fixed(format!("if {p2} > {best} {{ {best} = {p2} ; }}")),
                fixed(format!("if {bound} > {best} {{ {best} = {bound} ; }}")),
                fixed(format!("return {best} ;")),
            ]
        }
        // countdown loop counting iterations
        3 => {
            let (left, count) = (b.fresh(), b.fresh());
            let dec = b.lit(1, 3);
            vec![
                movable(format!("var {left} = {p1} ;")),
                movable(format!("var {count} = 0 ;")),
                fixed(format!(
                    "while {left} > 0 {{ {left} = {left} - {dec} ; {count} = {count} + 1 ; }}"
                )),
                fixed(format!("return {count} ;")),
            ]
        }
        // parity branch with printing
        4 => {
            let m = b.lit(2, 5);
            vec![
                fixed(format!(
                    "if {p1} % {m} == 0 {{ print ( {p1} ) ; }} else {{ print ( {p2} ) ; }}"
                )),
                fixed(format!("return {p1} % {m} ;")),
            ]
        }
        // swap through a temporary
        5 => {
            let tmp = b.fresh();
            vec![
                fixed(format!("const {tmp} = {p1} ;")),
                fixed(format!("{p1} = {p2} ;")),
                fixed(format!("{p2} = {tmp} ;")),
                fixed(format!("return {p1} - {p2} ;")),
            ]
        }
        // boolean flag logic
        6 => {
            let flag = b.fresh();
            vec![
                fixed(format!("var {flag} = false ;")),
                fixed(format!("if {p1} == {p2} {{ {flag} = true ; }}")),
                fixed(format!("if not {flag} {{ {flag} = {p1} < {p2} ; }}")),
                fixed(format!("return {flag} ;")),
            ]
        }
        // linear search with early return
        _ => {
            let i = b.fresh();
            let miss = b.lit(0, 9);
            vec![
                fixed(format!(
                    "for {i} in range ( {p1} ) {{ if {i} == {p2} {{ return {i} ; }} }}"
                )),
                fixed(format!("return 0 - {miss} ;")),
            ]
        }
    }
}

fn noise<R: Rng>(b: &mut Builder<'_, R>, params: (&str, &str)) -> Stmt {
    let v = b.fresh();
    match b.rng.gen_range(0..3) {
        0 => movable(format!("var {v} = {} ;", b.lit(0, 9))),
        1 => movable(format!("print ( {} ) ;", params.0)),
        _ => movable(format!("var {v} = {} ;", params.1)),
    }
}

/// Shuffles each maximal run of movable statements in place.
fn shuffle_runs<R: Rng>(stmts: &mut [Stmt], rng: &mut R) {
    let mut start = 0;
    while start < stmts.len() {
        if !stmts[start].movable {
            start += 1;
            continue;
        }
        let mut end = start;
        while end < stmts.len() && stmts[end].movable {
            end += 1;
        }
        stmts[start..end].shuffle(rng);
        start = end;
    }
}

fn render_function<R: Rng>(family: usize, rng: &mut R) -> String {
    let mut b = Builder {
        rng,
        used: Vec::new(),
    };
    let name = FUNC_NAMES[b.rng.gen_range(0..FUNC_NAMES.len())];
    let (p1, p2) = (b.fresh(), b.fresh());
    let mut body = family_body(family, &mut b, p1, p2);
    if b.rng.gen_bool(0.4) {
        let s = noise(&mut b, (p1, p2));
        // noise goes before the final statement so the return stays last
        let at = b.rng.gen_range(0..body.len());
        body.insert(at, s);
    }
    shuffle_runs(&mut body, b.rng);
    let mut lines = vec![format!("func {name} ( {p1} , {p2} ) {{")];
    for s in body {
        lines.push(format!("  {}", s.tokens.join(" ")));
    }
    lines.push("}".into());
    lines.join("\n")
}

fn rename_keywords(text: &str, map: &BTreeMap<String, String>) -> String {
    text.lines()
        .map(|line| {
            let indent = &line[..line.len() - line.trim_start().len()];
            let body: Vec<&str> = line
                .split_whitespace()
                .map(|t| map.get(t).map(String::as_str).unwrap_or(t))
                .collect();
            format!("{indent}{}", body.join(" "))
        })
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialectCorpus {
    pub corpus_a: Vec<CodeSnippet>,
    pub corpus_b: Vec<CodeSnippet>,
    /// Index pairs into the corpus that are clones of each other.
    pub clone_pairs_a: Vec<(usize, usize)>,
    pub clone_pairs_b: Vec<(usize, usize)>,
    /// Template family sequence of every program (shared by both dialects).
    pub families: Vec<Vec<usize>>,
}

/// Generates `program_count` programs per dialect. Programs are produced in
/// consecutive clone pairs `(2k, 2k + 1)` sharing a family sequence; a
/// trailing odd program gets no partner.
pub fn generate_dialect_corpus(spec: &DialectSpec) -> Result<DialectCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.grammar_seed);
    let mut corpus_a = Vec::with_capacity(spec.program_count);
    let mut families = Vec::with_capacity(spec.program_count);
    let mut clone_pairs = Vec::new();
    let mut i = 0;
    while i < spec.program_count {
        let family: Vec<usize> = (0..spec.functions_per_program)
            .map(|_| rng.gen_range(0..FAMILY_COUNT))
            .collect();
        let first = render_program(&family, &mut rng);
        corpus_a.push(first.clone());
        families.push(family.clone());
        if i + 1 < spec.program_count {
            let mut second = render_program(&family, &mut rng);
            while second == first {
                second = render_program(&family, &mut rng);
            }
            corpus_a.push(second);
            families.push(family);
            clone_pairs.push((i, i + 1));
        }
        i += 2;
    }
    let corpus_b = corpus_a
        .iter()
        .map(|t| rename_keywords(t, &spec.keyword_map))
        .collect::<Vec<_>>();
    let snippets = |texts: Vec<String>, lang: &str, prefix: &str| {
        texts
            .into_iter()
            .enumerate()
            .map(|(k, t)| CodeSnippet::new(format!("{prefix}{k:06}"), lang, t))
            .collect::<Vec<_>>()
    };
    Ok(DialectCorpus {
        corpus_a: snippets(corpus_a, "dialectA", "A"),
        corpus_b: snippets(corpus_b, "dialectB", "B"),
        clone_pairs_a: clone_pairs.clone(),
        clone_pairs_b: clone_pairs,
        families,
    })
}

fn render_program<R: Rng>(family: &[usize], rng: &mut R) -> String {
    family
        .iter()
        .map(|&f| render_function(f, rng))
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// Balanced clone-detection examples from the clone pairs listed in
/// `pair_indices` (indices into `pairs`). Each positive pair `(i, j)` is
/// matched with a negative `(i, k)` where `k` belongs to another listed
/// pair with a different family sequence, so negatives are true non-clones.
pub fn dialect_clone_examples(
    corpus: &[CodeSnippet],
    families: &[Vec<usize>],
    pairs: &[(usize, usize)],
    pair_indices: &[usize],
    seed: u64,
) -> Result<Vec<TaskExample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let members: Vec<usize> = pair_indices
        .iter()
        .flat_map(|&p| [pairs[p].0, pairs[p].1])
        .collect();
    let mut out = Vec::with_capacity(2 * pair_indices.len());
    for &p in pair_indices {
        let (i, j) = pairs[p];
        let (a, b) = (&corpus[i], &corpus[j]);
        out.push(TaskExample {
            id: format!("{}:{}", a.id, b.id),
            task: Task::CloneDetection,
            language: a.language.clone(),
            text_a: a.text.clone(),
            text_b: b.text.clone(),
            label: Label::Positive,
            origin: Origin::Synthetic,
        });
        let candidates: Vec<usize> = members
            .iter()
            .copied()
            .filter(|&k| families[k] != families[i])
            .collect();
        let k = *candidates.choose(&mut rng).ok_or_else(|| {
            Error::Data("every listed pair shares one family; no negatives possible".into())
        })?;
        let c = &corpus[k];
        let (left, right) = if rng.gen_bool(0.5) { (a, c) } else { (b, c) };
        out.push(TaskExample {
            id: format!("{}:{}:neg", left.id, right.id),
            task: Task::CloneDetection,
            language: a.language.clone(),
            text_a: left.text.clone(),
            text_b: right.text.clone(),
            label: Label::Negative,
            origin: Origin::Synthetic,
        });
    }
    Ok(out)
}

/// How clone pairs of a generated corpus are divided. Indices are clone-pair
/// indices; consecutive blocks go to dialect-A train/validation/test, then
/// dialect-B train/validation/test, then A-only and B-only pretraining
/// programs, so no program text (or its keyword-renamed twin) is shared
/// between blocks.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DialectLayout {
    pub train_pairs: usize,
    pub validation_pairs: usize,
    pub test_pairs: usize,
    /// Clone pairs per dialect whose programs feed pretraining.
    pub pretrain_pairs: usize,
    pub seed: u64,
}

impl Default for DialectLayout {
    fn default() -> Self {
        DialectLayout {
            train_pairs: 250,
            validation_pairs: 50,
            test_pairs: 100,
            pretrain_pairs: 775,
            seed: 0,
        }
    }
}

impl DialectLayout {
    fn task_pairs(&self) -> usize {
        self.train_pairs + self.validation_pairs + self.test_pairs
    }

    /// Programs the corpus must contain.
    pub fn required_programs(&self) -> usize {
        2 * (2 * self.task_pairs() + 2 * self.pretrain_pairs)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DialectDatasets {
    pub dialect_a: DatasetSplit,
    pub dialect_b: DatasetSplit,
    /// Interleaved dialect-A and dialect-B programs, disjoint from every
    /// task partition.
    pub pretraining: Vec<CodeSnippet>,
}

/// Generates the corpus for `spec` and cuts it into balanced clone-detection
/// splits for both dialects plus a mixed pretraining corpus.
pub fn build_dialect_datasets(
    spec: &DialectSpec,
    layout: &DialectLayout,
) -> Result<DialectDatasets> {
    let need = layout.required_programs();
    if spec.program_count < need {
        return Err(Error::Config(format!(
            "layout needs {need} programs, dialect spec generates {}",
            spec.program_count
        )));
    }
    if layout.train_pairs < 2 || layout.validation_pairs < 2 || layout.test_pairs < 2 {
        return Err(Error::Config(
            "each partition needs at least two clone pairs".into(),
        ));
    }
    let corpus = generate_dialect_corpus(spec)?;
    let split = |snippets: &[CodeSnippet], pairs: &[(usize, usize)], base: usize, lang: &str| {
        let block = |from: usize, len: usize, salt: u64| {
            let idx: Vec<usize> = (base + from..base + from + len).collect();
            dialect_clone_examples(snippets, &corpus.families, pairs, &idx, layout.seed ^ salt)
        };
        Ok::<_, Error>(DatasetSplit {
            train: block(0, layout.train_pairs, 1)?,
            validation: block(layout.train_pairs, layout.validation_pairs, 2)?,
            test: block(
                layout.train_pairs + layout.validation_pairs,
                layout.test_pairs,
                3,
            )?,
            source_language: lang.to_string(),
            target_language: lang.to_string(),
        })
    };
    let t = layout.task_pairs();
    let dialect_a = split(&corpus.corpus_a, &corpus.clone_pairs_a, 0, "dialectA")?;
    let dialect_b = split(&corpus.corpus_b, &corpus.clone_pairs_b, t, "dialectB")?;
    let programs = |snippets: &[CodeSnippet], pairs: &[(usize, usize)], base: usize| {
        pairs[base..base + layout.pretrain_pairs]
            .iter()
            .flat_map(|&(i, j)| [snippets[i].clone(), snippets[j].clone()])
            .collect::<Vec<_>>()
    };
    let pre_a = programs(&corpus.corpus_a, &corpus.clone_pairs_a, 2 * t);
    let pre_b = programs(
        &corpus.corpus_b,
        &corpus.clone_pairs_b,
        2 * t + layout.pretrain_pairs,
    );
    let pretraining = pre_a
        .into_iter()
        .zip(pre_b)
        .flat_map(|(a, b)| [a, b])
        .collect();
    Ok(DialectDatasets {
        dialect_a,
        dialect_b,
        pretraining,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::tokenizer::split_words;

    fn spec(seed: u64) -> DialectSpec {
        DialectSpec {
            grammar_seed: seed,
            program_count: 40,
            ..DialectSpec::default()
        }
    }

    #[test]
    fn keywords_are_renamed_token_for_token() {
        let mut map = BTreeMap::new();
        map.insert("func".to_string(), "fn".to_string());
        let c = generate_dialect_corpus(&DialectSpec {
            keyword_map: map,
            ..spec(1)
        })
        .unwrap();
        for (a, b) in c.corpus_a.iter().zip(&c.corpus_b) {
            let ta: Vec<&str> = split_words(&a.text).collect();
            let tb: Vec<&str> = split_words(&b.text).collect();
            assert_eq!(ta.len(), tb.len());
            for (x, y) in ta.iter().zip(&tb) {
                if *x == "func" {
                    assert_eq!(*y, "fn");
                } else {
                    assert_eq!(x, y);
                }
            }
        }
    }

    #[test]
    fn default_map_leaves_no_dialect_a_keyword_in_b() {
        let c = generate_dialect_corpus(&spec(2)).unwrap();
        for b in &c.corpus_b {
            for w in split_words(&b.text) {
                assert!(
                    !DIALECT_A_KEYWORDS.contains(&w),
                    "{w} leaked into dialect B"
                );
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(
            generate_dialect_corpus(&spec(9)).unwrap(),
            generate_dialect_corpus(&spec(9)).unwrap()
        );
        assert_ne!(
            generate_dialect_corpus(&spec(9)).unwrap().corpus_a,
            generate_dialect_corpus(&spec(10)).unwrap().corpus_a
        );
    }

    #[test]
    fn clone_pairs_differ_textually_but_share_family() {
        let c = generate_dialect_corpus(&spec(3)).unwrap();
        assert_eq!(c.clone_pairs_a.len(), 20);
        for &(i, j) in &c.clone_pairs_a {
            assert_ne!(c.corpus_a[i].text, c.corpus_a[j].text);
            assert_eq!(c.families[i], c.families[j]);
        }
    }

    #[test]
    fn rejects_non_injective_or_identity_maps() {
        let mut s = spec(0);
        s.keyword_map.insert("if".into(), "if".into());
        assert!(generate_dialect_corpus(&s).is_err());
        let mut s = spec(0);
        s.keyword_map.insert("if".into(), "fn".into());
        assert!(generate_dialect_corpus(&s).is_err());
    }

    #[test]
    fn multi_function_programs() {
        let c = generate_dialect_corpus(&DialectSpec {
            functions_per_program: 3,
            ..spec(4)
        })
        .unwrap();
        assert!(c.families.iter().all(|f| f.len() == 3));
        assert_eq!(c.corpus_a[0].text.matches("func ").count(), 3);
    }

    #[test]
    fn clone_examples_are_balanced_with_true_negatives() {
        let c = generate_dialect_corpus(&spec(5)).unwrap();
        let idx: Vec<usize> = (0..c.clone_pairs_a.len()).collect();
        let ex =
            dialect_clone_examples(&c.corpus_a, &c.families, &c.clone_pairs_a, &idx, 1).unwrap();
        assert_eq!(crate::corpus::label_counts(&ex), (20, 20));
        let family_of = |t: &str| {
            c.corpus_a
                .iter()
                .position(|s| s.text == t)
                .map(|k| c.families[k].clone())
                .unwrap()
        };
        for e in &ex {
            let same = family_of(&e.text_a) == family_of(&e.text_b);
            assert_eq!(same, e.label == Label::Positive);
        }
    }

    #[test]
    fn layout_blocks_are_disjoint_and_balanced() {
        let layout = DialectLayout {
            train_pairs: 6,
            validation_pairs: 3,
            test_pairs: 4,
            pretrain_pairs: 5,
            seed: 1,
        };
        let spec = DialectSpec {
            program_count: layout.required_programs(),
            ..DialectSpec::default()
        };
        let d = build_dialect_datasets(&spec, &layout).unwrap();
        d.dialect_a.validate().unwrap();
        d.dialect_b.validate().unwrap();
        assert_eq!(d.dialect_a.train.len(), 12);
        assert_eq!(d.dialect_b.test.len(), 8);
        assert_eq!(d.pretraining.len(), 20);
        let mut texts = HashSet::new();
        for split in [&d.dialect_a, &d.dialect_b] {
            for (_, part) in split.partitions() {
                for e in part {
                    texts.insert(e.text_a.clone());
                    texts.insert(e.text_b.clone());
                }
            }
        }
        assert!(d.pretraining.iter().all(|s| !texts.contains(&s.text)));
        let short = DialectSpec {
            program_count: layout.required_programs() - 1,
            ..DialectSpec::default()
        };
        assert!(build_dialect_datasets(&short, &layout).is_err());
    }
}
