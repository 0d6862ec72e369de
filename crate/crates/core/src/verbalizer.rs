//! Maps MLM predictions at the mask position back to task labels.

use serde::{Deserialize, Serialize};

use crate::backbone::{TokenId, Tokenizer};
use crate::corpus::Label;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<(String, Label)>", into = "Vec<(String, Label)>")]
pub struct VerbalizerSpec {
    candidates: Vec<(String, Label)>,
}

impl VerbalizerSpec {
    pub fn new(candidates: Vec<(String, Label)>) -> Result<Self> {
        for label in [Label::Positive, Label::Negative] {
            if !candidates.iter().any(|(_, l)| *l == label) {
                return Err(Error::Config(format!(
                    "no candidate word for label {label:?}"
                )));
            }
        }
        for (i, (w, _)) in candidates.iter().enumerate() {
            if candidates[..i].iter().any(|(o, _)| o == w) {
                return Err(Error::Config(format!("candidate word {w:?} is repeated")));
            }
        }
        Ok(VerbalizerSpec { candidates })
    }

    pub fn candidates(&self) -> &[(String, Label)] {
        &self.candidates
    }

    /// Resolves candidate words against `tokenizer`. Each word must be a
    /// single in-vocabulary token.
    pub fn resolve(&self, tokenizer: &Tokenizer) -> Result<Verbalizer> {
        let mut ids = Vec::with_capacity(self.candidates.len());
        for (word, _) in &self.candidates {
            let encoded = tokenizer.encode(word);
            match (encoded.as_slice(), tokenizer.id_of(word)) {
                ([id], Some(known)) if *id == known => ids.push(known),
                _ => {
                    return Err(Error::Config(format!(
                        "candidate word {word:?} is not a single vocabulary token"
                    )))
                }
            }
        }
        Ok(Verbalizer {
            spec: self.clone(),
            candidate_ids: ids,
        })
    }

    /// Same words with their labels exchanged.
    pub fn swapped(&self) -> Self {
        VerbalizerSpec {
            candidates: self
                .candidates
                .iter()
                .map(|(w, l)| (w.clone(), l.flipped()))
                .collect(),
        }
    }
}

impl Default for VerbalizerSpec {
    fn default() -> Self {
        VerbalizerSpec {
            candidates: vec![
                ("yes".to_string(), Label::Positive),
                ("no".to_string(), Label::Negative),
            ],
        }
    }
}

impl TryFrom<Vec<(String, Label)>> for VerbalizerSpec {
    type Error = Error;

    fn try_from(v: Vec<(String, Label)>) -> Result<Self> {
        VerbalizerSpec::new(v)
    }
}

impl From<VerbalizerSpec> for Vec<(String, Label)> {
    fn from(v: VerbalizerSpec) -> Self {
        v.candidates
    }
}

/// A verbalizer bound to a tokenizer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Verbalizer {
    spec: VerbalizerSpec,
    candidate_ids: Vec<TokenId>,
}

impl Verbalizer {
    pub fn spec(&self) -> &VerbalizerSpec {
        &self.spec
    }

    pub fn candidate_ids(&self) -> &[TokenId] {
        &self.candidate_ids
    }

    /// Token id of the first candidate word for `label`; the gold target of
    /// the training loss.
    pub fn gold_id(&self, label: Label) -> TokenId {
        let idx = self
            .spec
            .candidates
            .iter()
            .position(|(_, l)| *l == label)
            .expect("every label has a candidate");
        self.candidate_ids[idx]
    }

    fn candidate_logits(&self, logits: &[f64]) -> Vec<f64> {
        self.candidate_ids
            .iter()
            .map(|&id| logits[id as usize])
            .collect()
    }

    /// Label of the highest-scoring candidate and its probability under a
    /// softmax restricted to the candidates. Exact ties go to the negative
    /// label.
    pub fn predict_label(&self, logits: &[f64]) -> (Label, f64) {
        let cand = self.candidate_logits(logits);
        let max = cand.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = cand.iter().map(|v| (v - max).exp()).sum();
        let winners: Vec<usize> = (0..cand.len()).filter(|&i| cand[i] == max).collect();
        let pick = winners
            .iter()
            .copied()
            .find(|&i| self.spec.candidates[i].1 == Label::Negative)
            .unwrap_or(winners[0]);
        (self.spec.candidates[pick].1, 1.0 / total)
    }

    /// Probability mass on positive candidates under the candidate-restricted
    /// softmax. For the binary verbalizer this is the logistic function of
    /// `logit(yes) - logit(no)`.
    pub fn ranking_score(&self, logits: &[f64]) -> f64 {
        let cand = self.candidate_logits(logits);
        let max = cand.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = cand.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = weights.iter().sum();
        let positive: f64 = weights
            .iter()
            .zip(&self.spec.candidates)
            .filter(|(_, (_, l))| *l == Label::Positive)
            .map(|(w, _)| w)
            .sum();
        positive / total
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tok() -> Tokenizer {
        Tokenizer::build(["a b c"], &["yes", "no"])
    }

    fn logits_with(t: &Tokenizer, yes: f64, no: f64) -> Vec<f64> {
        let mut l = vec![0.0; t.vocab_size()];
        l[t.id_of("yes").unwrap() as usize] = yes;
        l[t.id_of("no").unwrap() as usize] = no;
        l
    }

    #[test]
    fn two_way_softmax_score() {
        let t = tok();
        let v = VerbalizerSpec::default().resolve(&t).unwrap();
        let (label, score) = v.predict_label(&logits_with(&t, 2.0, 1.0));
        assert_eq!(label, Label::Positive);
        let oracle = 1f64.exp() / (1f64.exp() + 1.0);
        assert!((score - oracle).abs() < 1e-12);
        assert!((score - 0.731).abs() < 1e-3);
    }

    #[test]
    fn ties_go_negative() {
        let t = tok();
        let v = VerbalizerSpec::default().resolve(&t).unwrap();
        assert_eq!(
            v.predict_label(&logits_with(&t, 0.4, 0.4)).0,
            Label::Negative
        );
        assert_eq!(v.ranking_score(&logits_with(&t, 0.4, 0.4)), 0.5);
    }

    #[test]
    fn constant_shift_is_invisible() {
        let t = tok();
        let v = VerbalizerSpec::default().resolve(&t).unwrap();
        let l = logits_with(&t, -0.3, 1.7);
        let shifted: Vec<f64> = l.iter().map(|x| x + 123.0).collect();
        let (a, sa) = v.predict_label(&l);
        let (b, sb) = v.predict_label(&shifted);
        assert_eq!(a, b);
        assert!((sa - sb).abs() < 1e-12);
    }

    #[test]
    fn score_saturates() {
        let t = tok();
        let v = VerbalizerSpec::default().resolve(&t).unwrap();
        assert!(v.ranking_score(&logits_with(&t, 800.0, 0.0)) > 1.0 - 1e-12);
        assert!(v.ranking_score(&logits_with(&t, 0.0, 800.0)) < 1e-12);
    }

    #[test]
    fn construction_errors() {
        assert!(VerbalizerSpec::new(vec![("yes".into(), Label::Positive)]).is_err());
        assert!(VerbalizerSpec::new(vec![
            ("yes".into(), Label::Positive),
            ("yes".into(), Label::Negative)
        ])
        .is_err());
        let spec = VerbalizerSpec::new(vec![
            ("maybe".into(), Label::Positive),
            ("no".into(), Label::Negative),
        ])
        .unwrap();
        assert!(spec.resolve(&tok()).is_err());
        let multi = VerbalizerSpec::new(vec![
            ("a+b".into(), Label::Positive),
            ("no".into(), Label::Negative),
        ])
        .unwrap();
        assert!(multi.resolve(&tok()).is_err());
    }

    #[test]
    fn gold_ids_follow_labels() {
        let t = tok();
        let v = VerbalizerSpec::default().resolve(&t).unwrap();
        assert_eq!(v.gold_id(Label::Positive), t.id_of("yes").unwrap());
        let s = VerbalizerSpec::default().swapped().resolve(&t).unwrap();
        assert_eq!(s.gold_id(Label::Positive), t.id_of("no").unwrap());
    }

    #[test]
    fn serialises_as_word_label_pairs() {
        let json = serde_json::to_string(&VerbalizerSpec::default()).unwrap();
        assert_eq!(json, r#"[["yes",1],["no",0]]"#);
        let back: VerbalizerSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, VerbalizerSpec::default());
    }
}
