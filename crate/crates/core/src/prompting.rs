//! Prompt templates: where the trainable prompt slots, the two input
//! segments and the mask token sit in the model input.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::tokenizer::{CLS_ID, MASK_ID};
use crate::backbone::{MaskedLanguageModel, Tensor, TokenId};
use crate::corpus::TaskExample;
use crate::error::{Error, Result};

pub const MAX_PROMPTS: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    Head,
    Middle,
    Uniform,
    Tail,
}

impl Placement {
    pub const ALL: [Placement; 4] = [
        Placement::Head,
        Placement::Middle,
        Placement::Uniform,
        Placement::Tail,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Placement::Head => "head",
            Placement::Middle => "middle",
            Placement::Uniform => "uniform",
            Placement::Tail => "tail",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskPosition {
    #[default]
    Tail,
    Head,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptTemplate {
    pub prompt_count: usize,
    pub placement: Placement,
    #[serde(default)]
    pub mask_position: MaskPosition,
    #[serde(default = "default_true")]
    pub include_cls: bool,
    #[serde(default)]
    pub separator: Option<String>,
}

fn default_true() -> bool {
    true
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate {
            prompt_count: 10,
            placement: Placement::Uniform,
            mask_position: MaskPosition::Tail,
            include_cls: true,
            separator: None,
        }
    }
}

impl PromptTemplate {
    pub fn validate(&self) -> Result<()> {
        if self.prompt_count > MAX_PROMPTS {
            return Err(Error::Config(format!(
                "prompt_count {} exceeds the maximum of {MAX_PROMPTS}",
                self.prompt_count
            )));
        }
        Ok(())
    }
}

/// Splits `prompt_count` prompts into the three gaps around the segments:
/// before `x1`, between `x1` and `x2`, and after `x2`. For `Tail` the third
/// gap is rendered after the mask. Uniform spreads prompts as evenly as
/// possible, giving remainders to the front gaps first.
pub fn allocate_positions(
    placement: Placement,
    prompt_count: usize,
    _len_a: usize,
    _len_b: usize,
) -> (usize, usize, usize) {
    let m = prompt_count;
    match placement {
        Placement::Head => (m, 0, 0),
        Placement::Middle => (0, m, 0),
        Placement::Tail => (0, 0, m),
        Placement::Uniform => {
            let base = m / 3;
            let extra = m % 3;
            let gap = |i: usize| base + usize::from(i < extra);
            (gap(0), gap(1), gap(2))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Item {
    Token(TokenId),
    /// 1-based prompt slot.
    Prompt(usize),
    Mask,
    Cls,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedSequence {
    pub items: Vec<Item>,
    pub mask_index: usize,
    pub segment_a: Range<usize>,
    pub segment_b: Range<usize>,
}

impl MaskedSequence {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Token lengths after proportional truncation. The overflow is split in
/// proportion to the segment lengths (rounded), and each segment keeps at
/// least one token.
pub fn truncated_lengths(len_a: usize, len_b: usize, available: usize) -> (usize, usize) {
    let total = len_a + len_b;
    if total <= available {
        return (len_a, len_b);
    }
    let excess = total - available;
    let mut cut_a = ((excess * len_a) as f64 / total as f64).round() as usize;
    cut_a = cut_a.min(len_a - 1);
    let mut cut_b = excess - cut_a;
    if cut_b > len_b - 1 {
        cut_b = len_b - 1;
        cut_a = excess - cut_b;
    }
    (len_a - cut_a, len_b - cut_b)
}

/// Tokenises `example` and lays it out according to `template` within at
/// most `budget` positions. Segments are truncated from the end; prompts
/// and the mask are never dropped.
pub fn render(
    template: &PromptTemplate,
    example: &TaskExample,
    tokenizer: &crate::backbone::Tokenizer,
    budget: usize,
) -> Result<MaskedSequence> {
    template.validate()?;
    let sep = match &template.separator {
        Some(word) => Some(tokenizer.id_of(word).ok_or_else(|| {
            Error::Config(format!("separator {word:?} is not in the vocabulary"))
        })?),
        None => None,
    };
    let a = tokenizer.encode(&example.text_a);
    let b = tokenizer.encode(&example.text_b);
    if a.is_empty() || b.is_empty() {
        return Err(Error::Data(format!(
            "example {} has a segment with no tokens",
            example.id
        )));
    }
    let m = template.prompt_count;
    let fixed = usize::from(template.include_cls) + m + 1 + usize::from(sep.is_some());
    if budget < fixed + 2 {
        return Err(Error::Config(format!(
            "budget {budget} cannot hold {fixed} fixed positions plus one token per segment"
        )));
    }
    let (len_a, len_b) = truncated_lengths(a.len(), b.len(), budget - fixed);
    let (g1, g2, g3) = allocate_positions(template.placement, m, len_a, len_b);

    let mut items = Vec::with_capacity(fixed + len_a + len_b);
    let mut slot = 0;
    let mut prompts = |items: &mut Vec<Item>, count: usize| {
        for _ in 0..count {
            slot += 1;
            items.push(Item::Prompt(slot));
        }
    };
    if template.include_cls {
        items.push(Item::Cls);
    }
    if template.mask_position == MaskPosition::Head {
        items.push(Item::Mask);
    }
    prompts(&mut items, g1);
    let start_a = items.len();
    items.extend(a[..len_a].iter().map(|&t| Item::Token(t)));
    let segment_a = start_a..items.len();
    if let Some(s) = sep {
        items.push(Item::Token(s));
    }
    prompts(&mut items, g2);
    let start_b = items.len();
    items.extend(b[..len_b].iter().map(|&t| Item::Token(t)));
    let segment_b = start_b..items.len();
    let prompts_after_mask = template.placement == Placement::Tail;
    if !prompts_after_mask {
        prompts(&mut items, g3);
    }
    if template.mask_position == MaskPosition::Tail {
        items.push(Item::Mask);
    }
    if prompts_after_mask {
        prompts(&mut items, g3);
    }
    let mask_index = items
        .iter()
        .position(|i| *i == Item::Mask)
        .expect("one mask is always rendered");
    Ok(MaskedSequence {
        items,
        mask_index,
        segment_a,
        segment_b,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "scheme")]
pub enum PromptInit {
    RandomNormal {
        std: f64,
    },
    /// Copies word-embedding rows; words are cycled if fewer than the
    /// prompt count.
    CopyOfWordEmbeddings {
        words: Vec<String>,
    },
}

impl Default for PromptInit {
    fn default() -> Self {
        PromptInit::RandomNormal { std: 0.02 }
    }
}

/// The trainable prompt vectors, one row per slot.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptTable {
    pub vectors: Tensor,
}

impl PromptTable {
    pub fn init<M: MaskedLanguageModel>(
        prompt_count: usize,
        model: &M,
        init: &PromptInit,
        seed: u64,
    ) -> Result<Self> {
        let d = model.hidden_dim();
        let vectors = match init {
            PromptInit::RandomNormal { std } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                Tensor::random_normal(&[prompt_count, d], *std, &mut rng)
            }
            PromptInit::CopyOfWordEmbeddings { words } => {
                if words.is_empty() && prompt_count > 0 {
                    return Err(Error::Config("prompt init word list is empty".into()));
                }
                let mut ids = Vec::with_capacity(prompt_count);
                for i in 0..prompt_count {
                    let w = &words[i % words.len()];
                    ids.push(model.tokenizer().id_of(w).ok_or_else(|| {
                        Error::Config(format!("prompt init word {w:?} is not in the vocabulary"))
                    })?);
                }
                let rows = model.embed_ids(&ids)?;
                Tensor::from_vec(&[prompt_count, d], rows.into_data())
            }
        };
        Ok(PromptTable { vectors })
    }

    pub fn prompt_count(&self) -> usize {
        self.vectors.rows()
    }

    pub fn hash(&self) -> String {
        crate::backbone::hash_tensors([&self.vectors])
    }
}

/// Input-embedding rows for `seq`: word embeddings for tokens and the
/// `[CLS]`/`[MASK]` markers, prompt vectors for prompt slots.
pub fn assemble_embeddings<M: MaskedLanguageModel>(
    seq: &MaskedSequence,
    model: &M,
    prompts: &PromptTable,
) -> Result<Tensor> {
    let d = model.hidden_dim();
    let ids: Vec<TokenId> = seq
        .items
        .iter()
        .map(|item| match item {
            Item::Token(t) => *t,
            Item::Cls => CLS_ID,
            Item::Mask => MASK_ID,
            Item::Prompt(_) => CLS_ID,
        })
        .collect();
    let mut out = model.embed_ids(&ids)?;
    for (pos, item) in seq.items.iter().enumerate() {
        if let Item::Prompt(slot) = *item {
            if slot == 0 || slot > prompts.prompt_count() {
                return Err(Error::PromptSlot {
                    slot,
                    rows: prompts.prompt_count(),
                });
            }
            out.row_mut(pos)
                .copy_from_slice(prompts.vectors.row(slot - 1));
        }
    }
    debug_assert_eq!(out.cols(), d);
    Ok(out)
}
