#![allow(dead_code)]

use promptcode::backbone::{Backbone, EncoderConfig, Tokenizer};
use promptcode::corpus::{build_dialect_datasets, DialectDatasets, DialectLayout, DialectSpec};
use promptcode::prompting::{PromptInit, PromptTemplate};
use promptcode::tuning::PromptModel;
use promptcode::verbalizer::VerbalizerSpec;

pub fn small_layout() -> DialectLayout {
    DialectLayout {
        train_pairs: 10,
        validation_pairs: 4,
        test_pairs: 5,
        pretrain_pairs: 10,
        seed: 3,
    }
}

pub fn small_data() -> DialectDatasets {
    let layout = small_layout();
    let spec = DialectSpec {
        program_count: layout.required_programs(),
        grammar_seed: 11,
        ..DialectSpec::default()
    };
    build_dialect_datasets(&spec, &layout).unwrap()
}

pub fn tiny_config(seed: u64) -> EncoderConfig {
    EncoderConfig {
        hidden_dim: 16,
        num_heads: 2,
        num_layers: 2,
        max_sequence_length: 128,
        vocab_size: 0,
        seed,
    }
}

/// Randomly initialised backbone whose vocabulary covers `data`.
pub fn tiny_backbone(data: &DialectDatasets, seed: u64) -> Backbone {
    let mut texts: Vec<&str> = data.pretraining.iter().map(|s| s.text.as_str()).collect();
    for split in [&data.dialect_a, &data.dialect_b] {
        for (_, part) in split.partitions() {
            for e in part {
                texts.push(&e.text_a);
                texts.push(&e.text_b);
            }
        }
    }
    let tokenizer = Tokenizer::build(texts, &["yes", "no"]);
    Backbone::new(tiny_config(seed), tokenizer).unwrap()
}

pub fn model(backbone: &Backbone, prompt_count: usize) -> PromptModel {
    PromptModel::new(
        backbone.clone(),
        PromptTemplate {
            prompt_count,
            ..PromptTemplate::default()
        },
        &VerbalizerSpec::default(),
        &PromptInit::default(),
        1,
    )
    .unwrap()
}
