//! End-to-end acceptance checks. Runs as a plain binary (no libtest
//! harness) and prints one PASS/FAIL line per criterion.

mod common;

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{small_data, tiny_backbone};
use promptcode::backbone::{
    pretrain_mlm, Backbone, EncoderConfig, FreezePolicy, MaskedLanguageModel, PretrainConfig,
    Tensor, Tokenizer,
};
use promptcode::corpus::{
    balance_binary, build_dialect_datasets, filter_by_length, label_counts, DialectDatasets,
    DialectLayout, DialectSpec, Label, Origin, Task, TaskExample,
};
use promptcode::evalharness::{accuracy, run_protocol, Datasets, Protocol, ProtocolKind, RunSetup};
use promptcode::prompting::{render, Item, Placement, PromptInit, PromptTemplate};
use promptcode::tuning::{
    mlm_loss, train, zero_shot_apply, LrSchedule, PromptModel, TrainConfig, TrainableSet,
};
use promptcode::verbalizer::VerbalizerSpec;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let held: bool = $cond;
        if !held {
            return Err(format!($($msg)+));
        }
    };
}

fn words(prefix: &str, n: usize) -> String {
    (0..n)
        .map(|i| format!("{prefix}{}", i % 9))
        .collect::<Vec<_>>()
        .join(" ")
}

fn toy_tokenizer() -> Tokenizer {
    Tokenizer::build(
        [words("a", 9).as_str(), words("b", 9).as_str()],
        &["yes", "no"],
    )
}

fn pair(len_a: usize, len_b: usize) -> TaskExample {
    TaskExample {
        id: format!("{len_a}x{len_b}"),
        task: Task::CloneDetection,
        language: "toy".into(),
        text_a: words("a", len_a),
        text_b: words("b", len_b),
        label: Label::Positive,
        origin: Origin::Natural,
    }
}

fn template_fidelity() -> Outcome {
    let t = toy_tokenizer();
    let ex = pair(3, 2);
    let a = t.encode(&ex.text_a);
    let b = t.encode(&ex.text_b);
    let tok = |ids: &[u32]| ids.iter().map(|&i| Item::Token(i)).collect::<Vec<_>>();

    let plain = PromptTemplate {
        prompt_count: 0,
        ..PromptTemplate::default()
    };
    let seq = render(&plain, &ex, &t, 256).map_err(|e| e.to_string())?;
    let mut want = vec![Item::Cls];
    want.extend(tok(&a));
    want.extend(tok(&b));
    want.push(Item::Mask);
    ensure!(seq.items == want, "m=0 layout {:?}", seq.items);

    let six = PromptTemplate {
        prompt_count: 6,
        placement: Placement::Uniform,
        ..PromptTemplate::default()
    };
    let seq = render(&six, &ex, &t, 256).map_err(|e| e.to_string())?;
    let mut want = vec![Item::Cls, Item::Prompt(1), Item::Prompt(2)];
    want.extend(tok(&a));
    want.extend([Item::Prompt(3), Item::Prompt(4)]);
    want.extend(tok(&b));
    want.extend([Item::Prompt(5), Item::Prompt(6), Item::Mask]);
    ensure!(seq.items == want, "m=6 uniform layout {:?}", seq.items);

    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for case in 0..1000 {
        let m = rng.gen_range(0..=30);
        let (la, lb) = (rng.gen_range(1..200), rng.gen_range(1..200));
        let budget = rng.gen_range(40..=256);
        let template = PromptTemplate {
            prompt_count: m,
            placement: Placement::Uniform,
            ..PromptTemplate::default()
        };
        let seq = render(&template, &pair(la, lb), &t, budget).map_err(|e| e.to_string())?;
        let masks = seq.items.iter().filter(|i| **i == Item::Mask).count();
        ensure!(masks == 1, "case {case}: {masks} masks");
        let want_len = (2 + m + la + lb).min(budget);
        ensure!(
            seq.len() == want_len,
            "case {case}: length {} != {want_len}",
            seq.len()
        );
        // gaps: prompts before x1, between x1 and x2, after x2
        let count = |r: std::ops::Range<usize>| {
            seq.items[r]
                .iter()
                .filter(|i| matches!(i, Item::Prompt(_)))
                .count()
        };
        let gaps = [
            count(0..seq.segment_a.start),
            count(seq.segment_a.end..seq.segment_b.start),
            count(seq.segment_b.end..seq.len()),
        ];
        let spread = gaps.iter().max().unwrap() - gaps.iter().min().unwrap();
        ensure!(spread <= 1, "case {case}: gaps {gaps:?}");
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 10.0, "property suite took {secs:.1}s");
    Ok(format!("1000 cases in {secs:.2}s"))
}

fn loss_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.gen_range(2..200);
        let logits: Vec<f64> = (0..n).map(|_| rng.gen_range(-20.0..20.0)).collect();
        let gold = rng.gen_range(0..n);
        let got = mlm_loss(&logits, gold as u32).map_err(|e| e.to_string())?;
        // naive: -log(exp(l_g) / sum exp(l_i)) without max shifting
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        let naive = -(logits[gold].exp() / z).ln();
        worst = worst.max((got - naive).abs());
    }
    ensure!(worst <= 1e-6, "max deviation {worst:e}");
    for v in [2usize, 4, 97, 5000] {
        let got = mlm_loss(&vec![0.37; v], 1).map_err(|e| e.to_string())?;
        let dev = (got - (v as f64).ln()).abs();
        ensure!(dev <= 1e-9, "uniform |V|={v}: off by {dev:e}");
    }
    Ok(format!("max deviation {worst:.2e}"))
}

fn miniature_backbone(data: &DialectDatasets, seed: u64) -> Backbone {
    let tokenizer = tiny_backbone(data, 0).tokenizer().clone();
    Backbone::new(EncoderConfig::miniature(0, seed), tokenizer).unwrap()
}

fn prompt_model(backbone: &Backbone, m: usize, placement: Placement) -> PromptModel {
    PromptModel::new(
        backbone.clone(),
        PromptTemplate {
            prompt_count: m,
            placement,
            ..PromptTemplate::default()
        },
        &VerbalizerSpec::default(),
        &PromptInit::default(),
        0,
    )
    .unwrap()
}

fn gradient_isolation() -> Outcome {
    let start = Instant::now();
    let data = small_data();
    let backbone = miniature_backbone(&data, 4);
    let mut model = prompt_model(&backbone, 10, Placement::Uniform);
    let before = model.hashes();
    // 20 examples, batch 2, 5 epochs: 50 optimizer steps
    let split = data.dialect_a.clone();
    let batch = 2;
    let epochs = 50 / split.train.len().div_ceil(batch);
    let config = TrainConfig {
        batch_size: batch,
        epochs,
        peak_lr: 1e-2,
        ..TrainConfig::default()
    };
    ensure!(
        epochs * split.train.len().div_ceil(batch) == 50,
        "layout does not give 50 steps"
    );
    train(&mut model, &split, &config).map_err(|e| e.to_string())?;
    let after = model.hashes();
    ensure!(before.encoder == after.encoder, "encoder changed");
    ensure!(
        before.word_embeddings == after.word_embeddings,
        "word embeddings changed"
    );
    ensure!(
        before.prompt_table != after.prompt_table,
        "prompt table unchanged"
    );
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 60.0, "took {secs:.1}s");
    Ok(format!("50 steps in {secs:.1}s"))
}

/// Reads or writes one scalar of the model's parameters: tensor 0 is the
/// prompt table, then the backbone tensors in their canonical order.
fn param(model: &mut PromptModel, tensor: usize, index: usize) -> &mut f64 {
    if tensor == 0 {
        &mut model.prompts.vectors.data_mut()[index]
    } else {
        &mut model
            .backbone
            .params
            .tensors_mut()
            .into_iter()
            .nth(tensor - 1)
            .unwrap()
            .data_mut()[index]
    }
}

fn gradient_correctness() -> Outcome {
    const H: f64 = 1e-4;
    // relative error denominators never drop below this
    const FLOOR: f64 = 1e-7;
    let data = small_data();
    let mut backbone = miniature_backbone(&data, 6);
    backbone.freeze_policy = FreezePolicy::FullFinetune;
    let mut model = prompt_model(&backbone, 6, Placement::Uniform);
    let example = data.dialect_a.train[0].clone();
    let sets: BTreeSet<TrainableSet> = [
        TrainableSet::PromptTable,
        TrainableSet::MlmHead,
        TrainableSet::Backbone,
    ]
    .into_iter()
    .collect();
    let (_, grads) = model
        .gradients(&example, &sets)
        .map_err(|e| e.to_string())?;
    let mut analytic: Vec<&Tensor> = vec![&grads.prompts];
    analytic.extend(grads.backbone.tensors());

    let used: Vec<u32> = model
        .render(&example)
        .map_err(|e| e.to_string())?
        .items
        .iter()
        .filter_map(|i| match i {
            Item::Token(t) => Some(*t),
            _ => None,
        })
        .collect();
    let hidden = backbone.hidden_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let tensor = rng.gen_range(0..analytic.len());
        let index = if tensor == 1 {
            // word embeddings: only rows present in the input carry gradient
            let row = used[rng.gen_range(0..used.len())] as usize;
            row * hidden + rng.gen_range(0..hidden)
        } else {
            rng.gen_range(0..analytic[tensor].len())
        };
        let a = analytic[tensor].data()[index];
        let original = *param(&mut model, tensor, index);
        let mut loss_at = |value: f64| {
            *param(&mut model, tensor, index) = value;
            let (loss, _) = model.gradients(&example, &BTreeSet::new()).unwrap();
            loss
        };
        let plus = loss_at(original + H);
        let minus = loss_at(original - H);
        *param(&mut model, tensor, index) = original;
        let numeric = (plus - minus) / (2.0 * H);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
        ensure!(
            rel <= 1e-3,
            "tensor {tensor} index {index}: analytic {a:e} numeric {numeric:e} rel {rel:e}"
        );
        worst = worst.max(rel);
    }
    Ok(format!("20 parameters, max rel err {worst:.2e}"))
}

fn schedule_shape() -> Outcome {
    let (warmup, total, peak) = (50, 500, 3e-5);
    let s = LrSchedule::new(warmup, total, peak).map_err(|e| e.to_string())?;
    let at = |k| s.lr_at(k).unwrap();
    ensure!(at(0) == 0.0, "lr_at(0) = {}", at(0));
    ensure!(at(warmup) == 3e-5, "lr_at(warmup) = {:e}", at(warmup));
    ensure!(at(total) == 0.0, "lr_at(total) = {:e}", at(total));
    let tol = 1e-12 * peak;
    for k in (1..warmup).chain(warmup + 1..total) {
        let second = (at(k + 1) - at(k)) - (at(k) - at(k - 1));
        ensure!(second.abs() <= tol, "second difference at {k}: {second:e}");
    }
    Ok("endpoints exact, second differences constant".into())
}

struct Transfer {
    datasets: Datasets,
    backbone: Backbone,
    setup: RunSetup,
    protocol: Protocol,
    pretrain_secs: f64,
    uniform: f64,
    control: f64,
}

fn transfer_setup() -> Transfer {
    let layout = DialectLayout::default();
    let spec = DialectSpec {
        program_count: layout.required_programs(),
        ..DialectSpec::default()
    };
    let data = build_dialect_datasets(&spec, &layout).unwrap();
    assert!(data.pretraining.len() >= 2000);
    let pretrain = PretrainConfig {
        steps: 2000,
        batch_size: 16,
        peak_lr: 1e-3,
        programs_per_sequence: 3,
        ..PretrainConfig::default()
    };
    let start = Instant::now();
    let out = pretrain_mlm(&data.pretraining, EncoderConfig::miniature(0, 0), &pretrain).unwrap();
    let pretrain_secs = start.elapsed().as_secs_f64();
    println!(
        "  pretraining: {} programs, {pretrain_secs:.0}s, held-out loss {:.3} -> {:.3}",
        data.pretraining.len(),
        out.initial_heldout_loss,
        out.final_heldout_loss
    );
    let backbone = out.backbone;

    let datasets = Datasets {
        source: data.dialect_a.clone(),
        target: Some(data.dialect_b.clone()),
    };
    let protocol = Protocol {
        kind: ProtocolKind::ZeroShot,
        source_language: "dialectA".into(),
        target_language: "dialectB".into(),
        source_train_size: 500,
        target_train_size: 0,
        task: Task::CloneDetection,
    };
    let setup = RunSetup {
        template: PromptTemplate {
            prompt_count: 10,
            placement: Placement::Uniform,
            ..PromptTemplate::default()
        },
        train: TrainConfig {
            batch_size: 10,
            epochs: 10,
            peak_lr: 5e-3,
            ..TrainConfig::default()
        },
        ..RunSetup::default()
    };
    let (record, _) = run_protocol(&protocol, &datasets, &backbone, &setup).unwrap();
    let uniform = record.metrics.accuracy;

    let control_model = prompt_model(&backbone, 0, Placement::Uniform);
    let test = &data.dialect_b.test;
    let preds = zero_shot_apply(&control_model, test).unwrap();
    let labels: Vec<Label> = preds.iter().map(|p| p.label).collect();
    let gold: Vec<Label> = test.iter().map(|e| e.label).collect();
    let control = accuracy(&labels, &gold).unwrap();
    Transfer {
        datasets,
        backbone,
        setup,
        protocol,
        pretrain_secs,
        uniform,
        control,
    }
}

fn zero_shot_transfer(t: &Transfer) -> Outcome {
    let test = t.datasets.target.as_ref().unwrap().test.len();
    let train = t.datasets.source.train.len();
    ensure!(train == 500 && test == 200, "sizes {train}/{test}");
    ensure!(
        t.pretrain_secs <= 900.0,
        "pretraining took {:.0}s",
        t.pretrain_secs
    );
    let gap = t.uniform - t.control;
    let summary = format!(
        "dialect-B accuracy {:.3}, untuned control {:.3}, gap {gap:.3}",
        t.uniform, t.control
    );
    ensure!(t.uniform >= 0.70 && gap >= 0.15, "{summary}");
    Ok(summary)
}

fn ablation_direction(t: &Transfer) -> Outcome {
    let run = |placement: Placement, k: usize| {
        let mut setup = t.setup.clone();
        setup.template.placement = placement;
        setup.template.prompt_count = k;
        let (record, _) = run_protocol(&t.protocol, &t.datasets, &t.backbone, &setup).unwrap();
        record.metrics.accuracy
    };
    let mut placements = vec![(Placement::Uniform, t.uniform)];
    for p in [Placement::Head, Placement::Middle, Placement::Tail] {
        placements.push((p, run(p, 10)));
    }
    let mut counts = vec![
        (1, run(Placement::Uniform, 1)),
        (5, run(Placement::Uniform, 5)),
    ];
    counts.push((10, t.uniform));
    counts.push((20, run(Placement::Uniform, 20)));

    let show = |v: Vec<String>| v.join(" ");
    let summary = format!(
        "placements [{}] counts [{}]",
        show(
            placements
                .iter()
                .map(|(p, a)| format!("{}={a:.3}", p.name()))
                .collect()
        ),
        show(counts.iter().map(|(k, a)| format!("k{k}={a:.3}")).collect())
    );
    let worst_other = placements[1..].iter().map(|(_, a)| *a).fold(0.0, f64::max);
    ensure!(t.uniform >= worst_other - 0.02, "uniform trails: {summary}");
    let best = counts.iter().map(|(_, a)| *a).fold(0.0, f64::max);
    let interior = counts[1..3].iter().map(|(_, a)| *a).fold(0.0, f64::max);
    ensure!(
        interior >= best - 0.02,
        "no interior maximum over k: {summary}"
    );
    Ok(summary)
}

fn determinism() -> Outcome {
    let data = small_data();
    let backbone = tiny_backbone(&data, 8);
    let datasets = Datasets {
        source: data.dialect_a.clone(),
        target: Some(data.dialect_b.clone()),
    };
    let protocol = Protocol {
        kind: ProtocolKind::FewShotCross,
        source_language: "dialectA".into(),
        target_language: "dialectB".into(),
        source_train_size: 20,
        target_train_size: 6,
        task: Task::CloneDetection,
    };
    let mut setup = RunSetup::default();
    setup.template.prompt_count = 4;
    setup.train = TrainConfig {
        epochs: 3,
        batch_size: 4,
        peak_lr: 1e-2,
        seed: 12,
        ..TrainConfig::default()
    };
    let run = || {
        run_protocol(&protocol, &datasets, &backbone, &setup)
            .unwrap()
            .0
    };
    let (a, b) = (run(), run());
    ensure!(a.metrics == b.metrics, "metrics differ");
    ensure!(
        a.checkpoint_hash == b.checkpoint_hash,
        "checkpoint hashes differ"
    );
    ensure!(a.final_hashes == b.final_hashes, "final hashes differ");
    Ok(format!("checkpoint {}", &a.checkpoint_hash[..16]))
}

fn data_rules() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for corpus in 0..100 {
        let pos = rng.gen_range(2..40);
        let neg = rng.gen_range(0..80);
        let mut ex = Vec::new();
        for i in 0..pos {
            ex.push(TaskExample {
                id: format!("p{i}"),
                task: Task::CloneDetection,
                language: "toy".into(),
                text_a: format!("code{i}"),
                text_b: format!("twin{}", i % 3),
                label: Label::Positive,
                origin: Origin::Natural,
            });
        }
        for i in 0..neg {
            ex.push(TaskExample {
                id: format!("n{i}"),
                label: Label::Negative,
                text_b: format!("other{i}"),
                ..ex[i % pos].clone()
            });
        }
        let out = balance_binary(&ex, corpus).map_err(|e| e.to_string())?;
        let (p, n) = label_counts(&out);
        ensure!(
            p == n && p == pos,
            "corpus {corpus}: {p} positives, {n} negatives"
        );
        let positives: BTreeSet<(&str, &str)> = out
            .iter()
            .filter(|e| e.label == Label::Positive)
            .flat_map(|e| {
                [
                    (e.text_a.as_str(), e.text_b.as_str()),
                    (e.text_b.as_str(), e.text_a.as_str()),
                ]
            })
            .collect();
        for e in out
            .iter()
            .filter(|e| e.origin == Origin::RecombinedNegative)
        {
            ensure!(
                !positives.contains(&(e.text_a.as_str(), e.text_b.as_str())),
                "corpus {corpus}: recombined negative {} collides",
                e.id
            );
        }
    }

    let t = toy_tokenizer();
    for (len, keep) in [(124, false), (125, true), (250, true), (251, false)] {
        let code = pair(len, 150);
        let kept = filter_by_length(&[code], &t, 125, 250).map_err(|e| e.to_string())?;
        ensure!(
            kept.len() == usize::from(keep),
            "{len} tokens: kept {}",
            kept.len()
        );
    }
    Ok("100 corpora balanced, boundaries 124/125/250/251 honoured".into())
}

fn verbalizer_rules() -> Outcome {
    let t = toy_tokenizer();
    let v = VerbalizerSpec::default()
        .resolve(&t)
        .map_err(|e| e.to_string())?;
    let yes = t.id_of("yes").unwrap() as usize;
    let no = t.id_of("no").unwrap() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for case in 0..1000 {
        let mut logits: Vec<f64> = (0..t.vocab_size())
            .map(|_| rng.gen_range(-8.0..8.0))
            .collect();
        if case % 10 == 0 {
            logits[no] = logits[yes];
        }
        let (label, score) = v.predict_label(&logits);
        let want = if logits[yes] > logits[no] {
            Label::Positive
        } else {
            Label::Negative
        };
        ensure!(label == want, "case {case}: {label:?}");
        ensure!((0.5..=1.0).contains(&score), "case {case}: score {score}");
        // a strictly increasing map of every logit keeps the decision
        let squashed: Vec<f64> = logits
            .iter()
            .map(|x| 3.0 * x.tanh() + 0.5 * x - 7.0)
            .collect();
        ensure!(
            v.predict_label(&squashed).0 == label,
            "case {case}: not invariant"
        );
    }
    let mut tie = vec![0.0; t.vocab_size()];
    tie[yes] = 2.5;
    tie[no] = 2.5;
    let (label, score) = v.predict_label(&tie);
    ensure!(label == Label::Negative, "tie went to {label:?}");
    ensure!(score == 0.5, "tie score {score}");
    ensure!(v.ranking_score(&tie) == 0.5, "tie ranking score");
    Ok("1000 vectors, tie -> negative at 0.5".into())
}

fn main() {
    let mut failures = 0;
    let mut report = |name: &str, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let outcome =
            catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".to_string()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                failures += 1;
                println!("FAIL {name} ({secs:.1}s): {detail}");
            }
        }
    };
    report("1 template fidelity", &mut template_fidelity);
    report("2 loss oracle", &mut loss_oracle);
    report("3 gradient isolation", &mut gradient_isolation);
    report("4 gradient correctness", &mut gradient_correctness);
    report("5 schedule shape", &mut schedule_shape);
    let transfer = catch_unwind(transfer_setup).ok();
    match &transfer {
        Some(t) => {
            report("6 zero-shot transfer", &mut || zero_shot_transfer(t));
            report("7 ablation direction", &mut || ablation_direction(t));
        }
        None => {
            report("6 zero-shot transfer", &mut || Err("setup failed".into()));
            report("7 ablation direction", &mut || Err("setup failed".into()));
        }
    }
    report("8 determinism", &mut determinism);
    report("9 data rules", &mut data_rules);
    report("10 verbalizer", &mut verbalizer_rules);
    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
}
