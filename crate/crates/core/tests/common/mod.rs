#![allow(dead_code)]

use std::path::{Path, PathBuf};

use correction_dst::config::{BackendsConfig, EmbeddingSpec, LmSpec, RunConfig, Seeds};
use correction_dst::dataset::{load_dataset, DatasetSplit, LoadOptions, SplitName};
use correction_dst::pipeline::{exemplar_from, target_schema};
use correction_dst::prompt::{build_correction_prompt, build_inference_prompt, ParseMode, PromptStyle};
use correction_dst::retriever::payloads_from_split;
use correction_dst::schema::SchemaTable;
use correction_dst::state::{context_window, TurnBelief};

pub fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn schema() -> SchemaTable {
    SchemaTable::load(&fixture_dir().join("schema.json")).unwrap()
}

pub fn split(file: &str, name: SplitName) -> DatasetSplit {
    let opts = LoadOptions {
        name,
        strict_consistency: true,
    };
    load_dataset(&fixture_dir().join(file), &schema(), &opts).unwrap().split
}

pub fn train() -> DatasetSplit {
    split("train.jsonl", SplitName::Train)
}

pub fn test() -> DatasetSplit {
    split("test.jsonl", SplitName::Test)
}

pub fn config(out: &Path, style: &str, inference: LmSpec, correction: LmSpec) -> RunConfig {
    let dir = fixture_dir();
    RunConfig {
        train: dir.join("train.jsonl"),
        eval: dir.join("test.jsonl"),
        schema: dir.join("schema.json"),
        synonyms: Some(dir.join("synonyms.json")),
        style: style.parse().unwrap(),
        k: None,
        width: None,
        fraction: 0.05,
        seeds: Seeds {
            split: 11,
            demos: 12,
            noise: 13,
        },
        backends: BackendsConfig {
            inference,
            correction,
            embedding: EmbeddingSpec::default(),
        },
        parse_mode: ParseMode::Lenient,
        max_concurrency: 2,
        output_dir: out.to_path_buf(),
        instruction: None,
        export_training: true,
        strict_consistency: true,
        retriever_pairs_per_anchor: 4,
    }
}

/// Hypothesis with the first pair of `gold` dropped and a wrong restaurant area added.
fn fixed_hypothesis(gold: &TurnBelief) -> TurnBelief {
    let mut h = gold.clone();
    if let Some(first) = gold.slots().next() {
        h.remove(first);
    }
    h.insert("restaurant-area", "north").unwrap();
    h
}

pub const GOLDEN_EXEMPLARS: [&str; 3] = ["train-0000:2", "train-0001:3", "train-0002:1"];
pub const GOLDEN_TARGET: (&str, usize) = ("test-0001", 3);

/// Prompt for `style` built from fixed fixture exemplars and a fixed hypothesis.
pub fn golden_prompt(style: PromptStyle) -> String {
    let schema = schema();
    let train = train();
    let test = test();
    let width = style.default_width();
    let payloads = payloads_from_split(&train, width).unwrap();
    let exemplars: Vec<_> = GOLDEN_EXEMPLARS
        .iter()
        .map(|id| {
            let mut p = payloads.iter().find(|p| p.example_id == *id).unwrap().clone();
            p.hypothesis = Some(fixed_hypothesis(&p.gold_tlb));
            exemplar_from(&p, style.family(), &schema, style.is_correction()).unwrap()
        })
        .collect();
    let d = test.dialogue(GOLDEN_TARGET.0).unwrap();
    let t = GOLDEN_TARGET.1;
    let ctx = context_window(d, t, width).unwrap();
    let prev = d.gold_prev_state(t).unwrap();
    let target = target_schema(style.family(), &schema, &d.domains).unwrap();
    let prompt = if style.is_correction() {
        let hyp = fixed_hypothesis(&d.turns[t - 1].gold_tlb);
        build_correction_prompt(style, &target, &exemplars, &prev, &ctx, &hyp, None)
    } else {
        build_inference_prompt(style, &target, &exemplars, &prev, &ctx)
    };
    prompt.unwrap().text
}
