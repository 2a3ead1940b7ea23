//! Flat run configuration shared by every subcommand.
//!
//! Each key can come from a TOML file (`--config`) or a flag of the same
//! name; flags win over the file, and the file wins over built-in defaults.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use re3qa_core::corpus::{Split, SyntheticSpec};
use re3qa_core::encoder::ModelConfig;
use re3qa_core::inference::{Ablation, InferenceConfig, ScoreWeights};
use re3qa_core::preprocess::PreprocessConfig;
use re3qa_core::train::{RerankNorm, TrainConfig};

/// Comma-separated list of early-exit depths.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DepthList(pub Vec<usize>);

impl FromStr for DepthList {
    type Err = std::num::ParseIntError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.split(',')
            .map(|p| p.trim().parse())
            .collect::<Result<Vec<_>, _>>()
            .map(DepthList)
    }
}

impl fmt::Display for DepthList {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|v| v.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

macro_rules! run_config {
    ($(
        $(#[doc = $doc:literal])*
        $field:ident $(| $alias:literal)? : $ty:ty = $default:expr;
    )*) => {
        /// Every tunable of a run. Unknown keys are rejected.
        #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
        #[serde(deny_unknown_fields, default)]
        pub struct RunConfig {
            $( $(#[doc = $doc])* pub $field: $ty, )*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                RunConfig { $( $field: $default, )* }
            }
        }

        /// Command-line overrides, one optional flag per configuration key.
        #[derive(Debug, Clone, Default, clap::Args)]
        pub struct Overrides {
            $(
                $(#[doc = $doc])*
                #[arg(long $(, visible_alias = $alias)?, help_heading = "Configuration keys")]
                pub $field: Option<$ty>,
            )*
        }

        impl RunConfig {
            /// Copies every flag that was given over the current value.
            pub fn apply(&mut self, o: &Overrides) {
                $( if let Some(v) = &o.$field { self.$field = v.clone(); } )*
            }
        }
    };
}

run_config! {
    /// Seed for data generation, initialization, shuffling and dropout.
    seed: u64 = 7;

    /// Synthetic instances to generate (the dev tail included).
    num_instances: usize = 2300;
    /// Instances at the end of the generated file tagged as dev.
    dev_instances: usize = 300;
    /// Documents per synthetic instance.
    docs_per_instance: usize = 3;
    /// Paragraphs per synthetic document.
    paragraphs_per_doc: usize = 4;
    /// Shortest synthetic paragraph, in tokens.
    paragraph_min_len: usize = 10;
    /// Longest synthetic paragraph, in tokens.
    paragraph_max_len: usize = 20;
    /// Distinct words the generator may use.
    vocab_size: usize = 512;
    /// Probability of each near-miss fact in a non-answer paragraph.
    distractor_rate: f64 = 0.5;

    /// Paragraphs are merged while their token total stays within this bound.
    merge_threshold: usize = 32;
    /// Paragraphs kept per instance by TF-IDF pruning (K).
    top_k_paragraphs | "K": usize = 6;
    /// Encoder input length in tokens (L_x).
    max_seq_len: usize = 64;
    /// Sliding-window stride in tokens.
    stride: usize = 24;

    /// Hidden size (D_h).
    hidden: usize = 32;
    /// Transformer blocks (I).
    layers | "I": usize = 4;
    /// Attention heads.
    heads: usize = 4;
    /// Standard deviation of the normal weight initialization.
    init_std: f64 = 0.02;

    /// Early-exit depth of the retriever (J).
    retrieve_depth | "J": usize = 2;
    /// Segments kept per instance for reading (N).
    top_n | "N": usize = 2;
    /// Spans proposed per segment (M).
    proposals | "M": usize = 10;
    /// Spans kept after span suppression (M*).
    nms_keep: usize = 5;
    /// Longest answer span in tokens.
    max_answer_len: usize = 8;
    /// Training epochs.
    epochs: usize = 10;
    /// Peak Adam learning rate.
    learning_rate: f64 = 1e-3;
    /// Fraction of all steps spent on linear warmup.
    warmup_fraction: f64 = 0.1;
    /// Retained segments per step.
    batch_size: usize = 8;
    /// Dropout probability.
    dropout: f64 = 0.1;
    /// Global gradient-norm cap.
    clip_norm: f64 = 1.0;
    /// Normalization of rerank scores in the soft loss term: softmax or sum.
    rerank_norm: RerankNorm = RerankNorm::Softmax;

    /// Weight of the retrieval probability in the answer score.
    w_retrieve: f64 = 1.4;
    /// Weight of the reading score in the answer score.
    w_read: f64 = 1.0;
    /// Weight of the rerank score in the answer score.
    w_rerank: f64 = 1.4;
    /// Apply span suppression before reranking.
    nms: bool = true;
    /// Model variant used by `predict`: full, no-reranker, no-retriever or no-both.
    ablation: Ablation = Ablation::Full;
    /// Run prediction in 64-bit floating point.
    verify_f64: bool = false;

    /// Segments per instance for `bench` (n).
    segments | "n": usize = 17;
    /// Early-exit depths trained and evaluated by `sweep-j`.
    sweep_j: DepthList = DepthList(vec![1, 2, 3]);
    /// Finite-difference step of `gradcheck`.
    gradcheck_epsilon: f64 = 1e-5;
    /// Largest relative error `gradcheck` accepts.
    gradcheck_tolerance: f64 = 1e-4;

    /// Dataset file (JSON lines).
    dataset: PathBuf = PathBuf::from("data/dataset.jsonl");
    /// Directory holding `vocab.txt` and `model.bin` of a trained model.
    model_dir: PathBuf = PathBuf::from("out");
    /// Output directory.
    out: PathBuf = PathBuf::from("out");
    /// Split read by `predict` and `eval`.
    split: Split = Split::Dev;
}

impl RunConfig {
    /// Defaults, then the file, then the flags.
    pub fn resolve(file: Option<&Path>, overrides: &Overrides) -> anyhow::Result<Self> {
        let mut cfg = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?
            }
            None => RunConfig::default(),
        };
        cfg.apply(overrides);
        Ok(cfg)
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Writes the resolved configuration to `<out>/<command>.config.toml`.
    pub fn write_resolved(&self, command: &str) -> anyhow::Result<PathBuf> {
        let path = self.out.join(format!("{command}.config.toml"));
        std::fs::write(&path, self.to_toml()?).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    pub fn synthetic(&self) -> anyhow::Result<SyntheticSpec> {
        if self.paragraph_min_len > self.paragraph_max_len {
            bail!(
                "paragraph_min_len {} exceeds paragraph_max_len {}",
                self.paragraph_min_len,
                self.paragraph_max_len
            );
        }
        Ok(SyntheticSpec {
            seed: self.seed,
            num_instances: self.num_instances,
            dev_instances: self.dev_instances,
            docs_per_instance: self.docs_per_instance,
            paragraphs_per_doc: self.paragraphs_per_doc,
            paragraph_len_range: (self.paragraph_min_len, self.paragraph_max_len),
            vocab_size: self.vocab_size,
            distractor_rate: self.distractor_rate,
        })
    }

    pub fn preprocess(&self) -> PreprocessConfig {
        PreprocessConfig {
            merge_threshold: self.merge_threshold,
            top_k_paragraphs: self.top_k_paragraphs,
            max_seq_len: self.max_seq_len,
            stride: self.stride,
        }
    }

    pub fn model(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            hidden: self.hidden,
            layers: self.layers,
            heads: self.heads,
            max_seq_len: self.max_seq_len,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            retrieve_depth: self.retrieve_depth,
            top_n: self.top_n,
            proposals: self.proposals,
            nms_keep: self.nms_keep,
            max_answer_len: self.max_answer_len,
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            warmup_fraction: self.warmup_fraction,
            batch_size: self.batch_size,
            dropout: self.dropout,
            clip_norm: self.clip_norm,
            seed: self.seed,
            rerank_norm: self.rerank_norm,
        }
    }

    pub fn inference(&self) -> InferenceConfig {
        InferenceConfig {
            nms: self.nms,
            ..InferenceConfig::from_train(
                &self.train(),
                ScoreWeights {
                    retrieve: self.w_retrieve,
                    read: self.w_read,
                    rerank: self.w_rerank,
                },
            )
        }
    }
}
