//! The seeded fine-tuning scenario: corpus, partition, base and tuned
//! adapters.

use serde::{Deserialize, Serialize};

use crate::data::{gen_corpus, GrammarKind, partition, CorpusSpec, DataPartition, PartitionCounts};
use crate::error::Result;
use crate::math::RngState;
use crate::model::{init_model, train_retain, CheckpointPair, MicroModel, ModelSpec, OutputPrior, TrainConfig, TrainLog};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub model: ModelSpec,
    pub corpus: CorpusSpec,
    pub counts: PartitionCounts,
    pub train: TrainConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        let corpus = CorpusSpec {
            retain_grammar: GrammarKind::Chain,
            forget_grammar: GrammarKind::Branch2,
            crossover: 0.1,
            topic_blocks: true,
            crossover_tilt: 4.0,
            crossover_return: 0.5,
            ..CorpusSpec::default()
        };
        let layout = corpus.layout().expect("default corpus layout");
        let model = ModelSpec {
            vocab_size: corpus.vocab_size,
            context_len: corpus.seq_len,
            output_prior: Some(OutputPrior {
                first_token: layout.forget_content.0,
                end_token: layout.forget_content.1,
                min_penalty: 0.0,
                max_penalty: 4.0,
                ramp: true,
            }),
            ..ModelSpec::default()
        };
        Self {
            model,
            corpus,
            counts: PartitionCounts::default(),
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub model: MicroModel,
    pub parts: DataPartition,
    pub ckpt: CheckpointPair,
    pub train_log: TrainLog,
}

/// Generates the corpus, splits it, and fine-tunes the adapters on
/// retain-1 ∪ retain-2.
pub fn build_scenario(cfg: &ScenarioConfig) -> Result<Scenario> {
    let (retain, forget) = gen_corpus(&cfg.corpus)?;
    let parts = partition(&retain, &forget, &cfg.counts, RngState::new(cfg.corpus.seed, 3))?;
    let (model, base) = init_model(&cfg.model)?;
    let corpus = parts.retain_train()?;
    let (tuned, train_log) = train_retain(&model, &base, &corpus, &cfg.train, RngState::new(cfg.model.seed, 4))?;
    let ckpt = CheckpointPair::new(cfg.model.clone(), base, tuned)?;
    Ok(Scenario {
        model,
        parts,
        ckpt,
        train_log,
    })
}
