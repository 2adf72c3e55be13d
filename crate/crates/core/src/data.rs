//! Synthetic two-domain corpus and its partition into curvature, forget
//! evaluation and retain subsets.
//!
//! Token layout for vocabulary `V` and `M` markers per domain:
//!
//! ```text
//! [0, M)            retain markers
//! [M, 2M)           forget markers
//! [2M, 2M + C/2)    retain content
//! [2M + C/2, V)     forget content         (C = V - 2M)
//! ```
//!
//! Every sequence opens with a marker of its own domain, then follows that
//! domain's Markov grammar over content tokens. Retain sequences may cross
//! into forget content at rate `crossover` and stay there for a while
//! (`crossover_return`); markers are never shared.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::RngState;
use crate::model::Batch;

pub const CORPUS_SCHEMA: &str = "curvrestore.corpus";
pub const CORPUS_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Domain {
    Retain,
    Forget,
}

/// Shape of a domain's transition table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GrammarKind {
    /// One dominant successor per state (probability 0.85).
    Chain,
    /// Two successors per state with random weights.
    Branch2,
    /// Three successors per state with random weights.
    Branch3,
}

impl GrammarKind {
    fn branching(self) -> usize {
        match self {
            GrammarKind::Chain => 2,
            GrammarKind::Branch2 => 2,
            GrammarKind::Branch3 => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub vocab_size: usize,
    pub markers_per_domain: usize,
    pub retain_grammar: GrammarKind,
    pub forget_grammar: GrammarKind,
    pub n_retain: usize,
    pub n_forget: usize,
    /// Sequences have lengths drawn uniformly from `[min_len, seq_len]`.
    pub seq_len: usize,
    pub min_len: usize,
    /// Probability that a retain step emits a forget-content token.
    pub crossover: f64,
    /// Split forget content into one contiguous block per forget marker and
    /// keep every forget sequence inside its marker's block.
    #[serde(default)]
    pub topic_blocks: bool,
    /// Crossover picks forget-content token `i` of `n` with weight
    /// `exp(−tilt·i/(n−1))`; 0 is uniform.
    #[serde(default)]
    pub crossover_tilt: f64,
    /// Once a retain sequence has emitted a forget-content token, it returns
    /// to retain content with this probability per step and otherwise
    /// continues under the forget grammar.
    #[serde(default = "one")]
    pub crossover_return: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            vocab_size: 32,
            markers_per_domain: 2,
            retain_grammar: GrammarKind::Branch2,
            forget_grammar: GrammarKind::Branch2,
            n_retain: 584,
            n_forget: 306,
            seq_len: 12,
            min_len: 8,
            crossover: 0.0,
            topic_blocks: false,
            crossover_tilt: 0.0,
            crossover_return: 1.0,
            seed: 42,
        }
    }
}

fn one() -> f64 {
    1.0
}

/// Token ranges implied by a [`CorpusSpec`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenLayout {
    pub retain_markers: (u32, u32),
    pub forget_markers: (u32, u32),
    pub retain_content: (u32, u32),
    pub forget_content: (u32, u32),
}

impl TokenLayout {
    pub fn markers(&self, domain: Domain) -> (u32, u32) {
        match domain {
            Domain::Retain => self.retain_markers,
            Domain::Forget => self.forget_markers,
        }
    }
}

impl CorpusSpec {
    /// Smallest vocabulary that fits both marker sets and two content tokens
    /// per domain.
    pub fn min_vocab(&self) -> usize {
        2 * self.markers_per_domain.max(1) + 4
    }

    pub fn layout(&self) -> Result<TokenLayout> {
        let need = self.min_vocab();
        if self.vocab_size < need || self.markers_per_domain == 0 {
            return Err(Error::VocabTooSmall {
                vocab: self.vocab_size,
                need,
            });
        }
        let m = self.markers_per_domain as u32;
        let v = self.vocab_size as u32;
        let split = 2 * m + (v - 2 * m) / 2;
        Ok(TokenLayout {
            retain_markers: (0, m),
            forget_markers: (m, 2 * m),
            retain_content: (2 * m, split),
            forget_content: (split, v),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: u64,
    pub domain: Domain,
    pub tokens: Vec<u32>,
}

/// Sparse transition table: for every content token, a list of
/// `(successor, cumulative probability)`.
struct Grammar {
    start: Vec<Vec<(u32, f64)>>,
    table: Vec<Vec<(u32, f64)>>,
    first_content: u32,
}

impl Grammar {
    fn build(
        kind: GrammarKind,
        layout: &TokenLayout,
        domain: Domain,
        crossover: f64,
        crossover_tilt: f64,
        topic_blocks: bool,
        rng: &mut impl Rng,
    ) -> Grammar {
        let (c0, c1) = (layout.retain_content.0, layout.forget_content.1);
        let own = match domain {
            Domain::Retain => layout.retain_content,
            Domain::Forget => layout.forget_content,
        };
        let crossover = if domain == Domain::Retain { crossover } else { 0.0 };
        let (m0, m1) = layout.markers(domain);
        let n_blocks = (m1 - m0) as usize;
        // Content range that the successors of a marker or token come from.
        let block_of = |index: usize| -> (u32, u32) {
            if !(topic_blocks && domain == Domain::Forget) {
                return own;
            }
            let width = (own.1 - own.0) as usize;
            let b = index.min(n_blocks - 1);
            let lo = own.0 + (b * width / n_blocks) as u32;
            let hi = own.0 + ((b + 1) * width / n_blocks) as u32;
            (lo, hi)
        };
        let token_block = |t: u32| -> usize {
            if t < own.0 || t >= own.1 {
                return 0;
            }
            let width = (own.1 - own.0) as usize;
            ((t - own.0) as usize * n_blocks) / width
        };
        let successors = |range: (u32, u32), rng: &mut dyn rand::RngCore| -> Vec<(u32, f64)> {
            let b = kind.branching();
            let mut pool: Vec<u32> = (range.0..range.1).collect();
            pool.shuffle(rng);
            pool.truncate(b.min(pool.len()));
            let weights: Vec<f64> = match kind {
                GrammarKind::Chain => {
                    let mut w = vec![0.15 / (pool.len().max(2) - 1) as f64; pool.len()];
                    w[0] = 0.85;
                    w
                }
                _ => pool.iter().map(|_| rng.random_range(0.5..1.5)).collect(),
            };
            let z: f64 = weights.iter().sum();
            let mut out: Vec<(u32, f64)> = pool
                .into_iter()
                .zip(weights)
                .map(|(t, w)| (t, (1.0 - crossover) * w / z))
                .collect();
            if crossover > 0.0 {
                let (f0, f1) = layout.forget_content;
                let last = (f1 - f0).saturating_sub(1).max(1) as f64;
                let w: Vec<f64> = (f0..f1).map(|t| (-crossover_tilt * (t - f0) as f64 / last).exp()).collect();
                let z: f64 = w.iter().sum();
                out.extend((f0..f1).zip(w).map(|(t, w)| (t, crossover * w / z)));
            }
            let mut acc = 0.0;
            for (_, p) in out.iter_mut() {
                acc += *p;
                *p = acc;
            }
            out
        };
        let start = (0..n_blocks).map(|b| successors(block_of(b), rng)).collect();
        let table = (c0..c1).map(|t| successors(block_of(token_block(t)), rng)).collect();
        Grammar {
            start,
            table,
            first_content: c0,
        }
    }

    /// Convex mix of two cumulative successor lists.
    fn mix(a: &[(u32, f64)], wa: f64, b: &[(u32, f64)], wb: f64) -> Vec<(u32, f64)> {
        let probs = |c: &[(u32, f64)], w: f64| -> Vec<(u32, f64)> {
            let total = c.last().map(|x| x.1).unwrap_or(1.0);
            let mut prev = 0.0;
            c.iter()
                .map(|&(t, cum)| {
                    let p = (cum - prev) / total;
                    prev = cum;
                    (t, w * p)
                })
                .collect()
        };
        let mut out = probs(a, wa);
        out.extend(probs(b, wb));
        let mut acc = 0.0;
        for (_, p) in out.iter_mut() {
            acc += *p;
            *p = acc;
        }
        out
    }

    fn pick(choices: &[(u32, f64)], u: f64) -> u32 {
        let total = choices.last().map(|c| c.1).unwrap_or(1.0);
        choices
            .iter()
            .find(|(_, c)| u * total < *c)
            .unwrap_or_else(|| choices.last().expect("non-empty successor list"))
            .0
    }

    fn sample(&self, marker_index: usize, marker: u32, len: usize, rng: &mut impl Rng) -> Vec<u32> {
        let mut seq = Vec::with_capacity(len);
        seq.push(marker);
        let mut cur = Self::pick(&self.start[marker_index], rng.random());
        seq.push(cur);
        while seq.len() < len {
            cur = Self::pick(&self.table[(cur - self.first_content) as usize], rng.random());
            seq.push(cur);
        }
        seq
    }
}

/// Generates `(retain_set, forget_set)`. Ids are unique across both sets.
pub fn gen_corpus(spec: &CorpusSpec) -> Result<(Vec<Example>, Vec<Example>)> {
    let layout = spec.layout()?;
    if spec.min_len < 2 || spec.min_len > spec.seq_len {
        return Err(Error::InvalidSpec("need 2 <= min-len <= seq-len".into()));
    }
    if !(0.0..1.0).contains(&spec.crossover) {
        return Err(Error::InvalidSpec("crossover must lie in [0, 1)".into()));
    }
    if !(spec.crossover_return > 0.0 && spec.crossover_return <= 1.0) {
        return Err(Error::InvalidSpec("crossover-return must lie in (0, 1]".into()));
    }
    let root = RngState::new(spec.seed, 0);
    let mut grammar_rng = root.fork(1).rng();
    let mut retain = Grammar::build(
        spec.retain_grammar,
        &layout,
        Domain::Retain,
        spec.crossover,
        spec.crossover_tilt,
        false,
        &mut grammar_rng,
    );
    let forget = Grammar::build(
        spec.forget_grammar,
        &layout,
        Domain::Forget,
        0.0,
        0.0,
        spec.topic_blocks,
        &mut grammar_rng,
    );
    if spec.crossover_return < 1.0 {
        let (f0, f1) = layout.forget_content;
        for t in f0..f1 {
            let k = (t - retain.first_content) as usize;
            retain.table[k] = Grammar::mix(
                &forget.table[k],
                1.0 - spec.crossover_return,
                &retain.table[k],
                spec.crossover_return,
            );
        }
    }

    let mut rng = root.fork(2).rng();
    let mut make = |domain: Domain, grammar: &Grammar, count: usize, first_id: u64| -> Vec<Example> {
        let (m0, m1) = layout.markers(domain);
        (0..count)
            .map(|i| {
                let mi = rng.random_range(0..(m1 - m0) as usize);
                let len = rng.random_range(spec.min_len..=spec.seq_len);
                Example {
                    id: first_id + i as u64,
                    domain,
                    tokens: grammar.sample(mi, m0 + mi as u32, len, &mut rng),
                }
            })
            .collect()
    };
    let retain_set = make(Domain::Retain, &retain, spec.n_retain, 0);
    let forget_set = make(Domain::Forget, &forget, spec.n_forget, spec.n_retain as u64);
    Ok((retain_set, forget_set))
}

/// Marker tokens that actually occur in a set of examples.
pub fn marker_tokens(examples: &[Example], layout: &TokenLayout) -> BTreeSet<u32> {
    let is_marker = |t: u32| t < layout.forget_markers.1;
    examples
        .iter()
        .flat_map(|e| e.tokens.iter().copied().filter(|&t| is_marker(t)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionCounts {
    pub curv_forget: usize,
    pub forget_eval: usize,
    pub retain_1: usize,
    pub retain_2: usize,
    pub retain_test: usize,
    /// Size of the batches the curvature subsets are cut into.
    pub batch_size: usize,
}

impl Default for PartitionCounts {
    fn default() -> Self {
        Self {
            curv_forget: 256,
            forget_eval: 50,
            retain_1: 192,
            retain_2: 192,
            retain_test: 200,
            batch_size: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Part {
    CurvForget,
    ForgetEval,
    Retain1,
    Retain2,
    RetainTest,
}

impl Part {
    pub const ALL: [Part; 5] = [
        Part::CurvForget,
        Part::ForgetEval,
        Part::Retain1,
        Part::Retain2,
        Part::RetainTest,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Part::CurvForget => "curv-forget",
            Part::ForgetEval => "forget-eval",
            Part::Retain1 => "retain-1",
            Part::Retain2 => "retain-2",
            Part::RetainTest => "retain-test",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Part> {
        Part::ALL.into_iter().find(|p| p.tag() == tag)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataPartition {
    pub curv_forget: Vec<Example>,
    pub forget_eval: Vec<Example>,
    pub retain_1: Vec<Example>,
    pub retain_2: Vec<Example>,
    pub retain_test: Vec<Example>,
    pub batch_size: usize,
}

impl DataPartition {
    pub fn part(&self, part: Part) -> &[Example] {
        match part {
            Part::CurvForget => &self.curv_forget,
            Part::ForgetEval => &self.forget_eval,
            Part::Retain1 => &self.retain_1,
            Part::Retain2 => &self.retain_2,
            Part::RetainTest => &self.retain_test,
        }
    }

    /// Consecutive batches of `batch_size` (the last one may be short).
    pub fn batches(&self, part: Part) -> Vec<Batch> {
        to_batches(self.part(part), self.batch_size)
    }

    /// The whole part as one batch.
    pub fn whole(&self, part: Part) -> Result<Batch> {
        to_batch(self.part(part))
    }

    /// Retain data available for fine-tuning and the retain budget:
    /// retain-1 followed by retain-2.
    pub fn retain_train(&self) -> Result<Batch> {
        to_batch(self.retain_1.iter().chain(&self.retain_2).cloned().collect::<Vec<_>>().as_slice())
    }
}

pub fn to_batch(examples: &[Example]) -> Result<Batch> {
    Batch::new(examples.iter().map(|e| e.tokens.clone()).collect())
}

pub fn to_batches(examples: &[Example], size: usize) -> Vec<Batch> {
    examples
        .chunks(size.max(1))
        .map(|c| to_batch(c).expect("chunks are non-empty"))
        .collect()
}

/// Seeded split of the two sets into the five disjoint parts.
pub fn partition(
    retain_set: &[Example],
    forget_set: &[Example],
    counts: &PartitionCounts,
    rng: RngState,
) -> Result<DataPartition> {
    let need_forget = counts.curv_forget + counts.forget_eval;
    if forget_set.len() < need_forget {
        return Err(Error::InsufficientData {
            part: "forget-set (curv-forget + forget-eval)".into(),
            need: need_forget,
            have: forget_set.len(),
        });
    }
    let need_retain = counts.retain_1 + counts.retain_2 + counts.retain_test;
    if retain_set.len() < need_retain {
        return Err(Error::InsufficientData {
            part: "retain-set (retain-1 + retain-2 + retain-test)".into(),
            need: need_retain,
            have: retain_set.len(),
        });
    }
    if counts.batch_size == 0 {
        return Err(Error::InvalidSpec("batch-size must be positive".into()));
    }
    let mut forget = forget_set.to_vec();
    let mut retain = retain_set.to_vec();
    let mut rng = rng.rng();
    forget.shuffle(&mut rng);
    retain.shuffle(&mut rng);
    let mut f = forget.into_iter();
    let mut r = retain.into_iter();
    Ok(DataPartition {
        curv_forget: f.by_ref().take(counts.curv_forget).collect(),
        forget_eval: f.by_ref().take(counts.forget_eval).collect(),
        retain_1: r.by_ref().take(counts.retain_1).collect(),
        retain_2: r.by_ref().take(counts.retain_2).collect(),
        retain_test: r.by_ref().take(counts.retain_test).collect(),
        batch_size: counts.batch_size,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct CorpusHeader {
    schema: String,
    version: u32,
    config_hash: String,
    batch_size: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CorpusRecord {
    id: u64,
    domain: Domain,
    part: String,
    tokens: Vec<u32>,
}

/// Writes a partition as line-delimited JSON: one header line, then one
/// record per example in part order.
pub fn write_partition(path: &Path, parts: &DataPartition, config_hash: &str) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(partition_to_jsonl(parts, config_hash).as_bytes())
        .map_err(|e| Error::io(path, e))
}

/// Header line, then one record per example in part order.
pub fn partition_to_jsonl(parts: &DataPartition, config_hash: &str) -> String {
    let mut out = Vec::new();
    let header = CorpusHeader {
        schema: CORPUS_SCHEMA.into(),
        version: CORPUS_SCHEMA_VERSION,
        config_hash: config_hash.into(),
        batch_size: parts.batch_size,
    };
    serde_json::to_writer(&mut out, &header).expect("header serializes");
    out.push(b'\n');
    for part in Part::ALL {
        for e in parts.part(part) {
            let rec = CorpusRecord {
                id: e.id,
                domain: e.domain,
                part: part.tag().into(),
                tokens: e.tokens.clone(),
            };
            serde_json::to_writer(&mut out, &rec).expect("record serializes");
            out.push(b'\n');
        }
    }
    String::from_utf8(out).expect("json is utf-8")
}

pub fn read_partition(path: &Path) -> Result<DataPartition> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = std::io::BufReader::new(file).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::format(path, "empty corpus file"))?
        .map_err(|e| Error::io(path, e))?;
    let header: CorpusHeader =
        serde_json::from_str(&header_line).map_err(|e| Error::format(path, format!("header: {e}")))?;
    if header.schema != CORPUS_SCHEMA || header.version != CORPUS_SCHEMA_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported schema {} v{}", header.schema, header.version),
        ));
    }
    let mut parts = DataPartition {
        curv_forget: vec![],
        forget_eval: vec![],
        retain_1: vec![],
        retain_2: vec![],
        retain_test: vec![],
        batch_size: header.batch_size,
    };
    for (n, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CorpusRecord =
            serde_json::from_str(&line).map_err(|e| Error::format(path, format!("line {}: {e}", n + 2)))?;
        let part = Part::from_tag(&rec.part)
            .ok_or_else(|| Error::format(path, format!("line {}: unknown part {}", n + 2, rec.part)))?;
        let ex = Example {
            id: rec.id,
            domain: rec.domain,
            tokens: rec.tokens,
        };
        match part {
            Part::CurvForget => parts.curv_forget.push(ex),
            Part::ForgetEval => parts.forget_eval.push(ex),
            Part::Retain1 => parts.retain_1.push(ex),
            Part::Retain2 => parts.retain_2.push(ex),
            Part::RetainTest => parts.retain_test.push(ex),
        }
    }
    Ok(parts)
}
