//! Toy sequence tasks and fixed-shape batching.
//!
//! Every batch is padded to the task's maximum lengths, so attention maps
//! have the same key length in every batch.

use std::collections::BTreeSet;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Architecture, TokenBatch, BOS, EOS, FIRST_SYMBOL, PAD};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Copy,
    Reverse,
    CharLm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Distinct content symbols (copy and reverse); the vocabulary adds the
    /// three reserved ids.
    pub symbols: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub samples: usize,
    /// Plain-text file for `char-lm`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus: Option<PathBuf>,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self { kind: TaskKind::Copy, symbols: 12, min_len: 3, max_len: 8, samples: 1200, corpus: None }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::config("task.min_len", "need 1 <= min_len <= max_len"));
        }
        if self.samples < 10 {
            return Err(Error::config("task.samples", "need at least 10 samples for an 8:1:1 split"));
        }
        match self.kind {
            TaskKind::CharLm if self.corpus.is_none() => {
                Err(Error::config("task.corpus", "char-lm needs a corpus file"))
            }
            TaskKind::Copy | TaskKind::Reverse if self.symbols == 0 => {
                Err(Error::config("task.symbols", "must be positive"))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub vocab: usize,
    pub train: Vec<Example>,
    pub valid: Vec<Example>,
    pub test: Vec<Example>,
    pub max_src: usize,
    pub max_tgt: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl TaskData {
    pub fn split(&self, split: Split) -> &[Example] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    fn from_examples(all: Vec<Example>, vocab: usize) -> Self {
        let n = all.len();
        let n_train = n * 8 / 10;
        let n_valid = n / 10;
        let max_src = all.iter().map(|e| e.src.len()).max().unwrap_or(0);
        let max_tgt = all.iter().map(|e| e.tgt.len()).max().unwrap_or(0);
        let mut it = all.into_iter();
        let train = it.by_ref().take(n_train).collect();
        let valid = it.by_ref().take(n_valid).collect();
        let test = it.collect();
        Self { vocab, train, valid, test, max_src, max_tgt }
    }
}

fn random_sequences(spec: &TaskSpec, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..spec.samples)
        .map(|_| {
            let len = rng.random_range(spec.min_len..=spec.max_len);
            (0..len).map(|_| FIRST_SYMBOL + rng.random_range(0..spec.symbols)).collect()
        })
        .collect()
}

/// Target equals source.
pub fn generate_copy_task(spec: &TaskSpec, seed: u64) -> Result<TaskData> {
    spec.validate()?;
    let all = random_sequences(spec, seed).into_iter().map(|s| Example { tgt: s.clone(), src: s }).collect();
    Ok(TaskData::from_examples(all, spec.symbols + FIRST_SYMBOL))
}

/// Target is the reversed source.
pub fn generate_reverse_task(spec: &TaskSpec, seed: u64) -> Result<TaskData> {
    spec.validate()?;
    let all = random_sequences(spec, seed)
        .into_iter()
        .map(|s| Example { tgt: s.iter().rev().copied().collect(), src: s })
        .collect();
    Ok(TaskData::from_examples(all, spec.symbols + FIRST_SYMBOL))
}

/// Character continuation: a window of the corpus predicts the window that
/// follows it. The vocabulary is the corpus's character set.
pub fn generate_char_lm_task(spec: &TaskSpec, text: &str, seed: u64) -> Result<TaskData> {
    spec.validate()?;
    let chars: Vec<char> = text.chars().collect();
    let alphabet: BTreeSet<char> = chars.iter().copied().collect();
    let alphabet: Vec<char> = alphabet.into_iter().collect();
    if chars.len() < 2 * spec.max_len + 1 {
        return Err(Error::config(
            "task.corpus",
            format!("corpus has {} characters, need at least {}", chars.len(), 2 * spec.max_len + 1),
        ));
    }
    let id = |c: char| FIRST_SYMBOL + alphabet.binary_search(&c).expect("char from corpus");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let all = (0..spec.samples)
        .map(|_| {
            let len = rng.random_range(spec.min_len..=spec.max_len);
            let start = rng.random_range(0..=chars.len() - 2 * len);
            Example {
                src: chars[start..start + len].iter().map(|&c| id(c)).collect(),
                tgt: chars[start + len..start + 2 * len].iter().map(|&c| id(c)).collect(),
            }
        })
        .collect();
    Ok(TaskData::from_examples(all, alphabet.len() + FIRST_SYMBOL))
}

pub fn generate(spec: &TaskSpec, seed: u64) -> Result<TaskData> {
    match spec.kind {
        TaskKind::Copy => generate_copy_task(spec, seed),
        TaskKind::Reverse => generate_reverse_task(spec, seed),
        TaskKind::CharLm => {
            let path = spec.corpus.as_ref().expect("validated");
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            generate_char_lm_task(spec, &text, seed)
        }
    }
}

/// A batch plus its flattened next-token targets `[B·tgt_len]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    pub batch: TokenBatch,
    pub targets: Vec<usize>,
}

/// Batches `examples` in order, or shuffled by `shuffle_seed`.
pub fn make_batches(
    examples: &[Example],
    batch_size: usize,
    architecture: Architecture,
    max_src: usize,
    max_tgt: usize,
    shuffle_seed: Option<u64>,
) -> Vec<LabeledBatch> {
    let mut order: Vec<usize> = (0..examples.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order
        .chunks(batch_size.max(1))
        .map(|chunk| {
            let b = chunk.len();
            match architecture {
                Architecture::EncoderDecoder => {
                    let tgt_len = max_tgt + 1;
                    let mut src = Vec::with_capacity(b * max_src);
                    let mut tgt_in = Vec::with_capacity(b * tgt_len);
                    let mut targets = Vec::with_capacity(b * tgt_len);
                    for &i in chunk {
                        let e = &examples[i];
                        src.extend(e.src.iter().copied().chain(std::iter::repeat(PAD)).take(max_src));
                        tgt_in.extend(
                            std::iter::once(BOS)
                                .chain(e.tgt.iter().copied())
                                .chain(std::iter::repeat(PAD))
                                .take(tgt_len),
                        );
                        targets.extend(
                            e.tgt
                                .iter()
                                .copied()
                                .chain(std::iter::once(EOS))
                                .chain(std::iter::repeat(PAD))
                                .take(tgt_len),
                        );
                    }
                    LabeledBatch { batch: TokenBatch { batch: b, src_len: max_src, tgt_len, src, tgt_in }, targets }
                }
                Architecture::DecoderOnly => {
                    let tgt_len = max_src + max_tgt + 1;
                    let mut tgt_in = Vec::with_capacity(b * tgt_len);
                    let mut targets = Vec::with_capacity(b * tgt_len);
                    for &i in chunk {
                        let e = &examples[i];
                        let seq: Vec<usize> = e.src.iter().chain(&e.tgt).copied().collect();
                        tgt_in.extend(
                            std::iter::once(BOS).chain(seq.iter().copied()).chain(std::iter::repeat(PAD)).take(tgt_len),
                        );
                        targets.extend(
                            seq.iter().copied().chain(std::iter::once(EOS)).chain(std::iter::repeat(PAD)).take(tgt_len),
                        );
                    }
                    LabeledBatch {
                        batch: TokenBatch { batch: b, src_len: 0, tgt_len, src: Vec::new(), tgt_in },
                        targets,
                    }
                }
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic_and_split_8_1_1() {
        let spec = TaskSpec { samples: 100, ..Default::default() };
        let a = generate_copy_task(&spec, 5).unwrap();
        assert_eq!(a, generate_copy_task(&spec, 5).unwrap());
        assert_ne!(a, generate_copy_task(&spec, 6).unwrap());
        assert_eq!((a.train.len(), a.valid.len(), a.test.len()), (80, 10, 10));
        assert!(a.train.iter().all(|e| e.src == e.tgt));
        assert_eq!(a.vocab, 15);
    }

    #[test]
    fn reverse_targets() {
        let d = generate_reverse_task(&TaskSpec::default(), 1).unwrap();
        for e in &d.train {
            let mut r = e.src.clone();
            r.reverse();
            assert_eq!(r, e.tgt);
        }
        let pal = vec![3, 4, 3];
        let rev: Vec<usize> = pal.iter().rev().copied().collect();
        assert_eq!(rev, pal);
    }

    #[test]
    fn batches_have_fixed_shape() {
        let d = generate_copy_task(&TaskSpec::default(), 2).unwrap();
        let bs = make_batches(&d.train, 32, Architecture::EncoderDecoder, d.max_src, d.max_tgt, Some(3));
        let n: usize = bs.iter().map(|b| b.batch.batch).sum();
        assert_eq!(n, d.train.len());
        for b in &bs {
            assert_eq!(b.batch.src_len, d.max_src);
            assert_eq!(b.batch.tgt_len, d.max_tgt + 1);
            assert_eq!(b.targets.len(), b.batch.batch * b.batch.tgt_len);
            for r in 0..b.batch.batch {
                assert_eq!(b.batch.tgt_in[r * b.batch.tgt_len], BOS);
            }
        }
    }

    #[test]
    fn char_lm_windows_continue_the_text() {
        let text = "abcdefghijklmnopqrstuvwxyz".repeat(4);
        let spec =
            TaskSpec { kind: TaskKind::CharLm, corpus: Some("unused".into()), samples: 20, ..Default::default() };
        let d = generate_char_lm_task(&spec, &text, 0).unwrap();
        assert_eq!(d.vocab, 26 + FIRST_SYMBOL);
        for e in &d.train {
            let next = (e.src.last().unwrap() - FIRST_SYMBOL + 1) % 26 + FIRST_SYMBOL;
            assert_eq!(e.tgt[0], next);
        }
    }
}
