//! Seed-deterministic synthetic tasks that exercise each reformulation.
//!
//! * `lookup_qa`: source `k1 : v1 ; k2 : v2 ; ...`, auxiliary `what is k2 ?`, answer `v2`.
//! * `cue_classification`: source `positive or negative?`, auxiliary is filler
//!   words plus one cue word that determines the label.
//! * `overlap_regression`: source is sentence A followed by buckets
//!   `0.0 0.25 0.5 0.75 1.0`; auxiliary is sentence B, which keeps a random
//!   subset of A's words in place. The value is the fraction of A's words kept.

use std::collections::HashSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::metrics::Metric;
use crate::reformulation::{classify_to_span, qa_to_span, regress_to_span, AnswerSchema, BucketSpec, LabelSet, SpanExample};
use crate::tokenizer::char_len;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    LookupQa,
    CueClassification,
    OverlapRegression,
}

impl std::str::FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lookup_qa" => Ok(Self::LookupQa),
            "cue_classification" => Ok(Self::CueClassification),
            "overlap_regression" => Ok(Self::OverlapRegression),
            other => Err(Error::Config(format!("unknown synthetic task {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthOptions {
    pub kind: SynthKind,
    pub train_size: usize,
    pub dev_size: usize,
    pub seed: u64,
    /// Size of the synthetic word pool.
    pub vocab_size: usize,
    /// Key/value pairs per lookup example.
    pub pairs: usize,
    /// Distinct lookup keys; the remaining pool words are values.
    pub key_count: usize,
    /// Words per generated sentence.
    pub sentence_len: usize,
    /// Cue words per class for cue classification.
    pub cues_per_class: usize,
}

impl SynthOptions {
    pub fn new(kind: SynthKind, n: usize, seed: u64, vocab_size: usize) -> Self {
        Self {
            kind,
            train_size: n,
            dev_size: (n / 4).max(1),
            seed,
            vocab_size,
            pairs: 3,
            key_count: vocab_size / 2,
            sentence_len: 4,
            cues_per_class: 3,
        }
    }
}

/// Train/dev splits plus the schema and metric needed to score them.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSuite {
    pub train: Vec<SpanExample>,
    pub dev: Vec<SpanExample>,
    pub schema: AnswerSchema,
    pub metric: Metric,
}

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

/// `size` distinct lowercase two-syllable words, identical for every caller.
pub fn word_pool(size: usize) -> Vec<String> {
    let syllables: Vec<String> = CONSONANTS
        .iter()
        .flat_map(|&c| VOWELS.iter().map(move |&v| format!("{}{}", c as char, v as char)))
        .collect();
    let mut words: Vec<String> = syllables
        .iter()
        .flat_map(|a| syllables.iter().map(move |b| format!("{a}{b}")))
        .collect();
    words.shuffle(&mut ChaCha8Rng::seed_from_u64(0x5eed));
    words.truncate(size);
    words
}

pub fn generate_synthetic_suite(kind: SynthKind, n: usize, seed: u64, vocab_size: usize) -> Result<SyntheticSuite> {
    generate(&SynthOptions::new(kind, n, seed, vocab_size))
}

pub fn cue_labels() -> LabelSet {
    LabelSet::new(["positive", "negative"]).expect("valid")
}

pub fn overlap_buckets(sentence_len: usize) -> Result<BucketSpec> {
    BucketSpec::new(0.0, 1.0, sentence_len + 1)
}

pub fn generate(opts: &SynthOptions) -> Result<SyntheticSuite> {
    if opts.train_size == 0 {
        return Err(Error::Config("synthetic suite needs n >= 1".into()));
    }
    let pool = word_pool(opts.vocab_size);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let (sampler, schema, metric): (Box<dyn Fn(&mut ChaCha8Rng) -> Result<SpanExample>>, _, _) = match opts.kind {
        SynthKind::LookupQa => {
            if opts.pairs < 1 || opts.key_count < opts.pairs || pool.len() <= opts.key_count {
                return Err(Error::Config(format!(
                    "lookup_qa with {} pairs and {} keys needs pairs <= keys < pool size {}",
                    opts.pairs,
                    opts.key_count,
                    pool.len()
                )));
            }
            let keys = pool[..opts.key_count].to_vec();
            let values = pool[opts.key_count..].to_vec();
            let pairs = opts.pairs;
            (
                Box::new(move |rng| lookup_example(rng, &keys, &values, pairs)),
                AnswerSchema::Span,
                Metric::ExactMatch,
            )
        }
        SynthKind::CueClassification => {
            let cues = opts.cues_per_class;
            if cues < 1 || pool.len() < 2 * cues + 1 {
                return Err(Error::Config("pool too small for cue classification".into()));
            }
            let positive = pool[..cues].to_vec();
            let negative = pool[cues..2 * cues].to_vec();
            let filler = pool[2 * cues..].to_vec();
            let len = opts.sentence_len.max(1);
            let labels = cue_labels();
            let l2 = labels.clone();
            (
                Box::new(move |rng| cue_example(rng, &positive, &negative, &filler, len, &l2)),
                AnswerSchema::Labels(labels),
                Metric::Accuracy,
            )
        }
        SynthKind::OverlapRegression => {
            let len = opts.sentence_len.max(1);
            if pool.len() < 2 * len {
                return Err(Error::Config("pool too small for overlap regression".into()));
            }
            let spec = overlap_buckets(len)?;
            let s2 = spec.clone();
            let pool = pool.clone();
            (
                Box::new(move |rng| overlap_example(rng, &pool, len, &s2)),
                AnswerSchema::Buckets(spec),
                Metric::PearsonSpearmanAvg,
            )
        }
    };

    let mut seen = HashSet::new();
    let mut draw = |count: usize, rng: &mut ChaCha8Rng| -> Result<Vec<SpanExample>> {
        let mut out = Vec::with_capacity(count);
        let mut attempts = 0;
        while out.len() < count {
            attempts += 1;
            if attempts > 100 * count + 1000 {
                return Err(Error::Config(format!(
                    "could only draw {} distinct examples of {count}; enlarge vocab_size",
                    out.len()
                )));
            }
            let ex = sampler(rng)?;
            if seen.insert((ex.source_text.clone(), ex.auxiliary_text.clone())) {
                out.push(ex);
            }
        }
        Ok(out)
    };
    let train = draw(opts.train_size, &mut rng)?;
    let dev = draw(opts.dev_size, &mut rng)?;
    Ok(SyntheticSuite {
        train,
        dev,
        schema,
        metric,
    })
}

fn lookup_example(rng: &mut ChaCha8Rng, keys: &[String], values: &[String], pairs: usize) -> Result<SpanExample> {
    let chosen_keys: Vec<&String> = keys.choose_multiple(rng, pairs).collect();
    let chosen_values: Vec<&String> = (0..pairs).map(|_| values.choose(rng).expect("non-empty")).collect();
    let asked = rng.random_range(0..pairs);
    let mut source = String::new();
    let mut answer = 0..0;
    for (i, (k, v)) in chosen_keys.iter().zip(&chosen_values).enumerate() {
        if i > 0 {
            source.push_str(" ; ");
        }
        source.push_str(k);
        source.push_str(" : ");
        if i == asked {
            let start = char_len(&source);
            answer = start..start + char_len(v);
        }
        source.push_str(v);
    }
    let question = format!("what is {} ?", chosen_keys[asked]);
    qa_to_span(&source, &question, Some(answer), false)
}

fn cue_example(
    rng: &mut ChaCha8Rng,
    positive: &[String],
    negative: &[String],
    filler: &[String],
    len: usize,
    labels: &LabelSet,
) -> Result<SpanExample> {
    let label = rng.random_range(0..2);
    let cue = if label == 0 { positive } else { negative }
        .choose(rng)
        .expect("non-empty");
    let mut words: Vec<&String> = (0..len).map(|_| filler.choose(rng).expect("non-empty")).collect();
    let at = rng.random_range(0..=len);
    words.insert(at, cue);
    let sentence = words.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(" ");
    classify_to_span(&sentence, None, labels, label)
}

fn overlap_example(rng: &mut ChaCha8Rng, pool: &[String], len: usize, spec: &BucketSpec) -> Result<SpanExample> {
    let a: Vec<&String> = pool.choose_multiple(rng, len).collect();
    let others: Vec<&String> = pool.iter().filter(|w| !a.contains(w)).collect();
    let kept = rng.random_range(0..=len);
    let mut positions: Vec<usize> = (0..len).collect();
    positions.shuffle(rng);
    let keep: HashSet<usize> = positions[..kept].iter().copied().collect();
    let b: Vec<&String> = (0..len)
        .map(|i| if keep.contains(&i) { a[i] } else { *others.choose(rng).expect("non-empty") })
        .collect();
    let join = |ws: &[&String]| ws.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(" ");
    let value = kept as f64 / len as f64;
    regress_to_span(&join(&a), Some(&join(&b)), spec, value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reformulation::{span_to_label, span_to_value, TaskKind};
    use crate::tokenizer::{align_char_span, char_slice, wordpiece_tokenize, Vocabulary};

    #[test]
    fn pool_is_distinct_and_stable() {
        let pool = word_pool(64);
        assert_eq!(pool.len(), 64);
        assert_eq!(pool.iter().collect::<HashSet<_>>().len(), 64);
        assert_eq!(pool, word_pool(64));
        assert_eq!(&word_pool(100)[..64], &pool[..]);
    }

    #[test]
    fn lookup_two_pairs() {
        let mut opts = SynthOptions::new(SynthKind::LookupQa, 20, 1, 64);
        opts.pairs = 2;
        let suite = generate(&opts).unwrap();
        for ex in suite.train.iter().chain(&suite.dev) {
            assert_eq!(ex.task_kind, TaskKind::Qa);
            let gold = ex.gold_text();
            assert_eq!(gold.split_whitespace().count(), 1);
            let key = ex.auxiliary_text.split_whitespace().nth(2).unwrap();
            assert!(ex.source_text.contains(&format!("{key} : {gold}")));
        }
    }

    #[test]
    fn cue_labels_round_trip() {
        let suite = generate_synthetic_suite(SynthKind::CueClassification, 50, 2, 64).unwrap();
        let AnswerSchema::Labels(labels) = &suite.schema else { panic!() };
        for ex in &suite.train {
            assert_eq!(span_to_label(ex.gold_text(), labels), (ex.gold_label.unwrap(), true));
        }
    }

    #[test]
    fn overlap_values_recoverable() {
        let suite = generate_synthetic_suite(SynthKind::OverlapRegression, 50, 3, 64).unwrap();
        let AnswerSchema::Buckets(spec) = &suite.schema else { panic!() };
        for ex in &suite.train {
            let (v, valid) = span_to_value(ex.gold_text(), spec);
            assert!(valid);
            assert_eq!(v, ex.gold_value.unwrap());
        }
    }

    #[test]
    fn deterministic_and_disjoint() {
        for kind in [SynthKind::LookupQa, SynthKind::CueClassification, SynthKind::OverlapRegression] {
            let a = generate_synthetic_suite(kind, 200, 7, 64).unwrap();
            let b = generate_synthetic_suite(kind, 200, 7, 64).unwrap();
            assert_eq!(a, b);
            assert_eq!((a.train.len(), a.dev.len()), (200, 50));
            let train: HashSet<_> = a.train.iter().map(|e| (&e.source_text, &e.auxiliary_text)).collect();
            assert!(a.dev.iter().all(|e| !train.contains(&(&e.source_text, &e.auxiliary_text))));
            assert_ne!(a, generate_synthetic_suite(kind, 200, 8, 64).unwrap());
        }
    }

    #[test]
    fn gold_spans_survive_tokenization() {
        for kind in [SynthKind::LookupQa, SynthKind::CueClassification, SynthKind::OverlapRegression] {
            let suite = generate_synthetic_suite(kind, 100, 4, 64).unwrap();
            let vocab = Vocabulary::build(
                suite.train.iter().flat_map(|e| [e.source_text.as_str(), e.auxiliary_text.as_str()]),
                1000,
                true,
            );
            for ex in &suite.train {
                let seq = wordpiece_tokenize(&ex.source_text, &vocab);
                let (a, b) = align_char_span(ex.gold_char_span.clone(), &seq).unwrap();
                assert_eq!(char_slice(&ex.source_text, seq.char_span(a, b)), ex.gold_text());
            }
        }
    }

    #[test]
    fn rejects_bad_options() {
        assert!(generate_synthetic_suite(SynthKind::LookupQa, 0, 0, 64).is_err());
        assert!(generate_synthetic_suite(SynthKind::LookupQa, 10, 0, 4).is_err());
    }
}
