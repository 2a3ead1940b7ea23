//! Deterministic generator for a templated relation-lookup task.
//!
//! Every instance asks `what is the <relation> of <subject>` and exactly one
//! paragraph states `the <relation> of <subject> is <answer>`. Distractor
//! paragraphs carry near-miss facts about other subjects with the same
//! relation.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Document, Instance, Question, Split};
use crate::{Error, Result};

const FUNCTION_WORDS: [&str; 4] = ["the", "of", "is", "what"];
const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub num_instances: usize,
    /// The last `dev_instances` instances are tagged as the dev split.
    pub dev_instances: usize,
    pub docs_per_instance: usize,
    pub paragraphs_per_doc: usize,
    /// Inclusive token-length bounds of one paragraph.
    pub paragraph_len_range: (usize, usize),
    /// Number of distinct words the generator may emit.
    pub vocab_size: usize,
    /// Probability that a non-gold paragraph carries a near-miss fact.
    pub distractor_rate: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            seed: 7,
            num_instances: 2300,
            dev_instances: 300,
            docs_per_instance: 3,
            paragraphs_per_doc: 4,
            paragraph_len_range: (10, 20),
            vocab_size: 512,
            distractor_rate: 0.5,
        }
    }
}

/// Maps an index to a pronounceable consonant-vowel word that never
/// collides with the function words.
fn pool_word(mut idx: usize) -> String {
    let syllables = CONSONANTS.len() * VOWELS.len();
    let mut word = String::new();
    // two syllables minimum
    for _ in 0..2 {
        let s = idx % syllables;
        idx /= syllables;
        word.push(CONSONANTS[s / VOWELS.len()] as char);
        word.push(VOWELS[s % VOWELS.len()] as char);
    }
    while idx > 0 {
        let s = (idx - 1) % syllables;
        idx = (idx - 1) / syllables;
        word.push(CONSONANTS[s / VOWELS.len()] as char);
        word.push(VOWELS[s % VOWELS.len()] as char);
    }
    word
}

struct Pools {
    relations: Vec<String>,
    subjects: Vec<String>,
    answers: Vec<String>,
    fillers: Vec<String>,
}

impl Pools {
    fn new(vocab_size: usize) -> Result<Self> {
        let content = vocab_size.saturating_sub(FUNCTION_WORDS.len());
        // near misses need a second subject and three spare answer words
        let n_subj = (content / 64).max(2);
        let n_ans = (content / 6).max(8);
        let n_fill = (content / 8).max(4);
        let n_rel = content.saturating_sub(n_subj + n_ans + n_fill);
        if n_rel == 0 {
            return Err(Error::Config(format!(
                "vocab_size {vocab_size} is too small for the synthetic generator"
            )));
        }
        let mut words = (0..content).map(pool_word);
        let mut take = |n: usize| words.by_ref().take(n).collect::<Vec<_>>();
        Ok(Pools {
            relations: take(n_rel),
            subjects: take(n_subj),
            answers: take(n_ans),
            fillers: take(n_fill),
        })
    }
}

fn pick_answer(rng: &mut ChaCha8Rng, pool: &[String], avoid: &[&str]) -> Vec<String> {
    let len = rng.random_range(1..=3);
    let allowed: Vec<&String> = pool.iter().filter(|w| !avoid.contains(&w.as_str())).collect();
    allowed
        .choose_multiple(rng, len)
        .map(|w| (*w).clone())
        .collect()
}

fn fact(relation: &str, subject: &str, answer: &[String]) -> Vec<String> {
    let mut s: Vec<String> = ["the", relation, "of", subject, "is"]
        .iter()
        .map(|w| w.to_string())
        .collect();
    s.extend(answer.iter().cloned());
    s
}

fn render(sentences: &[Vec<String>]) -> String {
    sentences
        .iter()
        .map(|s| format!("{}.", s.join(" ")))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<Instance>> {
    let (min_len, max_len) = spec.paragraph_len_range;
    if spec.docs_per_instance == 0 || spec.paragraphs_per_doc == 0 {
        return Err(Error::Config("document and paragraph counts must be positive".into()));
    }
    if min_len == 0 || min_len > max_len {
        return Err(Error::Config(format!(
            "invalid paragraph length range ({min_len}, {max_len})"
        )));
    }
    if !(0.0..=1.0).contains(&spec.distractor_rate) {
        return Err(Error::Config("distractor_rate must lie in [0, 1]".into()));
    }
    if spec.dev_instances > spec.num_instances {
        return Err(Error::Config("dev_instances exceeds num_instances".into()));
    }
    let pools = Pools::new(spec.vocab_size)?;
    let capacity = pools.subjects.len() * pools.relations.len();
    if spec.num_instances > capacity {
        return Err(Error::Config(format!(
            "vocab_size {} yields only {capacity} unique (subject, relation) pairs, {} requested",
            spec.vocab_size, spec.num_instances
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut pairs: Vec<(usize, usize)> = (0..pools.subjects.len())
        .flat_map(|s| (0..pools.relations.len()).map(move |r| (s, r)))
        .collect();
    pairs.shuffle(&mut rng);

    let n_par = spec.docs_per_instance * spec.paragraphs_per_doc;
    let mut out = Vec::with_capacity(spec.num_instances);
    for (idx, &(si, ri)) in pairs.iter().take(spec.num_instances).enumerate() {
        let subject = &pools.subjects[si];
        let relation = &pools.relations[ri];
        let answer = pick_answer(&mut rng, &pools.answers, &[]);
        let avoid: Vec<&str> = answer.iter().map(String::as_str).collect();
        let gold_slot = rng.random_range(0..n_par);

        let mut paragraphs = Vec::with_capacity(n_par);
        for slot in 0..n_par {
            let target = rng.random_range(min_len..=max_len);
            let mut sentences: Vec<Vec<String>> = Vec::new();
            if slot == gold_slot {
                sentences.push(fact(relation, subject, &answer));
            } else if rng.random_bool(spec.distractor_rate) {
                let other = loop {
                    let s = pools.subjects.choose(&mut rng).unwrap();
                    if s != subject {
                        break s;
                    }
                };
                let a = pick_answer(&mut rng, &pools.answers, &avoid);
                sentences.push(fact(relation, other, &a));
            }
            let mut len: usize = sentences.iter().map(Vec::len).sum();
            while len < target {
                let want = rng.random_range(3..=7).min(target - len);
                let filler: Vec<String> = (0..want)
                    .map(|_| pools.fillers.choose(&mut rng).unwrap().clone())
                    .collect();
                len += filler.len();
                sentences.push(filler);
            }
            sentences.shuffle(&mut rng);
            paragraphs.push(render(&sentences));
        }

        let id = format!("syn{}-{idx:05}", spec.seed);
        let documents = paragraphs
            .chunks(spec.paragraphs_per_doc)
            .enumerate()
            .map(|(d, ps)| Document {
                id: format!("{id}-d{d}"),
                paragraphs: ps.to_vec(),
            })
            .collect();
        let split = if idx >= spec.num_instances - spec.dev_instances {
            Split::Dev
        } else {
            Split::Train
        };
        out.push(Instance {
            question: Question {
                id,
                text: format!("what is the {relation} of {subject}?"),
                gold_answers: vec![answer.join(" ")],
            },
            documents,
            split,
        });
    }
    Ok(out)
}
