//! Seeded English-like text for smoke tests and demos.
//!
//! A small phrase grammar over word classes (determiners, adjectives,
//! nouns, names, pronouns, verbs, adverbs, prepositions, conjunctions)
//! emits one sentence per line. Open classes are filled with pronounceable
//! pseudo-words and sampled with Zipfian frequencies; every sentence has a
//! topic that biases which content words it draws. The lexicon depends only
//! on `lexicon_seed`, so splits generated with different `seed`s share it.

use std::collections::HashSet;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

const ONSETS: &[&str] = &[
    "b", "c", "d", "f", "g", "h", "j", "k", "l", "m", "n", "p", "r", "s", "t", "v", "w", "z",
    "br", "cl", "dr", "fl", "gr", "pl", "pr", "sh", "st", "th", "tr", "ch",
];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ea", "ou", "io"];
const CODAS: &[&str] = &["", "", "", "n", "r", "l", "s", "t", "m", "nd", "st", "ck"];

const DETERMINERS: &[&str] = &["the", "a", "this", "that", "every", "some", "no", "each", "her", "his"];
const PRONOUNS: &[&str] = &["he", "she", "it", "they", "we", "you", "i"];
const PREPOSITIONS: &[&str] = &[
    "in", "on", "with", "from", "to", "under", "over", "near", "behind", "through", "across",
    "beside", "without", "against", "around", "after",
];
const CONJUNCTIONS: &[&str] = &["and", "but", "while", "because", "so", "although"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Stop after at least this many tokens, counting one end-of-line per sentence.
    pub tokens: usize,
    pub seed: u64,
    #[serde(default)]
    pub lexicon_seed: u64,
    /// Number of topics content words are split into.
    pub topics: usize,
    /// Probability that a content word comes from the sentence's topic.
    pub topic_bias: f64,
    /// Zipf exponent inside each word class.
    pub zipf: f64,
    pub nouns: usize,
    pub adjectives: usize,
    pub transitive_verbs: usize,
    pub intransitive_verbs: usize,
    pub adverbs: usize,
    pub names: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            tokens: 100_000,
            seed: 1,
            lexicon_seed: 0,
            topics: 8,
            topic_bias: 0.8,
            zipf: 1.25,
            nouns: 4000,
            adjectives: 1600,
            transitive_verbs: 1200,
            intransitive_verbs: 700,
            adverbs: 500,
            names: 900,
        }
    }
}

/// Zipf-weighted words split into topic buckets.
struct WordClass {
    words: Vec<String>,
    all: WeightedIndex<f64>,
    by_topic: Vec<(Vec<usize>, WeightedIndex<f64>)>,
}

fn zipf_weights(n: usize, s: f64) -> Vec<f64> {
    (1..=n).map(|r| (r as f64).powf(-s)).collect()
}

impl WordClass {
    fn new(words: Vec<String>, topics: usize, s: f64) -> Self {
        let all = WeightedIndex::new(zipf_weights(words.len(), s)).expect("non-empty class");
        let by_topic = (0..topics)
            .map(|topic| {
                let members: Vec<usize> = (topic..words.len()).step_by(topics).collect();
                let weights = WeightedIndex::new(zipf_weights(members.len(), s)).expect("non-empty topic");
                (members, weights)
            })
            .collect();
        WordClass { words, all, by_topic }
    }

    fn fixed(words: &[&str], s: f64) -> Self {
        Self::new(words.iter().map(|w| w.to_string()).collect(), 1, s)
    }

    fn sample<'a>(&'a self, rng: &mut ChaCha8Rng, topic: Option<usize>) -> &'a str {
        let i = match topic {
            Some(t) => {
                let (members, weights) = &self.by_topic[t % self.by_topic.len()];
                members[weights.sample(rng)]
            }
            None => self.all.sample(rng),
        };
        &self.words[i]
    }
}

struct Lexicon {
    det: WordClass,
    pron: WordClass,
    prep: WordClass,
    conj: WordClass,
    noun: WordClass,
    adj: WordClass,
    verb_t: WordClass,
    verb_i: WordClass,
    adv: WordClass,
    name: WordClass,
}

fn pseudo_word(rng: &mut ChaCha8Rng) -> String {
    let syllables = rng.random_range(1..=3);
    let mut w = String::new();
    for _ in 0..syllables {
        w.push_str(ONSETS[rng.random_range(0..ONSETS.len())]);
        w.push_str(VOWELS[rng.random_range(0..VOWELS.len())]);
    }
    w.push_str(CODAS[rng.random_range(0..CODAS.len())]);
    w
}

impl Lexicon {
    fn new(config: &SynthConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.lexicon_seed);
        let mut seen: HashSet<String> = DETERMINERS
            .iter()
            .chain(PRONOUNS)
            .chain(PREPOSITIONS)
            .chain(CONJUNCTIONS)
            .map(|w| w.to_string())
            .collect();
        let mut fresh = |n: usize, suffix: &str| -> Vec<String> {
            let mut out = Vec::with_capacity(n);
            while out.len() < n {
                let w = format!("{}{suffix}", pseudo_word(&mut rng));
                if seen.insert(w.clone()) {
                    out.push(w);
                }
            }
            out
        };
        let topics = config.topics.max(1);
        let s = config.zipf;
        let noun = fresh(config.nouns, "");
        let adj = fresh(config.adjectives, "y");
        let verb_t = fresh(config.transitive_verbs, "es");
        let verb_i = fresh(config.intransitive_verbs, "ed");
        let adv = fresh(config.adverbs, "ly");
        let mut name = fresh(config.names, "");
        for n in &mut name {
            n.replace_range(..1, &n[..1].to_uppercase());
        }
        Lexicon {
            det: WordClass::fixed(DETERMINERS, 1.0),
            pron: WordClass::fixed(PRONOUNS, 0.8),
            prep: WordClass::fixed(PREPOSITIONS, 1.0),
            conj: WordClass::fixed(CONJUNCTIONS, 1.0),
            noun: WordClass::new(noun, topics, s),
            adj: WordClass::new(adj, topics, s),
            verb_t: WordClass::new(verb_t, topics, s),
            verb_i: WordClass::new(verb_i, topics, s),
            adv: WordClass::new(adv, 1, s),
            name: WordClass::new(name, 1, s),
        }
    }
}

struct Sentence<'a> {
    lex: &'a Lexicon,
    rng: &'a mut ChaCha8Rng,
    topic: usize,
    bias: f64,
    words: Vec<&'a str>,
}

impl<'a> Sentence<'a> {
    fn content(&mut self, class: &'a WordClass) {
        let topic = self.rng.random_bool(self.bias).then_some(self.topic);
        let w = class.sample(self.rng, topic);
        self.words.push(w);
    }

    fn closed(&mut self, class: &'a WordClass) {
        let w = class.sample(self.rng, None);
        self.words.push(w);
    }

    fn noun_phrase(&mut self, subject: bool, allow_pp: bool) {
        let roll: f64 = self.rng.random();
        if subject && roll < 0.2 {
            self.closed(&self.lex.pron);
        } else if roll < 0.4 {
            self.closed(&self.lex.name);
        } else {
            self.closed(&self.lex.det);
            if self.rng.random_bool(0.45) {
                self.content(&self.lex.adj);
                if self.rng.random_bool(0.25) {
                    self.content(&self.lex.adj);
                }
            }
            self.content(&self.lex.noun);
            if allow_pp && self.rng.random_bool(0.15) {
                self.prep_phrase();
            }
        }
    }

    fn prep_phrase(&mut self) {
        self.closed(&self.lex.prep);
        self.noun_phrase(false, false);
    }

    fn clause(&mut self) {
        self.noun_phrase(true, true);
        if self.rng.random_bool(0.6) {
            self.content(&self.lex.verb_t);
            self.noun_phrase(false, true);
        } else {
            self.content(&self.lex.verb_i);
            if self.rng.random_bool(0.4) {
                self.closed(&self.lex.adv);
            }
        }
        if self.rng.random_bool(0.3) {
            self.prep_phrase();
        }
    }
}

/// Generates text with one sentence per line.
pub fn generate(config: &SynthConfig) -> String {
    let lex = Lexicon::new(config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut out = String::new();
    let mut tokens = 0;
    while tokens < config.tokens {
        let topic = rng.random_range(0..config.topics.max(1));
        let mut s = Sentence {
            lex: &lex,
            rng: &mut rng,
            topic,
            bias: config.topic_bias,
            words: Vec::new(),
        };
        s.clause();
        if s.rng.random_bool(0.25) {
            s.words.push(",");
            s.closed(&lex.conj);
            s.clause();
        }
        s.words.push(".");
        tokens += s.words.len() + 1;
        out.push_str(&s.words.join(" "));
        out.push('\n');
    }
    out
}
