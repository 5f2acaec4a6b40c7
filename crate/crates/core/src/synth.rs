//! Synthetic bilingual benchmark.
//!
//! Language A is built from templates over invented content words. Language B
//! is A with every content word replaced through a fixed word-level cipher,
//! while function words and punctuation stay shared between the two. A
//! sentence is offensive when it contains words from the offensive lexicon;
//! the covert class wraps a neutral sentence in sarcasm or negation markers.

use crate::datasets::{Instance, LabelSchema, LabeledDataset};
use crate::error::{Error, Result};
use crate::rng;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};
use std::path::Path;

const A_CONSONANTS: &[u8] = b"bdfgklmnprstv";
const B_CONSONANTS: &[u8] = b"chjqwxyz";
const VOWELS: &[u8] = b"aeiou";

/// Words shared verbatim by both languages.
pub const FUNCTION_WORDS: &[&str] = &[
    "the", "a", "is", "are", "and", "this", "that", "so", "very", "my", "your", "we", "they", "i", "you", "what",
    "not", "will", "with", "at", "think", "oh", "sure", "yeah", "right", "wow", "shut", "up", "such", ",", ".", "!",
    "?",
];

const NEUTRAL_TEMPLATES: &[&str] = &[
    "the N is J .",
    "i V the J N .",
    "we V a N and a N .",
    "this N is very J !",
    "you V my N ?",
    "they are J and J .",
    "my N will V your N .",
    "what a J N .",
    "your N is so J .",
    "they V the N with a J N .",
    "i think the N is J .",
    "we will V at the N .",
];

const INSULT_TEMPLATES: &[&str] = &[
    "you are a O N !",
    "shut up , you O !",
    "what a O O .",
    "your N is O and O !",
    "such a O N , you O .",
];

/// (prefix, suffix) wrapped around the body of a neutral sentence.
const COVERT_MARKERS: &[(&str, &str)] = &[
    ("oh sure ,", "."),
    ("", ", yeah right ."),
    ("wow ,", ", not !"),
];

pub const SOURCE_LABELS: [&str; 2] = ["not-offensive", "offensive"];
pub const TARGET3_LABELS: [&str; 3] = ["non-aggressive", "overtly-aggressive", "covertly-aggressive"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    pub nouns: usize,
    pub adjectives: usize,
    pub verbs: usize,
    pub offensive_words: usize,
    /// Number of neutral templates in use (at most 12).
    pub templates: usize,
    /// 2 (offensive / not) or 3 (non / overt / covert aggression) for language B.
    pub target_classes: usize,
    /// Class proportions of the A training set; uniform when absent.
    pub source_balance: Option<Vec<f64>>,
    /// Class proportions of the B sets; uniform when absent.
    pub balance: Option<Vec<f64>>,
    pub pretrain_per_language: usize,
    /// Extra pretraining lines, as a fraction of `pretrain_per_language`,
    /// in which each content word of an A sentence is switched to its B form
    /// with probability one half.
    pub code_mix_fraction: f64,
    pub source_train: usize,
    pub target_train: usize,
    pub target_test: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 1,
            nouns: 40,
            adjectives: 30,
            verbs: 20,
            offensive_words: 16,
            templates: NEUTRAL_TEMPLATES.len(),
            target_classes: 2,
            source_balance: None,
            balance: None,
            pretrain_per_language: 3000,
            code_mix_fraction: 0.2,
            source_train: 2000,
            target_train: 1200,
            target_test: 600,
        }
    }
}

impl SynthSpec {
    fn balance_for(given: &Option<Vec<f64>>, classes: usize, field: &str) -> Result<Vec<f64>> {
        let b = given.clone().unwrap_or_else(|| vec![1.0 / classes as f64; classes]);
        if b.len() != classes {
            return Err(Error::Config(format!("{field} has {} entries, expected {classes}", b.len())));
        }
        if b.iter().any(|&p| !(0.0..=1.0).contains(&p)) || (b.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("{field} entries must lie in [0, 1] and sum to 1")));
        }
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=3).contains(&self.target_classes) {
            return Err(Error::Config(format!("target_classes must be 2 or 3, got {}", self.target_classes)));
        }
        Self::balance_for(&self.source_balance, 2, "source_balance")?;
        Self::balance_for(&self.balance, self.target_classes, "balance")?;
        if self.templates == 0 || self.templates > NEUTRAL_TEMPLATES.len() {
            return Err(Error::Config(format!(
                "templates must be between 1 and {}",
                NEUTRAL_TEMPLATES.len()
            )));
        }
        for (name, v) in [
            ("pretrain_per_language", self.pretrain_per_language),
            ("source_train", self.source_train),
            ("target_train", self.target_train),
            ("target_test", self.target_test),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        // the richest templates use two distinct words of one kind
        for (name, v) in [
            ("nouns", self.nouns),
            ("adjectives", self.adjectives),
            ("verbs", self.verbs),
            ("offensive_words", self.offensive_words),
        ] {
            if v < 2 {
                return Err(Error::Config(format!("lexicon {name} has {v} words; templates need at least 2")));
            }
        }
        if !(0.0..=10.0).contains(&self.code_mix_fraction) {
            return Err(Error::Config("code_mix_fraction must lie in [0, 10]".to_string()));
        }
        Ok(())
    }
}

/// Word-level bijection between the content words of A and B.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cipher {
    forward: BTreeMap<String, String>,
    backward: BTreeMap<String, String>,
}

impl Cipher {
    /// B form of an A word; words outside the lexicon pass through.
    pub fn encode<'a>(&'a self, word: &'a str) -> &'a str {
        self.forward.get(word).map(String::as_str).unwrap_or(word)
    }

    pub fn decode<'a>(&'a self, word: &'a str) -> &'a str {
        self.backward.get(word).map(String::as_str).unwrap_or(word)
    }

    pub fn encode_sentence(&self, s: &str) -> String {
        s.split(' ').map(|w| self.encode(w)).collect::<Vec<_>>().join(" ")
    }

    pub fn decode_sentence(&self, s: &str) -> String {
        s.split(' ').map(|w| self.decode(w)).collect::<Vec<_>>().join(" ")
    }

    pub fn pairs(&self) -> impl Iterator<Item = (&str, &str)> {
        self.forward.iter().map(|(a, b)| (a.as_str(), b.as_str()))
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }
}

#[derive(Debug, Clone)]
struct Lexicon {
    nouns: Vec<String>,
    adjectives: Vec<String>,
    verbs: Vec<String>,
    offensive: Vec<String>,
}

fn pseudo_word(rng: &mut ChaCha8Rng, consonants: &[u8]) -> String {
    let syllables = rng.gen_range(2..=3);
    let mut w = String::new();
    for _ in 0..syllables {
        w.push(consonants[rng.gen_range(0..consonants.len())] as char);
        w.push(VOWELS[rng.gen_range(0..VOWELS.len())] as char);
    }
    w
}

fn distinct_words(rng: &mut ChaCha8Rng, consonants: &[u8], n: usize, taken: &mut HashSet<String>) -> Vec<String> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let w = pseudo_word(rng, consonants);
        if taken.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

fn build_lexicon(spec: &SynthSpec) -> (Lexicon, Cipher) {
    let mut taken: HashSet<String> = FUNCTION_WORDS.iter().map(|w| w.to_string()).collect();
    let mut rng = rng::seeded(spec.seed, 40);
    let lex = Lexicon {
        nouns: distinct_words(&mut rng, A_CONSONANTS, spec.nouns, &mut taken),
        adjectives: distinct_words(&mut rng, A_CONSONANTS, spec.adjectives, &mut taken),
        verbs: distinct_words(&mut rng, A_CONSONANTS, spec.verbs, &mut taken),
        offensive: distinct_words(&mut rng, A_CONSONANTS, spec.offensive_words, &mut taken),
    };
    let all: Vec<&String> = lex
        .nouns
        .iter()
        .chain(&lex.adjectives)
        .chain(&lex.verbs)
        .chain(&lex.offensive)
        .collect();
    let mut rng = rng::seeded(spec.seed, 41);
    let b_words = distinct_words(&mut rng, B_CONSONANTS, all.len(), &mut taken);
    let forward: BTreeMap<String, String> = all.iter().map(|w| (*w).clone()).zip(b_words).collect();
    let backward = forward.iter().map(|(a, b)| (b.clone(), a.clone())).collect();
    (lex, Cipher { forward, backward })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Neutral,
    Overt,
    Covert,
}

struct Generator<'a> {
    lex: &'a Lexicon,
    templates: usize,
}

impl Generator<'_> {
    /// Fills slot letters (N, J, V, O) with words, distinct per slot kind.
    fn fill(&self, template: &str, rng: &mut ChaCha8Rng, offensive_slots: &[usize]) -> Vec<String> {
        let mut used: HashSet<&str> = HashSet::new();
        let mut out = Vec::new();
        let mut content_index = 0;
        for tok in template.split(' ') {
            let pool = match tok {
                "N" | "J" => {
                    let hit = offensive_slots.contains(&content_index);
                    content_index += 1;
                    if hit {
                        &self.lex.offensive
                    } else if tok == "N" {
                        &self.lex.nouns
                    } else {
                        &self.lex.adjectives
                    }
                }
                "V" => &self.lex.verbs,
                "O" => &self.lex.offensive,
                word => {
                    out.push(word.to_string());
                    continue;
                }
            };
            let word = loop {
                let w = pool[rng.gen_range(0..pool.len())].as_str();
                if used.insert(w) {
                    break w;
                }
            };
            out.push(word.to_string());
        }
        out
    }

    fn neutral_template(&self, rng: &mut ChaCha8Rng) -> &'static str {
        NEUTRAL_TEMPLATES[rng.gen_range(0..self.templates)]
    }

    fn sentence(&self, kind: Kind, rng: &mut ChaCha8Rng) -> String {
        let words = match kind {
            Kind::Neutral => self.fill(self.neutral_template(rng), rng, &[]),
            Kind::Overt => {
                if rng.gen_bool(0.5) {
                    let t = INSULT_TEMPLATES[rng.gen_range(0..INSULT_TEMPLATES.len())];
                    self.fill(t, rng, &[])
                } else {
                    let t = self.neutral_template(rng);
                    let slots = t.split(' ').filter(|w| matches!(*w, "N" | "J")).count();
                    let k = rng.gen_range(1..=slots.min(2));
                    let mut chosen: Vec<usize> = (0..slots).collect();
                    chosen.shuffle(rng);
                    chosen.truncate(k);
                    self.fill(t, rng, &chosen)
                }
            }
            Kind::Covert => {
                let mut body = self.fill(self.neutral_template(rng), rng, &[]);
                body.pop();
                let (prefix, suffix) = COVERT_MARKERS[rng.gen_range(0..COVERT_MARKERS.len())];
                prefix
                    .split(' ')
                    .filter(|w| !w.is_empty())
                    .map(str::to_string)
                    .chain(body)
                    .chain(suffix.split(' ').map(str::to_string))
                    .collect()
            }
        };
        words.join(" ")
    }
}

/// Exact class counts for `n` items by largest remainder.
fn class_counts(balance: &[f64], n: usize) -> Vec<usize> {
    let raw: Vec<f64> = balance.iter().map(|b| b * n as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut order: Vec<usize> = (0..balance.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.partial_cmp(&fa).expect("finite").then(a.cmp(&b))
    });
    let mut left = n.saturating_sub(counts.iter().sum());
    for &c in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[c] += 1;
        left -= 1;
    }
    counts
}

/// The generated benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpora {
    /// Unlabeled lines of both languages (plus any code-mixed lines), shuffled.
    pub pretrain: Vec<String>,
    pub source_train: LabeledDataset,
    pub target_train: LabeledDataset,
    pub target_test: LabeledDataset,
    pub cipher: Cipher,
}

pub fn source_schema() -> LabelSchema {
    LabelSchema {
        task: "synth-a".to_string(),
        labels: SOURCE_LABELS.iter().map(|s| s.to_string()).collect(),
    }
}

pub fn target_schema(classes: usize) -> LabelSchema {
    if classes == 3 {
        LabelSchema {
            task: "synth-b3".to_string(),
            labels: TARGET3_LABELS.iter().map(|s| s.to_string()).collect(),
        }
    } else {
        LabelSchema {
            task: "synth-b".to_string(),
            labels: SOURCE_LABELS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

pub fn generate_synthetic_bilingual(spec: &SynthSpec) -> Result<SynthCorpora> {
    spec.validate()?;
    let (lex, cipher) = build_lexicon(spec);
    let g = Generator {
        lex: &lex,
        templates: spec.templates,
    };
    // Canonical (language A) form of every sentence in a training corpus.
    let mut seen: HashSet<String> = HashSet::new();

    let pick_kind = |rng: &mut ChaCha8Rng| {
        let u: f64 = rng.gen();
        if u < 0.5 {
            Kind::Neutral
        } else if u < 0.85 {
            Kind::Overt
        } else {
            Kind::Covert
        }
    };
    let mut rng = rng::seeded(spec.seed, 42);
    let mut pretrain = Vec::new();
    for _ in 0..spec.pretrain_per_language {
        let s = g.sentence(pick_kind(&mut rng), &mut rng);
        seen.insert(s.clone());
        pretrain.push(s);
    }
    for _ in 0..spec.pretrain_per_language {
        let s = g.sentence(pick_kind(&mut rng), &mut rng);
        pretrain.push(cipher.encode_sentence(&s));
        seen.insert(s);
    }
    let mixed = (spec.code_mix_fraction * spec.pretrain_per_language as f64).round() as usize;
    for _ in 0..mixed {
        let s = g.sentence(pick_kind(&mut rng), &mut rng);
        let line = s
            .split(' ')
            .map(|w| if rng.gen_bool(0.5) { cipher.encode(w) } else { w })
            .collect::<Vec<_>>()
            .join(" ");
        pretrain.push(line);
        seen.insert(s);
    }
    pretrain.shuffle(&mut rng);

    let source_kinds = [Kind::Neutral, Kind::Overt];
    let target_kinds: &[Kind] = if spec.target_classes == 3 {
        &[Kind::Neutral, Kind::Overt, Kind::Covert]
    } else {
        &source_kinds
    };

    let labeled = |rng: &mut ChaCha8Rng,
                   kinds: &[Kind],
                   balance: &[f64],
                   n: usize,
                   prefix: &str,
                   encode: bool,
                   exclude: Option<&HashSet<String>>|
     -> Result<Vec<(Instance, String)>> {
        let counts = class_counts(balance, n);
        let mut items = Vec::with_capacity(n);
        let mut own: HashSet<String> = HashSet::new();
        for (label, (&kind, &count)) in kinds.iter().zip(&counts).enumerate() {
            let mut made = 0;
            let mut attempts = 0usize;
            while made < count {
                attempts += 1;
                if attempts > 200 * count + 10_000 {
                    return Err(Error::Config(format!(
                        "lexicon too small to draw {count} fresh {prefix} sentences"
                    )));
                }
                let s = g.sentence(kind, rng);
                if let Some(ex) = exclude {
                    if ex.contains(&s) || !own.insert(s.clone()) {
                        continue;
                    }
                }
                let text = if encode { cipher.encode_sentence(&s) } else { s.clone() };
                items.push((
                    Instance {
                        id: String::new(),
                        text,
                        label,
                    },
                    s,
                ));
                made += 1;
            }
        }
        items.shuffle(rng);
        for (i, (inst, _)) in items.iter_mut().enumerate() {
            inst.id = format!("{prefix}-{i:05}");
        }
        Ok(items)
    };

    let source_balance = SynthSpec::balance_for(&spec.source_balance, 2, "source_balance")?;
    let target_balance = SynthSpec::balance_for(&spec.balance, spec.target_classes, "balance")?;

    let mut rng = rng::seeded(spec.seed, 43);
    let a_train = labeled(&mut rng, &source_kinds, &source_balance, spec.source_train, "a-train", false, None)?;
    seen.extend(a_train.iter().map(|(_, s)| s.clone()));

    let stream = 44 + 10 * spec.target_classes as u64;
    let mut rng = rng::seeded(spec.seed, stream);
    let b_train = labeled(&mut rng, target_kinds, &target_balance, spec.target_train, "b-train", true, None)?;
    seen.extend(b_train.iter().map(|(_, s)| s.clone()));

    let mut rng = rng::seeded(spec.seed, stream + 1);
    let b_test = labeled(
        &mut rng,
        target_kinds,
        &target_balance,
        spec.target_test,
        "b-test",
        true,
        Some(&seen),
    )?;

    let provenance = |part: &str| format!("synthetic seed={} {part}", spec.seed);
    let strip = |v: Vec<(Instance, String)>| v.into_iter().map(|(i, _)| i).collect::<Vec<_>>();
    Ok(SynthCorpora {
        pretrain,
        source_train: LabeledDataset::new(strip(a_train), source_schema(), provenance("a-train"))?,
        target_train: LabeledDataset::new(strip(b_train), target_schema(spec.target_classes), provenance("b-train"))?,
        target_test: LabeledDataset::new(strip(b_test), target_schema(spec.target_classes), provenance("b-test"))?,
        cipher,
    })
}

impl SynthCorpora {
    /// Writes `pretrain.txt`, `source_train.tsv`, `target_train.tsv`,
    /// `target_test.tsv` and `cipher.tsv` into `dir`.
    pub fn write_to_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, content: String| {
            let p = dir.join(name);
            std::fs::write(&p, content).map_err(|e| Error::io(&p, e))
        };
        let mut pre = self.pretrain.join("\n");
        pre.push('\n');
        write("pretrain.txt", pre)?;
        write("source_train.tsv", self.source_train.to_tsv())?;
        write("target_train.tsv", self.target_train.to_tsv())?;
        write("target_test.tsv", self.target_test.to_tsv())?;
        let mut c = String::from("a\tb\n");
        for (a, b) in self.cipher.pairs() {
            c.push_str(&format!("{a}\t{b}\n"));
        }
        write("cipher.tsv", c)
    }
}
