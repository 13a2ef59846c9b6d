//! Seeded toy language used for desk-scale corpora and probe tasks.
//!
//! The language is fusional: nouns carry gender, adjectives agree with
//! their noun in gender and case, and prepositions govern case. Documents
//! are topical, so sentence order and word co-occurrence carry signal for
//! the MLM and sentence-structure objectives.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::corpus::{CorpusPreset, Document};
use crate::rng;

const ONSETS: &[&str] = &[
    "b", "c", "d", "g", "k", "l", "m", "n", "p", "r", "s", "t", "w", "z", "ch", "cz", "dz", "sz",
    "ł", "ś", "ż", "br", "kr", "pr", "st", "tr", "gr", "pl", "sk", "zw",
];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "y", "ó"];
const CODAS: &[&str] = &["", "", "", "k", "n", "r", "s", "t", "ł", "ń", "sz", "st"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Gender {
    Masculine,
    Feminine,
    Neuter,
}

#[derive(Debug, Clone, Copy)]
enum Case {
    Nominative,
    Accusative,
    Locative,
}

fn noun_ending(g: Gender, c: Case) -> &'static str {
    use Case::*;
    use Gender::*;
    match (g, c) {
        (Masculine, Nominative) | (Masculine, Accusative) => "",
        (Feminine, Nominative) => "a",
        (Feminine, Accusative) => "ę",
        (Neuter, Nominative) | (Neuter, Accusative) => "o",
        (Masculine, Locative) | (Feminine, Locative) => "ie",
        (Neuter, Locative) => "u",
    }
}

fn adjective_ending(g: Gender, c: Case) -> &'static str {
    use Case::*;
    use Gender::*;
    match (g, c) {
        (Masculine, Nominative) => "y",
        (Masculine, Accusative) => "ego",
        (Masculine, Locative) | (Neuter, Locative) => "ym",
        (Feminine, Nominative) => "a",
        (Feminine, Accusative) => "ą",
        (Feminine, Locative) => "ej",
        (Neuter, Nominative) | (Neuter, Accusative) => "e",
    }
}

#[derive(Debug, Clone)]
struct Noun {
    stem: String,
    gender: Gender,
}

/// A generated lexicon plus grammar.
#[derive(Debug, Clone)]
pub struct SyntheticLanguage {
    nouns: Vec<Noun>,
    adjectives: Vec<String>,
    verbs: Vec<String>,
    topics: usize,
}

fn syllable<R: Rng>(rng: &mut R) -> String {
    let mut s = String::new();
    s.push_str(ONSETS.choose(rng).unwrap());
    s.push_str(VOWELS.choose(rng).unwrap());
    s.push_str(CODAS.choose(rng).unwrap());
    s
}

fn stem<R: Rng>(rng: &mut R) -> String {
    let n = rng.gen_range(1..=2);
    (0..n).map(|_| syllable(rng)).collect()
}

fn capitalize(w: &str) -> String {
    let mut c = w.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

/// Shape of one named source: document and sentence lengths, which topics
/// it favours and how often it asks questions.
#[derive(Debug, Clone)]
pub struct SourceProfile {
    pub name: &'static str,
    pub sentences_per_doc: (usize, usize),
    pub topic_offset: usize,
    pub question_rate: f64,
    pub number_rate: f64,
}

pub fn source_profile(name: &str) -> Option<SourceProfile> {
    let p = |name, s, t, q, n| SourceProfile {
        name,
        sentences_per_doc: s,
        topic_offset: t,
        question_rate: q,
        number_rate: n,
    };
    Some(match name {
        "balanced" => p("balanced", (3, 7), 0, 0.1, 0.05),
        "encyclopedic" => p("encyclopedic", (2, 5), 1, 0.02, 0.2),
        "literature" => p("literature", (8, 14), 2, 0.15, 0.01),
        "web-head" => p("web-head", (3, 8), 3, 0.1, 0.1),
        "web-middle" => p("web-middle", (3, 9), 4, 0.1, 0.1),
        "subtitles" => p("subtitles", (6, 12), 5, 0.3, 0.02),
        _ => return None,
    })
}

impl SyntheticLanguage {
    /// A language with `lexicon_size` stems per part of speech, split over
    /// `topics` topics.
    pub fn new(seed: u64, lexicon_size: usize, topics: usize) -> Self {
        let mut rng = rng::named(seed, "synthetic-lexicon");
        let genders = [Gender::Masculine, Gender::Feminine, Gender::Neuter];
        let mut unique = std::collections::HashSet::new();
        let mut fresh = |rng: &mut rng::Rng| loop {
            let s = stem(rng);
            if unique.insert(s.clone()) {
                return s;
            }
        };
        let nouns = (0..lexicon_size)
            .map(|_| Noun {
                stem: fresh(&mut rng),
                gender: *genders.choose(&mut rng).unwrap(),
            })
            .collect();
        let adjectives = (0..lexicon_size / 2 + 1).map(|_| fresh(&mut rng)).collect();
        let verbs = (0..lexicon_size / 2 + 1)
            .map(|_| {
                let s = fresh(&mut rng);
                let suffix = ["uje", "i", "a", "ie"][rng.gen_range(0..4)];
                s + suffix
            })
            .collect();
        SyntheticLanguage {
            nouns,
            adjectives,
            verbs,
            topics: topics.max(1),
        }
    }

    fn pick_topical<'a, T, R: Rng>(&self, items: &'a [T], topic: usize, rng: &mut R) -> &'a T {
        // 80% of draws come from the topic's slice of the lexicon.
        let t = topic % self.topics;
        let per = (items.len() / self.topics).max(1);
        if rng.gen_bool(0.8) {
            let lo = (t * per).min(items.len() - 1);
            let hi = ((t + 1) * per).min(items.len()).max(lo + 1);
            &items[rng.gen_range(lo..hi)]
        } else {
            items.choose(rng).unwrap()
        }
    }

    fn noun_phrase<R: Rng>(&self, topic: usize, case: Case, rng: &mut R) -> String {
        let n = self.pick_topical(&self.nouns, topic, rng);
        let noun = format!("{}{}", n.stem, noun_ending(n.gender, case));
        if rng.gen_bool(0.6) {
            let a = self.pick_topical(&self.adjectives, topic, rng);
            format!("{}{} {}", a, adjective_ending(n.gender, case), noun)
        } else {
            noun
        }
    }

    /// One sentence about `topic`, capitalized and terminated.
    pub fn sentence<R: Rng>(&self, topic: usize, profile: &SourceProfile, rng: &mut R) -> String {
        let verb = self.pick_topical(&self.verbs, topic, rng).clone();
        let subject = self.noun_phrase(topic, Case::Nominative, rng);
        let question = rng.gen_bool(profile.question_rate);
        let mut body = match rng.gen_range(0..3) {
            0 => format!(
                "{} {} {}",
                subject,
                verb,
                self.noun_phrase(topic, Case::Accusative, rng)
            ),
            1 => format!(
                "{} {} w {}",
                subject,
                verb,
                self.noun_phrase(topic, Case::Locative, rng)
            ),
            _ => format!(
                "{} {} {}, a {} {}",
                subject,
                verb,
                self.noun_phrase(topic, Case::Accusative, rng),
                self.noun_phrase(topic, Case::Nominative, rng),
                self.pick_topical(&self.verbs, topic, rng)
            ),
        };
        if rng.gen_bool(profile.number_rate) {
            body = format!("{} w roku {}", body, rng.gen_range(1800..2021));
        }
        if question {
            format!("Czy {body}?")
        } else {
            format!("{}{}", capitalize(&body), if rng.gen_bool(0.05) { "!" } else { "." })
        }
    }

    pub fn document<R: Rng>(&self, profile: &SourceProfile, rng: &mut R) -> String {
        let topic = profile.topic_offset + rng.gen_range(0..self.topics);
        let (lo, hi) = profile.sentences_per_doc;
        let n = rng.gen_range(lo..=hi);
        (0..n)
            .map(|_| self.sentence(topic, profile, rng))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// `n_docs` documents of the named source.
    pub fn source(&self, name: &str, n_docs: usize, seed: u64) -> Option<Vec<Document>> {
        let profile = source_profile(name)?;
        let mut rng = rng::named(seed, &format!("synthetic-source-{name}"));
        Some(
            (0..n_docs)
                .map(|i| {
                    Document::new(format!("{name}-{i}"), name, &self.document(&profile, &mut rng))
                        .expect("generated documents are non-empty")
                })
                .collect(),
        )
    }

    /// Concatenation of the preset's sources, `docs_per_source` each.
    pub fn preset(&self, preset: CorpusPreset, docs_per_source: usize, seed: u64) -> Vec<Document> {
        preset
            .sources()
            .iter()
            .flat_map(|s| self.source(s, docs_per_source, seed).unwrap())
            .collect()
    }
}
