//! Slot-annotated corpora, question banks, and the records derived from
//! them: labeled `(sentence, question, answer)` triplets, unlabeled
//! `(sentence, answer)` pairs, candidate question sets, and seeded splits.

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Arc;

use indexmap::IndexMap;
use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Category(String);

impl Category {
    pub fn new(name: impl Into<String>) -> Self {
        Self(name.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for Category {
    fn from(s: &str) -> Self {
        Self(s.to_string())
    }
}

/// A gold slot: `tokens[start..end]` belongs to `category`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlotAnnotation {
    pub category: Category,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotatedSentence {
    pub id: String,
    pub tokens: Vec<String>,
    pub slots: Vec<SlotAnnotation>,
}

impl AnnotatedSentence {
    /// Checks span bounds and that no two spans overlap.
    pub fn validate(&self) -> Result<()> {
        let n = self.tokens.len();
        for s in &self.slots {
            if s.start >= s.end || s.end > n {
                return Err(Error::Validation(format!(
                    "sentence {}: slot {} has invalid span [{}, {}) for {} tokens",
                    self.id, s.category, s.start, s.end, n
                )));
            }
        }
        let mut spans: Vec<_> = self.slots.iter().map(|s| (s.start, s.end)).collect();
        spans.sort_unstable();
        if spans.windows(2).any(|w| w[1].0 < w[0].1) {
            return Err(Error::Validation(format!(
                "sentence {}: overlapping slot spans",
                self.id
            )));
        }
        Ok(())
    }

    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }

    pub fn categories(&self) -> impl Iterator<Item = &Category> {
        self.slots.iter().map(|s| &s.category)
    }
}

/// Per-token answer bits over a sentence.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AnswerMask(Vec<bool>);

impl AnswerMask {
    pub fn new(bits: Vec<bool>) -> Self {
        Self(bits)
    }

    pub fn from_span(len: usize, start: usize, end: usize) -> Self {
        Self((0..len).map(|i| i >= start && i < end).collect())
    }

    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    /// True when no bit is set (no answer).
    pub fn is_empty(&self) -> bool {
        !self.0.iter().any(|&b| b)
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    /// True when the set bits form one run.
    pub fn is_contiguous(&self) -> bool {
        let starts = self
            .0
            .iter()
            .enumerate()
            .filter(|&(i, &b)| b && (i == 0 || !self.0[i - 1]))
            .count();
        starts == 1
    }

    /// Indices of the set bits.
    pub fn positions(&self) -> Vec<usize> {
        self.0.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect()
    }

    pub fn as_targets(&self) -> Vec<f64> {
        self.0.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

/// Question groups keyed by category, in declaration order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(transparent)]
pub struct QuestionBank {
    groups: IndexMap<Category, Vec<String>>,
}

impl QuestionBank {
    pub fn new(groups: Vec<(Category, Vec<String>)>) -> Result<Self> {
        if groups.is_empty() {
            return Err(Error::Validation("question bank has no groups".into()));
        }
        let mut map = IndexMap::new();
        let mut seen_questions = HashSet::new();
        for (cat, questions) in groups {
            if questions.is_empty() {
                return Err(Error::Validation(format!("question group `{cat}` is empty")));
            }
            for q in &questions {
                if !seen_questions.insert(q.clone()) {
                    return Err(Error::Validation(format!(
                        "question `{q}` appears in more than one group"
                    )));
                }
            }
            if map.insert(cat.clone(), questions).is_some() {
                return Err(Error::Validation(format!("duplicate category `{cat}`")));
            }
        }
        Ok(Self { groups: map })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let pairs: OrderedPairs = serde_json::from_str(text)?;
        Self::new(pairs.0)
    }

    /// The bundled ATIS bank (7 categories).
    pub fn atis_default() -> Self {
        Self::from_json(include_str!("../data/atis_questions.json")).expect("bundled ATIS bank is valid")
    }

    /// The bundled CEC bank (4 categories).
    pub fn cec_default() -> Self {
        Self::from_json(include_str!("../data/cec_questions.json")).expect("bundled CEC bank is valid")
    }

    /// Number of groups, C.
    pub fn num_categories(&self) -> usize {
        self.groups.len()
    }

    pub fn categories(&self) -> impl Iterator<Item = &Category> {
        self.groups.keys()
    }

    pub fn category(&self, index: usize) -> &Category {
        self.groups.get_index(index).expect("category index").0
    }

    pub fn index_of(&self, cat: &Category) -> Option<usize> {
        self.groups.get_index_of(cat)
    }

    pub fn contains(&self, cat: &Category) -> bool {
        self.groups.contains_key(cat)
    }

    pub fn questions(&self, cat: &Category) -> Option<&[String]> {
        self.groups.get(cat).map(Vec::as_slice)
    }

    pub fn groups(&self) -> impl Iterator<Item = (&Category, &[String])> {
        self.groups.iter().map(|(c, q)| (c, q.as_slice()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("bank serializes")
    }
}

/// JSON object read as an ordered list of entries so duplicate keys are
/// visible instead of silently overwritten.
struct OrderedPairs(Vec<(Category, Vec<String>)>);

impl<'de> Deserialize<'de> for OrderedPairs {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct PairsVisitor;
        impl<'de> Visitor<'de> for PairsVisitor {
            type Value = OrderedPairs;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("an object mapping category to a list of questions")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<Self::Value, A::Error> {
                let mut out = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, Vec<String>>()? {
                    out.push((Category(k), v));
                }
                Ok(OrderedPairs(out))
            }
        }
        deserializer.deserialize_map(PairsVisitor)
    }
}

/// A labeled `(s, q, a)` record.
#[derive(Clone, Debug, PartialEq)]
pub struct Triplet {
    pub sentence: Arc<AnnotatedSentence>,
    pub category: Category,
    pub question: String,
    pub answer: AnswerMask,
}

/// An unlabeled `(s, a)` record; the category is deliberately absent.
#[derive(Clone, Debug, PartialEq)]
pub struct SaPair {
    pub sentence: Arc<AnnotatedSentence>,
    pub answer: AnswerMask,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub category: Category,
    pub question: String,
}

/// One question per bank category, in bank order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateSet {
    entries: Vec<Candidate>,
}

impl CandidateSet {
    /// The first question of every group; used wherever evaluation must be
    /// reproducible.
    pub fn first_of_each(bank: &QuestionBank) -> Self {
        Self {
            entries: bank
                .groups()
                .map(|(c, qs)| Candidate {
                    category: c.clone(),
                    question: qs[0].clone(),
                })
                .collect(),
        }
    }

    pub fn entries(&self) -> &[Candidate] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index_of(&self, cat: &Category) -> Option<usize> {
        self.entries.iter().position(|e| &e.category == cat)
    }
}

pub fn load_slot_corpus(path: impl AsRef<Path>) -> Result<Vec<AnnotatedSentence>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let sentence: AnnotatedSentence = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        sentence.validate()?;
        out.push(sentence);
    }
    Ok(out)
}

pub fn write_slot_corpus(path: impl AsRef<Path>, corpus: &[AnnotatedSentence]) -> Result<()> {
    let path = path.as_ref();
    let mut file = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for s in corpus {
        let line = serde_json::to_string(s)?;
        writeln!(file, "{line}").map_err(|e| Error::io(path, e))?;
    }
    file.flush().map_err(|e| Error::io(path, e))
}

pub fn load_question_bank(path: impl AsRef<Path>) -> Result<QuestionBank> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    QuestionBank::from_json(&text)
}

/// Drops sentences that use categories outside `bank` or fail validation.
pub fn filter_corpus(corpus: Vec<AnnotatedSentence>, bank: &QuestionBank) -> (Vec<AnnotatedSentence>, usize) {
    let before = corpus.len();
    let kept: Vec<_> = corpus
        .into_iter()
        .filter(|s| s.validate().is_ok() && s.categories().all(|c| bank.contains(c)))
        .collect();
    let dropped = before - kept.len();
    if dropped > 0 {
        info!("filtered {dropped} of {before} sentences (unknown category or bad spans)");
    }
    (kept, dropped)
}

/// One triplet per gold slot, with the question drawn uniformly from the
/// slot's group.
pub fn make_triplets<R: Rng>(
    sentence: &Arc<AnnotatedSentence>,
    bank: &QuestionBank,
    rng: &mut R,
) -> Result<Vec<Triplet>> {
    sentence
        .slots
        .iter()
        .map(|slot| {
            let group = bank
                .questions(&slot.category)
                .ok_or_else(|| Error::UnknownCategory(slot.category.to_string()))?;
            let question = group[rng.gen_range(0..group.len())].clone();
            Ok(Triplet {
                sentence: Arc::clone(sentence),
                category: slot.category.clone(),
                question,
                answer: AnswerMask::from_span(sentence.tokens.len(), slot.start, slot.end),
            })
        })
        .collect()
}

pub fn make_sa_pairs(sentence: &Arc<AnnotatedSentence>) -> Vec<SaPair> {
    sentence
        .slots
        .iter()
        .map(|slot| SaPair {
            sentence: Arc::clone(sentence),
            answer: AnswerMask::from_span(sentence.tokens.len(), slot.start, slot.end),
        })
        .collect()
}

/// Seeded sentence-level split; `|test| = round(fraction · |corpus|)`.
/// Both halves keep corpus order.
pub fn split_dataset<T: Clone>(corpus: &[T], test_fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "test fraction {test_fraction} not in (0, 1)"
        )));
    }
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("cannot split an empty corpus".into()));
    }
    let n_test = (test_fraction * corpus.len() as f64).round() as usize;
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_test = vec![false; corpus.len()];
    for &i in &order[..n_test] {
        is_test[i] = true;
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (item, t) in corpus.iter().zip(is_test) {
        if t {
            test.push(item.clone());
        } else {
            train.push(item.clone());
        }
    }
    Ok((train, test))
}

/// Picks `n_sentences` training sentences as labeled triplets; every other
/// training sentence becomes unlabeled pairs.
pub fn sample_labeled_subset(
    train: &[Arc<AnnotatedSentence>],
    n_sentences: usize,
    bank: &QuestionBank,
    seed: u64,
) -> Result<(Vec<Triplet>, Vec<SaPair>)> {
    if n_sentences > train.len() {
        return Err(Error::InvalidArgument(format!(
            "requested {n_sentences} labeled sentences but the train split has {}",
            train.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut rng);
    let mut labeled_ids: Vec<usize> = order[..n_sentences].to_vec();
    labeled_ids.sort_unstable();
    let mut labeled = Vec::new();
    for &i in &labeled_ids {
        labeled.extend(make_triplets(&train[i], bank, &mut rng)?);
    }
    let mut is_labeled = vec![false; train.len()];
    for &i in &labeled_ids {
        is_labeled[i] = true;
    }
    let unlabeled = train
        .iter()
        .zip(is_labeled)
        .filter(|(_, l)| !l)
        .flat_map(|(s, _)| make_sa_pairs(s))
        .collect();
    Ok((labeled, unlabeled))
}

/// One question drawn uniformly from each group, in bank order.
pub fn sample_candidate_set<R: Rng>(bank: &QuestionBank, rng: &mut R) -> CandidateSet {
    CandidateSet {
        entries: bank
            .groups()
            .map(|(c, qs)| Candidate {
                category: c.clone(),
                question: qs[rng.gen_range(0..qs.len())].clone(),
            })
            .collect(),
    }
}

/// Converts two-column BIO text (`token tag` per line, blank line between
/// sentences) into annotated sentences. The category is the tag label up to
/// its first `.`; `aliases` then renames categories.
pub fn parse_bio(text: &str, source: &str, aliases: &[(String, String)]) -> Result<Vec<AnnotatedSentence>> {
    let mut out = Vec::new();
    let mut tokens: Vec<String> = Vec::new();
    let mut slots: Vec<SlotAnnotation> = Vec::new();
    let mut open: Option<(String, usize)> = None;

    let rename = |label: &str| -> Category {
        let base = label.split('.').next().unwrap_or(label);
        aliases
            .iter()
            .find(|(from, _)| from == base)
            .map(|(_, to)| Category::new(to.as_str()))
            .unwrap_or_else(|| Category::new(base))
    };

    let flush = |tokens: &mut Vec<String>,
                 slots: &mut Vec<SlotAnnotation>,
                 open: &mut Option<(String, usize)>,
                 out: &mut Vec<AnnotatedSentence>| {
        if let Some((label, start)) = open.take() {
            slots.push(SlotAnnotation {
                category: rename(&label),
                start,
                end: tokens.len(),
            });
        }
        if !tokens.is_empty() {
            out.push(AnnotatedSentence {
                id: format!("{source}-{}", out.len()),
                tokens: std::mem::take(tokens),
                slots: std::mem::take(slots),
            });
        }
    };

    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            flush(&mut tokens, &mut slots, &mut open, &mut out);
            continue;
        }
        let mut cols = line.split_whitespace();
        let (token, tag) = match (cols.next(), cols.next(), cols.next()) {
            (Some(t), Some(g), None) => (t, g),
            _ => {
                return Err(Error::Parse {
                    path: source.to_string(),
                    line: i + 1,
                    message: format!("expected `token tag`, got `{line}`"),
                })
            }
        };
        let close = |open: &mut Option<(String, usize)>, slots: &mut Vec<SlotAnnotation>, end: usize| {
            if let Some((label, start)) = open.take() {
                slots.push(SlotAnnotation {
                    category: rename(&label),
                    start,
                    end,
                });
            }
        };
        let pos = tokens.len();
        if tag == "O" {
            close(&mut open, &mut slots, pos);
        } else if let Some(label) = tag.strip_prefix("B-") {
            close(&mut open, &mut slots, pos);
            open = Some((label.to_string(), pos));
        } else if let Some(label) = tag.strip_prefix("I-") {
            let continues = matches!(&open, Some((l, _)) if l == label);
            if !continues {
                close(&mut open, &mut slots, pos);
                open = Some((label.to_string(), pos));
            }
        } else {
            return Err(Error::Parse {
                path: source.to_string(),
                line: i + 1,
                message: format!("unrecognised tag `{tag}`"),
            });
        }
        tokens.push(token.to_string());
    }
    flush(&mut tokens, &mut slots, &mut open, &mut out);
    for s in &out {
        s.validate()?;
    }
    Ok(out)
}
