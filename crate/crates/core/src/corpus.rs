//! ABSA datasets: tokenization, loaders (JSONL and SemEval-2014 XML),
//! vocabulary, encoding, class statistics and a seeded synthetic corpus.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lexicon::Lexicon;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed record: {reason}")]
    MalformedLine { path: String, line: usize, reason: String },
    #[error("sample {id}: aspect span cannot be mapped to tokens: {reason}")]
    UnmappableSpan { id: String, reason: String },
    #[error("XML parse failure in {path}: {reason}")]
    Xml { path: String, reason: String },
    #[error("unknown polarity {0:?}")]
    UnknownPolarity(String),
}

/// Three-way sentiment label. The integer codes are stable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Negative = 0,
    Neutral = 1,
    Positive = 2,
}

impl Polarity {
    pub const ALL: [Polarity; 3] = [Polarity::Negative, Polarity::Neutral, Polarity::Positive];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Polarity::Negative => "negative",
            Polarity::Neutral => "neutral",
            Polarity::Positive => "positive",
        }
    }

    /// The two labels other than `self`, in code order.
    pub fn others(self) -> [Polarity; 2] {
        let mut out = [Polarity::Negative; 2];
        let mut n = 0;
        for p in Self::ALL {
            if p != self {
                out[n] = p;
                n += 1;
            }
        }
        out
    }
}

impl fmt::Display for Polarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Polarity {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "negative" => Ok(Polarity::Negative),
            "neutral" => Ok(Polarity::Neutral),
            "positive" => Ok(Polarity::Positive),
            _ => Err(CorpusError::UnknownPolarity(s.to_string())),
        }
    }
}

/// Half-open token range `[start, end)` of an aspect term.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AspectSpan {
    pub start: usize,
    pub end: usize,
    pub surface: String,
}

impl AspectSpan {
    pub fn contains(&self, pos: usize) -> bool {
        (self.start..self.end).contains(&pos)
    }
}

/// One labeled (sentence, aspect) pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub tokens: Vec<String>,
    pub aspects: Vec<AspectSpan>,
    pub label: Polarity,
    pub aspect_index: usize,
}

impl Sample {
    pub fn aspect(&self) -> &AspectSpan {
        &self.aspects[self.aspect_index]
    }

    /// Space-joined token text.
    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }

    /// Character offsets of the targeted aspect inside [`Sample::text`].
    pub fn aspect_char_range(&self) -> (usize, usize) {
        let span = self.aspect();
        let from: usize = self.tokens[..span.start].iter().map(|t| t.chars().count() + 1).sum();
        (from, from + span.surface.chars().count())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    /// Aspect terms dropped because their polarity was `conflict`.
    pub skipped_conflict: usize,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Self {
        Self {
            samples,
            skipped_conflict: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Per-class counts, indexed by [`Polarity::index`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub negative: usize,
    pub neutral: usize,
    pub positive: usize,
}

impl ClassCounts {
    pub fn from_labels<I: IntoIterator<Item = Polarity>>(labels: I) -> Self {
        let mut c = Self::default();
        for l in labels {
            match l {
                Polarity::Negative => c.negative += 1,
                Polarity::Neutral => c.neutral += 1,
                Polarity::Positive => c.positive += 1,
            }
        }
        c
    }

    pub fn get(&self, p: Polarity) -> usize {
        match p {
            Polarity::Negative => self.negative,
            Polarity::Neutral => self.neutral,
            Polarity::Positive => self.positive,
        }
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.negative, self.neutral, self.positive]
    }

    pub fn total(&self) -> usize {
        self.negative + self.neutral + self.positive
    }
}

pub fn stats(dataset: &Dataset) -> ClassCounts {
    ClassCounts::from_labels(dataset.samples.iter().map(|s| s.label))
}

// ---------------------------------------------------------------------------
// Tokenizer

const CONTRACTION_SUFFIXES: [&str; 7] = ["t", "s", "re", "ve", "ll", "d", "m"];

/// A token with its character (not byte) offsets in the source text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OffsetToken {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

fn normalize_apostrophe(c: char) -> char {
    match c {
        '\u{2019}' | '\u{2018}' | '`' => '\'',
        other => other,
    }
}

/// Lowercases, splits on whitespace and splits punctuation into separate
/// tokens. An apostrophe followed by a contraction suffix (`'t`, `'s`,
/// `'re`, `'ve`, `'ll`, `'d`, `'m`) stays one token.
pub fn tokenize(text: &str) -> Vec<String> {
    tokenize_with_offsets(text).into_iter().map(|t| t.text).collect()
}

pub fn tokenize_with_offsets(text: &str) -> Vec<OffsetToken> {
    let chars: Vec<char> = text.chars().map(normalize_apostrophe).collect();
    let mut out = Vec::new();
    let mut word_start: Option<usize> = None;

    let flush = |out: &mut Vec<OffsetToken>, start: &mut Option<usize>, end: usize| {
        if let Some(s) = start.take() {
            let raw: String = chars[s..end].iter().collect();
            out.push(OffsetToken {
                text: raw.to_lowercase(),
                start: s,
                end,
            });
        }
    };

    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            flush(&mut out, &mut word_start, i);
            i += 1;
        } else if c.is_alphanumeric() {
            word_start.get_or_insert(i);
            i += 1;
        } else if c == '\'' {
            flush(&mut out, &mut word_start, i);
            let suffix_len = contraction_suffix_len(&chars[i + 1..]);
            let end = i + 1 + suffix_len;
            let raw: String = chars[i..end].iter().collect();
            out.push(OffsetToken {
                text: raw.to_lowercase(),
                start: i,
                end,
            });
            i = end;
        } else {
            flush(&mut out, &mut word_start, i);
            out.push(OffsetToken {
                text: c.to_lowercase().collect(),
                start: i,
                end: i + 1,
            });
            i += 1;
        }
    }
    flush(&mut out, &mut word_start, chars.len());
    out
}

fn contraction_suffix_len(rest: &[char]) -> usize {
    let run = rest.iter().take_while(|c| c.is_alphanumeric()).count();
    let word: String = rest[..run].iter().collect::<String>().to_lowercase();
    if CONTRACTION_SUFFIXES.contains(&word.as_str()) {
        run
    } else {
        0
    }
}

// ---------------------------------------------------------------------------
// Loaders

/// One line of the JSONL dataset format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JsonlRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub text: String,
    pub aspect: String,
    pub from: usize,
    pub to: usize,
    pub polarity: Polarity,
}

/// Maps a character span onto the tokens it overlaps, checking that the
/// span text matches `term`.
fn map_char_span(
    text: &str,
    term: &str,
    from: usize,
    to: usize,
    id: &str,
) -> Result<(Vec<String>, AspectSpan), CorpusError> {
    let unmappable = |reason: String| CorpusError::UnmappableSpan {
        id: id.to_string(),
        reason,
    };
    let n_chars = text.chars().count();
    if from >= to || to > n_chars {
        return Err(unmappable(format!(
            "range {from}..{to} invalid for text of {n_chars} characters"
        )));
    }
    let slice: String = text.chars().skip(from).take(to - from).collect();
    if slice != term {
        return Err(unmappable(format!(
            "text[{from}..{to}] is {slice:?}, expected {term:?}"
        )));
    }
    let toks = tokenize_with_offsets(text);
    let covered: Vec<usize> = toks
        .iter()
        .enumerate()
        .filter(|(_, t)| t.start < to && t.end > from)
        .map(|(i, _)| i)
        .collect();
    let (Some(&start), Some(&last)) = (covered.first(), covered.last()) else {
        return Err(unmappable("span covers no tokens".into()));
    };
    let tokens: Vec<String> = toks.into_iter().map(|t| t.text).collect();
    let surface = tokens[start..=last].join(" ");
    Ok((
        tokens,
        AspectSpan {
            start,
            end: last + 1,
            surface,
        },
    ))
}

pub fn record_to_sample(rec: &JsonlRecord, fallback_id: String) -> Result<Sample, CorpusError> {
    let id = rec.id.clone().unwrap_or(fallback_id);
    let (tokens, span) = map_char_span(&rec.text, &rec.aspect, rec.from, rec.to, &id)?;
    Ok(Sample {
        id,
        tokens,
        aspects: vec![span],
        label: rec.polarity,
        aspect_index: 0,
    })
}

pub fn sample_to_record(sample: &Sample) -> JsonlRecord {
    let (from, to) = sample.aspect_char_range();
    JsonlRecord {
        id: Some(sample.id.clone()),
        text: sample.text(),
        aspect: sample.aspect().surface.clone(),
        from,
        to,
        polarity: sample.label,
    }
}

pub fn load_jsonl(path: &Path) -> Result<Dataset, CorpusError> {
    let io_err = |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = std::fs::File::open(path).map_err(io_err)?;
    let mut samples = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonlRecord = serde_json::from_str(&line).map_err(|e| CorpusError::MalformedLine {
            path: path.display().to_string(),
            line: idx + 1,
            reason: e.to_string(),
        })?;
        samples.push(record_to_sample(&rec, format!("line-{}", idx + 1))?);
    }
    Ok(Dataset::new(samples))
}

/// Writes one JSONL record per sample, using the space-joined token text.
pub fn write_jsonl<W: Write>(dataset: &Dataset, mut out: W) -> std::io::Result<()> {
    for s in &dataset.samples {
        serde_json::to_writer(&mut out, &sample_to_record(s))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn dump_jsonl(dataset: &Dataset, path: &Path) -> Result<(), CorpusError> {
    let io_err = |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = std::fs::File::create(path).map_err(io_err)?;
    let mut w = std::io::BufWriter::new(file);
    write_jsonl(dataset, &mut w).map_err(io_err)?;
    w.flush().map_err(io_err)
}

pub fn load_semeval_xml(path: &Path) -> Result<Dataset, CorpusError> {
    let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_semeval_xml(&text, &path.display().to_string())
}

pub fn parse_semeval_xml(xml: &str, origin: &str) -> Result<Dataset, CorpusError> {
    let doc = roxmltree::Document::parse(xml).map_err(|e| CorpusError::Xml {
        path: origin.to_string(),
        reason: e.to_string(),
    })?;
    let mut dataset = Dataset::default();
    for (s_idx, sentence) in doc.descendants().filter(|n| n.has_tag_name("sentence")).enumerate() {
        let sid = sentence
            .attribute("id")
            .map(str::to_string)
            .unwrap_or_else(|| format!("sentence-{}", s_idx + 1));
        let text = sentence
            .children()
            .find(|n| n.has_tag_name("text"))
            .and_then(|n| n.text())
            .unwrap_or("");
        let terms: Vec<_> = sentence
            .descendants()
            .filter(|n| n.has_tag_name("aspectTerm"))
            .collect();

        let mut tokens: Option<Vec<String>> = None;
        let mut spans = Vec::new();
        let mut labels = Vec::new();
        for term in terms {
            let attr = |name: &str| {
                term.attribute(name).ok_or_else(|| CorpusError::Xml {
                    path: origin.to_string(),
                    reason: format!("sentence {sid}: aspectTerm missing @{name}"),
                })
            };
            let polarity = attr("polarity")?;
            if polarity == "conflict" {
                dataset.skipped_conflict += 1;
                continue;
            }
            let label: Polarity = polarity.parse()?;
            let parse_off = |name: &str| -> Result<usize, CorpusError> {
                attr(name)?.parse().map_err(|_| CorpusError::Xml {
                    path: origin.to_string(),
                    reason: format!("sentence {sid}: @{name} is not an integer"),
                })
            };
            let (from, to) = (parse_off("from")?, parse_off("to")?);
            let (toks, span) = map_char_span(text, attr("term")?, from, to, &sid)?;
            tokens.get_or_insert(toks);
            spans.push(span);
            labels.push(label);
        }
        let Some(tokens) = tokens else { continue };
        for (k, label) in labels.into_iter().enumerate() {
            dataset.samples.push(Sample {
                id: format!("{sid}#{k}"),
                tokens: tokens.clone(),
                aspects: spans.clone(),
                label,
                aspect_index: k,
            });
        }
    }
    Ok(dataset)
}

// ---------------------------------------------------------------------------
// Vocabulary and encoding

pub const PAD: usize = 0;
pub const SEP: usize = 1;
pub const MASK: usize = 2;
pub const UNK: usize = 3;
const SPECIAL_TOKENS: [&str; 4] = ["[PAD]", "[SEP]", "<mask>", "[UNK]"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabRepr", into = "VocabRepr")]
pub struct Vocab {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    tokens: Vec<String>,
}

impl From<VocabRepr> for Vocab {
    fn from(r: VocabRepr) -> Self {
        Vocab::from_tokens(r.tokens)
    }
}

impl From<Vocab> for VocabRepr {
    fn from(v: Vocab) -> Self {
        VocabRepr { tokens: v.id_to_token }
    }
}

impl Vocab {
    /// Builds a vocab whose first four ids are the special tokens followed by
    /// `tokens` in order.
    fn from_tokens(id_to_token: Vec<String>) -> Self {
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .skip(SPECIAL_TOKENS.len())
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self {
            id_to_token,
            token_to_id,
        }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }
}

/// Tokens with frequency `>= min_count` (and all aspect tokens) get ids in
/// descending-frequency order, ties broken lexicographically.
pub fn build_vocab(dataset: &Dataset, min_count: usize) -> Vocab {
    let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
    let mut aspect_tokens: Vec<&str> = Vec::new();
    for s in &dataset.samples {
        for t in &s.tokens {
            *freq.entry(t.as_str()).or_default() += 1;
        }
        for span in &s.aspects {
            aspect_tokens.extend(s.tokens[span.start..span.end].iter().map(String::as_str));
        }
    }
    let mut kept: Vec<(&str, usize)> = freq
        .into_iter()
        .filter(|(t, n)| *n >= min_count.max(1) || aspect_tokens.contains(t))
        .filter(|(t, _)| !SPECIAL_TOKENS.contains(t))
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

    let tokens = SPECIAL_TOKENS
        .iter()
        .map(|s| s.to_string())
        .chain(kept.into_iter().map(|(t, _)| t.to_string()))
        .collect();
    Vocab::from_tokens(tokens)
}

/// Token ids laid out as `sentence ++ [SEP] ++ aspect`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct EncodedSample {
    pub ids: Vec<usize>,
    pub sentence_len: usize,
    /// Sorted sentence positions covered by the targeted aspect.
    pub aspect_positions: Vec<usize>,
}

impl EncodedSample {
    pub fn sentence_ids(&self) -> &[usize] {
        &self.ids[..self.sentence_len]
    }

    /// Ids after the separator.
    pub fn aspect_ids(&self) -> &[usize] {
        &self.ids[self.sentence_len + 1..]
    }

    pub fn is_aspect_position(&self, pos: usize) -> bool {
        self.aspect_positions.binary_search(&pos).is_ok()
    }
}

pub fn encode(sample: &Sample, vocab: &Vocab) -> EncodedSample {
    let span = sample.aspect();
    let mut ids: Vec<usize> = sample.tokens.iter().map(|t| vocab.id(t)).collect();
    let sentence_len = ids.len();
    ids.push(SEP);
    ids.extend(sample.tokens[span.start..span.end].iter().map(|t| vocab.id(t)));
    EncodedSample {
        ids,
        sentence_len,
        aspect_positions: (span.start..span.end).collect(),
    }
}

// ---------------------------------------------------------------------------
// Synthetic corpus

const SYNTHETIC_ASPECTS: [&str; 20] = [
    "food", "service", "staff", "pizza", "sushi", "battery", "screen", "keyboard", "price", "ambience", "menu", "wine",
    "coffee", "dessert", "waiter", "laptop", "display", "trackpad", "speaker", "delivery",
];

/// `{a}` is the aspect, `{o}` the opinion word.
const SYNTHETIC_TEMPLATES: [&str; 8] = [
    "the {a} was {o}",
    "the {a} was {o} tonight",
    "i found the {a} {o}",
    "honestly the {a} is {o} .",
    "our {a} was {o} and we left after an hour",
    "in my view the {a} seemed {o}",
    "we thought the {a} was {o} for the money",
    "the {a} they gave us was {o}",
];

/// Words used in synthetic templates outside the opinion slot.
pub fn synthetic_filler_words() -> Vec<String> {
    let mut words: Vec<String> = SYNTHETIC_TEMPLATES
        .iter()
        .flat_map(|t| tokenize(&t.replace("{a}", " ").replace("{o}", " ")))
        .collect();
    words.sort();
    words.dedup();
    words
}

pub fn synthetic_aspects() -> &'static [&'static str] {
    &SYNTHETIC_ASPECTS
}

/// Deterministic, class-balanced templated corpus. Sample `i` has label
/// `Polarity::ALL[i % 3]`; opinion words cycle through a seeded permutation of
/// each polarity's lexicon entries so every word is used before any repeats.
pub fn generate_synthetic(n: usize, seed: u64, lexicon: &Lexicon) -> Dataset {
    generate_synthetic_with_prefix(n, seed, lexicon, "syn")
}

pub fn generate_synthetic_with_prefix(n: usize, seed: u64, lexicon: &Lexicon, id_prefix: &str) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut word_orders: Vec<Vec<&str>> = Polarity::ALL
        .iter()
        .map(|p| lexicon.words(*p).iter().map(String::as_str).collect())
        .collect();
    for order in &mut word_orders {
        order.shuffle(&mut rng);
    }
    let mut cursor = [0usize; 3];

    let samples = (0..n)
        .map(|i| {
            let label = Polarity::ALL[i % 3];
            let words = &word_orders[label.index()];
            let opinion = words[cursor[label.index()] % words.len()];
            cursor[label.index()] += 1;
            let aspect = SYNTHETIC_ASPECTS[rng.gen_range(0..SYNTHETIC_ASPECTS.len())];
            let template = SYNTHETIC_TEMPLATES[rng.gen_range(0..SYNTHETIC_TEMPLATES.len())];
            let text = template.replace("{a}", aspect).replace("{o}", opinion);
            let tokens = tokenize(&text);
            let start = tokens
                .iter()
                .position(|t| t == aspect)
                .expect("aspect present in template");
            Sample {
                id: format!("{id_prefix}-{seed}-{i:05}"),
                tokens,
                aspects: vec![AspectSpan {
                    start,
                    end: start + 1,
                    surface: aspect.to_string(),
                }],
                label,
                aspect_index: 0,
            }
        })
        .collect();
    Dataset::new(samples)
}

/// Training corpus of `n_train` samples plus a disjoint held-out split of
/// `n_test` samples drawn with a derived seed.
pub fn synthetic_split(n_train: usize, n_test: usize, seed: u64, lexicon: &Lexicon) -> (Dataset, Dataset) {
    let train = generate_synthetic_with_prefix(n_train, seed, lexicon, "syn");
    let test = generate_synthetic_with_prefix(
        n_test,
        seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1),
        lexicon,
        "syntest",
    );
    (train, test)
}
