//! Polarity lexicon shared by the synthetic corpus generator and the
//! lexicon infill backend.

use std::path::Path;

use thiserror::Error;

use crate::corpus::Polarity;

const DEFAULT_LEXICON: &str = include_str!("../assets/lexicon.tsv");

#[derive(Debug, Error)]
pub enum LexiconError {
    #[error("failed to read lexicon {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("lexicon line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("lexicon has no words for polarity {0}")]
    EmptyPolarity(Polarity),
}

/// Opinion words grouped by polarity, in file order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lexicon {
    words: [Vec<String>; 3],
}

impl Lexicon {
    /// The lexicon shipped with the crate.
    pub fn bundled() -> Self {
        Self::parse(DEFAULT_LEXICON).expect("bundled lexicon is valid")
    }

    pub fn load(path: &Path) -> Result<Self, LexiconError> {
        let text = std::fs::read_to_string(path).map_err(|source| LexiconError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Parses `polarity<TAB>word` lines. Blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self, LexiconError> {
        let mut words: [Vec<String>; 3] = Default::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim_end();
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (pol, word) = line.split_once('\t').ok_or_else(|| LexiconError::Parse {
                line: idx + 1,
                reason: "expected `polarity<TAB>word`".into(),
            })?;
            let polarity: Polarity = pol.trim().parse().map_err(|_| LexiconError::Parse {
                line: idx + 1,
                reason: format!("unknown polarity {pol:?}"),
            })?;
            let word = word.trim().to_lowercase();
            if word.is_empty() || word.chars().any(char::is_whitespace) {
                return Err(LexiconError::Parse {
                    line: idx + 1,
                    reason: "word must be a single non-empty token".into(),
                });
            }
            words[polarity.index()].push(word);
        }
        for p in Polarity::ALL {
            if words[p.index()].is_empty() {
                return Err(LexiconError::EmptyPolarity(p));
            }
        }
        Ok(Self { words })
    }

    pub fn words(&self, polarity: Polarity) -> &[String] {
        &self.words[polarity.index()]
    }

    /// Polarity of `word`, if it is in the lexicon.
    pub fn polarity_of(&self, word: &str) -> Option<Polarity> {
        Polarity::ALL
            .into_iter()
            .find(|p| self.words[p.index()].iter().any(|w| w == word))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_lexicon_has_disjoint_polarities() {
        let lex = Lexicon::bundled();
        for p in Polarity::ALL {
            assert!(lex.words(p).len() >= 40, "{p} too small");
            for w in lex.words(p) {
                assert_eq!(lex.polarity_of(w), Some(p), "{w} appears under two polarities");
            }
        }
    }

    #[test]
    fn rejects_bad_lines() {
        assert!(matches!(
            Lexicon::parse("positive good\n"),
            Err(LexiconError::Parse { line: 1, .. })
        ));
        assert!(matches!(
            Lexicon::parse("positive\tgood\nnegative\tbad\n"),
            Err(LexiconError::EmptyPolarity(Polarity::Neutral))
        ));
    }
}
