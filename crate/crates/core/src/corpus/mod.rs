//! Parallel-corpus and evaluation-data ingestion.
//!
//! Raw training data is a 4-column TSV of (source ISO, target ISO, source
//! text, target UPOS tags); evaluation data comes from CoNLL-U treebanks or
//! from the synthetic generator. All text is expected to be pre-segmented:
//! tokens are whitespace-delimited for every language, including scripts
//! that are not naturally spaced.

mod conllu;
mod jsonl;
mod tsv;

pub use conllu::{parse_conllu, ConlluReport};
pub use jsonl::{read_eval_set_jsonl, write_eval_set_jsonl};
pub use tsv::{parse_pairs_tsv, parse_pairs_tsv_reader, write_pairs_tsv};

use std::collections::HashMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// The 17 universal POS tags plus the decoder specials.
///
/// `Bos`/`Eos`/`Pad` never appear in ingested data; they exist only as
/// decoder inputs and targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[allow(clippy::upper_case_acronyms)]
pub enum UposTag {
    ADJ,
    ADP,
    ADV,
    AUX,
    CCONJ,
    DET,
    INTJ,
    NOUN,
    NUM,
    PART,
    PRON,
    PROPN,
    PUNCT,
    SCONJ,
    SYM,
    VERB,
    X,
    BOS,
    EOS,
    PAD,
}

impl UposTag {
    /// Total tagset size including specials.
    pub const COUNT: usize = 20;
    /// Number of real (ingestable) tags.
    pub const REAL_COUNT: usize = 17;

    pub const ALL: [UposTag; Self::COUNT] = [
        UposTag::ADJ,
        UposTag::ADP,
        UposTag::ADV,
        UposTag::AUX,
        UposTag::CCONJ,
        UposTag::DET,
        UposTag::INTJ,
        UposTag::NOUN,
        UposTag::NUM,
        UposTag::PART,
        UposTag::PRON,
        UposTag::PROPN,
        UposTag::PUNCT,
        UposTag::SCONJ,
        UposTag::SYM,
        UposTag::VERB,
        UposTag::X,
        UposTag::BOS,
        UposTag::EOS,
        UposTag::PAD,
    ];

    /// Dense id in `[0, 20)`; specials occupy the top three slots.
    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<UposTag> {
        Self::ALL.get(id).copied()
    }

    pub fn is_special(self) -> bool {
        matches!(self, UposTag::BOS | UposTag::EOS | UposTag::PAD)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            UposTag::ADJ => "ADJ",
            UposTag::ADP => "ADP",
            UposTag::ADV => "ADV",
            UposTag::AUX => "AUX",
            UposTag::CCONJ => "CCONJ",
            UposTag::DET => "DET",
            UposTag::INTJ => "INTJ",
            UposTag::NOUN => "NOUN",
            UposTag::NUM => "NUM",
            UposTag::PART => "PART",
            UposTag::PRON => "PRON",
            UposTag::PROPN => "PROPN",
            UposTag::PUNCT => "PUNCT",
            UposTag::SCONJ => "SCONJ",
            UposTag::SYM => "SYM",
            UposTag::VERB => "VERB",
            UposTag::X => "X",
            UposTag::BOS => "BOS",
            UposTag::EOS => "EOS",
            UposTag::PAD => "PAD",
        }
    }

    /// Parses a real (non-special) tag as it appears in data files.
    pub fn parse_real(s: &str) -> Option<UposTag> {
        let tag = match s {
            "ADJ" => UposTag::ADJ,
            "ADP" => UposTag::ADP,
            "ADV" => UposTag::ADV,
            "AUX" => UposTag::AUX,
            "CCONJ" => UposTag::CCONJ,
            "DET" => UposTag::DET,
            "INTJ" => UposTag::INTJ,
            "NOUN" => UposTag::NOUN,
            "NUM" => UposTag::NUM,
            "PART" => UposTag::PART,
            "PRON" => UposTag::PRON,
            "PROPN" => UposTag::PROPN,
            "PUNCT" => UposTag::PUNCT,
            "SCONJ" => UposTag::SCONJ,
            "SYM" => UposTag::SYM,
            "VERB" => UposTag::VERB,
            "X" => UposTag::X,
            _ => return None,
        };
        Some(tag)
    }
}

impl fmt::Display for UposTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Index of a registered language. The registry maps it back to its ISO code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LanguageId(pub u32);

impl LanguageId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Registry assigning contiguous indices to ISO codes in registration order.
///
/// Registration is not synchronized; register every language during
/// single-threaded startup.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LanguageRegistry {
    isos: Vec<String>,
    by_iso: HashMap<String, u32>,
}

impl LanguageRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Rebuilds a registry from ISO codes in index order.
    pub fn from_isos<I: IntoIterator<Item = S>, S: AsRef<str>>(isos: I) -> Result<Self> {
        let mut reg = Self::new();
        for iso in isos {
            reg.register(iso.as_ref())?;
        }
        Ok(reg)
    }

    /// Registers `iso` if unseen and returns its id.
    pub fn register(&mut self, iso: &str) -> Result<LanguageId> {
        if let Some(&idx) = self.by_iso.get(iso) {
            return Ok(LanguageId(idx));
        }
        if iso.len() != 2 || !iso.bytes().all(|b| b.is_ascii_lowercase()) {
            return Err(CoreError::invalid(format!(
                "language code '{iso}' is not a 2-letter lowercase ISO code"
            )));
        }
        let idx = self.isos.len() as u32;
        self.isos.push(iso.to_string());
        self.by_iso.insert(iso.to_string(), idx);
        Ok(LanguageId(idx))
    }

    pub fn get(&self, iso: &str) -> Option<LanguageId> {
        self.by_iso.get(iso).map(|&i| LanguageId(i))
    }

    pub fn iso(&self, id: LanguageId) -> &str {
        &self.isos[id.index()]
    }

    pub fn len(&self) -> usize {
        self.isos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.isos.is_empty()
    }

    /// ISO codes in index order.
    pub fn isos(&self) -> &[String] {
        &self.isos
    }
}

/// One aligned pair: a source sentence and the UPOS sequence of its
/// translation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParallelExample {
    pub src_lang: LanguageId,
    pub tgt_lang: LanguageId,
    pub src_text: String,
    pub tgt_upos: Vec<UposTag>,
}

impl ParallelExample {
    pub fn new(
        src_lang: LanguageId,
        tgt_lang: LanguageId,
        src_text: impl Into<String>,
        tgt_upos: Vec<UposTag>,
    ) -> Result<Self> {
        let src_text = src_text.into();
        if src_text.trim().is_empty() {
            return Err(CoreError::invalid("source text is empty"));
        }
        if tgt_upos.is_empty() {
            return Err(CoreError::invalid("target UPOS sequence is empty"));
        }
        if let Some(t) = tgt_upos.iter().find(|t| t.is_special()) {
            return Err(CoreError::invalid(format!(
                "special tag {t} is not allowed in ingested data"
            )));
        }
        if src_lang == tgt_lang {
            return Err(CoreError::invalid(
                "source and target language must differ",
            ));
        }
        Ok(Self {
            src_lang,
            tgt_lang,
            src_text,
            tgt_upos,
        })
    }
}

/// A tagged sentence before group assignment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaggedSentence {
    pub lang: LanguageId,
    pub text: String,
    pub upos: Vec<UposTag>,
}

/// A held-out sentence with its UPOS group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalSentence {
    pub lang: LanguageId,
    pub text: String,
    pub upos: Vec<UposTag>,
    pub group_id: usize,
}

/// Held-out sentences partitioned into groups of identical UPOS sequences.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalSet {
    pub sentences: Vec<EvalSentence>,
    pub min_group_size: usize,
}

impl EvalSet {
    pub fn group_count(&self) -> usize {
        self.sentences
            .iter()
            .map(|s| s.group_id + 1)
            .max()
            .unwrap_or(0)
    }

    /// Sentence indices per group, in group-id order.
    pub fn groups(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.group_count()];
        for (i, s) in self.sentences.iter().enumerate() {
            groups[s.group_id].push(i);
        }
        groups
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }
}

const SENTENCE_FINAL: [char; 7] = ['.', '!', '?', '…', '。', '！', '？'];
const CLOSING_QUOTES: [char; 7] = ['"', '\'', '”', '’', '»', '」', '』'];

fn is_sentence_final(c: char) -> bool {
    SENTENCE_FINAL.contains(&c)
}

fn is_closing_quote(c: char) -> bool {
    CLOSING_QUOTES.contains(&c)
}

/// Completeness heuristic: the trimmed text must end in sentence-final
/// punctuation, optionally followed by closing quotes.
pub fn ends_complete(text: &str) -> bool {
    let trimmed = text.trim_end();
    let mut chars = trimmed.chars().rev().skip_while(|&c| is_closing_quote(c));
    chars.next().is_some_and(is_sentence_final)
}

/// Single-sentence heuristic: no sentence-final punctuation may be followed
/// by further content (anything other than more punctuation, closing quotes,
/// or whitespace).
pub fn is_single_sentence(text: &str) -> bool {
    let mut seen_final = false;
    for c in text.trim_end().chars() {
        if is_sentence_final(c) {
            seen_final = true;
        } else if seen_final && !is_closing_quote(c) && !c.is_whitespace() {
            return false;
        }
    }
    true
}

fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Prunes a parallel corpus: keeps examples with at least `min_words`
/// whitespace tokens that form exactly one complete sentence, then
/// deduplicates on (src_lang, tgt_lang, src_text) keeping first occurrences.
///
/// Idempotent; order preserving.
pub fn filter_examples(
    examples: Vec<ParallelExample>,
    min_words: usize,
) -> Vec<ParallelExample> {
    assert!(min_words >= 1, "min_words must be at least 1");
    let mut seen: HashMap<(LanguageId, LanguageId, String), ()> = HashMap::new();
    let mut kept = Vec::new();
    for ex in examples {
        if word_count(&ex.src_text) < min_words {
            continue;
        }
        if !is_single_sentence(&ex.src_text) || !ends_complete(&ex.src_text) {
            continue;
        }
        let key = (ex.src_lang, ex.tgt_lang, ex.src_text.clone());
        if seen.insert(key, ()).is_none() {
            kept.push(ex);
        }
    }
    kept
}

/// Groups sentences by exact UPOS-sequence equality, drops groups smaller
/// than `min_group_size`, optionally samples a fixed number of groups with
/// the seeded generator, and assigns contiguous group ids.
pub fn build_eval_set(
    sentences: Vec<TaggedSentence>,
    min_group_size: usize,
    sample_groups: Option<usize>,
    seed: u64,
) -> Result<EvalSet> {
    if min_group_size < 2 {
        return Err(CoreError::invalid(format!(
            "min_group_size must be at least 2, got {min_group_size}"
        )));
    }
    // Group keys in first-occurrence order so grouping is deterministic.
    let mut key_order: Vec<Vec<UposTag>> = Vec::new();
    let mut by_key: HashMap<Vec<UposTag>, Vec<usize>> = HashMap::new();
    for (i, s) in sentences.iter().enumerate() {
        by_key
            .entry(s.upos.clone())
            .or_insert_with(|| {
                key_order.push(s.upos.clone());
                Vec::new()
            })
            .push(i);
    }

    let mut eligible: Vec<&Vec<usize>> = Vec::new();
    for key in &key_order {
        let members = &by_key[key];
        if members.len() >= min_group_size {
            eligible.push(members);
        }
    }

    let retained: Vec<&Vec<usize>> = match sample_groups {
        None => eligible,
        Some(want) => {
            if want > eligible.len() {
                return Err(CoreError::invalid(format!(
                    "requested {want} groups but only {} have at least {min_group_size} sentences",
                    eligible.len()
                )));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut idx: Vec<usize> = (0..eligible.len()).collect();
            idx.shuffle(&mut rng);
            let mut chosen: Vec<usize> = idx.into_iter().take(want).collect();
            chosen.sort_unstable();
            chosen.into_iter().map(|i| eligible[i]).collect()
        }
    };

    let mut out = Vec::new();
    for (gid, members) in retained.iter().enumerate() {
        for &i in members.iter() {
            let s = &sentences[i];
            out.push(EvalSentence {
                lang: s.lang,
                text: s.text.clone(),
                upos: s.upos.clone(),
                group_id: gid,
            });
        }
    }
    Ok(EvalSet {
        sentences: out,
        min_group_size,
    })
}
