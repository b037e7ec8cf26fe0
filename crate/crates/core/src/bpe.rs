//! Joint byte-pair-encoding vocabulary, shared across all source languages.
//!
//! Words are whitespace-delimited; every word ends with a separate `</w>`
//! marker symbol. Learning repeatedly merges the most frequent adjacent
//! symbol pair (counted left-to-right without overlap within a word, ties
//! broken by lexicographic pair order) until the vocabulary budget is spent
//! or no pair occurs at least twice. Text is NFC-normalized before learning
//! and encoding; no other normalization is applied.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};
use unicode_normalization::UnicodeNormalization;

use crate::error::{CoreError, Result};

/// Padding id, reserved for batch assembly.
pub const PAD: u32 = 0;
/// Unknown-piece id; absorbs characters unseen at learn time.
pub const UNK: u32 = 1;
/// Sequence-start id, reserved for decoder use.
pub const BOS: u32 = 2;
/// Sequence-end id, reserved for decoder use.
pub const EOS: u32 = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<eos>"];
const END_MARK: &str = "</w>";

/// An ordered merge list plus the symbol vocabulary it produces.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BpeModel {
    merges: Vec<(String, String)>,
    vocab: Vec<String>,
    by_symbol: HashMap<String, u32>,
    /// (left id, right id) -> (rank, merged id)
    merge_table: HashMap<(u32, u32), (u32, u32)>,
    end_id: u32,
}

impl BpeModel {
    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn symbol(&self, id: u32) -> Option<&str> {
        self.vocab.get(id as usize).map(|s| s.as_str())
    }

    pub fn id(&self, symbol: &str) -> Option<u32> {
        self.by_symbol.get(symbol).copied()
    }

    /// SHA-256 of the canonical text serialization; checkpoints store this
    /// to pin the vocabulary they were trained with.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.to_text().as_bytes());
        hex::encode(hasher.finalize())
    }

    fn from_parts(merges: Vec<(String, String)>, vocab: Vec<String>) -> Result<Self> {
        let mut by_symbol = HashMap::new();
        for (id, sym) in vocab.iter().enumerate() {
            if by_symbol.insert(sym.clone(), id as u32).is_some() {
                return Err(CoreError::parse(format!("duplicate symbol '{sym}'")));
            }
        }
        for (i, expect) in SPECIALS.iter().enumerate() {
            if vocab.get(i).map(|s| s.as_str()) != Some(*expect) {
                return Err(CoreError::parse(format!(
                    "special id {i} must be '{expect}'"
                )));
            }
        }
        let end_id = *by_symbol
            .get(END_MARK)
            .ok_or_else(|| CoreError::parse("missing end-of-word symbol"))?;
        let mut merge_table = HashMap::new();
        for (rank, (left, right)) in merges.iter().enumerate() {
            let &l = by_symbol
                .get(left)
                .ok_or_else(|| CoreError::parse(format!("merge input '{left}' not in vocab")))?;
            let &r = by_symbol
                .get(right)
                .ok_or_else(|| CoreError::parse(format!("merge input '{right}' not in vocab")))?;
            let merged = format!("{left}{right}");
            let &m = by_symbol.get(&merged).ok_or_else(|| {
                CoreError::parse(format!("merge output '{merged}' not in vocab"))
            })?;
            merge_table.insert((l, r), (rank as u32, m));
        }
        Ok(Self {
            merges,
            vocab,
            by_symbol,
            merge_table,
            end_id,
        })
    }
}

fn word_frequencies<I, S>(corpus: I) -> Vec<(String, u64)>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut counts: HashMap<String, u64> = HashMap::new();
    let mut order: Vec<String> = Vec::new();
    for sentence in corpus {
        let normalized: String = sentence.as_ref().nfc().collect();
        for word in normalized.split_whitespace() {
            match counts.get_mut(word) {
                Some(c) => *c += 1,
                None => {
                    counts.insert(word.to_string(), 1);
                    order.push(word.to_string());
                }
            }
        }
    }
    order
        .into_iter()
        .map(|w| {
            let c = counts[&w];
            (w, c)
        })
        .collect()
}

/// Counts adjacent pairs in `word`, left to right without overlap, adding
/// `freq` per occurrence.
fn count_pairs(word: &[u32], freq: u64, counts: &mut HashMap<(u32, u32), u64>) {
    let mut i = 0;
    while i + 1 < word.len() {
        *counts.entry((word[i], word[i + 1])).or_insert(0) += freq;
        // An identical-symbol triple would re-count the same pair at the
        // next position; consume both symbols instead.
        if i + 2 < word.len() && word[i] == word[i + 1] && word[i + 1] == word[i + 2] {
            i += 2;
        } else {
            i += 1;
        }
    }
}

/// Replaces left-to-right non-overlapping occurrences of `(l, r)` with `m`.
fn apply_merge(word: &[u32], l: u32, r: u32, m: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(word.len());
    let mut i = 0;
    while i < word.len() {
        if i + 1 < word.len() && word[i] == l && word[i + 1] == r {
            out.push(m);
            i += 2;
        } else {
            out.push(word[i]);
            i += 1;
        }
    }
    out
}

/// Learns a BPE model over the given sentences.
pub fn learn_bpe<I, S>(corpus: I, vocab_size: usize) -> Result<BpeModel>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let word_freqs = word_frequencies(corpus);
    if word_freqs.is_empty() {
        return Err(CoreError::invalid("cannot learn BPE from an empty corpus"));
    }

    let mut chars: Vec<char> = word_freqs
        .iter()
        .flat_map(|(w, _)| w.chars())
        .collect();
    chars.sort_unstable();
    chars.dedup();

    let mut vocab: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    vocab.push(END_MARK.to_string());
    vocab.extend(chars.iter().map(|c| c.to_string()));
    if vocab_size < vocab.len() {
        return Err(CoreError::invalid(format!(
            "vocab_size {vocab_size} is below the base vocabulary of {} (specials, end marker, characters)",
            vocab.len()
        )));
    }

    let by_symbol: HashMap<String, u32> = vocab
        .iter()
        .enumerate()
        .map(|(i, s)| (s.clone(), i as u32))
        .collect();
    let end_id = by_symbol[END_MARK];

    // Symbol-id sequences per distinct word, weighted by frequency.
    let mut words: Vec<(Vec<u32>, u64)> = word_freqs
        .iter()
        .map(|(w, f)| {
            let mut seq: Vec<u32> = w.chars().map(|c| by_symbol[&c.to_string()]).collect();
            seq.push(end_id);
            (seq, *f)
        })
        .collect();

    let mut vocab_full = vocab;
    let mut merges: Vec<(String, String)> = Vec::new();

    while vocab_full.len() < vocab_size {
        let mut counts: HashMap<(u32, u32), u64> = HashMap::new();
        for (word, freq) in &words {
            count_pairs(word, *freq, &mut counts);
        }
        // Highest count wins; ties broken by lexicographically smallest
        // (left, right) symbol pair so learning is deterministic.
        let mut best: Option<((u32, u32), u64)> = None;
        for (&pair, &count) in &counts {
            let better = match best {
                None => true,
                Some((bp, bc)) => {
                    count > bc
                        || (count == bc && {
                            let cand = (
                                &vocab_full[pair.0 as usize],
                                &vocab_full[pair.1 as usize],
                            );
                            let cur = (&vocab_full[bp.0 as usize], &vocab_full[bp.1 as usize]);
                            cand < cur
                        })
                }
            };
            if better {
                best = Some((pair, count));
            }
        }
        let Some(((l, r), count)) = best else { break };
        if count < 2 {
            break;
        }
        let merged = format!(
            "{}{}",
            vocab_full[l as usize], vocab_full[r as usize]
        );
        let m = vocab_full.len() as u32;
        merges.push((
            vocab_full[l as usize].clone(),
            vocab_full[r as usize].clone(),
        ));
        vocab_full.push(merged);
        for (word, _) in words.iter_mut() {
            *word = apply_merge(word, l, r, m);
        }
    }

    BpeModel::from_parts(merges, vocab_full)
}

// Sentinel for characters with no vocabulary entry; never a valid id.
const UNKNOWN_SENTINEL: u32 = u32::MAX;

fn encode_word(model: &BpeModel, word: &str) -> Vec<u32> {
    let mut seq: Vec<u32> = word
        .chars()
        .map(|c| {
            model
                .by_symbol
                .get(&c.to_string())
                .copied()
                .unwrap_or(UNKNOWN_SENTINEL)
        })
        .collect();
    if seq.iter().all(|&s| s == UNKNOWN_SENTINEL) {
        // Fully unknown words collapse to a single piece.
        return vec![UNK];
    }
    seq.push(model.end_id);

    // Greedy by rank: repeatedly apply the lowest-ranked applicable merge.
    loop {
        let mut best: Option<(u32, u32, u32, u32)> = None; // (rank, l, r, merged)
        for w in seq.windows(2) {
            if let Some(&(rank, m)) = model.merge_table.get(&(w[0], w[1])) {
                if best.map_or(true, |(br, ..)| rank < br) {
                    best = Some((rank, w[0], w[1], m));
                }
            }
        }
        let Some((_, l, r, m)) = best else { break };
        seq = apply_merge(&seq, l, r, m);
    }

    // Runs of unknown characters collapse to one UNK; a dangling end marker
    // after an unknown run folds into it.
    let mut out: Vec<u32> = Vec::with_capacity(seq.len());
    for &s in &seq {
        let id = if s == UNKNOWN_SENTINEL { UNK } else { s };
        if id == UNK && out.last() == Some(&UNK) {
            continue;
        }
        out.push(id);
    }
    if out.len() >= 2 && out[out.len() - 1] == model.end_id && out[out.len() - 2] == UNK {
        out.pop();
    }
    out
}

/// Encodes a sentence into BPE piece ids. Never emits BOS, EOS, or PAD.
pub fn encode(model: &BpeModel, sentence: &str) -> Vec<u32> {
    let normalized: String = sentence.nfc().collect();
    let mut ids = Vec::new();
    for word in normalized.split_whitespace() {
        ids.extend(encode_word(model, word));
    }
    ids
}

/// Decodes piece ids back to their symbol strings (end markers included).
pub fn decode_symbols<'a>(model: &'a BpeModel, ids: &[u32]) -> Vec<&'a str> {
    ids.iter()
        .filter_map(|&id| model.symbol(id))
        .collect()
}

impl BpeModel {
    /// Canonical text serialization: a versioned header, one merge per
    /// line, then the vocabulary as `symbol<TAB>id`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "BPE v1 {}", self.vocab.len());
        for (l, r) in &self.merges {
            let _ = writeln!(out, "{l} {r}");
        }
        for (id, sym) in self.vocab.iter().enumerate() {
            let _ = writeln!(out, "{sym}\t{id}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| CoreError::parse("empty model file"))?;
        let parts: Vec<&str> = header.split(' ').collect();
        if parts.len() != 3 || parts[0] != "BPE" || parts[1] != "v1" {
            return Err(CoreError::parse(format!(
                "bad header '{header}': expected 'BPE v1 <vocab_size>'"
            )));
        }
        let declared: usize = parts[2]
            .parse()
            .map_err(|_| CoreError::parse(format!("bad vocab size '{}'", parts[2])))?;

        let mut merges = Vec::new();
        let mut vocab_entries: Vec<(String, u32)> = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let lineno = lineno + 2;
            if let Some((sym, id)) = line.split_once('\t') {
                let id: u32 = id.parse().map_err(|_| {
                    CoreError::parse(format!("line {lineno}: bad vocab id '{id}'"))
                })?;
                vocab_entries.push((sym.to_string(), id));
            } else {
                if !vocab_entries.is_empty() {
                    return Err(CoreError::parse(format!(
                        "line {lineno}: merge listed after vocab entries"
                    )));
                }
                let (l, r) = line.split_once(' ').ok_or_else(|| {
                    CoreError::parse(format!("line {lineno}: expected 'left right'"))
                })?;
                merges.push((l.to_string(), r.to_string()));
            }
        }
        if vocab_entries.len() != declared {
            return Err(CoreError::parse(format!(
                "vocab has {} entries but header declares {declared}",
                vocab_entries.len()
            )));
        }
        let mut vocab = vec![String::new(); declared];
        let mut seen = vec![false; declared];
        for (sym, id) in vocab_entries {
            let slot = seen
                .get_mut(id as usize)
                .ok_or_else(|| CoreError::parse(format!("vocab id {id} out of range")))?;
            if *slot {
                return Err(CoreError::parse(format!("duplicate vocab id {id}")));
            }
            *slot = true;
            vocab[id as usize] = sym;
        }
        Self::from_parts(merges, vocab)
    }
}

/// Writes the model to `path` in the versioned text format.
pub fn save_bpe(model: &BpeModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, model.to_text()).map_err(|e| CoreError::io(path.display().to_string(), e))
}

/// Loads a model saved by [`save_bpe`].
pub fn load_bpe(path: impl AsRef<Path>) -> Result<BpeModel> {
    let path = path.as_ref();
    let text =
        fs::read_to_string(path).map_err(|e| CoreError::io(path.display().to_string(), e))?;
    BpeModel::from_text(&text).map_err(|e| CoreError::parse(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn classic_corpus() -> Vec<String> {
        let mut corpus = Vec::new();
        for _ in 0..5 {
            corpus.push("low".to_string());
        }
        for _ in 0..2 {
            corpus.push("lower".to_string());
        }
        for _ in 0..6 {
            corpus.push("newest".to_string());
        }
        for _ in 0..3 {
            corpus.push("widest".to_string());
        }
        corpus
    }

    /// Independent pair counter used to freeze expected merge choices.
    fn oracle_pair_counts(words: &[(&str, u64)]) -> HashMap<(String, String), u64> {
        let mut counts = HashMap::new();
        for (word, freq) in words {
            let mut syms: Vec<String> = word.chars().map(|c| c.to_string()).collect();
            syms.push(END_MARK.to_string());
            let mut i = 0;
            while i + 1 < syms.len() {
                *counts
                    .entry((syms[i].clone(), syms[i + 1].clone()))
                    .or_insert(0) += freq;
                if i + 2 < syms.len() && syms[i] == syms[i + 1] && syms[i + 1] == syms[i + 2] {
                    i += 2;
                } else {
                    i += 1;
                }
            }
        }
        counts
    }

    #[test]
    fn first_merge_on_classic_corpus() {
        // Oracle: best pair by (count, lexicographic) over the frequency table.
        let counts = oracle_pair_counts(&[("low", 5), ("lower", 2), ("newest", 6), ("widest", 3)]);
        let best = counts
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(a.0)))
            .unwrap();
        assert_eq!(best.0, &("e".to_string(), "s".to_string()));
        assert_eq!(*best.1, 9);

        let model = learn_bpe(classic_corpus(), 40).unwrap();
        assert_eq!(model.merges()[0], ("e".to_string(), "s".to_string()));
    }

    #[test]
    fn zero_merge_budget_encodes_to_characters() {
        // base vocab: 4 specials + </w> + {e,l,o,r,w} for "low"/"lower".
        let model = learn_bpe(vec!["low", "lower"], 10).unwrap();
        assert!(model.merges().is_empty());
        let ids = encode(&model, "low");
        let syms = decode_symbols(&model, &ids);
        assert_eq!(syms, vec!["l", "o", "w", "</w>"]);
    }

    #[test]
    fn repeated_character_word_counts_without_overlap() {
        let counts = oracle_pair_counts(&[("aaaa", 1)]);
        assert_eq!(counts[&("a".to_string(), "a".to_string())], 2);
        let model = learn_bpe(vec!["aaaa"], 7).unwrap();
        assert_eq!(model.merges()[0], ("a".to_string(), "a".to_string()));
    }

    #[test]
    fn vocab_below_base_is_rejected() {
        assert!(learn_bpe(vec!["ab"], 5).is_err());
        assert!(learn_bpe(Vec::<String>::new(), 100).is_err());
    }

    #[test]
    fn encode_empty_and_unknown() {
        let model = learn_bpe(vec!["low lower"], 12).unwrap();
        assert!(encode(&model, "").is_empty());
        assert_eq!(encode(&model, "zzz qq"), vec![UNK, UNK]);
        // Mixed known/unknown: the unknown run collapses to one UNK.
        let ids = encode(&model, "lozz");
        assert_eq!(ids.iter().filter(|&&i| i == UNK).count(), 1);
    }

    #[test]
    fn encode_is_deterministic_and_unk_free_on_training_text() {
        let corpus = classic_corpus();
        let model = learn_bpe(corpus.clone(), 30).unwrap();
        for s in &corpus {
            let ids = encode(model_ref(&model), s);
            assert_eq!(ids, encode(&model, s));
            assert!(ids.iter().all(|&i| i != UNK));
        }
    }

    fn model_ref(m: &BpeModel) -> &BpeModel {
        m
    }

    #[test]
    fn reconstruction_of_known_sentences() {
        let model = learn_bpe(classic_corpus(), 35).unwrap();
        let sentence = "newest widest low";
        let ids = encode(&model, sentence);
        let joined: String = decode_symbols(&model, &ids).join("").replace(END_MARK, "");
        let expect: String = sentence.split_whitespace().collect();
        assert_eq!(joined, expect);
    }

    #[test]
    fn save_load_round_trip() {
        let model = learn_bpe(classic_corpus(), 30).unwrap();
        let reparsed = BpeModel::from_text(&model.to_text()).unwrap();
        assert_eq!(model, reparsed);
        assert_eq!(encode(&model, "lowest"), encode(&reparsed, "lowest"));
    }

    #[test]
    fn truncated_file_is_rejected() {
        let model = learn_bpe(classic_corpus(), 30).unwrap();
        let text = model.to_text();
        let truncated: String = text.lines().take(3).collect::<Vec<_>>().join("\n");
        assert!(BpeModel::from_text(&truncated).is_err());
        assert!(BpeModel::from_text("garbage").is_err());
    }

    #[test]
    fn content_hash_tracks_model_identity() {
        let a = learn_bpe(classic_corpus(), 30).unwrap();
        let b = learn_bpe(classic_corpus(), 30).unwrap();
        let c = learn_bpe(classic_corpus(), 25).unwrap();
        assert_eq!(a.content_hash(), b.content_hash());
        assert_ne!(a.content_hash(), c.content_hash());
    }

    /// Oracle: repeatedly apply the lowest-ranked applicable merge, one
    /// leftmost occurrence at a time.
    fn oracle_encode_word(model: &BpeModel, word: &str) -> Vec<String> {
        let mut syms: Vec<String> = word.chars().map(|c| c.to_string()).collect();
        syms.push(END_MARK.to_string());
        let rank_of = |l: &str, r: &str| -> Option<usize> {
            model
                .merges()
                .iter()
                .position(|(ml, mr)| ml == l && mr == r)
        };
        loop {
            let mut best: Option<(usize, usize)> = None; // (rank, position)
            for i in 0..syms.len().saturating_sub(1) {
                if let Some(rank) = rank_of(&syms[i], &syms[i + 1]) {
                    if best.map_or(true, |(br, _)| rank < br) {
                        best = Some((rank, i));
                    }
                }
            }
            let Some((_, i)) = best else { break };
            let merged = format!("{}{}", syms[i], syms[i + 1]);
            syms.splice(i..=i + 1, [merged]);
        }
        syms
    }

    #[test]
    fn greedy_by_rank_matches_oracle_on_random_words() {
        use rand::Rng;
        use rand::SeedableRng;
        let model = learn_bpe(classic_corpus(), 35).unwrap();
        let alphabet: Vec<char> = "lowernst wide".chars().filter(|c| *c != ' ').collect();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..300 {
            let len = rng.gen_range(1..=8);
            let word: String = (0..len)
                .map(|_| alphabet[rng.gen_range(0..alphabet.len())])
                .collect();
            let expect = oracle_encode_word(&model, &word);
            let got = decode_symbols(&model, &encode(&model, &word));
            assert_eq!(got, expect, "word {word:?}");
        }
    }
}
