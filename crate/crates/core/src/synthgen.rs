//! Synthetic parallel corpora from small probabilistic grammars.
//!
//! A grammar names per-language token inventories keyed by UPOS class, a
//! set of UPOS-sequence templates with sampling weights, and a word-order
//! transform per language. Generation is deterministic under a seed, and
//! the emitted target UPOS sequence always matches the realized target
//! tokens, so generated data carries zero tag noise.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{EvalSentence, EvalSet, LanguageRegistry, ParallelExample, UposTag};
use crate::error::{CoreError, Result};

/// Word-order transform applied when a language realizes a template.
/// A trailing run of PUNCT tags always stays at the end.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WordOrder {
    Identity,
    /// Moves VERB and AUX slots to the end of the clause.
    VerbFinal,
    /// Reverses the clause.
    Reverse,
}

impl WordOrder {
    /// Permutation of template positions this transform induces.
    pub fn permutation(self, tags: &[UposTag]) -> Vec<usize> {
        let mut end = tags.len();
        while end > 0 && tags[end - 1] == UposTag::PUNCT {
            end -= 1;
        }
        let clause: Vec<usize> = (0..end).collect();
        let mut order = match self {
            WordOrder::Identity => clause,
            WordOrder::VerbFinal => {
                let (verbs, rest): (Vec<usize>, Vec<usize>) = clause
                    .into_iter()
                    .partition(|&i| matches!(tags[i], UposTag::VERB | UposTag::AUX));
                rest.into_iter().chain(verbs).collect()
            }
            WordOrder::Reverse => clause.into_iter().rev().collect(),
        };
        order.extend(end..tags.len());
        order
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GrammarLanguage {
    pub order: WordOrder,
    /// Token inventory per UPOS class name.
    pub inventory: BTreeMap<String, Vec<String>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Template {
    pub tags: Vec<String>,
    pub weight: f64,
}

/// A toy grammar: languages, their inventories and word orders, and the
/// shared template set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToyGrammar {
    pub languages: BTreeMap<String, GrammarLanguage>,
    pub templates: Vec<Template>,
}

impl ToyGrammar {
    pub fn from_json(json: &str) -> Result<Self> {
        let grammar: ToyGrammar =
            serde_json::from_str(json).map_err(|e| CoreError::parse(format!("grammar: {e}")))?;
        grammar.validate()?;
        Ok(grammar)
    }

    pub fn validate(&self) -> Result<()> {
        if self.languages.is_empty() {
            return Err(CoreError::invalid("grammar defines no languages"));
        }
        if self.templates.is_empty() {
            return Err(CoreError::invalid("grammar defines no templates"));
        }
        for (i, t) in self.templates.iter().enumerate() {
            if !(t.weight > 0.0) {
                return Err(CoreError::invalid(format!(
                    "template {i} has non-positive weight"
                )));
            }
            if t.tags.is_empty() {
                return Err(CoreError::invalid(format!("template {i} is empty")));
            }
            for tag in &t.tags {
                if UposTag::parse_real(tag).is_none() {
                    return Err(CoreError::invalid(format!(
                        "template {i}: unknown UPOS '{tag}'"
                    )));
                }
                for (iso, lang) in &self.languages {
                    match lang.inventory.get(tag) {
                        Some(tokens) if !tokens.is_empty() => {}
                        _ => {
                            return Err(CoreError::invalid(format!(
                                "language '{iso}' has no tokens for UPOS '{tag}' used by template {i}"
                            )))
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn language(&self, iso: &str) -> Result<&GrammarLanguage> {
        self.languages
            .get(iso)
            .ok_or_else(|| CoreError::invalid(format!("language '{iso}' not in grammar")))
    }

    fn template_tags(&self, idx: usize) -> Vec<UposTag> {
        self.templates[idx]
            .tags
            .iter()
            .map(|t| UposTag::parse_real(t).expect("validated tag"))
            .collect()
    }

    /// Tags of template `idx` as realized by `lang` (post-transform).
    pub fn realized_tags(&self, idx: usize, lang: &GrammarLanguage) -> Vec<UposTag> {
        let tags = self.template_tags(idx);
        lang.order
            .permutation(&tags)
            .into_iter()
            .map(|i| tags[i])
            .collect()
    }

    fn realize<R: Rng>(
        &self,
        idx: usize,
        lang: &GrammarLanguage,
        rng: &mut R,
    ) -> (String, Vec<UposTag>) {
        let tags = self.template_tags(idx);
        let tokens: Vec<&String> = self.templates[idx]
            .tags
            .iter()
            .map(|tag| {
                let pool = &lang.inventory[tag];
                &pool[rng.gen_range(0..pool.len())]
            })
            .collect();
        let perm = lang.order.permutation(&tags);
        let text = perm
            .iter()
            .map(|&i| tokens[i].as_str())
            .collect::<Vec<_>>()
            .join(" ");
        let upos = perm.into_iter().map(|i| tags[i]).collect();
        (text, upos)
    }
}

pub fn load_grammar(path: impl AsRef<Path>) -> Result<ToyGrammar> {
    let path = path.as_ref();
    let json =
        fs::read_to_string(path).map_err(|e| CoreError::io(path.display().to_string(), e))?;
    ToyGrammar::from_json(&json).map_err(|e| CoreError::parse(format!("{}: {e}", path.display())))
}

/// Samples `count` aligned pairs: the source side realized in `src_iso`,
/// the UPOS sequence taken from the target realization in `tgt_iso`.
pub fn generate_pairs(
    grammar: &ToyGrammar,
    src_iso: &str,
    tgt_iso: &str,
    count: usize,
    seed: u64,
    registry: &mut LanguageRegistry,
) -> Result<Vec<ParallelExample>> {
    if count < 1 {
        return Err(CoreError::invalid("count must be at least 1"));
    }
    let src = grammar.language(src_iso)?.clone();
    let tgt = grammar.language(tgt_iso)?.clone();
    let src_lang = registry.register(src_iso)?;
    let tgt_lang = registry.register(tgt_iso)?;
    if src_lang == tgt_lang {
        return Err(CoreError::invalid("source and target language must differ"));
    }

    let weights: Vec<f64> = grammar.templates.iter().map(|t| t.weight).collect();
    let dist = WeightedIndex::new(&weights)
        .map_err(|e| CoreError::invalid(format!("bad template weights: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let idx = dist.sample(&mut rng);
        let (src_text, _) = grammar.realize(idx, &src, &mut rng);
        let (_, tgt_upos) = grammar.realize(idx, &tgt, &mut rng);
        out.push(ParallelExample::new(src_lang, tgt_lang, src_text, tgt_upos)?);
    }
    Ok(out)
}

/// Builds an evaluation set of `groups` distinct templates with `per_group`
/// distinct realizations each; group ids follow template choice order.
pub fn generate_eval_set(
    grammar: &ToyGrammar,
    lang_iso: &str,
    groups: usize,
    per_group: usize,
    seed: u64,
    registry: &mut LanguageRegistry,
) -> Result<EvalSet> {
    if groups < 2 {
        return Err(CoreError::invalid("need at least 2 groups"));
    }
    if per_group < 6 {
        return Err(CoreError::invalid("need at least 6 sentences per group"));
    }
    let lang = grammar.language(lang_iso)?.clone();
    let lang_id = registry.register(lang_iso)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Choose templates with pairwise-distinct realized tag sequences.
    let mut candidates: Vec<usize> = (0..grammar.templates.len()).collect();
    candidates.shuffle(&mut rng);
    let mut chosen: Vec<usize> = Vec::new();
    let mut seen_tags: Vec<Vec<UposTag>> = Vec::new();
    for idx in candidates {
        if chosen.len() == groups {
            break;
        }
        let tags = grammar.realized_tags(idx, &lang);
        if !seen_tags.contains(&tags) {
            seen_tags.push(tags);
            chosen.push(idx);
        }
    }
    if chosen.len() < groups {
        return Err(CoreError::invalid(format!(
            "requested {groups} groups but the grammar yields only {} distinct templates",
            chosen.len()
        )));
    }

    let mut sentences = Vec::new();
    for (gid, &idx) in chosen.iter().enumerate() {
        // Distinctness has to be possible at all before sampling for it.
        let capacity: usize = grammar.templates[idx]
            .tags
            .iter()
            .map(|tag| lang.inventory[tag].len())
            .fold(1usize, |acc, n| acc.saturating_mul(n));
        if capacity < per_group {
            return Err(CoreError::invalid(format!(
                "template {idx} admits only {capacity} distinct realizations, need {per_group}"
            )));
        }
        let mut texts: Vec<String> = Vec::new();
        let mut attempts = 0usize;
        while texts.len() < per_group {
            attempts += 1;
            if attempts > per_group * 1000 {
                return Err(CoreError::invalid(format!(
                    "could not sample {per_group} distinct realizations of template {idx}"
                )));
            }
            let (text, upos) = grammar.realize(idx, &lang, &mut rng);
            if texts.contains(&text) {
                continue;
            }
            texts.push(text.clone());
            sentences.push(EvalSentence {
                lang: lang_id,
                text,
                upos,
                group_id: gid,
            });
        }
    }
    Ok(EvalSet {
        sentences,
        min_group_size: per_group,
    })
}
