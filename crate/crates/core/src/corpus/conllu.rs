//! CoNLL-U treebank reader.
//!
//! Only the FORM and UPOS columns are consumed. Multiword-token ranges
//! (`3-4`) and empty nodes (`5.1`) are skipped; a word line with `_` in the
//! UPOS column disqualifies its whole sentence, which is counted in the
//! report instead of being returned.

use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use crate::corpus::{LanguageId, TaggedSentence, UposTag};
use crate::error::{CoreError, Result};

/// Sentences extracted from a CoNLL-U file plus a count of sentences skipped
/// for missing UPOS annotation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConlluReport {
    pub sentences: Vec<TaggedSentence>,
    pub skipped: usize,
}

/// Parses a CoNLL-U file into tagged sentences (group ids unassigned).
pub fn parse_conllu(path: impl AsRef<Path>, lang: LanguageId) -> Result<ConlluReport> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| CoreError::io(path.display().to_string(), e))?;
    parse_conllu_reader(file, lang).map_err(|e| CoreError::parse(format!("{}: {e}", path.display())))
}

pub fn parse_conllu_reader<R: Read>(reader: R, lang: LanguageId) -> Result<ConlluReport> {
    let reader = BufReader::new(reader);
    let mut sentences = Vec::new();
    let mut skipped = 0usize;

    let mut forms: Vec<String> = Vec::new();
    let mut tags: Vec<UposTag> = Vec::new();
    let mut missing_upos = false;

    let mut flush = |forms: &mut Vec<String>, tags: &mut Vec<UposTag>, missing: &mut bool| {
        if !forms.is_empty() {
            if *missing {
                skipped += 1;
            } else {
                sentences.push(TaggedSentence {
                    lang,
                    text: forms.join(" "),
                    upos: std::mem::take(tags),
                });
            }
        }
        forms.clear();
        tags.clear();
        *missing = false;
    };

    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.map_err(|e| CoreError::parse(format!("line {lineno}: {e}")))?;
        if line.is_empty() {
            flush(&mut forms, &mut tags, &mut missing_upos);
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 4 {
            return Err(CoreError::parse(format!(
                "line {lineno}: expected at least 4 columns, found {}",
                fields.len()
            )));
        }
        let id = fields[0];
        // Multiword-token ranges and empty nodes carry no usable UPOS.
        if id.contains('-') || id.contains('.') {
            continue;
        }
        forms.push(fields[1].to_string());
        match fields[3] {
            "_" => missing_upos = true,
            tok => match UposTag::parse_real(tok) {
                Some(tag) => tags.push(tag),
                None => {
                    return Err(CoreError::parse(format!(
                        "unknown UPOS '{tok}' at line {lineno}"
                    )))
                }
            },
        }
    }
    flush(&mut forms, &mut tags, &mut missing_upos);

    Ok(ConlluReport { sentences, skipped })
}
