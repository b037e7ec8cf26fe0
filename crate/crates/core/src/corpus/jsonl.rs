//! JSON-lines serialization of evaluation sets.
//!
//! One object per sentence: `{"lang": iso, "text": ..., "upos": [...],
//! "group_id": n}`. Line position is the sentence id referenced by external
//! embedding files.

use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{EvalSentence, EvalSet, LanguageRegistry, UposTag};
use crate::error::{CoreError, Result};

#[derive(Serialize, Deserialize)]
struct Record {
    lang: String,
    text: String,
    upos: Vec<String>,
    group_id: usize,
}

pub fn write_eval_set_jsonl<W: Write>(
    writer: &mut W,
    set: &EvalSet,
    registry: &LanguageRegistry,
) -> Result<()> {
    for s in &set.sentences {
        let rec = Record {
            lang: registry.iso(s.lang).to_string(),
            text: s.text.clone(),
            upos: s.upos.iter().map(|t| t.as_str().to_string()).collect(),
            group_id: s.group_id,
        };
        let line = serde_json::to_string(&rec)
            .map_err(|e| CoreError::parse(format!("serialize failed: {e}")))?;
        writeln!(writer, "{line}").map_err(|e| CoreError::parse(format!("write failed: {e}")))?;
    }
    Ok(())
}

/// Reads an evaluation set, registering unseen languages. `min_group_size`
/// is not stored in the file; the given value is attached to the result.
pub fn read_eval_set_jsonl(
    path: impl AsRef<Path>,
    registry: &mut LanguageRegistry,
    min_group_size: usize,
) -> Result<EvalSet> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| CoreError::io(path.display().to_string(), e))?;
    read_eval_set_jsonl_reader(file, registry, min_group_size)
        .map_err(|e| CoreError::parse(format!("{}: {e}", path.display())))
}

pub fn read_eval_set_jsonl_reader<R: Read>(
    reader: R,
    registry: &mut LanguageRegistry,
    min_group_size: usize,
) -> Result<EvalSet> {
    let reader = BufReader::new(reader);
    let mut sentences = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.map_err(|e| CoreError::parse(format!("line {lineno}: {e}")))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line)
            .map_err(|e| CoreError::parse(format!("line {lineno}: {e}")))?;
        let lang = registry
            .register(&rec.lang)
            .map_err(|e| CoreError::parse(format!("line {lineno}: {e}")))?;
        let mut upos = Vec::new();
        for tok in &rec.upos {
            let tag = UposTag::parse_real(tok).ok_or_else(|| {
                CoreError::parse(format!("unknown UPOS '{tok}' at line {lineno}"))
            })?;
            upos.push(tag);
        }
        sentences.push(EvalSentence {
            lang,
            text: rec.text,
            upos,
            group_id: rec.group_id,
        });
    }
    Ok(EvalSet {
        sentences,
        min_group_size,
    })
}
