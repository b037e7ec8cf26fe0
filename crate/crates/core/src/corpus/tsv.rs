//! 4-column TSV ingestion for parallel training pairs.
//!
//! Each non-empty line is `src_iso<TAB>tgt_iso<TAB>src_text<TAB>tags` where
//! `tags` is a space-joined UPOS sequence. UTF-8, LF line endings; literal
//! tabs are forbidden inside fields.

use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::corpus::{LanguageRegistry, ParallelExample, UposTag};
use crate::error::{CoreError, Result};

/// Parses a pairs TSV file, registering unseen languages as they appear.
pub fn parse_pairs_tsv(
    path: impl AsRef<Path>,
    registry: &mut LanguageRegistry,
) -> Result<Vec<ParallelExample>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| CoreError::io(path.display().to_string(), e))?;
    parse_pairs_tsv_reader(file, registry)
        .map_err(|e| CoreError::parse(format!("{}: {e}", path.display())))
}

/// Reader-based variant of [`parse_pairs_tsv`]; errors carry 1-based line
/// numbers.
pub fn parse_pairs_tsv_reader<R: Read>(
    reader: R,
    registry: &mut LanguageRegistry,
) -> Result<Vec<ParallelExample>> {
    let reader = BufReader::new(reader);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.map_err(|e| CoreError::parse(format!("line {lineno}: {e}")))?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(CoreError::parse(format!(
                "malformed line {lineno}: expected 4 tab-separated fields, found {}",
                fields.len()
            )));
        }
        let src_lang = registry
            .register(fields[0])
            .map_err(|e| CoreError::parse(format!("line {lineno}: {e}")))?;
        let tgt_lang = registry
            .register(fields[1])
            .map_err(|e| CoreError::parse(format!("line {lineno}: {e}")))?;
        let mut tags = Vec::new();
        for tok in fields[3].split_whitespace() {
            let tag = UposTag::parse_real(tok).ok_or_else(|| {
                CoreError::parse(format!("unknown UPOS '{tok}' at line {lineno}"))
            })?;
            tags.push(tag);
        }
        let example = ParallelExample::new(src_lang, tgt_lang, fields[2], tags)
            .map_err(|e| CoreError::parse(format!("malformed line {lineno}: {e}")))?;
        out.push(example);
    }
    Ok(out)
}

/// Serializes examples back to the TSV format accepted by
/// [`parse_pairs_tsv`].
pub fn write_pairs_tsv<W: Write>(
    writer: &mut W,
    examples: &[ParallelExample],
    registry: &LanguageRegistry,
) -> Result<()> {
    for ex in examples {
        let tags: Vec<&str> = ex.tgt_upos.iter().map(|t| t.as_str()).collect();
        writeln!(
            writer,
            "{}\t{}\t{}\t{}",
            registry.iso(ex.src_lang),
            registry.iso(ex.tgt_lang),
            ex.src_text,
            tags.join(" ")
        )
        .map_err(|e| CoreError::parse(format!("write failed: {e}")))?;
    }
    Ok(())
}
