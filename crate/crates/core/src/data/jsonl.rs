//! JSONL pair files: one `{"prompt", "chosen", "rejected", "tag"?}` object
//! per line.
//!
//! Text maps to tokens character by character through [`ALPHABET`]; any
//! other character contributes its UTF-8 bytes modulo the vocabulary size.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{assign_split, PreferenceDataset, PreferencePair, Provenance};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, TokenSequence};

/// Printable symbol for each of the first 64 token ids.
pub const ALPHABET: &str = "0123456789abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ-_";

#[derive(Serialize, Deserialize)]
struct Line {
    prompt: String,
    chosen: String,
    rejected: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tag: Option<String>,
}

pub fn decode_text(text: &str, vocab_size: usize) -> Vec<u32> {
    let mut out = Vec::with_capacity(text.len());
    for ch in text.chars() {
        match ALPHABET.find(ch) {
            Some(i) if i < vocab_size => out.push(i as u32),
            _ => {
                let mut buf = [0u8; 4];
                for b in ch.encode_utf8(&mut buf).bytes() {
                    out.push((b as usize % vocab_size) as u32);
                }
            }
        }
    }
    out
}

pub fn encode_tokens(tokens: &TokenSequence) -> Result<String> {
    let symbols = ALPHABET.as_bytes();
    tokens
        .tokens()
        .iter()
        .map(|&t| {
            symbols
                .get(t as usize)
                .map(|&b| b as char)
                .ok_or_else(|| Error::Dataset(format!("token {t} has no printable symbol")))
        })
        .collect()
}

/// Writes one line per pair in dataset order.
pub fn write_jsonl(ds: &PreferenceDataset, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    for p in ds.pairs() {
        let line = Line {
            prompt: encode_tokens(&p.prompt)?,
            chosen: encode_tokens(&p.chosen)?,
            rejected: encode_tokens(&p.rejected)?,
            tag: (!p.tag.is_empty()).then(|| p.tag.clone()),
        };
        serde_json::to_writer(&mut buf, &line)?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Reads pairs from a JSONL file. Lines that are blank are ignored; lines
/// whose pair is invalid (identical completions, empty fields) or does not
/// fit the context window are skipped and counted in the provenance.
pub fn load_jsonl(path: &Path, config: &ModelConfig, split_seed: u64) -> Result<PreferenceDataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut pairs = Vec::new();
    let mut skipped = 0;
    for (i, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let line: Line = serde_json::from_str(raw).map_err(|e| Error::Jsonl {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        let v = config.vocab_size;
        let parsed = (|| {
            let pair = PreferencePair::new(
                TokenSequence::new(decode_text(&line.prompt, v))?,
                TokenSequence::new(decode_text(&line.chosen, v))?,
                TokenSequence::new(decode_text(&line.rejected, v))?,
                line.tag.clone().unwrap_or_default(),
            )?;
            Ok::<_, Error>(pair)
        })();
        match parsed {
            Ok(pair) if pair.fits(config.max_seq_len) => pairs.push(pair),
            _ => skipped += 1,
        }
    }
    if pairs.is_empty() {
        return Err(Error::Dataset(format!(
            "{}: no valid pairs ({skipped} skipped)",
            path.display()
        )));
    }
    let n = pairs.len();
    PreferenceDataset::new(
        pairs,
        assign_split(n, split_seed),
        Provenance::File {
            path: path.display().to_string(),
            skipped_lines: skipped,
            split_seed,
        },
    )
}
