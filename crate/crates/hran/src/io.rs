//! Text formats: raw conversations, JSON Lines examples, vocabulary files.

use std::fs;
use std::io::Write;
use std::path::Path;

use hran_core::corpus::{parse_raw, Conversation, Example, Vocab};
use hran_core::Error;

use crate::error::{CliError, CliResult};

pub fn read_bytes(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::io(path, e))
}

pub fn read_text(path: &Path) -> CliResult<String> {
    String::from_utf8(read_bytes(path)?).map_err(|e| {
        let line = 1 + e.as_bytes()[..e.utf8_error().valid_up_to()]
            .iter()
            .filter(|&&b| b == b'\n')
            .count();
        CliError::format(path, format!("line {line}: invalid UTF-8"))
    })
}

/// Writes through a temporary file in the same directory, then renames, so
/// readers never see a half-written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CliError::io(path, e))?;
    tmp.write_all(bytes).map_err(|e| CliError::io(path, e))?;
    tmp.persist(path).map_err(|e| CliError::io(path, e.error))?;
    Ok(())
}

/// One conversation per line, TAB between turns, spaces between tokens.
pub fn load_raw(path: &Path) -> CliResult<Vec<Conversation>> {
    parse_raw(&read_bytes(path)?).map_err(|e| match e {
        Error::Encoding { line } => CliError::format(path, format!("line {line}: invalid UTF-8")),
        other => CliError::in_file(path, other),
    })
}

pub fn read_examples(path: &Path) -> CliResult<Vec<Example>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ex: Example =
            serde_json::from_str(line).map_err(|e| CliError::format(path, format!("line {}: {e}", n + 1)))?;
        let empty = ex.response.is_empty() || ex.context.iter().any(Vec::is_empty);
        if ex.context.len() < 2 || empty {
            return Err(CliError::format(
                path,
                format!(
                    "line {}: need two nonempty context utterances and a nonempty response",
                    n + 1
                ),
            ));
        }
        out.push(ex);
    }
    Ok(out)
}

pub fn examples_jsonl(examples: &[Example]) -> String {
    let mut out = String::new();
    for ex in examples {
        out.push_str(&serde_json::to_string(ex).expect("examples serialize"));
        out.push('\n');
    }
    out
}

pub fn write_examples(path: &Path, examples: &[Example]) -> CliResult<()> {
    write_atomic(path, examples_jsonl(examples).as_bytes())
}

pub fn read_vocab(path: &Path) -> CliResult<Vocab> {
    let text = read_text(path)?;
    let tokens = text.lines().map(str::to_string).collect();
    Vocab::from_tokens(tokens).map_err(|e| CliError::in_file(path, e))
}

pub fn vocab_text(vocab: &Vocab) -> String {
    let mut out = String::new();
    for t in vocab.tokens() {
        out.push_str(t);
        out.push('\n');
    }
    out
}

pub fn write_vocab(path: &Path, vocab: &Vocab) -> CliResult<()> {
    write_atomic(path, vocab_text(vocab).as_bytes())
}

/// Splits one utterance typed or read as text into tokens. Control
/// characters are dropped first.
pub fn tokenize(text: &str) -> Vec<String> {
    let cleaned: String = text.chars().map(|c| if c.is_control() { ' ' } else { c }).collect();
    cleaned.split_whitespace().map(str::to_string).collect()
}

/// Contexts for batch generation: one per line, TAB between turns. Every
/// line must hold at least two nonempty turns.
pub fn read_contexts(path: &Path) -> CliResult<Vec<Vec<Vec<String>>>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let turns: Vec<Vec<String>> = line.split('\t').map(tokenize).filter(|t| !t.is_empty()).collect();
        if turns.len() < 2 {
            return Err(CliError::format(
                path,
                format!("line {}: a context needs at least two turns", n + 1),
            ));
        }
        out.push(turns);
    }
    Ok(out)
}
