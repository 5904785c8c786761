//! Dataset files: JSON-lines records plus a vocabulary sidecar.

use crate::error::{io_err, ModelError, Result};
use lflex_core::star::{StarRecord, StarVocab, VocabFile};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

pub const TRAIN_FILE: &str = "train.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const VOCAB_FILE: &str = "vocab.json";

pub fn write_records(path: &Path, records: &[StarRecord]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(f);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| ModelError::Data(e.to_string()))?;
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_records(path: &Path) -> Result<Vec<StarRecord>> {
    let f = std::fs::File::open(path).map_err(io_err(path))?;
    let mut out = vec![];
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let r =
            serde_json::from_str(&line).map_err(|e| ModelError::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(r);
    }
    Ok(out)
}

pub fn write_vocab(path: &Path, vocab: StarVocab) -> Result<()> {
    let text = serde_json::to_string_pretty(&VocabFile::from(vocab)).map_err(|e| ModelError::Data(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(io_err(path))
}

pub fn read_vocab(path: &Path) -> Result<StarVocab> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let f: VocabFile = serde_json::from_str(&text).map_err(|e| ModelError::Data(format!("{}: {e}", path.display())))?;
    let v = StarVocab { pool: f.pool };
    if f.size != v.size() || f.mask != v.mask() {
        return Err(ModelError::Data(format!(
            "{}: inconsistent vocabulary sidecar",
            path.display()
        )));
    }
    Ok(v)
}
