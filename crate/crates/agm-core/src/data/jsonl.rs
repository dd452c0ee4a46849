//! Line-delimited example files: one record per line with fields
//! `{"text": string, "label": 0|1, "domain": string}`.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Example, Tokenizer};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JsonlRecord {
    pub text: String,
    pub label: u8,
    pub domain: String,
}

/// Write examples in the external JSONL format (text/label/domain only).
pub fn write_jsonl(examples: &[Example], path: &Path) -> Result<()> {
    let mut out = fs::File::create(path)?;
    for e in examples {
        let rec = JsonlRecord {
            text: e.text.clone(),
            label: e.label,
            domain: e.domain.clone(),
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Read a JSONL file written by [`write_jsonl`]. Ids derive from the given
/// prefix plus the line number, so distinct files yield distinct ids.
pub fn read_jsonl(path: &Path, tokenizer: &Tokenizer, id_prefix: &str) -> Result<Vec<Example>> {
    let file = fs::File::open(path)
        .map_err(|e| Error::missing(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonlRecord = serde_json::from_str(&line).map_err(|e| {
            Error::schema(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        if rec.label > 1 {
            return Err(Error::schema(format!(
                "{}:{}: label {} outside {{0,1}}",
                path.display(),
                lineno + 1,
                rec.label
            )));
        }
        out.push(Example {
            id: format!("{id_prefix}-{lineno:06}"),
            tokens: tokenizer.encode(&rec.text),
            text: rec.text,
            label: rec.label,
            domain: rec.domain,
        });
    }
    Ok(out)
}

/// Ingest an external corpus file. Each line must carry `text` and `label`;
/// the domain tag is supplied by the caller and overrides any in-file value.
pub fn ingest_jsonl(path: &Path, domain_name: &str, tokenizer: &Tokenizer) -> Result<Vec<Example>> {
    #[derive(Deserialize)]
    struct RawRecord {
        text: String,
        label: serde_json::Value,
    }

    let file = fs::File::open(path)
        .map_err(|e| Error::missing(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RawRecord = serde_json::from_str(&line).map_err(|e| {
            Error::schema(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        let label = match rec.label.as_u64() {
            Some(0) => 0u8,
            Some(1) => 1u8,
            _ => {
                return Err(Error::schema(format!(
                    "{}:{}: label {} outside {{0,1}}",
                    path.display(),
                    lineno + 1,
                    rec.label
                )))
            }
        };
        out.push(Example {
            id: format!("{domain_name}-{lineno:06}"),
            tokens: tokenizer.encode(&rec.text),
            text: rec.text,
            label,
            domain: domain_name.to_string(),
        });
    }
    Ok(out)
}
