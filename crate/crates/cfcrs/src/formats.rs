//! Tab-separated graph files and JSON Lines dialogue corpora.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use cfcrs_core::corpus::DialogueRecord;
use cfcrs_core::kg::{TripleRecord, TypeRecord};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::io(path, e))
}

/// Splits non-blank lines into exactly `N` non-empty tab-separated fields.
/// Line numbers in errors are 1-based.
fn read_fields<const N: usize>(reader: impl BufRead, label: &str) -> Result<Vec<[String; N]>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(label, e))?;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        let malformed = |reason: String| Error::MalformedRecord { path: label.into(), line: i + 1, reason };
        if parts.len() != N {
            return Err(malformed(format!("expected {N} tab-separated fields, found {}", parts.len())));
        }
        if parts.iter().any(|p| p.is_empty()) {
            return Err(malformed("empty field".into()));
        }
        out.push(std::array::from_fn(|k| parts[k].to_string()));
    }
    Ok(out)
}

/// `head<TAB>relation<TAB>tail` per line.
pub fn parse_triples(reader: impl BufRead, label: &str) -> Result<Vec<TripleRecord>> {
    Ok(read_fields::<3>(reader, label)?
        .into_iter()
        .map(|[head, relation, tail]| TripleRecord { head, relation, tail })
        .collect())
}

/// `entity<TAB>type` per line.
pub fn parse_type_map(reader: impl BufRead, label: &str) -> Result<Vec<TypeRecord>> {
    Ok(read_fields::<2>(reader, label)?
        .into_iter()
        .map(|[entity, entity_type]| TypeRecord { entity, entity_type })
        .collect())
}

pub fn read_triples(path: &Path) -> Result<Vec<TripleRecord>> {
    parse_triples(open(path)?, &path.display().to_string())
}

pub fn read_type_map(path: &Path) -> Result<Vec<TypeRecord>> {
    parse_type_map(open(path)?, &path.display().to_string())
}

pub fn triples_tsv(records: &[TripleRecord]) -> String {
    records.iter().map(|r| format!("{}\t{}\t{}\n", r.head, r.relation, r.tail)).collect()
}

pub fn type_map_tsv(records: &[TypeRecord]) -> String {
    records.iter().map(|r| format!("{}\t{}\n", r.entity, r.entity_type)).collect()
}

/// One JSON value per non-blank line. `record` in errors counts parsed
/// records from 0.
pub fn parse_jsonl<T: DeserializeOwned>(reader: impl BufRead, label: &str) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line.map_err(|e| Error::io(label, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| Error::Parse { path: label.into(), record: out.len(), reason: e.to_string() })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn read_dialogues(path: &Path) -> Result<Vec<DialogueRecord>> {
    parse_jsonl(open(path)?, &path.display().to_string())
}

pub fn to_jsonl<T: Serialize>(records: &[T]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("plain data serializes"));
        s.push('\n');
    }
    s
}

pub fn read_to_string(path: &Path) -> Result<String> {
    let mut s = String::new();
    open(path)?.read_to_string(&mut s).map_err(|e| Error::io(path, e))?;
    Ok(s)
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    w.write_all(bytes).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}
