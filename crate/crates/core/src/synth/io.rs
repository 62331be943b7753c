//! Line-oriented dataset files.
//!
//! ```text
//! ACCENT-DATASET 1
//! crc32 <8 hex digits over every byte after this line>
//! meta <one-line JSON, generation specs or null>
//! section train <count>
//! utt <id> <domain> <frames> <dim> <label,label,...>
//! <frames lines of dim space-separated floats>
//! ...
//! section test_source <count>
//! ...
//! section test_accent <domain> <count>      (once per accent domain)
//! ...
//! end
//! ```
//!
//! Floats are written in Rust's shortest round-trip notation, so a write/read
//! cycle is bit-exact.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use super::{DatasetPartition, Utterance};
use crate::autodiff::Tensor;

const MAGIC: &str = "ACCENT-DATASET 1";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("dataset checksum mismatch: header says {stored:08x}, content hashes to {computed:08x}")]
    Integrity { stored: u32, computed: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn write_utterances(out: &mut String, utts: &[Utterance]) {
    for u in utts {
        let labels: Vec<String> = u.labels.iter().map(usize::to_string).collect();
        let _ = writeln!(
            out,
            "utt {} {} {} {} {}",
            u.id,
            u.domain_id,
            u.features.rows(),
            u.features.cols(),
            if labels.is_empty() { "-".to_string() } else { labels.join(",") }
        );
        for r in 0..u.features.rows() {
            let row: Vec<String> = u.features.row(r).iter().map(|v| format!("{v:?}")).collect();
            let _ = writeln!(out, "{}", row.join(" "));
        }
    }
}

/// Serializes a partition; `meta` is stored verbatim as one JSON line.
pub fn encode_dataset(partition: &DatasetPartition, meta: Option<&serde_json::Value>) -> String {
    let mut body = String::new();
    let meta = meta.map_or("null".to_string(), |m| m.to_string());
    let _ = writeln!(body, "meta {meta}");
    let _ = writeln!(body, "section train {}", partition.train.len());
    write_utterances(&mut body, &partition.train);
    let _ = writeln!(body, "section test_source {}", partition.test_source.len());
    write_utterances(&mut body, &partition.test_source);
    for (domain, utts) in &partition.test_accent {
        let _ = writeln!(body, "section test_accent {domain} {}", utts.len());
        write_utterances(&mut body, utts);
    }
    body.push_str("end\n");
    format!("{MAGIC}\ncrc32 {:08x}\n{body}", crc32fast::hash(body.as_bytes()))
}

pub fn write_dataset(
    partition: &DatasetPartition,
    meta: Option<&serde_json::Value>,
    path: &Path,
) -> Result<(), DatasetError> {
    std::fs::write(path, encode_dataset(partition, meta))?;
    Ok(())
}

struct Lines<'a> {
    iter: std::iter::Enumerate<std::str::Lines<'a>>,
    last: usize,
}

impl<'a> Lines<'a> {
    fn next(&mut self, what: &str) -> Result<(usize, &'a str), DatasetError> {
        match self.iter.next() {
            Some((i, l)) => {
                self.last = i + 1;
                Ok((i + 1, l))
            }
            None => Err(DatasetError::Parse {
                line: self.last + 1,
                message: format!("unexpected end of file, expected {what}"),
            }),
        }
    }
}

fn perr(line: usize, message: impl Into<String>) -> DatasetError {
    DatasetError::Parse {
        line,
        message: message.into(),
    }
}

fn num<T: std::str::FromStr>(line: usize, s: &str, what: &str) -> Result<T, DatasetError> {
    s.parse().map_err(|_| perr(line, format!("bad {what} {s:?}")))
}

fn read_utterances(lines: &mut Lines<'_>, count: usize) -> Result<Vec<Utterance>, DatasetError> {
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let (ln, header) = lines.next("utterance header")?;
        let parts: Vec<&str> = header.split(' ').collect();
        if parts.len() != 6 || parts[0] != "utt" {
            return Err(perr(ln, format!("expected utterance header, found {header:?}")));
        }
        let frames: usize = num(ln, parts[3], "frame count")?;
        let dim: usize = num(ln, parts[4], "feature dim")?;
        let labels = if parts[5] == "-" {
            Vec::new()
        } else {
            parts[5]
                .split(',')
                .map(|s| num(ln, s, "label"))
                .collect::<Result<Vec<usize>, _>>()?
        };
        let mut data = Vec::with_capacity(frames * dim);
        for _ in 0..frames {
            let (fl, row) = lines.next("feature row")?;
            let before = data.len();
            for tok in row.split(' ') {
                data.push(num::<f64>(fl, tok, "feature value")?);
            }
            if data.len() - before != dim {
                return Err(perr(fl, format!("expected {dim} values, found {}", data.len() - before)));
            }
        }
        let features = Tensor::new(vec![frames, dim], data).map_err(|e| perr(ln, e.to_string()))?;
        out.push(Utterance {
            id: parts[1].to_string(),
            domain_id: parts[2].to_string(),
            features,
            labels,
        });
    }
    Ok(out)
}

/// Parses a dataset. Structural problems are reported with their line
/// number; a well-formed file whose content does not match the stored
/// checksum is an integrity error.
pub fn decode_dataset(text: &str) -> Result<(DatasetPartition, serde_json::Value), DatasetError> {
    let mut lines = Lines {
        iter: text.lines().enumerate(),
        last: 0,
    };
    let (ln, magic) = lines.next("header")?;
    if magic != MAGIC {
        return Err(perr(ln, format!("expected {MAGIC:?}")));
    }
    let (ln, crc_line) = lines.next("checksum")?;
    let stored = crc_line
        .strip_prefix("crc32 ")
        .and_then(|h| u32::from_str_radix(h, 16).ok())
        .ok_or_else(|| perr(ln, "expected `crc32 <hex>`"))?;
    let (ln, meta_line) = lines.next("meta line")?;
    let meta: serde_json::Value = meta_line
        .strip_prefix("meta ")
        .and_then(|m| serde_json::from_str(m).ok())
        .ok_or_else(|| perr(ln, "expected `meta <json>`"))?;

    let mut train = None;
    let mut test_source = None;
    let mut test_accent = Vec::new();
    loop {
        let (ln, line) = lines.next("section or end")?;
        if line == "end" {
            break;
        }
        let parts: Vec<&str> = line.split(' ').collect();
        match parts.as_slice() {
            ["section", "train", n] => train = Some(read_utterances(&mut lines, num(ln, n, "count")?)?),
            ["section", "test_source", n] => {
                test_source = Some(read_utterances(&mut lines, num(ln, n, "count")?)?)
            }
            ["section", "test_accent", domain, n] => {
                let utts = read_utterances(&mut lines, num(ln, n, "count")?)?;
                test_accent.push((domain.to_string(), utts));
            }
            _ => return Err(perr(ln, format!("unexpected line {line:?}"))),
        }
    }
    if let Some((ln, extra)) = lines.iter.find(|(_, l)| !l.is_empty()) {
        return Err(perr(ln + 1, format!("trailing content {extra:?}")));
    }
    let end = lines.last;
    let (train, test_source) = match (train, test_source) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(perr(end, "missing train or test_source section")),
    };

    let body_start = text
        .match_indices('\n')
        .nth(1)
        .map(|(i, _)| i + 1)
        .unwrap_or(text.len());
    let computed = crc32fast::hash(&text.as_bytes()[body_start..]);
    if computed != stored {
        return Err(DatasetError::Integrity { stored, computed });
    }
    Ok((
        DatasetPartition {
            train,
            test_source,
            test_accent,
        },
        meta,
    ))
}

pub fn read_dataset(path: &Path) -> Result<DatasetPartition, DatasetError> {
    let text = std::fs::read_to_string(path)?;
    decode_dataset(&text).map(|(p, _)| p)
}
