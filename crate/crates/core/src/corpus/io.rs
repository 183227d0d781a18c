//! JSONL and CoNLL readers/writers.
//!
//! JSONL: line 1 is a header `{"labels": [...], "scheme": "flat"|"iob",
//! "other": "...", "split": {"train": [...], "test": [...]}?}`; every
//! following non-blank line is `{"doc_id", "tokens", "pos", "labels"}`.
//!
//! CoNLL: `TOKEN\tPOS\tLABEL` per line, blank line between sequences, `_`
//! for a missing POS. Optional `# key=value` directives: `labels`, `scheme`
//! and `other` at the top of the file, `doc_id` immediately before a
//! sequence. Without a `labels` directive the label set is inferred in
//! first-occurrence order.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{Dataset, LabelScheme, LabeledSequence, SchemeKind, Split, Token};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Jsonl,
    Conll,
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jsonl" => Ok(Format::Jsonl),
            "conll" => Ok(Format::Conll),
            other => Err(Error::InvalidArgument(format!("unknown format `{other}`"))),
        }
    }
}

impl Format {
    /// Guess from the file extension; anything other than `.conll` is JSONL.
    pub fn from_path(path: &Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some("conll") | Some("tsv") => Format::Conll,
            _ => Format::Jsonl,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    labels: Vec<String>,
    scheme: SchemeKind,
    other: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<Split>,
}

#[derive(Serialize, Deserialize)]
struct Record {
    doc_id: String,
    tokens: Vec<String>,
    pos: Option<Vec<String>>,
    labels: Vec<String>,
}

pub fn load_dataset(path: &Path, format: Format) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text, format, path)
}

pub fn write_dataset(d: &Dataset, path: &Path, format: Format) -> Result<()> {
    std::fs::write(path, render_dataset(d, format)).map_err(|e| Error::io(path, e))
}

/// Parse dataset text; `origin` is used only in diagnostics.
pub fn parse_dataset(text: &str, format: Format, origin: &Path) -> Result<Dataset> {
    match format {
        Format::Jsonl => parse_jsonl(text, origin),
        Format::Conll => parse_conll(text, origin),
    }
}

pub fn render_dataset(d: &Dataset, format: Format) -> String {
    match format {
        Format::Jsonl => render_jsonl(d),
        Format::Conll => render_conll(d),
    }
}

fn parse_jsonl(text: &str, origin: &Path) -> Result<Dataset> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.trim().is_empty());
    let (header_line, header) = lines
        .next()
        .ok_or_else(|| Error::record(origin, 1, "missing header line"))?;
    let header: Header = serde_json::from_str(header)
        .map_err(|e| Error::record(origin, header_line, format!("bad header: {e}")))?;
    let scheme = LabelScheme::new(header.labels, header.scheme, &header.other)
        .map_err(|e| Error::record(origin, header_line, e.to_string()))?;

    let mut sequences = Vec::new();
    for (line, raw) in lines {
        let rec: Record = serde_json::from_str(raw)
            .map_err(|e| Error::record(origin, line, format!("malformed record: {e}")))?;
        if rec.labels.len() != rec.tokens.len() {
            return Err(Error::record(
                origin,
                line,
                format!(
                    "doc `{}`: {} tokens but {} labels",
                    rec.doc_id,
                    rec.tokens.len(),
                    rec.labels.len()
                ),
            ));
        }
        if let Some(pos) = &rec.pos {
            if pos.len() != rec.tokens.len() {
                return Err(Error::record(
                    origin,
                    line,
                    format!("doc `{}`: pos length differs from tokens", rec.doc_id),
                ));
            }
        }
        let mut tokens = Vec::with_capacity(rec.tokens.len());
        for (i, text) in rec.tokens.into_iter().enumerate() {
            let pos = rec.pos.as_ref().map(|p| p[i].clone());
            tokens.push(
                Token::new(text, pos).map_err(|e| Error::record(origin, line, e.to_string()))?,
            );
        }
        let labels = rec
            .labels
            .iter()
            .map(|l| {
                scheme.id(l).ok_or_else(|| {
                    Error::record(origin, line, format!("unknown label `{l}` not in scheme"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        sequences.push(LabeledSequence {
            doc_id: rec.doc_id,
            tokens,
            labels,
        });
    }
    Dataset::new(scheme, sequences, header.split)
        .map_err(|e| Error::record(origin, header_line, e.to_string()))
}

fn render_jsonl(d: &Dataset) -> String {
    let header = Header {
        labels: d.scheme().labels().to_vec(),
        scheme: d.scheme().kind(),
        other: d.scheme().other_label().to_string(),
        split: d.split().cloned(),
    };
    let mut out = serde_json::to_string(&header).expect("header serializes");
    out.push('\n');
    for s in d.sequences() {
        let has_pos = !s.tokens.is_empty() && s.tokens.iter().all(|t| t.pos.is_some());
        let rec = Record {
            doc_id: s.doc_id.clone(),
            tokens: s.tokens.iter().map(|t| t.text.clone()).collect(),
            pos: has_pos.then(|| s.tokens.iter().map(|t| t.pos.clone().unwrap()).collect()),
            labels: d.label_names(s).into_iter().map(String::from).collect(),
        };
        out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
        out.push('\n');
    }
    out
}

struct RawSeq {
    doc_id: Option<String>,
    line: usize,
    rows: Vec<(String, Option<String>, String)>,
}

fn parse_conll(text: &str, origin: &Path) -> Result<Dataset> {
    let mut declared_labels: Option<Vec<String>> = None;
    let mut kind: Option<SchemeKind> = None;
    let mut other: Option<String> = None;
    let mut pending_id: Option<String> = None;
    let mut seqs: Vec<RawSeq> = Vec::new();
    let mut current: Option<RawSeq> = None;

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            if let Some(s) = current.take() {
                seqs.push(s);
            }
            continue;
        }
        if let Some(directive) = raw.strip_prefix('#') {
            let (key, value) = directive
                .split_once('=')
                .ok_or_else(|| Error::record(origin, line, "directive must be `# key=value`"))?;
            let value = value.trim();
            match key.trim() {
                "labels" => {
                    declared_labels = Some(value.split_whitespace().map(String::from).collect())
                }
                "scheme" => {
                    kind = Some(
                        value
                            .parse()
                            .map_err(|e: Error| Error::record(origin, line, e.to_string()))?,
                    )
                }
                "other" => other = Some(value.to_string()),
                "doc_id" => pending_id = Some(value.to_string()),
                k => {
                    return Err(Error::record(
                        origin,
                        line,
                        format!("unknown directive `{k}`"),
                    ))
                }
            }
            continue;
        }
        let cols: Vec<&str> = raw.split('\t').collect();
        if cols.len() != 3 || cols.iter().any(|c| c.is_empty()) {
            return Err(Error::record(
                origin,
                line,
                format!(
                    "expected TOKEN<TAB>POS<TAB>LABEL, got {} columns",
                    cols.len()
                ),
            ));
        }
        let pos = (cols[1] != "_").then(|| cols[1].to_string());
        let seq = current.get_or_insert_with(|| RawSeq {
            doc_id: pending_id.take(),
            line,
            rows: Vec::new(),
        });
        seq.rows
            .push((cols[0].to_string(), pos, cols[2].to_string()));
    }
    if let Some(s) = current.take() {
        seqs.push(s);
    }

    let scheme = match declared_labels {
        Some(labels) => {
            let kind = kind.unwrap_or(SchemeKind::Flat);
            let other = other.unwrap_or_else(|| default_other(&labels, kind));
            LabelScheme::new(labels, kind, &other)
                .map_err(|e| Error::record(origin, 1, e.to_string()))?
        }
        None => {
            infer_scheme(&seqs, kind, other).map_err(|e| Error::record(origin, 1, e.to_string()))?
        }
    };

    let mut sequences = Vec::with_capacity(seqs.len());
    for (n, raw) in seqs.into_iter().enumerate() {
        let with_pos = raw.rows.iter().filter(|r| r.1.is_some()).count();
        if with_pos != 0 && with_pos != raw.rows.len() {
            return Err(Error::record(
                origin,
                raw.line,
                "sequence mixes tagged and `_` POS columns",
            ));
        }
        let mut tokens = Vec::with_capacity(raw.rows.len());
        let mut labels = Vec::with_capacity(raw.rows.len());
        for (i, (text, pos, label)) in raw.rows.into_iter().enumerate() {
            let line = raw.line + i;
            tokens.push(
                Token::new(text, pos).map_err(|e| Error::record(origin, line, e.to_string()))?,
            );
            labels.push(scheme.id(&label).ok_or_else(|| {
                Error::record(
                    origin,
                    line,
                    format!("unknown label `{label}` not in scheme"),
                )
            })?);
        }
        sequences.push(LabeledSequence {
            doc_id: raw.doc_id.unwrap_or_else(|| format!("seq-{n}")),
            tokens,
            labels,
        });
    }
    Dataset::new(scheme, sequences, None).map_err(|e| Error::record(origin, 1, e.to_string()))
}

fn default_other(labels: &[String], kind: SchemeKind) -> String {
    if labels.iter().any(|l| l == "O") || kind == SchemeKind::Iob {
        "O".into()
    } else {
        "Other".into()
    }
}

fn infer_scheme(
    seqs: &[RawSeq],
    kind: Option<SchemeKind>,
    other: Option<String>,
) -> Result<LabelScheme> {
    let mut labels: Vec<String> = Vec::new();
    for row in seqs.iter().flat_map(|s| &s.rows) {
        if !labels.contains(&row.2) {
            labels.push(row.2.clone());
        }
    }
    let kind = kind.unwrap_or_else(|| {
        let iob_like = labels.iter().any(|l| l.starts_with("B-"))
            && labels
                .iter()
                .all(|l| l == "O" || l.starts_with("B-") || l.starts_with("I-"));
        if iob_like {
            SchemeKind::Iob
        } else {
            SchemeKind::Flat
        }
    });
    let other = other.unwrap_or_else(|| default_other(&labels, kind));
    if !labels.contains(&other) {
        labels.insert(0, other.clone());
    }
    if kind == SchemeKind::Iob {
        let bases: Vec<String> = labels
            .iter()
            .filter_map(|l| l.strip_prefix("B-").or_else(|| l.strip_prefix("I-")))
            .map(String::from)
            .collect();
        for base in bases {
            for prefix in ["B-", "I-"] {
                let l = format!("{prefix}{base}");
                if !labels.contains(&l) {
                    labels.push(l);
                }
            }
        }
    }
    LabelScheme::new(labels, kind, &other)
}

fn render_conll(d: &Dataset) -> String {
    let scheme = d.scheme();
    let mut out = String::new();
    let _ = writeln!(out, "# labels={}", scheme.labels().join(" "));
    let _ = writeln!(out, "# scheme={}", scheme.kind());
    let _ = writeln!(out, "# other={}", scheme.other_label());
    for s in d.sequences() {
        out.push('\n');
        let _ = writeln!(out, "# doc_id={}", s.doc_id);
        for (tok, &label) in s.tokens.iter().zip(&s.labels) {
            let _ = writeln!(
                out,
                "{}\t{}\t{}",
                tok.text,
                tok.pos.as_deref().unwrap_or("_"),
                scheme.name(label)
            );
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn origin() -> &'static Path {
        Path::new("test")
    }

    #[test]
    fn minimal_conll() {
        let d = parse_conll("a\t_\tOther\nb\t_\tOther\n", origin()).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d.token_count(), 2);
        assert_eq!(d.scheme().other_label(), "Other");
        assert!(d.sequences()[0].tokens[0].pos.is_none());
    }

    #[test]
    fn conll_unknown_label_is_named() {
        let text = "# labels=Other Treats\na\tNN\tOther\nb\tNN\tPrevents\n";
        let err = parse_conll(text, origin()).unwrap_err().to_string();
        assert!(err.contains("Prevents"), "{err}");
        assert!(err.contains(":3:"), "{err}");
    }

    #[test]
    fn conll_mixed_pos_rejected() {
        assert!(parse_conll("a\tNN\tO\nb\t_\tO\n", origin()).is_err());
    }

    #[test]
    fn conll_infers_iob() {
        let d = parse_conll("x\t_\tB-ADR\ny\t_\tI-ADR\nz\t_\tO\n", origin()).unwrap();
        assert_eq!(d.scheme().kind(), SchemeKind::Iob);
        assert_eq!(d.scheme().other_label(), "O");
    }

    #[test]
    fn jsonl_errors_carry_line_numbers() {
        let header = r#"{"labels":["Other","Treats"],"scheme":"flat","other":"Other"}"#;
        let good = r#"{"doc_id":"a","tokens":["x"],"pos":null,"labels":["Other"]}"#;
        let short = r#"{"doc_id":"b","tokens":["x","y"],"pos":null,"labels":["Other"]}"#;
        let err = parse_jsonl(&format!("{header}\n{good}\n{short}\n"), origin()).unwrap_err();
        assert!(err.to_string().contains(":3:"), "{err}");
        let unknown = r#"{"doc_id":"b","tokens":["x"],"pos":null,"labels":["Prevents"]}"#;
        let err = parse_jsonl(&format!("{header}\n{unknown}\n"), origin()).unwrap_err();
        assert!(err.to_string().contains("Prevents"));
        let broken = parse_jsonl(&format!("{header}\n{{not json\n"), origin()).unwrap_err();
        assert!(broken.to_string().contains(":2:"));
    }

    #[test]
    fn jsonl_duplicate_doc_rejected() {
        let header = r#"{"labels":["O"],"scheme":"flat","other":"O"}"#;
        let rec = r#"{"doc_id":"a","tokens":["x"],"pos":null,"labels":["O"]}"#;
        assert!(parse_jsonl(&format!("{header}\n{rec}\n{rec}\n"), origin()).is_err());
    }
}
