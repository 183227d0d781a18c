//! Phrase lexicons and cue-word lists.
//!
//! Matching is exact token-sequence matching after lowercasing.

use std::collections::{BTreeSet, HashSet};
use std::path::Path;

use crate::error::{Error, Result};

fn fold(s: &str) -> String {
    s.to_lowercase()
}

/// A set of case-folded phrases. Phrases are stored space-joined, which is
/// unambiguous because tokens never contain whitespace.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Lexicon {
    name: String,
    entries: HashSet<String>,
    max_len: usize,
}

impl Lexicon {
    pub fn from_phrases<I, S>(name: impl Into<String>, phrases: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let name = name.into();
        let mut entries = HashSet::new();
        let mut max_len = 0;
        for p in phrases {
            let toks: Vec<String> = p.as_ref().split_whitespace().map(fold).collect();
            if toks.is_empty() {
                continue;
            }
            max_len = max_len.max(toks.len());
            entries.insert(toks.join(" "));
        }
        if entries.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "lexicon `{name}` has no entries"
            )));
        }
        Ok(Lexicon {
            name,
            entries,
            max_len,
        })
    }

    /// A lexicon with no entries; matches nothing.
    pub fn empty(name: impl Into<String>) -> Self {
        Lexicon {
            name: name.into(),
            entries: HashSet::new(),
            max_len: 0,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains<S: AsRef<str>>(&self, phrase: &[S]) -> bool {
        let key: Vec<String> = phrase.iter().map(|s| fold(s.as_ref())).collect();
        self.entries.contains(&key.join(" "))
    }

    /// Entries in sorted order, space-joined.
    pub fn sorted_entries(&self) -> Vec<&str> {
        let mut v: Vec<&str> = self.entries.iter().map(String::as_str).collect();
        v.sort_unstable();
        v
    }

    pub fn to_file_string(&self) -> String {
        let mut out = format!("# {}\n", self.name);
        for e in self.sorted_entries() {
            out.push_str(e);
            out.push('\n');
        }
        out
    }
}

fn read_lines(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn usable_lines(text: &str) -> impl Iterator<Item = &str> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("lexicon")
        .to_string()
}

/// One phrase per line; blank lines and `#` comments are skipped. The
/// lexicon is named after the file stem.
pub fn load_lexicon(path: &Path) -> Result<Lexicon> {
    let text = read_lines(path)?;
    Lexicon::from_phrases(stem(path), usable_lines(&text))
        .map_err(|e| Error::record(path, 1, e.to_string()))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CueLexicon {
    name: String,
    cues: BTreeSet<String>,
    window: usize,
}

impl CueLexicon {
    pub fn new<I, S>(name: impl Into<String>, cues: I, window: usize) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let name = name.into();
        if window == 0 {
            return Err(Error::InvalidArgument(format!(
                "cue lexicon `{name}`: window must be >= 1"
            )));
        }
        let cues: BTreeSet<String> = cues
            .into_iter()
            .map(|c| fold(c.as_ref().trim()))
            .filter(|c| !c.is_empty())
            .collect();
        if cues.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "cue lexicon `{name}` has no cues"
            )));
        }
        if let Some(bad) = cues.iter().find(|c| c.contains(char::is_whitespace)) {
            return Err(Error::InvalidArgument(format!(
                "cue lexicon `{name}`: cue `{bad}` is not a single token"
            )));
        }
        Ok(CueLexicon { name, cues, window })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn is_cue(&self, token: &str) -> bool {
        self.cues.contains(&fold(token))
    }

    pub fn cues(&self) -> impl Iterator<Item = &str> {
        self.cues.iter().map(String::as_str)
    }

    pub fn to_file_string(&self) -> String {
        let mut out = format!("window={}\n", self.window);
        for c in &self.cues {
            out.push_str(c);
            out.push('\n');
        }
        out
    }
}

/// First line `window=N`, then one cue per line.
pub fn load_cue_lexicon(path: &Path) -> Result<CueLexicon> {
    let text = read_lines(path)?;
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let (_, first) = lines
        .next()
        .ok_or_else(|| Error::record(path, 1, "empty cue lexicon"))?;
    let window = first
        .trim()
        .strip_prefix("window=")
        .and_then(|w| w.trim().parse::<usize>().ok())
        .ok_or_else(|| Error::record(path, 1, "first line must be `window=N`"))?;
    let rest: Vec<&str> = lines
        .map(|(_, l)| l.trim())
        .filter(|l| !l.starts_with('#'))
        .collect();
    CueLexicon::new(stem(path), rest, window).map_err(|e| Error::record(path, 1, e.to_string()))
}

/// Longest match at each start position, `[start, end)`.
pub fn match_spans<S: AsRef<str>>(tokens: &[S], lex: &Lexicon) -> Vec<(usize, usize)> {
    if lex.is_empty() {
        return Vec::new();
    }
    let folded: Vec<String> = tokens.iter().map(|t| fold(t.as_ref())).collect();
    let mut spans = Vec::new();
    let mut key = String::new();
    for start in 0..folded.len() {
        key.clear();
        let mut best = None;
        for end in start + 1..=folded.len().min(start + lex.max_len) {
            if end > start + 1 {
                key.push(' ');
            }
            key.push_str(&folded[end - 1]);
            if lex.entries.contains(&key) {
                best = Some(end);
            }
        }
        if let Some(end) = best {
            spans.push((start, end));
        }
    }
    spans
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ContextFlags {
    pub in_left_context: bool,
    pub in_right_context: bool,
}

/// `in_left_context` holds for token `i` when a cue sits at some `j` with
/// `i - window <= j < i`; `in_right_context` mirrors it to the right. A cue
/// token is not its own context.
pub fn cue_context_flags<S: AsRef<str>>(tokens: &[S], cue: &CueLexicon) -> Vec<ContextFlags> {
    let n = tokens.len();
    let is_cue: Vec<bool> = tokens.iter().map(|t| cue.is_cue(t.as_ref())).collect();
    let mut flags = vec![ContextFlags::default(); n];
    let mut last: Option<usize> = None;
    for i in 0..n {
        if let Some(j) = last {
            flags[i].in_left_context = i - j <= cue.window;
        }
        if is_cue[i] {
            last = Some(i);
        }
    }
    let mut next: Option<usize> = None;
    for i in (0..n).rev() {
        if let Some(j) = next {
            flags[i].in_right_context = j - i <= cue.window;
        }
        if is_cue[i] {
            next = Some(i);
        }
    }
    flags
}
