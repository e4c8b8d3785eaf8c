//! Text ingestion: tokenizer, vocabulary, document streaming and the
//! two-segment `[SOS] S1 [EOS] S2 [EOS]` packing.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const SOS: &str = "[SOS]";
pub const EOS: &str = "[EOS]";
pub const MASK: &str = "[MASK]";
pub const PSEUDO: &str = "[P]";

/// Reserved tokens in vocabulary-file order; the line number is the id.
pub const SPECIAL_TOKENS: [&str; 6] = [PAD, UNK, SOS, EOS, MASK, PSEUDO];

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const SOS_ID: u32 = 2;
pub const EOS_ID: u32 = 3;
pub const MASK_ID: u32 = 4;
pub const PSEUDO_ID: u32 = 5;
pub const NUM_SPECIAL: u32 = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenizerMode {
    Word,
    Char,
}

impl std::str::FromStr for TokenizerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "word" => Ok(TokenizerMode::Word),
            "char" => Ok(TokenizerMode::Char),
            other => Err(Error::Config(format!("unknown tokenizer mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for TokenizerMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TokenizerMode::Word => "word",
            TokenizerMode::Char => "char",
        })
    }
}

/// Whitespace-word or character tokenizer.
///
/// Word mode normalizes whitespace (round trip joins units with a single
/// space); char mode is exact when lowercasing is off.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tokenizer {
    pub mode: TokenizerMode,
    pub lowercase: bool,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Tokenizer {
            mode: TokenizerMode::Word,
            lowercase: true,
        }
    }
}

impl Tokenizer {
    pub fn new(mode: TokenizerMode, lowercase: bool) -> Self {
        Tokenizer { mode, lowercase }
    }

    pub fn units(&self, text: &str) -> Vec<String> {
        let text = if self.lowercase {
            text.to_lowercase()
        } else {
            text.to_string()
        };
        match self.mode {
            TokenizerMode::Word => text.split_whitespace().map(str::to_string).collect(),
            TokenizerMode::Char => text.chars().map(|c| c.to_string()).collect(),
        }
    }

    pub fn detokenize<S: AsRef<str>>(&self, units: &[S]) -> String {
        let sep = match self.mode {
            TokenizerMode::Word => " ",
            TokenizerMode::Char => "",
        };
        units
            .iter()
            .map(AsRef::as_ref)
            .collect::<Vec<_>>()
            .join(sep)
    }

    /// Splits text into sentence-ish pieces: after `.`, `!`, `?` and at line breaks.
    pub fn sentences<'a>(&self, text: &'a str) -> Vec<&'a str> {
        let mut out = Vec::new();
        let mut start = 0;
        for (i, c) in text.char_indices() {
            if matches!(c, '.' | '!' | '?' | '\n') {
                let end = i + c.len_utf8();
                // word mode: "3.5" style tokens stay whole
                let next_is_boundary = text[end..]
                    .chars()
                    .next()
                    .is_none_or(char::is_whitespace);
                if c == '\n' || self.mode == TokenizerMode::Char || next_is_boundary {
                    out.push(&text[start..end]);
                    start = end;
                }
            }
        }
        if start < text.len() {
            out.push(&text[start..]);
        }
        out
    }
}

/// Token ↔ id table. Ids `0..6` are the reserved tokens in
/// [`SPECIAL_TOKENS`] order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
}

impl Vocab {
    /// Builds a vocabulary from the most frequent units of `corpus`;
    /// `max_size` counts the six reserved tokens. Ties break lexicographically.
    pub fn build(corpus: &str, max_size: usize, tokenizer: &Tokenizer) -> Result<Vocab> {
        let mut counts: HashMap<String, u64> = HashMap::new();
        for unit in tokenizer.units(corpus) {
            *counts.entry(unit).or_default() += 1;
        }
        if counts.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut ranked: Vec<(String, u64)> = counts
            .into_iter()
            .filter(|(tok, _)| !SPECIAL_TOKENS.contains(&tok.as_str()))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let keep = max_size.saturating_sub(SPECIAL_TOKENS.len());
        let tokens = SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().take(keep).map(|(t, _)| t))
            .collect();
        Vocab::from_tokens(tokens)
    }

    /// `tokens[i]` gets id `i`; the first six must be the reserved tokens.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Vocab> {
        if tokens.len() < SPECIAL_TOKENS.len()
            || tokens.iter().zip(SPECIAL_TOKENS).any(|(t, s)| t != s)
        {
            return Err(Error::Data(format!(
                "vocabulary must start with {}",
                SPECIAL_TOKENS.join(",")
            )));
        }
        let mut token_to_id = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if token_to_id.insert(tok.clone(), i as u32).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary entry {tok:?}")));
            }
        }
        Ok(Vocab {
            token_to_id,
            id_to_token: tokens,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.token_to_id.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    pub fn is_special(id: u32) -> bool {
        id < NUM_SPECIAL
    }

    /// Ids eligible as random replacements and prediction targets.
    pub fn ordinary_ids(&self) -> std::ops::Range<u32> {
        NUM_SPECIAL..self.len() as u32
    }

    pub fn encode(&self, text: &str, tokenizer: &Tokenizer) -> Vec<u32> {
        tokenizer.units(text).iter().map(|u| self.id(u)).collect()
    }

    pub fn decode(&self, ids: &[u32], tokenizer: &Tokenizer) -> String {
        let units: Vec<&str> = ids
            .iter()
            .map(|&id| self.token(id).unwrap_or(UNK))
            .collect();
        tokenizer.detokenize(&units)
    }

    /// One token per line; `\`, newline, tab and carriage return are escaped.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for tok in &self.id_to_token {
            out.push_str(&escape_token(tok));
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Vocab> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Vocab::from_tokens(text.lines().map(unescape_token).collect())
    }
}

fn escape_token(tok: &str) -> String {
    let mut s = String::with_capacity(tok.len());
    for c in tok.chars() {
        match c {
            '\\' => s.push_str("\\\\"),
            '\n' => s.push_str("\\n"),
            '\t' => s.push_str("\\t"),
            '\r' => s.push_str("\\r"),
            c => s.push(c),
        }
    }
    s
}

fn unescape_token(line: &str) -> String {
    let mut s = String::with_capacity(line.len());
    let mut chars = line.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            s.push(c);
            continue;
        }
        match chars.next() {
            Some('n') => s.push('\n'),
            Some('t') => s.push('\t'),
            Some('r') => s.push('\r'),
            Some(other) => s.push(other),
            None => s.push('\\'),
        }
    }
    s
}

/// `[SOS] S1 [EOS] S2 [EOS]` with segment ids (`[SOS]`, S1 and the first
/// `[EOS]` are segment 0).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedInput {
    pub token_ids: Vec<u32>,
    pub segment_ids: Vec<u8>,
}

impl PackedInput {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// A position may be masked unless it holds `[SOS]`, `[EOS]` or `[PAD]`.
    pub fn is_usable(&self, pos: usize) -> bool {
        !matches!(self.token_ids[pos], SOS_ID | EOS_ID | PAD_ID)
    }

    pub fn usable_len(&self) -> usize {
        (0..self.len()).filter(|&p| self.is_usable(p)).count()
    }

    /// Splits back into `(S1, S2)`.
    pub fn segments(&self) -> (&[u32], &[u32]) {
        let first_eos = self
            .token_ids
            .iter()
            .position(|&t| t == EOS_ID)
            .unwrap_or(self.len());
        let s1 = &self.token_ids[1.min(self.len())..first_eos];
        let s2_end = self.len().saturating_sub(1).max(first_eos + 1);
        let s2 = self.token_ids.get(first_eos + 1..s2_end).unwrap_or(&[]);
        (s1, s2)
    }
}

fn check_segment(seg: &[u32], offset: usize) -> Result<()> {
    match seg
        .iter()
        .position(|&t| Vocab::is_special(t) && t != UNK_ID)
    {
        Some(i) => Err(Error::SpecialInSegment {
            id: seg[i],
            index: offset + i,
        }),
        None => Ok(()),
    }
}

pub fn pack_pair(s1: &[u32], s2: &[u32], max_len: usize) -> Result<PackedInput> {
    let len = s1.len() + s2.len() + 3;
    if len > max_len {
        return Err(Error::SequenceTooLong { len, max_len });
    }
    check_segment(s1, 0)?;
    check_segment(s2, s1.len())?;
    let mut token_ids = Vec::with_capacity(len);
    token_ids.push(SOS_ID);
    token_ids.extend_from_slice(s1);
    token_ids.push(EOS_ID);
    token_ids.extend_from_slice(s2);
    token_ids.push(EOS_ID);
    let mut segment_ids = vec![0u8; s1.len() + 2];
    segment_ids.resize(len, 1);
    Ok(PackedInput {
        token_ids,
        segment_ids,
    })
}

/// `[SOS] TEXT [EOS]`, the single-segment layout used for classification.
pub fn pack_single(text: &[u32], max_len: usize) -> Result<PackedInput> {
    let len = text.len() + 2;
    if len > max_len {
        return Err(Error::SequenceTooLong { len, max_len });
    }
    check_segment(text, 0)?;
    let mut token_ids = Vec::with_capacity(len);
    token_ids.push(SOS_ID);
    token_ids.extend_from_slice(text);
    token_ids.push(EOS_ID);
    Ok(PackedInput {
        token_ids,
        segment_ids: vec![0; len],
    })
}

/// A tokenized document as a list of sentence-ish runs of contiguous text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub sentences: Vec<Vec<u32>>,
}

impl Document {
    pub fn tokens(&self) -> Vec<u32> {
        self.sentences.concat()
    }

    /// Consecutive sentences become `(S1, S2)` pairs; an odd trailing
    /// sentence is paired with an empty S2. Overlong pairs are truncated,
    /// always shortening the longer side.
    pub fn segment_pairs(&self, max_len: usize) -> Vec<(Vec<u32>, Vec<u32>)> {
        let budget = max_len.saturating_sub(3);
        self.sentences
            .chunks(2)
            .map(|pair| {
                let a = &pair[0];
                let b: &[u32] = pair.get(1).map(Vec::as_slice).unwrap_or(&[]);
                let (mut la, mut lb) = (a.len(), b.len());
                while la + lb > budget {
                    if la >= lb {
                        la -= 1;
                    } else {
                        lb -= 1;
                    }
                }
                (a[..la].to_vec(), b[..lb].to_vec())
            })
            .filter(|(a, b)| !a.is_empty() || !b.is_empty())
            .collect()
    }
}

/// Documents of a UTF-8 text file in file order; blank lines separate
/// documents.
pub struct DocumentStream {
    docs: std::vec::IntoIter<Document>,
}

impl Iterator for DocumentStream {
    type Item = Document;

    fn next(&mut self) -> Option<Document> {
        self.docs.next()
    }
}

pub fn read_utf8(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    String::from_utf8(bytes).map_err(|e| Error::Utf8 {
        path: PathBuf::from(path),
        offset: e.utf8_error().valid_up_to(),
    })
}

/// Raw document texts: runs of non-blank lines joined with `\n`.
pub fn split_documents(text: &str) -> Vec<String> {
    let mut docs = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            if !current.is_empty() {
                docs.push(current.join("\n"));
                current.clear();
            }
        } else {
            current.push(line);
        }
    }
    if !current.is_empty() {
        docs.push(current.join("\n"));
    }
    docs
}

pub fn tokenize_document(text: &str, vocab: &Vocab, tokenizer: &Tokenizer) -> Document {
    let sentences = tokenizer
        .sentences(text)
        .into_iter()
        .map(|s| vocab.encode(s, tokenizer))
        .filter(|s| !s.is_empty())
        .collect();
    Document { sentences }
}

pub fn stream_documents(path: &Path, vocab: &Vocab, tokenizer: &Tokenizer) -> Result<DocumentStream> {
    let text = read_utf8(path)?;
    let docs: Vec<Document> = split_documents(&text)
        .iter()
        .map(|d| tokenize_document(d, vocab, tokenizer))
        .collect();
    Ok(DocumentStream {
        docs: docs.into_iter(),
    })
}

/// Every text file under `path` (or `path` itself), sorted by name.
pub fn corpus_files(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let entries =
        fs::read_dir(path).map_err(|e| Error::io(format!("listing {}", path.display()), e))?;
    let mut files = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(format!("listing {}", path.display()), e))?;
        let p = entry.path();
        if p.is_file() {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

/// Reads a file or directory corpus and packs every document into pairs.
pub fn load_packed_corpus(
    path: &Path,
    vocab: &Vocab,
    tokenizer: &Tokenizer,
    max_len: usize,
) -> Result<Vec<PackedInput>> {
    let mut packed = Vec::new();
    for file in corpus_files(path)? {
        for doc in stream_documents(&file, vocab, tokenizer)? {
            for (s1, s2) in doc.segment_pairs(max_len) {
                packed.push(pack_pair(&s1, &s2, max_len)?);
            }
        }
    }
    Ok(packed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn word() -> Tokenizer {
        Tokenizer::default()
    }

    #[test]
    fn build_vocab_orders_by_frequency_then_lex() {
        let v = Vocab::build("a b a", 100, &word()).unwrap();
        assert_eq!(v.len(), 8);
        assert_eq!(v.id("a"), 6);
        assert_eq!(v.id("b"), 7);
        let v = Vocab::build("b a", 100, &word()).unwrap();
        assert!(v.id("a") < v.id("b"));
    }

    #[test]
    fn build_vocab_char_mode() {
        let t = Tokenizer::new(TokenizerMode::Char, true);
        let v = Vocab::build("ab", 8, &t).unwrap();
        assert_eq!(&v.tokens()[6..], &["a".to_string(), "b".to_string()]);
    }

    #[test]
    fn build_vocab_respects_max_size() {
        let v = Vocab::build("a a a b b c", 7, &word()).unwrap();
        assert_eq!(v.len(), 7);
        assert_eq!(v.id("b"), UNK_ID);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(matches!(
            Vocab::build("  \n ", 10, &word()),
            Err(Error::EmptyCorpus)
        ));
    }

    #[test]
    fn unknown_maps_to_unk() {
        let v = Vocab::build("a", 10, &word()).unwrap();
        assert_eq!(v.id("zzz"), UNK_ID);
    }

    #[test]
    fn pack_pair_layout() {
        let p = pack_pair(&[10, 11], &[12], 16).unwrap();
        assert_eq!(p.token_ids, vec![SOS_ID, 10, 11, EOS_ID, 12, EOS_ID]);
        assert_eq!(p.segment_ids, vec![0, 0, 0, 0, 1, 1]);
        assert_eq!(p.segments(), (&[10u32, 11][..], &[12u32][..]));
    }

    #[test]
    fn pack_pair_empty_second_segment() {
        let p = pack_pair(&[10], &[], 16).unwrap();
        assert_eq!(p.token_ids, vec![SOS_ID, 10, EOS_ID, EOS_ID]);
        assert_eq!(p.segment_ids, vec![0, 0, 0, 1]);
        assert_eq!(p.segments(), (&[10u32][..], &[][..]));
    }

    #[test]
    fn pack_pair_boundary_and_overflow() {
        assert!(pack_pair(&[7, 8], &[9], 6).is_ok());
        assert!(matches!(
            pack_pair(&[7, 8], &[9, 10], 6),
            Err(Error::SequenceTooLong { len: 7, max_len: 6 })
        ));
    }

    #[test]
    fn pack_pair_rejects_specials_but_allows_unk() {
        assert!(matches!(
            pack_pair(&[7, MASK_ID], &[], 10),
            Err(Error::SpecialInSegment { id: MASK_ID, index: 1 })
        ));
        assert!(pack_pair(&[UNK_ID], &[7], 10).is_ok());
    }

    #[test]
    fn vocab_file_round_trip_with_escapes() {
        let t = Tokenizer::new(TokenizerMode::Char, false);
        let v = Vocab::build("a\\b\nc\td", 100, &t).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        v.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("[PAD]\n[UNK]\n[SOS]\n[EOS]\n[MASK]\n[P]\n"));
        assert_eq!(Vocab::load(&path).unwrap(), v);
    }

    #[test]
    fn sentences_split_on_period_and_newline() {
        let t = word();
        assert_eq!(
            t.sentences("a b. c d\ne 3.5 f"),
            vec!["a b.", " c d\n", "e 3.5 f"]
        );
    }

    #[test]
    fn documents_split_on_blank_lines() {
        let docs = split_documents("one two.\nthree.\n\n  \nfour five.\n");
        assert_eq!(docs, vec!["one two.\nthree.", "four five."]);
        assert!(split_documents("").is_empty());
    }

    #[test]
    fn segment_pairs_truncate_longer_side() {
        let d = Document {
            sentences: vec![vec![6; 10], vec![7; 4], vec![8; 2]],
        };
        let pairs = d.segment_pairs(12);
        assert_eq!(pairs[0].0.len() + pairs[0].1.len(), 9);
        assert_eq!(pairs[0].1.len(), 4);
        assert_eq!(pairs[1], (vec![8, 8], vec![]));
    }

    #[test]
    fn malformed_utf8_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.txt");
        std::fs::write(&path, b"abc\xffdef").unwrap();
        let v = Vocab::build("abc", 10, &word()).unwrap();
        match stream_documents(&path, &v, &word()) {
            Err(Error::Utf8 { offset, .. }) => assert_eq!(offset, 3),
            Err(other) => panic!("unexpected error {other}"),
            Ok(_) => panic!("expected utf-8 error"),
        }
    }

    #[test]
    fn missing_file_is_io_error() {
        let v = Vocab::build("abc", 10, &word()).unwrap();
        assert!(matches!(
            stream_documents(Path::new("/nonexistent/x.txt"), &v, &word()),
            Err(Error::Io { .. })
        ));
    }
}
