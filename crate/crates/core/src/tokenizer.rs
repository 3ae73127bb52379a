//! WordPiece vocabulary training and greedy longest-match encoding.
//!
//! Pre-tokenization splits on whitespace and punctuation: runs of
//! alphanumeric characters (plus `_` and `$`) stay together, every other
//! character becomes its own pre-token, with `->` kept as a digraph since it
//! is the member-access operator. Continuation pieces carry the `##` marker.
//!
//! Training starts from the five reserved specials, the word-start form of
//! every character seen in the corpus, then the continuation forms, and then
//! greedily merges the adjacent pair with the highest count/(left*right)
//! likelihood gain until the requested size is reached or no pair meets the
//! minimum frequency. Selection compares exact integer cross-products, so
//! training is deterministic for a fixed corpus.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const MASK: u32 = 4;

pub const SPECIAL_TOKENS: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

/// Longest pre-token that is still encoded; anything longer maps to `[UNK]`.
pub const MAX_PRETOKEN_CHARS: usize = 100;

const CONTINUATION: &str = "##";

/// Split text into pre-tokens on whitespace and punctuation boundaries.
pub fn pre_tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    let mut chars = text.chars().peekable();
    while let Some(c) = chars.next() {
        if c.is_whitespace() {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
        } else if c.is_alphanumeric() || c == '_' || c == '$' {
            word.push(c);
        } else {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            if c == '-' && chars.peek() == Some(&'>') {
                chars.next();
                out.push("->".to_string());
            } else {
                out.push(c.to_string());
            }
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

/// Token inventory with fixed special ids 0..4 and dense ids overall.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIAL_TOKENS.len() {
            return Err(Error::Format("vocab shorter than the special tokens".into()));
        }
        for (i, special) in SPECIAL_TOKENS.iter().enumerate() {
            if tokens[i] != *special {
                return Err(Error::Format(format!(
                    "vocab id {i} must be {special}, found {}",
                    tokens[i]
                )));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if index.insert(tok.clone(), i as u32).is_some() {
                return Err(Error::Format(format!("duplicate token {tok}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token_of(&self, id: u32) -> Result<&str> {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .ok_or(Error::IdOutOfRange {
                id,
                vocab_size: self.tokens.len(),
            })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Greedy longest-match-first encoding. Total: unknown material maps to
    /// `[UNK]` rather than failing.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut ids = Vec::new();
        for word in pre_tokenize(text) {
            self.encode_word(&word, &mut ids);
        }
        ids
    }

    fn encode_word(&self, word: &str, ids: &mut Vec<u32>) {
        let chars: Vec<char> = word.chars().collect();
        if chars.len() > MAX_PRETOKEN_CHARS {
            ids.push(UNK);
            return;
        }
        let mut pieces = Vec::new();
        let mut start = 0;
        while start < chars.len() {
            let mut end = chars.len();
            let mut matched = None;
            while end > start {
                let mut piece: String = chars[start..end].iter().collect();
                if start > 0 {
                    piece.insert_str(0, CONTINUATION);
                }
                if let Some(id) = self.id_of(&piece) {
                    matched = Some(id);
                    break;
                }
                end -= 1;
            }
            match matched {
                Some(id) => {
                    pieces.push(id);
                    start = end;
                }
                None => {
                    // No segmentation: the whole pre-token degrades to [UNK].
                    ids.push(UNK);
                    return;
                }
            }
        }
        ids.extend(pieces);
    }

    /// Join pieces back into text: continuation pieces attach directly,
    /// word-start pieces are separated by single spaces, special tokens
    /// render as their bracketed names.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            let tok = self.token_of(id)?;
            if let Some(rest) = tok.strip_prefix(CONTINUATION) {
                out.push_str(rest);
            } else {
                if !out.is_empty() {
                    out.push(' ');
                }
                out.push_str(tok);
            }
        }
        Ok(out)
    }

    /// Plain-text format: one token per line, line number = id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = std::io::BufWriter::new(fs::File::create(path)?);
        for tok in &self.tokens {
            writeln!(file, "{tok}")?;
        }
        file.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        Vocab::from_tokens(tokens)
    }
}

/// Outcome of vocabulary training.
#[derive(Debug)]
pub struct TrainOutcome {
    pub vocab: Vocab,
    pub warnings: Vec<String>,
}

/// Train a WordPiece vocabulary over an instruction corpus.
///
/// `seed` is accepted for interface stability; the trainer itself is fully
/// deterministic so the seed never influences the result.
pub fn train_wordpiece<'a>(
    texts: impl Iterator<Item = &'a str>,
    vocab_size: usize,
    min_frequency: u64,
    _seed: u64,
) -> Result<TrainOutcome> {
    let mut warnings = Vec::new();

    // Pre-token counts.
    let mut word_counts: HashMap<String, u64> = HashMap::new();
    for text in texts {
        for word in pre_tokenize(text) {
            *word_counts.entry(word).or_insert(0) += 1;
        }
    }

    // Alphabet: word-start chars first, then continuation chars, each sorted.
    let mut start_chars: Vec<char> = Vec::new();
    let mut cont_chars: Vec<char> = Vec::new();
    {
        let mut starts = std::collections::BTreeSet::new();
        let mut conts = std::collections::BTreeSet::new();
        for word in word_counts.keys() {
            for (i, c) in word.chars().enumerate() {
                if i == 0 {
                    starts.insert(c);
                } else {
                    conts.insert(c);
                }
            }
            // Encoding needs the word-start form of every character.
            for c in word.chars() {
                starts.insert(c);
            }
        }
        start_chars.extend(starts);
        cont_chars.extend(conts);
    }

    let minimum = SPECIAL_TOKENS.len() + start_chars.len();
    if vocab_size < minimum {
        return Err(Error::VocabTooSmall {
            requested: vocab_size,
            minimum,
        });
    }
    if word_counts.is_empty() {
        warnings.push("empty corpus: vocabulary holds only the special tokens".to_string());
    }

    let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    tokens.extend(start_chars.iter().map(|c| c.to_string()));
    for c in &cont_chars {
        if tokens.len() >= vocab_size {
            break;
        }
        tokens.push(format!("{CONTINUATION}{c}"));
    }

    // Words as piece-id sequences over a growing piece table.
    let mut piece_table: Vec<String> = Vec::new();
    let mut piece_index: HashMap<String, u32> = HashMap::new();
    let intern = |table: &mut Vec<String>, index: &mut HashMap<String, u32>, s: String| -> u32 {
        if let Some(&id) = index.get(&s) {
            return id;
        }
        let id = table.len() as u32;
        index.insert(s.clone(), id);
        table.push(s);
        id
    };
    let mut words: Vec<(Vec<u32>, u64)> = Vec::new();
    {
        let mut sorted: Vec<(&String, &u64)> = word_counts.iter().collect();
        sorted.sort();
        for (word, &count) in sorted {
            let pieces: Vec<u32> = word
                .chars()
                .enumerate()
                .map(|(i, c)| {
                    let piece = if i == 0 {
                        c.to_string()
                    } else {
                        format!("{CONTINUATION}{c}")
                    };
                    intern(&mut piece_table, &mut piece_index, piece)
                })
                .collect();
            words.push((pieces, count));
        }
    }

    let mut in_vocab: std::collections::HashSet<String> = tokens.iter().cloned().collect();
    while tokens.len() < vocab_size {
        // Piece and pair frequencies over the current segmentation.
        let mut piece_counts: HashMap<u32, u64> = HashMap::new();
        let mut pair_counts: HashMap<(u32, u32), u64> = HashMap::new();
        for (pieces, count) in &words {
            for &p in pieces {
                *piece_counts.entry(p).or_insert(0) += count;
            }
            for w in pieces.windows(2) {
                *pair_counts.entry((w[0], w[1])).or_insert(0) += count;
            }
        }

        // Best pair by likelihood gain count/(left*right); ties broken by
        // count, then lexicographically, all in exact integer arithmetic.
        let mut best: Option<((u32, u32), u64)> = None;
        for (&pair, &count) in &pair_counts {
            if count < min_frequency.max(1) {
                continue;
            }
            match best {
                None => best = Some((pair, count)),
                Some((bpair, bcount)) => {
                    let denom = piece_counts[&pair.0] as u128 * piece_counts[&pair.1] as u128;
                    let bdenom = piece_counts[&bpair.0] as u128 * piece_counts[&bpair.1] as u128;
                    let lhs = count as u128 * bdenom;
                    let rhs = bcount as u128 * denom;
                    let better = lhs > rhs
                        || (lhs == rhs && count > bcount)
                        || (lhs == rhs
                            && count == bcount
                            && (piece_table[pair.0 as usize].as_str(),
                                piece_table[pair.1 as usize].as_str())
                                < (piece_table[bpair.0 as usize].as_str(),
                                   piece_table[bpair.1 as usize].as_str()));
                    if better {
                        best = Some((pair, count));
                    }
                }
            }
        }
        let Some(((left, right), _)) = best else {
            break;
        };

        let merged_str = format!(
            "{}{}",
            piece_table[left as usize],
            piece_table[right as usize].strip_prefix(CONTINUATION).unwrap_or(&piece_table[right as usize])
        );
        let merged = intern(&mut piece_table, &mut piece_index, merged_str.clone());
        if in_vocab.insert(merged_str.clone()) {
            tokens.push(merged_str);
        }

        for (pieces, _) in &mut words {
            let mut i = 0;
            while i + 1 < pieces.len() {
                if pieces[i] == left && pieces[i + 1] == right {
                    pieces[i] = merged;
                    pieces.remove(i + 1);
                } else {
                    i += 1;
                }
            }
        }
    }

    if tokens.len() < vocab_size && !word_counts.is_empty() {
        warnings.push(format!(
            "corpus exhausted at {} tokens before reaching the requested {vocab_size}",
            tokens.len()
        ));
    }

    Ok(TrainOutcome {
        vocab: Vocab::from_tokens(tokens)?,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn pre_tokenize_splits_punctuation_and_arrow() {
        assert_eq!(
            pre_tokenize("invoke-virtual {v0}, Ljava/lang/String;->length()I"),
            vec![
                "invoke", "-", "virtual", "{", "v0", "}", ",", "Ljava", "/", "lang", "/",
                "String", ";", "->", "length", "(", ")", "I"
            ]
        );
        assert_eq!(pre_tokenize(""), Vec::<String>::new());
        assert_eq!(pre_tokenize("a$b_1"), vec!["a$b_1"]);
    }

    #[test]
    fn aaab_training_matches_hand_enumeration() {
        // One word "aaab": word-start chars {a, b}, continuations {##a, ##b}.
        // With size 8 only three slots remain after the specials, so the
        // vocabulary is exactly the specials plus a, b, ##a and no merges.
        let out = train_wordpiece(["aaab"].into_iter(), 8, 1, 0).unwrap();
        let tokens: Vec<&str> = out.vocab.tokens().iter().map(String::as_str).collect();
        assert_eq!(
            tokens,
            vec!["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "a", "b", "##a"]
        );
    }

    #[test]
    fn aaab_with_room_merges_by_likelihood_gain() {
        // Enumerated by hand. Pieces start as [a ##a ##a ##b].
        // Round 1: gains (a,##a)=1/(1*2), (##a,##a)=1/(2*2), (##a,##b)=1/(2*1);
        //   (a,##a) and (##a,##b) tie at 1/2 with equal counts, and
        //   ("##a","##b") < ("a","##a") since '#' < 'a', so "##ab" is created
        //   -> [a ##a ##ab].
        // Round 2: (a,##a) and (##a,##ab) tie at 1/1; ("##a","##ab") sorts
        //   first, giving "##aab" -> [a ##aab].
        // Round 3: only (a,##aab) remains, giving "aaab".
        let out = train_wordpiece(["aaab"].into_iter(), 12, 1, 0).unwrap();
        let tokens: Vec<&str> = out.vocab.tokens().iter().map(String::as_str).collect();
        assert_eq!(
            tokens,
            vec![
                "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "a", "b", "##a", "##b", "##ab",
                "##aab", "aaab"
            ]
        );
    }

    #[test]
    fn vocab_too_small_is_rejected() {
        let err = train_wordpiece(["ab"].into_iter(), 6, 1, 0).unwrap_err();
        assert!(matches!(err, Error::VocabTooSmall { minimum: 7, .. }));
    }

    #[test]
    fn empty_corpus_yields_specials_and_warns() {
        let out = train_wordpiece(std::iter::empty(), 10, 1, 0).unwrap();
        assert_eq!(out.vocab.size(), 5);
        assert_eq!(out.vocab.tokens(), &SPECIAL_TOKENS.map(String::from));
        assert!(!out.warnings.is_empty());
    }

    #[test]
    fn training_is_deterministic() {
        let corpus = ["invoke-virtual {v0}", "const/4 v0, 0x1", "invoke-static {}"];
        let a = train_wordpiece(corpus.iter().copied(), 40, 1, 0).unwrap();
        let b = train_wordpiece(corpus.iter().copied(), 40, 1, 99).unwrap();
        assert_eq!(a.vocab, b.vocab);
    }

    /// Independent greedy longest-match oracle over token strings.
    fn greedy_oracle(vocab: &Vocab, word: &str) -> Vec<u32> {
        let chars: Vec<char> = word.chars().collect();
        if chars.len() > MAX_PRETOKEN_CHARS {
            return vec![UNK];
        }
        let mut out = Vec::new();
        let mut start = 0;
        while start < chars.len() {
            let mut found = None;
            for end in (start + 1..=chars.len()).rev() {
                let raw: String = chars[start..end].iter().collect();
                let candidate = if start == 0 { raw } else { format!("##{raw}") };
                if let Some(id) = vocab.id_of(&candidate) {
                    found = Some((id, end));
                    break;
                }
            }
            match found {
                Some((id, end)) => {
                    out.push(id);
                    start = end;
                }
                None => return vec![UNK],
            }
        }
        out
    }

    #[test]
    fn encode_matches_independent_greedy_oracle() {
        let out = train_wordpiece(["aaab"].into_iter(), 12, 1, 0).unwrap();
        let vocab = &out.vocab;
        for text in ["aaab", "aab", "ba", "abab", "invoke-virtual", "aaa aaab b"] {
            let expected: Vec<u32> = pre_tokenize(text)
                .iter()
                .flat_map(|w| greedy_oracle(vocab, w))
                .collect();
            assert_eq!(vocab.encode(text), expected, "text {text:?}");
        }
        // Characters absent from the alphabet map to a single [UNK].
        assert_eq!(vocab.encode("zzz"), vec![UNK]);
        assert_eq!(vocab.encode(""), Vec::<u32>::new());
    }

    #[test]
    fn decode_renders_specials_and_strips_markers() {
        let out = train_wordpiece(["aaab"].into_iter(), 12, 1, 0).unwrap();
        assert_eq!(out.vocab.decode(&[CLS, SEP]).unwrap(), "[CLS] [SEP]");
        let ids = out.vocab.encode("aaab aab");
        assert_eq!(out.vocab.decode(&ids).unwrap(), "aaab aab");
        let err = out.vocab.decode(&[900]).unwrap_err();
        assert!(matches!(err, Error::IdOutOfRange { id: 900, .. }));
    }

    #[test]
    fn unknown_material_round_trips_lossily() {
        let out = train_wordpiece(["aaab"].into_iter(), 12, 1, 0).unwrap();
        let ids = out.vocab.encode("aaab zz");
        assert!(ids.contains(&UNK));
        assert_eq!(out.vocab.decode(&ids).unwrap(), "aaab [UNK]");
    }

    #[test]
    fn vocab_file_roundtrip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let out = train_wordpiece(["invoke-virtual {v0}"].into_iter(), 30, 1, 0).unwrap();
        out.vocab.save(&path).unwrap();
        let first = std::fs::read(&path).unwrap();
        let reloaded = Vocab::load(&path).unwrap();
        assert_eq!(reloaded, out.vocab);
        reloaded.save(&path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);
    }

    proptest! {
        #[test]
        fn encode_is_total_and_in_range(text in "[ -~]{0,40}") {
            let out = train_wordpiece(["aaab ->, /;"].into_iter(), 20, 1, 0).unwrap();
            let ids = out.vocab.encode(&text);
            prop_assert!(ids.iter().all(|&id| (id as usize) < out.vocab.size()));
            prop_assert_eq!(out.vocab.encode(&text), ids);
        }

        #[test]
        fn greedy_property_no_longer_match_exists(word in "[ab]{1,12}") {
            let out = train_wordpiece(["aaab", "abab", "bb"].into_iter(), 16, 1, 0).unwrap();
            let vocab = &out.vocab;
            let ids = vocab.encode(&word);
            if !ids.contains(&UNK) {
                // Walk the emitted pieces and assert maximality at each position.
                let chars: Vec<char> = word.chars().collect();
                let mut pos = 0;
                for &id in &ids {
                    let tok = vocab.token_of(id).unwrap();
                    let body = tok.strip_prefix("##").unwrap_or(tok);
                    let len = body.chars().count();
                    for longer in len + 1..=chars.len() - pos {
                        let raw: String = chars[pos..pos + longer].iter().collect();
                        let candidate = if pos == 0 { raw } else { format!("##{raw}") };
                        prop_assert!(vocab.id_of(&candidate).is_none(),
                            "piece {tok} at {pos} not maximal: {candidate} in vocab");
                    }
                    pos += len;
                }
                prop_assert_eq!(pos, chars.len());
            }
        }

        #[test]
        fn roundtrip_on_in_vocab_text(words in proptest::collection::vec("(aaab|aab|b|a)", 1..6)) {
            let out = train_wordpiece(["aaab"].into_iter(), 12, 1, 0).unwrap();
            let text = words.join(" ");
            let ids = out.vocab.encode(&text);
            if !ids.contains(&UNK) {
                // Canonical spacing: pre-tokens joined by single spaces.
                let canon = pre_tokenize(&text).join(" ");
                prop_assert_eq!(out.vocab.decode(&ids).unwrap(), canon);
            }
        }
    }
}
