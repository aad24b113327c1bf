//! WordPiece tokenizer trained from scratch on transaction text.
//!
//! Training grows a vocabulary from single characters by repeatedly merging
//! the adjacent symbol pair with the highest likelihood score
//! `count(pair) / (count(left) * count(right))`. Continuation pieces carry
//! the `##` prefix. Tokenization is greedy longest-match-first over
//! normalized text.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const SPECIALS: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"];
pub const CONTINUATION_PREFIX: &str = "##";

/// Words longer than this tokenize to [UNK] outright, bounding the greedy scan.
pub const MAX_WORD_CHARS: usize = 64;

#[derive(Clone, Debug)]
pub struct Vocab {
    tokens: Vec<String>,
    lookup: HashMap<String, u32>,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Vocab {
        let lookup = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocab { tokens, lookup }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.lookup.get(token).copied()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.lookup.contains_key(token)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line; the line number is the id.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for t in &self.tokens {
            writeln!(f, "{t}")?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Vocab> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut tokens = Vec::new();
        for line in f.lines() {
            tokens.push(line?);
        }
        if tokens.len() < 4 || tokens[..4] != SPECIALS.map(str::to_string) {
            return Err(Error::InvalidConfig(
                "vocab file must start with [PAD] [UNK] [CLS] [SEP]".into(),
            ));
        }
        Ok(Vocab::from_tokens(tokens))
    }
}

/// Lowercase, split on whitespace, and isolate punctuation characters as
/// separate words. Digits pass through verbatim.
pub fn normalize(text: &str) -> Vec<String> {
    let mut words = Vec::new();
    let mut current = String::new();
    for ch in text.to_lowercase().chars() {
        if ch.is_whitespace() {
            if !current.is_empty() {
                words.push(std::mem::take(&mut current));
            }
        } else if ch.is_alphanumeric() {
            current.push(ch);
        } else {
            if !current.is_empty() {
                words.push(std::mem::take(&mut current));
            }
            words.push(ch.to_string());
        }
    }
    if !current.is_empty() {
        words.push(current);
    }
    words
}

/// Train a WordPiece vocabulary. All single characters seen in the corpus
/// enter the vocabulary (word-initial and continuation forms separately), so
/// tokenization only falls back to [UNK] on characters never seen. The
/// result has exactly `min(vocab_size, attainable)` entries.
pub fn train_wordpiece(
    corpus: &[String],
    vocab_size: usize,
    min_frequency: u64,
) -> Result<Vocab> {
    if corpus.iter().all(|l| normalize(l).is_empty()) {
        return Err(Error::EmptyCorpus);
    }
    if min_frequency < 1 {
        return Err(Error::InvalidConfig("min_frequency must be >= 1".into()));
    }

    // Distinct normalized words with counts, in first-seen order.
    let mut word_counts: Vec<(String, u64)> = Vec::new();
    let mut word_index: HashMap<String, usize> = HashMap::new();
    for line in corpus {
        for w in normalize(line) {
            match word_index.get(&w) {
                Some(&i) => word_counts[i].1 += 1,
                None => {
                    word_index.insert(w.clone(), word_counts.len());
                    word_counts.push((w, 1));
                }
            }
        }
    }

    // Interned symbol table. Seed with the alphabet in sorted order.
    let mut sym_names: Vec<String> = Vec::new();
    let mut sym_ids: HashMap<String, u32> = HashMap::new();
    let intern = |name: String, names: &mut Vec<String>, ids: &mut HashMap<String, u32>| {
        *ids.entry(name.clone()).or_insert_with(|| {
            names.push(name);
            (names.len() - 1) as u32
        })
    };
    let mut alphabet: HashSet<String> = HashSet::new();
    for (w, _) in &word_counts {
        for (i, ch) in w.chars().enumerate() {
            if i == 0 {
                alphabet.insert(ch.to_string());
            } else {
                alphabet.insert(format!("{CONTINUATION_PREFIX}{ch}"));
            }
        }
    }
    let mut alphabet: Vec<String> = alphabet.into_iter().collect();
    alphabet.sort();
    if vocab_size < 4 + alphabet.len() {
        return Err(Error::InvalidConfig(format!(
            "vocab_size {} is below 4 specials + {} alphabet symbols",
            vocab_size,
            alphabet.len()
        )));
    }
    for a in &alphabet {
        intern(a.clone(), &mut sym_names, &mut sym_ids);
    }

    // Words as symbol id sequences.
    let mut words: Vec<(Vec<u32>, u64)> = word_counts
        .iter()
        .map(|(w, c)| {
            let syms = w
                .chars()
                .enumerate()
                .map(|(i, ch)| {
                    let name = if i == 0 {
                        ch.to_string()
                    } else {
                        format!("{CONTINUATION_PREFIX}{ch}")
                    };
                    sym_ids[&name]
                })
                .collect();
            (syms, *c)
        })
        .collect();

    let mut sym_counts: HashMap<u32, u64> = HashMap::new();
    let mut pair_counts: HashMap<(u32, u32), u64> = HashMap::new();
    let mut pair_words: HashMap<(u32, u32), HashSet<usize>> = HashMap::new();
    for (wi, (syms, c)) in words.iter().enumerate() {
        for &s in syms {
            *sym_counts.entry(s).or_insert(0) += c;
        }
        for pair in syms.windows(2) {
            let p = (pair[0], pair[1]);
            *pair_counts.entry(p).or_insert(0) += c;
            pair_words.entry(p).or_default().insert(wi);
        }
    }

    let mut vocab: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    vocab.extend(alphabet.iter().cloned());
    let mut vocab_set: HashSet<String> = vocab.iter().cloned().collect();

    while vocab.len() < vocab_size {
        // Highest likelihood score; ties by raw count, then lexicographic.
        // Scores compared as exact integers via cross-multiplication.
        let mut best: Option<((u32, u32), u64)> = None;
        for (&pair, &count) in &pair_counts {
            if count < min_frequency {
                continue;
            }
            let lc = sym_counts[&pair.0];
            let rc = sym_counts[&pair.1];
            let better = match best {
                None => true,
                Some((bpair, bcount)) => {
                    let blc = sym_counts[&bpair.0];
                    let brc = sym_counts[&bpair.1];
                    let lhs = count as u128 * (blc as u128 * brc as u128);
                    let rhs = bcount as u128 * (lc as u128 * rc as u128);
                    match lhs.cmp(&rhs) {
                        std::cmp::Ordering::Greater => true,
                        std::cmp::Ordering::Less => false,
                        std::cmp::Ordering::Equal => match count.cmp(&bcount) {
                            std::cmp::Ordering::Greater => true,
                            std::cmp::Ordering::Less => false,
                            std::cmp::Ordering::Equal => {
                                let cand = (&sym_names[pair.0 as usize], &sym_names[pair.1 as usize]);
                                let cur =
                                    (&sym_names[bpair.0 as usize], &sym_names[bpair.1 as usize]);
                                cand < cur
                            }
                        },
                    }
                }
            };
            if better {
                best = Some((pair, count));
            }
        }
        let Some((pair, _)) = best else { break };

        let left = sym_names[pair.0 as usize].clone();
        let right = sym_names[pair.1 as usize].clone();
        let merged_name = format!(
            "{left}{}",
            right.strip_prefix(CONTINUATION_PREFIX).unwrap_or(&right)
        );
        let merged = intern(merged_name.clone(), &mut sym_names, &mut sym_ids);
        if vocab_set.insert(merged_name.clone()) {
            vocab.push(merged_name);
        }

        // Rewrite only the words containing the pair.
        let affected: Vec<usize> = pair_words
            .remove(&pair)
            .map(|s| {
                let mut v: Vec<usize> = s.into_iter().collect();
                v.sort_unstable();
                v
            })
            .unwrap_or_default();
        for wi in affected {
            let (syms, c) = &mut words[wi];
            let c = *c;
            // retire this word's old pair statistics
            for w2 in syms.windows(2) {
                let p = (w2[0], w2[1]);
                if let Some(e) = pair_counts.get_mut(&p) {
                    *e -= c;
                    if *e == 0 {
                        pair_counts.remove(&p);
                    }
                }
                if let Some(ws) = pair_words.get_mut(&p) {
                    ws.remove(&wi);
                }
            }
            let mut rewritten = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && syms[i] == pair.0 && syms[i + 1] == pair.1 {
                    rewritten.push(merged);
                    *sym_counts.entry(merged).or_insert(0) += c;
                    *sym_counts.get_mut(&pair.0).unwrap() -= c;
                    *sym_counts.get_mut(&pair.1).unwrap() -= c;
                    i += 2;
                } else {
                    rewritten.push(syms[i]);
                    i += 1;
                }
            }
            *syms = rewritten;
            for w2 in syms.windows(2) {
                let p = (w2[0], w2[1]);
                *pair_counts.entry(p).or_insert(0) += c;
                pair_words.entry(p).or_default().insert(wi);
            }
        }
    }

    Ok(Vocab::from_tokens(vocab))
}

/// Greedy longest-match-first WordPiece over normalized text, wrapped in
/// [CLS] ... [SEP]. A word with no full tokenization (or longer than
/// [`MAX_WORD_CHARS`]) becomes a single [UNK].
pub fn tokenize(vocab: &Vocab, text: &str) -> Vec<u32> {
    let mut ids = vec![CLS];
    for word in normalize(text) {
        tokenize_word(vocab, &word, &mut ids);
    }
    ids.push(SEP);
    ids
}

fn tokenize_word(vocab: &Vocab, word: &str, out: &mut Vec<u32>) {
    let chars: Vec<char> = word.chars().collect();
    if chars.len() > MAX_WORD_CHARS {
        out.push(UNK);
        return;
    }
    let mut pieces = Vec::new();
    let mut pos = 0;
    while pos < chars.len() {
        let mut matched = None;
        for end in (pos + 1..=chars.len()).rev() {
            let body: String = chars[pos..end].iter().collect();
            let candidate = if pos == 0 {
                body
            } else {
                format!("{CONTINUATION_PREFIX}{body}")
            };
            if let Some(id) = vocab.id(&candidate) {
                matched = Some((id, end));
                break;
            }
        }
        match matched {
            Some((id, end)) => {
                pieces.push(id);
                pos = end;
            }
            None => {
                out.push(UNK);
                return;
            }
        }
    }
    out.extend(pieces);
}

/// Inverse of [`tokenize`] up to normalization: concatenates pieces,
/// stripping continuation prefixes. Only meaningful when no [UNK] occurs.
pub fn detokenize(vocab: &Vocab, ids: &[u32]) -> String {
    let mut out = String::new();
    for &id in ids {
        if id == CLS || id == SEP || id == PAD || id == UNK {
            continue;
        }
        let tok = vocab.token(id);
        if let Some(cont) = tok.strip_prefix(CONTINUATION_PREFIX) {
            out.push_str(cont);
        } else {
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(tok);
        }
    }
    out
}

/// Arithmetic mean of non-special token counts per line.
pub fn mean_tokens_per_line(vocab: &Vocab, corpus: &[String]) -> f64 {
    assert!(!corpus.is_empty(), "corpus must be non-empty");
    let total: usize = corpus
        .iter()
        .map(|line| tokenize(vocab, line).iter().filter(|&&id| id > SEP).count())
        .sum();
    total as f64 / corpus.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lines(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn repeated_word_merges_to_single_token() {
        let corpus: Vec<String> = vec!["EXXONMOBIL".to_string(); 1000];
        let vocab = train_wordpiece(&corpus, 64, 2).unwrap();
        assert!(vocab.contains("exxonmobil"), "full word becomes one token");
        let ids = tokenize(&vocab, "EXXONMOBIL");
        assert_eq!(ids.len(), 3);
        assert_eq!(vocab.token(ids[1]), "exxonmobil");
    }

    #[test]
    fn no_merge_budget_keeps_single_characters() {
        let corpus = lines(&["ab", "ab", "ba"]);
        // alphabet: a, b, ##a, ##b
        let vocab = train_wordpiece(&corpus, 8, 1).unwrap();
        assert_eq!(vocab.len(), 8);
        assert_eq!(&vocab.tokens()[..4], &SPECIALS.map(str::to_string));
        let mut rest: Vec<&str> = vocab.tokens()[4..].iter().map(|s| s.as_str()).collect();
        rest.sort_unstable();
        assert_eq!(rest, vec!["##a", "##b", "a", "b"]);
    }

    #[test]
    fn training_is_deterministic() {
        let corpus = lines(&[
            "STARBUCKS 1042",
            "STARBUCKS 98",
            "UBER TRIP",
            "UBER EATS",
            "EXXONMOBIL",
        ]);
        let a = train_wordpiece(&corpus, 48, 1).unwrap();
        let b = train_wordpiece(&corpus, 48, 1).unwrap();
        assert_eq!(a.tokens(), b.tokens());
    }

    #[test]
    fn empty_corpus_is_error() {
        assert!(matches!(
            train_wordpiece(&[], 100, 1),
            Err(Error::EmptyCorpus)
        ));
        assert!(matches!(
            train_wordpiece(&lines(&["", "  "]), 100, 1),
            Err(Error::EmptyCorpus)
        ));
    }

    #[test]
    fn tokenize_empty_and_verbatim() {
        let corpus = lines(&["fuel", "fuel", "fuel"]);
        let vocab = train_wordpiece(&corpus, 32, 1).unwrap();
        assert_eq!(tokenize(&vocab, ""), vec![CLS, SEP]);
        let ids = tokenize(&vocab, "fuel");
        assert_eq!(ids.len(), 3, "[CLS] fuel [SEP]");
        assert_eq!(vocab.token(ids[1]), "fuel");
    }

    #[test]
    fn longest_match_prefers_whole_words() {
        let corpus: Vec<String> = std::iter::repeat("exxonmobil gas".to_string())
            .take(50)
            .collect();
        let vocab = train_wordpiece(&corpus, 128, 1).unwrap();
        assert!(vocab.contains("exxonmobil"));
        assert!(vocab.contains("gas"));
        let ids = tokenize(&vocab, "exxonmobil gas");
        assert_eq!(ids.len(), 4);
        assert_eq!(vocab.token(ids[1]), "exxonmobil");
        assert_eq!(vocab.token(ids[2]), "gas");
    }

    #[test]
    fn unseen_character_becomes_unk() {
        let corpus = lines(&["abc abc"]);
        let vocab = train_wordpiece(&corpus, 32, 1).unwrap();
        let ids = tokenize(&vocab, "abz");
        assert_eq!(ids, vec![CLS, UNK, SEP]);
    }

    #[test]
    fn overlong_word_is_unk() {
        let corpus = lines(&["aa"]);
        let vocab = train_wordpiece(&corpus, 16, 1).unwrap();
        let long = "a".repeat(MAX_WORD_CHARS + 1);
        assert_eq!(tokenize(&vocab, &long), vec![CLS, UNK, SEP]);
    }

    #[test]
    fn punctuation_is_isolated() {
        let corpus = lines(&["a.b a.b"]);
        let vocab = train_wordpiece(&corpus, 32, 1).unwrap();
        assert_eq!(normalize("A.B"), vec!["a", ".", "b"]);
        let ids = tokenize(&vocab, "A.B");
        // [CLS] a . b [SEP]
        assert_eq!(ids.len(), 5);
        assert_eq!(detokenize(&vocab, &ids), "a . b");
    }

    #[test]
    fn mean_tokens_fixtures() {
        let corpus = lines(&["fuel", "fuel"]);
        let vocab = train_wordpiece(&corpus, 32, 1).unwrap();
        assert_eq!(mean_tokens_per_line(&vocab, &corpus), 1.0);

        // single-character vocab: 4 specials + alphabet {a, ##b}, no merge budget
        let ab = lines(&["ab", "ab"]);
        let vocab_ab = train_wordpiece(&ab, 6, 1).unwrap();
        assert_eq!(vocab_ab.len(), 6);
        assert_eq!(mean_tokens_per_line(&vocab_ab, &ab), 2.0);
    }

    #[test]
    fn growing_vocab_never_increases_mean_tokens() {
        let corpus = lines(&[
            "STARBUCKS 1042",
            "STARBUCKS 98",
            "UBER TRIP 7",
            "UBER EATS 12",
            "EXXONMOBIL 3",
            "EXXONMOBIL STATION",
        ]);
        let mut prev = f64::INFINITY;
        for size in [40, 48, 64, 96, 160] {
            let vocab = train_wordpiece(&corpus, size, 1).unwrap();
            let mean = mean_tokens_per_line(&vocab, &corpus);
            assert!(
                mean <= prev + 1e-12,
                "vocab {size}: mean {mean} > previous {prev}"
            );
            prev = mean;
        }
    }

    #[test]
    fn save_load_round_trip() {
        let corpus = lines(&["uber trip", "uber eats"]);
        let vocab = train_wordpiece(&corpus, 64, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        vocab.save(&path).unwrap();
        let loaded = Vocab::load(&path).unwrap();
        assert_eq!(vocab.tokens(), loaded.tokens());
    }

    proptest! {
        #[test]
        fn detokenize_round_trips_without_unk(words in proptest::collection::vec("[a-z0-9]{1,8}", 1..6)) {
            let line = words.join(" ");
            let corpus = vec![line.clone(), "abcdefghijklmnopqrstuvwxyz 0123456789".to_string()];
            let vocab = train_wordpiece(&corpus, 256, 1).unwrap();
            let ids = tokenize(&vocab, &line);
            prop_assert!(!ids.contains(&UNK));
            let round = detokenize(&vocab, &ids);
            prop_assert_eq!(round, normalize(&line).join(" "));
        }
    }
}
