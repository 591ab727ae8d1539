//! Client-partitioned text: vocabulary, tokenization and client datasets.
//!
//! Corpora are JSON-lines files with one `{"client_id": .., "text": ..}`
//! object per line. Pretraining corpora may also be plain text, one sample
//! per line; those are pooled under a single anonymous client.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use log::warn;
use rand::seq::index;
use serde::Deserialize;

use crate::seed::{self, Part};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const OOV: usize = 3;
pub const NUM_SPECIALS: usize = 4;

/// Surface forms of the special tokens, indexed by id.
pub const SPECIAL_TOKENS: [&str; NUM_SPECIALS] = ["<pad>", "<bos>", "<eos>", "<oov>"];

pub const DEFAULT_MAX_SEQ_LEN: usize = 20;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("empty corpus: {0}")]
    EmptyCorpus(PathBuf),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

type Result<T> = std::result::Result<T, CorpusError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One corpus entry.
#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub client_id: String,
    pub text: String,
}

/// On-disk corpus layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusFormat {
    JsonLines,
    PlainText,
}

impl CorpusFormat {
    /// `.jsonl` / `.json` files are JSON-lines, anything else is plain text.
    pub fn detect(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") => CorpusFormat::JsonLines,
            _ => CorpusFormat::PlainText,
        }
    }
}

/// Reads a JSON-lines corpus. Blank lines are skipped; anything else that is
/// not an object with exactly `client_id` and `text` is a parse error.
pub fn read_jsonl(path: &Path) -> Result<Vec<Record>> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        records.push(record);
    }
    Ok(records)
}

/// Reads a plain-text corpus: each non-blank line is one sample.
pub fn read_plain_text(path: &Path) -> Result<Vec<Record>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Record {
            client_id: String::new(),
            text: l.to_string(),
        })
        .collect())
}

/// Reads a corpus in whichever format its extension indicates.
pub fn read_corpus(path: &Path) -> Result<Vec<Record>> {
    match CorpusFormat::detect(path) {
        CorpusFormat::JsonLines => read_jsonl(path),
        CorpusFormat::PlainText => read_plain_text(path),
    }
}

/// Lowercased whitespace tokens.
pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(|w| w.to_lowercase())
}

/// Bidirectional word/id map. Ids 0..4 are the special tokens; real words
/// follow in descending corpus frequency.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    word_to_id: HashMap<String, usize>,
    id_to_word: Vec<String>,
}

impl Vocabulary {
    /// Builds a vocabulary from an ordered word list (rank order, specials excluded).
    pub fn from_words<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut id_to_word: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut word_to_id: HashMap<String, usize> = id_to_word
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        for word in words {
            let word = word.into();
            if word.is_empty() || word.chars().any(char::is_whitespace) {
                return Err(CorpusError::InvalidArgument(format!(
                    "invalid vocabulary word {word:?}"
                )));
            }
            if word_to_id.contains_key(&word) {
                return Err(CorpusError::InvalidArgument(format!(
                    "duplicate or reserved vocabulary word {word:?}"
                )));
            }
            word_to_id.insert(word.clone(), id_to_word.len());
            id_to_word.push(word);
        }
        Ok(Vocabulary {
            word_to_id,
            id_to_word,
        })
    }

    /// Ranks words by frequency across `texts` (ties lexicographic) and keeps
    /// the top `num_words`.
    pub fn from_texts<'a, I>(texts: I, num_words: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        if num_words == 0 {
            return Err(CorpusError::InvalidArgument(
                "num_words must be >= 1".into(),
            ));
        }
        let mut counts: HashMap<String, u64> = HashMap::new();
        for text in texts {
            for w in words(text) {
                if SPECIAL_TOKENS.contains(&w.as_str()) {
                    continue;
                }
                *counts.entry(w).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        if ranked.len() < num_words {
            warn!(
                "corpus has only {} distinct words, fewer than the requested {num_words}",
                ranked.len()
            );
        }
        ranked.truncate(num_words);
        Self::from_words(ranked.into_iter().map(|(w, _)| w))
    }

    /// Reads the one-word-per-line vocabulary file (line `k`, zero-based, is id `k + 4`).
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut list = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() || line.chars().any(char::is_whitespace) {
                return Err(CorpusError::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: format!("invalid vocabulary entry {line:?}"),
                });
            }
            list.push(line.to_string());
        }
        Self::from_words(list).map_err(|e| CorpusError::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for w in self.real_words() {
            out.push_str(w);
            out.push('\n');
        }
        fs::write(path, out).map_err(io_err(path))
    }

    /// Total size including the four specials.
    pub fn len(&self) -> usize {
        self.id_to_word.len()
    }

    /// True when the vocabulary holds no real words.
    pub fn is_empty(&self) -> bool {
        self.id_to_word.len() == NUM_SPECIALS
    }

    pub fn num_words(&self) -> usize {
        self.id_to_word.len() - NUM_SPECIALS
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.word_to_id.get(word).copied()
    }

    /// Id of a real word, or `OOV`. Special surface forms in text are words
    /// like any other and map to `OOV`.
    pub fn id_or_oov(&self, word: &str) -> usize {
        match self.word_to_id.get(word) {
            Some(&id) if id >= NUM_SPECIALS => id,
            _ => OOV,
        }
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.id_to_word.get(id).map(String::as_str)
    }

    /// Real words in id order.
    pub fn real_words(&self) -> impl Iterator<Item = &str> {
        self.id_to_word[NUM_SPECIALS..].iter().map(String::as_str)
    }

    pub fn contains_word(&self, word: &str) -> bool {
        self.id_or_oov(word) != OOV
    }
}

/// Reads a corpus and builds its vocabulary.
pub fn build_vocab(corpus_path: &Path, num_words: usize) -> Result<Vocabulary> {
    let records = read_corpus(corpus_path)?;
    let has_tokens = records
        .iter()
        .any(|r| r.text.split_whitespace().next().is_some());
    if !has_tokens {
        return Err(CorpusError::EmptyCorpus(corpus_path.to_path_buf()));
    }
    Vocabulary::from_texts(records.iter().map(|r| r.text.as_str()), num_words)
}

/// A fixed-length id sequence: `bos`, words, `eos`, then padding.
///
/// Holds `max_seq_len + 1` ids so that inputs are positions `0..T` and
/// targets are positions `1..=T`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    /// Number of non-pad target positions.
    pub true_length: usize,
}

impl TokenSequence {
    /// Sequence length `T` as seen by the model.
    pub fn max_seq_len(&self) -> usize {
        self.ids.len() - 1
    }

    pub fn inputs(&self) -> &[usize] {
        &self.ids[..self.ids.len() - 1]
    }

    pub fn targets(&self) -> &[usize] {
        &self.ids[1..]
    }

    /// Real-word and oov ids mapped back to surface forms, specials dropped
    /// except oov, which renders as `<oov>`.
    pub fn detokenize(&self, vocab: &Vocabulary) -> Vec<String> {
        self.ids
            .iter()
            .filter(|&&id| id >= OOV)
            .filter_map(|&id| vocab.word(id).map(str::to_string))
            .collect()
    }
}

/// Lowercases, splits on whitespace, maps to ids, wraps in `bos`/`eos`,
/// truncates to `max_seq_len + 1` ids and right-pads.
pub fn tokenize(text: &str, vocab: &Vocabulary, max_seq_len: usize) -> TokenSequence {
    assert!(max_seq_len >= 1, "max_seq_len must be >= 1");
    let total = max_seq_len + 1;
    let mut ids = Vec::with_capacity(total);
    ids.push(BOS);
    for w in words(text) {
        if ids.len() == total {
            break;
        }
        ids.push(vocab.id_or_oov(&w));
    }
    if ids.len() < total {
        ids.push(EOS);
    }
    let true_length = ids.len() - 1;
    ids.resize(total, PAD);
    TokenSequence { ids, true_length }
}

/// One client's tokenized samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    pub client_id: String,
    pub sequences: Vec<TokenSequence>,
    /// Sample count; the client's averaging weight.
    pub num_samples: usize,
}

impl ClientDataset {
    pub fn new(client_id: impl Into<String>, sequences: Vec<TokenSequence>) -> Self {
        let num_samples = sequences.len();
        ClientDataset {
            client_id: client_id.into(),
            sequences,
            num_samples,
        }
    }
}

/// Groups records by client (ascending client id), subsampling clients above
/// `per_client_cap` uniformly at random. File order is kept among the
/// retained samples.
pub fn group_clients(
    records: &[Record],
    vocab: &Vocabulary,
    max_seq_len: usize,
    per_client_cap: usize,
    rng_seed: u64,
) -> Vec<ClientDataset> {
    let mut grouped: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for r in records {
        grouped.entry(&r.client_id).or_default().push(&r.text);
    }
    grouped
        .into_iter()
        .map(|(client_id, texts)| {
            let selected: Vec<&str> = if texts.len() > per_client_cap {
                let mut rng = seed::stream(rng_seed, "client-cap", &[Part::Str(client_id)]);
                let mut picks = index::sample(&mut rng, texts.len(), per_client_cap).into_vec();
                picks.sort_unstable();
                picks.into_iter().map(|i| texts[i]).collect()
            } else {
                texts
            };
            let sequences = selected
                .into_iter()
                .map(|t| tokenize(t, vocab, max_seq_len))
                .collect();
            ClientDataset::new(client_id, sequences)
        })
        .collect()
}

/// Loads a JSON-lines corpus as client datasets.
pub fn load_clients(
    corpus_path: &Path,
    vocab: &Vocabulary,
    max_seq_len: usize,
    per_client_cap: usize,
    rng_seed: u64,
) -> Result<Vec<ClientDataset>> {
    if per_client_cap == 0 {
        return Err(CorpusError::InvalidArgument(
            "per_client_cap must be >= 1".into(),
        ));
    }
    let records = read_jsonl(corpus_path)?;
    Ok(group_clients(
        &records,
        vocab,
        max_seq_len,
        per_client_cap,
        rng_seed,
    ))
}

/// Pools all samples and draws `num_samples` of them uniformly (file order kept).
pub fn sample_eval_set(
    records: &[Record],
    vocab: &Vocabulary,
    max_seq_len: usize,
    num_samples: usize,
    rng_seed: u64,
) -> Vec<TokenSequence> {
    let chosen: Vec<usize> = if num_samples >= records.len() {
        if num_samples > records.len() {
            warn!(
                "requested {num_samples} evaluation samples but only {} are available; using all",
                records.len()
            );
        }
        (0..records.len()).collect()
    } else {
        let mut rng = seed::stream(rng_seed, "eval-set", &[]);
        let mut picks = index::sample(&mut rng, records.len(), num_samples).into_vec();
        picks.sort_unstable();
        picks
    };
    chosen
        .into_iter()
        .map(|i| tokenize(&records[i].text, vocab, max_seq_len))
        .collect()
}

/// Builds an evaluation set from a corpus file in either format.
pub fn build_eval_set(
    corpus_path: &Path,
    vocab: &Vocabulary,
    max_seq_len: usize,
    num_samples: usize,
    rng_seed: u64,
) -> Result<Vec<TokenSequence>> {
    let records = read_corpus(corpus_path)?;
    Ok(sample_eval_set(
        &records,
        vocab,
        max_seq_len,
        num_samples,
        rng_seed,
    ))
}

/// Writes records as JSON-lines.
pub fn write_jsonl(path: &Path, records: &[Record]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        let line = serde_json::json!({ "client_id": r.client_id, "text": r.text });
        writeln!(out, "{line}").expect("write to Vec");
    }
    fs::write(path, out).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab(words: &[&str]) -> Vocabulary {
        Vocabulary::from_words(words.iter().copied()).unwrap()
    }

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> PathBuf {
        let p = dir.path().join(name);
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn vocab_ranks_by_frequency_then_lexicographically() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "c.jsonl",
            "{\"client_id\":\"u1\",\"text\":\"a a b\"}\n{\"client_id\":\"u2\",\"text\":\"b c\"}\n",
        );
        let v = build_vocab(&p, 2).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(v.id("a"), Some(4));
        assert_eq!(v.id("b"), Some(5));
        assert_eq!(v.id("c"), None);
    }

    #[test]
    fn single_word_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "c.jsonl", "{\"client_id\":\"u\",\"text\":\"x\"}\n");
        let v = build_vocab(&p, 1).unwrap();
        assert_eq!(v.len(), 5);
        assert_eq!(v.id("x"), Some(4));
    }

    #[test]
    fn lowercases_and_skips_special_surface_forms() {
        let v = Vocabulary::from_texts(["The the <eos> THE cat"], 10).unwrap();
        assert_eq!(v.id("the"), Some(4));
        assert_eq!(v.id("cat"), Some(5));
        assert_eq!(v.len(), 6);
        assert_eq!(v.id_or_oov("<eos>"), OOV);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "c.jsonl", "{\"client_id\":\"u\",\"text\":\"   \"}\n");
        assert!(matches!(
            build_vocab(&p, 3),
            Err(CorpusError::EmptyCorpus(_))
        ));
        let p = write(&dir, "d.jsonl", "");
        assert!(matches!(
            build_vocab(&p, 3),
            Err(CorpusError::EmptyCorpus(_))
        ));
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = build_vocab(Path::new("/nonexistent/corpus.jsonl"), 3).unwrap_err();
        assert!(matches!(err, CorpusError::Io { .. }));
    }

    #[test]
    fn tokenize_examples() {
        let ab = vocab(&["a", "b"]);
        assert_eq!(tokenize("a b", &ab, 4).ids, vec![1, 4, 5, 2, 0]);
        assert_eq!(tokenize("a b", &ab, 4).true_length, 3);
        let a = vocab(&["a"]);
        assert_eq!(tokenize("a z", &a, 4).ids, vec![1, 4, 3, 2, 0]);
        let abcde = vocab(&["a", "b", "c", "d", "e"]);
        let t = tokenize("a b c d e", &abcde, 3);
        assert_eq!(t.ids, vec![1, 4, 5, 6]);
        assert_eq!(t.true_length, 3);
        assert_eq!(tokenize("", &a, 3).ids, vec![1, 2, 0, 0]);
        assert_eq!(tokenize("A  B", &ab, 4).ids, vec![1, 4, 5, 2, 0]);
    }

    #[test]
    fn exact_fit_keeps_eos() {
        let ab = vocab(&["a", "b"]);
        assert_eq!(tokenize("a b", &ab, 3).ids, vec![1, 4, 5, 2]);
    }

    #[test]
    fn vocab_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let v = vocab(&["z", "y", "x"]);
        let p = dir.path().join("vocab.txt");
        v.save(&p).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "z\ny\nx\n");
        assert_eq!(Vocabulary::load(&p).unwrap(), v);
    }

    #[test]
    fn vocab_file_rejects_bad_entries() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "v.txt", "a\n<pad>\n");
        assert!(Vocabulary::load(&p).is_err());
        let p = write(&dir, "w.txt", "a\n\nb\n");
        assert!(matches!(
            Vocabulary::load(&p),
            Err(CorpusError::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn malformed_jsonl_names_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "c.jsonl",
            "{\"client_id\":\"u\",\"text\":\"a\"}\n{\"client_id\":\"u\"}\n",
        );
        let v = vocab(&["a"]);
        match load_clients(&p, &v, 4, 10, 0) {
            Err(CorpusError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        let p = write(
            &dir,
            "d.jsonl",
            "{\"client_id\":\"u\",\"text\":\"a\",\"extra\":1}\n",
        );
        assert!(matches!(
            load_clients(&p, &v, 4, 10, 0),
            Err(CorpusError::Parse { line: 1, .. })
        ));
    }

    fn numbered_records(clients: usize, per_client: usize) -> Vec<Record> {
        (0..clients)
            .flat_map(|c| {
                (0..per_client).map(move |i| Record {
                    client_id: format!("c{c:02}"),
                    text: format!("w{i} w{}", i + c),
                })
            })
            .collect()
    }

    #[test]
    fn client_cap_subsamples_deterministically() {
        let records = numbered_records(3, 20);
        let v = Vocabulary::from_texts(records.iter().map(|r| r.text.as_str()), 50).unwrap();
        let a = group_clients(&records, &v, 5, 7, 11);
        let b = group_clients(&records, &v, 5, 7, 11);
        let c = group_clients(&records, &v, 5, 7, 12);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.len(), 3);
        for client in &a {
            assert_eq!(client.num_samples, 7);
            assert_eq!(client.sequences.len(), 7);
        }
        assert_eq!(a[0].client_id, "c00");
        let small = group_clients(&records, &v, 5, 100, 11);
        assert!(small.iter().all(|c| c.num_samples == 20));
    }

    #[test]
    fn eval_set_uses_all_when_short() {
        let records = numbered_records(2, 3);
        let v = Vocabulary::from_texts(records.iter().map(|r| r.text.as_str()), 50).unwrap();
        assert_eq!(sample_eval_set(&records, &v, 4, 100, 1).len(), 6);
        let four = sample_eval_set(&records, &v, 4, 4, 1);
        assert_eq!(four.len(), 4);
        assert_eq!(four, sample_eval_set(&records, &v, 4, 4, 1));
    }

    #[test]
    fn plain_text_corpus_pools_lines() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "p.txt", "to be or\n\nnot to be\n");
        let records = read_corpus(&p).unwrap();
        assert_eq!(records.len(), 2);
        let v = build_vocab(&p, 10).unwrap();
        assert_eq!(v.id("be"), Some(4));
        assert_eq!(v.id("to"), Some(5));
    }

    proptest! {
        #[test]
        fn vocab_and_sequences_hold_invariants(
            texts in prop::collection::vec("[a-e ]{0,30}", 1..20),
            num_words in 1usize..8,
            max_seq_len in 1usize..12,
        ) {
            let v = Vocabulary::from_texts(texts.iter().map(String::as_str), num_words).unwrap();
            // inverse maps
            for id in 0..v.len() {
                let w = v.word(id).unwrap();
                prop_assert_eq!(v.id(w), Some(id));
            }
            // frequency order
            let mut freq: HashMap<String, usize> = HashMap::new();
            for t in &texts {
                for w in words(t) { *freq.entry(w).or_default() += 1; }
            }
            let ranked: Vec<&str> = v.real_words().collect();
            for pair in ranked.windows(2) {
                prop_assert!(freq[pair[0]] >= freq[pair[1]]);
            }
            for t in &texts {
                let seq = tokenize(t, &v, max_seq_len);
                prop_assert_eq!(seq.ids.len(), max_seq_len + 1);
                prop_assert_eq!(seq.ids[0], BOS);
                prop_assert!(seq.ids.iter().all(|&id| id < v.len()));
                let eos: Vec<usize> = seq.ids.iter().enumerate()
                    .filter(|(_, &id)| id == EOS).map(|(i, _)| i).collect();
                prop_assert!(eos.len() <= 1);
                if let Some(&e) = eos.first() {
                    prop_assert!(seq.ids[e + 1..].iter().all(|&id| id == PAD));
                }
                prop_assert_eq!(
                    seq.true_length,
                    seq.targets().iter().filter(|&&id| id != PAD).count()
                );
                // round trip up to truncation
                let expected: Vec<String> = words(t)
                    .take(max_seq_len)
                    .map(|w| if v.contains_word(&w) { w } else { "<oov>".to_string() })
                    .collect();
                prop_assert_eq!(seq.detokenize(&v), expected);
            }
        }
    }
}
