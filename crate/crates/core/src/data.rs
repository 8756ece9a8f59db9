//! Text-classification corpora, a whitespace tokenizer, batching and
//! synthetic separable tasks.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{seeded_rng, SeededRng};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const CLS_ID: usize = 2;
pub const SEP_ID: usize = 3;
pub const SPECIAL_TOKENS: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"];
pub const DEFAULT_MAX_LEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub text_a: String,
    pub text_b: Option<String>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    pub examples: Vec<Example>,
    pub label_names: Vec<String>,
    pub split: Split,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Whether examples carry a second segment.
    pub fn is_pair(&self) -> bool {
        self.examples.iter().any(|e| e.text_b.is_some())
    }

    pub fn num_labels(&self) -> usize {
        self.label_names.len()
    }

    /// Re-expresses labels against another corpus' label names.
    pub fn align_labels(&mut self, names: &[String]) -> Result<()> {
        let mut map = Vec::with_capacity(self.label_names.len());
        for n in &self.label_names {
            let id = names
                .iter()
                .position(|m| m == n)
                .ok_or_else(|| Error::config(format!("label {n:?} does not occur in the training split")))?;
            map.push(id);
        }
        for e in &mut self.examples {
            e.label = map[e.label];
        }
        self.label_names = names.to_vec();
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.split == Split::Train && self.examples.is_empty() {
            return Err(Error::config("training split is empty"));
        }
        if let Some(e) = self.examples.iter().find(|e| e.label >= self.label_names.len()) {
            return Err(Error::config(format!("label id {} has no name", e.label)));
        }
        Ok(())
    }
}

/// Lowercased whitespace tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// Loads a tab-separated file with header `text_a [text_b] label`.
pub fn load_tsv(path: &Path, split: Split) -> Result<Corpus> {
    let content = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_tsv(&content, split)
}

pub fn parse_tsv(content: &str, split: Split) -> Result<Corpus> {
    let mut lines = content.lines().enumerate();
    let (_, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        message: "missing header".into(),
    })?;
    let cols: Vec<&str> = header.split('\t').map(str::trim).collect();
    let find = |name: &str| cols.iter().position(|c| *c == name);
    let (a_col, label_col) = match (find("text_a"), find("label")) {
        (Some(a), Some(l)) => (a, l),
        _ => {
            return Err(Error::Parse {
                line: 1,
                message: "header must name text_a and label columns".into(),
            })
        }
    };
    let b_col = find("text_b");
    let mut raw = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != cols.len() {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected {} fields, found {}", cols.len(), fields.len()),
            });
        }
        let label = fields[label_col].trim();
        if label.is_empty() {
            return Err(Error::Parse {
                line: line_no,
                message: "missing label".into(),
            });
        }
        raw.push((
            fields[a_col].to_string(),
            b_col.map(|b| fields[b].to_string()),
            label.to_string(),
        ));
    }
    let names: Vec<String> = raw
        .iter()
        .map(|r| r.2.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let examples = raw
        .into_iter()
        .map(|(a, b, l)| Example {
            text_a: a,
            text_b: b,
            label: names.iter().position(|n| *n == l).expect("label collected above"),
        })
        .collect();
    let corpus = Corpus {
        examples,
        label_names: names,
        split,
    };
    corpus.validate()?;
    Ok(corpus)
}

/// Writes a corpus in the format read by [`load_tsv`].
pub fn to_tsv(corpus: &Corpus) -> String {
    let pair = corpus.is_pair();
    let mut out = String::from(if pair {
        "text_a\ttext_b\tlabel\n"
    } else {
        "text_a\tlabel\n"
    });
    for e in &corpus.examples {
        out.push_str(&e.text_a);
        if pair {
            out.push('\t');
            out.push_str(e.text_b.as_deref().unwrap_or(""));
        }
        out.push('\t');
        out.push_str(&corpus.label_names[e.label]);
        out.push('\n');
    }
    out
}

/// Whitespace tokenizer with a vocabulary built from a training split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "TokenizerRepr", into = "TokenizerRepr")]
pub struct Tokenizer {
    vocab: Vec<String>,
    index: HashMap<String, usize>,
    pub max_len: usize,
}

#[derive(Serialize, Deserialize)]
struct TokenizerRepr {
    vocab: Vec<String>,
    max_len: usize,
}

impl From<TokenizerRepr> for Tokenizer {
    fn from(r: TokenizerRepr) -> Self {
        Self::from_vocab(r.vocab, r.max_len)
    }
}

impl From<Tokenizer> for TokenizerRepr {
    fn from(t: Tokenizer) -> Self {
        Self {
            vocab: t.vocab,
            max_len: t.max_len,
        }
    }
}

impl Tokenizer {
    /// Special tokens first, then every training word in sorted order.
    pub fn build(train: &Corpus, max_len: usize) -> Result<Self> {
        if train.split != Split::Train {
            return Err(Error::config("the vocabulary must be built from the training split"));
        }
        if max_len < 2 {
            return Err(Error::config("max_len must be at least 2"));
        }
        let words: BTreeSet<String> = train
            .examples
            .iter()
            .flat_map(|e| {
                let mut w = tokenize(&e.text_a);
                if let Some(b) = &e.text_b {
                    w.extend(tokenize(b));
                }
                w
            })
            .filter(|w| !SPECIAL_TOKENS.contains(&w.as_str()))
            .collect();
        let vocab = SPECIAL_TOKENS.iter().map(|s| s.to_string()).chain(words).collect();
        Ok(Self::from_vocab(vocab, max_len))
    }

    pub fn from_vocab(vocab: Vec<String>, max_len: usize) -> Self {
        let index = vocab.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { vocab, index, max_len }
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK_ID)
    }

    /// `[CLS] a [SEP] (b [SEP])`, truncated and padded to `max_len`.
    pub fn encode(&self, text_a: &str, text_b: Option<&str>) -> Vec<usize> {
        let mut ids = vec![CLS_ID];
        ids.extend(tokenize(text_a).iter().map(|w| self.id(w)));
        ids.push(SEP_ID);
        if let Some(b) = text_b {
            ids.extend(tokenize(b).iter().map(|w| self.id(w)));
            ids.push(SEP_ID);
        }
        ids.truncate(self.max_len);
        ids.resize(self.max_len, PAD_ID);
        ids
    }

    /// Token strings of every non-padding id.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .filter(|&&i| i != PAD_ID)
            .map(|&i| {
                self.vocab
                    .get(i)
                    .cloned()
                    .unwrap_or_else(|| SPECIAL_TOKENS[UNK_ID].to_string())
            })
            .collect()
    }

    /// Words of the first segment, with specials stripped.
    pub fn decode_words(&self, ids: &[usize]) -> Vec<String> {
        self.decode(ids)
            .into_iter()
            .skip(1)
            .take_while(|w| w != SPECIAL_TOKENS[SEP_ID])
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedExample {
    pub ids: Vec<usize>,
    pub label: usize,
}

pub fn encode_corpus(tokenizer: &Tokenizer, corpus: &Corpus) -> Vec<EncodedExample> {
    corpus
        .examples
        .iter()
        .map(|e| EncodedExample {
            ids: tokenizer.encode(&e.text_a, e.text_b.as_deref()),
            label: e.label,
        })
        .collect()
}

/// Splits `0..n` into consecutive batches of at most `batch_size`.
pub fn batches(n: usize, batch_size: usize) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::config("batch size must be positive"));
    }
    Ok((0..n)
        .collect::<Vec<_>>()
        .chunks(batch_size)
        .map(<[usize]>::to_vec)
        .collect())
}

/// Like [`batches`] over a seeded permutation of `0..n`.
pub fn shuffled_batches(n: usize, batch_size: usize, rng: &mut SeededRng) -> Result<Vec<Vec<usize>>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    Ok(batches(n, batch_size)?
        .into_iter()
        .map(|b| b.into_iter().map(|i| order[i]).collect())
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthKind {
    /// Label 1 iff the sentence contains a keyword.
    KeywordPresence,
    /// Label is the parity of the number of keywords.
    ParityOfKeywords,
    /// Label 1 iff the two segments share a word.
    PairOverlap,
}

impl std::str::FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "keyword-presence" => Ok(Self::KeywordPresence),
            "parity-of-keywords" => Ok(Self::ParityOfKeywords),
            "pair-overlap" => Ok(Self::PairOverlap),
            other => Err(Error::config(format!("unknown synthetic task {other:?}"))),
        }
    }
}

pub const SYNTH_KEYWORDS: [&str; 4] = ["zebra", "quasar", "nectar", "vortex"];

const SYNTH_FILLER: [&str; 32] = [
    "the", "a", "cat", "dog", "runs", "walks", "over", "under", "blue", "red", "small", "large", "house", "tree",
    "river", "stone", "quick", "slow", "bird", "sings", "near", "far", "green", "old", "new", "city", "road", "light",
    "dark", "moon", "sun", "field",
];

fn filler_sentence(rng: &mut SeededRng, len: usize, pool: &[&str]) -> Vec<String> {
    (0..len)
        .map(|_| pool[rng.gen_range(0..pool.len())].to_string())
        .collect()
}

/// Deterministic separable corpus of `size` examples with balanced labels.
pub fn synth_task(kind: SynthKind, size: usize, seed: u64, split: Split) -> Result<Corpus> {
    if size < 2 {
        return Err(Error::config("synthetic corpus needs at least 2 examples"));
    }
    let mut rng = seeded_rng(seed);
    let mut labels: Vec<usize> = (0..size).map(|i| i % 2).collect();
    labels.shuffle(&mut rng);
    let examples = labels
        .into_iter()
        .map(|label| match kind {
            SynthKind::KeywordPresence => {
                let len = rng.gen_range(4..=8);
                let mut words = filler_sentence(&mut rng, len, &SYNTH_FILLER);
                if label == 1 {
                    let at = rng.gen_range(0..=words.len());
                    let kw = SYNTH_KEYWORDS[rng.gen_range(0..SYNTH_KEYWORDS.len())];
                    words.insert(at, kw.to_string());
                }
                Example {
                    text_a: words.join(" "),
                    text_b: None,
                    label,
                }
            }
            SynthKind::ParityOfKeywords => {
                let count = 2 * rng.gen_range(0..=1) + label;
                let len = rng.gen_range(4..=7);
                let mut words = filler_sentence(&mut rng, len, &SYNTH_FILLER);
                for _ in 0..count {
                    let at = rng.gen_range(0..=words.len());
                    let kw = SYNTH_KEYWORDS[rng.gen_range(0..SYNTH_KEYWORDS.len())];
                    words.insert(at, kw.to_string());
                }
                Example {
                    text_a: words.join(" "),
                    text_b: None,
                    label,
                }
            }
            SynthKind::PairOverlap => {
                let mut pool: Vec<&str> = SYNTH_FILLER.to_vec();
                pool.shuffle(&mut rng);
                let (left, right) = pool.split_at(pool.len() / 2);
                let (la, lb) = (rng.gen_range(3..=5), rng.gen_range(3..=5));
                let a = filler_sentence(&mut rng, la, left);
                let mut b = filler_sentence(&mut rng, lb, right);
                if label == 1 {
                    let at = rng.gen_range(0..b.len());
                    b[at] = a[rng.gen_range(0..a.len())].clone();
                }
                Example {
                    text_a: a.join(" "),
                    text_b: Some(b.join(" ")),
                    label,
                }
            }
        })
        .collect();
    Ok(Corpus {
        examples,
        label_names: vec!["0".into(), "1".into()],
        split,
    })
}

/// Whether the synthetic rule assigns `label` to `example`.
pub fn synth_rule(kind: SynthKind, example: &Example) -> usize {
    let kw = |w: &String| SYNTH_KEYWORDS.contains(&w.as_str());
    let a = tokenize(&example.text_a);
    match kind {
        SynthKind::KeywordPresence => a.iter().any(kw) as usize,
        SynthKind::ParityOfKeywords => a.iter().filter(|w| kw(w)).count() % 2,
        SynthKind::PairOverlap => {
            let b = tokenize(example.text_b.as_deref().unwrap_or(""));
            a.iter().any(|w| b.contains(w)) as usize
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_row_file_parses() {
        let c = parse_tsv("text_a\tlabel\nhello world\t1\nbye\t0\n", Split::Train).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.label_names, vec!["0", "1"]);
        assert_eq!(c.examples[0].label, 1);
        assert!(!c.is_pair());
    }

    #[test]
    fn missing_label_names_the_line() {
        let err = parse_tsv("text_a\tlabel\nfine\t1\nbroken\t\n", Split::Train).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err:?}");
        let err = parse_tsv("text_a\tlabel\nfine\t1\nno tab here\n", Split::Train).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }));
        assert!(matches!(
            parse_tsv("sentence\tlabel\n", Split::Train),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_tsv(Path::new("/nonexistent/train.tsv"), Split::Train).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
        assert_eq!(err.exit_code(), 4);
    }

    #[test]
    fn pair_file_uses_cls_sep_layout() {
        let c = parse_tsv("text_a\ttext_b\tlabel\nx y\tz\tyes\n", Split::Train).unwrap();
        assert!(c.is_pair());
        let tok = Tokenizer::build(&c, 8).unwrap();
        let ids = tok.encode("x y", Some("z"));
        let (x, y, z) = (tok.id("x"), tok.id("y"), tok.id("z"));
        assert_eq!(ids, vec![CLS_ID, x, y, SEP_ID, z, SEP_ID, PAD_ID, PAD_ID]);
    }

    #[test]
    fn encode_examples() {
        let c = parse_tsv("text_a\tlabel\nOne two three four five\t0\n", Split::Train).unwrap();
        let tok = Tokenizer::build(&c, 8).unwrap();
        assert_eq!(tok.encode("", None), vec![CLS_ID, SEP_ID, 0, 0, 0, 0, 0, 0]);
        let ids = tok.encode("one two unknownword", None);
        assert_eq!(ids[3], UNK_ID);
        let ids = tok.encode("one two three four five", None);
        assert_eq!(ids.len(), 8);
        assert_eq!(ids.iter().filter(|&&i| i == PAD_ID).count(), 1);
        // Vocabulary: specials then sorted words.
        assert_eq!(&tok.vocab()[4..], &["five", "four", "one", "three", "two"]);
    }

    #[test]
    fn vocabulary_only_from_training_split() {
        let train = parse_tsv("text_a\tlabel\nalpha beta\t0\n", Split::Train).unwrap();
        let mut dev = parse_tsv("text_a\tlabel\ngamma beta\t0\n", Split::Dev).unwrap();
        dev.align_labels(&train.label_names).unwrap();
        assert!(Tokenizer::build(&dev, 8).is_err());
        let tok = Tokenizer::build(&train, 8).unwrap();
        assert_eq!(tok.encode("gamma beta", None)[1], UNK_ID);
        assert_eq!(tok.vocab_size(), 6);
    }

    #[test]
    fn synthetic_tasks_are_balanced_deterministic_and_separable() {
        for kind in [
            SynthKind::KeywordPresence,
            SynthKind::ParityOfKeywords,
            SynthKind::PairOverlap,
        ] {
            let c = synth_task(kind, 100, 7, Split::Train).unwrap();
            assert_eq!(c, synth_task(kind, 100, 7, Split::Train).unwrap());
            let ones = c.examples.iter().filter(|e| e.label == 1).count();
            assert!((40..=60).contains(&ones));
            for e in &c.examples {
                assert_eq!(synth_rule(kind, e), e.label, "{kind:?}: {e:?}");
                assert_eq!(e.text_b.is_some(), kind == SynthKind::PairOverlap);
            }
        }
        assert!(synth_task(SynthKind::KeywordPresence, 1, 0, Split::Train).is_err());
    }

    #[test]
    fn tsv_roundtrip() {
        let c = synth_task(SynthKind::PairOverlap, 10, 3, Split::Dev).unwrap();
        let back = parse_tsv(&to_tsv(&c), Split::Dev).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn tokenizer_serializes_as_word_list() {
        let c = synth_task(SynthKind::KeywordPresence, 20, 1, Split::Train).unwrap();
        let tok = Tokenizer::build(&c, 12).unwrap();
        let json = serde_json::to_string(&tok).unwrap();
        let back: Tokenizer = serde_json::from_str(&json).unwrap();
        assert_eq!(back, tok);
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(words in proptest::collection::vec("[a-z]{1,6}", 0..12), max_len in 2usize..16) {
            let text = words.join(" ");
            let c = Corpus {
                examples: vec![Example { text_a: text.clone(), text_b: None, label: 0 }],
                label_names: vec!["0".into()],
                split: Split::Train,
            };
            let tok = Tokenizer::build(&c, max_len).unwrap();
            let ids = tok.encode(&text, None);
            prop_assert_eq!(ids.len(), max_len);
            let keep = words.len().min(max_len - 1);
            prop_assert_eq!(tok.decode_words(&ids), words[..keep].to_vec());
        }

        #[test]
        fn batching_preserves_examples(n in 0usize..200, size in 1usize..40, seed in 0u64..50) {
            let mut rng = seeded_rng(seed);
            let mut seen: Vec<usize> = shuffled_batches(n, size, &mut rng).unwrap().concat();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
            prop_assert!(batches(n, size).unwrap().iter().all(|b| b.len() <= size && !b.is_empty()));
        }
    }
}
