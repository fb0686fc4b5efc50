//! The Count01 language: vocabulary, labelling, dataset splits and their
//! on-disk text format.
//!
//! A sentence is `[BOS] {0,1,2}* = {4,5} [EOS]`; the answer is `4` exactly
//! when the interior holds strictly more `1`s than `0`s. Because the model has
//! no positional embedding, a sentence is fully described (for training and
//! probing) by its [`CountTriple`] and answer.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const VOCAB_SIZE: usize = 8;

/// Token ids follow the row order of the embedding matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum Token {
    Bos = 0,
    Zero = 1,
    One = 2,
    Two = 3,
    Eq = 4,
    Four = 5,
    Five = 6,
    Eos = 7,
}

impl Token {
    pub const ALL: [Token; VOCAB_SIZE] = [
        Token::Bos,
        Token::Zero,
        Token::One,
        Token::Two,
        Token::Eq,
        Token::Four,
        Token::Five,
        Token::Eos,
    ];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Token> {
        Token::ALL.get(id).copied()
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Token::Bos => "[BOS]",
            Token::Zero => "0",
            Token::One => "1",
            Token::Two => "2",
            Token::Eq => "=",
            Token::Four => "4",
            Token::Five => "5",
            Token::Eos => "[EOS]",
        }
    }

    pub fn from_symbol(s: &str) -> Option<Token> {
        Token::ALL.iter().copied().find(|t| t.symbol() == s)
    }

    pub fn is_answer(self) -> bool {
        matches!(self, Token::Four | Token::Five)
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

/// Number of `0`, `1` and `2` tokens in a sentence interior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct CountTriple {
    pub n0: u32,
    pub n1: u32,
    pub n2: u32,
}

impl CountTriple {
    pub fn new(n0: u32, n1: u32, n2: u32) -> Self {
        Self { n0, n1, n2 }
    }

    pub fn interior_len(&self) -> usize {
        (self.n0 + self.n1 + self.n2) as usize
    }
}

/// `4` iff there are strictly more `1`s than `0`s; ties and the empty interior give `5`.
pub fn label_for(counts: CountTriple) -> Token {
    if counts.n1 > counts.n0 {
        Token::Four
    } else {
        Token::Five
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sentence {
    pub tokens: Vec<Token>,
    pub answer: Token,
    pub counts: CountTriple,
}

impl Sentence {
    /// Builds the sentence for `counts` with the given interior order.
    pub fn from_interior(interior: Vec<Token>) -> Self {
        let mut counts = CountTriple::default();
        for t in &interior {
            match t {
                Token::Zero => counts.n0 += 1,
                Token::One => counts.n1 += 1,
                Token::Two => counts.n2 += 1,
                other => panic!("interior token {other} is not one of 0/1/2"),
            }
        }
        let answer = label_for(counts);
        let mut tokens = Vec::with_capacity(interior.len() + 4);
        tokens.push(Token::Bos);
        tokens.extend(interior);
        tokens.push(Token::Eq);
        tokens.push(answer);
        tokens.push(Token::Eos);
        Sentence {
            tokens,
            answer,
            counts,
        }
    }

    /// Position of the `=` token.
    pub fn eq_position(&self) -> usize {
        self.tokens.len() - 3
    }

    /// Position of the answer token.
    pub fn answer_position(&self) -> usize {
        self.tokens.len() - 2
    }

    pub fn to_line(&self) -> String {
        let parts: Vec<&str> = self.tokens.iter().map(|t| t.symbol()).collect();
        parts.join(" ")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Inclusive integer interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: u32,
    pub hi: u32,
}

impl Interval {
    pub const fn new(lo: u32, hi: u32) -> Self {
        Self { lo, hi }
    }

    pub fn contains(&self, v: u32) -> bool {
        self.lo <= v && v <= self.hi
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub split: Split,
    pub count: usize,
    /// Shared interval for the `0` and `1` counts.
    pub n01: Interval,
    pub n2: Interval,
    pub seed: u64,
}

impl SplitSpec {
    /// Default sizes and count intervals; validation and test counts lie
    /// outside the training range.
    pub fn default_for(split: Split, seed: u64) -> Self {
        let (count, n01, n2) = match split {
            Split::Train => (7000, Interval::new(0, 100), Interval::new(0, 100)),
            Split::Val => (1500, Interval::new(101, 150), Interval::new(0, 150)),
            Split::Test => (1500, Interval::new(151, 200), Interval::new(0, 200)),
        };
        SplitSpec {
            split,
            count,
            n01,
            n2,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n01.lo > self.n01.hi || self.n2.lo > self.n2.hi {
            return Err(Error::Config(format!(
                "empty count interval in {} spec",
                self.split.name()
            )));
        }
        Ok(())
    }

    pub fn contains(&self, counts: CountTriple) -> bool {
        self.n01.contains(counts.n0) && self.n01.contains(counts.n1) && self.n2.contains(counts.n2)
    }

    /// Generator for the sentence at `index`: ChaCha8 keyed by the split seed,
    /// with the sentence index as the stream id.
    pub fn rng_for(&self, index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        rng
    }
}

/// Draws counts uniformly from the spec's intervals and shuffles the interior.
pub fn generate_sentence<R: Rng + ?Sized>(rng: &mut R, spec: &SplitSpec) -> Sentence {
    let counts = CountTriple {
        n0: rng.random_range(spec.n01.lo..=spec.n01.hi),
        n1: rng.random_range(spec.n01.lo..=spec.n01.hi),
        n2: rng.random_range(spec.n2.lo..=spec.n2.hi),
    };
    let mut interior = Vec::with_capacity(counts.interior_len());
    interior.extend(std::iter::repeat_n(Token::Zero, counts.n0 as usize));
    interior.extend(std::iter::repeat_n(Token::One, counts.n1 as usize));
    interior.extend(std::iter::repeat_n(Token::Two, counts.n2 as usize));
    interior.shuffle(rng);
    Sentence::from_interior(interior)
}

pub fn generate_split(spec: &SplitSpec) -> Result<Vec<Sentence>> {
    spec.validate()?;
    Ok((0..spec.count)
        .map(|i| generate_sentence(&mut spec.rng_for(i), spec))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum InvalidSentence {
    #[error("unknown token id {id} at position {position}")]
    UnknownToken { position: usize, id: usize },
    #[error("sentence must have the frame [BOS] ... = answer [EOS]")]
    BadFrame,
    #[error("interior token {found} at position {position} is not 0, 1 or 2")]
    BadInteriorSymbol { position: usize, found: Token },
    #[error("answer token is {found}, expected {expected}")]
    BadAnswer { expected: Token, found: Token },
}

/// Recounted triple and label of a sentence that passed validation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Validated {
    pub counts: CountTriple,
    pub answer: Token,
}

pub fn validate_sentence(ids: &[usize]) -> std::result::Result<Validated, InvalidSentence> {
    let mut tokens = Vec::with_capacity(ids.len());
    for (position, &id) in ids.iter().enumerate() {
        tokens.push(Token::from_id(id).ok_or(InvalidSentence::UnknownToken { position, id })?);
    }
    validate_tokens(&tokens)
}

pub fn validate_tokens(tokens: &[Token]) -> std::result::Result<Validated, InvalidSentence> {
    let n = tokens.len();
    if n < 4 || tokens[0] != Token::Bos || tokens[n - 3] != Token::Eq || tokens[n - 1] != Token::Eos {
        return Err(InvalidSentence::BadFrame);
    }
    let answer = tokens[n - 2];
    if !answer.is_answer() {
        return Err(InvalidSentence::BadFrame);
    }
    let mut counts = CountTriple::default();
    for (position, &t) in tokens.iter().enumerate().take(n - 3).skip(1) {
        match t {
            Token::Zero => counts.n0 += 1,
            Token::One => counts.n1 += 1,
            Token::Two => counts.n2 += 1,
            found => return Err(InvalidSentence::BadInteriorSymbol { position, found }),
        }
    }
    let expected = label_for(counts);
    if expected != answer {
        return Err(InvalidSentence::BadAnswer {
            expected,
            found: answer,
        });
    }
    Ok(Validated { counts, answer })
}

/// A labelled sample reduced to its sufficient statistic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub counts: CountTriple,
    pub answer: Token,
}

impl From<&Sentence> for Sample {
    fn from(s: &Sentence) -> Self {
        Sample {
            counts: s.counts,
            answer: s.answer,
        }
    }
}

impl Sample {
    pub fn new(counts: CountTriple) -> Self {
        Sample {
            counts,
            answer: label_for(counts),
        }
    }
}

/// The three splits generated from one base seed.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub seed: u64,
    pub train: Vec<Sentence>,
    pub val: Vec<Sentence>,
    pub test: Vec<Sentence>,
}

/// Per-split seed derived from the dataset seed (splitmix64 finaliser).
pub fn split_seed(base: u64, split: Split) -> u64 {
    let mut z = base
        .wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(split as u64 + 1));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Dataset {
    pub fn generate(seed: u64) -> Result<Self> {
        Self::generate_with(seed, |spec| spec)
    }

    /// Generates with each default spec passed through `adjust` (e.g. to shrink counts).
    pub fn generate_with(seed: u64, adjust: impl Fn(SplitSpec) -> SplitSpec) -> Result<Self> {
        let make = |split| generate_split(&adjust(SplitSpec::default_for(split, split_seed(seed, split))));
        Ok(Dataset {
            seed,
            train: make(Split::Train)?,
            val: make(Split::Val)?,
            test: make(Split::Test)?,
        })
    }

    pub fn split(&self, split: Split) -> &[Sentence] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn samples(&self, split: Split) -> Vec<Sample> {
        self.split(split).iter().map(Sample::from).collect()
    }

    /// SHA-256 of the split in its text format.
    pub fn digest(&self, split: Split) -> String {
        let mut hasher = Sha256::new();
        for s in self.split(split) {
            hasher.update(s.to_line().as_bytes());
            hasher.update(b"\n");
        }
        hex::encode(hasher.finalize())
    }

    /// Writes `<split>.txt` and `<split>_counts.csv` for every split.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for split in Split::ALL {
            write_sentences(&dir.join(format!("{}.txt", split.name())), self.split(split))?;
            write_counts_csv(&dir.join(format!("{}_counts.csv", split.name())), self.split(split))?;
        }
        Ok(())
    }

    pub fn read_dir(dir: &Path, seed: u64) -> Result<Self> {
        Ok(Dataset {
            seed,
            train: read_sentences(&dir.join("train.txt"))?,
            val: read_sentences(&dir.join("val.txt"))?,
            test: read_sentences(&dir.join("test.txt"))?,
        })
    }
}

pub fn write_sentences(path: &Path, sentences: &[Sentence]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in sentences {
        writeln!(w, "{}", s.to_line()).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_counts_csv(path: &Path, sentences: &[Sentence]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["n0", "n1", "n2", "answer"])?;
    for s in sentences {
        w.write_record([
            s.counts.n0.to_string(),
            s.counts.n1.to_string(),
            s.counts.n2.to_string(),
            s.answer.symbol().to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn parse_line(line: &str) -> std::result::Result<Sentence, InvalidSentence> {
    let mut tokens = Vec::new();
    for (position, sym) in line.split_whitespace().enumerate() {
        match Token::from_symbol(sym) {
            Some(t) => tokens.push(t),
            None => return Err(InvalidSentence::UnknownToken { position, id: usize::MAX }),
        }
    }
    let v = validate_tokens(&tokens)?;
    Ok(Sentence {
        tokens,
        answer: v.answer,
        counts: v.counts,
    })
}

pub fn read_sentences(path: &Path) -> Result<Vec<Sentence>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_line(&line).map_err(|reason| Error::Dataset { line: i + 1, reason })?);
    }
    Ok(out)
}
