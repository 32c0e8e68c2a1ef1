//! Tokenisation and the instruction encoder that produces the initial
//! instruction state.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::layers::{sinusoidal_positions, TransformerBlock};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
const SPECIALS: [&str; 2] = ["<pad>", "<unk>"];
pub const DEFAULT_MAX_LEN: usize = 80;
/// Punctuation split into standalone tokens.
pub const PUNCTUATION: [char; 3] = ['.', ',', ';'];

/// Token ↔ id table with `PAD = 0` and `UNK = 1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: BTreeMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from words in first-seen order; duplicates are
    /// ignored.
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut v = Self {
            tokens: SPECIALS.iter().map(|s| s.to_string()).collect(),
            ids: BTreeMap::new(),
        };
        for (i, s) in SPECIALS.iter().enumerate() {
            v.ids.insert(s.to_string(), i);
        }
        for w in words {
            let w = w.as_ref().to_lowercase();
            if !v.ids.contains_key(&w) {
                v.ids.insert(w.clone(), v.tokens.len());
                v.tokens.push(w);
            }
        }
        v
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Id of a word, `UNK` when absent.
    pub fn id(&self, word: &str) -> usize {
        self.ids.get(word).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.ids.contains_key(word)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(SPECIALS[UNK], String::as_str)
    }

    /// Non-special entries in id order.
    pub fn words(&self) -> &[String] {
        &self.tokens[SPECIALS.len()..]
    }

    /// One token per line; line `n` (0-based) holds id `n + 2`.
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        for t in self.words() {
            writeln!(w, "{t}")?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(r: R) -> Result<Self> {
        let mut words = Vec::new();
        for line in r.lines() {
            let line = line?;
            let t = line.trim();
            if t.is_empty() {
                continue;
            }
            if words.iter().any(|w: &String| w == t) {
                return Err(Error::Input(format!("duplicate vocabulary entry {t}")));
            }
            words.push(t.to_string());
        }
        Ok(Self::new(words))
    }
}

/// A tokenised instruction.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instruction {
    pub raw: String,
    pub tokens: Vec<usize>,
    pub token_texts: Vec<String>,
}

impl Instruction {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Splits raw text into lowercase word and punctuation strings.
pub fn split_words(raw: &str) -> Vec<String> {
    let mut spaced = String::with_capacity(raw.len() + 8);
    for ch in raw.chars() {
        if PUNCTUATION.contains(&ch) {
            spaced.push(' ');
            spaced.push(ch);
            spaced.push(' ');
        } else {
            spaced.extend(ch.to_lowercase());
        }
    }
    spaced.split_whitespace().map(str::to_string).collect()
}

pub fn tokenize(raw: &str, vocab: &Vocabulary) -> Result<Instruction> {
    let token_texts = split_words(raw);
    if token_texts.is_empty() {
        return Err(Error::Input("instruction has no tokens".into()));
    }
    let tokens = token_texts.iter().map(|t| vocab.id(t)).collect();
    Ok(Instruction {
        raw: raw.to_string(),
        tokens,
        token_texts,
    })
}

/// Snapshot of an instruction state matrix (`L × d`).
#[derive(Clone, Debug, PartialEq)]
pub struct InstructionState {
    pub values: Tensor,
    pub step: usize,
}

/// Word embedding, sinusoidal positions and one self-attention block.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub embedding: ParamId,
    pub block: TransformerBlock,
    pub dim: usize,
    pub max_len: usize,
}

/// Encoder output; `states` is both the contextual token matrix `h` and the
/// initial instruction state.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub states: Var,
    pub attention: Vec<Var>,
}

impl Encoder {
    /// `init_table`, when given, seeds the embedding rows (it must be
    /// `vocab_size × dim`); otherwise rows are uniform in `[-0.1, 0.1]`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        vocab_size: usize,
        dim: usize,
        heads: usize,
        max_len: usize,
        init_table: Option<&Tensor>,
        rng: &mut R,
    ) -> Result<Self> {
        let table = match init_table {
            Some(t) if t.shape() == [vocab_size, dim] => t.clone(),
            Some(t) => {
                return Err(Error::Config(format!(
                    "embedding table {:?} does not match vocabulary {vocab_size} x {dim}",
                    t.shape()
                )))
            }
            None => Tensor::uniform(vocab_size, dim, 0.1, rng),
        };
        let embedding = store.add("encoder.embedding", table);
        let block = TransformerBlock::new(store, "encoder.block", dim, heads, rng)?;
        Ok(Self {
            embedding,
            block,
            dim,
            max_len,
        })
    }

    pub fn encode(&self, g: &mut Graph, inst: &Instruction) -> Result<Encoded> {
        let len = inst.len();
        if len == 0 {
            return Err(Error::Input("cannot encode an empty instruction".into()));
        }
        if len > self.max_len {
            return Err(Error::Capacity {
                len,
                max: self.max_len,
            });
        }
        let vocab = g.store().value(self.embedding).rows();
        if let Some(&bad) = inst.tokens.iter().find(|&&t| t >= vocab) {
            return Err(Error::Input(format!(
                "token id {bad} outside vocabulary of {vocab}"
            )));
        }
        let table = g.param(self.embedding);
        let emb = g.gather_rows(table, &inst.tokens)?;
        let emb = g.scale(emb, (self.dim as f64).sqrt());
        let pos = g.constant(sinusoidal_positions(len, self.dim, 0));
        let x = g.add(emb, pos)?;
        let out = self.block.forward(g, x)?;
        Ok(Encoded {
            states: out.output,
            attention: out.weights,
        })
    }
}
