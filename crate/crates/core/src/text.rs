//! Prompt tokenization, the vocabulary with concept-token injection, and the
//! small trainable text encoder that produces the conditioning vector.
//!
//! Prompts are split on whitespace and commas; unknown words map to `<unk>`.
//! The encoder mean-pools the token embeddings and passes the result through
//! two feed-forward mixing layers with a residual connection:
//!
//! ```text
//! p = mean(E[ids])            c = p + W2 · silu(W1 · p + b1) + b2
//! ```
//!
//! The empty prompt is the single reserved `<empty>` token, so the
//! unconditional embedding used for classifier-free guidance is learned like
//! any other.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bindings, ParamStore};
use crate::tensor::{Real, Tensor};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const EMPTY: usize = 3;
pub const UNK: usize = 4;
const RESERVED: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<empty>", "<unk>"];

pub const EMBEDDING: &str = "text.embedding";
pub const MIX1_W: &str = "text.mix1.weight";
pub const MIX1_B: &str = "text.mix1.bias";
pub const MIX2_W: &str = "text.mix2.weight";
pub const MIX2_B: &str = "text.mix2.bias";

/// Ordered token list; ids are contiguous from 0 and never renumbered.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

fn words(prompt: &str) -> impl Iterator<Item = String> + '_ {
    prompt
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

impl Vocabulary {
    /// Reserved tokens followed by `words` in first-seen order.
    pub fn new<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v = Self::from(RESERVED.iter().map(|s| s.to_string()).collect::<Vec<_>>());
        for w in words {
            let w = w.to_lowercase();
            if !v.index.contains_key(&w) {
                v.push(w);
            }
        }
        v
    }

    /// Vocabulary covering every word of `texts`.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v = Self::new([]);
        for t in texts {
            for w in words(t) {
                if !v.index.contains_key(&w) {
                    v.push(w);
                }
            }
        }
        v
    }

    fn push(&mut self, w: String) -> usize {
        let id = self.tokens.len();
        self.index.insert(w.clone(), id);
        self.tokens.push(w);
        id
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(&token.to_lowercase()).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.id(token).is_some()
    }

    /// Appends a new token and returns its id.
    pub fn inject(&mut self, token: &str) -> Result<usize> {
        let t = token.to_lowercase();
        if t.is_empty() || words(&t).count() != 1 {
            return Err(Error::Config(format!("`{token}` is not a single word")));
        }
        if self.index.contains_key(&t) {
            return Err(Error::DuplicateToken(token.to_string()));
        }
        Ok(self.push(t))
    }

    /// Token ids of `prompt`; the empty prompt is `[<empty>]`.
    pub fn tokenize(&self, prompt: &str) -> Vec<usize> {
        let ids: Vec<usize> = words(prompt)
            .map(|w| self.index.get(&w).copied().unwrap_or(UNK))
            .collect();
        if ids.is_empty() {
            vec![EMPTY]
        } else {
            ids
        }
    }
}

/// `"a {token} {class_noun}"`, with extras appended after a comma.
pub fn build_prompt(
    vocab: &Vocabulary,
    token: &str,
    class_noun: &str,
    extras: Option<&str>,
) -> Result<String> {
    if token.trim().is_empty() || !vocab.contains(token) {
        return Err(Error::UnregisteredToken(token.to_string()));
    }
    if class_noun.trim().is_empty() {
        return Err(Error::EmptyClassNoun);
    }
    let mut p = format!("a {} {}", token, class_noun.trim());
    if let Some(x) = extras.map(str::trim).filter(|x| !x.is_empty()) {
        p.push_str(", ");
        p.push_str(x);
    }
    Ok(p)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
}

impl Default for TextConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            hidden_dim: 128,
        }
    }
}

impl TextConfig {
    /// Dimension of the conditioning vector (equal to the embedding width).
    pub fn cond_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn layout(&self, vocab_size: usize) -> Vec<(String, Vec<usize>)> {
        let (d, h) = (self.embed_dim, self.hidden_dim);
        vec![
            (EMBEDDING.into(), vec![vocab_size, d]),
            (MIX1_W.into(), vec![d, h]),
            (MIX1_B.into(), vec![h]),
            (MIX2_W.into(), vec![h, d]),
            (MIX2_B.into(), vec![d]),
        ]
    }

    pub fn init_params(&self, vocab_size: usize, rng: &mut impl Rng) -> ParamStore {
        let (d, h) = (self.embed_dim, self.hidden_dim);
        let mut p = ParamStore::new();
        p.insert(EMBEDDING, Tensor::randn(&[vocab_size, d], 1.0, rng));
        p.insert(MIX1_W, Tensor::randn(&[d, h], (2.0 / d as f64).sqrt(), rng));
        p.insert(MIX1_B, Tensor::zeros(&[h]));
        p.insert(MIX2_W, Tensor::randn(&[h, d], 0.5 / (h as f64).sqrt(), rng));
        p.insert(MIX2_B, Tensor::zeros(&[d]));
        p
    }
}

/// Conditioning vector plus the token ids it was computed from.
#[derive(Clone, Debug, PartialEq)]
pub struct Conditioning {
    pub vector: Vec<f32>,
    pub token_ids: Vec<usize>,
}

/// Encodes a batch of tokenized prompts into `[B, d_c]` on `tape`.
pub fn encode_on_tape<'t, T: Real>(
    params: &Bindings<'t, T>,
    bags: &[Vec<usize>],
) -> Result<Var<'t, T>> {
    let pooled = params.get(EMBEDDING)?.embedding_bag_mean(bags)?;
    let h = pooled
        .linear(params.get(MIX1_W)?, params.get(MIX1_B)?)?
        .silu();
    let mixed = h.linear(params.get(MIX2_W)?, params.get(MIX2_B)?)?;
    pooled.add(mixed)
}

/// Adds a row for a freshly injected token, drawn from `N(0, s²)` where `s`
/// is the empirical standard deviation of the existing table.
pub fn grow_embedding(params: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
    let table = params.get(EMBEDDING)?;
    let (v, d) = (table.shape()[0], table.shape()[1]);
    let data = table.data();
    let mean = data.iter().map(|&x| x as f64).sum::<f64>() / data.len() as f64;
    let var = data
        .iter()
        .map(|&x| (x as f64 - mean).powi(2))
        .sum::<f64>()
        / data.len() as f64;
    let row = Tensor::<f32>::randn(&[d], var.sqrt(), rng);
    let mut grown = data.to_vec();
    grown.extend_from_slice(row.data());
    let requires = table.requires_grad();
    params.insert(
        EMBEDDING,
        Tensor::new(&[v + 1, d], grown)?.with_requires_grad(requires),
    );
    Ok(())
}

/// Vocabulary plus encoder weights.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoder {
    pub config: TextConfig,
    pub vocab: Vocabulary,
    pub params: ParamStore,
}

impl TextEncoder {
    pub fn new(config: TextConfig, vocab: Vocabulary, rng: &mut impl Rng) -> Self {
        let params = config.init_params(vocab.len(), rng);
        Self {
            config,
            vocab,
            params,
        }
    }

    /// Registers `token` and grows the embedding table by one row.
    pub fn inject_token(&mut self, token: &str, rng: &mut impl Rng) -> Result<usize> {
        let id = self.vocab.inject(token)?;
        grow_embedding(&mut self.params, rng)?;
        Ok(id)
    }

    pub fn cond_dim(&self) -> usize {
        self.config.cond_dim()
    }

    /// Conditioning for several prompts at once, without gradient tracking.
    pub fn encode_batch(&self, prompts: &[&str]) -> Result<Tensor> {
        let tape = Tape::<f32>::new();
        let bound = self.params.bind(&tape);
        let bags: Vec<_> = prompts.iter().map(|p| self.vocab.tokenize(p)).collect();
        Ok(encode_on_tape(&bound, &bags)?.to_tensor())
    }

    pub fn encode_text(&self, prompt: &str) -> Result<Conditioning> {
        let t = self.encode_batch(&[prompt])?;
        Ok(Conditioning {
            vector: t.into_data(),
            token_ids: self.vocab.tokenize(prompt),
        })
    }
}
