//! Caption tokenisation and the recurrent caption encoder.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{DtcError, Result};
use crate::nn::{Ctx, Embedding, Gru, Linear, Mode, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
const SPECIALS: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<eos>"];

/// Region captions: longest grammar caption is 11 words plus BOS/EOS.
pub const T_MAX: usize = 16;
/// Whole-scene descriptions (all region captions joined).
pub const T_MAX_SCENE: usize = 96;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<String, usize>", into = "BTreeMap<String, usize>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: BTreeMap<String, usize>,
}

impl TryFrom<BTreeMap<String, usize>> for Vocabulary {
    type Error = DtcError;

    fn try_from(ids: BTreeMap<String, usize>) -> Result<Self> {
        let mut tokens = vec![None; ids.len()];
        for (tok, &id) in &ids {
            let slot = tokens
                .get_mut(id)
                .ok_or_else(|| DtcError::InvalidInput(format!("vocabulary id {id} is not dense")))?;
            *slot = Some(tok.clone());
        }
        let tokens: Vec<String> = tokens
            .into_iter()
            .collect::<Option<_>>()
            .ok_or_else(|| DtcError::InvalidInput("duplicate vocabulary id".into()))?;
        if tokens.len() < 4 || tokens[..4] != SPECIALS {
            return Err(DtcError::InvalidInput("special tokens must occupy ids 0-3".into()));
        }
        Ok(Vocabulary { tokens, ids })
    }
}

impl From<Vocabulary> for BTreeMap<String, usize> {
    fn from(v: Vocabulary) -> Self {
        v.ids
    }
}

impl Vocabulary {
    /// Specials first, then every lowercased whitespace token in sorted order.
    pub fn build<'a>(captions: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut words: Vec<String> = captions
            .into_iter()
            .flat_map(|c| c.split_whitespace().map(str::to_lowercase))
            .collect();
        if words.is_empty() {
            return Err(DtcError::InvalidInput("empty caption corpus".into()));
        }
        words.sort();
        words.dedup();
        let tokens: Vec<String> = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().filter(|w| !SPECIALS.contains(&w.as_str())))
            .collect();
        let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Ok(Vocabulary { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(&token.to_lowercase()).copied()
    }

    /// Tokens in id order, specials first.
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSeq {
    /// Exactly `t_max` ids: BOS, words, EOS, then PAD.
    pub ids: Vec<usize>,
    /// Number of non-PAD positions.
    pub len: usize,
    /// Words that were mapped to UNK.
    pub unknown: Vec<String>,
}

impl TokenSeq {
    pub fn mask(&self) -> Vec<bool> {
        (0..self.ids.len()).map(|i| i < self.len).collect()
    }
}

/// Lowercase, split on whitespace, wrap in BOS/EOS and pad or truncate to `t_max`.
pub fn tokenize(caption: &str, vocab: &Vocabulary, t_max: usize) -> Result<TokenSeq> {
    if t_max < 3 {
        return Err(DtcError::Config("t_max must leave room for one word".into()));
    }
    let words: Vec<String> = caption.split_whitespace().map(str::to_lowercase).collect();
    if words.is_empty() {
        return Err(DtcError::InvalidInput("empty caption".into()));
    }
    let mut ids = Vec::with_capacity(t_max);
    let mut unknown = Vec::new();
    ids.push(BOS);
    for w in words.iter().take(t_max - 2) {
        ids.push(vocab.id(w).unwrap_or_else(|| {
            unknown.push(w.clone());
            UNK
        }));
    }
    ids.push(EOS);
    let len = ids.len();
    ids.resize(t_max, PAD);
    Ok(TokenSeq { ids, len, unknown })
}

/// Words of a token sequence, specials dropped.
pub fn detokenize(seq: &TokenSeq, vocab: &Vocabulary) -> String {
    seq.ids
        .iter()
        .filter(|&&id| id > EOS || id == UNK)
        .filter_map(|&id| vocab.token(id))
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextConfig {
    pub embed_dim: usize,
    /// Hidden size per direction; word features have twice this width.
    pub hidden: usize,
    pub sentence_dim: usize,
}

impl Default for TextConfig {
    fn default() -> Self {
        TextConfig {
            embed_dim: 64,
            hidden: 64,
            sentence_dim: 128,
        }
    }
}

/// Embedding table, bidirectional GRU, masked mean and a linear projection.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    embed: Embedding,
    fwd: Gru,
    bwd: Gru,
    proj: Linear,
    pub config: TextConfig,
    pub vocab_size: usize,
}

/// Encoded batch of `B` captions padded to `T`.
pub struct TextBatch<'g, T: Scalar> {
    /// `[B, T, d_w]`, zero at padded positions.
    pub words: Var<'g, T>,
    /// `[B, d_e]`.
    pub sentence: Var<'g, T>,
    pub lengths: Vec<usize>,
}

/// Value-only encoding of one caption.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoding<T> {
    pub word_features: Tensor<T>,
    pub sentence_embedding: Tensor<T>,
    pub valid_length: usize,
}

impl TextEncoder {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        vocab_size: usize,
        config: TextConfig,
        rng: &mut R,
    ) -> Self {
        TextEncoder {
            embed: Embedding::new(store, "text.embed", vocab_size, config.embed_dim, rng),
            fwd: Gru::new(store, "text.gru_fwd", config.embed_dim, config.hidden, rng),
            bwd: Gru::new(store, "text.gru_bwd", config.embed_dim, config.hidden, rng),
            proj: Linear::new(store, "text.proj", 2 * config.hidden, config.sentence_dim, true, rng),
            config,
            vocab_size,
        }
    }

    pub fn word_dim(&self) -> usize {
        2 * self.config.hidden
    }

    pub fn forward<'g, T: Scalar>(&self, ctx: &Ctx<'g, '_, T>, seqs: &[TokenSeq]) -> Result<TextBatch<'g, T>> {
        let b = seqs.len();
        if b == 0 {
            return Err(DtcError::InvalidInput("no captions to encode".into()));
        }
        let steps = seqs[0].ids.len();
        let mut flat = Vec::with_capacity(b * steps);
        for s in seqs {
            if s.ids.len() != steps {
                return Err(DtcError::Shape("token sequences differ in length".into()));
            }
            if let Some(&bad) = s.ids.iter().find(|&&id| id >= self.vocab_size) {
                return Err(DtcError::InvalidInput(format!(
                    "token id {bad} outside vocabulary of {}",
                    self.vocab_size
                )));
            }
            if s.len == 0 || s.len > steps {
                return Err(DtcError::InvalidInput("invalid token sequence length".into()));
            }
            flat.extend_from_slice(&s.ids);
        }
        let mask: Vec<Vec<bool>> = seqs.iter().map(TokenSeq::mask).collect();
        let x = self
            .embed
            .forward(ctx, &flat)
            .reshape(&[b, steps, self.config.embed_dim]);
        let f = self.fwd.forward(ctx, x, &mask, false);
        let r = self.bwd.forward(ctx, x, &mask, true);
        let per_step: Vec<Var<'g, T>> = f
            .into_iter()
            .zip(r)
            .map(|(a, c)| ctx.g.concat(&[a, c], 1))
            .collect();
        let words = ctx.g.stack(&per_step).permute(&[1, 0, 2]);
        let lengths: Vec<usize> = seqs.iter().map(|s| s.len).collect();
        let inv_len: Vec<T> = lengths.iter().map(|&l| T::lit(1.0 / l as f64)).collect();
        let pooled = words.sum_axis(1, false) * ctx.g.constant(Tensor::new(&[b, 1], inv_len));
        let sentence = self.proj.forward(ctx, pooled);
        Ok(TextBatch {
            words,
            sentence,
            lengths,
        })
    }

    /// Encodes one caption in evaluation mode.
    pub fn encode_caption<T: Scalar>(&self, store: &ParamStore<T>, seq: &TokenSeq) -> Result<TextEncoding<T>> {
        let g = Graph::new();
        let ctx = Ctx::new(&g, store, Mode::Eval);
        let out = self.forward(&ctx, std::slice::from_ref(seq))?;
        let steps = seq.ids.len();
        Ok(TextEncoding {
            word_features: out.words.value().as_ref().clone().reshape(&[steps, self.word_dim()])?,
            sentence_embedding: out.sentence.value().index0(0),
            valid_length: seq.len,
        })
    }

    /// Sentence embeddings `[B, d_e]` in evaluation mode.
    pub fn embed_sentences<T: Scalar>(&self, store: &ParamStore<T>, seqs: &[TokenSeq]) -> Result<Tensor<T>> {
        let g = Graph::new();
        let ctx = Ctx::new(&g, store, Mode::Eval);
        Ok(self.forward(&ctx, seqs)?.sentence.value().as_ref().clone())
    }
}
