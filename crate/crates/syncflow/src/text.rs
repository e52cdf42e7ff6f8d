//! Caption tokenization and the trainable text encoder.
//!
//! The vocabulary is fixed: the words of the synthetic caption templates
//! plus `<pad>` and `<unk>`. Encoding is an embedding table, sinusoidal
//! positions, and one pre-norm self-attention block. The unconditional
//! branch of classifier-free guidance uses a learned null embedding rather
//! than a zero vector.

use std::collections::HashMap;
use std::path::Path;

use crate::ddit::attention::{LayerNormIds, MhaIds, MlpIds};
use crate::ddit::params::{GParamStore, ParamGroup, ParamId, Session};
use crate::error::{Error, Result};
use crate::numerics::{GTensor, Scalar, SplitMix64, Tensor, Var};

pub const PAD: usize = 0;
pub const UNK: usize = 1;

/// Fixed token list; line index in the vocabulary file is the id.
const WORDS: [&str; 12] = [
    "<pad>", "<unk>", "a", "ball", "bouncing", "red", "green", "blue", "slow", "fast", "slowly",
    "quickly",
];

#[derive(Debug, Clone)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// The synthetic-caption vocabulary.
    pub fn synthetic() -> Vocab {
        Vocab::from_words(WORDS.iter().map(|s| s.to_string()).collect())
    }

    fn from_words(words: Vec<String>) -> Vocab {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Vocab { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(|s| s.as_str())
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    /// Lowercase, whitespace-split, unknown words to `<unk>`; the empty
    /// caption becomes a single `<pad>` token.
    pub fn tokenize(&self, caption: &str) -> Vec<usize> {
        let ids: Vec<usize> = caption
            .split_whitespace()
            .map(|w| {
                let lower = w.to_lowercase();
                self.index.get(&lower).copied().unwrap_or(UNK)
            })
            .collect();
        if ids.is_empty() {
            vec![PAD]
        } else {
            ids
        }
    }

    /// Plain text, one token per line, line index = id.
    pub fn write(&self, path: &Path) -> Result<()> {
        let body = self.words.join("\n") + "\n";
        crate::io::atomic_write(path, body.as_bytes())
    }

    pub fn read(path: &Path) -> Result<Vocab> {
        let text = std::fs::read_to_string(path)?;
        let words: Vec<String> = text.lines().map(|l| l.to_string()).collect();
        if words.len() < 2 || words[PAD] != "<pad>" || words[UNK] != "<unk>" {
            return Err(Error::format(format!(
                "vocabulary file {} must start with <pad>, <unk>",
                path.display()
            )));
        }
        Ok(Vocab::from_words(words))
    }
}

/// A caption (or the null condition) ready for the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct TextCondition {
    pub tokens: Vec<usize>,
    pub is_null: bool,
}

impl TextCondition {
    pub fn from_caption(vocab: &Vocab, caption: &str) -> TextCondition {
        TextCondition {
            tokens: vocab.tokenize(caption),
            is_null: false,
        }
    }

    /// The learned unconditional marker used by classifier-free guidance.
    pub fn null() -> TextCondition {
        TextCondition {
            tokens: Vec::new(),
            is_null: true,
        }
    }

    fn len(&self) -> usize {
        if self.is_null {
            1
        } else {
            self.tokens.len()
        }
    }
}

/// The text encoder network: embedding + sinusoidal positions + one
/// pre-norm self-attention block.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub vocab: Vocab,
    pub dim: usize,
    emb: ParamId,
    null_emb: ParamId,
    ln1: LayerNormIds,
    attn: MhaIds,
    ln2: LayerNormIds,
    mlp: MlpIds,
}

impl TextEncoder {
    pub fn init<T: Scalar>(
        store: &mut GParamStore<T>,
        vocab: Vocab,
        dim: usize,
        heads: usize,
        rng: &mut SplitMix64,
    ) -> TextEncoder {
        let g = ParamGroup::TextEncoder;
        let emb = store.register(
            "text.emb",
            g,
            GTensor::randn(&[vocab.len(), dim], 0.02, rng),
        );
        let null_emb = store.register("text.null", g, GTensor::randn(&[1, dim], 0.02, rng));
        TextEncoder {
            vocab,
            dim,
            emb,
            null_emb,
            ln1: LayerNormIds::init(store, "text.ln1", g, dim),
            attn: MhaIds::init(store, "text.attn", g, dim, dim, heads, rng),
            ln2: LayerNormIds::init(store, "text.ln2", g, dim),
            mlp: MlpIds::init(store, "text.mlp", g, dim, dim * 4, rng),
        }
    }

    /// Encode a batch of conditions to `[B, L, dim]`. Captions are padded to
    /// the longest sequence; null conditions are the null embedding row
    /// repeated across the sequence.
    pub fn encode<T: Scalar>(&self, sess: &mut Session<T>, conds: &[TextCondition]) -> Result<Var> {
        if conds.is_empty() {
            return Err(Error::config("encode needs at least one condition".to_string()));
        }
        let b = conds.len();
        let l = conds.iter().map(|c| c.len()).max().unwrap().max(1);

        let mut ids = Vec::with_capacity(b * l);
        let mut null_mask: Vec<T> = Vec::with_capacity(b);
        for c in conds {
            null_mask.push(if c.is_null { T::ONE } else { T::ZERO });
            for j in 0..l {
                ids.push(if c.is_null {
                    PAD
                } else {
                    c.tokens.get(j).copied().unwrap_or(PAD)
                });
            }
        }

        let table = sess.p(self.emb);
        let text = sess.tape.embedding(table, &ids, &[b, l])?;

        // blend in the null rows: out = (1 - m) * text + m * null
        let null_row = sess.p(self.null_emb);
        let null_seq = sess.tape.reshape(null_row, vec![1, 1, self.dim])?;
        let mask = sess
            .tape
            .constant(GTensor::from_parts(vec![b, 1, 1], null_mask));
        let inv_mask = {
            let neg = sess.tape.scale(mask, -1.0)?;
            sess.tape.add_scalar(neg, 1.0)?
        };
        let kept = sess.tape.mul(text, inv_mask)?;
        let nulled = sess.tape.mul(null_seq, mask)?;
        let mut h = sess.tape.add(kept, nulled)?;

        // sinusoidal positions
        let mut pos = vec![T::ZERO; l * self.dim];
        for j in 0..l {
            let row: GTensor<T> = crate::ddit::attention::sinusoid_features(
                j as f32 / l.max(1) as f32,
                self.dim,
            );
            pos[j * self.dim..(j + 1) * self.dim].copy_from_slice(row.data());
        }
        let pos = sess
            .tape
            .constant(GTensor::from_parts(vec![l, self.dim], pos));
        h = sess.tape.add(h, pos)?;

        // one pre-norm block
        let n1 = self.ln1.apply(sess, h)?;
        let a = self.attn.apply(sess, n1, n1)?;
        h = sess.tape.add(h, a)?;
        let n2 = self.ln2.apply(sess, h)?;
        let m = self.mlp.apply(sess, n2)?;
        sess.tape.add(h, m)
    }
}
