//! Multi-head attention, feed-forward, and normalization building blocks,
//! stored as parameter ids and applied inside a [`Session`].

use crate::ddit::params::{init_weight, GParamStore, ParamGroup, ParamId, Session};
use crate::error::Result;
use crate::numerics::{GTensor, Scalar, SplitMix64, Tensor, Var};

#[derive(Debug, Clone)]
pub struct LinearIds {
    pub w: ParamId,
    pub b: ParamId,
}

impl LinearIds {
    pub fn init<T: Scalar>(
        store: &mut GParamStore<T>,
        name: &str,
        group: ParamGroup,
        d_in: usize,
        d_out: usize,
        rng: &mut SplitMix64,
    ) -> LinearIds {
        LinearIds {
            w: store.register(format!("{name}.w"), group, init_weight(&[d_in, d_out], rng)),
            b: store.register(format!("{name}.b"), group, GTensor::zeros(&[d_out])),
        }
    }

    /// Zero-initialized variant for output projections, so the model's
    /// initial prediction is exactly zero.
    pub fn init_zero<T: Scalar>(
        store: &mut GParamStore<T>,
        name: &str,
        group: ParamGroup,
        d_in: usize,
        d_out: usize,
    ) -> LinearIds {
        LinearIds {
            w: store.register(format!("{name}.w"), group, GTensor::zeros(&[d_in, d_out])),
            b: store.register(format!("{name}.b"), group, GTensor::zeros(&[d_out])),
        }
    }

    pub fn apply<T: Scalar>(&self, sess: &mut Session<T>, x: Var) -> Result<Var> {
        let w = sess.p(self.w);
        let b = sess.p(self.b);
        let h = sess.tape.matmul(x, w)?;
        sess.tape.add(h, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNormIds {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormIds {
    pub fn init<T: Scalar>(
        store: &mut GParamStore<T>,
        name: &str,
        group: ParamGroup,
        dim: usize,
    ) -> LayerNormIds {
        LayerNormIds {
            gain: store.register(format!("{name}.gain"), group, GTensor::full(&[dim], T::ONE)),
            bias: store.register(format!("{name}.bias"), group, GTensor::zeros(&[dim])),
        }
    }

    pub fn apply<T: Scalar>(&self, sess: &mut Session<T>, x: Var) -> Result<Var> {
        let g = sess.p(self.gain);
        let b = sess.p(self.bias);
        sess.tape.layer_norm(x, g, b)
    }
}

/// Multi-head attention. Queries come from `x`, keys/values from `kv`
/// (which may be `x` itself for self-attention). The key projection has no
/// bias: softmax scores are invariant to a shared key offset, so a key bias
/// is a dead parameter.
#[derive(Debug, Clone)]
pub struct MhaIds {
    pub wq: LinearIds,
    pub wk: ParamId,
    pub wv: LinearIds,
    pub wo: LinearIds,
    pub heads: usize,
    pub dim: usize,
}

impl MhaIds {
    pub fn init<T: Scalar>(
        store: &mut GParamStore<T>,
        name: &str,
        group: ParamGroup,
        dim: usize,
        kv_dim: usize,
        heads: usize,
        rng: &mut SplitMix64,
    ) -> MhaIds {
        MhaIds {
            wq: LinearIds::init(store, &format!("{name}.q"), group, dim, dim, rng),
            wk: store.register(
                format!("{name}.k.w"),
                group,
                init_weight(&[kv_dim, dim], rng),
            ),
            wv: LinearIds::init(store, &format!("{name}.v"), group, kv_dim, dim, rng),
            wo: LinearIds::init(store, &format!("{name}.o"), group, dim, dim, rng),
            heads,
            dim,
        }
    }

    /// `x: [B, Tq, dim]`, `kv: [B, Tk, kv_dim]` -> `[B, Tq, dim]`.
    pub fn apply<T: Scalar>(&self, sess: &mut Session<T>, x: Var, kv: Var) -> Result<Var> {
        let (b, tq) = {
            let s = sess.tape.value(x).shape();
            (s[0], s[1])
        };
        let tk = sess.tape.value(kv).shape()[1];
        let h = self.heads;
        let dh = self.dim / h;

        let q = self.wq.apply(sess, x)?;
        let wk = sess.p(self.wk);
        let k = sess.tape.matmul(kv, wk)?;
        let v = self.wv.apply(sess, kv)?;

        // [B, T, E] -> [B, h, T, dh]
        let split = |sess: &mut Session<T>, t: Var, tlen: usize| -> Result<Var> {
            let r = sess.tape.reshape(t, vec![b, tlen, h, dh])?;
            sess.tape.permute(r, &[0, 2, 1, 3])
        };
        let qh = split(sess, q, tq)?;
        let kh = split(sess, k, tk)?;
        let vh = split(sess, v, tk)?;

        let kt = sess.tape.transpose_last2(kh)?;
        let scores = sess.tape.matmul(qh, kt)?;
        let scores = sess.tape.scale(scores, 1.0 / (dh as f32).sqrt())?;
        let attn = sess.tape.softmax(scores, 3)?;
        let ctx = sess.tape.matmul(attn, vh)?;

        let merged = sess.tape.permute(ctx, &[0, 2, 1, 3])?;
        let merged = sess.tape.reshape(merged, vec![b, tq, self.dim])?;
        self.wo.apply(sess, merged)
    }
}

/// Two-layer feed-forward with GELU.
#[derive(Debug, Clone)]
pub struct MlpIds {
    pub fc1: LinearIds,
    pub fc2: LinearIds,
}

impl MlpIds {
    pub fn init<T: Scalar>(
        store: &mut GParamStore<T>,
        name: &str,
        group: ParamGroup,
        dim: usize,
        hidden: usize,
        rng: &mut SplitMix64,
    ) -> MlpIds {
        MlpIds {
            fc1: LinearIds::init(store, &format!("{name}.fc1"), group, dim, hidden, rng),
            fc2: LinearIds::init(store, &format!("{name}.fc2"), group, hidden, dim, rng),
        }
    }

    pub fn apply<T: Scalar>(&self, sess: &mut Session<T>, x: Var) -> Result<Var> {
        let h = self.fc1.apply(sess, x)?;
        let h = sess.tape.gelu(h)?;
        self.fc2.apply(sess, h)
    }
}

/// Sinusoidal features of a scalar in [0, 1] at geometrically spaced
/// frequencies; `dim` must be even. The unit interval is stretched by 1000
/// so even the lowest-frequency components vary measurably over it.
pub fn sinusoid_features<T: Scalar>(t: f32, dim: usize) -> GTensor<T> {
    let half = dim / 2;
    let mut data = vec![T::ZERO; dim];
    for i in 0..half {
        let freq = (10_000.0f32).powf(-(i as f32) / half as f32);
        let arg = 1000.0 * t * freq;
        data[i] = T::from_f32(arg.sin());
        data[half + i] = T::from_f32(arg.cos());
    }
    GTensor::from_parts(vec![dim], data)
}
