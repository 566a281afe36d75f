//! Decoder-only transformer with word, position and speaker embeddings.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::numerics::{gelu_parts, softmax_into, ParamStore, Real, Tape, Tensor, Var, LN_EPS};
use crate::{rng, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub ctx_len: usize,
    pub vocab_size: usize,
    pub dropout_p: f64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self { n_layers: 4, n_heads: 4, d_model: 128, d_ff: 512, ctx_len: 256, vocab_size: 0, dropout_p: 0.1 }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 || self.d_ff == 0 {
            return bad(format!("transformer sizes must be positive: {self:?}"));
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.ctx_len < 2 {
            return bad(format!("ctx_len {} < 2", self.ctx_len));
        }
        if self.vocab_size < 4 {
            return bad(format!("vocab_size {} leaves no room for specials", self.vocab_size));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout_p {} outside [0, 1)", self.dropout_p));
        }
        Ok(())
    }
}

const WTE: usize = 0;
const WPE: usize = 1;
const WSE: usize = 2;
const PER_LAYER: usize = 12;

// Offsets inside a layer block.
const LN1_G: usize = 0;
const LN1_B: usize = 1;
const W_QKV: usize = 2;
const B_QKV: usize = 3;
const W_O: usize = 4;
const B_O: usize = 5;
const LN2_G: usize = 6;
const LN2_B: usize = 7;
const W_IN: usize = 8;
const B_IN: usize = 9;
const W_OUT: usize = 10;
const B_OUT: usize = 11;

fn layer(l: usize, off: usize) -> usize {
    3 + PER_LAYER * l + off
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerLM<T> {
    pub config: TransformerConfig,
    pub params: ParamStore<T>,
}

/// Nodes of interest from one forward pass.
pub struct LmForward {
    /// `[T, vocab_size]`
    pub logits: Var,
    /// Word-embedding rows fed to the first layer, `[T, d_model]`.
    pub word_emb: Var,
    /// Post-softmax attention, indexed `layer * n_heads + head`, each `[T, T]`.
    pub attention: Vec<Var>,
}

impl<T: Real> TransformerLM<T> {
    /// Gaussian init (std 0.02, residual projections scaled by `1/sqrt(2L)`),
    /// unit layer-norm gains, zero biases.
    pub fn init(config: TransformerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::seeded(seed);
        let (d, f, v) = (config.d_model, config.d_ff, config.vocab_size);
        let std = 0.02;
        let resid = std / (2.0 * config.n_layers as f64).sqrt();
        let mut normal = |shape: &[usize], s: f64| {
            let dist = Normal::new(0.0, s).expect("positive std");
            let n = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| T::of(dist.sample(&mut r))).collect()).expect("shape")
        };
        let mut p = ParamStore::new();
        p.push("wte", normal(&[v, d], std));
        p.push("wpe", normal(&[config.ctx_len, d], std));
        p.push("wse", normal(&[2, d], std));
        for l in 0..config.n_layers {
            let name = |s: &str| format!("h{l}.{s}");
            p.push(name("ln1.g"), Tensor::full(&[d], T::one()));
            p.push(name("ln1.b"), Tensor::zeros(&[d]));
            p.push(name("attn.w_qkv"), normal(&[d, 3 * d], std));
            p.push(name("attn.b_qkv"), Tensor::zeros(&[3 * d]));
            p.push(name("attn.w_o"), normal(&[d, d], resid));
            p.push(name("attn.b_o"), Tensor::zeros(&[d]));
            p.push(name("ln2.g"), Tensor::full(&[d], T::one()));
            p.push(name("ln2.b"), Tensor::zeros(&[d]));
            p.push(name("mlp.w_in"), normal(&[d, f], std));
            p.push(name("mlp.b_in"), Tensor::zeros(&[f]));
            p.push(name("mlp.w_out"), normal(&[f, d], resid));
            p.push(name("mlp.b_out"), Tensor::zeros(&[d]));
        }
        p.push("ln_f.g", Tensor::full(&[d], T::one()));
        p.push("ln_f.b", Tensor::zeros(&[d]));
        Ok(Self { config, params: p })
    }

    /// Rebuilds a model from parameters, checking names and shapes.
    pub fn from_params(config: TransformerConfig, params: ParamStore<T>) -> Result<Self> {
        let reference = Self::init(config.clone(), 0)?;
        if reference.params.names() != params.names() {
            return Err(Error::Checkpoint("transformer parameter names do not match the config".into()));
        }
        for (i, name) in params.names().iter().enumerate() {
            if reference.params.get(i).shape() != params.get(i).shape() {
                return Err(Error::Checkpoint(format!(
                    "{name}: shape {:?}, config expects {:?}",
                    params.get(i).shape(),
                    reference.params.get(i).shape()
                )));
            }
        }
        Ok(Self { config, params })
    }

    pub fn cast<U: Real>(&self) -> TransformerLM<U> {
        TransformerLM { config: self.config.clone(), params: self.params.cast() }
    }

    fn check_input(&self, ids: &[u32], speaker_ids: &[u8]) -> Result<()> {
        if ids.len() > self.config.ctx_len {
            return Err(Error::ContextOverflow { len: ids.len(), ctx_len: self.config.ctx_len });
        }
        if ids.is_empty() || ids.len() != speaker_ids.len() {
            return Err(Error::Length(format!("{} ids vs {} speaker ids", ids.len(), speaker_ids.len())));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange(bad));
        }
        if speaker_ids.iter().any(|&s| s != 1 && s != 2) {
            return Err(Error::Length("speaker ids must be 1 or 2".into()));
        }
        Ok(())
    }

    /// Builds the forward graph on `tape` using parameter nodes `vars`
    /// (from `params.attach`). `word_emb` replaces the word-embedding lookup;
    /// `dropout` enables training-mode dropout.
    pub fn forward_on<R: Rng>(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        ids: &[u32],
        speaker_ids: &[u8],
        word_emb: Option<Var>,
        mut dropout: Option<&mut R>,
    ) -> Result<LmForward> {
        self.check_input(ids, speaker_ids)?;
        let c = &self.config;
        let n = ids.len();
        let (d, h) = (c.d_model, c.n_heads);
        let hd = d / h;
        let p = c.dropout_p;
        let mut drop = |tape: &mut Tape<T>, x: Var| -> Result<Var> {
            match dropout.as_deref_mut() {
                Some(r) => tape.dropout(x, p, r),
                None => Ok(x),
            }
        };

        let token_ids: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let word_emb = match word_emb {
            Some(w) => w,
            None => tape.embedding(vars[WTE], &token_ids)?,
        };
        let positions: Vec<usize> = (0..n).collect();
        let pos = tape.embedding(vars[WPE], &positions)?;
        let slots: Vec<usize> = speaker_ids.iter().map(|&s| s as usize - 1).collect();
        let spk = tape.embedding(vars[WSE], &slots)?;
        let x = tape.add(word_emb, pos)?;
        let x = tape.add(x, spk)?;
        let mut x = drop(tape, x)?;

        let scale = T::of(1.0 / (hd as f64).sqrt());
        let mut attention = Vec::with_capacity(c.n_layers * h);
        for l in 0..c.n_layers {
            let v = |off| vars[layer(l, off)];
            let a = tape.layer_norm(x, v(LN1_G), v(LN1_B))?;
            let qkv = tape.matmul(a, v(W_QKV))?;
            let qkv = tape.add_row(qkv, v(B_QKV))?;
            let mut heads = Vec::with_capacity(h);
            for i in 0..h {
                let q = tape.slice_cols(qkv, i * hd, hd)?;
                let k = tape.slice_cols(qkv, d + i * hd, hd)?;
                let val = tape.slice_cols(qkv, 2 * d + i * hd, hd)?;
                let s = tape.matmul_nt(q, k)?;
                let s = tape.scale(s, scale)?;
                let s = tape.causal_masked_fill(s)?;
                let w = tape.softmax_rows(s)?;
                attention.push(w);
                let w = drop(tape, w)?;
                heads.push(tape.matmul(w, val)?);
            }
            let o = if h == 1 { heads[0] } else { tape.concat_cols(&heads)? };
            let o = tape.matmul(o, v(W_O))?;
            let o = tape.add_row(o, v(B_O))?;
            let o = drop(tape, o)?;
            x = tape.add(x, o)?;

            let m = tape.layer_norm(x, v(LN2_G), v(LN2_B))?;
            let m = tape.matmul(m, v(W_IN))?;
            let m = tape.add_row(m, v(B_IN))?;
            let m = tape.gelu(m)?;
            let m = tape.matmul(m, v(W_OUT))?;
            let m = tape.add_row(m, v(B_OUT))?;
            let m = drop(tape, m)?;
            x = tape.add(x, m)?;
        }
        let lnf = 3 + PER_LAYER * c.n_layers;
        let x = tape.layer_norm(x, vars[lnf], vars[lnf + 1])?;
        let logits = tape.matmul_nt(x, vars[WTE])?;
        Ok(LmForward { logits, word_emb, attention })
    }

    /// Inference-mode logits `[T, vocab_size]`.
    pub fn logits(&self, ids: &[u32], speaker_ids: &[u8]) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars = self.params.attach(&mut tape, false);
        let out = self.forward_on::<rng::Rng>(&mut tape, &vars, ids, speaker_ids, None, None)?;
        Ok(tape.value(out.logits).clone())
    }

    /// Inference-mode attention weights, indexed `layer * n_heads + head`.
    pub fn attention_maps(&self, ids: &[u32], speaker_ids: &[u8]) -> Result<Vec<Tensor<T>>> {
        let mut tape = Tape::new();
        let vars = self.params.attach(&mut tape, false);
        let out = self.forward_on::<rng::Rng>(&mut tape, &vars, ids, speaker_ids, None, None)?;
        Ok(out.attention.iter().map(|&a| tape.value(a).clone()).collect())
    }

    /// Incremental decoder state for sampling.
    pub fn session(&self) -> Session<'_, T> {
        Session { model: self, keys: vec![Vec::new(); self.config.n_layers], values: vec![Vec::new(); self.config.n_layers], len: 0 }
    }
}

/// Key/value cache over the tokens fed so far. Logits match
/// [`TransformerLM::logits`] up to rounding.
#[derive(Clone)]
pub struct Session<'a, T> {
    model: &'a TransformerLM<T>,
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    len: usize,
}

fn layer_norm_row<T: Real>(x: &[T], g: &[T], b: &[T]) -> Vec<T> {
    let n = T::of(x.len() as f64);
    let mean = x.iter().copied().sum::<T>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    let is = T::one() / (var + T::of(LN_EPS)).sqrt();
    x.iter().zip(g).zip(b).map(|((&v, &g), &b)| (v - mean) * is * g + b).collect()
}

/// `x[1, in] · w[in, out] + b`
fn affine<T: Real>(x: &[T], w: &Tensor<T>, b: &Tensor<T>) -> Vec<T> {
    let out = w.cols();
    let mut y = vec![T::zero(); out];
    for (k, &xv) in x.iter().enumerate() {
        for (yv, &wv) in y.iter_mut().zip(w.row(k)) {
            *yv += xv * wv;
        }
    }
    for (yv, &bv) in y.iter_mut().zip(b.data()) {
        *yv += bv;
    }
    y
}

impl<T: Real> Session<'_, T> {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Feeds one token and returns the logits for the next one.
    pub fn step(&mut self, id: u32, speaker: u8) -> Result<Vec<T>> {
        let m = self.model;
        let c = &m.config;
        if self.len >= c.ctx_len {
            return Err(Error::ContextOverflow { len: self.len + 1, ctx_len: c.ctx_len });
        }
        m.check_input(&[id], &[speaker])?;
        let (d, h) = (c.d_model, c.n_heads);
        let hd = d / h;
        let p = |i: usize| m.params.get(i);
        let mut x: Vec<T> = (0..d)
            .map(|j| p(WTE).at(id as usize, j) + p(WPE).at(self.len, j) + p(WSE).at(speaker as usize - 1, j))
            .collect();
        let t = self.len + 1;
        let scale = T::of(1.0 / (hd as f64).sqrt());
        for l in 0..c.n_layers {
            let q = |off| p(layer(l, off));
            let a = layer_norm_row(&x, q(LN1_G).data(), q(LN1_B).data());
            let qkv = affine(&a, q(W_QKV), q(B_QKV));
            self.keys[l].extend_from_slice(&qkv[d..2 * d]);
            self.values[l].extend_from_slice(&qkv[2 * d..]);
            let mut o = vec![T::zero(); d];
            let mut scores = vec![T::zero(); t];
            let mut w = vec![T::zero(); t];
            for i in 0..h {
                let qh = &qkv[i * hd..(i + 1) * hd];
                for (j, s) in scores.iter_mut().enumerate() {
                    let kj = &self.keys[l][j * d + i * hd..j * d + (i + 1) * hd];
                    *s = qh.iter().zip(kj).map(|(&a, &b)| a * b).sum::<T>() * scale;
                }
                softmax_into(&scores, &mut w);
                for (j, &wj) in w.iter().enumerate() {
                    let vj = &self.values[l][j * d + i * hd..j * d + (i + 1) * hd];
                    for (ov, &vv) in o[i * hd..(i + 1) * hd].iter_mut().zip(vj) {
                        *ov += wj * vv;
                    }
                }
            }
            let o = affine(&o, q(W_O), q(B_O));
            x.iter_mut().zip(&o).for_each(|(xv, &ov)| *xv += ov);
            let mlp = layer_norm_row(&x, q(LN2_G).data(), q(LN2_B).data());
            let mut hidden = affine(&mlp, q(W_IN), q(B_IN));
            hidden.iter_mut().for_each(|v| *v = T::of(gelu_parts(v.f64()).0));
            let mlp = affine(&hidden, q(W_OUT), q(B_OUT));
            x.iter_mut().zip(&mlp).for_each(|(xv, &mv)| *xv += mv);
        }
        let lnf = 3 + PER_LAYER * c.n_layers;
        let x = layer_norm_row(&x, p(lnf).data(), p(lnf + 1).data());
        let wte = p(WTE);
        let logits = (0..c.vocab_size).map(|v| wte.row(v).iter().zip(&x).map(|(&a, &b)| a * b).sum()).collect();
        self.len = t;
        Ok(logits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TransformerConfig {
        TransformerConfig { n_layers: 2, n_heads: 2, d_model: 8, d_ff: 16, ctx_len: 10, vocab_size: 12, dropout_p: 0.1 }
    }

    fn input() -> (Vec<u32>, Vec<u8>) {
        (vec![2, 5, 6, 3, 7, 8, 9], vec![1, 1, 1, 2, 2, 2, 2])
    }

    #[test]
    fn logits_shape_and_overflow() {
        let m = TransformerLM::<f64>::init(tiny(), 1).unwrap();
        let (ids, spk) = input();
        assert_eq!(m.logits(&ids, &spk).unwrap().shape(), &[7, 12]);
        let long = vec![4u32; 11];
        let err = m.logits(&long, &[1; 11]).unwrap_err();
        assert!(err.to_string().contains("context overflow"));
    }

    #[test]
    fn causal_prefix_invariance() {
        let m = TransformerLM::<f64>::init(tiny(), 2).unwrap();
        let (ids, spk) = input();
        let a = m.logits(&ids, &spk).unwrap();
        let mut ids2 = ids.clone();
        ids2[5] = 11;
        let b = m.logits(&ids2, &spk).unwrap();
        for t in 0..5 {
            assert_eq!(a.row(t), b.row(t));
        }
        assert_ne!(a.row(5), b.row(5));
        let maps = m.attention_maps(&ids, &spk).unwrap();
        assert_eq!(maps.len(), 4);
        for map in &maps {
            for t in 0..7 {
                let row = map.row(t);
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!(row[t + 1..].iter().all(|&w| w == 0.0));
            }
        }
    }

    #[test]
    fn single_token_attention_is_one() {
        let m = TransformerLM::<f64>::init(tiny(), 3).unwrap();
        for map in m.attention_maps(&[2], &[1]).unwrap() {
            assert_eq!(map.data(), &[1.0]);
        }
    }

    #[test]
    fn session_matches_full_forward() {
        let m = TransformerLM::<f64>::init(tiny(), 4).unwrap();
        let (ids, spk) = input();
        let full = m.logits(&ids, &spk).unwrap();
        let mut s = m.session();
        for t in 0..ids.len() {
            let row = s.step(ids[t], spk[t]).unwrap();
            for (a, b) in row.iter().zip(full.row(t)) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn dropout_only_in_training_mode() {
        let m = TransformerLM::<f64>::init(tiny(), 5).unwrap();
        let (ids, spk) = input();
        let mut tape = Tape::new();
        let vars = m.params.attach(&mut tape, false);
        let mut r = rng::seeded(0);
        let out = m.forward_on(&mut tape, &vars, &ids, &spk, None, Some(&mut r)).unwrap();
        assert_ne!(tape.value(out.logits), &m.logits(&ids, &spk).unwrap());
    }

    #[test]
    fn rejects_bad_config() {
        let mut c = tiny();
        c.n_heads = 3;
        assert!(TransformerLM::<f32>::init(c, 0).is_err());
        let mut c = tiny();
        c.ctx_len = 1;
        assert!(TransformerLM::<f32>::init(c, 0).is_err());
    }
}
