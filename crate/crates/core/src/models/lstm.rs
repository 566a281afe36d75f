//! Token-level LSTM turn-shift classifier.

use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::numerics::{ParamStore, Real, Tape, Tensor, Var};
use crate::{rng, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LstmConfig {
    pub vocab_size: usize,
    pub d_embed: usize,
    pub hidden: usize,
    pub n_layers: usize,
}

impl Default for LstmConfig {
    fn default() -> Self {
        Self { vocab_size: 0, d_embed: 128, hidden: 128, n_layers: 2 }
    }
}

impl LstmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 4 || self.d_embed == 0 || self.hidden == 0 || self.n_layers == 0 {
            return Err(Error::Config(format!("invalid LSTM config {self:?}")));
        }
        Ok(())
    }
}

/// Parameters: `emb`, then per layer `w_x [in, 4h]`, `w_h [h, 4h]`, `b [4h]`
/// with gates ordered input, forget, cell, output; then `head.w [h, 1]`,
/// `head.b [1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmClassifier<T> {
    pub config: LstmConfig,
    pub params: ParamStore<T>,
}

impl<T: Real> LstmClassifier<T> {
    /// Uniform init in `±1/sqrt(h)`, forget-gate bias 1.
    pub fn init(config: LstmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::seeded(seed);
        let h = config.hidden;
        let k = 1.0 / (h as f64).sqrt();
        let dist = Uniform::new(-k, k).expect("valid range");
        let mut uniform = |shape: &[usize]| {
            let n = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| T::of(dist.sample(&mut r))).collect()).expect("shape")
        };
        let mut p = ParamStore::new();
        p.push("emb", uniform(&[config.vocab_size, config.d_embed]));
        for l in 0..config.n_layers {
            let input = if l == 0 { config.d_embed } else { h };
            p.push(format!("l{l}.w_x"), uniform(&[input, 4 * h]));
            p.push(format!("l{l}.w_h"), uniform(&[h, 4 * h]));
            let mut b = vec![T::zero(); 4 * h];
            b[h..2 * h].iter_mut().for_each(|v| *v = T::one());
            p.push(format!("l{l}.b"), Tensor::new(&[4 * h], b)?);
        }
        p.push("head.w", uniform(&[h, 1]));
        p.push("head.b", Tensor::zeros(&[1]));
        Ok(Self { config, params: p })
    }

    /// All parameters zero.
    pub fn zeros(config: LstmConfig) -> Result<Self> {
        let mut m = Self::init(config, 0)?;
        for t in m.params.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
        Ok(m)
    }

    pub fn from_params(config: LstmConfig, params: ParamStore<T>) -> Result<Self> {
        let reference = Self::init(config.clone(), 0)?;
        if reference.params.names() != params.names()
            || (0..params.len()).any(|i| reference.params.get(i).shape() != params.get(i).shape())
        {
            return Err(Error::Checkpoint("LSTM parameters do not match the config".into()));
        }
        Ok(Self { config, params })
    }

    pub fn cast<U: Real>(&self) -> LstmClassifier<U> {
        LstmClassifier { config: self.config.clone(), params: self.params.cast() }
    }

    /// Per-position shift probabilities as a `[T, 1]` node.
    pub fn forward_on(&self, tape: &mut Tape<T>, vars: &[Var], ids: &[u32]) -> Result<Var> {
        if ids.is_empty() {
            return Err(Error::EmptyDialog);
        }
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange(bad));
        }
        let h = self.config.hidden;
        let tokens: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let mut x = tape.embedding(vars[0], &tokens)?;
        let zeros = tape.constant(Tensor::zeros(&[1, h]));
        for l in 0..self.config.n_layers {
            let (w_x, w_h, b) = (vars[1 + 3 * l], vars[2 + 3 * l], vars[3 + 3 * l]);
            let xw = tape.matmul(x, w_x)?;
            let xw = tape.add_row(xw, b)?;
            let (mut hs, mut c) = (zeros, zeros);
            let mut outputs = Vec::with_capacity(ids.len());
            for t in 0..ids.len() {
                let xt = tape.row(xw, t)?;
                let hw = tape.matmul(hs, w_h)?;
                let z = tape.add(xt, hw)?;
                let i = tape.slice_cols(z, 0, h)?;
                let f = tape.slice_cols(z, h, h)?;
                let g = tape.slice_cols(z, 2 * h, h)?;
                let o = tape.slice_cols(z, 3 * h, h)?;
                let (i, f, g, o) = (tape.sigmoid(i)?, tape.sigmoid(f)?, tape.tanh(g)?, tape.sigmoid(o)?);
                let fc = tape.mul(f, c)?;
                let ig = tape.mul(i, g)?;
                c = tape.add(fc, ig)?;
                let tc = tape.tanh(c)?;
                hs = tape.mul(o, tc)?;
                outputs.push(hs);
            }
            x = tape.concat_rows(&outputs)?;
        }
        let head = 1 + 3 * self.config.n_layers;
        let y = tape.matmul(x, vars[head])?;
        let y = tape.add_row(y, vars[head + 1])?;
        tape.sigmoid(y)
    }

    /// Probability that the next token is a speaker token, per position.
    pub fn predict(&self, ids: &[u32]) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let vars = self.params.attach(&mut tape, false);
        let out = self.forward_on(&mut tape, &vars, ids)?;
        Ok(tape.value(out).data().to_vec())
    }
}
