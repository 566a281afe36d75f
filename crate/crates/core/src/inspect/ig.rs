use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{input_window, turn_sums, AttributionKind, Target, TurnAttribution, TURNS};
use crate::eval::Encoded;
use crate::models::TransformerLM;
use crate::numerics::{Real, Tape, Tensor};
use crate::tokenizer::SPECIALS;
use crate::{rng, Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IgBaseline {
    /// The unk embedding at every word position.
    #[default]
    Unk,
    Zero,
}

/// Scalar whose gradient is integrated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IgTarget {
    /// `max(P(speaker1), P(speaker2))` at the target position.
    #[default]
    TrpProb,
    /// Logit of the more probable speaker token.
    TrpLogit,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quadrature {
    #[default]
    Trapezoid,
    /// Left Riemann sum.
    Left,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IgConfig {
    pub steps: usize,
    pub baseline: IgBaseline,
    pub target: IgTarget,
    pub quadrature: Quadrature,
}

impl Default for IgConfig {
    fn default() -> Self {
        IgConfig { steps: 128, baseline: IgBaseline::Unk, target: IgTarget::TrpProb, quadrature: Quadrature::Trapezoid }
    }
}

impl IgConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 2 {
            return Err(Error::Config(format!("IG needs at least 2 steps, got {}", self.steps)));
        }
        Ok(())
    }
}

/// Attributions along a straight path from `baseline` to `input`.
#[derive(Clone, Debug, PartialEq)]
pub struct IgPath {
    /// One value per input row.
    pub attributions: Vec<f64>,
    pub f_input: f64,
    pub f_baseline: f64,
}

impl IgPath {
    /// `|sum of attributions - (F(input) - F(baseline))|`
    pub fn residual(&self) -> f64 {
        (self.attributions.iter().sum::<f64>() - (self.f_input - self.f_baseline)).abs()
    }
}

/// Integrated gradients of `f`, which returns its value and gradient at a
/// point. Row `i` of the result is the dot product of the path-averaged
/// gradient with `input - baseline` over row `i`.
pub fn integrate_gradients<F>(f: F, input: &Tensor<f64>, baseline: &Tensor<f64>, steps: usize, quadrature: Quadrature) -> Result<IgPath>
where
    F: Fn(&Tensor<f64>) -> Result<(f64, Vec<f64>)>,
{
    if input.shape() != baseline.shape() || input.shape().len() != 2 {
        return Err(Error::Shape { op: "integrated_gradients", shapes: format!("{:?} vs {:?}", input.shape(), baseline.shape()) });
    }
    if steps < 2 {
        return Err(Error::Config(format!("IG needs at least 2 steps, got {steps}")));
    }
    let delta: Vec<f64> = input.data().iter().zip(baseline.data()).map(|(a, b)| a - b).collect();
    let nodes: Vec<(f64, f64)> = match quadrature {
        Quadrature::Trapezoid => {
            let h = 1.0 / (steps - 1) as f64;
            (0..steps).map(|k| (k as f64 * h, if k == 0 || k == steps - 1 { h / 2.0 } else { h })).collect()
        }
        Quadrature::Left => (0..steps).map(|k| (k as f64 / steps as f64, 1.0 / steps as f64)).collect(),
    };
    let mut avg = vec![0.0; delta.len()];
    let (mut f_input, mut f_baseline) = (None, None);
    for &(alpha, weight) in &nodes {
        let point: Vec<f64> = baseline.data().iter().zip(&delta).map(|(b, d)| b + alpha * d).collect();
        let (value, grad) = f(&Tensor::new(input.shape(), point)?)?;
        if grad.len() != avg.len() {
            return Err(Error::Length(format!("gradient has {} entries, input {}", grad.len(), avg.len())));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient);
        }
        avg.iter_mut().zip(&grad).for_each(|(a, g)| *a += weight * g);
        if alpha == 0.0 {
            f_baseline = Some(value);
        }
        if alpha == 1.0 {
            f_input = Some(value);
        }
    }
    let f_input = match f_input {
        Some(v) => v,
        None => f(input)?.0,
    };
    let f_baseline = f_baseline.expect("first node is the baseline");
    let cols = input.cols();
    let attributions = (0..input.rows())
        .map(|r| (r * cols..(r + 1) * cols).map(|i| avg[i] * delta[i]).sum())
        .collect();
    Ok(IgPath { attributions, f_input, f_baseline })
}

#[derive(Clone, Debug, PartialEq)]
pub struct IgResult {
    pub attribution: TurnAttribution,
    /// Per-token attributions over the model input.
    pub tokens: Vec<f64>,
    /// Position of the first input token in the dialog encoding.
    pub window_start: usize,
    pub f_input: f64,
    pub f_baseline: f64,
    pub residual: f64,
}

/// IG of each target's TRP with respect to the word embeddings of its input.
/// Speaker tokens and all position and speaker embeddings stay at their
/// actual values. Computed in f64.
pub fn integrated_gradients<T: Real>(
    model: &TransformerLM<T>,
    items: &[Encoded],
    targets: &[Target],
    cfg: &IgConfig,
) -> Result<Vec<IgResult>> {
    cfg.validate()?;
    let model = model.cast::<f64>();
    let wte = model.params.get(0);
    targets
        .par_iter()
        .map(|t| {
            let seq = &items
                .get(t.item)
                .ok_or_else(|| Error::Config(format!("target {} refers to missing dialog {}", t.id(), t.item)))?
                .seq;
            let w = input_window(seq, t.position, model.config.ctx_len);
            let ids = &seq.ids[w.clone()];
            let speakers = &seq.speaker_ids[w.clone()];
            let d = model.config.d_model;
            let mut input = Vec::with_capacity(ids.len() * d);
            let mut baseline = Vec::with_capacity(ids.len() * d);
            for (i, &id) in ids.iter().enumerate() {
                let row = wte.row(id as usize);
                input.extend_from_slice(row);
                match (seq.word_index[w.start + i], cfg.baseline) {
                    (None, _) => baseline.extend_from_slice(row),
                    (Some(_), IgBaseline::Unk) => baseline.extend_from_slice(wte.row(SPECIALS.unk_id as usize)),
                    (Some(_), IgBaseline::Zero) => baseline.extend(std::iter::repeat_n(0.0, d)),
                }
            }
            let input = Tensor::new(&[ids.len(), d], input)?;
            let baseline = Tensor::new(&[ids.len(), d], baseline)?;
            let last = ids.len() - 1;
            let (s1, s2) = (SPECIALS.speaker1_id as usize, SPECIALS.speaker2_id as usize);
            let point = |alpha: f64| -> Result<Tensor<f64>> {
                let data = baseline.data().iter().zip(input.data()).map(|(b, a)| b + alpha * (a - b)).collect();
                Tensor::new(input.shape(), data)
            };
            // logit(s2) - logit(s1) at a path point
            let gap = |alpha: f64| -> Result<f64> {
                let mut tape = Tape::new();
                let vars = model.params.attach(&mut tape, false);
                let emb = tape.leaf(point(alpha)?);
                let out = model.forward_on::<rng::Rng>(&mut tape, &vars, ids, speakers, Some(emb), None)?;
                let row = tape.row(out.logits, last)?;
                let logits = tape.value(row).data();
                Ok(logits[s2] - logits[s1])
            };
            // ties go to the first speaker token
            let pick = |g: f64| if g > 0.0 { s2 } else { s1 };
            let f = |x: &Tensor<f64>, c: usize| -> Result<(f64, Vec<f64>)> {
                let mut tape = Tape::new();
                let vars = model.params.attach(&mut tape, false);
                let emb = tape.leaf(x.clone());
                let out = model.forward_on::<rng::Rng>(&mut tape, &vars, ids, speakers, Some(emb), None)?;
                let row = tape.row(out.logits, last)?;
                let value = match cfg.target {
                    IgTarget::TrpProb => {
                        let p = tape.softmax_rows(row)?;
                        tape.pick(p, 0, c)?
                    }
                    IgTarget::TrpLogit => tape.pick(row, 0, c)?,
                };
                let v = tape.value(value).data()[0];
                tape.backward(value)?;
                let g = tape.grad(emb).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.numel()]);
                Ok((v, g))
            };
            let breaks = switch_points(&gap, cfg.steps)?;
            let path = if breaks.is_empty() {
                integrate_gradients(|x| f(x, pick(gap(0.5)?)), &input, &baseline, cfg.steps, cfg.quadrature)?
            } else {
                let mut edges = vec![0.0];
                edges.extend(&breaks);
                edges.push(1.0);
                let mut total: Option<IgPath> = None;
                for e in edges.windows(2) {
                    let c = pick(gap((e[0] + e[1]) / 2.0)?);
                    let n = ((cfg.steps as f64 * (e[1] - e[0])).round() as usize).max(2);
                    let piece = integrate_gradients(|x| f(x, c), &point(e[1])?, &point(e[0])?, n, cfg.quadrature)?;
                    total = Some(match total {
                        None => piece,
                        Some(mut t) => {
                            t.attributions.iter_mut().zip(&piece.attributions).for_each(|(a, b)| *a += b);
                            t.f_input = piece.f_input;
                            t
                        }
                    });
                }
                total.expect("at least two edges")
            };
            let (values, available) = turn_sums(seq, w.clone(), &path.attributions);
            Ok(IgResult {
                attribution: TurnAttribution { target: t.id(), kind: AttributionKind::Ig, values, available, padded: available < TURNS },
                residual: path.residual(),
                tokens: path.attributions,
                window_start: w.start,
                f_input: path.f_input,
                f_baseline: path.f_baseline,
            })
        })
        .collect()
}

/// Path positions in (0, 1) where the more probable speaker token changes,
/// located to 1e-12 by bisection between `steps` evenly spaced probes. The
/// target has a kink there, so the quadrature is split at these points.
fn switch_points(gap: &dyn Fn(f64) -> Result<f64>, steps: usize) -> Result<Vec<f64>> {
    let probes: Vec<f64> = (0..steps).map(|k| k as f64 / (steps - 1) as f64).collect();
    let signs: Vec<bool> = probes.iter().map(|&a| gap(a).map(|g| g > 0.0)).collect::<Result<_>>()?;
    let mut out = Vec::new();
    for k in 1..steps {
        if signs[k] == signs[k - 1] {
            continue;
        }
        let (mut lo, mut hi) = (probes[k - 1], probes[k]);
        while hi - lo > 1e-12 {
            let mid = (lo + hi) / 2.0;
            if (gap(mid)? > 0.0) == signs[k - 1] {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        out.push((lo + hi) / 2.0);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inspect::tests::items;
    use crate::models::TransformerConfig;
    use proptest::prelude::*;

    fn linear(w: Vec<f64>) -> impl Fn(&Tensor<f64>) -> Result<(f64, Vec<f64>)> {
        move |x| Ok((x.data().iter().zip(&w).map(|(a, b)| a * b).sum(), w.clone()))
    }

    #[test]
    fn zero_path_gives_zero() {
        let x = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = integrate_gradients(|x: &Tensor<f64>| Ok((x.data()[0].sin(), vec![x.data()[0].cos(), 0.0, 0.0, 0.0])), &x, &x, 8, Quadrature::Trapezoid).unwrap();
        assert_eq!(p.attributions, vec![0.0, 0.0]);
    }

    #[test]
    fn switches_are_located() {
        let b = switch_points(&|a: f64| Ok((a - 0.3) * (a - 0.71)), 16).unwrap();
        assert_eq!(b.len(), 2);
        assert!((b[0] - 0.3).abs() < 1e-11 && (b[1] - 0.71).abs() < 1e-11, "{b:?}");
        assert!(switch_points(&|a: f64| Ok(a + 1.0), 16).unwrap().is_empty());
    }

    #[test]
    fn too_few_steps() {
        let x = Tensor::new(&[1, 1], vec![1.0]).unwrap();
        assert!(integrate_gradients(linear(vec![1.0]), &x, &x, 1, Quadrature::Left).is_err());
        assert!(IgConfig { steps: 1, ..Default::default() }.validate().is_err());
    }

    proptest! {
        #[test]
        fn linear_stub_matches_closed_form(
            rows in 1usize..5,
            seed in 0u64..1000,
            steps in 2usize..20,
            left in any::<bool>(),
        ) {
            use rand::Rng;
            let mut r = rng::seeded(seed);
            let n = rows * 3;
            let mut draw = || (0..n).map(|_| r.random_range(-2.0..2.0)).collect::<Vec<f64>>();
            let (w, x, b) = (draw(), draw(), draw());
            let q = if left { Quadrature::Left } else { Quadrature::Trapezoid };
            let p = integrate_gradients(
                linear(w.clone()),
                &Tensor::new(&[rows, 3], x.clone()).unwrap(),
                &Tensor::new(&[rows, 3], b.clone()).unwrap(),
                steps,
                q,
            )
            .unwrap();
            for i in 0..rows {
                let exact: f64 = (i * 3..i * 3 + 3).map(|j| w[j] * (x[j] - b[j])).sum();
                prop_assert!((p.attributions[i] - exact).abs() < 1e-10);
            }
            prop_assert!(p.residual() < 1e-10);
        }
    }

    #[test]
    fn model_ig_is_nearly_complete_and_speakers_get_nothing() {
        let (items, v) = items(3);
        let c = TransformerConfig { n_layers: 2, n_heads: 2, d_model: 8, d_ff: 16, ctx_len: 64, vocab_size: v.len(), dropout_p: 0.0 };
        let m = TransformerLM::<f32>::init(c, 2).unwrap();
        let e = &items[0];
        let position = (0..e.seq.len()).rev().find(|&p| e.seq.shift_label[p]).unwrap();
        let t = Target { item: 0, dialog_id: e.dialog.id.clone(), position, trp: 0.0 };
        for target in [IgTarget::TrpProb, IgTarget::TrpLogit] {
            let cfg = IgConfig { steps: 64, target, ..Default::default() };
            let r = &integrated_gradients(&m, &items, std::slice::from_ref(&t), &cfg).unwrap()[0];
            let gap = (r.f_input - r.f_baseline).abs();
            assert!(r.residual <= 0.01 * gap.max(1e-9), "residual {} gap {}", r.residual, gap);
            for (i, &a) in r.tokens.iter().enumerate() {
                if e.seq.word_index[r.window_start + i].is_none() {
                    assert_eq!(a, 0.0);
                }
            }
        }
    }
}
