use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{input_window, turn_sums, AttributionKind, Target, TurnAttribution, TURNS};
use crate::eval::Encoded;
use crate::models::TransformerLM;
use crate::numerics::Real;
use crate::{Error, Result};

/// Which attention maps are averaged.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionScope {
    #[default]
    All,
    /// Heads of one layer only.
    Layer(usize),
}

/// Attention row of each target, averaged over the scoped layers and heads,
/// summed per turn and renormalized over the five most recent turns.
pub fn aggregate_attention<T: Real>(
    model: &TransformerLM<T>,
    items: &[Encoded],
    targets: &[Target],
    scope: AttentionScope,
) -> Result<Vec<TurnAttribution>> {
    let (layers, heads) = (model.config.n_layers, model.config.n_heads);
    let maps: Vec<usize> = match scope {
        AttentionScope::All => (0..layers * heads).collect(),
        AttentionScope::Layer(l) if l < layers => (l * heads..(l + 1) * heads).collect(),
        AttentionScope::Layer(l) => return Err(Error::Config(format!("layer {l} out of range (model has {layers})"))),
    };
    targets
        .par_iter()
        .map(|t| {
            let seq = &items
                .get(t.item)
                .ok_or_else(|| Error::Config(format!("target {} refers to missing dialog {}", t.id(), t.item)))?
                .seq;
            let w = input_window(seq, t.position, model.config.ctx_len);
            let att = model.attention_maps(&seq.ids[w.clone()], &seq.speaker_ids[w.clone()])?;
            let last = w.len() - 1;
            let row: Vec<f64> = (0..w.len())
                .map(|j| maps.iter().map(|&m| att[m].at(last, j).f64()).sum::<f64>() / maps.len() as f64)
                .collect();
            let (mut values, available) = turn_sums(seq, w, &row);
            let total: f64 = values.iter().sum();
            values.iter_mut().for_each(|v| *v /= total);
            Ok(TurnAttribution { target: t.id(), kind: AttributionKind::Attention, values, available, padded: available < TURNS })
        })
        .collect()
}
