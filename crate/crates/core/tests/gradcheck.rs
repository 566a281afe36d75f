use rand::Rng;
use rand_distr::{Distribution, Normal};
use turnlab::models::{LstmClassifier, LstmConfig, TransformerConfig, TransformerLM};
use turnlab::numerics::ParamStore;
use turnlab::rng;
use turnlab::training::{gradcheck, Example};

const H: f64 = 1e-5;
/// Gradients smaller than this are compared in absolute terms.
const FLOOR: f64 = 1e-6;

fn jitter(params: &mut ParamStore<f64>, seed: u64) {
    let mut r = rng::seeded(seed);
    let n = Normal::new(0.0, 0.3).unwrap();
    for t in params.tensors_mut() {
        for x in t.data_mut() {
            *x += n.sample(&mut r);
        }
    }
}

fn example(vocab: u32, n: usize, seed: u64) -> Example {
    let mut r = rng::seeded(seed);
    let ids: Vec<u32> = (0..n).map(|_| r.random_range(0..vocab)).collect();
    let speaker_ids = (0..n).map(|t| if t < n / 2 { 1 } else { 2 }).collect();
    let targets = ids[1..].iter().map(|&i| i as usize).chain([0]).collect();
    let weights = (0..n).map(|t| if t + 1 < n { 1.0 } else { 0.0 }).collect();
    Example { ids, speaker_ids, targets, weights }
}

#[test]
fn transformer_gradients_match_finite_differences() {
    let start = std::time::Instant::now();
    let config = TransformerConfig { n_layers: 2, n_heads: 2, d_model: 16, d_ff: 32, ctx_len: 12, vocab_size: 24, dropout_p: 0.0 };
    let mut model = TransformerLM::<f64>::init(config, 3).unwrap();
    jitter(&mut model.params, 4);
    let err = gradcheck(&model, &example(24, 12, 5), H, FLOOR).unwrap();
    println!("transformer max relative error {err:.3e} in {:?}", start.elapsed());
    assert!(err < 1e-4, "max relative error {err}");
    assert!(start.elapsed().as_secs() < 60);
}

#[test]
fn lstm_gradients_match_finite_differences() {
    let config = LstmConfig { vocab_size: 20, d_embed: 6, hidden: 5, n_layers: 2 };
    let mut model = LstmClassifier::<f64>::init(config, 6).unwrap();
    jitter(&mut model.params, 7);
    let mut ex = example(20, 10, 8);
    ex.targets = ex.ids.iter().map(|&i| (i % 3 == 0) as usize).collect();
    let err = gradcheck(&model, &ex, H, FLOOR).unwrap();
    assert!(err < 1e-4, "max relative error {err}");
}
