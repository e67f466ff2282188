//! Attention-weighted per-dimension modality selection.
//!
//! The docked embeddings of the `M` model modalities form an `M x c` matrix.
//! A single-head self-attention block over its rows produces an `M x c` score
//! matrix; a masked softmax down each column turns it into the probability of
//! drawing each modality for that dimension. One modality is then chosen per
//! dimension (sampled during training, argmax at evaluation) and the chosen
//! entries form the fused vector fed to a linear head.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Axis, Graph, NodeId, ParamId, ParamStore};
use crate::encoders::Dense;
use crate::error::{Error, Result};
use crate::modality::ModalityId;
use crate::tensor::Tensor;

pub const ATTENTION_DIM: usize = 16;
pub const MODALITY_DROPOUT: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    Sampled,
    Argmax,
}

/// `probs[m, d]`: probability of selecting modality `m` for dimension `d`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttentionMatrix {
    pub modalities: Vec<ModalityId>,
    pub probs: Tensor,
}

impl AttentionMatrix {
    /// Largest deviation of a column sum from one.
    pub fn max_column_error(&self) -> f64 {
        (0..self.probs.cols())
            .map(|d| {
                let s: f64 = (0..self.probs.rows()).map(|m| self.probs.get(m, d)).sum();
                (s - 1.0).abs()
            })
            .fold(0.0, f64::max)
    }
}

/// Modality chosen for every fused dimension, as an index into the model's
/// modality list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionMap {
    pub chosen: Vec<usize>,
    pub mode: SelectionMode,
}

impl SelectionMap {
    /// Number of dimensions taken from each of `m` modalities.
    pub fn counts(&self, m: usize) -> Vec<usize> {
        let mut counts = vec![0; m];
        for &i in &self.chosen {
            counts[i] += 1;
        }
        counts
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FusionOutput {
    pub fused: Vec<f64>,
    pub logits: Vec<f64>,
    pub selection: SelectionMap,
    pub attention: AttentionMatrix,
}

/// Drops every available modality independently with probability `rate`.
/// If every modality would be dropped, one of the available ones chosen
/// uniformly survives.
pub fn modality_dropout(mask: &[bool], rate: f64, rng: &mut dyn RngCore) -> Result<Vec<bool>> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Parameter(format!("modality dropout rate {rate} outside [0, 1]")));
    }
    let available: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    if available.is_empty() {
        return Err(Error::NoAvailableModality);
    }
    if rate == 0.0 {
        return Ok(mask.to_vec());
    }
    let mut out = mask.to_vec();
    for &i in &available {
        if rng.random::<f64>() < rate {
            out[i] = false;
        }
    }
    if !out.iter().any(|&b| b) {
        let keep = available[rng.random_range(0..available.len())];
        out[keep] = true;
    }
    Ok(out)
}

/// Per-column argmax; ties go to the lowest row index.
pub fn argmax_selection(probs: &Tensor) -> Vec<usize> {
    (0..probs.cols())
        .map(|d| {
            let mut best = 0;
            for m in 1..probs.rows() {
                if probs.get(m, d) > probs.get(best, d) {
                    best = m;
                }
            }
            best
        })
        .collect()
}

/// Draws one row per column from the categorical distribution in that column.
pub fn sample_selection(probs: &Tensor, rng: &mut dyn RngCore) -> Vec<usize> {
    (0..probs.cols())
        .map(|d| {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut last = 0;
            for m in 0..probs.rows() {
                let p = probs.get(m, d);
                if p <= 0.0 {
                    continue;
                }
                last = m;
                acc += p;
                if u < acc {
                    return m;
                }
            }
            last
        })
        .collect()
}

/// Self-attention over docked rows producing selection scores.
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    query: Dense,
    key: Dense,
    value: Dense,
    score: Dense,
    /// Learned per-modality score offset, `M x c`, zero at initialization.
    prior: ParamId,
    key_dim: usize,
}

impl AttentionBlock {
    pub fn new(store: &mut ParamStore, modalities: usize, fusion_dim: usize, key_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            query: Dense::new(store, "attention.query", fusion_dim, key_dim, rng),
            key: Dense::new(store, "attention.key", fusion_dim, key_dim, rng),
            value: Dense::new(store, "attention.value", fusion_dim, key_dim, rng),
            score: Dense::new(store, "attention.score", key_dim, fusion_dim, rng),
            prior: store.add("attention.prior", Tensor::zeros(modalities, fusion_dim)),
            key_dim,
        }
    }

    /// Unnormalized `M x c` scores.
    pub fn scores(&self, g: &mut Graph, docked: NodeId) -> Result<NodeId> {
        let q = self.query.forward(g, docked)?;
        let k = self.key.forward(g, docked)?;
        let v = self.value.forward(g, docked)?;
        let kt = g.transpose(k);
        let s = g.matmul(q, kt)?;
        let s = g.scale(s, 1.0 / (self.key_dim as f64).sqrt());
        let w = g.softmax(s, Axis::Cols)?;
        let h = g.matmul(w, v)?;
        let out = self.score.forward(g, h)?;
        let prior = g.param(self.prior);
        g.add(out, prior)
    }

    /// Column-stochastic selection probabilities; unavailable rows are
    /// exactly zero.
    pub fn attend(&self, g: &mut Graph, docked: NodeId, available: &[bool]) -> Result<NodeId> {
        let s = self.scores(g, docked)?;
        g.masked_softmax(s, Axis::Rows, Some(available))
    }
}

/// Fixed selection used to make the fused output a smooth function of the
/// parameters: the chosen rows and the probability values the straight-through
/// path is measured against.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenSelection {
    pub chosen: Vec<usize>,
    pub reference: Tensor,
}

/// Picks one row per column of `docked` and returns the fused `1 x c` node.
///
/// Forward value: `docked[chosen[d], d]`. Backward: the docked matrix
/// receives gradient only at the chosen entries, and `probs` receives the
/// gradient it would get if the one-hot choice were the probability column.
pub fn select_and_fuse(
    g: &mut Graph,
    docked: NodeId,
    probs: NodeId,
    chosen: &[usize],
    frozen_reference: Option<Tensor>,
) -> Result<NodeId> {
    let p = g.value(probs);
    for (d, &m) in chosen.iter().enumerate() {
        if m >= p.rows() || p.get(m, d) <= 0.0 && frozen_reference.is_none() {
            return Err(Error::Parameter(format!("dimension {d} selects unavailable modality {m}")));
        }
    }
    g.select_straight_through(docked, probs, chosen, frozen_reference)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn block(m: usize, c: usize, seed: u64) -> (ParamStore, AttentionBlock) {
        let mut store = ParamStore::new();
        let b = AttentionBlock::new(&mut store, m, c, ATTENTION_DIM, &mut ChaCha8Rng::seed_from_u64(seed));
        (store, b)
    }

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn dropout_rate_zero_and_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mask = [true, false, true, true];
        assert_eq!(modality_dropout(&mask, 0.0, &mut rng).unwrap(), mask.to_vec());
        for _ in 0..500 {
            let out = modality_dropout(&mask, 0.5, &mut rng).unwrap();
            assert!(!out[1]);
            assert!(out.iter().any(|&b| b));
        }
        assert!(matches!(
            modality_dropout(&[false, false], 0.2, &mut rng),
            Err(Error::NoAvailableModality)
        ));
        assert!(modality_dropout(&mask, 1.5, &mut rng).is_err());
    }

    #[test]
    fn rate_one_keeps_exactly_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let out = modality_dropout(&[true, true, false, true], 1.0, &mut rng).unwrap();
        assert_eq!(out.iter().filter(|&&b| b).count(), 1);
        assert!(!out[2]);
    }

    #[test]
    fn columns_are_stochastic_with_exact_zeros() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (store, b) = block(6, 64, 3);
        let mut g = Graph::new(&store);
        let x = g.input(random(6, 64, &mut rng));
        let mask = [true, false, true, true, false, true];
        let p = b.attend(&mut g, x, &mask).unwrap();
        let att = AttentionMatrix {
            modalities: ModalityId::ALL.to_vec(),
            probs: g.value(p).clone(),
        };
        assert!(att.max_column_error() < 1e-6);
        for d in 0..64 {
            assert_eq!(att.probs.get(1, d), 0.0);
            assert_eq!(att.probs.get(4, d), 0.0);
        }
    }

    #[test]
    fn single_available_gives_probability_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (store, b) = block(3, 8, 4);
        let mut g = Graph::new(&store);
        let x = g.input(random(3, 8, &mut rng));
        let p = b.attend(&mut g, x, &[false, true, false]).unwrap();
        for d in 0..8 {
            assert_eq!(g.value(p).get(1, d), 1.0);
        }
    }

    #[test]
    fn identical_rows_give_uniform_probabilities() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (store, b) = block(4, 10, 5);
        let row = random(1, 10, &mut rng);
        let stacked = Tensor::from_rows(&vec![row.data().to_vec(); 4]).unwrap();
        let mut g = Graph::new(&store);
        let x = g.input(stacked);
        let p = b.attend(&mut g, x, &[true, true, false, true]).unwrap();
        for d in 0..10 {
            for m in [0, 1, 3] {
                assert!((g.value(p).get(m, d) - 1.0 / 3.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn masking_equals_renormalizing_unmasked_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (store, b) = block(5, 12, 6);
        let x = random(5, 12, &mut rng);
        let mask = [true, true, false, true, false];
        let mut g = Graph::new(&store);
        let xn = g.input(x);
        let masked = b.attend(&mut g, xn, &mask).unwrap();
        let full = b.attend(&mut g, xn, &[true; 5]).unwrap();
        let (masked, full) = (g.value(masked), g.value(full));
        for d in 0..12 {
            let total: f64 = (0..5).filter(|&m| mask[m]).map(|m| full.get(m, d)).sum();
            for m in 0..5 {
                let expected = if mask[m] { full.get(m, d) / total } else { 0.0 };
                assert!((masked.get(m, d) - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn argmax_breaks_ties_low() {
        let p = Tensor::from_rows(&[vec![0.7, 0.4, 0.2], vec![0.2, 0.4, 0.5], vec![0.1, 0.2, 0.3]]).unwrap();
        assert_eq!(argmax_selection(&p), vec![0, 0, 1]);
    }

    #[test]
    fn sampling_never_picks_zero_probability() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = Tensor::from_rows(&[vec![0.0, 0.5], vec![1.0, 0.0], vec![0.0, 0.5]]).unwrap();
        for _ in 0..1000 {
            let s = sample_selection(&p, &mut rng);
            assert_eq!(s[0], 1);
            assert_ne!(s[1], 1);
        }
    }

    #[test]
    fn fused_takes_chosen_entries_and_masks_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (store, b) = block(3, 6, 8);
        let mut g = Graph::new(&store);
        let x = g.input(random(3, 6, &mut rng));
        let p = b.attend(&mut g, x, &[true; 3]).unwrap();
        let chosen = vec![0, 1, 2, 2, 1, 0];
        let fused = select_and_fuse(&mut g, x, p, &chosen, None).unwrap();
        for (d, &m) in chosen.iter().enumerate() {
            assert_eq!(g.value(fused).get(0, d), g.value(x).get(m, d));
        }
        // Pass the fused vector through a sum; the docked input gradient
        // must vanish off the chosen entries apart from the attention path.
        let s = g.sum(fused);
        g.backward(s).unwrap();
        let gp = g.grad(p).unwrap();
        for d in 0..6 {
            for m in 0..3 {
                assert_eq!(gp.get(m, d), g.value(x).get(m, d));
            }
        }
    }

    #[test]
    fn one_available_modality_gets_zero_attention_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (store, b) = block(3, 5, 9);
        let mut g = Graph::new(&store);
        let x = g.input(random(3, 5, &mut rng));
        let mask = [false, false, true];
        let p = b.attend(&mut g, x, &mask).unwrap();
        let chosen = vec![2; 5];
        let fused = select_and_fuse(&mut g, x, p, &chosen, None).unwrap();
        assert_eq!(g.value(fused).data(), g.value(x).row_slice(2));
        assert!(select_and_fuse(&mut g, x, p, &[0; 5], None).is_err());
        let s = g.sum(fused);
        g.backward(s).unwrap();
        for (_, grad) in g.into_param_grads() {
            assert!(grad.data().iter().all(|&v| v == 0.0));
        }
    }
}
