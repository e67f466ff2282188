//! Per-modality encoders and the docking projections into the fusion space.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{fan_in_uniform, Axis, Graph, NodeId, ParamId, ParamStore, LEAKY_SLOPE};
use crate::error::{Error, Result};
use crate::modality::ModalityId;
use crate::tensor::Tensor;

pub const TEXT_HIDDEN: usize = 30;
pub const AUDIO_EMBEDDING: usize = 758;
pub const FACE_OUTPUT: usize = 256;
pub const BODY_OUTPUT: usize = 8;
pub const CONV_FILTERS: usize = 16;
pub const CONV_WIDTH: usize = 3;
pub const FEED_FORWARD: usize = 32;
const LN_EPS: f64 = 1e-5;

/// Affine layer `x W + b` with `W: in x out` and `b: 1 x out`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Dense {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let weight = store.add(format!("{name}.weight"), fan_in_uniform(in_dim, out_dim, in_dim, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(1, out_dim));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

#[derive(Debug, Clone)]
struct LayerNorm {
    gain: ParamId,
    bias: ParamId,
}

impl LayerNorm {
    fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::filled(1, dim, 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(1, dim)),
        }
    }

    fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let n = g.layer_norm(x, LN_EPS);
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        let s = g.mul_row(n, gain)?;
        g.add_row(s, bias)
    }
}

/// Shape of one modality's encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EncoderSpec {
    /// Two dense layers over a precomputed sentence embedding, with a skip
    /// connection from the first layer's output to the second's.
    Mlp { input_dim: usize, hidden: usize },
    /// Two time-axis convolutions, one self-attention encoder block, mean
    /// pooling over time, and a dense output layer.
    Sequence {
        channels: usize,
        filters: usize,
        width: usize,
        feed_forward: usize,
        output: usize,
    },
}

impl EncoderSpec {
    pub fn mlp(input_dim: usize) -> Self {
        EncoderSpec::Mlp {
            input_dim,
            hidden: TEXT_HIDDEN,
        }
    }

    pub fn sequence(channels: usize, output: usize) -> Self {
        EncoderSpec::Sequence {
            channels,
            filters: CONV_FILTERS,
            width: CONV_WIDTH,
            feed_forward: FEED_FORWARD,
            output,
        }
    }

    pub fn output_dim(&self) -> usize {
        match *self {
            EncoderSpec::Mlp { hidden, .. } => hidden,
            EncoderSpec::Sequence { output, .. } => output,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            EncoderSpec::Mlp { input_dim, hidden } => input_dim > 0 && hidden > 0,
            EncoderSpec::Sequence {
                channels,
                filters,
                width,
                feed_forward,
                output,
            } => channels > 0 && filters > 0 && width % 2 == 1 && feed_forward > 0 && output > 0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Parameter(format!("invalid encoder spec {self:?}")))
        }
    }
}

/// Raw input of one modality for one sample.
#[derive(Debug, Clone, PartialEq)]
pub enum ModalityInput {
    Vector(Vec<f64>),
    /// `frames x channels`.
    Sequence(Tensor),
}

#[derive(Debug, Clone)]
pub struct MlpEncoder {
    fc1: Dense,
    fc2: Dense,
}

impl MlpEncoder {
    pub fn forward(&self, g: &mut Graph, x: &[f64], dropout: f64) -> Result<NodeId> {
        if x.len() != self.fc1.in_dim {
            return Err(Error::Shape {
                op: "mlp_encoder",
                left: vec![1, self.fc1.in_dim],
                right: vec![1, x.len()],
            });
        }
        let x = g.input(Tensor::row(x.to_vec()));
        let h1 = self.fc1.forward(g, x)?;
        let h1 = g.leaky_relu(h1, LEAKY_SLOPE);
        let d1 = g.dropout(h1, dropout)?;
        let h2 = self.fc2.forward(g, d1)?;
        let h2 = g.leaky_relu(h2, LEAKY_SLOPE);
        g.add(h2, h1)
    }
}

#[derive(Debug, Clone)]
pub struct SequenceEncoder {
    channels: usize,
    filters: usize,
    width: usize,
    conv1_w: ParamId,
    conv1_b: ParamId,
    conv2_w: ParamId,
    conv2_b: ParamId,
    query: Dense,
    key: Dense,
    value: Dense,
    attn_out: Dense,
    norm1: LayerNorm,
    ff1: Dense,
    ff2: Dense,
    norm2: LayerNorm,
    out: Dense,
}

/// Sinusoidal position code, `frames x dim`.
pub fn positional_encoding(frames: usize, dim: usize) -> Tensor {
    let mut t = Tensor::zeros(frames, dim);
    for pos in 0..frames {
        for i in 0..dim {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let angle = pos as f64 / rate;
            t.set(pos, i, if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    t
}

impl SequenceEncoder {
    pub fn forward(&self, g: &mut Graph, x: &Tensor, dropout: f64) -> Result<NodeId> {
        if x.rows() == 0 {
            return Err(Error::Empty("sequence with zero frames"));
        }
        if x.cols() != self.channels {
            return Err(Error::Shape {
                op: "sequence_encoder",
                left: vec![x.rows(), self.channels],
                right: x.shape(),
            });
        }
        let frames = x.rows();
        let x = g.input(x.clone());
        let (w1, b1) = (g.param(self.conv1_w), g.param(self.conv1_b));
        let h = g.conv1d(x, w1, b1, self.width)?;
        let h = g.leaky_relu(h, LEAKY_SLOPE);
        let (w2, b2) = (g.param(self.conv2_w), g.param(self.conv2_b));
        let h = g.conv1d(h, w2, b2, self.width)?;
        let h = g.leaky_relu(h, LEAKY_SLOPE);
        let pe = g.input(positional_encoding(frames, self.filters));
        let h = g.add(h, pe)?;

        let q = self.query.forward(g, h)?;
        let k = self.key.forward(g, h)?;
        let v = self.value.forward(g, h)?;
        let kt = g.transpose(k);
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, 1.0 / (self.filters as f64).sqrt());
        let weights = g.softmax(scores, Axis::Cols)?;
        let mixed = g.matmul(weights, v)?;
        let mixed = self.attn_out.forward(g, mixed)?;
        let mixed = g.dropout(mixed, dropout)?;
        let h = g.add(h, mixed)?;
        let h = self.norm1.forward(g, h)?;

        let f = self.ff1.forward(g, h)?;
        let f = g.leaky_relu(f, LEAKY_SLOPE);
        let f = self.ff2.forward(g, f)?;
        let f = g.dropout(f, dropout)?;
        let h = g.add(h, f)?;
        let h = self.norm2.forward(g, h)?;

        let pooled = g.mean_pool(h)?;
        self.out.forward(g, pooled)
    }
}

#[derive(Debug, Clone)]
pub enum Encoder {
    Mlp(MlpEncoder),
    Sequence(SequenceEncoder),
}

impl Encoder {
    pub fn new(store: &mut ParamStore, name: &str, spec: &EncoderSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        Ok(match *spec {
            EncoderSpec::Mlp { input_dim, hidden } => Encoder::Mlp(MlpEncoder {
                fc1: Dense::new(store, &format!("{name}.fc1"), input_dim, hidden, rng),
                fc2: Dense::new(store, &format!("{name}.fc2"), hidden, hidden, rng),
            }),
            EncoderSpec::Sequence {
                channels,
                filters,
                width,
                feed_forward,
                output,
            } => {
                let conv1_w = store.add(
                    format!("{name}.conv1.weight"),
                    fan_in_uniform(filters, width * channels, width * channels, rng),
                );
                let conv1_b = store.add(format!("{name}.conv1.bias"), Tensor::zeros(1, filters));
                let conv2_w = store.add(
                    format!("{name}.conv2.weight"),
                    fan_in_uniform(filters, width * filters, width * filters, rng),
                );
                let conv2_b = store.add(format!("{name}.conv2.bias"), Tensor::zeros(1, filters));
                Encoder::Sequence(SequenceEncoder {
                    channels,
                    filters,
                    width,
                    conv1_w,
                    conv1_b,
                    conv2_w,
                    conv2_b,
                    query: Dense::new(store, &format!("{name}.attn.query"), filters, filters, rng),
                    key: Dense::new(store, &format!("{name}.attn.key"), filters, filters, rng),
                    value: Dense::new(store, &format!("{name}.attn.value"), filters, filters, rng),
                    attn_out: Dense::new(store, &format!("{name}.attn.out"), filters, filters, rng),
                    norm1: LayerNorm::new(store, &format!("{name}.norm1"), filters),
                    ff1: Dense::new(store, &format!("{name}.ff1"), filters, feed_forward, rng),
                    ff2: Dense::new(store, &format!("{name}.ff2"), feed_forward, filters, rng),
                    norm2: LayerNorm::new(store, &format!("{name}.norm2"), filters),
                    out: Dense::new(store, &format!("{name}.out"), filters, output, rng),
                })
            }
        })
    }

    pub fn forward(&self, g: &mut Graph, input: &ModalityInput, dropout: f64) -> Result<NodeId> {
        match (self, input) {
            (Encoder::Mlp(e), ModalityInput::Vector(v)) => e.forward(g, v, dropout),
            (Encoder::Sequence(e), ModalityInput::Sequence(t)) => e.forward(g, t, dropout),
            (Encoder::Mlp(_), ModalityInput::Sequence(_)) => Err(Error::Parameter("sequence input given to an embedding encoder".into())),
            (Encoder::Sequence(_), ModalityInput::Vector(_)) => Err(Error::Parameter("vector input given to a sequence encoder".into())),
        }
    }
}

/// One modality's vector in the shared fusion space.
#[derive(Debug, Clone, PartialEq)]
pub struct DockedEmbedding {
    pub modality: ModalityId,
    pub vector: Vec<f64>,
    pub available: bool,
}

/// Linear projection of an encoder output into the fusion dimension.
#[derive(Debug, Clone)]
pub struct Dock {
    pub modality: ModalityId,
    proj: Dense,
}

impl Dock {
    pub fn new(store: &mut ParamStore, modality: ModalityId, in_dim: usize, fusion_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            modality,
            proj: Dense::new(store, &format!("{}.dock", modality.name()), in_dim, fusion_dim, rng),
        }
    }

    pub fn fusion_dim(&self) -> usize {
        self.proj.out_dim
    }

    /// Projects an available modality's encoding; an unavailable modality
    /// yields a constant zero row.
    pub fn forward(&self, g: &mut Graph, encoded: Option<NodeId>) -> Result<NodeId> {
        match encoded {
            Some(e) => self.proj.forward(g, e),
            None => Ok(g.input(Tensor::zeros(1, self.proj.out_dim))),
        }
    }

    pub fn dock(&self, g: &mut Graph, encoded: Option<NodeId>) -> Result<DockedEmbedding> {
        let node = self.forward(g, encoded)?;
        Ok(DockedEmbedding {
            modality: self.modality,
            vector: g.value(node).data().to_vec(),
            available: encoded.is_some(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_seq(frames: usize, channels: usize, r: &mut ChaCha8Rng) -> Tensor {
        let data = (0..frames * channels).map(|_| r.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(frames, channels, data).unwrap()
    }

    #[test]
    fn text_encoder_shapes_and_zero_input() {
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, "text", &EncoderSpec::mlp(12), &mut rng(1)).unwrap();
        let mut g = Graph::new(&store);
        let out = enc.forward(&mut g, &ModalityInput::Vector(vec![0.0; 12]), 0.1).unwrap();
        assert_eq!(g.value(out).shape(), vec![1, TEXT_HIDDEN]);
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));
        let out = enc.forward(&mut g, &ModalityInput::Vector(vec![0.3; 12]), 0.1).unwrap();
        assert_eq!(g.value(out).cols(), 30);
        let err = enc.forward(&mut g, &ModalityInput::Vector(vec![0.0; 11]), 0.1).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn text_encoder_grad_check() {
        let mut r = rng(2);
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, "text", &EncoderSpec::Mlp { input_dim: 5, hidden: 6 }, &mut r).unwrap();
        for p in store.iter_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v = r.random_range(-0.8..0.8));
        }
        let x: Vec<f64> = (0..5).map(|_| r.random_range(-1.0..1.0)).collect();
        let coef = Tensor::row((0..6).map(|_| r.random_range(-1.0..1.0)).collect());
        let report = grad_check(&store, 1e-5, |g| {
            let y = enc.forward(g, &ModalityInput::Vector(x.clone()), 0.1)?;
            let c = g.input(coef.clone());
            let m = g.mul(y, c)?;
            Ok(g.sum(m))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn sequence_encoder_outputs() {
        let mut r = rng(3);
        for (spec, out) in [(EncoderSpec::sequence(16, FACE_OUTPUT), 256), (EncoderSpec::sequence(2, BODY_OUTPUT), 8)] {
            let mut store = ParamStore::new();
            let enc = Encoder::new(&mut store, "seq", &spec, &mut r).unwrap();
            let ch = if out == 256 { 16 } else { 2 };
            let mut g = Graph::new(&store);
            let y = enc.forward(&mut g, &ModalityInput::Sequence(random_seq(1, ch, &mut r)), 0.0).unwrap();
            assert_eq!(g.value(y).shape(), vec![1, out]);
            assert!(g.value(y).is_finite());
            let empty = Tensor::zeros(0, ch);
            assert!(enc.forward(&mut g, &ModalityInput::Sequence(empty), 0.0).is_err());
        }
    }

    #[test]
    fn swapping_distant_frames_changes_output() {
        let mut r = rng(4);
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, "seq", &EncoderSpec::sequence(3, 8), &mut r).unwrap();
        let x = random_seq(20, 3, &mut r);
        let mut swapped = x.clone();
        for c in 0..3 {
            swapped.set(2, c, x.get(17, c));
            swapped.set(17, c, x.get(2, c));
        }
        let mut g = Graph::new(&store);
        let a = enc.forward(&mut g, &ModalityInput::Sequence(x.clone()), 0.0).unwrap();
        let b = enc.forward(&mut g, &ModalityInput::Sequence(swapped), 0.0).unwrap();
        let c = enc.forward(&mut g, &ModalityInput::Sequence(x), 0.0).unwrap();
        assert_ne!(g.value(a), g.value(b));
        assert_eq!(g.value(a), g.value(c));
    }

    #[test]
    fn sequence_encoder_grad_check() {
        let mut r = rng(5);
        let mut store = ParamStore::new();
        let spec = EncoderSpec::Sequence {
            channels: 2,
            filters: 3,
            width: 3,
            feed_forward: 4,
            output: 2,
        };
        let enc = Encoder::new(&mut store, "seq", &spec, &mut r).unwrap();
        let x = random_seq(5, 2, &mut r);
        let report = grad_check(&store, 1e-5, |g| {
            let y = enc.forward(g, &ModalityInput::Sequence(x.clone()), 0.0)?;
            let c = g.input(Tensor::row(vec![0.7, -1.3]));
            let m = g.mul(y, c)?;
            Ok(g.sum(m))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-3, "{report:?}");
    }

    #[test]
    fn parameter_counts_match_closed_form() {
        let mut r = rng(6);
        let count = |spec: &EncoderSpec, r: &mut ChaCha8Rng| {
            let mut store = ParamStore::new();
            Encoder::new(&mut store, "e", spec, r).unwrap();
            store.num_scalars()
        };
        // Two dense layers: d*h + h + h*h + h.
        assert_eq!(count(&EncoderSpec::mlp(768), &mut r), 768 * 30 + 30 + 30 * 30 + 30);
        // conv1 + conv2 + 4 attention projections + 2 layer norms + ff + out.
        let (c, f, w, ff, o) = (16usize, 16usize, 3usize, 32usize, 256usize);
        let expected = (f * w * c + f) + (f * w * f + f) + 4 * (f * f + f) + 2 * (2 * f) + (f * ff + ff) + (ff * f + f) + (f * o + o);
        assert_eq!(count(&EncoderSpec::sequence(16, 256), &mut r), expected);
    }

    #[test]
    fn dock_handles_missing_and_zero() {
        let mut store = ParamStore::new();
        let dock = Dock::new(&mut store, ModalityId::Audio, 4, 64, &mut rng(7));
        let mut g = Graph::new(&store);
        let missing = dock.dock(&mut g, None).unwrap();
        assert!(!missing.available);
        assert_eq!(missing.vector, vec![0.0; 64]);
        let zero = g.input(Tensor::zeros(1, 4));
        let docked = dock.dock(&mut g, Some(zero)).unwrap();
        assert!(docked.available);
        assert_eq!(docked.vector, vec![0.0; 64]);
    }
}
