//! The learnable network: a shared permutation-invariant point encoder, a
//! projector onto the unit sphere, a semantic classifier and a
//! translation-distance classifier.

mod checkpoint;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::TRANSLATION_CLASSES;
use crate::error::{Error, Result};
use crate::geometry::{knn, PointCloud};
use crate::tensor::{Graph, Tensor, Var};

const PROJECTOR_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    /// Per-point hidden widths.
    pub hidden: Vec<usize>,
    /// Width of the pooled feature vector.
    pub feature_dim: usize,
    /// Replace the first per-point layer with an edge convolution over kNN.
    pub edge_conv: bool,
    pub edge_k: usize,
    pub num_classes: usize,
    pub translation_classes: usize,
    pub projector_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 128],
            feature_dim: 128,
            edge_conv: false,
            edge_k: 8,
            num_classes: 4,
            translation_classes: TRANSLATION_CLASSES,
            projector_dim: 64,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.iter().any(|&w| w == 0)
            || self.feature_dim == 0
            || self.projector_dim == 0
            || self.num_classes < 2
        {
            return Err(Error::invalid(format!("encoder widths must be positive: {self:?}")));
        }
        if self.translation_classes != TRANSLATION_CLASSES {
            return Err(Error::invalid(format!(
                "translation head must have {TRANSLATION_CLASSES} classes"
            )));
        }
        if self.edge_conv && self.edge_k == 0 {
            return Err(Error::invalid("edge convolution needs k > 0"));
        }
        Ok(())
    }

    fn encoder_dims(&self) -> Vec<usize> {
        let input = if self.edge_conv { 6 } else { 3 };
        let mut dims = vec![input];
        dims.extend(&self.hidden);
        dims.push(self.feature_dim);
        dims
    }
}

/// Affine map stored as `weight: in×out`, `bias: out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Uniform in `±1/√fan_in` for both weight and bias.
    pub fn init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut draw = |n: usize| (0..n).map(|_| rng.gen_range(-bound..=bound)).collect::<Vec<_>>();
        let weight = Tensor::matrix(fan_in, fan_out, draw(fan_in * fan_out)).expect("positive dims");
        let bias = Tensor::new(vec![fan_out], draw(fan_out)).expect("positive dims");
        Self { weight, bias }
    }

    fn bind(&self, g: &mut Graph, trainable: bool) -> BoundLinear {
        let mut add = |t: &Tensor| {
            if trainable {
                g.leaf(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        BoundLinear {
            weight: add(&self.weight),
            bias: add(&self.bias),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLinear {
    pub weight: Var,
    pub bias: Var,
}

impl BoundLinear {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let y = g.matmul(x, self.weight)?;
        g.add_bias(y, self.bias)
    }
}

/// Which heads to place on the graph next to the encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Heads {
    pub projector: bool,
    pub classifier: bool,
    pub translator: bool,
}

impl Heads {
    pub const ALL: Heads = Heads {
        projector: true,
        classifier: true,
        translator: true,
    };
    /// Encoder plus semantic classifier.
    pub const INFERENCE: Heads = Heads {
        projector: false,
        classifier: true,
        translator: false,
    };
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: EncoderConfig,
    pub encoder: Vec<Linear>,
    pub projector: Vec<Linear>,
    pub classifier: Linear,
    pub translator: Linear,
}

impl ModelParams {
    pub fn init<R: Rng + ?Sized>(config: &EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let dims = config.encoder_dims();
        let encoder = dims.windows(2).map(|w| Linear::init(w[0], w[1], rng)).collect();
        let d = config.feature_dim;
        let projector = vec![Linear::init(d, d, rng), Linear::init(d, config.projector_dim, rng)];
        let classifier = Linear::init(d, config.num_classes, rng);
        let translator = Linear::init(d, config.translation_classes, rng);
        Ok(Self {
            config: config.clone(),
            encoder,
            projector,
            classifier,
            translator,
        })
    }

    fn layers(&self) -> impl Iterator<Item = (String, &Linear)> {
        let enc = self
            .encoder
            .iter()
            .enumerate()
            .map(|(i, l)| (format!("encoder.{i}"), l));
        let proj = self
            .projector
            .iter()
            .enumerate()
            .map(|(i, l)| (format!("projector.{i}"), l));
        enc.chain(proj)
            .chain([("classifier".to_string(), &self.classifier)])
            .chain([("translator".to_string(), &self.translator)])
    }

    /// Every tensor with its canonical name, in canonical order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        self.layers()
            .flat_map(|(n, l)| [(format!("{n}.weight"), &l.weight), (format!("{n}.bias"), &l.bias)])
            .collect()
    }

    /// Mutable tensors in the same order as [`named_tensors`](Self::named_tensors).
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in self
            .encoder
            .iter_mut()
            .chain(self.projector.iter_mut())
            .chain([&mut self.classifier, &mut self.translator])
        {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.is_finite())
    }

    pub fn bind(&self, g: &mut Graph, heads: Heads, trainable: bool) -> BoundModel {
        BoundModel {
            config: self.config.clone(),
            encoder: self.encoder.iter().map(|l| l.bind(g, trainable)).collect(),
            projector: heads
                .projector
                .then(|| self.projector.iter().map(|l| l.bind(g, trainable)).collect()),
            classifier: heads.classifier.then(|| self.classifier.bind(g, trainable)),
            translator: heads.translator.then(|| self.translator.bind(g, trainable)),
        }
    }

    /// Exponential moving average toward `online`: `self ← m·self + (1−m)·online`.
    pub fn ema_update(&mut self, online: &ModelParams, momentum: f64) {
        let src: Vec<&Tensor> = online.named_tensors().into_iter().map(|(_, t)| t).collect();
        for (dst, s) in self.tensors_mut().into_iter().zip(src) {
            for (d, v) in dst.data_mut().iter_mut().zip(s.data()) {
                *d = momentum * *d + (1.0 - momentum) * v;
            }
        }
    }
}

/// Model parameters placed on a graph.
pub struct BoundModel {
    config: EncoderConfig,
    encoder: Vec<BoundLinear>,
    projector: Option<Vec<BoundLinear>>,
    classifier: Option<BoundLinear>,
    translator: Option<BoundLinear>,
}

impl BoundModel {
    /// Vars in canonical tensor order; `None` for heads that were not bound.
    pub fn vars(&self) -> Vec<Option<Var>> {
        let mut out = Vec::new();
        let mut push = |l: Option<&BoundLinear>| {
            out.push(l.map(|l| l.weight));
            out.push(l.map(|l| l.bias));
        };
        self.encoder.iter().for_each(|l| push(Some(l)));
        match &self.projector {
            Some(p) => p.iter().for_each(|l| push(Some(l))),
            None => (0..2).for_each(|_| push(None)),
        }
        push(self.classifier.as_ref());
        push(self.translator.as_ref());
        out
    }

    /// Gradients in canonical order after `backward`; zeros where nothing flowed.
    pub fn grads(&self, g: &Graph, params: &ModelParams) -> Vec<Tensor> {
        self.vars()
            .into_iter()
            .zip(params.named_tensors())
            .map(|(v, (_, t))| v.and_then(|v| g.grad(v)).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }

    /// Pooled features `[B × D]` for a batch of equally sized clouds.
    pub fn encode(&self, g: &mut Graph, clouds: &[&PointCloud]) -> Result<Var> {
        let first = clouds.first().ok_or_else(|| Error::invalid("empty batch"))?;
        let m = first.len();
        if let Some(c) = clouds.iter().find(|c| c.len() != m) {
            return Err(Error::Shape {
                op: "encode",
                lhs: vec![m, 3],
                rhs: vec![c.len(), 3],
            });
        }
        let mut coords = Vec::with_capacity(clouds.len() * m * 3);
        for c in clouds {
            coords.extend(c.points().iter().flatten());
        }
        let input = g.constant(Tensor::matrix(clouds.len() * m, 3, coords)?);

        let mut layers = self.encoder.iter();
        let mut h = if self.config.edge_conv {
            let k = self.config.edge_k;
            let mut center = Vec::with_capacity(clouds.len() * m * k);
            let mut neighbor = Vec::with_capacity(clouds.len() * m * k);
            for (b, c) in clouds.iter().enumerate() {
                for (i, nbrs) in knn(c, k)?.into_iter().enumerate() {
                    for j in nbrs {
                        center.push(b * m + i);
                        neighbor.push(b * m + j);
                    }
                }
            }
            let xi = g.gather_rows(input, center)?;
            let xj = g.gather_rows(input, neighbor)?;
            let diff = g.sub(xj, xi)?;
            let edge = g.concat_cols(xi, diff)?;
            let first = layers.next().expect("encoder has layers");
            let e = first.forward(g, edge)?;
            let e = g.relu(e);
            g.group_max(e, k)?
        } else {
            let first = layers.next().expect("encoder has layers");
            let h = first.forward(g, input)?;
            g.relu(h)
        };
        for layer in layers {
            let z = layer.forward(g, h)?;
            h = g.relu(z);
        }
        g.group_max(h, m)
    }

    /// Unit-norm embeddings `[B × d]`.
    ///
    /// The hidden layer is standardized per channel over the batch before its
    /// ReLU. Without it, max-pooled features of different clouds are nearly
    /// collinear and every similarity distribution starts out uniform. The
    /// statistics are batch-local, so rows depend on their batch; the
    /// projector is only used during training.
    pub fn project(&self, g: &mut Graph, features: Var) -> Result<Var> {
        let proj = self
            .projector
            .as_ref()
            .ok_or_else(|| Error::invalid("projector not bound"))?;
        let h = proj[0].forward(g, features)?;
        let h = g.standardize_columns(h, PROJECTOR_EPS)?;
        let h = g.relu(h);
        let z = proj[1].forward(g, h)?;
        g.l2_normalize(z)
    }

    /// Class probabilities `[B × C]`.
    pub fn classify_semantic(&self, g: &mut Graph, features: Var) -> Result<Var> {
        let head = self.classifier.ok_or_else(|| Error::invalid("classifier not bound"))?;
        let logits = head.forward(g, features)?;
        g.softmax(logits, 1.0)
    }

    /// Translation-distance probabilities `[B × 4]`.
    pub fn classify_translation(&self, g: &mut Graph, features: Var) -> Result<Var> {
        let head = self
            .translator
            .ok_or_else(|| Error::invalid("translation head not bound"))?;
        let logits = head.forward(g, features)?;
        g.softmax(logits, 1.0)
    }
}

/// Class probabilities for a batch using only the encoder and classifier.
pub fn predict(params: &ModelParams, clouds: &[&PointCloud]) -> Result<Tensor> {
    let mut g = Graph::new();
    let model = params.bind(&mut g, Heads::INFERENCE, false);
    let f = model.encode(&mut g, clouds)?;
    let p = model.classify_semantic(&mut g, f)?;
    Ok(g.value(p).clone())
}

/// Pooled encoder features for a batch.
pub fn features(params: &ModelParams, clouds: &[&PointCloud]) -> Result<Tensor> {
    let mut g = Graph::new();
    let model = params.bind(
        &mut g,
        Heads {
            projector: false,
            classifier: false,
            translator: false,
        },
        false,
    );
    let f = model.encode(&mut g, clouds)?;
    Ok(g.value(f).clone())
}
