//! Encoder, classifier, the P projector heads, and the EMA teacher copy.
//!
//! The encoder is a rectifier perceptron over configurable layer widths, the
//! classifier a single linear map, and each projector a two-layer perceptron
//! producing raw (pre-normalization) embeddings. Projector k is initialized
//! from a seed derived as (seed, k) so heads start pairwise distinct.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds::derive_seed;
use crate::tape::{GradTape, Var};
use crate::tensor::{self, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// Layer widths from input to feature dim d_f, e.g. [2, 64, 64].
    pub encoder_layers: Vec<usize>,
    /// Number of classes C.
    pub num_classes: usize,
    /// Projector hidden width d_h.
    pub proj_hidden: usize,
    /// Projector output (embedding) dim d_z.
    pub proj_dim: usize,
    /// Number of projector heads P.
    pub projectors: usize,
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.encoder_layers.len() < 2 {
            return Err(Error::InvalidSpec(
                "encoder_layers needs at least an input and a feature width".into(),
            ));
        }
        if self.encoder_layers.iter().any(|&w| w < 1) {
            return Err(Error::InvalidSpec("all encoder widths must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidSpec("num_classes must be >= 2".into()));
        }
        if self.proj_hidden < 1 {
            return Err(Error::InvalidSpec("proj_hidden must be >= 1".into()));
        }
        if self.proj_dim < 2 {
            return Err(Error::InvalidSpec("proj_dim must be >= 2".into()));
        }
        if self.projectors < 1 {
            return Err(Error::InvalidSpec("projectors must be >= 1".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.encoder_layers[0]
    }

    pub fn feature_dim(&self) -> usize {
        *self.encoder_layers.last().unwrap()
    }

    /// Parameters in one projector head: d_f·d_h + d_h + d_h·d_z + d_z.
    pub fn projector_param_count(&self) -> usize {
        let d_f = self.feature_dim();
        d_f * self.proj_hidden + self.proj_hidden + self.proj_hidden * self.proj_dim + self.proj_dim
    }

    /// Closed-form total parameter count (weights plus biases).
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        for w in self.encoder_layers.windows(2) {
            n += w[0] * w[1] + w[1];
        }
        n += self.feature_dim() * self.num_classes + self.num_classes;
        n + self.projectors * self.projector_param_count()
    }
}

/// One linear layer: `y = x·w + b` with `w: [in, out]`, `b: [1, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub w: Tensor,
    pub b: Tensor,
}

impl Dense {
    fn init(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Dense {
        // He-uniform keeps activation scale roughly constant through the
        // rectifier stack; with narrow layers a smaller bound lets the
        // pre-normalization embeddings collapse toward zero, where the
        // normalization Jacobian (and hence every contrastive gradient)
        // blows up as 1/‖z‖.
        let bound = (6.0 / fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
        Dense {
            w: Tensor::from_raw(vec![fan_in, fan_out], data),
            b: Tensor::zeros(vec![1, fan_out]),
        }
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        tensor::add_row(&tensor::matmul(x, &self.w)?, &self.b)
    }
}

/// Two-layer projector head g_k: d_f → d_h → d_z with a rectifier between.
#[derive(Clone, Debug, PartialEq)]
pub struct Projector {
    pub fc1: Dense,
    pub fc2: Dense,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub spec: NetworkSpec,
    pub encoder: Vec<Dense>,
    pub classifier: Dense,
    pub projectors: Vec<Projector>,
    /// Seed each projector head was drawn from, for the record.
    pub projector_seeds: Vec<u64>,
}

/// Builds a model from a spec, deterministically in the seed. Projector k
/// draws from the derived seed (seed, k).
pub fn init(spec: &NetworkSpec, seed: u64) -> Result<ModelState> {
    spec.validate()?;
    let mut enc_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "model/encoder", 0));
    let encoder = spec
        .encoder_layers
        .windows(2)
        .map(|w| Dense::init(&mut enc_rng, w[0], w[1]))
        .collect();
    let mut cls_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "model/classifier", 0));
    let classifier = Dense::init(&mut cls_rng, spec.feature_dim(), spec.num_classes);
    let mut projectors = Vec::with_capacity(spec.projectors);
    let mut projector_seeds = Vec::with_capacity(spec.projectors);
    for k in 0..spec.projectors {
        let s = derive_seed(seed, "model/projector", k as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        projectors.push(Projector {
            fc1: Dense::init(&mut rng, spec.feature_dim(), spec.proj_hidden),
            fc2: Dense::init(&mut rng, spec.proj_hidden, spec.proj_dim),
        });
        projector_seeds.push(s);
    }
    Ok(ModelState { spec: spec.clone(), encoder, classifier, projectors, projector_seeds })
}

impl ModelState {
    fn check_input(&self, x: &Tensor, context: &'static str) -> Result<()> {
        if x.ndim() != 2 || x.cols() != self.spec.input_dim() {
            return Err(Error::shape(
                context,
                format!("[B, {}]", self.spec.input_dim()),
                format!("{:?}", x.shape()),
            ));
        }
        Ok(())
    }

    /// Encoder features f(x) for a `[B, input_dim]` batch.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x, "encode")?;
        let mut h = x.clone();
        for layer in &self.encoder {
            h = tensor::relu(&layer.forward(&h)?);
        }
        Ok(h)
    }

    /// Classifier logits h(f(x)).
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.classifier.forward(&self.encode(x)?)
    }

    /// Flat list of every parameter tensor, in checkpoint order.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in &self.encoder {
            out.push(&l.w);
            out.push(&l.b);
        }
        out.push(&self.classifier.w);
        out.push(&self.classifier.b);
        for p in &self.projectors {
            out.push(&p.fc1.w);
            out.push(&p.fc1.b);
            out.push(&p.fc2.w);
            out.push(&p.fc2.b);
        }
        out
    }

    /// Mutable view over the same parameters in the same order.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.encoder {
            out.push(&mut l.w);
            out.push(&mut l.b);
        }
        out.push(&mut self.classifier.w);
        out.push(&mut self.classifier.b);
        for p in &mut self.projectors {
            out.push(&mut p.fc1.w);
            out.push(&mut p.fc1.b);
            out.push(&mut p.fc2.w);
            out.push(&mut p.fc2.b);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }
}

/// Class distribution p = softmax(h(f(x))), row-stochastic `[B, C]`.
pub fn classify(state: &ModelState, x: &Tensor) -> Result<Tensor> {
    tensor::softmax_t(&state.logits(x)?, 1.0)
}

/// Raw embeddings from every projector head: P tensors of shape `[B, d_z]`.
pub fn project_all(state: &ModelState, x: &Tensor) -> Result<Vec<Tensor>> {
    let feats = state.encode(x)?;
    project_features(state, &feats)
}

/// Same as `project_all` but reusing precomputed encoder features.
pub fn project_features(state: &ModelState, feats: &Tensor) -> Result<Vec<Tensor>> {
    state
        .projectors
        .iter()
        .map(|p| p.fc2.forward(&tensor::relu(&p.fc1.forward(feats)?)))
        .collect()
}

// ---------------------------------------------------------------------------
// Taped forward passes
// ---------------------------------------------------------------------------

/// Parameter handles for one model entered on a tape, in `params()` order.
pub struct TapedModel {
    pub vars: Vec<Var>,
    encoder_len: usize,
    projectors: usize,
}

impl TapedModel {
    /// Enters every parameter of `state` as a gradient-tracked leaf.
    pub fn enter(tape: &mut GradTape, state: &ModelState) -> TapedModel {
        let vars = state.params().into_iter().map(|p| tape.param(p.clone())).collect();
        TapedModel {
            vars,
            encoder_len: state.encoder.len(),
            projectors: state.projectors.len(),
        }
    }

    fn layer(&self, idx: usize) -> (Var, Var) {
        (self.vars[2 * idx], self.vars[2 * idx + 1])
    }

    /// Encoder features for a constant input batch.
    pub fn encode(&self, tape: &mut GradTape, x: Var) -> Result<Var> {
        let mut h = x;
        for i in 0..self.encoder_len {
            let (w, b) = self.layer(i);
            h = tape.matmul(h, w)?;
            h = tape.add_row(h, b)?;
            h = tape.relu(h);
        }
        Ok(h)
    }

    /// Classifier logits from encoder features.
    pub fn logits(&self, tape: &mut GradTape, feats: Var) -> Result<Var> {
        let (w, b) = self.layer(self.encoder_len);
        let l = tape.matmul(feats, w)?;
        tape.add_row(l, b)
    }

    /// Raw embedding from projector head k.
    pub fn project(&self, tape: &mut GradTape, feats: Var, k: usize) -> Result<Var> {
        assert!(k < self.projectors, "projector index out of range");
        let base = 2 * (self.encoder_len + 1) + 4 * k;
        let h = tape.matmul(feats, self.vars[base])?;
        let h = tape.add_row(h, self.vars[base + 1])?;
        let h = tape.relu(h);
        let z = tape.matmul(h, self.vars[base + 2])?;
        tape.add_row(z, self.vars[base + 3])
    }

    /// Raw embeddings from all P heads.
    pub fn project_all(&self, tape: &mut GradTape, feats: Var) -> Result<Vec<Var>> {
        (0..self.projectors).map(|k| self.project(tape, feats, k)).collect()
    }
}

// ---------------------------------------------------------------------------
// EMA teacher
// ---------------------------------------------------------------------------

/// Shadow copy of the model updated as θ_ema ← m·θ_ema + (1−m)·θ.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaState {
    pub model: ModelState,
    pub m_ema: f64,
}

impl EmaState {
    /// Starts the shadow at the current parameters.
    pub fn new(model: &ModelState, m_ema: f64) -> Result<EmaState> {
        if !(0.0..=1.0).contains(&m_ema) {
            return Err(Error::InvalidArgument("m_ema must lie in [0, 1]"));
        }
        Ok(EmaState { model: model.clone(), m_ema })
    }
}

/// One EMA step over every parameter.
pub fn ema_update(ema: &mut EmaState, current: &ModelState) -> Result<()> {
    let m = ema.m_ema;
    let shadow = ema.model.params_mut();
    let live = current.params();
    if shadow.len() != live.len() {
        return Err(Error::shape("ema_update", format!("{} tensors", shadow.len()), format!("{}", live.len())));
    }
    for (s, l) in shadow.into_iter().zip(live) {
        if s.shape() != l.shape() {
            return Err(Error::shape("ema_update", format!("{:?}", s.shape()), format!("{:?}", l.shape())));
        }
        for (sv, &lv) in s.data_mut().iter_mut().zip(l.data()) {
            *sv = m * *sv + (1.0 - m) * lv;
        }
    }
    Ok(())
}
