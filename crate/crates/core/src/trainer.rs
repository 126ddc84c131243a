//! The joint-training loop: cosine schedule, SGD with momentum, loss
//! assembly over weak/strong views, memory bank and EMA teacher updates.
//!
//! One trainer owns all mutable state. Every step is deterministic given the
//! run seed: batches are a pure function of the step index, and all pseudo
//! targets are produced by plain (untaped) teacher passes, so no gradient
//! ever flows into them.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{BatchStream, Dataset, LabeledBatch, UnlabeledBatch};
use crate::ensemble::{self, EnsembleStrategy};
use crate::error::{Error, Result};
use crate::evalcalib::PredictionLog;
use crate::losses::{
    self, comatch_contrastive_on_tape, comatch_pseudo_graph, confidence_mask,
    distribution_align, pseudo_targets, simmatch_contrastive_on_tape,
    unsupervised_loss_on_tape, DaState, LossWeights,
};
use crate::membank::MemoryBank;
use crate::model::{
    classify, ema_update, init, project_all, EmaState, ModelState, NetworkSpec, TapedModel,
};
use crate::tape::GradTape;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    SimMatch,
    CoMatch,
}

/// Which parameters produce pseudo-labels and bank embeddings.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TeacherSource {
    #[default]
    Live,
    Ema,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub algorithm: Algorithm,
    pub strategy: EnsembleStrategy,
    pub spec: NetworkSpec,
    pub weights: LossWeights,
    pub lr0: f64,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    pub k_steps: u64,
    pub batch: usize,
    pub mu: usize,
    pub m_bank: f64,
    pub m_ema: f64,
    /// Distribution-alignment window (batches averaged for the running mean).
    pub da_window: usize,
    pub teacher: TeacherSource,
    /// One-hot pseudo-label targets when true, the aligned distribution
    /// itself when false.
    pub hard_targets: bool,
    /// FIFO bank capacity (graph-matching algorithm only).
    pub bank_capacity: usize,
    pub seed: u64,
    /// Evaluation cadence for front-ends; 0 means final evaluation only.
    pub eval_every: u64,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        RunConfig {
            algorithm: Algorithm::SimMatch,
            strategy: EnsembleStrategy::Mean,
            spec: NetworkSpec {
                // The encoder dominates the parameter budget, as it would at
                // full scale; the two extra projector heads stay under 5% of
                // the total.
                encoder_layers: vec![2, 256, 256, 256, 256, 64],
                num_classes: 2,
                proj_hidden: 64,
                proj_dim: 16,
                projectors: 3,
            },
            weights: LossWeights::default(),
            lr0: 0.03,
            sgd_momentum: 0.9,
            weight_decay: 5e-4,
            k_steps: 2000,
            batch: 16,
            mu: 4,
            m_bank: 0.9,
            m_ema: 0.999,
            da_window: 32,
            teacher: TeacherSource::Live,
            hard_targets: true,
            bank_capacity: 256,
            seed: 1,
            eval_every: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        self.weights.validate()?;
        if !self.lr0.is_finite() || self.lr0 <= 0.0 {
            return Err(Error::InvalidArgument("lr0 must be finite and positive"));
        }
        if !(0.0..1.0).contains(&self.sgd_momentum) {
            return Err(Error::InvalidArgument("sgd momentum must lie in [0, 1)"));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(Error::InvalidArgument("weight decay must be finite and >= 0"));
        }
        if self.k_steps == 0 {
            return Err(Error::InvalidArgument("k_steps must be >= 1"));
        }
        if self.batch == 0 || self.mu == 0 {
            return Err(Error::InvalidArgument("batch size and mu must be >= 1"));
        }
        for (m, what) in [(self.m_bank, "m_bank"), (self.m_ema, "m_ema")] {
            if !(0.0..=1.0).contains(&m) {
                return Err(Error::InvalidConfig(format!("{what} must lie in [0, 1]")));
            }
        }
        if self.da_window == 0 {
            return Err(Error::InvalidArgument("da_window must be >= 1"));
        }
        if self.bank_capacity == 0 {
            return Err(Error::InvalidArgument("bank_capacity must be >= 1"));
        }
        Ok(())
    }
}

/// Per-step telemetry. Wall time is excluded from equality: it is a
/// measurement, not part of the training trajectory.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss_s: f64,
    pub loss_u: f64,
    pub loss_c: f64,
    pub loss_total: f64,
    pub lr: f64,
    /// Fraction of the unlabeled batch passing the confidence threshold.
    pub pseudo_quantity: f64,
    /// Accuracy of pseudo-labels among masked rows; absent when none pass.
    pub pseudo_quality: Option<f64>,
    #[serde(skip)]
    pub wall_ms: f64,
}

impl PartialEq for StepRecord {
    fn eq(&self, o: &StepRecord) -> bool {
        self.step == o.step
            && self.loss_s == o.loss_s
            && self.loss_u == o.loss_u
            && self.loss_c == o.loss_c
            && self.loss_total == o.loss_total
            && self.lr == o.lr
            && self.pseudo_quantity == o.pseudo_quantity
            && self.pseudo_quality == o.pseudo_quality
    }
}

/// η = η0·cos(7πk / (16·K)).
pub fn cosine_lr(k: u64, k_steps: u64, lr0: f64) -> f64 {
    debug_assert!(k_steps > 0 && k <= k_steps, "schedule evaluated outside [0, K]");
    lr0 * (7.0 * std::f64::consts::PI * k as f64 / (16.0 * k_steps as f64)).cos()
}

/// One SGD-with-momentum update on a single tensor:
/// v ← momentum·v + g + weight_decay·p, then p ← p − lr·v.
pub fn sgd_update(
    param: &mut Tensor,
    velocity: &mut Tensor,
    grad: &Tensor,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if param.shape() != velocity.shape() || param.shape() != grad.shape() {
        return Err(Error::shape(
            "sgd_update",
            format!("{:?}", param.shape()),
            format!("velocity {:?}, grad {:?}", velocity.shape(), grad.shape()),
        ));
    }
    for ((p, v), &g) in param.data_mut().iter_mut().zip(velocity.data_mut()).zip(grad.iter()) {
        *v = momentum * *v + g + weight_decay * *p;
        *p -= lr * *v;
    }
    Ok(())
}

/// Optimizer state: one velocity tensor per model parameter, in
/// `ModelState::params()` order.
#[derive(Clone, Debug, PartialEq)]
pub struct SgdState {
    pub momentum: f64,
    pub weight_decay: f64,
    pub(crate) velocities: Vec<Tensor>,
}

impl SgdState {
    pub fn new(model: &ModelState, momentum: f64, weight_decay: f64) -> SgdState {
        let velocities =
            model.params().iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        SgdState { momentum, weight_decay, velocities }
    }

    pub fn velocities(&self) -> &[Tensor] {
        &self.velocities
    }

    /// Applies gradients from a backward pass. Parameters without a gradient
    /// in the graph are updated with g = 0, so weight decay and momentum
    /// still act uniformly.
    pub fn step(
        &mut self,
        model: &mut ModelState,
        grads: &crate::tape::Gradients,
        vars: &[crate::tape::Var],
        lr: f64,
    ) -> Result<()> {
        let params = model.params_mut();
        if params.len() != self.velocities.len() || params.len() != vars.len() {
            return Err(Error::shape(
                "SgdState::step",
                format!("{} tensors", self.velocities.len()),
                format!("{} params, {} vars", params.len(), vars.len()),
            ));
        }
        for ((p, v), &var) in params.into_iter().zip(&mut self.velocities).zip(vars) {
            match grads.get(var) {
                Some(g) => sgd_update(p, v, g, lr, self.momentum, self.weight_decay)?,
                None => {
                    let zero = Tensor::zeros(p.shape().to_vec());
                    sgd_update(p, v, &zero, lr, self.momentum, self.weight_decay)?;
                }
            }
        }
        Ok(())
    }
}

/// quantity = fraction of rows masked in; quality = pseudo-label accuracy
/// among masked rows, absent when the mask is empty.
pub fn pseudo_stats(p_hat_w: &Tensor, mask: &[bool], truth: &[usize]) -> (f64, Option<f64>) {
    let n = mask.len();
    let kept = mask.iter().filter(|&&m| m).count();
    if n == 0 || kept == 0 {
        return (0.0, None);
    }
    let mut correct = 0;
    for (i, &keep) in mask.iter().enumerate() {
        if !keep {
            continue;
        }
        let row = p_hat_w.row(i);
        let mut best = 0;
        for j in 1..row.len() {
            if row[j] > row[best] {
                best = j;
            }
        }
        if best == truth[i] {
            correct += 1;
        }
    }
    (kept as f64 / n as f64, Some(correct as f64 / kept as f64))
}

/// Combined, normalized ensemble embedding for a batch under a plain
/// (untaped) forward pass.
pub fn combined_embeddings(
    model: &ModelState,
    x: &Tensor,
    strategy: EnsembleStrategy,
) -> Result<Tensor> {
    let heads = project_all(model, x)?;
    ensemble::combine_rows(&heads, strategy)
}

/// Class probabilities of a dataset under the given parameters.
pub fn evaluate_model(model: &ModelState, ds: &Dataset) -> Result<PredictionLog> {
    let x = ds.to_tensor()?;
    let p = classify(model, &x)?;
    PredictionLog::new(p, ds.labels().to_vec())
}

pub struct Trainer {
    pub(crate) config: RunConfig,
    pub(crate) model: ModelState,
    pub(crate) ema: EmaState,
    pub(crate) bank: MemoryBank,
    pub(crate) da: DaState,
    pub(crate) sgd: SgdState,
    pub(crate) step: u64,
}

impl Trainer {
    /// Fresh state for a run: model from the seed, EMA shadow at the model,
    /// bank per algorithm (one slot per labeled instance, or an empty FIFO),
    /// uniform alignment target, zero velocities.
    pub fn new(config: RunConfig, labeled: &Dataset) -> Result<Trainer> {
        config.validate()?;
        if labeled.num_classes() != config.spec.num_classes {
            return Err(Error::shape(
                "Trainer::new",
                format!("{} classes", config.spec.num_classes),
                format!("{}", labeled.num_classes()),
            ));
        }
        if labeled.input_dim() != config.spec.input_dim() {
            return Err(Error::shape(
                "Trainer::new",
                format!("input dim {}", config.spec.input_dim()),
                format!("{}", labeled.input_dim()),
            ));
        }
        let model = init(&config.spec, config.seed)?;
        let ema = EmaState::new(&model, config.m_ema)?;
        let bank = match config.algorithm {
            Algorithm::SimMatch => {
                let x = labeled.to_tensor()?;
                let emb = combined_embeddings(&model, &x, config.strategy)?;
                let ids: Vec<u64> = (0..labeled.len() as u64).collect();
                MemoryBank::new_fixed(&emb, &labeled.one_hot_labels(), &ids, config.m_bank)?
            }
            Algorithm::CoMatch => {
                let dim = config
                    .strategy
                    .output_dim(config.spec.proj_dim, config.spec.projectors);
                MemoryBank::new_fifo(config.bank_capacity, dim, config.m_bank)?
            }
        };
        let da = DaState::new(config.spec.num_classes, config.da_window)?;
        let sgd = SgdState::new(&model, config.sgd_momentum, config.weight_decay);
        Ok(Trainer { config, model, ema, bank, da, sgd, step: 0 })
    }

    /// Reassembles a trainer from checkpointed state.
    pub(crate) fn from_parts(
        config: RunConfig,
        model: ModelState,
        ema: EmaState,
        bank: MemoryBank,
        da: DaState,
        sgd: SgdState,
        step: u64,
    ) -> Trainer {
        Trainer { config, model, ema, bank, da, sgd, step }
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn model(&self) -> &ModelState {
        &self.model
    }

    pub fn ema(&self) -> &EmaState {
        &self.ema
    }

    pub fn bank(&self) -> &MemoryBank {
        &self.bank
    }

    pub fn da(&self) -> &DaState {
        &self.da
    }

    pub fn sgd(&self) -> &SgdState {
        &self.sgd
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    fn teacher_model(&self) -> &ModelState {
        match self.config.teacher {
            TeacherSource::Live => &self.model,
            TeacherSource::Ema => &self.ema.model,
        }
    }

    /// One optimization step on a batch pair. Failures are tagged with the
    /// step index.
    pub fn train_step(
        &mut self,
        lb: &LabeledBatch,
        ub: &UnlabeledBatch,
    ) -> Result<StepRecord> {
        let step = self.step;
        let rec = self
            .step_inner(lb, ub)
            .map_err(|e| Error::StepFailed { step, source: Box::new(e) })?;
        self.step += 1;
        Ok(rec)
    }

    fn step_inner(&mut self, lb: &LabeledBatch, ub: &UnlabeledBatch) -> Result<StepRecord> {
        let start = Instant::now();
        let k = self.step;
        let lr = cosine_lr(k, self.config.k_steps, self.config.lr0);
        let w = self.config.weights;
        let unsupervised = w.lambda_u != 0.0 || w.lambda_c != 0.0;

        // Teacher pass: pseudo-labels, mask and weak-view embeddings, all
        // under stop-gradient (plain forwards, no tape).
        let mut quantity = 0.0;
        let mut quality = None;
        let teacher = if unsupervised {
            let teacher = self.teacher_model();
            let p_w = classify(teacher, &ub.weak)?;
            let zbar_w = if w.lambda_c != 0.0 {
                Some(combined_embeddings(teacher, &ub.weak, self.config.strategy)?)
            } else {
                None
            };
            let p_hat = distribution_align(&mut self.da, &p_w)?;
            let mask = confidence_mask(&p_hat, w.tau);
            let targets = pseudo_targets(&p_hat, self.config.hard_targets);
            let (qty, qual) = pseudo_stats(&p_hat, &mask, &ub.truth);
            quantity = qty;
            quality = qual;
            Some((p_hat, mask, targets, zbar_w))
        } else {
            None
        };

        // Student graph.
        let mut tape = GradTape::new();
        let taped = TapedModel::enter(&mut tape, &self.model);
        let x_l = tape.constant(lb.x.clone());
        let feats_l = taped.encode(&mut tape, x_l)?;
        let logits_l = taped.logits(&mut tape, feats_l)?;
        let probs_l = tape.row_softmax_t(logits_l, 1.0)?;
        let ls_var = tape.ce_mean(&lb.y, probs_l, None, lb.y.rows() as f64)?;

        let mut total_var = ls_var;
        let mut loss_u = 0.0;
        let mut loss_c = 0.0;
        if let Some((p_hat, mask, targets, zbar_w)) = &teacher {
            let mu_b = ub.weak.rows();
            let x_s = tape.constant(ub.strong.clone());
            let feats_s = taped.encode(&mut tape, x_s)?;
            if w.lambda_u != 0.0 {
                let logits_s = taped.logits(&mut tape, feats_s)?;
                let probs_s = tape.row_softmax_t(logits_s, 1.0)?;
                let lu_var = unsupervised_loss_on_tape(&mut tape, targets, mask, probs_s, mu_b)?;
                loss_u = tape.value(lu_var).item();
                total_var = tape.add_scaled(total_var, lu_var, w.lambda_u)?;
            }
            if w.lambda_c != 0.0 {
                let heads_s = taped.project_all(&mut tape, feats_s)?;
                let zbar_s = ensemble::combine_on_tape(&mut tape, &heads_s, self.config.strategy)?;
                let lc_var = match self.config.algorithm {
                    Algorithm::SimMatch => {
                        let zbar_w = zbar_w.as_ref().expect("weak embeddings computed");
                        let q_w = self.bank.similarity_rows(zbar_w, w.temperature)?;
                        let bank_matrix = self.bank.matrix()?;
                        simmatch_contrastive_on_tape(
                            &mut tape,
                            &q_w,
                            zbar_s,
                            &bank_matrix,
                            w.temperature,
                        )?
                    }
                    Algorithm::CoMatch => {
                        let x_s2 = tape.constant(ub.strong2.clone());
                        let feats_s2 = taped.encode(&mut tape, x_s2)?;
                        let heads_s2 = taped.project_all(&mut tape, feats_s2)?;
                        let zbar_s2 =
                            ensemble::combine_on_tape(&mut tape, &heads_s2, self.config.strategy)?;
                        let wq = comatch_pseudo_graph(p_hat, w.tau_c)?;
                        comatch_contrastive_on_tape(
                            &mut tape,
                            &wq,
                            zbar_s,
                            zbar_s2,
                            w.temperature,
                        )?
                    }
                };
                loss_c = tape.value(lc_var).item();
                total_var = tape.add_scaled(total_var, lc_var, w.lambda_c)?;
            }
        }

        let loss_s = tape.value(ls_var).item();
        let loss_total = tape.value(total_var).item();
        let grads = tape.backward(total_var)?;
        self.sgd.step(&mut self.model, &grads, &taped.vars, lr)?;
        ema_update(&mut self.ema, &self.model)?;

        // Bank refresh from the post-update teacher, per the loop order
        // "optimize, then update the memory bank".
        if unsupervised && w.lambda_c != 0.0 {
            let teacher = match self.config.teacher {
                TeacherSource::Live => self.model.clone(),
                TeacherSource::Ema => self.ema.model.clone(),
            };
            match self.config.algorithm {
                Algorithm::SimMatch => {
                    let zl = combined_embeddings(&teacher, &lb.x, self.config.strategy)?;
                    for (r, &idx) in lb.idx.iter().enumerate() {
                        let z = Tensor::vector(zl.row(r).to_vec())?;
                        self.bank.update(idx as u64, &z)?;
                    }
                }
                Algorithm::CoMatch => {
                    let zu = combined_embeddings(&teacher, &ub.weak, self.config.strategy)?;
                    for (r, &idx) in ub.idx.iter().enumerate() {
                        let z = Tensor::vector(zu.row(r).to_vec())?;
                        self.bank.push(idx as u64, &z)?;
                    }
                }
            }
        }

        Ok(StepRecord {
            step: k,
            loss_s,
            loss_u,
            loss_c,
            loss_total,
            lr,
            pseudo_quantity: quantity,
            pseudo_quality: quality,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }

    /// Runs up to `k_steps`, pulling batches in step order (the stream is
    /// positioned at the trainer's own step first, so resumed runs line up).
    pub fn run(&mut self, stream: &mut BatchStream) -> Result<Vec<StepRecord>> {
        stream.seek(self.step);
        let mut records = Vec::with_capacity((self.config.k_steps - self.step) as usize);
        while self.step < self.config.k_steps {
            let step = self.step;
            let (lb, ub) = stream
                .next_batch()
                .map_err(|e| Error::StepFailed { step, source: Box::new(e) })?;
            records.push(self.train_step(&lb, &ub)?);
        }
        Ok(records)
    }

    /// Predictions under the EMA teacher (the evaluation parameters).
    pub fn evaluate(&self, ds: &Dataset) -> Result<PredictionLog> {
        evaluate_model(&self.ema.model, ds)
    }

    /// Predictions under the live parameters.
    pub fn evaluate_live(&self, ds: &Dataset) -> Result<PredictionLog> {
        evaluate_model(&self.model, ds)
    }

    /// Stop-gradient teacher quantities for one unlabeled batch, computed
    /// without advancing any trainer state (the alignment window works on a
    /// copy). These are exactly the constants a training step would use at
    /// the current parameters.
    pub fn teacher_targets(&self, ub: &UnlabeledBatch) -> Result<TeacherTargets> {
        let w = self.config.weights;
        let teacher = self.teacher_model();
        let p_w = classify(teacher, &ub.weak)?;
        let mut da = self.da.clone();
        let p_hat = distribution_align(&mut da, &p_w)?;
        let mask = confidence_mask(&p_hat, w.tau);
        let targets = pseudo_targets(&p_hat, self.config.hard_targets);
        let (q_w, bank, wq) = if w.lambda_c != 0.0 {
            match self.config.algorithm {
                Algorithm::SimMatch => {
                    let zbar_w = combined_embeddings(teacher, &ub.weak, self.config.strategy)?;
                    let q_w = self.bank.similarity_rows(&zbar_w, w.temperature)?;
                    (Some(q_w), Some(self.bank.matrix()?), None)
                }
                Algorithm::CoMatch => {
                    (None, None, Some(comatch_pseudo_graph(&p_hat, w.tau_c)?))
                }
            }
        } else {
            (None, None, None)
        };
        Ok(TeacherTargets { p_hat, mask, targets, q_w, bank, wq })
    }

    /// Composite objective at the current parameters against frozen teacher
    /// targets. Holding the targets fixed makes this the exact function a
    /// step's gradient descends.
    pub fn loss_with_targets(
        &self,
        lb: &LabeledBatch,
        ub: &UnlabeledBatch,
        t: &TeacherTargets,
    ) -> Result<f64> {
        let w = self.config.weights;
        let probs_l = classify(&self.model, &lb.x)?;
        let ls = losses::supervised_loss(&lb.y, &probs_l)?;
        let mut lu = 0.0;
        let mut lc = 0.0;
        if w.lambda_u != 0.0 {
            let probs_s = classify(&self.model, &ub.strong)?;
            let (l, _) =
                losses::unsupervised_loss(&t.p_hat, &probs_s, w.tau, self.config.hard_targets)?;
            lu = l;
        }
        if w.lambda_c != 0.0 {
            let zbar_s = combined_embeddings(&self.model, &ub.strong, self.config.strategy)?;
            lc = match self.config.algorithm {
                Algorithm::SimMatch => {
                    let bank = t
                        .bank
                        .as_ref()
                        .ok_or(Error::InvalidArgument("targets lack a bank snapshot"))?;
                    let q_w = t
                        .q_w
                        .as_ref()
                        .ok_or(Error::InvalidArgument("targets lack weak similarities"))?;
                    if zbar_s.cols() != bank.cols() {
                        return Err(Error::shape(
                            "frozen bank similarity",
                            format!("[_, {}]", bank.cols()),
                            format!("[_, {}]", zbar_s.cols()),
                        ));
                    }
                    let sims = crate::tensor::matmul_nt_raw(&zbar_s, bank);
                    let q_s = crate::tensor::softmax_t(&sims, w.temperature)?;
                    losses::simmatch_contrastive(q_w, &q_s)?
                }
                Algorithm::CoMatch => {
                    let wq = t
                        .wq
                        .as_ref()
                        .ok_or(Error::InvalidArgument("targets lack a pseudo-label graph"))?;
                    let zbar_s2 =
                        combined_embeddings(&self.model, &ub.strong2, self.config.strategy)?;
                    let wz = losses::comatch_embedding_graph(&zbar_s, &zbar_s2, w.temperature)?;
                    losses::comatch_contrastive(wq, &wz)?
                }
            };
        }
        Ok(losses::total_loss(ls, lu, lc, &w))
    }
}

/// Frozen stop-gradient quantities from one teacher pass.
#[derive(Clone, Debug)]
pub struct TeacherTargets {
    /// Aligned weak-view distribution.
    pub p_hat: Tensor,
    pub mask: Vec<bool>,
    pub targets: Tensor,
    /// Weak-view similarity distribution against the bank snapshot.
    pub q_w: Option<Tensor>,
    /// Bank snapshot the similarities were computed against.
    pub bank: Option<Tensor>,
    /// Pseudo-label graph.
    pub wq: Option<Tensor>,
}
