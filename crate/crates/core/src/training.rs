//! Optimizers, masked-LM pretraining and per-relation tuning.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward, insert_adapters, ModelState, Params, TrainableSet};
use crate::numeric::{Graph, Var};
use crate::objectives::{total_loss, LossConfig, LossMode, TrainLogLine, TuneExample};
use crate::probing::stopword_ids;
use crate::world::{FactWorld, TemplateSplit, Vocab, MASK_ID};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TuneMode {
    None,
    Finetune,
    Adapter,
    Uniark,
    UniarkPara,
}

impl TuneMode {
    pub const ALL: [TuneMode; 5] = [
        TuneMode::None,
        TuneMode::Finetune,
        TuneMode::Adapter,
        TuneMode::Uniark,
        TuneMode::UniarkPara,
    ];

    pub fn trainable(self) -> TrainableSet {
        match self {
            TuneMode::None => TrainableSet::None,
            TuneMode::Finetune => TrainableSet::Finetune,
            _ => TrainableSet::Adapter,
        }
    }

    pub fn loss_mode(self) -> LossMode {
        match self {
            TuneMode::Uniark => LossMode::Uniark,
            TuneMode::UniarkPara => LossMode::UniarkPara,
            _ => LossMode::PlainMlm,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TuneMode::None => "none",
            TuneMode::Finetune => "finetune",
            TuneMode::Adapter => "adapter",
            TuneMode::Uniark => "uniark",
            TuneMode::UniarkPara => "uniark_para",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        TuneMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown tuning mode {s}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    /// Tuning learning rate; falls back to `learning_rate`.
    #[serde(default)]
    pub tune_learning_rate: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs_pretrain: usize,
    pub epochs_tune: usize,
    pub seed: u64,
    #[serde(default)]
    pub gradient_clip_norm: Option<f64>,
    pub mask_prob: f64,
    /// Bottleneck width of adapters inserted before adapter-based tuning.
    pub adapter_dim: usize,
    /// Fraction of each relation's subjects used for tuning.
    pub tune_fraction: f64,
    /// One shared tuned state for all relations instead of one per relation.
    #[serde(default)]
    pub shared_tuning: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            tune_learning_rate: None,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 16,
            epochs_pretrain: 10,
            epochs_tune: 20,
            seed: 20,
            gradient_clip_norm: Some(1.0),
            mask_prob: 0.15,
            adapter_dim: 16,
            tune_fraction: 0.5,
            shared_tuning: false,
        }
    }
}

impl TrainConfig {
    // Negated comparisons also reject NaN.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.tune_learning_rate.is_some_and(|lr| !(lr > 0.0)) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.epochs_pretrain == 0 || self.epochs_tune == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "epochs and batch_size must be at least 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.mask_prob) || self.mask_prob == 0.0 {
            return Err(Error::Config("mask_prob must be in (0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.tune_fraction) || self.tune_fraction == 0.0 {
            return Err(Error::Config("tune_fraction must be in (0, 1]".into()));
        }
        if let Some(c) = self.gradient_clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config("gradient_clip_norm must be positive".into()));
            }
        }
        Ok(())
    }

    fn tune_lr(&self) -> f64 {
        self.tune_learning_rate.unwrap_or(self.learning_rate)
    }
}

/// SGD or Adam over a masked subset of the model parameters.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    clip: Option<f64>,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(cfg: &TrainConfig, lr: f64) -> Self {
        Optimizer {
            kind: cfg.optimizer,
            lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            clip: cfg.gradient_clip_norm,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Applies one update. `grads[i]` is `None` for frozen parameters, which
    /// are left untouched.
    pub fn apply(
        &mut self,
        params: &mut Params<crate::numeric::Tensor>,
        grads: &mut [Option<Vec<f64>>],
    ) -> Result<()> {
        let mut values = params.values_mut();
        if values.len() != grads.len() {
            return Err(Error::shape(
                "optimizer",
                "gradient count differs from parameter count",
            ));
        }
        if let Some(max) = self.clip {
            let norm = grads
                .iter()
                .flatten()
                .flat_map(|g| g.iter())
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt();
            if !norm.is_finite() {
                return Err(Error::NonFinite("gradient norm"));
            }
            if norm > max {
                let s = max / norm;
                grads
                    .iter_mut()
                    .flatten()
                    .flat_map(|g| g.iter_mut())
                    .for_each(|x| *x *= s);
            }
        }
        if self.m.is_empty() {
            self.m = values.iter().map(|t| vec![0.0; t.numel()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let (bc1, bc2) = (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
        for (i, (p, g)) in values.iter_mut().zip(grads.iter()).enumerate() {
            let Some(g) = g else { continue };
            let data = p.data_mut();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (x, gi) in data.iter_mut().zip(g) {
                        *x -= self.lr * gi;
                    }
                }
                OptimizerKind::Adam => {
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    for j in 0..data.len() {
                        m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                        v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                        let mh = m[j] / bc1;
                        let vh = v[j] / bc2;
                        data[j] -= self.lr * mh / (vh.sqrt() + self.eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Builds a loss on a fresh graph, backpropagates, and applies the update
/// to the parameters in `set`.
pub fn train_step<T>(
    state: &mut ModelState,
    opt: &mut Optimizer,
    set: TrainableSet,
    build: impl FnOnce(&mut Graph<'_>, &Params<Var>) -> Result<(Var, T)>,
) -> Result<T> {
    let mask = state.trainable_mask(set)?;
    let (mut grads, out) = {
        let mut g = Graph::new();
        let vars = state.bind(&mut g, set)?;
        let (loss, out) = build(&mut g, &vars)?;
        g.backward(loss)?;
        let leaves = vars.into_values();
        let grads: Vec<Option<Vec<f64>>> = leaves
            .into_iter()
            .zip(&mask)
            .map(|(v, &m)| if m { g.take_grad(v) } else { None })
            .collect();
        (grads, out)
    };
    opt.apply(&mut state.params, &mut grads)?;
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epoch_losses: Vec<f64>,
    pub masked_tokens: usize,
    pub total_tokens: usize,
}

impl PretrainReport {
    pub fn masking_fraction(&self) -> f64 {
        self.masked_tokens as f64 / self.total_tokens.max(1) as f64
    }
}

/// Masked-LM pretraining: each token is masked with probability
/// `mask_prob`; the loss is the cross-entropy at masked positions.
pub fn pretrain(
    mut state: ModelState,
    corpus: &[Vec<usize>],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<(ModelState, PretrainReport)> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Model("empty pretraining corpus".into()));
    }
    if state.params.has_adapters() {
        return Err(Error::Model(
            "pretraining expects a model without adapters".into(),
        ));
    }
    if let Some(s) = corpus
        .iter()
        .find(|s| s.is_empty() || s.len() > state.config.max_seq_len)
    {
        return Err(Error::OutOfRange {
            what: "corpus sentence length",
            index: s.len(),
            len: state.config.max_seq_len,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(cfg, cfg.learning_rate);
    let mut report = PretrainReport::default();
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    for epoch in 0..cfg.epochs_pretrain {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut n_batches) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let mut batch: Vec<(Vec<usize>, Vec<usize>, Vec<usize>)> = Vec::new();
            for &i in chunk {
                let sentence = &corpus[i];
                report.total_tokens += sentence.len();
                let positions: Vec<usize> = (0..sentence.len())
                    .filter(|_| rng.gen::<f64>() < cfg.mask_prob)
                    .collect();
                report.masked_tokens += positions.len();
                if positions.is_empty() {
                    continue;
                }
                let targets: Vec<usize> = positions.iter().map(|&p| sentence[p]).collect();
                let mut input = sentence.clone();
                for &p in &positions {
                    input[p] = MASK_ID;
                }
                batch.push((input, positions, targets));
            }
            if batch.is_empty() {
                continue;
            }
            let model_cfg = state.config.clone();
            let loss = train_step(&mut state, &mut opt, TrainableSet::Finetune, |g, p| {
                let mut parts = Vec::with_capacity(batch.len());
                for (input, positions, targets) in &batch {
                    let logits = forward(g, p, &model_cfg, input, positions)?;
                    let lp = g.log_softmax(logits)?;
                    parts.push((g.nll(lp, targets)?, 1.0 / batch.len() as f64));
                }
                let total = g.weighted_sum(&parts)?;
                Ok((total, g.scalar(total)))
            })?;
            loss_sum += loss;
            n_batches += 1;
        }
        let mean = loss_sum / n_batches.max(1) as f64;
        report.epoch_losses.push(mean);
        on_epoch(epoch, mean);
    }
    Ok((state, report))
}

/// Mean masked-LM loss over a corpus with a fixed masking draw.
pub fn corpus_mlm_loss(
    state: &ModelState,
    corpus: &[Vec<usize>],
    mask_prob: f64,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut sum, mut n) = (0.0, 0usize);
    for sentence in corpus {
        let positions: Vec<usize> = (0..sentence.len())
            .filter(|_| rng.gen::<f64>() < mask_prob)
            .collect();
        if positions.is_empty() {
            continue;
        }
        let mut input = sentence.clone();
        for &p in &positions {
            input[p] = MASK_ID;
        }
        let logits = state.forward_mlm(&input, &positions)?;
        for (r, &p) in positions.iter().enumerate() {
            let row = logits.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            sum += lse - row[sentence[p]];
            n += 1;
        }
    }
    Ok(sum / n.max(1) as f64)
}

/// Tuned weights: one state per relation, or one shared state.
#[derive(Clone, Debug, PartialEq)]
pub struct TunedModels {
    pub mode: TuneMode,
    pub shared: Option<ModelState>,
    pub per_relation: BTreeMap<String, ModelState>,
}

impl TunedModels {
    pub fn for_relation(&self, relation_id: &str) -> Result<&ModelState> {
        self.per_relation
            .get(relation_id)
            .or(self.shared.as_ref())
            .ok_or_else(|| Error::Model(format!("no tuned model for relation {relation_id}")))
    }
}

/// Tuning examples for a relation: its tuning triples on the base template,
/// with in-domain paraphrases attached for the paraphrase KL term.
pub fn tuning_examples(
    world: &FactWorld,
    split: &TemplateSplit,
    vocab: &Vocab,
    relation_id: &str,
    loss_cfg: &LossConfig,
    train_cfg: &TrainConfig,
    max_seq_len: usize,
) -> Result<Vec<TuneExample>> {
    let relation = world
        .relation(relation_id)
        .ok_or_else(|| Error::Config(format!("unknown relation {relation_id}")))?;
    let template = split
        .tune_template(relation_id)
        .ok_or_else(|| Error::Config(format!("relation {relation_id} has no tuning template")))?;
    let paraphrases: Vec<_> = split.id_of(relation_id).collect();
    let stop = stopword_ids(relation, vocab);
    let (tune, _) = world.triple_split(relation_id, train_cfg.tune_fraction);
    tune.into_iter()
        .map(|t| {
            TuneExample::new(
                template,
                t,
                &paraphrases,
                vocab,
                stop.clone(),
                &loss_cfg.augmentation,
                max_seq_len,
            )
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn tune_on(
    mut state: ModelState,
    examples: &mut [TuneExample],
    mode: TuneMode,
    loss_cfg: &LossConfig,
    cfg: &TrainConfig,
    seed: u64,
    relation_id: Option<&str>,
    log: &mut Vec<TrainLogLine>,
) -> Result<ModelState> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = Optimizer::new(cfg, cfg.tune_lr());
    let set = mode.trainable();
    let loss_mode = mode.loss_mode();
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut step = 0;
    for _ in 0..cfg.epochs_tune {
        order.shuffle(&mut rng);
        for ex in examples.iter_mut() {
            ex.paraphrases.shuffle(&mut rng);
        }
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&TuneExample> = chunk.iter().map(|&i| &examples[i]).collect();
            let model_cfg = state.config.clone();
            let terms = train_step(&mut state, &mut opt, set, |g, p| {
                total_loss(g, p, &model_cfg, &batch, loss_cfg, loss_mode)
            })?;
            log.push(TrainLogLine {
                step,
                mode: mode.name().into(),
                relation_id: relation_id.map(str::to_string),
                loss_total: terms.total,
                loss_mlm: terms.mlm,
                entropy_bits_subject_masked: terms.entropy_bits_subject_masked,
                entropy_bits_object_masked: terms.entropy_bits_object_masked,
                loss_kld: terms.kld,
                floor_clamps: terms.floor_clamps,
            });
            step += 1;
        }
    }
    Ok(state)
}

/// Tunes `base` with `mode` on each relation's base template. Adapter-based
/// modes insert fresh adapters first; `none` returns `base` unchanged.
#[allow(clippy::too_many_arguments)]
pub fn tune(
    base: &ModelState,
    world: &FactWorld,
    split: &TemplateSplit,
    vocab: &Vocab,
    mode: TuneMode,
    loss_cfg: &LossConfig,
    cfg: &TrainConfig,
    log: &mut Vec<TrainLogLine>,
) -> Result<TunedModels> {
    cfg.validate()?;
    loss_cfg.validate()?;
    if mode == TuneMode::None {
        return Ok(TunedModels {
            mode,
            shared: Some(base.clone()),
            per_relation: BTreeMap::new(),
        });
    }
    let start = if mode.trainable() == TrainableSet::Adapter && !base.params.has_adapters() {
        insert_adapters(base.clone(), cfg.adapter_dim, cfg.seed.wrapping_add(1000))?
    } else {
        base.clone()
    };
    let max_len = start.config.max_seq_len;
    let relation_ids: Vec<String> = world
        .relations
        .iter()
        .map(|r| r.relation_id.clone())
        .collect();
    if cfg.shared_tuning {
        let mut all = Vec::new();
        for r in &relation_ids {
            all.extend(tuning_examples(
                world, split, vocab, r, loss_cfg, cfg, max_len,
            )?);
        }
        let state = tune_on(start, &mut all, mode, loss_cfg, cfg, cfg.seed, None, log)?;
        return Ok(TunedModels {
            mode,
            shared: Some(state),
            per_relation: BTreeMap::new(),
        });
    }
    let mut per_relation = BTreeMap::new();
    for (i, r) in relation_ids.iter().enumerate() {
        let mut examples = tuning_examples(world, split, vocab, r, loss_cfg, cfg, max_len)?;
        let seed = cfg.seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
        let state = tune_on(
            start.clone(),
            &mut examples,
            mode,
            loss_cfg,
            cfg,
            seed,
            Some(r),
            log,
        )?;
        per_relation.insert(r.clone(), state);
    }
    Ok(TunedModels {
        mode,
        shared: None,
        per_relation,
    })
}
