//! In-memory pipeline stages shared by the command line and the tests.

use std::collections::BTreeMap;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::evaluation::{build_report, MetricsReport, Provenance};
use crate::model::{init_model, ModelState};
use crate::objectives::{LossConfig, TrainLogLine};
use crate::probing::{
    aggregate_augmented, augment_prompts, build_prompt, predict_at, PredictionRecord, Prompt,
    Variant,
};
use crate::training::{pretrain, tune, PretrainReport, TrainConfig, TuneMode, TunedModels};
use crate::world::{
    generate_world, render_pretraining_corpus, split_templates, FactWorld, TemplateSplit, Vocab,
};

/// A generated world with its derived artifacts.
#[derive(Clone, Debug)]
pub struct WorldBundle {
    pub world: FactWorld,
    pub split: TemplateSplit,
    pub vocab: Vocab,
    pub corpus: Vec<Vec<String>>,
}

impl WorldBundle {
    pub fn from_world(world: FactWorld, corpus: Vec<Vec<String>>) -> Result<Self> {
        let split = split_templates(&world)?;
        let vocab = Vocab::from_world(&world);
        Ok(WorldBundle {
            world,
            split,
            vocab,
            corpus,
        })
    }

    pub fn encoded_corpus(&self) -> Result<Vec<Vec<usize>>> {
        self.corpus
            .iter()
            .map(|l| self.vocab.encode_tokens(l))
            .collect()
    }
}

pub fn generate(cfg: &ExperimentConfig) -> Result<WorldBundle> {
    cfg.validate()?;
    let world = generate_world(&cfg.world)?;
    let corpus = render_pretraining_corpus(&world, &cfg.world)?;
    WorldBundle::from_world(world, corpus)
}

pub fn pretrain_base(
    cfg: &ExperimentConfig,
    bundle: &WorldBundle,
    on_epoch: impl FnMut(usize, f64),
) -> Result<(ModelState, PretrainReport)> {
    let model_cfg = cfg.model.model_config(bundle.vocab.len());
    let state = init_model(&model_cfg, cfg.model.init_seed)?;
    let train = TrainConfig {
        seed: cfg.pretrain_seed,
        ..cfg.train.clone()
    };
    pretrain(state, &bundle.encoded_corpus()?, &train, on_epoch)
}

pub fn tune_seed(
    cfg: &ExperimentConfig,
    base: &ModelState,
    bundle: &WorldBundle,
    mode: TuneMode,
    seed: u64,
) -> Result<(TunedModels, Vec<TrainLogLine>)> {
    let train = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let mut log = Vec::new();
    let tuned = tune(
        base,
        &bundle.world,
        &bundle.split,
        &bundle.vocab,
        mode,
        &cfg.loss,
        &train,
        &mut log,
    )?;
    Ok((tuned, log))
}

/// Which records `probe` emits besides the ones the report needs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ProbeVariants {
    pub prefixed: bool,
    pub both_masked: bool,
}

impl ProbeVariants {
    pub fn parse(list: &str) -> Result<Self> {
        let mut v = ProbeVariants::default();
        for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match item {
                "original" | "subject_masked" => {}
                "true_prefix" | "false_prefix" => v.prefixed = true,
                "both_masked" => v.both_masked = true,
                other => return Err(Error::Config(format!("unknown variant {other}"))),
            }
        }
        Ok(v)
    }
}

fn uses_augmentation(mode: TuneMode, loss: &LossConfig) -> bool {
    matches!(mode, TuneMode::Uniark | TuneMode::UniarkPara) && !loss.augmentation.is_disabled()
}

/// Final distribution plus the raw, true- and false-prefixed parts when
/// augmentation produced it.
type Prediction = (Vec<f64>, Option<[Vec<f64>; 3]>);

/// Object distribution the tuned model predicts for an original prompt:
/// the augmented combination for augmentation-trained modes, raw otherwise.
fn prediction(
    state: &ModelState,
    prompt: &Prompt,
    bundle: &WorldBundle,
    augment: bool,
    loss: &LossConfig,
) -> Result<Prediction> {
    if !augment {
        let d = predict_at(state, &prompt.token_ids, &[prompt.object_mask_position])?.remove(0);
        return Ok((d, None));
    }
    let prompts = augment_prompts(
        prompt,
        &loss.augmentation,
        &bundle.vocab,
        state.config.max_seq_len,
    )?;
    let mut dists: Vec<Vec<f64>> = Vec::with_capacity(3);
    for p in &prompts {
        dists.push(predict_at(state, &p.token_ids, &[p.object_mask_position])?.remove(0));
    }
    let agg = aggregate_augmented([&dists[0], &dists[1], &dists[2]], &loss.augmentation)?;
    let [a, b, c]: [Vec<f64>; 3] = dists.try_into().expect("three distributions");
    Ok((agg, Some([a, b, c])))
}

/// Predictions for every held-out triple: base-template original and
/// subject-masked records (with full distributions) and original records on
/// every paraphrase.
pub fn probe(
    cfg: &ExperimentConfig,
    tuned: &TunedModels,
    bundle: &WorldBundle,
    variants: &ProbeVariants,
) -> Result<Vec<PredictionRecord>> {
    let augment = uses_augmentation(tuned.mode, &cfg.loss);
    let k = cfg.probe.record_top_k;
    let vocab = &bundle.vocab;
    let mut out = Vec::new();
    for rel in &bundle.world.relations {
        let r = rel.relation_id.as_str();
        let state = tuned.for_relation(r)?;
        let base = bundle
            .split
            .tune_template(r)
            .ok_or_else(|| Error::Config(format!("relation {r} has no base template")))?;
        let mut templates = vec![base];
        templates.extend(bundle.split.id_of(r));
        templates.extend(bundle.split.ood_of(r));
        let (_, eval) = bundle.world.triple_split(r, cfg.train.tune_fraction);
        for triple in eval {
            for t in &templates {
                let is_base = t.template_id == base.template_id;
                let prompt = build_prompt(t, triple, Variant::Original, vocab)?;
                let (dist, parts) = prediction(state, &prompt, bundle, augment, &cfg.loss)?;
                out.push(PredictionRecord::new(
                    &prompt,
                    Variant::Original,
                    &dist,
                    vocab,
                    k,
                    is_base,
                )?);
                if !is_base {
                    continue;
                }
                let masked = build_prompt(t, triple, Variant::SubjectMasked, vocab)?;
                let md =
                    predict_at(state, &masked.token_ids, &[masked.object_mask_position])?.remove(0);
                out.push(PredictionRecord::new(
                    &masked,
                    Variant::SubjectMasked,
                    &md,
                    vocab,
                    k,
                    true,
                )?);
                if variants.prefixed {
                    let [_, tp, fp] = augment_prompts(
                        &prompt,
                        &cfg.loss.augmentation,
                        vocab,
                        state.config.max_seq_len,
                    )?;
                    let [_, td, fd] = match parts {
                        Some(p) => p,
                        None => {
                            let td = predict_at(state, &tp.token_ids, &[tp.object_mask_position])?
                                .remove(0);
                            let fd = predict_at(state, &fp.token_ids, &[fp.object_mask_position])?
                                .remove(0);
                            [Vec::new(), td, fd]
                        }
                    };
                    out.push(PredictionRecord::new(
                        &tp,
                        Variant::TruePrefix,
                        &td,
                        vocab,
                        k,
                        false,
                    )?);
                    out.push(PredictionRecord::new(
                        &fp,
                        Variant::FalsePrefix,
                        &fd,
                        vocab,
                        k,
                        false,
                    )?);
                }
                if variants.both_masked {
                    let both = build_prompt(t, triple, Variant::BothMasked, vocab)?;
                    let d =
                        predict_at(state, &both.token_ids, &[both.object_mask_position])?.remove(0);
                    out.push(PredictionRecord::new(
                        &both,
                        Variant::BothMasked,
                        &d,
                        vocab,
                        k,
                        false,
                    )?);
                }
            }
        }
    }
    Ok(out)
}

pub fn provenance(cfg: &ExperimentConfig, mode: TuneMode, seeds: Vec<u64>) -> Provenance {
    Provenance {
        config_hash: cfg.hash(),
        seeds,
        mode: mode.name().into(),
        settings: serde_json::json!({
            "train": cfg.train,
            "loss": cfg.loss,
            "pretrain_seed": cfg.pretrain_seed,
        }),
    }
}

pub fn evaluate(
    cfg: &ExperimentConfig,
    bundle: &WorldBundle,
    records: &[PredictionRecord],
    provenance: Provenance,
) -> Result<MetricsReport> {
    build_report(records, &bundle.world, &bundle.split, &cfg.eval, provenance)
}

/// One mode at one seed, end to end from a pretrained base.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub mode: TuneMode,
    pub seed: u64,
    pub records: Vec<PredictionRecord>,
    pub report: MetricsReport,
    pub log: Vec<TrainLogLine>,
}

pub fn run_mode(
    cfg: &ExperimentConfig,
    base: &ModelState,
    bundle: &WorldBundle,
    mode: TuneMode,
    seed: u64,
) -> Result<RunResult> {
    let (tuned, log) = tune_seed(cfg, base, bundle, mode, seed)?;
    let records = probe(cfg, &tuned, bundle, &ProbeVariants::default())?;
    let report = evaluate(cfg, bundle, &records, provenance(cfg, mode, vec![seed]))?;
    Ok(RunResult {
        mode,
        seed,
        records,
        report,
        log,
    })
}

/// Runs every mode at every configured seed from one pretrained base.
pub fn run_all(
    cfg: &ExperimentConfig,
    base: &ModelState,
    bundle: &WorldBundle,
    modes: &[TuneMode],
) -> Result<BTreeMap<(TuneMode, u64), RunResult>> {
    let mut out = BTreeMap::new();
    for &mode in modes {
        for &seed in &cfg.seeds {
            out.insert((mode, seed), run_mode(cfg, base, bundle, mode, seed)?);
        }
    }
    Ok(out)
}
