use uniark::checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
use uniark::config::{paper_mini, smoke, ExperimentConfig};
use uniark::model::{init_model, ModelState, ParamGroup, TrainableSet};
use uniark::objectives::LossConfig;
use uniark::pipeline::{generate, pretrain_base, WorldBundle};
use uniark::training::{
    corpus_mlm_loss, pretrain, tune, Optimizer, OptimizerKind, TrainConfig, TuneMode,
};

fn smoke_setup() -> (ExperimentConfig, WorldBundle, ModelState) {
    let cfg = smoke();
    let bundle = generate(&cfg).unwrap();
    let (state, _) = pretrain_base(&cfg, &bundle, |_, _| {}).unwrap();
    (cfg, bundle, state)
}

fn base_params(state: &ModelState) -> Vec<(String, Vec<f64>)> {
    state
        .named_parameters()
        .into_iter()
        .filter(|(_, g, _)| *g == ParamGroup::Base)
        .map(|(n, _, t)| (n, t.data().to_vec()))
        .collect()
}

fn run_tune(
    cfg: &ExperimentConfig,
    bundle: &WorldBundle,
    base: &ModelState,
    mode: TuneMode,
) -> uniark::training::TunedModels {
    let mut log = Vec::new();
    tune(
        base,
        &bundle.world,
        &bundle.split,
        &bundle.vocab,
        mode,
        &cfg.loss,
        &cfg.train,
        &mut log,
    )
    .unwrap()
}

#[test]
fn pretraining_on_the_default_world_reduces_loss() {
    let mut cfg = paper_mini();
    cfg.model.d_model = 16;
    cfg.model.n_heads = 2;
    cfg.model.n_layers = 1;
    cfg.model.ffn_width = 32;
    cfg.train.epochs_pretrain = 2;
    cfg.train.adapter_dim = 4;
    let bundle = generate(&cfg).unwrap();
    let corpus = bundle.encoded_corpus().unwrap();
    let init = init_model(
        &cfg.model.model_config(bundle.vocab.len()),
        cfg.model.init_seed,
    )
    .unwrap();
    let before = corpus_mlm_loss(&init, &corpus, 0.15, 1).unwrap();
    let mut epochs = Vec::new();
    let (state, report) = pretrain_base(&cfg, &bundle, |e, l| epochs.push((e, l))).unwrap();
    let after = corpus_mlm_loss(&state, &corpus, 0.15, 1).unwrap();
    assert!(after < before, "{after} !< {before}");
    assert_eq!(report.epoch_losses.len(), 2);
    assert_eq!(epochs.len(), 2);
    assert!(report.epoch_losses[1] < report.epoch_losses[0]);
    // 1% of the target rate.
    let frac = report.masking_fraction();
    assert!((frac - 0.15).abs() <= 0.0015, "masking fraction {frac}");
}

#[test]
fn pretraining_is_deterministic_and_rejects_empty_corpus() {
    let cfg = smoke();
    let bundle = generate(&cfg).unwrap();
    let (a, ra) = pretrain_base(&cfg, &bundle, |_, _| {}).unwrap();
    let (b, rb) = pretrain_base(&cfg, &bundle, |_, _| {}).unwrap();
    assert_eq!(a, b);
    assert_eq!(ra, rb);
    let init = init_model(&cfg.model.model_config(bundle.vocab.len()), 1).unwrap();
    assert!(pretrain(init, &[], &cfg.train, |_, _| {}).is_err());
}

#[test]
fn mode_none_returns_the_input() {
    let (cfg, bundle, base) = smoke_setup();
    let tuned = run_tune(&cfg, &bundle, &base, TuneMode::None);
    for r in &bundle.world.relations {
        assert_eq!(tuned.for_relation(&r.relation_id).unwrap(), &base);
    }
}

#[test]
fn adapter_modes_freeze_the_base() {
    let (mut cfg, bundle, base) = smoke_setup();
    cfg.train.epochs_tune = 3;
    let before = base_params(&base);
    for mode in [TuneMode::Adapter, TuneMode::Uniark, TuneMode::UniarkPara] {
        let tuned = run_tune(&cfg, &bundle, &base, mode);
        for r in &bundle.world.relations {
            let s = tuned.for_relation(&r.relation_id).unwrap();
            assert!(s.params.has_adapters());
            assert_eq!(base_params(s), before, "{mode:?} {}", r.relation_id);
            assert_ne!(
                s.params.layers[0]
                    .attn_adapter
                    .as_ref()
                    .unwrap()
                    .up
                    .data()
                    .iter()
                    .map(|x| x.abs())
                    .sum::<f64>(),
                0.0
            );
        }
    }
    let tuned = run_tune(&cfg, &bundle, &base, TuneMode::Finetune);
    let s = tuned
        .for_relation(&bundle.world.relations[0].relation_id)
        .unwrap();
    assert!(!s.params.has_adapters());
    assert_ne!(base_params(s), before);
}

#[test]
fn uniark_tuning_lowers_the_mlm_loss() {
    let (mut cfg, bundle, base) = smoke_setup();
    cfg.train.epochs_tune = 60;
    cfg.train.tune_learning_rate = Some(1e-2);
    let mut log = Vec::new();
    tune(
        &base,
        &bundle.world,
        &bundle.split,
        &bundle.vocab,
        TuneMode::Uniark,
        &cfg.loss,
        &cfg.train,
        &mut log,
    )
    .unwrap();
    let r0 = &bundle.world.relations[0].relation_id;
    let lines: Vec<_> = log
        .iter()
        .filter(|l| l.relation_id.as_deref() == Some(r0))
        .collect();
    let first = lines.first().unwrap();
    let last = lines.last().unwrap();
    assert_eq!(first.step, 0);
    assert!(
        last.loss_mlm < first.loss_mlm,
        "{} !< {}",
        last.loss_mlm,
        first.loss_mlm
    );
    assert!(first.entropy_bits_subject_masked.is_some());
    let json = serde_json::to_value(first).unwrap();
    for key in [
        "step",
        "mode",
        "loss_total",
        "loss_mlm",
        "entropy_bits_subject_masked",
        "entropy_bits_object_masked",
        "loss_kld",
    ] {
        assert!(json.get(key).is_some(), "{key}");
    }
}

#[test]
fn tuning_is_deterministic() {
    let (cfg, bundle, base) = smoke_setup();
    let a = run_tune(&cfg, &bundle, &base, TuneMode::Uniark);
    let b = run_tune(&cfg, &bundle, &base, TuneMode::Uniark);
    assert_eq!(a.per_relation, b.per_relation);
    let other = TrainConfig {
        seed: 30,
        ..cfg.train.clone()
    };
    let mut log = Vec::new();
    let c = tune(
        &base,
        &bundle.world,
        &bundle.split,
        &bundle.vocab,
        TuneMode::Uniark,
        &LossConfig::default(),
        &other,
        &mut log,
    )
    .unwrap();
    assert_ne!(a.per_relation, c.per_relation);
}

#[test]
fn zero_gradient_step_is_a_no_op() {
    let (_, _, base) = smoke_setup();
    for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
        let cfg = TrainConfig {
            optimizer: kind,
            ..TrainConfig::default()
        };
        let mut opt = Optimizer::new(&cfg, 0.1);
        let mut params = base.params.clone();
        let mut grads: Vec<Option<Vec<f64>>> = params
            .values_mut()
            .iter()
            .map(|t| Some(vec![0.0; t.numel()]))
            .collect();
        opt.apply(&mut params, &mut grads).unwrap();
        assert_eq!(params, base.params, "{kind:?}");
    }
}

#[test]
fn checkpoint_round_trip_preserves_forward() {
    let (cfg, bundle, base) = smoke_setup();
    let tuned = run_tune(&cfg, &bundle, &base, TuneMode::Adapter);
    let state = tuned
        .for_relation(&bundle.world.relations[0].relation_id)
        .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.ck");
    save_checkpoint(
        &path,
        state,
        "adapter",
        TrainableSet::Adapter,
        serde_json::json!({"relation_id": "R0"}),
    )
    .unwrap();
    let (header, loaded) = load_checkpoint(&path).unwrap();
    assert_eq!(header.mode, "adapter");
    assert_eq!(header.seed, state.seed);
    assert_eq!(header.trainable, TrainableSet::Adapter);
    let tokens = [4, 1, 6, 7];
    assert_eq!(
        state.forward_mlm(&tokens, &[1]).unwrap().data(),
        loaded.forward_mlm(&tokens, &[1]).unwrap().data()
    );

    let mut bytes = encode_checkpoint(
        state,
        "adapter",
        TrainableSet::Adapter,
        serde_json::Value::Null,
    )
    .unwrap();
    bytes[8] = 9;
    let err = decode_checkpoint(&bytes).unwrap_err().to_string();
    assert!(err.contains("checksum"), "{err}");
    assert!(load_checkpoint(&dir.path().join("missing.ck")).is_err());
}
