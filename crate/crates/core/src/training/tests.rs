use super::*;
use crate::distill::align_evaluations;

fn tiny() -> RunConfig {
    let mut c = RunConfig::default();
    c.model.d_llm = 16;
    c.model.n_layers = 2;
    c.model.n_heads = 2;
    c.model.d_teacher = 8;
    c.model.align_layer = 2;
    c.model.lambda = 0.1;
    c.teacher.dim = 8;
    c.train.batch_size = 4;
    c.train.lora_rank = 2;
    c.train.lora_alpha = 4.0;
    c
}

fn params(m: &Model<f32>) -> Vec<(String, Tensor<f32>)> {
    m.store.snapshot()
}

#[test]
fn one_step_lowers_loss_on_same_batch() {
    let mut t = Trainer::new(tiny()).unwrap();
    let batch = t.next_batch().unwrap();
    let mut cfg = t.cfg.train;
    cfg.lr = 1e-3;
    let before = train_step::<WithDistill>(&mut t.model, &mut t.opt, &batch, &cfg, 0).unwrap();
    let mut probe = t.clone();
    let after = train_step::<WithDistill>(&mut probe.model, &mut probe.opt, &batch, &cfg, 1).unwrap();
    assert!(after.loss.l_total < before.loss.l_total);
    assert!((before.loss.l_total - (before.loss.l_vla + 0.1 * before.loss.l_distill)).abs() < 1e-5);
}

#[test]
fn zero_lambda_matches_compiled_out_path() {
    let mut c = tiny();
    c.model.lambda = 0.0;
    let mut a = Trainer::new(c).unwrap();
    let mut b = a.clone();
    for _ in 0..5 {
        let sa = a.step_with::<WithDistill>().unwrap();
        let sb = b.step_with::<NoDistill>().unwrap();
        assert_eq!(sa.loss.l_vla.to_bits(), sb.loss.l_vla.to_bits());
        assert_eq!(sa.grad_norm.to_bits(), sb.grad_norm.to_bits());
    }
    for ((_, x), (_, y)) in params(&a.model).iter().zip(&params(&b.model)) {
        assert!(x.bitwise_eq(y));
    }
}

#[test]
fn stage_two_trains_only_the_adapted_set() {
    let c = tiny();
    let mut pre = Trainer::new(c).unwrap();
    pre.run(3, None, None).unwrap();
    let mut c2 = c;
    c2.train = TrainConfig {
        batch_size: 4,
        lora_rank: 2,
        lora_alpha: 4.0,
        ..TrainConfig::posttrain()
    };
    let mut post = Trainer::posttrain(pre.model.clone(), c2).unwrap();
    let m = &c.model;
    let (d, dt, k) = (m.d_llm, m.d_teacher, m.action_codebook);
    let want = m.n_layers * 4 * 2 * (d + d) + (k * d + k) + (dt * d + dt + dt * dt + dt);
    assert_eq!(post.model.store.trainable_count(), want);

    let before = params(&post.model);
    let teacher = post.teacher.clone();
    post.run(10, None, None).unwrap();
    for ((name, x), (_, y)) in before.iter().zip(&params(&post.model)) {
        let moved = !x.bitwise_eq(y);
        let expect = name.starts_with("lora.") || name.starts_with("head.") || name.starts_with("align.");
        assert_eq!(moved, expect, "{name}");
    }
    assert_eq!(post.teacher, teacher);
    assert!(Trainer::posttrain(pre.model, c).is_err());
}

#[test]
fn resume_is_bitwise() {
    let c = tiny();
    let mut full = Trainer::new(c).unwrap();
    full.run(6, None, None).unwrap();
    let mut half = Trainer::new(c).unwrap();
    half.run(3, None, None).unwrap();
    let bytes = half.checkpoint().encode().unwrap();
    let ck = Checkpoint::decode(&bytes).unwrap();
    let mut resumed = Trainer::from_checkpoint(&ck).unwrap();
    assert_eq!(resumed.checkpoint().encode().unwrap(), bytes);
    resumed.run(6, None, None).unwrap();
    assert_eq!(
        resumed.checkpoint().encode().unwrap(),
        full.checkpoint().encode().unwrap()
    );
}

#[test]
fn posttrain_checkpoint_restores_adapters() {
    let c = tiny();
    let pre = Trainer::new(c).unwrap();
    let mut c2 = c;
    c2.train.stage = Stage::Posttrain;
    let mut post = Trainer::posttrain(pre.model, c2).unwrap();
    post.run(2, None, None).unwrap();
    let ck = post.checkpoint();
    let m = model_from_checkpoint(&ck).unwrap();
    assert!(m.lora.is_some());
    assert_eq!(m.param_names(), post.model.param_names());
    let mut broken = ck.clone();
    broken.records.retain(|r| r.name != "head.w");
    assert!(matches!(model_from_checkpoint(&broken), Err(GladError::Format { .. })));
}

#[test]
fn nan_loss_reports_step() {
    let mut t = Trainer::new(tiny()).unwrap();
    t.run(2, None, None).unwrap();
    let n = t.model.store.get(t.model.ids.head.b).value.len();
    t.model.assign("head.b", Tensor::full(&[n], f32::NAN)).unwrap();
    match t.step() {
        Err(GladError::Numeric(m)) => assert!(m.contains("step 2"), "{m}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn early_fusion_never_aligns() {
    let mut c = tiny();
    c.model.fusion = FusionMode::EarlyWeighted;
    let mut t = Trainer::new(c).unwrap();
    let gate = t.model.store.get(t.model.ids.fusion.unwrap().1).value.clone();
    let before = align_evaluations();
    let s = t.step().unwrap();
    t.step().unwrap();
    assert_eq!(align_evaluations(), before);
    assert_eq!(s.loss.l_distill, 0.0);
    assert_eq!(s.loss.l_total, s.loss.l_vla);
    assert!(!t.model.store.get(t.model.ids.fusion.unwrap().1).value.bitwise_eq(&gate));
    let mut b = t.model.clone();
    let batch = t.next_batch().unwrap();
    assert!(pretrain_step(&mut b, &mut t.opt.clone(), &batch, &c.train, 0).is_err());
}

#[test]
fn fixed_dataset_cycles_in_order() {
    let mut c = tiny();
    c.train.dataset_size = 6;
    let mut t = Trainer::new(c).unwrap();
    assert_eq!(t.dataset().len(), 6);
    let first = t.next_batch().unwrap();
    t.step = 3;
    let again = t.next_batch().unwrap();
    // step 3 with batch 4 starts at sample 12 mod 6 = 0
    assert_eq!(first.inputs.instructions, again.inputs.instructions);
    assert_eq!(first.targets, again.targets);
}

#[test]
fn metrics_are_appended_with_one_header() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.csv");
    let mut t = Trainer::new(tiny()).unwrap();
    {
        let mut log = MetricsLog::open(&p).unwrap();
        t.run(2, Some(&mut log), None).unwrap();
    }
    {
        let mut log = MetricsLog::open(&p).unwrap();
        t.run(3, Some(&mut log), None).unwrap();
    }
    let text = std::fs::read_to_string(&p).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], METRICS_HEADER);
    assert_eq!(lines.len(), 4);
    assert!(lines[3].starts_with("3,"));
    assert_eq!(lines[1].split(',').count(), 5);
}

#[test]
fn toy_objective_gradients_match_finite_differences() {
    let r = gradcheck_objective(&gradcheck_config(), 1e-5).unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
    assert!(r.coordinates > 10_000);
}
