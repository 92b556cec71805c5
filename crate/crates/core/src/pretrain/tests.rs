use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::embedding::{AblationFlags, Component, VocabSizes};
use crate::encoder::EncoderConfig;
use crate::event_data::{MASK, PAD};
use crate::model::{ModelConfig, PulseModel};

const V: usize = 12;

fn tiny_model(seed: u64) -> PulseModel {
    PulseModel::new(ModelConfig {
        vocab: VocabSizes {
            event: V,
            unit: 6,
            order_name: 6,
            order_desc: 6,
            age: 6,
            gender: 6,
        },
        embedding: Default::default(),
        encoder: EncoderConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 8,
            d_ff: 16,
            window: 4,
            max_tokens: 64,
            ..EncoderConfig::desk()
        },
        seed,
    })
    .unwrap()
}

fn random_stay(rng: &mut impl Rng, id: &str, n: usize) -> EncodedStay {
    let mut t = 0.0;
    let events = (0..n)
        .map(|i| {
            t += rng.random_range(0.0..0.05);
            let st = SourceType::ALL[rng.random_range(0..3)];
            let ev = rng.random_range(4..V);
            let value =
                (st == SourceType::Chart && ev % 2 == 0).then(|| rng.random_range(-5.0..50.0));
            EncodedEvent {
                event: ev,
                unit: if value.is_some() { 4 } else { PAD },
                order_name: if st == SourceType::Input { 5 } else { PAD },
                order_desc: PAD,
                value,
                offset_days: t,
                position: i,
                source_type: st,
            }
        })
        .collect();
    EncodedStay {
        stay_id: id.into(),
        age: 4,
        gender: 5,
        events,
    }
}

fn planner(cfg: MaskingConfig) -> MaskPlanner {
    // Even event ids are the value-prediction variables.
    MaskPlanner::from_ids(cfg, (4..V).filter(|i| i % 2 == 0)).unwrap()
}

#[test]
fn mask_count_rounds_half_up() {
    assert_eq!(mask_count(0.3, 10), 3);
    assert_eq!(mask_count(0.3, 5), 2);
    assert_eq!(mask_count(0.15, 10), 2);
    assert_eq!(mask_count(0.2, 2), 0);
    assert_eq!(mask_count(0.3, 0), 0);
    assert_eq!(mask_count(1.0, 7), 7);
}

#[test]
fn labels_round_trip() {
    for label in SWEEP_LABELS {
        let cfg = MaskingConfig::from_label(label).unwrap();
        assert_eq!(cfg.label(), label);
    }
    let cfg = MaskingConfig::from_label("30/15/30/05").unwrap();
    assert_eq!(cfg.ratio(SourceType::Chart), 0.15);
    assert_eq!(cfg.vp_ratio, 0.05);
    assert!(MaskingConfig::from_label("30/30/30").is_err());
    assert!(MaskingConfig::from_label("30/30/130/05").is_err());
}

proptest! {
    #[test]
    fn plans_have_exact_counts_and_disjoint_sets(seed in 0u64..1000, n in 0usize..60, m in 0u8..=10, c in 0u8..=10, vp in 0u8..=10) {
        let cfg = MaskingConfig {
            ratio_medication: m as f64 / 10.0,
            ratio_chart: c as f64 / 10.0,
            ratio_procedure: 0.3,
            vp_ratio: vp as f64 / 10.0,
            ..MaskingConfig::default()
        };
        let p = planner(cfg.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stay = random_stay(&mut rng, "s", n);
        let plan = p.select_masks(&stay.events, &mut rng);
        let counts = plan.counts_by_type(&stay.events);
        for st in SourceType::ALL {
            let n_t = stay.events.iter().filter(|e| e.source_type == st).count();
            let expect = (cfg.ratio(st) * n_t as f64 + 0.5 + 1e-9).floor() as usize;
            prop_assert_eq!(counts[st.index()], expect);
        }
        for i in 0..n {
            prop_assert!(!(plan.mep[i] && plan.vp[i]));
            if plan.vp[i] {
                prop_assert!(stay.events[i].value.is_some());
                prop_assert!(p.is_vp_variable(stay.events[i].event));
            }
        }
        if cfg.vp_ratio == 0.0 {
            prop_assert_eq!(plan.n_vp(), 0);
        }
        if cfg.vp_ratio == 1.0 {
            let eligible = (0..n)
                .filter(|&i| !plan.mep[i] && stay.events[i].value.is_some() && p.is_vp_variable(stay.events[i].event))
                .count();
            prop_assert_eq!(plan.n_vp(), eligible);
        }
    }
}

#[test]
fn plans_depend_only_on_seed_stay_and_epoch() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let stay = random_stay(&mut rng, "stay-7", 80);
    let p = planner(MaskingConfig::default());
    assert_eq!(p.plan_for(&stay, 2), p.plan_for(&stay, 2));
    assert_ne!(p.plan_for(&stay, 2), p.plan_for(&stay, 3));
    let other = planner(MaskingConfig {
        seed: 1,
        ..MaskingConfig::default()
    });
    assert_ne!(p.plan_for(&stay, 2), other.plan_for(&stay, 2));
}

#[test]
fn all_zero_ratios_give_empty_plans() {
    let cfg = MaskingConfig::from_label("00/00/00/00").unwrap();
    assert!(cfg.mep_disabled());
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let stay = random_stay(&mut rng, "s", 40);
    let plan = planner(cfg).plan_for(&stay, 0);
    assert_eq!(plan.n_masked() + plan.n_vp(), 0);
}

#[test]
fn masked_events_swap_six_components_and_keep_position() {
    let model = tiny_model(1);
    let emb = &model.embedding;
    let store = &model.store;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let stay = random_stay(&mut rng, "s", 30);
    let plan = planner(MaskingConfig {
        vp_ratio: 0.5,
        ..MaskingConfig::default()
    })
    .plan_for(&stay, 0);
    assert!(plan.n_masked() > 0 && plan.n_vp() > 0);

    let mut g = Graph::new();
    let clean = emb
        .compose_events(
            &mut g,
            store,
            &stay.events,
            &Corruption::none(),
            AblationFlags::none(),
        )
        .unwrap();
    let masked = emb
        .compose_events(
            &mut g,
            store,
            &stay.events,
            &plan.corruption(),
            AblationFlags::none(),
        )
        .unwrap();
    let d = model.d_model();
    let row = |v: Var, r: usize| g.value(v).row(r).to_vec();
    let table_row = |id: ParamId, r: usize| store.get(id).data()[r * d..(r + 1) * d].to_vec();
    for i in 0..stay.events.len() {
        let pos = Component::Position;
        assert_eq!(row(masked.component(pos), i), row(clean.component(pos), i));
        if plan.mep[i] {
            assert_eq!(
                row(masked.component(Component::Event), i),
                table_row(emb.event, MASK)
            );
            assert_eq!(
                row(masked.component(Component::Unit), i),
                table_row(emb.unit, MASK)
            );
            assert_eq!(
                row(masked.component(Component::OrderName), i),
                table_row(emb.order_name, MASK)
            );
            assert_eq!(
                row(masked.component(Component::OrderDesc), i),
                table_row(emb.order_desc, MASK)
            );
            assert_eq!(
                row(masked.component(Component::Value), i),
                store.get(emb.mask_value).data()
            );
            assert_eq!(
                row(masked.component(Component::Time), i),
                store.get(emb.mask_time).data()
            );
        } else if plan.vp[i] {
            assert_eq!(
                row(masked.component(Component::Value), i),
                store.get(emb.mask_value).data()
            );
            for c in [
                Component::Event,
                Component::Unit,
                Component::Time,
                Component::OrderName,
            ] {
                assert_eq!(row(masked.component(c), i), row(clean.component(c), i));
            }
        } else {
            for c in Component::ALL {
                assert_eq!(
                    row(masked.component(c), i),
                    row(clean.component(c), i),
                    "{c:?} of event {i}"
                );
            }
        }
    }
}

#[test]
fn targets_address_token_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let stay = random_stay(&mut rng, "s", 20);
    let mut plan = MaskPlan::empty(20);
    plan.mep[0] = true;
    plan.mep[7] = true;
    let vi = stay.events.iter().position(|e| e.value.is_some()).unwrap();
    if !plan.mep[vi] {
        plan.vp[vi] = true;
    }
    let t = MaskedTargets::new(&stay, &plan).unwrap();
    assert_eq!(t.mep_rows[..2], [3, 10]);
    assert_eq!(
        t.mep_targets[..2],
        [stay.events[0].event, stay.events[7].event]
    );
    if plan.vp[vi] {
        assert_eq!(t.vp_rows, vec![vi + 3]);
        assert_eq!(t.vp_targets, vec![stay.events[vi].value.unwrap()]);
    }
    plan.vp[0] = true;
    assert!(MaskedTargets::new(&stay, &plan).is_err());
    assert!(MaskedTargets::new(&stay, &MaskPlan::empty(3)).is_err());
}

#[test]
fn loss_values_match_hand_computation() {
    let logits = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 0.0, 0.0, 0.0]).unwrap();
    let lse0 = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln();
    let expect = ((lse0 - 1.0) + 3f64.ln()) / 2.0;
    assert!((mep_loss(&logits, &[0, 2]).value - expect).abs() < 1e-12);
    assert!(mep_loss(&logits, &[]).empty);

    let vp = vp_loss(&[1.0, 4.0], &[0.0, 2.0]);
    assert_eq!(vp.value, 2.5);
    assert_eq!(vp_loss(&[], &[]).value, 0.0);
    assert_eq!(total_loss(1.25, 2.5, 0.001), 1.25 + 0.0025);
}

#[test]
fn precision_counts_argmax_per_type() {
    let logits = Tensor::new(
        vec![4, 3],
        vec![0.0, 5.0, 1.0, 2.0, 2.0, 0.0, 0.0, 0.0, 9.0, 1.0, 0.0, 0.0],
    )
    .unwrap();
    let types = [
        SourceType::Chart,
        SourceType::Chart,
        SourceType::Input,
        SourceType::Procedure,
    ];
    // Row 1 ties between 0 and 1; the first index wins.
    let c = masked_precision(&logits, &[1, 1, 2, 2], &types);
    assert_eq!(c.correct, [1, 1, 0]);
    assert_eq!(c.total, [1, 2, 1]);
    assert_eq!(c.per_type(SourceType::Chart), Some(0.5));
    assert_eq!(c.per_type(SourceType::Procedure), Some(0.0));
    assert_eq!(c.overall(), Some(0.5));
    assert_eq!(PrecisionCounts::default().overall(), None);
}

fn graph_loss(
    model: &PulseModel,
    stay: &EncodedStay,
    plan: &MaskPlan,
    lambda: f64,
) -> (f64, SampleLoss, Graph) {
    let heads = model.pretrain_heads.unwrap();
    let totals = BatchTotals {
        mep: plan.n_masked().max(1),
        vp: plan.n_vp().max(1),
    };
    let mut g = Graph::new();
    let s = sample_loss(&mut g, model, &heads, stay, plan, totals, lambda).unwrap();
    (g.value(s.loss).data()[0], s, g)
}

#[test]
fn sample_loss_is_mep_plus_weighted_vp() {
    let mut model = tiny_model(2);
    model.add_pretrain_heads();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let stay = random_stay(&mut rng, "s", 40);
    let plan = planner(MaskingConfig {
        vp_ratio: 0.6,
        ..MaskingConfig::default()
    })
    .plan_for(&stay, 0);
    assert!(plan.n_vp() > 0);
    let (loss, s, _) = graph_loss(&model, &stay, &plan, 0.001);
    let mep = mep_loss(
        s.logits.as_ref().unwrap(),
        &MaskedTargets::new(&stay, &plan).unwrap().mep_targets,
    )
    .value;
    let t = MaskedTargets::new(&stay, &plan).unwrap();
    let vp = vp_loss(s.preds.as_ref().unwrap().data(), &t.vp_targets).value;
    assert!((loss - total_loss(mep, vp, 0.001)).abs() <= 1e-12 * loss.abs().max(1.0));
    assert!((s.mep_sum / plan.n_masked() as f64 - mep).abs() < 1e-12);
}

#[test]
fn initial_mep_loss_is_near_log_vocab() {
    let mut model = tiny_model(3);
    model.add_pretrain_heads();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let stay = random_stay(&mut rng, "s", 40);
    let plan = planner(MaskingConfig {
        vp_ratio: 0.0,
        ..MaskingConfig::default()
    })
    .plan_for(&stay, 0);
    let (loss, ..) = graph_loss(&model, &stay, &plan, 0.001);
    assert!(
        (loss - (V as f64).ln()).abs() < 0.1,
        "loss {loss} vs ln V {}",
        (V as f64).ln()
    );
}

#[test]
fn vp_head_gradient_is_linear_in_lambda() {
    let mut model = tiny_model(4);
    let heads = model.add_pretrain_heads();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let stay = random_stay(&mut rng, "s", 40);
    let plan = planner(MaskingConfig {
        vp_ratio: 0.8,
        ..MaskingConfig::default()
    })
    .plan_for(&stay, 0);
    let grad = |lambda: f64| {
        let (_, s, g) = graph_loss(&model, &stay, &plan, lambda);
        let grads = g.backward(s.loss).unwrap();
        let vp_w: Vec<f64> = grads
            .params()
            .find(|(id, _)| *id == heads.vp_w)
            .map(|(_, gr)| gr.to_vec())
            .unwrap();
        vp_w
    };
    let (a, b) = (grad(0.001), grad(0.004));
    assert!(a.iter().any(|&x| x != 0.0));
    for (x, y) in a.iter().zip(&b) {
        assert!((4.0 * x - y).abs() <= 1e-9 * y.abs().max(1e-12));
    }
}

fn cohort(n: usize, seed: u64) -> Vec<EncodedStay> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| random_stay(&mut rng, &format!("s{i}"), 25))
        .collect()
}

#[test]
fn pretraining_runs_and_is_deterministic() {
    let stays = cohort(10, 10);
    let p = planner(MaskingConfig {
        vp_ratio: 0.2,
        ..MaskingConfig::default()
    });
    let cfg = PretrainConfig {
        epochs: 3,
        batch_size: 4,
        lr: 1e-3,
        validation_fraction: 0.2,
        ..PretrainConfig::default()
    };
    let run = || {
        let mut model = tiny_model(5);
        let out = pretrain(&mut model, &stays, &p, &cfg).unwrap();
        (model, out)
    };
    let (m1, o1) = run();
    let (m2, o2) = run();
    assert!(m1.store.bit_identical(&m2.store));
    assert_eq!(o1.history, o2.history);
    assert_eq!(o1.history.len(), 3);
    assert_eq!((o1.n_train, o1.n_val), (8, 2));
    for e in &o1.history {
        assert!(e.train.total(cfg.vp_weight).is_finite());
        assert!(e.val.is_some());
    }
    let mut csv = Vec::new();
    write_pretrain_csv(&o1, &mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert_eq!(text.lines().next().unwrap(), PRETRAIN_CSV_HEADER);
}

#[test]
fn pretraining_lowers_training_loss() {
    let stays = cohort(6, 11);
    let p = planner(MaskingConfig::default());
    let cfg = PretrainConfig {
        epochs: 15,
        batch_size: 6,
        lr: 3e-3,
        validation_fraction: 0.0,
        ..PretrainConfig::default()
    };
    let mut model = tiny_model(6);
    let out = pretrain(&mut model, &stays, &p, &cfg).unwrap();
    let first = out.history[0].train.mep();
    let last = out.history.last().unwrap().train.mep();
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn pretraining_rejects_empty_input() {
    let mut model = tiny_model(7);
    let p = planner(MaskingConfig::default());
    assert!(matches!(
        pretrain(&mut model, &[], &p, &PretrainConfig::default()),
        Err(Error::EmptyData(_))
    ));
}
