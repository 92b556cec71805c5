use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::event_data::{SourceType, UNK};
use crate::numerics::gradcheck::{check_param_gradients, Tolerance};
use crate::numerics::{gelu, sigmoid, signed_log, GeluKind};

const D: usize = 6;

fn sizes() -> VocabSizes {
    VocabSizes {
        event: 9,
        unit: 6,
        order_name: 5,
        order_desc: 5,
        age: 6,
        gender: 6,
    }
}

fn setup(seed: u64) -> (ParamStore, Embedding) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let cfg = EmbeddingConfig {
        time_freqs: 4,
        init_std: 0.5,
        ..EmbeddingConfig::default()
    };
    let emb = Embedding::new(&mut store, sizes(), D, 32, cfg, &mut rng);
    randomize(&mut store, &mut rng);
    (store, emb)
}

/// Replaces every parameter with random values so zero-initialized biases
/// do not hide mistakes.
fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v = rng.random_range(-0.8..0.8);
        }
    }
}

fn event(id: usize, value: Option<f64>, unit: usize, t: f64, pos: usize) -> EncodedEvent {
    EncodedEvent {
        event: id,
        unit,
        order_name: if id % 2 == 0 { 4 } else { PAD },
        order_desc: if id % 3 == 0 { 4 } else { PAD },
        value,
        offset_days: t,
        position: pos,
        source_type: SourceType::Chart,
    }
}

fn toy_stay(n: usize) -> EncodedStay {
    EncodedStay {
        stay_id: "s".into(),
        age: 4,
        gender: 5,
        events: (0..n)
            .map(|i| {
                let v = if i % 3 == 2 {
                    None
                } else {
                    Some(i as f64 * 7.5 - 10.0)
                };
                event(
                    4 + i % 5,
                    v,
                    if v.is_some() { 4 + i % 2 } else { PAD },
                    i as f64 * 0.05,
                    i,
                )
            })
            .collect(),
    }
}

fn row(g: &Graph, v: Var, r: usize) -> Vec<f64> {
    g.value(v).row(r).to_vec()
}

fn p(store: &ParamStore, id: ParamId) -> &[f64] {
    store.get(id).data()
}

#[test]
fn time_at_zero_is_the_projection_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let emb = Embedding::new(
        &mut store,
        sizes(),
        D,
        16,
        EmbeddingConfig::default(),
        &mut rng,
    );
    let bias: Vec<f64> = (0..D).map(|i| i as f64 * 0.1 - 0.2).collect();
    store
        .set(
            emb.time.proj_b,
            Tensor::new(vec![1, D], bias.clone()).unwrap(),
        )
        .unwrap();
    let mut g = Graph::new();
    let out = emb.embed_time(&mut g, &store, &[0.0]).unwrap();
    assert_eq!(row(&g, out, 0), bias);
}

#[test]
fn time_matches_direct_equations() {
    let (store, emb) = setup(2);
    let f = emb.config.time_freqs;
    let ts = [0.0, 0.37, 1.9, 12.5];
    let mut g = Graph::new();
    let out = emb.embed_time(&mut g, &store, &ts).unwrap();
    let t2v = &emb.time;
    for (r, &t) in ts.iter().enumerate() {
        let mut feats = vec![p(&store, t2v.w0)[0] * t + p(&store, t2v.b0)[0]];
        for k in 0..f {
            let periodic = (p(&store, t2v.w)[k] * t + p(&store, t2v.b)[k]).sin();
            assert!((-1.0..=1.0).contains(&periodic));
            feats.push(periodic);
        }
        for j in 0..D {
            let mut acc = p(&store, t2v.proj_b)[j];
            for (k, x) in feats.iter().enumerate() {
                acc += x * p(&store, t2v.proj)[k * D + j];
            }
            assert!((acc - g.value(out).get2(r, j)).abs() < 1e-12);
        }
    }
}

#[test]
fn value_zero_and_sign_symmetry() {
    let (store, emb) = setup(3);
    let mut g = Graph::new();
    let views = emb.value_views(&mut g, &store, &[0.0, 3.5, -3.5]).unwrap();
    assert_eq!(g.value(views.log_input).data()[0], 0.0);
    assert_eq!(row(&g, views.raw, 0), p(&store, emb.value.raw_b).to_vec());
    let lv = g.value(views.log_input).data();
    assert_eq!(lv[1], -lv[2]);
    for &gate in g.value(views.gates).data() {
        assert!(gate > 0.0 && gate < 1.0);
    }
}

#[test]
fn value_matches_decomposition_oracle() {
    let (store, emb) = setup(4);
    let vals = [-250.0, -1.0, 0.0, 0.3, 7.0, 1e4];
    let mut g = Graph::new();
    let views = emb.value_views(&mut g, &store, &vals).unwrap();
    let vp = &emb.value;
    for (r, &v) in vals.iter().enumerate() {
        let raw: Vec<f64> = (0..D)
            .map(|j| p(&store, vp.raw_w)[j] * v + p(&store, vp.raw_b)[j])
            .collect();
        let hidden: Vec<f64> = (0..D)
            .map(|j| {
                gelu(
                    p(&store, vp.nl_w1)[j] * v + p(&store, vp.nl_b1)[j],
                    GeluKind::Erf,
                )
            })
            .collect();
        let nl: Vec<f64> = (0..D)
            .map(|j| {
                p(&store, vp.nl_b2)[j]
                    + (0..D)
                        .map(|k| hidden[k] * p(&store, vp.nl_w2)[k * D + j])
                        .sum::<f64>()
            })
            .collect();
        let vlog = p(&store, vp.log_scale)[0] * signed_log(v, 1e-6);
        let log: Vec<f64> = (0..D)
            .map(|j| p(&store, vp.log_w)[j] * vlog + p(&store, vp.log_b)[j])
            .collect();
        let cat: Vec<f64> = nl.iter().chain(&raw).chain(&log).copied().collect();
        let gates: Vec<f64> = (0..3)
            .map(|c| {
                sigmoid(
                    p(&store, vp.gate_b)[c]
                        + (0..3 * D)
                            .map(|k| cat[k] * p(&store, vp.gate_w)[k * 3 + c])
                            .sum::<f64>(),
                )
            })
            .collect();
        let mixed: Vec<f64> = (0..D)
            .map(|j| gates[0] * nl[j] + gates[1] * raw[j] + gates[2] * log[j])
            .collect();
        let pre: Vec<f64> = (0..D)
            .map(|j| {
                p(&store, vp.out_b)[j]
                    + (0..D)
                        .map(|k| mixed[k] * p(&store, vp.out_w)[k * D + j])
                        .sum::<f64>()
            })
            .collect();
        let mean = pre.iter().sum::<f64>() / D as f64;
        let var = pre.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / D as f64;
        for j in 0..D {
            let expect = (pre[j] - mean) / (var + 1e-5).sqrt() * p(&store, vp.ln_gain)[j]
                + p(&store, vp.ln_bias)[j];
            let got = g.value(views.output).get2(r, j);
            assert!(
                (expect - got).abs() < 1e-9,
                "row {r} col {j}: {expect} vs {got}"
            );
            assert!(
                (mixed[j] - g.value(views.mixed).get2(r, j)).abs() < 1e-9 * (1.0 + mixed[j].abs())
            );
        }
    }
}

#[test]
fn value_embedding_is_continuous() {
    let (store, emb) = setup(5);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..50 {
        let v: f64 = rng.random_range(-500.0..500.0);
        let mut g = Graph::new();
        let out = emb.embed_value(&mut g, &store, &[v, v + 1e-9]).unwrap();
        let diff = row(&g, out, 0)
            .iter()
            .zip(row(&g, out, 1))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff <= 1e-6, "v={v} diff={diff}");
    }
}

#[test]
fn composition_is_the_sum_of_components() {
    let (store, emb) = setup(6);
    let stay = toy_stay(7);
    let mut g = Graph::new();
    let c = emb
        .compose_events(
            &mut g,
            &store,
            &stay.events,
            &Corruption::none(),
            AblationFlags::none(),
        )
        .unwrap();
    let sum = g.value(c.sum);
    for i in 0..sum.numel() {
        let oracle: f64 = c.components.iter().map(|&v| g.value(v).data()[i]).sum();
        assert!((oracle - sum.data()[i]).abs() < 1e-12);
    }
    // Absent unit / value / order attributes contribute zero rows.
    for (r, e) in stay.events.iter().enumerate() {
        let zero = |v: Var| row(&g, v, r).iter().all(|&x| x == 0.0);
        assert_eq!(zero(c.component(Component::Value)), e.value.is_none());
        assert_eq!(zero(c.component(Component::Unit)), e.unit == PAD);
        assert_eq!(zero(c.component(Component::OrderName)), e.order_name == PAD);
        assert_eq!(zero(c.component(Component::OrderDesc)), e.order_desc == PAD);
    }
}

#[test]
fn all_components_ablated_gives_zero() {
    let (store, emb) = setup(7);
    let stay = toy_stay(4);
    let mut g = Graph::new();
    let c = emb
        .compose_events(
            &mut g,
            &store,
            &stay.events,
            &Corruption::none(),
            AblationFlags::all(),
        )
        .unwrap();
    assert!(g.value(c.sum).data().iter().all(|&x| x == 0.0));
}

#[test]
fn ablating_one_component_removes_exactly_that_term() {
    let (store, emb) = setup(8);
    let stay = toy_stay(6);
    let mut g = Graph::new();
    let base = emb
        .compose_events(
            &mut g,
            &store,
            &stay.events,
            &Corruption::none(),
            AblationFlags::none(),
        )
        .unwrap();
    for c in Component::ABLATABLE {
        let abl = emb
            .compose_events(
                &mut g,
                &store,
                &stay.events,
                &Corruption::none(),
                AblationFlags::only(c),
            )
            .unwrap();
        let a = g.value(abl.sum).data();
        let b = g.value(base.sum).data();
        let comp = g.value(base.component(c)).data();
        for i in 0..a.len() {
            assert!((b[i] - comp[i] - a[i]).abs() < 1e-12, "{c:?}");
        }
    }
}

#[test]
fn position_ablation_is_shift_invariant() {
    let (store, emb) = setup(9);
    let stay = toy_stay(5);
    let mut shifted = stay.clone();
    for e in &mut shifted.events {
        e.position += 7;
    }
    let flags = AblationFlags::only(Component::Position);
    let mut g = Graph::new();
    let a = emb
        .compose_events(&mut g, &store, &stay.events, &Corruption::none(), flags)
        .unwrap();
    let b = emb
        .compose_events(&mut g, &store, &shifted.events, &Corruption::none(), flags)
        .unwrap();
    assert_eq!(g.value(a.sum), g.value(b.sum));
}

#[test]
fn assembly_shapes_and_masks() {
    let (store, emb) = setup(10);
    let mut g = Graph::new();
    let empty = emb
        .assemble_sequence(
            &mut g,
            &store,
            &toy_stay(0),
            &Corruption::none(),
            AblationFlags::none(),
            None,
        )
        .unwrap();
    assert_eq!(g.shape(empty.x), [3, D]);

    let five = emb
        .assemble_sequence(
            &mut g,
            &store,
            &toy_stay(5),
            &Corruption::none(),
            AblationFlags::none(),
            None,
        )
        .unwrap();
    assert_eq!(g.shape(five.x), [8, D]);
    assert_eq!(five.global.iter().filter(|&&x| x).count(), 3);
    assert!(five.global[..3].iter().all(|&x| x));

    let padded = emb
        .assemble_sequence(
            &mut g,
            &store,
            &toy_stay(5),
            &Corruption::none(),
            AblationFlags::none(),
            Some(10),
        )
        .unwrap();
    assert_eq!(g.shape(padded.x), [10, D]);
    assert_eq!(padded.valid.iter().filter(|&&x| x).count(), 8);
    assert!(row(&g, padded.x, 9).iter().all(|&x| x == 0.0));
    assert_eq!(&g.value(padded.x).data()[..8 * D], g.value(five.x).data());

    // Rows 0..2 are the [CLS], age and gender table rows.
    assert_eq!(row(&g, five.x, 0), store.get(emb.event).row(CLS).to_vec());
    assert_eq!(row(&g, five.x, 1), store.get(emb.age).row(4).to_vec());
    assert_eq!(row(&g, five.x, 2), store.get(emb.gender).row(5).to_vec());
}

#[test]
fn over_length_is_an_error() {
    let (store, emb) = setup(11);
    let mut g = Graph::new();
    let stay = toy_stay(30);
    assert!(matches!(
        emb.assemble_sequence(
            &mut g,
            &store,
            &stay,
            &Corruption::none(),
            AblationFlags::none(),
            None
        ),
        Err(EmbeddingError::TooLong { len: 33, max: 32 })
    ));
}

#[test]
fn unknown_tokens_embed_like_any_row() {
    let (store, emb) = setup(12);
    let mut stay = toy_stay(2);
    stay.events[0].event = UNK;
    let mut g = Graph::new();
    let c = emb
        .compose_events(
            &mut g,
            &store,
            &stay.events,
            &Corruption::none(),
            AblationFlags::none(),
        )
        .unwrap();
    assert_eq!(
        row(&g, c.component(Component::Event), 0),
        store.get(emb.event).row(UNK).to_vec()
    );
}

#[test]
fn mep_mask_replaces_six_components_and_keeps_position() {
    let (store, emb) = setup(13);
    let stay = toy_stay(6);
    let mut corruption = Corruption::none();
    corruption.mep = vec![false, false, true, false, false, false];
    corruption.vp = vec![false, true, false, false, false, false];
    let mut g = Graph::new();
    let clean = emb
        .compose_events(
            &mut g,
            &store,
            &stay.events,
            &Corruption::none(),
            AblationFlags::none(),
        )
        .unwrap();
    let masked = emb
        .compose_events(
            &mut g,
            &store,
            &stay.events,
            &corruption,
            AblationFlags::none(),
        )
        .unwrap();
    let mask_row = |table: ParamId| store.get(table).row(MASK).to_vec();
    let r = 2;
    assert_eq!(
        row(&g, masked.component(Component::Event), r),
        mask_row(emb.event)
    );
    assert_eq!(
        row(&g, masked.component(Component::Unit), r),
        mask_row(emb.unit)
    );
    assert_eq!(
        row(&g, masked.component(Component::OrderName), r),
        mask_row(emb.order_name)
    );
    assert_eq!(
        row(&g, masked.component(Component::OrderDesc), r),
        mask_row(emb.order_desc)
    );
    assert_eq!(
        row(&g, masked.component(Component::Value), r),
        p(&store, emb.mask_value).to_vec()
    );
    assert_eq!(
        row(&g, masked.component(Component::Time), r),
        p(&store, emb.mask_time).to_vec()
    );
    assert_eq!(
        row(&g, masked.component(Component::Position), r),
        row(&g, clean.component(Component::Position), r)
    );
    // VP row: only the value component differs.
    for c in Component::ALL {
        let same = row(&g, masked.component(c), 1) == row(&g, clean.component(c), 1);
        assert_eq!(same, c != Component::Value, "{c:?}");
    }
    // Untouched rows are identical.
    for r in [0, 3, 4, 5] {
        assert_eq!(row(&g, masked.sum, r), row(&g, clean.sum, r));
    }
}

#[test]
fn embedding_gradients_match_finite_differences() {
    let (store, emb) = setup(14);
    let stay = toy_stay(5);
    let corruption = Corruption {
        mep: vec![false, true, false, false, false],
        vp: vec![true, false, false, false, false],
    };
    let report = check_param_gradients(
        &store,
        |g, s| {
            let seq = emb
                .assemble_sequence(g, s, &stay, &corruption, AblationFlags::none(), Some(9))
                .map_err(|e| match e {
                    EmbeddingError::Numerics(n) => n,
                    other => NumericsError::InvalidArgument(other.to_string()),
                })?;
            let w = g.constant(Tensor::from_fn(&[9, D], |i| {
                ((i * 7) % 11) as f64 / 11.0 - 0.4
            }));
            let prod = g.mul(seq.x, w)?;
            let sq = g.mul(prod, prod)?;
            g.sum(sq)
        },
        1e-5,
        Tolerance::default(),
        None,
        Some((6, 3)),
    )
    .unwrap();
    assert!(
        report.passed(),
        "{:?}",
        &report.failures[..report.failures.len().min(5)]
    );
    assert!(report.checked > 100);
}
