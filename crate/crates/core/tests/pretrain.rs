use semvlp_core::encoder::config::{EncoderConfig, MASK};
use semvlp_core::encoder::*;
use semvlp_core::optim::{Adam, AdamConfig};
use semvlp_core::pretrain::*;
use semvlp_core::seed;
use semvlp_core::synthworld::{build_corpus, Corpus, Vocab};
use semvlp_core::tensor::{finite_diff_grad, relative_error, Graph, Tensor};

fn corpus() -> Corpus {
    build_corpus(60, [1.0, 0.0, 0.0], 3).unwrap()
}

fn tiny() -> (SharedParams, PretrainHeads) {
    let mut p = SharedParams::init(&EncoderConfig::tiny(Vocab::standard().len()), &mut seed::rng(0)).unwrap();
    let h = PretrainHeads::ensure(&mut p, 16, 16, &mut seed::rng(1)).unwrap();
    (p, h)
}

fn zero_head(p: &mut SharedParams, ids: &[semvlp_core::params::ParamId]) {
    for id in ids {
        p.store.get_mut(*id).data_mut().fill(0.0);
    }
}

#[test]
fn token_mask_counts_and_determinism() {
    let t = TextInput::from_words(&(10..30).collect::<Vec<_>>());
    let (m, tg) = mask_tokens(&t, 0.15, 49, 7).unwrap();
    assert_eq!(tg.positions.len(), 3);
    for (&p, &o) in tg.positions.iter().zip(&tg.originals) {
        assert_eq!(t.token_ids[p], o);
    }
    let (_, tg0) = mask_tokens(&t, 0.0, 49, 7).unwrap();
    assert_eq!(tg0.positions.len(), 1);
    assert_eq!(mask_tokens(&t, 0.15, 49, 7).unwrap(), (m, tg.clone()));
    let distinct = (0..20)
        .map(|s| mask_tokens(&t, 0.15, 49, 100 + s).unwrap().1.positions)
        .collect::<std::collections::HashSet<_>>();
    assert!(distinct.len() > 10);
}

#[test]
fn replacement_rule_frequencies() {
    let t = TextInput::from_words(&[10; 20]);
    let (mut masked, mut random, mut kept) = (0, 0, 0);
    for s in 0..3000 {
        let (m, tg) = mask_tokens(&t, 0.15, 49, s).unwrap();
        for &p in &tg.positions {
            match m.token_ids[p] {
                MASK => masked += 1,
                10 => kept += 1,
                _ => random += 1,
            }
        }
    }
    let n = (masked + random + kept) as f64;
    assert!((masked as f64 / n - 0.8).abs() < 0.02);
    // Random draws can land on the original id (1 in 45).
    assert!((random as f64 / n - 0.1 * 44.0 / 45.0).abs() < 0.015);
    assert!((kept as f64 / n - (0.1 + 0.1 / 45.0)).abs() < 0.015);
}

#[test]
fn object_masking() {
    let c = corpus();
    let rec = c.train.iter().find(|r| r.objects.len() == 6).unwrap();
    let (m, tg) = mask_objects(&rec.objects, 0.15, 3).unwrap();
    assert_eq!(tg.indices.len(), 1);
    let j = tg.indices[0];
    assert!(m.features[j].iter().all(|&v| v == 0.0));
    assert_eq!(m.boxes, rec.objects.boxes);
    assert_eq!(tg.features[0], rec.objects.features[j]);
    assert_eq!(tg.labels[0], rec.objects.detector_labels[j]);
    assert_eq!(mask_objects(&rec.objects, 0.15, 3).unwrap(), (m, tg));
    let mut empty = rec.objects.clone();
    empty.features.clear();
    empty.boxes.clear();
    empty.detector_labels.clear();
    assert!(mask_objects(&empty, 0.15, 0).is_err());
}

#[test]
fn itm_sampling_halves_and_gates() {
    let c = corpus();
    let sources: Vec<_> = c.train[..8].iter().map(|r| (r, TextKind::Fine)).collect();
    let pairs = sample_itm(&sources, &c.train, 5).unwrap();
    assert_eq!(pairs.iter().filter(|p| p.matched).count(), 4);
    for (p, (r, _)) in pairs.iter().zip(&sources) {
        if !p.matched {
            assert_ne!(p.text.token_ids, r.fine.token_ids);
        } else {
            assert_eq!(p.text, r.fine);
        }
    }
    let batch = mask_pairs(pairs, 0.15, 0.15, 49, 1).unwrap();
    for e in &batch.examples {
        assert_eq!(e.mlm.active, e.matched);
        assert_eq!(e.obj.active, e.matched);
        assert!(!e.mlm.positions.is_empty());
    }
    assert!(sample_itm(&sources[..1], &c.train, 5).is_err());
    assert!(sample_itm(&sources[..3], &c.train, 5).is_err());
}

#[test]
fn mismatched_questions_lose_qa() {
    let c = corpus();
    let sources: Vec<_> = c.train[..10].iter().map(|r| (r, TextKind::Question)).collect();
    for p in sample_itm(&sources, &c.train, 2).unwrap() {
        assert_eq!(p.qa_answer.is_some(), p.matched);
    }
}

#[test]
fn uniform_and_saturated_losses() {
    let (mut p, h) = tiny();
    zero_head(
        &mut p,
        &[h.mlm.weight, h.mlm.bias, h.object.label.weight, h.object.label.bias],
    );
    zero_head(&mut p, &h.itm.ids());
    zero_head(&mut p, &h.qa.ids());
    let g = Graph::new();
    let rows = g.constant(Tensor::from_rows(&[vec![0.3; 16], vec![-0.2; 16], vec![1.0; 16]]).unwrap());
    let targets = MlmTargets {
        positions: vec![0, 2],
        originals: vec![5, 9],
        active: true,
    };
    let mlm = mlm_loss(&g, &p, &h.mlm, &[(rows, &targets)]).unwrap().unwrap();
    assert!((mlm.item() - (49f64).ln()).abs() < 1e-12);

    let obj_t = ObjectTargets {
        indices: vec![1],
        features: vec![vec![0.5; 16]],
        labels: vec![3],
        active: true,
    };
    // Regression head preloaded with the exact target.
    p.store.get_mut(h.object.roi.weight).data_mut().fill(0.0);
    p.store.get_mut(h.object.roi.bias).data_mut().fill(0.5);
    let (roi, label) = object_loss(&g, &p, &h.object, &[(rows, &obj_t)]).unwrap().unwrap();
    assert_eq!(roi.item(), 0.0);
    assert!((label.item() - 16f64.ln()).abs() < 1e-12);
    // Residual 0.5 on every coordinate: smooth-L1 gives 0.125.
    // Parameter leaves are cached per graph.
    p.store.get_mut(h.object.roi.bias).data_mut().fill(0.0);
    let g2 = Graph::new();
    let rows2 = g2.constant(rows.value());
    let (roi, _) = object_loss(&g2, &p, &h.object, &[(rows2, &obj_t)]).unwrap().unwrap();
    assert!((roi.item() - 0.125).abs() < 1e-15);

    let pooled = rows.slice_rows(0, 2).unwrap();
    let itm = itm_loss(&g, &p, &h.itm, pooled, &[true, false]).unwrap();
    assert!((itm.item() - 2f64.ln()).abs() < 1e-12);
    let qa = qa_loss(&g, &p, &h.qa, pooled, &[3, 15]).unwrap();
    assert!((qa.item() - 16f64.ln()).abs() < 1e-12);
    assert!(qa_loss(&g, &p, &h.qa, pooled, &[3, 16]).is_err());

    // One-hot logits scaled by 1e3 saturate the softmax.
    let w = p.store.get_mut(h.mlm.weight);
    w.data_mut()[5] = 1e3;
    w.data_mut()[49 + 9] = 1e3;
    let g = Graph::new();
    let onehots =
        g.constant(Tensor::from_rows(&[[vec![1.0], vec![0.0; 15]].concat(), [vec![0.0, 1.0], vec![0.0; 14]].concat()]).unwrap());
    let t = MlmTargets {
        positions: vec![0, 1],
        originals: vec![5, 9],
        active: true,
    };
    assert!(mlm_loss(&g, &p, &h.mlm, &[(onehots, &t)]).unwrap().unwrap().item() < 1e-6);

    let inert = MlmTargets { active: false, ..t };
    assert!(mlm_loss(&g, &p, &h.mlm, &[(onehots, &inert)]).unwrap().is_none());
}

#[test]
fn itm_label_flip_symmetry() {
    let (mut p, h) = tiny();
    let g = Graph::new();
    let pooled = g.constant(Tensor::from_rows(&[vec![0.4; 16], vec![-0.1; 16]]).unwrap());
    let a = itm_loss(&g, &p, &h.itm, pooled, &[true, false]).unwrap().item();
    // Negating the logit difference: swap the two output columns.
    let w = p.store.get(h.itm.out.weight).to_rows();
    let swapped: Vec<Vec<f64>> = w.iter().map(|r| vec![r[1], r[0]]).collect();
    *p.store.get_mut(h.itm.out.weight) = Tensor::from_rows(&swapped).unwrap();
    let b = p.store.get(h.itm.out.bias).data().to_vec();
    *p.store.get_mut(h.itm.out.bias) = Tensor::vector(vec![b[1], b[0]]);
    let g2 = Graph::new();
    let pooled2 = g2.constant(pooled.value());
    let flipped = itm_loss(&g2, &p, &h.itm, pooled2, &[false, true]).unwrap().item();
    assert!((a - flipped).abs() < 1e-15);
}

fn head_gradcheck(name: &str, loss: impl Fn(&SharedParams, &Graph) -> f64, id: semvlp_core::params::ParamId, p: &SharedParams) {
    let g = Graph::new();
    let _ = loss(p, &g);
    let numeric = finite_diff_grad(
        |x| {
            let mut q = p.clone();
            *q.store.get_mut(id) = x.clone();
            loss(&q, &Graph::new())
        },
        p.store.get(id),
        1e-5,
    );
    // Analytic gradient from a fresh tape.
    let g = Graph::new();
    let analytic = {
        let v = loss_var(name, p, &g);
        g.backward(v).unwrap().get(id).unwrap().clone()
    };
    for (a, n) in analytic.data().iter().zip(numeric.data()) {
        assert!(relative_error(*a, *n, 1e-5) < 1e-4, "{name}: {a} vs {n}");
    }
}

fn fixture_rows(g: &Graph) -> semvlp_core::tensor::Var<'_> {
    let mut rng = seed::rng(4);
    use rand::Rng;
    let rows: Vec<Vec<f64>> = (0..3)
        .map(|_| (0..16).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    g.constant(Tensor::from_rows(&rows).unwrap())
}

fn loss_var<'g>(name: &str, p: &SharedParams, g: &'g Graph) -> semvlp_core::tensor::Var<'g> {
    let h = PretrainHeads::ensure(&mut p.clone(), 16, 16, &mut seed::rng(1)).unwrap();
    let rows = fixture_rows(g);
    match name {
        "mlm" => {
            let t = MlmTargets {
                positions: vec![0, 2],
                originals: vec![5, 40],
                active: true,
            };
            mlm_loss(g, p, &h.mlm, &[(rows, &t)]).unwrap().unwrap()
        }
        "itm" => itm_loss(g, p, &h.itm, rows, &[true, false, true]).unwrap(),
        _ => qa_loss(g, p, &h.qa, rows, &[1, 7, 15]).unwrap(),
    }
}

#[test]
fn head_gradients_match_finite_differences() {
    let (p, h) = tiny();
    for (name, id) in [
        ("mlm", h.mlm.weight),
        ("itm", h.itm.hidden.weight),
        ("itm", h.itm.out.weight),
        ("qa", h.qa.hidden.weight),
        ("qa", h.qa.out.bias),
    ] {
        head_gradcheck(name, |q, g| loss_var(name, q, g).item(), id, &p);
    }
}

#[test]
fn schedule_alternates() {
    assert_eq!(schedule_mode(0), Mode::SingleStream);
    assert_eq!(schedule_mode(1), Mode::TwoStream);
    let singles = (0..100).filter(|&s| schedule_mode(s) == Mode::SingleStream).count();
    assert_eq!(singles, 50);
    for k in 0..50u64 {
        let start = k * 7;
        let w = (start..start + 20).filter(|&s| schedule_mode(s) == Mode::TwoStream).count();
        assert_eq!(w, 10);
    }
    assert_eq!(ModeMix::SingleOnly.mode_at(3), Mode::SingleStream);
    assert_eq!(ModeMix::TwoOnly.mode_at(4), Mode::TwoStream);
}

fn batch(c: &Corpus, seed: u64) -> PretrainBatch {
    let mut cfg = PretrainConfig::desk();
    cfg.batch_size = 8;
    sample_batch(&c.train, &cfg, c.vocab.len(), seed, 0).unwrap()
}

#[test]
fn cross_attention_gradients_only_in_two_stream() {
    let c = corpus();
    let (p, h) = tiny();
    let b = batch(&c, 1);
    let cross = p.layout.layers[1].cross_attn.as_ref().unwrap().q_w;
    for mode in Mode::BOTH {
        let g = Graph::new();
        let terms = batch_losses(&g, &p, &h, &b, mode, &mut Dropout::off()).unwrap();
        let grads = g.backward(terms.total).unwrap();
        let touched = grads.get(cross).is_some_and(|t| t.data().iter().any(|&v| v != 0.0));
        assert_eq!(touched, mode == Mode::TwoStream, "{mode}");
    }
}

#[test]
fn total_is_exact_sum_of_enabled() {
    let c = corpus();
    let (mut p, h) = tiny();
    let mut adam = Adam::new(AdamConfig::new(1e-3, 10)).unwrap();
    for step in 0..4 {
        let r = train_step(&mut p, &h, &mut adam, &batch(&c, step), step).unwrap();
        let mut sum = 0.0;
        for v in r.enabled() {
            sum += v;
        }
        assert_eq!(r.total - sum, 0.0);
        assert_eq!(r.mode, schedule_mode(step));
    }
}

#[test]
fn batch_without_questions_disables_qa() {
    let c = corpus();
    let (p, h) = tiny();
    let sources: Vec<_> = c.train[..8].iter().map(|r| (r, TextKind::Coarse)).collect();
    let b = mask_pairs(sample_itm(&sources, &c.train, 1).unwrap(), 0.15, 0.15, 49, 2).unwrap();
    let g = Graph::new();
    let terms = batch_losses(&g, &p, &h, &b, Mode::SingleStream, &mut Dropout::off()).unwrap();
    let r = terms.report();
    assert!(r.qa.is_none());
    assert_eq!(r.total, r.mlm.unwrap() + r.roi.unwrap() + r.label.unwrap() + r.itm.unwrap());
}

#[test]
fn all_mismatched_batch_gates_mlm_and_object_heads() {
    let c = corpus();
    let (p, h) = tiny();
    let mut b = batch(&c, 3);
    let mut sources: Vec<_> = c.train[..8].iter().map(|r| (r, TextKind::Fine)).collect();
    sources.extend(c.train[8..16].iter().map(|r| (r, TextKind::Fine)));
    let pairs: Vec<ItmPair> = sample_itm(&sources, &c.train, 9)
        .unwrap()
        .into_iter()
        .filter(|p| !p.matched)
        .collect();
    b.examples = mask_pairs(pairs, 0.15, 0.15, 49, 4).unwrap().examples;
    assert_eq!(b.num_matched(), 0);
    for mode in Mode::BOTH {
        let g = Graph::new();
        let terms = batch_losses(&g, &p, &h, &b, mode, &mut Dropout::off()).unwrap();
        let grads = g.backward(terms.total).unwrap();
        for id in [
            h.mlm.weight,
            h.mlm.bias,
            h.object.roi.weight,
            h.object.roi.bias,
            h.object.label.weight,
            h.object.label.bias,
        ] {
            assert!(grads.get(id).is_none_or(|t| t.data().iter().all(|&v| v == 0.0)));
        }
        assert!(grads.get(h.itm.out.weight).is_some());
    }
}

#[test]
fn fifty_steps_reproduce_bitwise() {
    let c = corpus();
    let run = || {
        let mut p = SharedParams::init(&EncoderConfig::tiny(c.vocab.len()), &mut seed::rng(0)).unwrap();
        let mut cfg = PretrainConfig::desk();
        cfg.steps = 50;
        cfg.batch_size = 4;
        let mut t = Pretrainer::new(&mut p, cfg, 16, 16, 77).unwrap();
        let mut totals = Vec::new();
        t.run(&mut p, &c.train, |r| {
            totals.push(r.losses.total.to_bits());
            Ok(())
        })
        .unwrap();
        totals
    };
    assert_eq!(run(), run());
}

#[test]
fn loss_decreases_on_tiny_corpus() {
    let c = build_corpus(200, [1.0, 0.0, 0.0], 0).unwrap();
    let mut p = SharedParams::init(&EncoderConfig::desk(c.vocab.len()), &mut seed::rng(0)).unwrap();
    let mut cfg = PretrainConfig::desk();
    cfg.steps = 1000;
    cfg.batch_size = 4;
    cfg.optimizer.total_steps = 1000;
    let mut t = Pretrainer::new(&mut p, cfg, 16, 16, 0).unwrap();
    let mut totals = Vec::new();
    t.run(&mut p, &c.train, |r| {
        totals.push(r.losses.total);
        Ok(())
    })
    .unwrap();
    let first = totals[..100].iter().sum::<f64>() / 100.0;
    let last = totals[900..].iter().sum::<f64>() / 100.0;
    assert!(last < first, "first {first} last {last}");
}
