use std::path::PathBuf;

use semvlp_core::encoder::config::EncoderConfig;
use semvlp_core::encoder::*;
use semvlp_core::finetune::*;
use semvlp_core::seed;
use semvlp_core::synthworld::oracle::scene_similarity;
use semvlp_core::synthworld::{build_corpus, gen_nlvr, Corpus, Vocab};
use semvlp_core::tensor::{finite_diff_grad, relative_error, Graph, Tensor};

fn corpus() -> Corpus {
    build_corpus(80, [0.75, 0.25, 0.0], 11).unwrap()
}

fn tiny(s: u64) -> SharedParams {
    SharedParams::init(&EncoderConfig::tiny(Vocab::standard().len()), &mut seed::rng(s)).unwrap()
}

fn qa_head(p: &mut SharedParams) -> QaHead {
    QaHead::ensure(p, Task::Vqa, 16, &mut seed::rng(2)).unwrap()
}

fn pooled_rows(g: &Graph, rows: usize, width: usize) -> semvlp_core::tensor::Var<'_> {
    let data: Vec<f64> = (0..rows * width).map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0).collect();
    g.constant(Tensor::new(vec![rows, width], data).unwrap())
}

#[test]
fn vqa_loss_closed_forms() {
    let mut p = tiny(0);
    let h = qa_head(&mut p);
    for id in h.mlp.ids() {
        p.store.get_mut(id).data_mut().fill(0.0);
    }
    let g = Graph::new();
    let x = pooled_rows(&g, 2, 16);
    let half = vec![vec![0.5; 16]; 2];
    let l = vqa_forward_loss(&g, &p, &h, x, &half).unwrap().item();
    assert!((l - 2f64.ln()).abs() < 1e-15);

    // A fresh graph, since parameter leaves are cached per graph.
    p.store.get_mut(h.mlp.out.bias).data_mut().fill(-1e3);
    let g = Graph::new();
    let x = pooled_rows(&g, 2, 16);
    let zeros = vec![vec![0.0; 16]; 2];
    assert!(vqa_forward_loss(&g, &p, &h, x, &zeros).unwrap().item() < 1e-6);

    let bad = vec![vec![1.2; 16]; 2];
    assert!(vqa_forward_loss(&g, &p, &h, x, &bad).is_err());
}

#[test]
fn soft_bce_minimized_at_target_probability() {
    for t in [0.0, 0.3, 0.5, 1.0] {
        let grid: Vec<f64> = (-400..=400).map(|i| i as f64 * 0.025).collect();
        let losses: Vec<f64> = grid
            .iter()
            .map(|&z| {
                Graph::new()
                    .constant(Tensor::vector(vec![z]))
                    .bce_with_logits(&[t])
                    .unwrap()
                    .item()
            })
            .collect();
        let best = (0..grid.len()).min_by(|&a, &b| losses[a].total_cmp(&losses[b])).unwrap();
        let sig = 1.0 / (1.0 + (-grid[best]).exp());
        if t == 0.0 || t == 1.0 {
            // Minimizer runs off the grid edge.
            assert!(best == 0 || best == grid.len() - 1);
        } else {
            assert!((sig - t).abs() < 0.01, "t {t}: sigmoid {sig}");
        }
    }
}

#[test]
fn soft_bce_matches_standard_bce_on_one_hot() {
    let logits = [0.3, -1.2, 2.0, 0.0];
    let target = [0.0, 0.0, 1.0, 0.0];
    let v = Graph::new()
        .constant(Tensor::vector(logits.to_vec()))
        .bce_with_logits(&target)
        .unwrap()
        .item();
    let direct: f64 = logits
        .iter()
        .zip(target)
        .map(|(&z, t): (&f64, f64)| {
            let p = 1.0 / (1.0 + (-z).exp());
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / 4.0;
    assert!((v - direct).abs() < 1e-12);
}

fn golden_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

#[test]
fn similarity_score_golden_and_zero_head() {
    let c = corpus();
    let mut p = tiny(0);
    let head = SimilarityHead::ensure(&mut p, &mut seed::rng(0)).unwrap();
    let r = &c.train[0];
    let s = similarity_score(&p, &head, Mode::SingleStream, &r.fine, &r.objects).unwrap();
    assert_eq!(
        s,
        similarity_score(&p, &head, Mode::SingleStream, &r.fine, &r.objects).unwrap()
    );

    // Oracle: tanh of the head's affine map on the encoder's pooled row.
    let pooled = encode_single_stream(&r.fine, &r.objects, &p).unwrap().pooled;
    let w = p.store.get(head.linear.weight).data();
    let b = p.store.get(head.linear.bias).data()[0];
    let oracle = (pooled.iter().zip(w).map(|(x, y)| x * y).sum::<f64>() + b).tanh();
    assert!((s - oracle).abs() < 1e-12);

    let path = golden_path("similarity_seed0.json");
    if std::env::var_os("SEMVLP_BLESS").is_some() {
        std::fs::write(&path, serde_json::to_string(&oracle).unwrap()).unwrap();
    }
    let frozen: f64 = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert!((s - frozen).abs() < 1e-12, "{s} vs golden {frozen}");

    p.store.get_mut(head.linear.weight).data_mut().fill(0.0);
    for mode in Mode::BOTH {
        assert_eq!(similarity_score(&p, &head, mode, &r.coarse, &r.objects).unwrap(), 0.0);
    }
}

/// Direct evaluation of the circle-loss formula without log-sum-exp.
fn circle_oracle(sp: &[f64], sn: &[f64], m: f64, gamma: f64) -> f64 {
    let neg: f64 = sn.iter().map(|&s| (gamma * (s + m).max(0.0) * (s - m)).exp()).sum();
    let pos: f64 = sp
        .iter()
        .map(|&s| (-gamma * (1.0 + m - s).max(0.0) * (s - (1.0 - m))).exp())
        .sum();
    (1.0 + neg * pos).ln()
}

#[test]
fn circle_loss_grid_against_oracle_and_monotone() {
    let grid: Vec<f64> = (-9..=9).map(|i| i as f64 / 10.0).collect();
    let mut table = vec![vec![0.0; grid.len()]; grid.len()];
    for (i, &sp) in grid.iter().enumerate() {
        for (j, &sn) in grid.iter().enumerate() {
            let l = circle_loss(&[sp], &[sn], 0.25, 32.0).unwrap();
            let o = circle_oracle(&[sp], &[sn], 0.25, 32.0);
            assert!(relative_error(l, o, 1e-300) < 1e-9, "({sp}, {sn}): {l} vs {o}");
            table[i][j] = l;
        }
    }
    for i in 0..grid.len() {
        for j in 0..grid.len() {
            if i + 1 < grid.len() {
                assert!(table[i + 1][j] <= table[i][j], "not nonincreasing in s_p at {i},{j}");
            }
            // On (-m, 0) the negative weight grows slower than its margin
            // term shrinks, so the value dips there.
            let outside = |s: f64| s <= -0.25 || s >= 0.0;
            if j + 1 < grid.len() && outside(grid[j]) && outside(grid[j + 1]) {
                assert!(table[i][j + 1] >= table[i][j], "not nondecreasing in s_n at {i},{j}");
            }
            let g = Graph::new();
            let pos = g.leaf(Tensor::new(vec![1, 1], vec![grid[i]]).unwrap());
            let neg = g.leaf(Tensor::new(vec![1, 1], vec![grid[j]]).unwrap());
            let _ = g.backward(circle_loss_var(&g, pos, neg, 0.25, 32.0).unwrap()).unwrap();
            assert!(
                pos.grad().unwrap().data()[0] <= 0.0 && neg.grad().unwrap().data()[0] >= 0.0,
                "gradient sign at {i},{j}"
            );
        }
    }
    let multi = circle_loss(&[0.2, 0.6], &[0.1, -0.4, 0.3], 0.25, 32.0).unwrap();
    assert!(relative_error(multi, circle_oracle(&[0.2, 0.6], &[0.1, -0.4, 0.3], 0.25, 32.0), 1e-300) < 1e-9);
}

#[test]
fn circle_loss_var_gradient_treats_weights_as_constants() {
    let sp = [0.35, -0.1];
    let sn = [0.2, 0.45, -0.6];
    let (m, gamma) = (0.25, 4.0);
    let g = Graph::new();
    let pos = g.leaf(Tensor::new(vec![1, 2], sp.to_vec()).unwrap());
    let neg = g.leaf(Tensor::new(vec![1, 3], sn.to_vec()).unwrap());
    let loss = circle_loss_var(&g, pos, neg, m, gamma).unwrap();
    let _ = g.backward(loss).unwrap();
    let (gp, gn) = (pos.grad().unwrap(), neg.grad().unwrap());
    // Oracle with α frozen at the evaluation point.
    let ap: Vec<f64> = sp.iter().map(|s| (1.0 + m - s).max(0.0)).collect();
    let an: Vec<f64> = sn.iter().map(|s| (s + m).max(0.0)).collect();
    let frozen = |x: &Tensor| {
        let (p, n) = x.data().split_at(2);
        let pos: f64 = p.iter().zip(&ap).map(|(s, a)| (-gamma * a * (s - (1.0 - m))).exp()).sum();
        let neg: f64 = n.iter().zip(&an).map(|(s, a)| (gamma * a * (s - m)).exp()).sum();
        (1.0 + pos * neg).ln()
    };
    let all = Tensor::vector([sp.as_slice(), sn.as_slice()].concat());
    let numeric = finite_diff_grad(frozen, &all, 1e-6);
    let analytic = [gp.data(), gn.data()].concat();
    for (a, n) in analytic.iter().zip(numeric.data()) {
        assert!(relative_error(*a, *n, 1e-6) < 1e-6, "{a} vs {n}");
    }
}

#[test]
fn hard_negatives_follow_scene_similarity() {
    let c = corpus();
    let query = &c.train[0];
    let others: Vec<_> = c.train[1..].iter().collect();
    let hard = mine_hard_negatives(&others, others.len(), |r| Ok(scene_similarity(&query.scene, &r.scene))).unwrap();
    assert_eq!(hard.len(), others.len());
    assert!(hard.windows(2).all(|w| w[0].1 >= w[1].1));
    let best = others
        .iter()
        .map(|r| scene_similarity(&query.scene, &r.scene))
        .fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(hard[0].1, best);
    assert!(hard.iter().all(|(i, _)| others[*i].scene.scene_id != query.scene.scene_id));
}

#[test]
fn recall_equals_brute_force_reranking() {
    let mut pools = build_pools(40, 20, 3).unwrap();
    rank_pools(&mut pools, |q, c| Ok((((q * 31 + c * 17) % 23) as f64).sin())).unwrap();
    for k in [1, 5, 10] {
        let brute = pools
            .iter()
            .filter(|p| {
                let mut order: Vec<usize> = (0..p.candidates.len()).collect();
                // Ties placed ahead of the positive.
                order.sort_by(|&a, &b| {
                    p.scores[b]
                        .total_cmp(&p.scores[a])
                        .then(((a == p.positive) as u8).cmp(&((b == p.positive) as u8)))
                });
                order.iter().position(|&i| i == p.positive).unwrap() < k
            })
            .count() as f64
            / pools.len() as f64;
        assert_eq!(recall_at(&pools, k), brute);
    }
}

#[test]
fn nlvr_closed_forms_and_order() {
    let c = corpus();
    let items = gen_nlvr(&c.train, 1, &c.vocab).unwrap();
    let mut p = tiny(0);
    let head = NlvrHead::ensure(&mut p, &mut seed::rng(3)).unwrap();
    let batch: Vec<_> = items[..4].iter().collect();
    let g = Graph::new();
    let a = nlvr_logits(&g, &p, &head, Mode::TwoStream, &batch, &c.train, &mut Dropout::off())
        .unwrap()
        .value();
    let swapped: Vec<_> = items[..4]
        .iter()
        .map(|it| semvlp_core::synthworld::NlvrItem {
            left: it.right,
            right: it.left,
            ..it.clone()
        })
        .collect();
    let sref: Vec<_> = swapped.iter().collect();
    let b = nlvr_logits(&g, &p, &head, Mode::TwoStream, &sref, &c.train, &mut Dropout::off())
        .unwrap()
        .value();
    assert!(a.max_abs_diff(&b) > 0.0);

    for id in [head.mlp.out.weight, head.mlp.out.bias] {
        p.store.get_mut(id).data_mut().fill(0.0);
    }
    let g = Graph::new();
    let l = nlvr_forward_loss(&g, &p, &head, Mode::SingleStream, &batch, &c.train, &mut Dropout::off()).unwrap();
    assert!((l.item() - 2f64.ln()).abs() < 1e-15);
}

#[test]
fn nlvr_head_gradient_matches_finite_differences() {
    let c = corpus();
    let items = gen_nlvr(&c.train, 1, &c.vocab).unwrap();
    let mut p = tiny(0);
    let head = NlvrHead::ensure(&mut p, &mut seed::rng(3)).unwrap();
    let batch: Vec<_> = items[..3].iter().collect();
    let loss = |q: &SharedParams| {
        nlvr_forward_loss(
            &Graph::new(),
            q,
            &head,
            Mode::TwoStream,
            &batch,
            &c.train,
            &mut Dropout::off(),
        )
        .unwrap()
        .item()
    };
    for id in [head.mlp.hidden.weight, head.mlp.out.weight, head.mlp.out.bias] {
        let g = Graph::new();
        let l = nlvr_forward_loss(&g, &p, &head, Mode::TwoStream, &batch, &c.train, &mut Dropout::off()).unwrap();
        let analytic = g.backward(l).unwrap().get(id).unwrap().clone();
        let numeric = finite_diff_grad(
            |x| {
                let mut q = p.clone();
                *q.store.get_mut(id) = x.clone();
                loss(&q)
            },
            p.store.get(id),
            1e-5,
        );
        for (a, n) in analytic.data().iter().zip(numeric.data()) {
            assert!(relative_error(*a, *n, 1e-5) < 1e-4, "{a} vs {n}");
        }
    }
}

#[test]
fn modes_feed_different_pooled_states() {
    let c = corpus();
    let p = tiny(0);
    let r = &c.train[0];
    let g = Graph::new();
    let s = encode_pooled(&g, &p, Mode::SingleStream, &[(&r.fine, &r.objects)], &mut Dropout::off()).unwrap();
    let t = encode_pooled(&g, &p, Mode::TwoStream, &[(&r.fine, &r.objects)], &mut Dropout::off()).unwrap();
    assert!(s.value().max_abs_diff(&t.value()) > 1e-6);
}

fn gqa_config(a_epochs: usize, b_epochs: usize) -> FinetuneConfig {
    let mut cfg = FinetuneConfig::desk(Task::Gqa2Stage, Mode::SingleStream);
    cfg.stages[0].epochs = a_epochs;
    cfg.stages[1].epochs = b_epochs;
    cfg.stages[0].batch_size = 8;
    cfg.stages[1].batch_size = 8;
    cfg
}

#[test]
fn two_stage_degenerate_and_delta() {
    let c = corpus();
    let balanced = balanced_split(&c.train, 0);
    assert!(!balanced.is_empty() && balanced.len() < c.train.len());
    let run = |cfg: &FinetuneConfig, a: &[semvlp_core::synthworld::Record]| {
        let mut p = tiny(0);
        let mut stages = Vec::new();
        two_stage_finetune(&mut p, cfg, a, &balanced, 5, &mut |s| {
            stages.push(s.stage);
            Ok(())
        })
        .unwrap();
        (p, stages)
    };
    // Skipping stage A makes its data irrelevant.
    let (p1, s1) = run(&gqa_config(0, 1), &c.train);
    let (p2, _) = run(&gqa_config(0, 1), &c.train[..10]);
    assert!(s1.iter().all(|&s| s == 1));
    for ((_, n, a), (_, _, b)) in p1.store.iter().zip(p2.store.iter()) {
        assert!(a.bitwise_eq(b), "{n}");
    }
    // Stage A alone moves the encoder.
    let (pa, sa) = run(&gqa_config(1, 0), &c.train);
    assert!(sa.iter().all(|&s| s == 0) && !sa.is_empty());
    let init = tiny(0);
    let word = init.layout.embeddings.word;
    assert!(pa.store.get(word).max_abs_diff(init.store.get(word)) > 0.0);

    let mut p = tiny(0);
    assert!(two_stage_finetune(&mut p, &gqa_config(1, 1), &[], &balanced, 0, &mut |_| Ok(())).is_err());
}

#[test]
fn small_lr_stage_settings_parse() {
    let json = r#"{
        "task": "gqa2stage", "mode": "two_stream", "answer_set_size": 16,
        "stages": [
            {"epochs": 2, "batch_size": 32, "lr": 1e-5},
            {"epochs": 2, "batch_size": 32, "lr": 5e-6}
        ]
    }"#;
    let cfg: FinetuneConfig = serde_json::from_str(json).unwrap();
    cfg.validate().unwrap();
    assert_eq!(cfg.stages[1].lr, 5e-6);
    assert_eq!((cfg.circle_m, cfg.circle_gamma), (0.25, 32.0));
    assert!(
        serde_json::from_str::<FinetuneConfig>(&json.replace("\"answer_set_size\"", "\"extra\": 1, \"answer_set_size\""))
            .is_err()
    );
}

#[test]
fn small_runs_produce_reports() {
    let c = corpus();
    let mut p = tiny(0);
    let mut cfg = FinetuneConfig::desk(Task::Vqa, Mode::TwoStream);
    cfg.stages[0].max_steps = Some(6);
    let mut losses = Vec::new();
    let head = finetune_qa(&mut p, &cfg, &c.train, 1, &mut |s| {
        losses.push(s.loss);
        Ok(())
    })
    .unwrap();
    assert_eq!(losses.len(), 6);
    let r = eval_qa(&p, &head, Task::Vqa, Mode::TwoStream, &c.dev, 1).unwrap();
    assert_eq!((r.n_examples, r.metric_name.as_str()), (c.dev.len(), "accuracy"));
    assert!((0.0..=1.0).contains(&r.value));

    let mut cfg = FinetuneConfig::desk(Task::Retrieval, Mode::SingleStream);
    cfg.retrieval.queries_per_epoch = Some(8);
    cfg.retrieval.pool_size = 10;
    let mut steps = 0;
    let head = finetune_retrieval(&mut p, &cfg, &c.train, 2, &mut |_| {
        steps += 1;
        Ok(())
    })
    .unwrap();
    assert_eq!(steps, 4);
    let (reports, pools) = eval_retrieval(&p, &head, Mode::SingleStream, &c.dev, &cfg.retrieval, 0).unwrap();
    assert_eq!(reports.len(), 3);
    assert_eq!(reports[2].metric_name, "image_retrieval_r@10");
    assert_eq!(reports[2].value, 1.0);
    assert_eq!(pools.len(), c.dev.len());
}
