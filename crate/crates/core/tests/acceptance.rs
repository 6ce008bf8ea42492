//! Acceptance criteria, one line each. Exits non-zero if any fails.

use std::collections::{HashMap, HashSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use ndarray::{Array3, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use zsrte::augment::all_candidates;
use zsrte::config::RunConfig;
use zsrte::corpus::{make_splits, Instance, LabelSet, RelationLabel, Span, Triplet};
use zsrte::decoder::{BoundarySet, QuadrupleDistributions};
use zsrte::eval::{micro_counts, random_selector_baseline, score, Counts, Prediction};
use zsrte::infer::{check, extract, DecodedBoundary, InferConfig, PredictedTriplet, Rejection};
use zsrte::loss::{cost_matrix, entity_loss, hungarian, GoldBoundarySet};
use zsrte::model::{LossWeights, SelectorMode};
use zsrte::selector::{filter, filter_rows, RelationDecision};
use zsrte::synth::{generate, heldout_templates, seen_templates};
use zsrte::tape::Mat;
use zsrte::train::{build_model, evaluate, predict_options, train, TrainData};
use zsrte::Execution;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// Brute force over all permutations in lexicographic order; a later
// permutation replaces the incumbent only when strictly cheaper.
fn brute_force(cost: &Mat) -> (f64, Vec<usize>) {
    fn rec(cost: &Mat, cur: &mut Vec<usize>, used: &mut [bool], best: &mut (f64, Vec<usize>)) {
        let n = cost.nrows();
        if cur.len() == n {
            let total: f64 = cur.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum();
            if total < best.0 {
                *best = (total, cur.clone());
            }
            return;
        }
        for j in 0..n {
            if !used[j] {
                used[j] = true;
                cur.push(j);
                rec(cost, cur, used, best);
                cur.pop();
                used[j] = false;
            }
        }
    }
    let mut best = (f64::INFINITY, Vec::new());
    rec(cost, &mut Vec::new(), &mut vec![false; cost.nrows()], &mut best);
    best
}

fn hungarian_oracle() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut checked = 0;
    for n in 2..=7 {
        for trial in 0..1000 {
            // Every other matrix has small integer entries so that ties occur.
            let cost = if trial % 2 == 0 {
                Mat::from_shape_simple_fn((n, n), || rng.random_range(-10.0..10.0))
            } else {
                Mat::from_shape_simple_fn((n, n), || rng.random_range(0..4) as f64)
            };
            let a = hungarian(&cost).map_err(|e| e.to_string())?;
            let (best, perm) = brute_force(&cost);
            ensure(a.cost == best, || format!("N={n}: cost {} vs brute force {best}", a.cost))?;
            ensure(a.permutation == perm, || format!("N={n}: permutation {:?} vs {perm:?}", a.permutation))?;
            checked += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 30.0, || format!("took {secs:.1} s"))?;
    Ok(format!("{checked} matrices, N=2..7, {secs:.1} s"))
}

fn random_distributions(rng: &mut ChaCha8Rng, n: usize, l: usize) -> QuadrupleDistributions {
    QuadrupleDistributions::from_heads(std::array::from_fn(|_| {
        let mut m = Mat::from_shape_simple_fn((n, l), || rng.random_range(-3.0f64..3.0).exp());
        for mut row in m.rows_mut() {
            let s = row.sum();
            row /= s;
        }
        m
    }))
}

fn entity_loss_of(dists: &QuadrupleDistributions, quads: &[[usize; 4]], n: usize) -> f64 {
    let gold = GoldBoundarySet::new(quads, n);
    let a = hungarian(&cost_matrix(dists, &gold).unwrap()).unwrap();
    entity_loss(std::slice::from_ref(dists), &[gold], &[a])
}

fn entity_permutation_invariance() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(2..=6);
        let l = rng.random_range(8..=20);
        let dists = random_distributions(&mut rng, n, l);
        let k = rng.random_range(1..=n);
        let quads: Vec<[usize; 4]> = (0..k)
            .map(|_| {
                let hs = rng.random_range(1..l - 2);
                let ts = rng.random_range(1..l - 2);
                [hs, hs + rng.random_range(0..2), ts, ts + rng.random_range(0..2)]
            })
            .collect();
        let base = entity_loss_of(&dists, &quads, n);
        let mut shuffled = quads.clone();
        shuffled.shuffle(&mut rng);
        worst = worst.max((entity_loss_of(&dists, &shuffled, n) - base).abs());
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let heads = dists.heads().map(|h| h.select(Axis(0), &order));
        let permuted = QuadrupleDistributions::from_heads(heads);
        worst = worst.max((entity_loss_of(&permuted, &shuffled, n) - base).abs());
    }
    ensure(worst < 1e-6, || format!("max change {worst:e}"))?;
    Ok(format!("200 cases, max change {worst:.1e}"))
}

fn words(s: &str) -> Vec<String> {
    s.split(' ').map(String::from).collect()
}

fn gradient_check() -> Check {
    let labels = LabelSet::from_texts(["employer", "spouse", "place of birth"]).unwrap();
    let w = words("alice works for acme and was born in rome .");
    let t = |h: usize, tl: usize, l: usize| Triplet {
        head: Span::new(h, h),
        tail: Span::new(tl, tl),
        relation: labels.get(l).unwrap().clone(),
    };
    let inst = Instance {
        id: "g".into(),
        words: w.clone(),
        triplets: vec![t(0, 3, 0), t(0, 8, 2)],
    };
    let mut config = RunConfig::default();
    config.max_seq_len = 20;
    config.queries = 3;
    let vocab: Vec<String> = w.iter().cloned().chain(words("employer spouse place of birth")).collect();
    let mut model = build_model(&config, vocab.iter().map(String::as_str)).map_err(|e| e.to_string())?;
    ensure(model.config.encoder.hidden == 16, || "encoder is not d=16".into())?;
    let group = model
        .group(&inst.words, labels.as_slice(), &inst.gold_relations())
        .map_err(|e| e.to_string())?;
    let weights = LossWeights::for_batch(0.5, 1, model.real_pairs(&group, &inst.triplets));
    // Move away from the near-zero initialisation so that every tensor has
    // gradients well above finite-difference roundoff.
    let mut prng = ChaCha8Rng::seed_from_u64(13);
    let ids: Vec<_> = model.store.ids().collect();
    for &id in &ids {
        model.store.value_mut(id).mapv_inplace(|x| x + prng.random_range(-0.5..0.5));
    }
    let (grads, _) = model.gradients(&group, &inst.triplets, weights).map_err(|e| e.to_string())?;
    let h = 1e-5;
    let mut worst = (0.0f64, String::new());
    for id in ids {
        let shape = model.store.value(id).dim();
        let analytic = grads.get(id).cloned().unwrap_or_else(|| Mat::zeros(shape));
        let mut numeric = Mat::zeros(shape);
        for idx in 0..analytic.len() {
            let (r, c) = (idx / shape.1, idx % shape.1);
            let orig = model.store.value(id)[[r, c]];
            model.store.value_mut(id)[[r, c]] = orig + h;
            let up = model.loss_value(&group, &inst.triplets, weights).unwrap();
            model.store.value_mut(id)[[r, c]] = orig - h;
            let down = model.loss_value(&group, &inst.triplets, weights).unwrap();
            model.store.value_mut(id)[[r, c]] = orig;
            numeric[[r, c]] = (up - down) / (2.0 * h);
        }
        let diff = (&analytic - &numeric).mapv(|x| x * x).sum().sqrt();
        let scale = analytic.mapv(|x| x * x).sum().sqrt().max(numeric.mapv(|x| x * x).sum().sqrt());
        // Attention key biases have an exactly zero gradient; the floor keeps
        // roundoff-level differences there from counting as relative error.
        let rel = diff / scale.max(1e-5);
        if rel > worst.0 {
            worst = (rel, model.store.name(id).to_string());
        }
    }
    ensure(worst.0 <= 1e-4, || format!("relative error {:.2e} in {}", worst.0, worst.1))?;
    Ok(format!("{} tensors, worst relative error {:.1e} ({})", model.store.len(), worst.0, worst.1))
}

fn boundary(q: [usize; 4], score: f64) -> DecodedBoundary {
    DecodedBoundary {
        h_start: q[0],
        h_end: q[1],
        t_start: q[2],
        t_end: q[3],
        score,
    }
}

fn boundary_filter() -> Check {
    let c = InferConfig::default();
    let cases = [
        (boundary([5, 3, 7, 7], 0.9), 10, Err(Rejection::StartAfterEnd)),
        (boundary([1, 2, 8, 10], 0.9), 9, Err(Rejection::OutsideSentence)),
        (boundary([1, 16, 18, 18], 0.9), 20, Err(Rejection::TooLong)),
        (boundary([1, 2, 4, 5], 0.39), 10, Err(Rejection::BelowThreshold)),
        (boundary([1, 2, 4, 5], 0.41), 10, Ok(())),
    ];
    for (b, len, expected) in cases {
        let got = check(&b, len, &c);
        ensure(got == expected, || format!("{b:?} gave {got:?}, expected {expected:?}"))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let label = |id| RelationLabel {
        id,
        text: format!("r{id}"),
    };
    let layout = zsrte::augment::RowLayout {
        sentence_len: 12,
        relation_len: 2,
        alignment: (0..12).map(|i| Some((i, i))).collect(),
    };
    for _ in 0..100 {
        let g = 3;
        let probs: Vec<f64> = (0..g).map(|_| rng.random_range(0.5..1.0)).collect();
        let decision = RelationDecision::new(probs, vec![true; g]);
        let set = BoundarySet {
            relations: (0..g)
                .map(|_| {
                    QuadrupleDistributions::from_heads(std::array::from_fn(|_| {
                        let mut m = Mat::from_shape_simple_fn((4, 16), || rng.random_range(-4.0f64..4.0).exp());
                        m.column_mut(15).fill(0.0);
                        for mut row in m.rows_mut() {
                            let s = row.sum();
                            row /= s;
                        }
                        m
                    }))
                })
                .collect(),
        };
        let cands: Vec<RelationLabel> = (0..g).map(label).collect();
        let rows = vec![layout.clone(); g];
        let mut last = usize::MAX;
        for step in 1..=9 {
            let beta = step as f64 / 10.0;
            let cfg = InferConfig { beta, max_span: 15 };
            let out = extract(&decision, &set, &cands, &rows, &cfg);
            ensure(out.len() <= last, || format!("β={beta} increased output to {}", out.len()))?;
            last = out.len();
        }
    }
    Ok("each criterion rejects alone, valid case kept, β ∈ 0.1..0.9 monotone over 100 sets".into())
}

fn relation_filter() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for _ in 0..100 {
        let g = rng.random_range(1..8);
        let h = Array3::from_shape_simple_fn((g, 6, 4), || rng.random::<f64>());
        let mask: Vec<bool> = (0..g).map(|_| rng.random()).collect();
        let (f, kept) = filter(&h, &mask);
        ensure(kept.len() == mask.iter().filter(|&&m| m).count(), || "kept count".into())?;
        for (k, &r) in kept.iter().enumerate() {
            let same = f
                .index_axis(Axis(0), k)
                .iter()
                .zip(h.index_axis(Axis(0), r).iter())
                .all(|(a, b)| a.to_bits() == b.to_bits());
            ensure(same, || format!("row {r} altered"))?;
        }
    }
    let labels = LabelSet::from_texts(["member of political party", "position held", "country of citizenship"]).unwrap();
    let (kept, _) = filter_rows(labels.as_slice(), &[true, false, true]);
    let texts: Vec<&str> = kept.iter().map(|l| l.text.as_str()).collect();
    ensure(texts == ["member of political party", "country of citizenship"], || format!("{texts:?}"))?;
    Ok("100 random bit-exact filters; [1,0,1] drops only \"position held\"".into())
}

fn independent_counts(preds: &[Vec<(usize, usize, String)>], gold: &[Vec<(usize, usize, String)>]) -> (usize, usize, usize) {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (p, g) in preds.iter().zip(gold) {
        let mut pd: Vec<&(usize, usize, String)> = Vec::new();
        for x in p {
            if !pd.contains(&x) {
                pd.push(x);
            }
        }
        let mut gd: Vec<&(usize, usize, String)> = Vec::new();
        for x in g {
            if !gd.contains(&x) {
                gd.push(x);
            }
        }
        let hits = pd.iter().filter(|x| gd.contains(x)).count();
        tp += hits;
        fp += pd.len() - hits;
        fn_ += gd.len() - hits;
    }
    (tp, fp, fn_)
}

fn metric_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let rels = ["a", "b", "c"];
    let label = |r: &str| RelationLabel {
        id: r.as_bytes()[0] as usize,
        text: r.into(),
    };
    for case in 0..50 {
        let n = rng.random_range(1..6);
        let mut gold_raw = Vec::new();
        let mut pred_raw = Vec::new();
        let mut instances = Vec::new();
        let mut preds = HashMap::new();
        for i in 0..n {
            let random_set = |rng: &mut ChaCha8Rng, k: usize| -> Vec<(usize, usize, String)> {
                (0..k)
                    .map(|_| (rng.random_range(0..3), rng.random_range(3..6), rels[rng.random_range(0..3)].to_string()))
                    .collect()
            };
            let mut g = random_set(&mut rng, 2);
            while g[0] == g[1] {
                g = random_set(&mut rng, 2);
            }
            let extra = random_set(&mut rng, 1);
            if case % 2 == 0 {
                g.extend(extra);
                g.dedup();
            }
            let k = rng.random_range(0..5);
            let mut p = random_set(&mut rng, k);
            if k > 0 && rng.random_bool(0.5) {
                p.push(g[0].clone());
            }
            let id = format!("s{i}");
            instances.push(Instance {
                id: id.clone(),
                words: (0..6).map(|w| format!("w{w}")).collect(),
                triplets: g
                    .iter()
                    .map(|(h, t, r)| Triplet {
                        head: Span::new(*h, *h),
                        tail: Span::new(*t, *t),
                        relation: label(r),
                    })
                    .collect(),
            });
            preds.insert(
                id,
                Prediction {
                    triplets: p
                        .iter()
                        .map(|(h, t, r)| PredictedTriplet {
                            head: Span::new(*h, *h),
                            tail: Span::new(*t, *t),
                            relation: label(r),
                            score: 0.5,
                        })
                        .collect(),
                    relations: Vec::new(),
                },
            );
            gold_raw.push(g);
            pred_raw.push(p);
        }
        let (tp, fp, fn_) = independent_counts(&pred_raw, &gold_raw);
        let p = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
        let r = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
        let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        let c = micro_counts(&preds, &instances).map_err(|e| e.to_string())?;
        ensure(c == Counts { tp, fp, fn_ }, || format!("case {case}: {c:?} vs {tp}/{fp}/{fn_}"))?;
        let report = score(&preds, &instances).map_err(|e| e.to_string())?;
        let multi = instances.iter().all(|i| i.triplets.len() > 1);
        ensure(multi, || "generator produced a single-triplet sentence".into())?;
        ensure(
            report.precision == p && report.recall == r && report.f1 == f,
            || format!("case {case}: report {}/{}/{} vs {p}/{r}/{f}", report.precision, report.recall, report.f1),
        )?;
    }
    let mut hand = Counts::default();
    hand.add(Counts::of_sets(&HashSet::from(["t1"]), &HashSet::from(["t1", "t2"])));
    hand.add(Counts::of_sets(&HashSet::from(["t3", "t4"]), &HashSet::from(["t3"])));
    let third = 2.0 / 3.0;
    ensure(
        [hand.precision(), hand.recall(), hand.f1()].iter().all(|v| (v - third).abs() < 1e-12),
        || format!("hand example gave {:?}", hand),
    )?;
    Ok("50 random configurations match the independent counter; hand example P=R=F1=2/3".into())
}

fn random_baseline() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let gold_mask = [true, false, false, true, false];
    let r = random_selector_baseline(&gold_mask, 0.5, &mut rng, 1000);
    ensure((0.45..=0.55).contains(&r.recall), || format!("recall {:.4}", r.recall))?;
    Ok(format!("recall {:.4}, precision {:.4} over 1000 trials", r.recall, r.precision))
}

fn sorted_labels(data: &[Instance]) -> Vec<RelationLabel> {
    let mut v: Vec<RelationLabel> = data.iter().flat_map(|i| i.gold_relations()).collect();
    v.sort();
    v.dedup();
    v
}

struct SmokeRun {
    train_f1: f64,
    epochs: usize,
    secs: f64,
    heldout_recall: f64,
}

fn smoke_run() -> Result<SmokeRun, String> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let data = generate(&seen_templates(), 50, 0.5, &mut rng).map_err(|e| e.to_string())?;
    let heldout = generate(&heldout_templates(), 40, 0.0, &mut rng).map_err(|e| e.to_string())?;
    let seen = sorted_labels(&data);
    let unseen = sorted_labels(&heldout);
    let mut config = RunConfig::default();
    config.alpha = 0.5;
    config.max_epochs = 200;
    config.batch_size = 4;
    config.learning_rate = 5e-3;
    config.tiny_hidden = 32;
    config.tiny_intermediate = 64;
    config.warmup_ratio = 0.02;
    config.patience = 0;
    config.target_score = Some(0.95);
    config.max_seq_len = 32;
    config.group_size = 5;
    config.queries = 4;
    let vocab: Vec<String> = data
        .iter()
        .chain(&heldout)
        .flat_map(|i| i.words.clone())
        .chain(seen.iter().chain(&unseen).flat_map(|l| words(&l.text)))
        .collect();
    let mut model = build_model(&config, vocab.iter().map(String::as_str)).map_err(|e| e.to_string())?;
    let td = TrainData {
        train: &data,
        seen_labels: &seen,
        validation: &data,
        validation_labels: &seen,
    };
    let state = train(&mut model, &config, &td, Execution::Parallel, None, None).map_err(|e| e.to_string())?;
    let opts = predict_options(&config);
    let (report, _) =
        evaluate(&model, &data, &seen, &opts, SelectorMode::Learned, Execution::Parallel).map_err(|e| e.to_string())?;
    let candidates = all_candidates(&unseen).map_err(|e| e.to_string())?;
    let (zs, _) = evaluate(&model, &heldout, &candidates, &opts, SelectorMode::Learned, Execution::Parallel)
        .map_err(|e| e.to_string())?;
    Ok(SmokeRun {
        train_f1: report.f1,
        epochs: state.history.len(),
        secs: start.elapsed().as_secs_f64(),
        heldout_recall: zs.relation_recall,
    })
}

fn split_protocol() -> Check {
    let mut labels = LabelSet::new();
    let mut instances = Vec::new();
    for r in 0..80 {
        let label = labels.intern(&format!("relation {r}")).unwrap();
        for k in 0..3 {
            instances.push(Instance {
                id: format!("i{r}-{k}"),
                words: words("x y z"),
                triplets: vec![Triplet {
                    head: Span::new(0, 0),
                    tail: Span::new(2, 2),
                    relation: label.clone(),
                }],
            });
        }
    }
    let mut out = Vec::new();
    for (m, expected) in [(5, (70, 5, 5)), (10, (65, 5, 10)), (15, (60, 5, 15))] {
        let folds = make_splits(&instances, &labels, m, 5, &[1, 2, 3, 4, 5]).map_err(|e| e.to_string())?;
        for (k, f) in folds.iter().enumerate() {
            let got = (f.seen_labels.len(), f.validation_labels.len(), f.unseen_labels.len());
            ensure(got == expected, || format!("m={m} fold {k}: {got:?}"))?;
            let ids = |ls: &[RelationLabel]| ls.iter().map(|l| l.id).collect::<HashSet<_>>();
            let (s, v, u) = (ids(&f.seen_labels), ids(&f.validation_labels), ids(&f.unseen_labels));
            ensure(s.is_disjoint(&u) && s.is_disjoint(&v) && v.is_disjoint(&u), || format!("m={m} fold {k}: overlap"))?;
            let train_rel: HashSet<usize> = f.train.iter().flat_map(|i| i.triplets.iter().map(|t| t.relation.id)).collect();
            ensure(train_rel.is_disjoint(&u), || format!("m={m} fold {k}: unseen relation in training data"))?;
        }
        out.push(format!("m={m}: {}/{}/{}", expected.0, expected.1, expected.2));
    }
    Ok(format!("5 folds each, {}", out.join(", ")))
}

fn main() {
    let mut results: Vec<(&str, Check)> = Vec::new();
    let mut run = |name: &'static str, f: &dyn Fn() -> Check| {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d.clone()),
            Err(e) => ("FAIL", e.clone()),
        };
        println!("{tag} {name}: {detail}");
        results.push((name, outcome));
    };
    run("hungarian oracle", &hungarian_oracle);
    run("entity-loss permutation invariance", &entity_permutation_invariance);
    run("gradient check", &gradient_check);
    run("boundary filter properties", &boundary_filter);
    run("relation filter exactness", &relation_filter);
    run("metric oracle", &metric_oracle);
    run("random-selector baseline", &random_baseline);

    let smoke = catch_unwind(smoke_run).unwrap_or_else(|_| Err("panicked".into()));
    run("overfit smoke", &|| {
        let s = smoke.as_ref().map_err(|e| e.clone())?;
        ensure(s.train_f1 >= 0.95 && s.secs < 600.0, || {
            format!("training micro-F1 {:.4} after {} epochs in {:.0} s", s.train_f1, s.epochs, s.secs)
        })?;
        Ok(format!("training micro-F1 {:.4} after {} epochs in {:.0} s", s.train_f1, s.epochs, s.secs))
    });
    run("zero-shot smoke", &|| {
        let s = smoke.as_ref().map_err(|e| e.clone())?;
        ensure(s.heldout_recall >= 0.6, || format!("held-out relation recall {:.4}", s.heldout_recall))?;
        Ok(format!("held-out relation recall {:.4}", s.heldout_recall))
    });
    run("split protocol", &split_protocol);

    let failed = results.iter().filter(|(_, r)| r.is_err()).count();
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
