//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. Pass substrings as arguments to run a subset.

use std::collections::{BTreeMap, BTreeSet, HashSet, VecDeque};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::{Command, ExitCode};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use coherence::analysis::stability_stats;
use coherence::checkpoint;
use coherence::cli::{resolve_config, RunConfig};
use coherence::corpus::{Corpus, Document, Split};
use coherence::evalsuite::{krippendorff_alpha, pairwise_accuracy, probe_accuracy};
use coherence::miner::rank_and_select;
use coherence::momentum::{momentum_update, slice_positive, MomentumEncoder, NegativeQueue};
use coherence::nn::TransformerConfig;
use coherence::objectives::*;
use coherence::scorer::{make_backbone, BackboneKind, CoherenceScorer, FnScorer};
use coherence::synthetic::{synthetic_corpus, synthetic_splits};
use coherence::taskgen::*;
use coherence::trainer::{instance_objective, train, MomentumBranch, Regime, TrainLog, Trainer, TrainerConfig};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn tiny(layers: usize, dim: usize, seed: u64) -> CoherenceScorer {
    let b = make_backbone(&BackboneKind::Tiny(TransformerConfig::tiny(layers, dim)))
        .unwrap()
        .backbone;
    CoherenceScorer::new(b, seed)
}

const WORDS: &[&str] = &[
    "the", "river", "market", "quiet", "she", "he", "opened", "carried", "letter", "window",
    "after", "before", "morning", "storm", "boat", "garden", "old", "new", "friend", "road",
];

fn random_doc(id: &str, n: usize, rng: &mut ChaCha8Rng) -> Document {
    let sentences = (0..n)
        .map(|_| {
            let len = rng.gen_range(3..9);
            let words: Vec<&str> = (0..len).map(|_| *WORDS.choose(rng).unwrap()).collect();
            format!("{}.", words.join(" "))
        })
        .collect();
    Document::new(id, sentences).unwrap()
}

// ---------------------------------------------------------------- losses

fn loss_oracles() -> Outcome {
    let start = Instant::now();
    let tol = 1e-9;
    let close = |a: f64, b: f64| (a - b).abs() <= tol;
    let e = std::f64::consts::E;

    // hinge
    ensure!(close(ok(pairwise_loss(1.0, 0.5, 0.1))?, 0.0), "hinge satisfied margin");
    ensure!(close(ok(pairwise_loss(0.5, 1.0, 0.1))?, 0.6), "hinge violated margin");
    ensure!(close(ok(pairwise_loss(1.0, 0.95, 0.1))?, 0.05), "hinge inside margin");
    ensure!(close(ok(pairwise_loss(0.0, 0.0, 0.0))?, 0.0), "hinge at kink");

    // margin-shifted softmax
    let l = ok(contrastive_loss(0.0, &[0.1], 0.1))?;
    ensure!(close(l, std::f64::consts::LN_2), "symmetric case {l}");
    let l = ok(contrastive_loss(1.0, &[0.0, 0.0], 0.1))?;
    let closed = (1.0 + 2.0 * (-1.1f64).exp()).ln();
    ensure!(close(l, closed), "two-negative case {l} vs {closed}");
    // The tabulated 0.510274 is a rounded figure for 0.5102708...
    ensure!((l - 0.510274).abs() < 5e-6, "two-negative tabulated value {l}");
    let l = ok(contrastive_loss(2.0, &[1.0, 0.5, -1.0], 0.0))?;
    let closed = -(e.powi(2) / (e.powi(2) + e + e.powf(0.5) + e.powi(-1))).ln();
    ensure!(close(l, closed), "three-negative case {l} vs {closed}");

    // momentum
    let z = [1.0, 0.0, 0.0];
    let l = ok(momentum_loss(&z, &z, &[vec![0.0, 2.0, 0.0]], 0.0))?;
    let closed = (1.0 + (-1.0f64).exp()).ln();
    ensure!(close(l, closed), "momentum case {l} vs {closed}");
    ensure!((l - 0.313262).abs() < 1e-6, "momentum tabulated value {l}");
    let l = ok(momentum_loss(&z, &z, &vec![z.to_vec(); 5], 0.0))?;
    ensure!(close(l, 6f64.ln()), "equal cosines {l}");

    // combined
    let l = ok(combined_loss(1.0, 2.0, 0.85))?;
    ensure!(close(l, 1.15), "combined {l}");

    // shift invariance of the softmax form
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let s_pos = rng.gen_range(-5.0..5.0);
        let negs: Vec<f64> = (0..rng.gen_range(1..8)).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let c: f64 = rng.gen_range(-50.0..50.0);
        let a = ok(contrastive_loss(s_pos, &negs, 0.1))?;
        let shifted: Vec<f64> = negs.iter().map(|s| s + c).collect();
        let b = ok(contrastive_loss(s_pos + c, &shifted, 0.1))?;
        ensure!((a - b).abs() <= tol, "shift by {c}: {a} vs {b}");
    }
    let big = ok(contrastive_loss(1000.0, &[999.0, 1001.0], 0.1))?;
    let small = ok(contrastive_loss(0.0, &[-1.0, 1.0], 0.1))?;
    ensure!((big - small).abs() <= tol, "large logits {big} vs {small}");

    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 1.0, "took {secs:.2}s");
    Ok(format!("all closed forms within 1e-9 in {secs:.3}s"))
}

// ---------------------------------------------------------------- gradients

fn rel_ok(analytic: f64, numeric: f64) -> bool {
    (analytic - numeric).abs() <= 1e-4 * analytic.abs().max(numeric.abs()) + 1e-8
}

fn central<F: Fn(f64) -> f64>(f: F, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

fn loss_gradients() -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut checked = 0;
    for _ in 0..200 {
        let tau = rng.gen_range(0.0..0.5);
        let s_pos = rng.gen_range(-3.0..3.0);
        let negs: Vec<f64> = (0..rng.gen_range(1..6)).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let (_, g_pos, g_negs) = ok(contrastive_loss_grad(s_pos, &negs, tau))?;
        let n = central(|x| contrastive_loss(x, &negs, tau).unwrap(), s_pos, 1e-6);
        ensure!(rel_ok(g_pos, n), "contrastive d/ds+ {g_pos} vs {n}");
        for j in 0..negs.len() {
            let n = central(
                |x| {
                    let mut v = negs.clone();
                    v[j] = x;
                    contrastive_loss(s_pos, &v, tau).unwrap()
                },
                negs[j],
                1e-6,
            );
            ensure!(rel_ok(g_negs[j], n), "contrastive d/ds-{j} {} vs {n}", g_negs[j]);
        }

        let d = 6;
        let vec = |rng: &mut ChaCha8Rng| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
        let z = vec(&mut rng);
        let zm = vec(&mut rng);
        let queue: Vec<Vec<f64>> = (0..rng.gen_range(1..5)).map(|_| vec(&mut rng)).collect();
        let g = ok(momentum_loss_grad(&z, &zm, &queue, tau))?;
        for i in 0..d {
            let n = central(
                |x| {
                    let mut v = z.clone();
                    v[i] = x;
                    momentum_loss(&v, &zm, &queue, tau).unwrap()
                },
                z[i],
                1e-6,
            );
            ensure!(rel_ok(g.z_pos[i], n), "momentum d/dz{i} {} vs {n}", g.z_pos[i]);
        }
        checked += 1;
    }
    Ok(checked)
}

fn end_to_end_gradients() -> Result<(usize, f64), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut scorer = tiny(2, 32, 5);
    let momentum = MomentumEncoder {
        params: {
            let mut p = scorer.encoder.clone();
            for t in p.tensors_mut() {
                t.mapv_inplace(|x| x + 0.02 * (x * 1000.0).sin());
            }
            p
        },
        mu: 0.99,
    };
    let mut queue = ok(NegativeQueue::new(8, scorer.dim()))?;
    let entries: Vec<Vec<f64>> = (0..8)
        .map(|_| (0..scorer.dim()).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    ok(queue.enqueue(&entries))?;

    let tau = 0.1;
    let lambda = 0.85;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for k in 0..20 {
        let n = rng.gen_range(4..=8);
        let pos = random_doc(&format!("g{k}"), n, &mut rng);
        let perms = ok(sample_permutations(&pos.id, n, 5, &HashSet::new(), &mut rng))?;
        let negs: Vec<Document> = perms.iter().enumerate().map(|(i, p)| p.apply(&pos, format!("g{k}n{i}"))).collect();
        let view = ok(slice_positive(&pos, &mut rng))?;

        let objective = |s: &CoherenceScorer| -> f64 {
            let mut g = s.zero_grads();
            let branch = MomentumBranch { encoder: &momentum, queue: &queue, positive_view: &view, lambda };
            instance_objective(s, Regime::Full, tau, &pos, &negs, Some(branch), true, None, &mut g)
                .unwrap()
                .total
        };
        let mut grads = scorer.zero_grads();
        let branch = MomentumBranch { encoder: &momentum, queue: &queue, positive_view: &view, lambda };
        let parts = ok(instance_objective(&scorer, Regime::Full, tau, &pos, &negs, Some(branch), true, None, &mut grads))?;
        ensure!(parts.momentum.is_some(), "momentum branch inactive");

        // Encoder coordinates: mostly ones that the document touches, plus a
        // few uniformly random ones.
        let mut coords = Vec::new();
        let mut touched = Vec::new();
        for (t, g) in grads.encoder.tensors().iter().enumerate() {
            for ((i, j), v) in g.indexed_iter() {
                if v.abs() > 1e-7 {
                    touched.push((t, i, j));
                }
            }
        }
        coords.extend(touched.choose_multiple(&mut rng, 8).copied());
        for _ in 0..2 {
            let t = rng.gen_range(0..scorer.encoder.len());
            let (r, c) = scorer.encoder.tensor(t).dim();
            coords.push((t, rng.gen_range(0..r), rng.gen_range(0..c)));
        }
        let h = 1e-5;
        for (t, i, j) in coords {
            let analytic = grads.encoder.tensor(t)[[i, j]];
            let x0 = scorer.encoder.tensor(t)[[i, j]];
            scorer.encoder.tensor_mut(t)[[i, j]] = x0 + h;
            let up = objective(&scorer);
            scorer.encoder.tensor_mut(t)[[i, j]] = x0 - h;
            let down = objective(&scorer);
            scorer.encoder.tensor_mut(t)[[i, j]] = x0;
            let numeric = (up - down) / (2.0 * h);
            ensure!(
                rel_ok(analytic, numeric),
                "doc {k} {}[{i},{j}]: analytic {analytic:e} numeric {numeric:e}",
                scorer.encoder.name(t)
            );
            if analytic.abs() > 1e-6 {
                worst = worst.max((analytic - numeric).abs() / analytic.abs());
            }
            checked += 1;
        }
        for i in [0, scorer.dim() - 1] {
            let w0 = scorer.head.w[i];
            scorer.head.w[i] = w0 + h;
            let up = objective(&scorer);
            scorer.head.w[i] = w0 - h;
            let down = objective(&scorer);
            scorer.head.w[i] = w0;
            let numeric = (up - down) / (2.0 * h);
            ensure!(rel_ok(grads.head_w[i], numeric), "doc {k} head w[{i}]: {} vs {numeric}", grads.head_w[i]);
            checked += 1;
        }
        let b0 = scorer.head.b;
        scorer.head.b = b0 + h;
        let up = objective(&scorer);
        scorer.head.b = b0 - h;
        let down = objective(&scorer);
        scorer.head.b = b0;
        let numeric = (up - down) / (2.0 * h);
        ensure!(rel_ok(grads.head_b, numeric), "doc {k} head b: {} vs {numeric}", grads.head_b);
        checked += 1;
    }
    Ok((checked, worst))
}

fn gradient_checks() -> Outcome {
    let start = Instant::now();
    let losses = loss_gradients()?;
    let (coords, worst) = end_to_end_gradients()?;
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 120.0, "took {secs:.1}s");
    Ok(format!(
        "{losses} loss cases, {coords} backbone coordinates on 20 documents, worst rel err {worst:.1e}, {secs:.1}s"
    ))
}

// ---------------------------------------------------------------- miner

fn miner_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    // Scores are coarse functions of the order, so ties are common.
    let scorer = FnScorer(|d: &Document| {
        let order: Vec<usize> = d
            .sentences
            .iter()
            .map(|s| s.trim_start_matches('s').trim_end_matches('.').parse().unwrap())
            .collect();
        (order.iter().enumerate().map(|(i, o)| i * o).sum::<usize>() % 7) as f64
    });
    let mut ties = 0;
    for k in 0..100 {
        let n_sent = rng.gen_range(5..=7);
        let pos = Document::new(format!("m{k}"), (0..n_sent).map(|i| format!("s{i}.")).collect()).unwrap();
        let h = rng.gen_range(1..=50);
        let n = rng.gen_range(1..=h);
        let perms = ok(sample_permutations(&pos.id, n_sent, h, &HashSet::new(), &mut rng))?;
        let inst = TrainingInstance {
            positive: pos,
            negatives: Negatives::Permutation(perms),
            repetition: 0,
        };
        let scores: Vec<f64> = (0..h).map(|i| coherence::scorer::DocumentScorer::score_doc(&scorer, &inst.negative(i)).unwrap()).collect();
        // Brute force: a candidate's rank is the number of candidates that
        // beat it (higher score, or equal score and lower index).
        let mut ranked: Vec<(usize, usize)> = (0..h)
            .map(|i| {
                let rank = (0..h)
                    .filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i))
                    .count();
                (rank, i)
            })
            .collect();
        ranked.sort();
        let expected: Vec<usize> = ranked.iter().take(n).map(|&(_, i)| i).collect();
        let got = ok(rank_and_select(&scorer, &inst, n))?;
        ensure!(got == expected, "instance {k} (h={h}, N={n}): {got:?} vs {expected:?}");
        let distinct: BTreeSet<u64> = scores.iter().map(|s| s.to_bits()).collect();
        if distinct.len() < h {
            ties += 1;
        }
    }
    Ok(format!("100 instances exact, {ties} with tied scores"))
}

// ---------------------------------------------------------------- queue and momentum

fn fifo_model() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let dim = 3;
    let cap = 17;
    let mut q = ok(NegativeQueue::new(cap, dim))?;
    let mut reference: VecDeque<Vec<f64>> = VecDeque::new();
    let mut counter = 0.0;
    for op in 0..1000 {
        if rng.gen_bool(0.1) {
            // malformed batch: rejected atomically
            let bad = vec![vec![0.0; dim], vec![0.0; dim + 1]];
            ensure!(q.enqueue(&bad).is_err(), "op {op}: bad batch accepted");
        } else {
            let batch: Vec<Vec<f64>> = (0..rng.gen_range(0..6))
                .map(|_| {
                    counter += 1.0;
                    vec![counter; dim]
                })
                .collect();
            ok(q.enqueue(&batch))?;
            for b in batch {
                if reference.len() == cap {
                    reference.pop_front();
                }
                reference.push_back(b);
            }
        }
        ensure!(q.len() == reference.len(), "op {op}: length {} vs {}", q.len(), reference.len());
        ensure!(q.entries() == reference.iter().cloned().collect::<Vec<_>>(), "op {op}: contents differ");
    }
    Ok(())
}

fn geometric_decay() -> Result<(), String> {
    let base = tiny(1, 16, 1);
    let other = tiny(1, 16, 2);
    for &mu in &[0.0, 0.5, 0.9, 0.99, 0.9999999] {
        let mut m = MomentumEncoder { params: other.encoder.clone(), mu };
        let d0 = m.params.l2_distance(&base.encoder);
        for t in 1..=20 {
            ok(momentum_update(&mut m, &base.encoder, mu))?;
            let d = m.params.l2_distance(&base.encoder);
            let expected = mu.powi(t) * d0;
            ensure!(
                (d - expected).abs() <= 1e-10 * d0.max(1.0),
                "mu={mu} T={t}: {d} vs {expected}"
            );
        }
    }
    Ok(())
}

fn momentum_is_detached() -> Result<(), String> {
    let corpus = synthetic_corpus(12, 3, "q", Split::Train).unwrap();
    let ds = ok(build_permuted_dataset(&corpus, 2, 6, 1))?;
    let cfg = TrainerConfig {
        learning_rate: 1e-2,
        lr_floor: 1e-3,
        momentum: 0.9,
        h: 6,
        x: 4,
        queue_size: 12,
        max_steps: 40,
        eval_every: 1000,
        seed: 9,
        ..TrainerConfig::for_regime(Regime::Full)
    };
    let mut t = ok(Trainer::new(cfg, tiny(1, 16, 3), &ds, &[]))?;
    for step in 0..30 {
        // Prepare the block first so the selections for this step are known.
        if t.state.block.as_ref().map_or(true, |b| t.state.block_cursor >= b.instances.len()) {
            ok(t.step())?;
            continue;
        }
        let block = t.state.block.clone().unwrap();
        let k = t.state.block_cursor;
        let inst = &ds[block.instances[k]];
        let negs: Vec<Document> = block.selections[k].iter().map(|&j| inst.negative(j)).collect();
        let phi_before = t.state.momentum.as_ref().unwrap().params.clone();
        let queue_before = t.state.queue.as_ref().unwrap().entries();
        let expected_new: Vec<Vec<f64>> = negs.iter().map(|d| t.scorer.encode_with(&phi_before, d).unwrap()).collect();

        ok(t.step())?;

        let mu = t.config.momentum;
        let phi_after = &t.state.momentum.as_ref().unwrap().params;
        for (idx, (a, b)) in phi_after.tensors().iter().zip(phi_before.tensors()).enumerate() {
            let theta = t.scorer.encoder.tensor(idx);
            for ((x, y), th) in a.iter().zip(b.iter()).zip(theta.iter()) {
                ensure!(*x == mu * *y + (1.0 - mu) * *th, "step {step}: momentum moved other than by the average");
            }
        }
        let mut reference: VecDeque<Vec<f64>> = queue_before.into_iter().collect();
        for e in expected_new {
            if reference.len() == 12 {
                reference.pop_front();
            }
            reference.push_back(e);
        }
        ensure!(
            t.state.queue.as_ref().unwrap().entries() == reference.into_iter().collect::<Vec<_>>(),
            "step {step}: queue holds something other than the step's momentum-encoded negatives"
        );
    }
    // The loss itself carries no gradient for the momentum positive or queue.
    let z = vec![0.3, -0.2, 0.9];
    let g = ok(momentum_loss_grad(&z, &[0.1, 0.4, 0.2], &[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 1.0]], 0.1))?;
    ensure!(g.z_pos_m.iter().all(|&x| x == 0.0), "gradient into momentum positive");
    ensure!(g.queue.iter().flatten().all(|&x| x == 0.0), "gradient into queue");
    Ok(())
}

fn queue_and_momentum() -> Outcome {
    fifo_model()?;
    geometric_decay()?;
    momentum_is_detached()?;
    Ok("1000 FIFO ops exact; decay mu^T to 1e-10 for T<=20; momentum and queue change only by update rules".into())
}

// ---------------------------------------------------------------- data generation

fn all_orders(n: usize) -> BTreeSet<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, left: &mut Vec<usize>, out: &mut BTreeSet<Vec<usize>>) {
        if left.is_empty() {
            out.insert(prefix.clone());
            return;
        }
        for i in 0..left.len() {
            let x = left.remove(i);
            prefix.push(x);
            rec(prefix, left, out);
            prefix.pop();
            left.insert(i, x);
        }
    }
    let mut out = BTreeSet::new();
    rec(&mut Vec::new(), &mut (0..n).collect(), &mut out);
    out.remove(&(0..n).collect::<Vec<_>>());
    out
}

fn data_generation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for n in 2..=6 {
        let expected = all_orders(n);
        let got = ok(sample_permutations("d", n, expected.len(), &HashSet::new(), &mut rng))?;
        let got: BTreeSet<Vec<usize>> = got.into_iter().map(|p| p.order).collect();
        ensure!(got == expected, "n={n}: {} of {} orders", got.len(), expected.len());
        ensure!(
            sample_permutations("d", n, expected.len() + 1, &HashSet::new(), &mut rng).is_err(),
            "n={n}: oversampling accepted"
        );
    }

    let corpus = synthetic_corpus(50, 11, "u", Split::Train).unwrap();
    let ds = ok(build_permuted_dataset(&corpus, 20, 5, 3))?;
    ensure!(ds.len() == 50 * 20, "{} instances", ds.len());
    let mut seen: BTreeMap<&str, HashSet<Vec<usize>>> = BTreeMap::new();
    for inst in &ds {
        let Negatives::Permutation(p) = &inst.negatives else { return Err("intrusion negatives".into()) };
        ensure!(p.len() == 5, "{} negatives", p.len());
        for r in p {
            ensure!(r.order.iter().enumerate().any(|(i, &o)| i != o), "identity negative");
            ensure!(
                seen.entry(inst.positive.id.as_str()).or_default().insert(r.order.clone()),
                "{}: repeated order {:?}",
                inst.positive.id,
                r.order
            );
        }
    }

    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    ok(write_instances(&a, &ds))?;
    ok(write_instances(&b, &ok(build_permuted_dataset(&corpus, 20, 5, 3))?))?;
    ensure!(std::fs::read(&a).unwrap() == std::fs::read(&b).unwrap(), "library regeneration differs");

    let bin = env!("CARGO_BIN_EXE_coherence");
    let mut outputs = Vec::new();
    for name in ["g1", "g2"] {
        let out = dir.path().join(name);
        let status = Command::new(bin)
            .args(["generate", "--corpus", "builtin:synthetic", "--synthetic-docs", "60"])
            .args(["--holdout-docs", "20", "--seed", "17", "--out"])
            .arg(&out)
            .status()
            .map_err(|e| e.to_string())?;
        ensure!(status.success(), "generate exited with {status}");
        outputs.push(out);
    }
    let mut files = 0;
    for entry in std::fs::read_dir(&outputs[0]).unwrap() {
        let name = entry.unwrap().file_name();
        if name == "manifest.json" {
            continue;
        }
        let x = std::fs::read(outputs[0].join(&name)).unwrap();
        let y = std::fs::read(outputs[1].join(&name)).map_err(|e| e.to_string())?;
        ensure!(x == y, "{name:?} differs between same-seed runs");
        files += 1;
    }
    Ok(format!("enumeration n<=6 complete; 1000 instances unique; {files} generated files byte-identical"))
}

// ---------------------------------------------------------------- desk training

/// Corpus and thresholds for the desk runs; training settings come from
/// the files in `configs/`.
mod desk {
    pub const TRAIN_DOCS: usize = 600;
    pub const HOLDOUT_DOCS: usize = 100;
    pub const CORPUS_SEED: u64 = 7;
    pub const SEEDS: [u64; 3] = [1, 2, 3];
    pub const THRESHOLD: f64 = 0.95;
    pub const BUDGET_SECS: f64 = 600.0;
    pub const STABILITY_DEV_PER_DOC: usize = 3;
}

fn desk_config(name: &str, seed: u64) -> Result<RunConfig, String> {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name);
    resolve_config(Some(&path), &[], Some(seed)).map_err(|e| format!("{}: {e}", path.display()))
}

struct Desk {
    train: Corpus,
    dev_corpus: Corpus,
    dev: Vec<EvalPair>,
    test: Vec<EvalPair>,
}

impl Desk {
    fn new() -> Self {
        let [train, dev_corpus, test] =
            synthetic_splits(desk::TRAIN_DOCS, desk::HOLDOUT_DOCS, desk::HOLDOUT_DOCS, desk::CORPUS_SEED).unwrap();
        Desk {
            train,
            dev: permuted_eval_pairs(&dev_corpus, 1, 11).unwrap(),
            dev_corpus,
            test: permuted_eval_pairs(&test, 5, 12).unwrap(),
        }
    }

    fn run(&self, config: &str, seed: u64, dev: &[EvalPair]) -> Result<(f64, TrainLog), String> {
        let rc = desk_config(config, seed)?;
        let cfg = rc.trainer;
        let ds = ok(build_permuted_dataset(&self.train, 20, cfg.required_width(), seed))?;
        let (scorer, log) = ok(train(cfg, tiny(rc.layers, rc.dim, seed), &ds, dev, None))?;
        Ok((ok(pairwise_accuracy(&scorer, &self.test, false))?.value, log))
    }
}

fn desk_pairwise_threshold(desk: &Desk, accs: &mut Vec<f64>) -> Outcome {
    let mut lines = Vec::new();
    for &seed in &desk::SEEDS {
        let start = Instant::now();
        let (acc, _) = desk.run("desk_pairwise.toml", seed, &desk.dev)?;
        let secs = start.elapsed().as_secs_f64();
        accs.push(acc);
        lines.push(format!("seed {seed}: {:.2}% in {secs:.0}s", acc * 100.0));
        ensure!(secs <= desk::BUDGET_SECS, "seed {seed} took {secs:.0}s");
        ensure!(acc >= desk::THRESHOLD, "seed {seed}: {:.2}% held-out accuracy", acc * 100.0);
    }
    Ok(lines.join(", "))
}

fn desk_contrastive_ordering(desk: &Desk, pairwise: &[f64]) -> Outcome {
    ensure!(pairwise.len() == desk::SEEDS.len(), "pairwise runs missing");
    let mut accs = Vec::new();
    for &seed in &desk::SEEDS {
        accs.push(desk.run("desk_contrastive.toml", seed, &desk.dev)?.0);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (c, p) = (mean(&accs), mean(pairwise));
    ensure!(c >= p, "contrastive {:.2}% < pairwise {:.2}%", c * 100.0, p * 100.0);
    Ok(format!("contrastive {:.2}% >= pairwise {:.2}% (3-seed mean, equal steps)", c * 100.0, p * 100.0))
}

fn desk_stability(desk: &Desk) -> Outcome {
    let dev = ok(permuted_eval_pairs(&desk.dev_corpus, desk::STABILITY_DEV_PER_DOC, 11))?;
    let mut logs = Vec::new();
    let mut warmup = 0;
    for &seed in &desk::SEEDS {
        for (label, config) in [("ablation", "desk_mining_ablation.toml"), ("full", "desk_full.toml")] {
            let (_, log) = desk.run(config, seed, &dev)?;
            warmup = desk_config(config, seed)?.trainer.max_steps / 4;
            logs.push((label.to_string(), log));
        }
    }
    let rows = ok(stability_stats(&logs, warmup))?;
    let get = |l: &str| rows.iter().find(|r| r.label == l).unwrap();
    let (full, ablation) = (get("full"), get("ablation"));
    let detail = format!(
        "full std {:.4} {:?} vs mining-only std {:.4} {:?}",
        full.std,
        full.per_run_std.iter().map(|s| format!("{s:.4}")).collect::<Vec<_>>(),
        ablation.std,
        ablation.per_run_std.iter().map(|s| format!("{s:.4}")).collect::<Vec<_>>()
    );
    ensure!(full.std <= ablation.std, "{detail}");
    Ok(detail)
}

// ---------------------------------------------------------------- evaluation

/// Krippendorff's nominal alpha written as one minus the ratio of observed to
/// expected pairwise disagreement, counting ordered value pairs directly.
fn alpha_oracle(m: &[Vec<Option<u8>>]) -> Option<f64> {
    let items = m[0].len();
    let mut units: Vec<Vec<u8>> = Vec::new();
    for j in 0..items {
        let vals: Vec<u8> = m.iter().filter_map(|r| r[j]).collect();
        if vals.len() >= 2 {
            units.push(vals);
        }
    }
    let pooled: Vec<u8> = units.iter().flatten().copied().collect();
    let n = pooled.len() as f64;
    let mut observed = 0.0;
    for u in &units {
        let mu = u.len() as f64;
        let mut dis = 0.0;
        for a in 0..u.len() {
            for b in 0..u.len() {
                if a != b && u[a] != u[b] {
                    dis += 1.0;
                }
            }
        }
        observed += dis / (mu - 1.0);
    }
    observed /= n;
    let mut expected = 0.0;
    for a in 0..pooled.len() {
        for b in 0..pooled.len() {
            if a != b && pooled[a] != pooled[b] {
                expected += 1.0;
            }
        }
    }
    expected /= n * (n - 1.0);
    if expected == 0.0 {
        None
    } else {
        Some(1.0 - observed / expected)
    }
}

fn krippendorff() -> Outcome {
    let perfect: Vec<Vec<Option<u8>>> = vec![vec![Some(0), Some(1), Some(2), Some(1), None]; 3];
    let a = ok(krippendorff_alpha(&perfect))?;
    ensure!(a == 1.0, "perfect agreement gave {a}");

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut compared = 0;
    while compared < 50 {
        let raters = rng.gen_range(2..6);
        let items = rng.gen_range(2..15);
        let k = rng.gen_range(2..5u8);
        let m: Vec<Vec<Option<u8>>> = (0..raters)
            .map(|_| (0..items).map(|_| rng.gen_bool(0.8).then(|| rng.gen_range(0..k))).collect())
            .collect();
        let Some(expected) = alpha_oracle(&m) else {
            ensure!(krippendorff_alpha(&m).is_err(), "undefined alpha returned a value");
            continue;
        };
        let got = ok(krippendorff_alpha(&m))?;
        ensure!((got - expected).abs() <= 1e-10, "matrix {compared}: {got} vs {expected}");
        compared += 1;
    }

    let systematic: Vec<Vec<Option<u8>>> = vec![
        (0..10).map(|i| Some((i % 2) as u8)).collect(),
        (0..10).map(|i| Some(1 - (i % 2) as u8)).collect(),
    ];
    let a = ok(krippendorff_alpha(&systematic))?;
    ensure!(a < 0.0, "systematic disagreement gave {a}");
    Ok(format!("perfect = 1 exactly; 50 random matrices within 1e-10; systematic disagreement {a:.3}"))
}

fn bookkeeping() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut texts = Vec::new();
    for article in 0..100 {
        for system in 0..16 {
            // Integer ratings on a 1-5 scale from three raters: equal means occur.
            let ratings: Vec<f64> = (0..3).map(|_| rng.gen_range(1..=5) as f64).collect();
            texts.push(RatedText {
                key: format!("art{article:03}"),
                document: Document::new(format!("art{article:03}-sys{system:02}"), vec![format!("Summary {system} of {article}.")]).unwrap(),
                ratings,
            });
        }
    }
    let pairs = ok(pair_from_ratings(&texts))?;
    ensure!(pairs.len() == 120 * 100, "{} pairs", pairs.len());
    let mean = |r: &[f64]| r.iter().sum::<f64>() / r.len() as f64;
    let mut expected_ties = 0;
    for a in 0..100 {
        let group = &texts[a * 16..(a + 1) * 16];
        for i in 0..16 {
            for j in i + 1..16 {
                if mean(&group[i].ratings) == mean(&group[j].ratings) {
                    expected_ties += 1;
                }
            }
        }
    }
    let ties = pairs.iter().filter(|p| p.tie).count();
    ensure!(ties == expected_ties && ties > 0, "{ties} ties flagged, expected {expected_ties}");
    let report = ok(pairwise_accuracy(&FnScorer(|d: &Document| d.sentences[0].len() as f64), &pairs, false))?;
    ensure!(report.pair_count == 12_000 - ties, "{} pairs scored", report.pair_count);
    ensure!(report.excluded_count == ties, "{} excluded", report.excluded_count);

    // Probe categories of 100 and 95 items; the scorer prefers the positive
    // on every third item.
    let doc = |id: String| Document::new(id, vec!["x.".into()]).unwrap();
    let mut probes = Vec::new();
    for (cat, size) in [("hundred", 100), ("ninety-five", 95)] {
        for i in 0..size {
            probes.push(EvalPair {
                pair_id: format!("{cat}{i}"),
                positive: doc(format!("{cat}-{i}-{}", if i % 3 == 0 { "good" } else { "bad" })),
                negative: doc(format!("{cat}-{i}-neg")),
                category: Some(cat.into()),
                annotator_labels: None,
                tie: false,
            });
        }
    }
    let scorer = FnScorer(|d: &Document| if d.id.ends_with("good") { 1.0 } else if d.id.ends_with("neg") { 0.5 } else { 0.0 });
    let report = ok(probe_accuracy(&scorer, &probes))?;
    let c95 = &report.categories["ninety-five"];
    let c100 = &report.categories["hundred"];
    ensure!(c95.pairs == 95 && c95.correct == 32, "95-item category: {}/{}", c95.correct, c95.pairs);
    ensure!(c100.pairs == 100 && c100.correct == 34, "100-item category: {}/{}", c100.correct, c100.pairs);
    ensure!((c95.accuracy - 32.0 / 95.0).abs() < 1e-12, "95-item accuracy {}", c95.accuracy);
    Ok(format!("12000 pairs, {ties} ties flagged and excluded; probe denominators 100 and 95"))
}

// ---------------------------------------------------------------- checkpoint

fn checkpoint_roundtrip() -> Outcome {
    let corpus = synthetic_corpus(40, 5, "c", Split::Train).unwrap();
    let dev_corpus = synthetic_corpus(10, 5, "cd", Split::Dev).unwrap();
    let ds = ok(build_permuted_dataset(&corpus, 5, 6, 2))?;
    let dev = ok(permuted_eval_pairs(&dev_corpus, 1, 3))?;
    let cfg = TrainerConfig {
        learning_rate: 5e-3,
        lr_floor: 1e-3,
        anneal_steps: Some(300),
        momentum: 0.99,
        h: 6,
        x: 20,
        queue_size: 50,
        max_steps: 510,
        eval_every: 50,
        seed: 21,
        ..TrainerConfig::for_regime(Regime::Full)
    };
    let mut t = ok(Trainer::new(cfg, tiny(1, 16, 4), &ds, &dev))?;
    ok(t.run_until(500))?;
    let dir = tempfile::tempdir().unwrap();
    ok(checkpoint::save(dir.path(), &t))?;
    let original: Vec<_> = (0..10).map(|_| t.step()).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    let mut resumed = ok(ok(checkpoint::load(dir.path()))?.into_trainer(&ds, &dev))?;
    ensure!(resumed.step_index() == 500, "resumed at step {}", resumed.step_index());
    for (k, a) in original.iter().enumerate() {
        let b = ok(resumed.step())?;
        let bits = |r: &coherence::trainer::StepRecord| (r.loss.to_bits(), r.primary.to_bits(), r.momentum.map(f64::to_bits));
        ensure!(bits(a) == bits(&b), "step {}: {} vs {}", 501 + k, a.loss, b.loss);
    }
    ensure!(resumed.scorer.encoder == t.scorer.encoder, "parameters diverged");
    Ok("steps 501-510 bit-identical after reload".into())
}

// ---------------------------------------------------------------- driver

fn main() -> ExitCode {
    // Single-threaded mode for the bit-identical resume check.
    std::env::set_var("RAYON_NUM_THREADS", "1");
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let selected = |name: &str| filters.is_empty() || filters.iter().any(|f| name.contains(f.as_str()));

    let mut results: Vec<(String, bool)> = Vec::new();
    let mut run = |name: &str, f: &mut dyn FnMut() -> Outcome| {
        if !selected(name) {
            return;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(|| f())).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("{tag} {name}: {detail} [{secs:.1}s]");
        results.push((name.to_string(), outcome.is_ok()));
    };

    run("loss oracles", &mut loss_oracles);
    run("gradient checks", &mut gradient_checks);
    run("miner oracle", &mut miner_oracle);
    run("queue and momentum", &mut queue_and_momentum);
    run("data generation", &mut data_generation);
    if selected("desk training") {
        let desk = Desk::new();
        let mut pairwise = Vec::new();
        run("desk training (a) pairwise threshold", &mut || desk_pairwise_threshold(&desk, &mut pairwise));
        run("desk training (b) contrastive vs pairwise", &mut || desk_contrastive_ordering(&desk, &pairwise));
        run("desk training (c) stability", &mut || desk_stability(&desk));
    }
    run("krippendorff alpha", &mut krippendorff);
    run("evaluation bookkeeping", &mut bookkeeping);
    run("checkpoint round-trip", &mut checkpoint_roundtrip);

    let failed: Vec<&str> = results.iter().filter(|r| !r.1).map(|r| r.0.as_str()).collect();
    println!("{} passed, {} failed", results.len() - failed.len(), failed.len());
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
