//! Property tests of invariants that hold for any input.

use std::collections::BTreeSet;

use pdarts::cell::{edge_mix_forward, init_alphas, AlphaTable, CandidateSchema, CellSpec, CellType, MixedOp};
use pdarts::genotype::{connection_levels, derive_genotype, random_genotype, refine_skips, Genotype};
use pdarts::nn::Ctx;
use pdarts::ops::OpKind;
use pdarts::optim::{self, OptimizerConfig};
use pdarts::params::ParamStore;
use pdarts::search::prune_operations;
use pdarts::tensor::{NormMode, Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn alpha_table(nodes: usize, values: &[f64]) -> AlphaTable {
    let mut a = init_alphas(&CandidateSchema::full(CellSpec::new(nodes).unwrap()), 0).unwrap();
    let mut it = values.iter().cycle();
    for t in CellType::BOTH {
        for e in a.cell_mut(t) {
            for v in &mut e.alpha {
                *v = *it.next().unwrap();
            }
        }
    }
    a
}

fn alphas_strategy(nodes: usize) -> impl Strategy<Value = AlphaTable> {
    let n = 2 * CellSpec::new(nodes).unwrap().edge_count() * OpKind::COUNT;
    prop::collection::vec(-3.0f64..3.0, n).prop_map(move |v| alpha_table(nodes, &v))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn batch_norm_standardizes_each_channel(
        data in prop::collection::vec(-5.0f64..5.0, 2 * 3 * 4 * 4),
        scale in prop::collection::vec(0.5f64..4.0, 3),
    ) {
        let mut t = Tape::<f64>::new();
        let plane = 16;
        let scaled: Vec<f64> = data.iter().enumerate().map(|(i, v)| v * scale[(i / plane) % 3]).collect();
        let x = t.constant(vec![2, 3, 4, 4], scaled.clone()).unwrap();
        let (y, _) = t.batch_norm(x, None, None, 1e-5, NormMode::Train).unwrap();
        let out = t.value(y);
        for ch in 0..3 {
            let vals: Vec<f64> = (0..2).flat_map(|n| out[(n * 3 + ch) * plane..(n * 3 + ch + 1) * plane].to_vec()).collect();
            let raw: Vec<f64> = (0..2).flat_map(|n| scaled[(n * 3 + ch) * plane..(n * 3 + ch + 1) * plane].to_vec()).collect();
            let raw_mean = raw.iter().sum::<f64>() / 32.0;
            let raw_var = raw.iter().map(|v| (v - raw_mean).powi(2)).sum::<f64>() / 32.0;
            prop_assume!(raw_var > 1e-2);
            let mean = vals.iter().sum::<f64>() / 32.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 32.0;
            prop_assert!(mean.abs() <= 1e-5);
            prop_assert!((var - 1.0).abs() <= 1e-3);
        }
    }

    #[test]
    fn uniform_logits_cost_log_k(k in 2usize..=10, c in -20.0f64..20.0, n in 1usize..4) {
        let mut t = Tape::<f64>::new();
        let x = t.constant(vec![n, k], vec![c; n * k]).unwrap();
        let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
        let loss = t.cross_entropy(x, &labels).unwrap();
        prop_assert!((t.value(loss)[0] - (k as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn edge_weights_form_a_simplex(a in alphas_strategy(2)) {
        for t in CellType::BOTH {
            for e in a.cell(t) {
                let s: f64 = e.weights().iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
                prop_assert!(e.weights().iter().all(|&w| w > 0.0));
            }
        }
    }

    #[test]
    fn derivation_ignores_per_edge_shifts(
        a in alphas_strategy(3),
        shifts in prop::collection::vec(-50.0f64..50.0, 18),
    ) {
        let mut shifted = a.clone();
        let mut i = 0;
        for t in CellType::BOTH {
            for e in shifted.cell_mut(t) {
                for v in &mut e.alpha {
                    *v += shifts[i];
                }
                i += 1;
            }
        }
        prop_assert_eq!(derive_genotype(&a).unwrap(), derive_genotype(&shifted).unwrap());
    }

    #[test]
    fn refinement_caps_skips_and_keeps_other_picks(a in alphas_strategy(4), m in 0usize..5) {
        let r = refine_skips(&a, m, CellType::Normal).unwrap();
        prop_assert!(r.genotype.skip_count(CellType::Normal) <= m);
        prop_assert_eq!(&r.genotype.reduce, &r.initial.reduce);
        let kept: BTreeSet<(usize, usize, OpKind)> = r.genotype.normal.iter().enumerate()
            .flat_map(|(n, picks)| picks.iter().map(move |p| (n, p.from, p.op)))
            .collect();
        for (n, picks) in r.initial.normal.iter().enumerate() {
            for p in picks.iter().filter(|p| p.op != OpKind::SkipConnect) {
                prop_assert!(kept.contains(&(n, p.from, p.op)));
            }
        }
    }

    #[test]
    fn levels_total_two_per_node(seed in any::<u64>(), nodes in 1usize..6) {
        let g = random_genotype(nodes, &mut ChaCha8Rng::seed_from_u64(seed));
        let levels = connection_levels(&g);
        for t in CellType::BOTH {
            let h = levels.cell(t);
            prop_assert_eq!(h.values().sum::<usize>(), 2 * nodes);
            prop_assert!(*h.keys().next().unwrap() >= 1);
            prop_assert!(*h.keys().last().unwrap() <= nodes);
        }
    }

    #[test]
    fn derived_genotypes_are_valid_with_two_b_edges(a in alphas_strategy(4)) {
        let g = derive_genotype(&a).unwrap();
        g.validate().unwrap();
        let levels = connection_levels(&g);
        prop_assert_eq!(levels.normal.values().sum::<usize>(), 8);
        prop_assert!(levels.normal.keys().max().copied().unwrap_or(0) >= 1);
    }

    #[test]
    fn genotype_text_round_trips(seed in any::<u64>(), nodes in 1usize..6) {
        let g = random_genotype(nodes, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(Genotype::from_json(&g.to_json()).unwrap(), g);
    }

    #[test]
    fn pruning_keeps_exactly_the_top_k(a in alphas_strategy(2), keep in 1usize..8) {
        let schema = prune_operations(&a, keep).unwrap();
        for t in CellType::BOTH {
            for (e, kept) in a.cell(t).iter().zip(schema.cell(t)) {
                prop_assert_eq!(kept.len(), keep);
                // brute force: a candidate survives iff fewer than `keep` others outrank it
                let w = e.weights();
                for (i, kind) in e.candidates.iter().enumerate() {
                    let outranked_by = (0..w.len())
                        .filter(|&j| w[j] > w[i] || (w[j] == w[i] && e.candidates[j] < *kind))
                        .count();
                    prop_assert_eq!(kept.contains(kind), outranked_by < keep);
                }
            }
        }
    }

    #[test]
    fn successive_pruning_follows_the_original_ranking(a in alphas_strategy(2)) {
        let five = prune_operations(&a, 5).unwrap();
        let mut restricted = a.clone();
        for t in CellType::BOTH {
            for (e, kept) in restricted.cell_mut(t).iter_mut().zip(five.cell(t)) {
                let (c, v): (Vec<OpKind>, Vec<f64>) = e.candidates.iter().zip(&e.alpha)
                    .filter(|(k, _)| kept.contains(k))
                    .map(|(k, v)| (*k, *v))
                    .unzip();
                e.candidates = c;
                e.alpha = v;
            }
        }
        let three = prune_operations(&restricted, 3).unwrap();
        let direct = prune_operations(&a, 3).unwrap();
        prop_assert_eq!(three, direct);
    }

    #[test]
    fn top_candidate_survives_constant_shift(a in alphas_strategy(2), shift in -100.0f64..100.0) {
        let mut b = a.clone();
        for t in CellType::BOTH {
            for e in b.cell_mut(t) {
                e.alpha.iter_mut().for_each(|v| *v += shift);
            }
        }
        prop_assert_eq!(prune_operations(&a, 1).unwrap(), prune_operations(&b, 1).unwrap());
    }

    #[test]
    fn removing_a_candidate_moves_the_edge_by_its_weight(
        seed in any::<u64>(),
        alpha in prop::collection::vec(-2.0f64..2.0, 8),
        drop in 0usize..8,
    ) {
        let edge = MixedOp::new(&OpKind::ALL, 4, 1, false, "e").unwrap();
        let mut store = ParamStore::<f64>::new();
        edge.registry().init_store(&mut store, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let mut ctx = Ctx::new(&store, false, true, seed);
        let mut r = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let x = ctx.tape.constant(vec![2, 4, 4, 4], (0..128).map(|_| rand::Rng::random_range(&mut r, -1.0..1.0)).collect()).unwrap();
        let w = pdarts::tensor::softmax_slice(&alpha);
        let full_w = ctx.tape.constant(vec![8], w.clone()).unwrap();
        let full = edge_mix_forward(&mut ctx, &edge, full_w, x, 0.0).unwrap();
        let mut cut = w.clone();
        cut[drop] = 0.0;
        let cut_w = ctx.tape.constant(vec![8], cut).unwrap();
        let pruned = edge_mix_forward(&mut ctx, &edge, cut_w, x, 0.0).unwrap();
        let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
        let diff: Vec<f64> = ctx.tape.value(full).iter().zip(ctx.tape.value(pruned)).map(|(a, b)| a - b).collect();
        let mut max_out = 0.0f64;
        for op in &edge.ops {
            let y = op.forward(&mut ctx, x).unwrap();
            max_out = max_out.max(norm(ctx.tape.value(y)));
        }
        prop_assert!(norm(&diff) <= w[drop] * max_out + 1e-9);
    }

    #[test]
    fn moment_buffers_track_parameter_shapes(
        shapes in prop::collection::vec(prop::collection::vec(1usize..4, 1..4), 1..4),
        adam in any::<bool>(),
    ) {
        let mut store = ParamStore::<f64>::new();
        for (i, s) in shapes.iter().enumerate() {
            let n = s.iter().product();
            let mut t = Tensor::new(s.clone(), vec![0.5; n]).unwrap();
            t.set_grad(vec![0.1; n]).unwrap();
            store.insert(format!("p{i}"), t).unwrap();
        }
        let cfg = if adam {
            OptimizerConfig::adam(1e-3, 0.5, 0.999, 1e-3)
        } else {
            OptimizerConfig::sgd_cosine(0.1, 0.0, 10, 3e-4)
        };
        optim::step(&mut store, &cfg, 0).unwrap();
        let names: Vec<String> = store.names().map(String::from).collect();
        for (name, t) in store.iter() {
            let st = store.state(name).unwrap();
            prop_assert_eq!(st.first.as_ref().map(Vec::len), Some(t.len()));
            if adam {
                prop_assert_eq!(st.second.as_ref().map(Vec::len), Some(t.len()));
            }
        }
        // gradients are transient and not part of a checkpoint
        store.zero_grads();
        let back = ParamStore::<f64>::from_bytes(&store.to_bytes()).unwrap();
        prop_assert_eq!(back.names().map(String::from).collect::<Vec<_>>(), names);
        prop_assert_eq!(back, store);
    }
}
