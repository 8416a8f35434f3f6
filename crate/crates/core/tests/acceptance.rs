//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Built with `harness = false` so the lines show
//! under a plain `cargo test`.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use pdarts::cell::{init_alphas, AlphaTable, CandidateSchema, CellSpec, CellType};
use pdarts::config::desk_search;
use pdarts::data::{synth_dataset, SynthPreset};
use pdarts::eval::{build_eval_net, train_eval, EvalConfig};
use pdarts::genotype::{connection_levels, derive_genotype, random_genotype, refine_skips, Genotype, Pick};
use pdarts::gradcheck::gradient_suite;
use pdarts::ops::OpKind;
use pdarts::rng::{derive_seed, Purpose};
use pdarts::search::*;
use pdarts::supernet::{activation_count_proxy, dry_run, SearchNetConfig, SuperNet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        passed,
        detail: detail.into(),
    }
}

// 1 ------------------------------------------------------------------------

fn gradients() -> Verdict {
    let t = Instant::now();
    let reports = gradient_suite(20).expect("suite runs");
    let worst = reports.iter().map(|r| r.max_error).fold(0.0, f64::max);
    let failing: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    let elapsed = t.elapsed();
    verdict(
        failing.is_empty() && worst <= 1e-5 && elapsed < Duration::from_secs(300),
        format!(
            "{} checks x 20 seeds, max rel error {worst:.2e} (<= 1e-5), {elapsed:.0?}{}",
            reports.len(),
            if failing.is_empty() { String::new() } else { format!(", failing: {failing:?}") }
        ),
    )
}

// 2 ------------------------------------------------------------------------

fn simplex() -> Verdict {
    let data = synth_dataset(SynthPreset::EasyFit, 0, 128, 4, 8).unwrap();
    let cfg = desk_search();
    let net = SuperNet::build(
        cfg.net_config(&cfg.stages[0], &data),
        &CandidateSchema::full(CellSpec::new(cfg.nodes).unwrap()),
    )
    .unwrap();
    let mut state = SearchState::<f32>::fresh(&net, 0, 0).unwrap();
    let (w_opt, a_opt) = (cfg.weight_optimizer(1), cfg.alpha_optimizer());
    let mut worst = 0.0f64;
    for step in 0..200u64 {
        let b = epoch_batches(data.len(), 32, 1, &[step]);
        let input = |i: usize, s: u64| StepInput {
            data: &data,
            indices: &b[i],
            skip_dropout: 0.0,
            dropout_seed: s,
        };
        alpha_step(&net, &mut state, &a_opt, &input(0, step)).unwrap();
        state.sync_alphas().unwrap();
        for t in CellType::BOTH {
            for e in state.alphas.cell(t) {
                worst = worst.max((e.weights().iter().sum::<f64>() - 1.0).abs());
            }
        }
        weight_step(&net, &mut state, &w_opt, 0, &input(1, step)).unwrap();
    }
    verdict(worst <= 1e-6, format!("200 alpha steps, max |sum w - 1| = {worst:.1e} (<= 1e-6)"))
}

// 3 and 4 ------------------------------------------------------------------

fn full_scale_net(stage: &StageConfig) -> SearchNetConfig {
    SearchNetConfig {
        cells: stage.cells,
        channels: stage.channels,
        nodes: 4,
        num_classes: 10,
        input_size: 32,
        input_channels: 3,
    }
}

fn schedule() -> Verdict {
    let stages = StageSchedule::full_scale().stages;
    let mut schema = CandidateSchema::full(CellSpec::new(4).unwrap());
    let mut counts = Vec::new();
    let mut ok = true;
    for (k, stage) in stages.iter().enumerate() {
        counts.push(schema.count(CellType::Normal).unwrap_or(0));
        ok &= CellType::BOTH.iter().all(|&t| schema.count(t) == Some(stage.candidates));
        ok &= dry_run(full_scale_net(stage), &schema).is_ok();
        if let Some(next) = stages.get(k + 1) {
            let alphas = init_alphas(&schema, k as u64).unwrap();
            schema = prune_operations(&alphas, next.candidates).unwrap();
        }
    }
    ok &= counts == [8, 5, 3];
    verdict(ok, format!("candidates per edge {counts:?} (expected [8, 5, 3]), dry runs of L = 5/11/17 built"))
}

fn memory_proxy() -> Verdict {
    let stages = StageSchedule::full_scale().stages;
    let proxy: Vec<f64> = stages
        .iter()
        .map(|s| activation_count_proxy(full_scale_net(s), s.candidates).unwrap() as f64)
        .collect();
    let (r2, r3) = (proxy[1] / proxy[0], proxy[2] / proxy[0]);
    let (t2, t3) = (14.0 / 9.8, 14.2 / 9.8);
    let within = |r: f64, t: f64| (r - t).abs() <= 0.25 * t;
    verdict(
        within(r2, t2) && within(r3, t3),
        format!("stage2/stage1 {r2:.3} (target {t2:.3} +-25%), stage3/stage1 {r3:.3} (target {t3:.3} +-25%)"),
    )
}

// 5 and 6: independent oracles on B = 2 cells ---------------------------------

const B: usize = 2;

/// Weight of every kind on every edge; `None` where a candidate is removed.
type EdgeTable = Vec<[Option<f64>; 8]>;

fn table(alphas: &AlphaTable, t: CellType) -> EdgeTable {
    alphas
        .cell(t)
        .iter()
        .map(|e| {
            let mut row = [None; 8];
            for (k, w) in e.candidates.iter().zip(e.weights()) {
                row[*k as usize] = Some(w);
            }
            row
        })
        .collect()
}

/// Exhaustive search: for each node, every pair of distinct sources and
/// every non-zero operation on each, maximizing the summed weight.
fn oracle_cell(w: &EdgeTable) -> Vec<[Pick; 2]> {
    let spec = CellSpec::new(B).unwrap();
    let mut cell = Vec::new();
    for to in 2..B + 2 {
        let first = spec.first_edge(to);
        let mut best: Option<(f64, [Pick; 2])> = None;
        for i in 0..to {
            for j in i + 1..to {
                for oi in 1..8 {
                    for oj in 1..8 {
                        let (Some(wi), Some(wj)) = (w[first + i][oi], w[first + j][oj]) else {
                            continue;
                        };
                        let picks = [
                            Pick {
                                op: OpKind::ALL[oi],
                                from: i,
                            },
                            Pick {
                                op: OpKind::ALL[oj],
                                from: j,
                            },
                        ];
                        if best.is_none_or(|(s, _)| wi + wj > s) {
                            best = Some((wi + wj, picks));
                        }
                    }
                }
            }
        }
        cell.push(best.expect("every edge has a non-zero candidate").1);
    }
    cell
}

fn random_alphas(r: &mut ChaCha8Rng, skip_bias: f64) -> AlphaTable {
    let mut a = init_alphas(&CandidateSchema::full(CellSpec::new(B).unwrap()), 0).unwrap();
    for t in CellType::BOTH {
        for e in a.cell_mut(t) {
            for (k, v) in e.candidates.iter().zip(e.alpha.iter_mut()) {
                let z: f64 = r.sample(StandardNormal);
                *v = z + if *k == OpKind::SkipConnect { skip_bias } else { 0.0 };
            }
        }
    }
    a
}

fn derivation() -> Verdict {
    let mut r = ChaCha8Rng::seed_from_u64(derive_seed(6, Purpose::AlphaInit, &[]));
    let mut mismatches = 0;
    for _ in 0..1000 {
        let a = random_alphas(&mut r, 0.0);
        let g = derive_genotype(&a).unwrap();
        for t in CellType::BOTH {
            mismatches += usize::from(g.cell(t) != oracle_cell(&table(&a, t)).as_slice());
        }
    }
    verdict(mismatches == 0, format!("1000 random tables, {mismatches} mismatches against exhaustive enumeration"))
}

fn skip_weights(cell: &[[Pick; 2]], w: &EdgeTable) -> Vec<f64> {
    let spec = CellSpec::new(B).unwrap();
    cell.iter()
        .enumerate()
        .flat_map(|(n, picks)| picks.iter().map(move |p| (n + 2, p)))
        .filter(|(_, p)| p.op == OpKind::SkipConnect)
        .map(|(to, p)| w[spec.first_edge(to) + p.from][OpKind::SkipConnect as usize].unwrap())
        .collect()
}

/// Tries every subset of edges whose skip candidate is removed and keeps the
/// smallest ones that leave at most `m` skips, all at least as heavy as any
/// removed skip. Returns the cells those subsets derive.
fn suppression_oracle(w: &EdgeTable, m: usize) -> Vec<Vec<[Pick; 2]>> {
    let edges = w.len();
    let mut best: Option<(u32, Vec<Vec<[Pick; 2]>>)> = None;
    for mask in 0u32..(1 << edges) {
        let mut wm = w.clone();
        let mut removed = Vec::new();
        for (e, row) in wm.iter_mut().enumerate() {
            if mask & (1 << e) != 0 {
                removed.push(row[OpKind::SkipConnect as usize].unwrap());
                row[OpKind::SkipConnect as usize] = None;
            }
        }
        let cell = oracle_cell(&wm);
        let kept = skip_weights(&cell, &wm);
        let lightest_kept = kept.iter().cloned().fold(f64::INFINITY, f64::min);
        if kept.len() > m || removed.iter().any(|&x| x > lightest_kept) {
            continue;
        }
        let size = mask.count_ones();
        match &mut best {
            Some((s, cells)) if *s == size => {
                if !cells.contains(&cell) {
                    cells.push(cell);
                }
            }
            Some((s, _)) if *s < size => {}
            _ => best = Some((size, vec![cell])),
        }
    }
    best.expect("removing every skip always qualifies").1
}

fn refinement() -> Verdict {
    let mut r = ChaCha8Rng::seed_from_u64(derive_seed(5, Purpose::AlphaInit, &[]));
    let (mut cases, mut over, mut wrong, mut altered, mut ambiguous, mut active) = (0, 0, 0, 0, 0, 0);
    for i in 0..100 {
        // half the tables lean towards skip-connect so that the cap binds
        let a = random_alphas(&mut r, if i % 2 == 0 { 1.5 } else { 0.0 });
        let w = table(&a, CellType::Normal);
        for m in 0..=4 {
            cases += 1;
            let out = refine_skips(&a, m, CellType::Normal).unwrap();
            let cell = &out.genotype.normal;
            over += usize::from(out.genotype.skip_count(CellType::Normal) > m);
            active += usize::from(!out.suppressed.is_empty());
            let expected = suppression_oracle(&w, m);
            ambiguous += usize::from(expected.len() > 1);
            wrong += usize::from(!expected.contains(cell));
            let kept: Vec<(usize, Pick)> =
                cell.iter().enumerate().flat_map(|(n, p)| p.iter().map(move |q| (n, *q))).collect();
            altered += out
                .initial
                .normal
                .iter()
                .enumerate()
                .flat_map(|(n, p)| p.iter().map(move |q| (n, *q)))
                .filter(|(_, q)| q.op != OpKind::SkipConnect)
                .filter(|x| !kept.contains(x))
                .count();
        }
    }
    verdict(
        over == 0 && wrong == 0 && altered == 0,
        format!(
            "{cases} cases ({active} with suppression): {over} over the cap, {wrong} differ from the \
             suppression-subset oracle ({ambiguous} ambiguous), {altered} non-skip picks altered"
        ),
    )
}

// 7 ------------------------------------------------------------------------

fn with_dropout(on: bool) -> SearchConfig {
    let mut cfg = desk_search();
    if !on {
        cfg.stages.iter_mut().for_each(|s| s.dropout = 0.0);
    }
    cfg
}

fn skip_dominance() -> Verdict {
    let t = Instant::now();
    let runs: Vec<(usize, usize)> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..5u64)
            .map(|seed| {
                s.spawn(move || {
                    let data = synth_dataset(SynthPreset::EasyFit, 100 + seed, 256, 4, 8).unwrap();
                    let count = |on| {
                        run_progressive_search::<f32>(&with_dropout(on), &data, seed, None)
                            .unwrap()
                            .derived
                            .skip_count(CellType::Normal)
                    };
                    (count(false), count(true))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let mean = |f: fn(&(usize, usize)) -> usize| runs.iter().map(f).sum::<usize>() as f64 / runs.len() as f64;
    let (off, on) = (mean(|r| r.0), mean(|r| r.1));
    let strict = runs.iter().any(|r| r.1 < r.0);
    let elapsed = t.elapsed();
    verdict(
        off >= on && strict && elapsed < Duration::from_secs(1800),
        format!("skips per seed (off, on) {runs:?}, means {off:.1} vs {on:.1}, {elapsed:.0?}"),
    )
}

// 8 ------------------------------------------------------------------------

fn eval_config() -> EvalConfig {
    EvalConfig {
        cells: 4,
        channels: 8,
        epochs: 6,
        batch_size: 32,
        cutout: 4,
        drop_path: 0.2,
        aux_weight: 0.4,
        ..EvalConfig::default()
    }
}

fn search_quality() -> Verdict {
    let t = Instant::now();
    const CLASSES: usize = 8;
    let train = synth_dataset(SynthPreset::Texture, 1, 256, CLASSES, 8).unwrap();
    let test = synth_dataset(SynthPreset::Texture, 2, 256, CLASSES, 8).unwrap();
    let ecfg = eval_config();
    let accuracy = |g: &Genotype| {
        let net = build_eval_net(g, &ecfg, CLASSES, 8, 3).unwrap();
        train_eval::<f32>(&net, &ecfg, &train, &test, 7, None).unwrap().final_accuracy
    };
    let (mut random, searched): (Vec<f64>, Vec<f64>) = std::thread::scope(|s| {
        let random: Vec<_> = (0..10u64)
            .map(|i| s.spawn(move || random_genotype(2, &mut ChaCha8Rng::seed_from_u64(1000 + i))))
            .map(|h| h.join().unwrap())
            .map(|g| s.spawn(move || accuracy(&g)))
            .collect();
        let searched: Vec<_> = (0..5u64)
            .map(|seed| {
                let train = &train;
                s.spawn(move || {
                    let g = run_progressive_search::<f32>(&desk_search(), train, seed, None).unwrap().genotype;
                    accuracy(&g)
                })
            })
            .collect();
        (
            random.into_iter().map(|h| h.join().unwrap()).collect(),
            searched.into_iter().map(|h| h.join().unwrap()).collect(),
        )
    });
    random.sort_by(f64::total_cmp);
    let median = (random[4] + random[5]) / 2.0;
    let wins = searched.iter().filter(|&&a| a >= median).count();
    let elapsed = t.elapsed();
    verdict(
        wins >= 4 && elapsed < Duration::from_secs(7200),
        format!(
            "random median {median:.3}, searched {:?}, {wins}/5 at or above, {elapsed:.0?}",
            searched.iter().map(|a| format!("{a:.3}")).collect::<Vec<_>>()
        ),
    )
}

// 9 ------------------------------------------------------------------------

fn determinism() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let run = |out: &str| {
        let o = Command::new(env!("CARGO_BIN_EXE_pdarts"))
            .args(["search", "--seed", "11", "--out", out])
            .current_dir(dir.path())
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    };
    std::thread::scope(|s| {
        s.spawn(|| run("a"));
        s.spawn(|| run("b"));
    });
    let mut files = vec!["genotype.json".to_string(), "genotype_unrefined.json".into(), "metrics.csv".into()];
    files.extend((1..=3).map(|k| format!("stage{k}/metrics.csv")));
    let read = |root: &str, f: &str| std::fs::read(Path::new(dir.path()).join(root).join(f)).unwrap();
    let differing: Vec<&String> = files.iter().filter(|f| read("a", f) != read("b", f)).collect();
    verdict(
        differing.is_empty(),
        format!("two `pdarts search --seed 11` runs, {} files compared, differing: {differing:?}", files.len()),
    )
}

// 10 -----------------------------------------------------------------------

fn cell_of(sources: &[[usize; 2]]) -> Vec<[Pick; 2]> {
    sources
        .iter()
        .map(|s| s.map(|from| Pick {
            op: OpKind::SepConv3x3,
            from,
        }))
        .collect()
}

fn levels() -> Verdict {
    // flat, B = 4: every pick reads an input, so all eight edges sit at level 1
    let flat = cell_of(&[[0, 1]; 4]);
    // chain, B = 4: node j reads input 0 and node j-1. Node levels 1, 2, 3, 4;
    // edges from input 0 are level 1 (four of them, plus node 2's edge from
    // input 1), edges from nodes 2, 3, 4 are levels 2, 3, 4.
    let chain = cell_of(&[[0, 1], [0, 2], [0, 3], [0, 4]]);
    let expect_flat = BTreeMap::from([(1, 8)]);
    let expect_chain = BTreeMap::from([(1, 5), (2, 1), (3, 1), (4, 1)]);
    let g = Genotype {
        normal: flat,
        reduce: chain,
        concat: Genotype::default_concat(4),
    };
    g.validate().unwrap();
    let l = connection_levels(&g);
    let mut ok = l.normal == expect_flat && l.reduce == expect_chain;
    let mut r = ChaCha8Rng::seed_from_u64(10);
    let mut bad_totals = 0;
    for i in 0..1000 {
        let b = 1 + i % 6;
        let g = random_genotype(b, &mut r);
        let l = connection_levels(&g);
        bad_totals += CellType::BOTH
            .iter()
            .filter(|&&t| l.cell(t).values().sum::<usize>() != 2 * b)
            .count();
    }
    ok &= bad_totals == 0;
    verdict(
        ok,
        format!(
            "flat {:?}, chain {:?}, {bad_totals} wrong totals over 1000 random genotypes",
            l.normal, l.reduce
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Verdict); 10] = [
        ("gradient suite", gradients),
        ("simplex invariant", simplex),
        ("schedule fidelity", schedule),
        ("memory proxy", memory_proxy),
        ("skip refinement", refinement),
        ("derivation oracle", derivation),
        ("skip-dominance ablation", skip_dominance),
        ("search quality", search_quality),
        ("determinism", determinism),
        ("connection levels", levels),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let results: Vec<(usize, &str, Verdict)> = std::thread::scope(|s| {
        let handles: Vec<_> = criteria
            .iter()
            .enumerate()
            .filter(|(i, (name, _))| {
                filter.is_empty() || filter.iter().any(|f| name.contains(f.as_str()) || f == &(i + 1).to_string())
            })
            .map(|(i, &(name, f))| (i + 1, name, s.spawn(f)))
            .collect();
        handles
            .into_iter()
            .map(|(i, name, h)| {
                let v = h.join().unwrap_or_else(|_| verdict(false, "panicked"));
                (i, name, v)
            })
            .collect()
    });
    let mut failed = 0;
    for (i, name, v) in &results {
        println!("{} criterion {i:>2} {name}: {}", if v.passed { "PASS" } else { "FAIL" }, v.detail);
        failed += usize::from(!v.passed);
    }
    println!("acceptance: {} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
