//! Acceptance suite: one test per criterion, each printing a PASS/FAIL
//! line. Run with `cargo test -p degta --test acceptance -- --nocapture`.

use std::time::Instant;

use degta::attention::global::SamplingStrategy;
use degta::autograd::Tape;
use degta::checkpoint::{load_checkpoint, save_checkpoint};
use degta::data::{gen_csl, gen_cycle, gen_disjoint_cycles, gen_sbm};
use degta::encodings::{jaccard_pe, lap_pe, rwpe, rwse, JaccardConfig, PeKind, SeKind};
use degta::graph::{bfs_distances, build_graph, derive_matrices, Graph, UNREACHED};
use degta::linalg::Matrix;
use degta::model::{Ablation, DeGTAConfig, DeGTAModel, ModelInputs, Task};
use degta::report::export_report;
use degta::train::{eval_node, train_node};
use degta::verify::gradcheck_suite;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn criterion(number: usize, name: &str, f: impl FnOnce() -> Result<(), String>) {
    match f() {
        Ok(()) => println!("acceptance criterion {number} ({name}): PASS"),
        Err(msg) => {
            println!("acceptance criterion {number} ({name}): FAIL - {msg}");
            panic!("criterion {number} ({name}) failed: {msg}");
        }
    }
}

fn random_graph(n: usize, p: f64, seed: u64) -> Graph {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut edges = Vec::new();
    for u in 0..n {
        for v in (u + 1)..n {
            if rng.random::<f64>() < p {
                edges.push((u, v));
            }
        }
    }
    let feats = Matrix::from_vec(n, 3, (0..3 * n).map(|_| rng.random::<f64>()).collect());
    build_graph(&edges, feats).unwrap().0
}

#[test]
fn criterion_1_gradient_correctness() {
    criterion(1, "gradient correctness", || {
        let start = Instant::now();
        let reports = gradcheck_suite(1e-5, 0).map_err(|e| e.to_string())?;
        for r in &reports {
            if !r.pass() {
                return Err(format!(
                    "{} reported {:.3e} (tolerance {:.0e}); {}",
                    r.name, r.max_rel_err, r.threshold, r.detail
                ));
            }
        }
        let elapsed = start.elapsed().as_secs_f64();
        if elapsed >= 60.0 {
            return Err(format!("suite took {elapsed:.1}s, budget is 60s"));
        }
        Ok(())
    });
}

#[test]
fn criterion_2_encoding_oracles() {
    criterion(2, "encoding oracles", || {
        let start = Instant::now();
        for seed in 0..20u64 {
            let n = 5 + (seed as usize % 12); // N <= 16
            let g = random_graph(n, 0.25 + 0.03 * (seed % 5) as f64, seed);
            let k = 5.min(n - 1);

            // Dense matrix-power oracle for RWSE and RWPE.
            let ahat = derive_matrices(&g).rw_normalized.to_dense();
            let mut power = Matrix::identity(n);
            let s = rwse(&g, k);
            let p = rwpe(&g, k);
            for step in 0..k {
                if step > 0 {
                    power = power.matmul(&ahat);
                }
                for i in 0..n {
                    let diag = power[(i, i)];
                    if (s[(i, step)] - diag).abs() > 1e-12 {
                        return Err(format!(
                            "rwse seed {seed} node {i} step {step}: {} vs oracle {diag}",
                            s[(i, step)]
                        ));
                    }
                    let norm: f64 = power.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                    if (p[(i, step)] - norm).abs() > 1e-12 {
                        return Err(format!(
                            "rwpe seed {seed} node {i} step {step}: {} vs oracle {norm}",
                            p[(i, step)]
                        ));
                    }
                }
            }

            // Jaccard pairwise equals the BFS-based Gaussian decay exactly.
            let (pw, _) = jaccard_pe(&g, &JaccardConfig::new(k));
            for i in 0..n {
                let dist = bfs_distances(&g, i, k);
                for j in 0..n {
                    let expect = if dist[j] == UNREACHED {
                        0.0
                    } else {
                        (-((dist[j] * dist[j]) as f64) / 2.0).exp()
                    };
                    if pw[(i, j)] != expect {
                        return Err(format!(
                            "jaccard seed {seed} pair ({i},{j}): {} vs bfs {expect}",
                            pw[(i, j)]
                        ));
                    }
                }
            }

            // TCSE equals exhaustive simple-cycle enumeration.
            let tc = degta::encodings::tcse(&g, 2);
            for i in 0..n {
                let (tri, quad) = enumerate_cycles(&g, i);
                let got_tri = tc[(i, 0)] * n as f64;
                let got_quad = tc[(i, 1)] * n as f64;
                if (got_tri - tri as f64).abs() > 1e-9 || (got_quad - quad as f64).abs() > 1e-9
                {
                    return Err(format!(
                        "tcse seed {seed} node {i}: ({got_tri},{got_quad}) vs oracle ({tri},{quad})"
                    ));
                }
            }

            // LapPE eigenpairs: residual and orthonormality.
            let kk = 3.min(n - 1);
            let pe = lap_pe(&g, kk).map_err(|e| e.to_string())?;
            let lap = derive_matrices(&g).sym_laplacian;
            let (vals, _) = degta::linalg::eigen_sym(&lap, 1e-12, 100).map_err(|e| e.to_string())?;
            let mut sorted = vals;
            sorted.sort_by(f64::total_cmp);
            for c in 0..kk {
                let lambda = sorted[c + 1];
                let mut resid2 = 0.0;
                for i in 0..n {
                    let mut lv = 0.0;
                    for j in 0..n {
                        lv += lap[(i, j)] * pe[(j, c)];
                    }
                    resid2 += (lv - lambda * pe[(i, c)]).powi(2);
                }
                if resid2.sqrt() > 1e-8 {
                    return Err(format!(
                        "lappe seed {seed} col {c}: residual {:.2e}",
                        resid2.sqrt()
                    ));
                }
                for c2 in 0..kk {
                    let dot: f64 = (0..n).map(|i| pe[(i, c)] * pe[(i, c2)]).sum();
                    let expect = if c == c2 { 1.0 } else { 0.0 };
                    if (dot - expect).abs() > 1e-8 {
                        return Err(format!(
                            "lappe seed {seed} cols ({c},{c2}): dot {dot}"
                        ));
                    }
                }
            }
        }
        let elapsed = start.elapsed().as_secs_f64();
        if elapsed >= 30.0 {
            return Err(format!("oracles took {elapsed:.1}s, budget is 30s"));
        }
        Ok(())
    });
}

fn enumerate_cycles(g: &Graph, i: usize) -> (usize, usize) {
    let n = g.num_nodes();
    let mut tri = 0;
    let mut quad = 0;
    for a in 0..n {
        for b in 0..n {
            if a == b || a == i || b == i {
                continue;
            }
            if g.has_edge(i, a) && g.has_edge(a, b) && g.has_edge(b, i) {
                tri += 1;
            }
            for c in 0..n {
                if c == i || c == a || c == b {
                    continue;
                }
                if g.has_edge(i, a) && g.has_edge(a, b) && g.has_edge(b, c) && g.has_edge(c, i) {
                    quad += 1;
                }
            }
        }
    }
    (tri / 2, quad / 2)
}

#[test]
fn criterion_3_expressivity_beyond_1wl() {
    criterion(3, "expressivity beyond 1-WL", || {
        // C6 vs two disjoint triangles at K=4: step-3 return probabilities
        // are 7/27 vs 1/3.
        let c6 = gen_cycle(6).map_err(|e| e.to_string())?;
        let tri2 = gen_disjoint_cycles(3, 2).map_err(|e| e.to_string())?;
        let s_c6 = rwse(&c6, 4);
        let s_tri = rwse(&tri2, 4);
        for i in 0..6 {
            if (s_c6[(i, 3)] - 7.0 / 27.0).abs() > 1e-12 {
                return Err(format!("C6 step-3 value {} != 7/27", s_c6[(i, 3)]));
            }
            if (s_tri[(i, 3)] - 1.0 / 3.0).abs() > 1e-12 {
                return Err(format!("C3+C3 step-3 value {} != 1/3", s_tri[(i, 3)]));
            }
        }
        // Same check through the independent dense-power oracle.
        for (g, expect) in [(&c6, 7.0 / 27.0), (&tri2, 1.0 / 3.0)] {
            let ahat = derive_matrices(g).rw_normalized.to_dense();
            let cube = ahat.matmul(&ahat).matmul(&ahat);
            if (cube[(0, 0)] - expect).abs() > 1e-12 {
                return Err(format!("oracle disagrees: {} vs {expect}", cube[(0, 0)]));
            }
        }

        // CSL(11,2) vs CSL(11,3): 4-regular, 1-WL-indistinguishable, but the
        // K=6 random-walk encodings differ.
        let a = rwse(&gen_csl(11, 2).map_err(|e| e.to_string())?, 6);
        let b = rwse(&gen_csl(11, 3).map_err(|e| e.to_string())?, 6);
        let differs = (0..11).any(|i| {
            (0..6).any(|k| (a[(i, k)] - b[(i, k)]).abs() > 1e-9)
        });
        if !differs {
            return Err("csl(11,2) and csl(11,3) encodings are identical".into());
        }
        Ok(())
    });
}

#[test]
fn criterion_4_attention_normalization() {
    criterion(4, "attention normalization and sampling mask", || {
        for seed in 0..20u64 {
            let n = 6 + (seed as usize % 11);
            let p = 0.2 + 0.06 * (seed % 10) as f64;
            let g = random_graph(n, p, seed ^ 0x44);
            let kg = 3;
            let cfg = DeGTAConfig {
                d: 6,
                d_hidden: 4,
                d_attr_hidden: 6,
                layers: 1,
                sampling: SamplingStrategy::TopK { k: kg },
                ..DeGTAConfig::with_k(3)
            };
            let model = DeGTAModel::new_seeded(cfg.clone(), 3, 2, Task::NodeClassification)
                .map_err(|e| e.to_string())?;
            let inputs = ModelInputs::prepare(&g, &cfg).map_err(|e| e.to_string())?;
            let tape = Tape::new();
            let (pass, _) = model
                .forward(&tape, &g, &inputs, true)
                .map_err(|e| e.to_string())?;
            let trace = &pass.traces.unwrap()[0];

            // Local rows are stochastic over every neighborhood.
            for i in 0..n {
                let lo = trace.local_pairs.offsets[i];
                let hi = trace.local_pairs.offsets[i + 1];
                let sum: f64 = trace.local_zhat[lo..hi].iter().sum();
                if (sum - 1.0).abs() > 1e-9 {
                    return Err(format!("seed {seed} local row {i} sums to {sum}"));
                }
            }
            // Global rows are stochastic over nonempty sampled sets.
            for i in 0..n {
                let lo = trace.global_pairs.offsets[i];
                let hi = trace.global_pairs.offsets[i + 1];
                if lo == hi {
                    continue;
                }
                let sum: f64 = trace.global_zhat[lo..hi].iter().sum();
                if (sum - 1.0).abs() > 1e-9 {
                    return Err(format!("seed {seed} global row {i} sums to {sum}"));
                }
            }
            // Mask is binary, zero on the diagonal and on edges, with
            // exactly min(kg, #candidates) ones per row.
            let mask = trace.mask_values.as_ref().unwrap();
            for i in 0..n {
                let mut ones = 0usize;
                let mut candidates = 0usize;
                for j in 0..n {
                    let v = mask[(i, j)];
                    if v != 0.0 && v != 1.0 {
                        return Err(format!("seed {seed} mask ({i},{j}) = {v} not binary"));
                    }
                    if i == j || g.has_edge(i, j) {
                        if v != 0.0 {
                            return Err(format!(
                                "seed {seed} mask nonzero on edge/diagonal ({i},{j})"
                            ));
                        }
                    } else {
                        candidates += 1;
                    }
                    if v == 1.0 {
                        ones += 1;
                    }
                }
                let expect = kg.min(candidates);
                if ones != expect {
                    return Err(format!(
                        "seed {seed} row {i}: {ones} sampled, expected {expect}"
                    ));
                }
            }
        }
        Ok(())
    });
}

#[test]
fn criterion_5_permutation_equivariance() {
    criterion(5, "permutation equivariance", || {
        let n = 12;
        let g = random_graph(n, 0.3, 0x55);
        let cfg = DeGTAConfig {
            d: 8,
            d_hidden: 4,
            d_attr_hidden: 8,
            pe_kind: PeKind::Jaccard,
            se_kind: SeKind::Rwse,
            ..DeGTAConfig::with_k(4)
        };
        let model = DeGTAModel::new_seeded(cfg.clone(), 3, 2, Task::NodeClassification)
            .map_err(|e| e.to_string())?;
        let inputs = ModelInputs::prepare(&g, &cfg).map_err(|e| e.to_string())?;
        let tape = Tape::new();
        let (base, _) = model
            .forward(&tape, &g, &inputs, false)
            .map_err(|e| e.to_string())?;
        let base_out = base.output.value();

        let mut rng = StdRng::seed_from_u64(0x77);
        for trial in 0..10 {
            let mut pi: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                let j = rng.random_range(0..=i);
                pi.swap(i, j);
            }
            let gp = g.permute(&pi).map_err(|e| e.to_string())?;
            let inputs_p = ModelInputs::prepare(&gp, &cfg).map_err(|e| e.to_string())?;
            let tape_p = Tape::new();
            let (perm, _) = model
                .forward(&tape_p, &gp, &inputs_p, false)
                .map_err(|e| e.to_string())?;
            let perm_out = perm.output.value();
            for u in 0..n {
                for c in 0..2 {
                    let diff = (perm_out[(pi[u], c)] - base_out[(u, c)]).abs();
                    if diff > 1e-9 {
                        return Err(format!(
                            "trial {trial} node {u} class {c}: diff {diff:.2e}"
                        ));
                    }
                }
            }
        }
        Ok(())
    });
}

fn sbm_run(seed: u64, ablation: Ablation) -> Result<(f64, f64), String> {
    let ds = gen_sbm(60, 2, 0.3, 0.02, 0.5, seed).map_err(|e| e.to_string())?;
    let cfg = DeGTAConfig {
        ablation,
        seed,
        ..DeGTAConfig::with_k(8)
    };
    let model = DeGTAModel::new_seeded(
        cfg,
        ds.graph.features().cols(),
        ds.num_classes(),
        Task::NodeClassification,
    )
    .map_err(|e| e.to_string())?;
    let outcome = train_node(model, &ds).map_err(|e| e.to_string())?;
    let splits = ds.graph.splits().unwrap();
    let train_acc = eval_node(&outcome.model, &ds, &splits.train).map_err(|e| e.to_string())?;
    let test_acc = eval_node(&outcome.model, &ds, &splits.test).map_err(|e| e.to_string())?;
    Ok((train_acc, test_acc))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn criterion_6_sbm_learning() {
    criterion(6, "SBM learning smoke test", || {
        let start = Instant::now();
        let mut train_accs = Vec::new();
        let mut test_accs = Vec::new();
        for seed in 1..=5u64 {
            let (train_acc, test_acc) = sbm_run(seed, Ablation::Full)?;
            train_accs.push(train_acc);
            test_accs.push(test_acc);
        }
        let train_med = median(train_accs.clone());
        let test_med = median(test_accs.clone());
        if train_med < 0.95 {
            return Err(format!(
                "median train accuracy {train_med:.3} < 0.95 ({train_accs:?})"
            ));
        }
        if test_med < 0.90 {
            return Err(format!(
                "median test accuracy {test_med:.3} < 0.90 ({test_accs:?})"
            ));
        }
        let elapsed = start.elapsed().as_secs_f64();
        if elapsed >= 120.0 {
            return Err(format!("runs took {elapsed:.1}s, budget is 120s"));
        }
        Ok(())
    });
}

#[test]
fn criterion_7_ablation_direction() {
    criterion(7, "ablation direction", || {
        let mut full = Vec::new();
        let mut coupled = Vec::new();
        let mut summed = Vec::new();
        for seed in 1..=5u64 {
            full.push(sbm_run(seed, Ablation::Full)?.1);
            coupled.push(sbm_run(seed, Ablation::CoupledAttention)?.1);
            summed.push(sbm_run(seed, Ablation::SummedIntegration)?.1);
        }
        let (f, c, s) = (median(full), median(coupled), median(summed));
        if c > f {
            return Err(format!("coupled_attention median {c:.3} exceeds full {f:.3}"));
        }
        if s > f {
            return Err(format!("summed_integration median {s:.3} exceeds full {f:.3}"));
        }
        Ok(())
    });
}

#[test]
fn criterion_8_scaling() {
    criterion(8, "complexity scaling", || {
        let records =
            degta::bench::scaling_bench(64, 512, 4, 7, 0).map_err(|e| e.to_string())?;
        for (i, (local, global)) in degta::bench::growth_ratios(&records).iter().enumerate() {
            let (n0, n1) = (records[i].n, records[i + 1].n);
            if *global > 4.5 {
                return Err(format!(
                    "global time grew {global:.2}x from n={n0} to n={n1} (> 4.5)"
                ));
            }
            if *local > 2.5 {
                return Err(format!(
                    "local time grew {local:.2}x from n={n0} to n={n1} (> 2.5, edges doubled)"
                ));
            }
        }
        Ok(())
    });
}

#[test]
fn criterion_9_paper_benchmarks_excluded() {
    criterion(9, "paper-scale benchmarks excluded", || {
        // Full-dataset benchmark numbers require the original datasets,
        // tuned hyperparameters and long training; they are documented as
        // out of this gating suite. The README describes how to run a
        // converted public dataset through `train`/`eval` as an optional,
        // non-gating extended check.
        Ok(())
    });
}

#[test]
fn criterion_10_serialization() {
    criterion(10, "serialization and report schema", || {
        let ds = gen_sbm(20, 2, 0.4, 0.05, 0.4, 3).map_err(|e| e.to_string())?;
        let cfg = DeGTAConfig {
            d: 8,
            d_hidden: 4,
            d_attr_hidden: 8,
            epochs: 5,
            ..DeGTAConfig::with_k(4)
        };
        let model = DeGTAModel::new_seeded(
            cfg,
            ds.graph.features().cols(),
            2,
            Task::NodeClassification,
        )
        .map_err(|e| e.to_string())?;
        let outcome = degta::train::train_node(model, &ds).map_err(|e| e.to_string())?;

        // Checkpoint round-trip must be bit-exact.
        let dir = std::env::temp_dir().join(format!("degta-acc-{}", std::process::id()));
        std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
        let path = dir.join("model.ckpt");
        save_checkpoint(&path, &outcome.model).map_err(|e| e.to_string())?;
        let loaded = load_checkpoint(&path).map_err(|e| e.to_string())?;
        let mut orig_bits = Vec::new();
        outcome
            .model
            .params
            .visit(&mut |_, m| orig_bits.extend(m.data().iter().map(|v| v.to_bits())));
        let mut load_bits = Vec::new();
        loaded
            .params
            .visit(&mut |_, m| load_bits.extend(m.data().iter().map(|v| v.to_bits())));
        if orig_bits != load_bits {
            return Err("checkpoint round-trip is not bit-exact".into());
        }

        // Attention report: schema keys and triple normalization.
        let report = export_report(&loaded, &ds.graph).map_err(|e| e.to_string())?;
        let json = serde_json::to_value(&report).map_err(|e| e.to_string())?;
        for key in ["layers", "summary", "local_edges", "global_pairs"] {
            if json.get(key).is_none() {
                return Err(format!("report is missing key '{key}'"));
            }
        }
        for key in ["positional", "structural", "attribute"] {
            if json["summary"].get(key).is_none() {
                return Err(format!("summary is missing key '{key}'"));
            }
        }
        for (l, lw) in report.layers.iter().enumerate() {
            let s: f64 = lw.local_weights.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(format!("layer {l} local triple sums to {s}"));
            }
            if let Some(gw) = lw.global_weights {
                let s: f64 = gw.iter().sum();
                if (s - 1.0).abs() > 1e-9 {
                    return Err(format!("layer {l} global triple sums to {s}"));
                }
            }
        }
        let s = report.summary.positional + report.summary.structural + report.summary.attribute;
        if (s - 1.0).abs() > 1e-9 {
            return Err(format!("summary triple sums to {s}"));
        }
        // Round-trip the JSON back through the schema types.
        let _: degta::report::AttentionReport =
            serde_json::from_value(json).map_err(|e| e.to_string())?;
        std::fs::remove_dir_all(&dir).ok();
        Ok(())
    });
}
