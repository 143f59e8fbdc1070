//! Acceptance suite: one check per shipping requirement, each printing a
//! PASS/FAIL line. Run with `cargo test --test acceptance -- --nocapture`
//! to see the verdict lines; any FAIL also fails the test.

use std::sync::OnceLock;
use std::time::Instant;

use rand::Rng;
use ssm::backbone::{self, BackboneConfig, MoeLoad};
use ssm::config::{Arch, ExperimentConfig};
use ssm::data::{generate_synthetic_world, SyntheticWorldSpec};
use ssm::dpm::{self, DpmInit, DpmMode};
use ssm::facs::{build_prior_matrix, builtin_facs_table, BP4D_AUS, DISFA_AUS, EXPR_7};
use ssm::model::{grad_check_full, Model};
use ssm::numerics::{rng_for, row_softmax, Leaves, ParamStore, Tape, Tensor};
use ssm::objective::{au_loss, dfer_loss, f1_scores, subset_eval, total_loss, uar_war};
use ssm::trainer::{median, run_config, train};

fn verdict(name: &str, ok: bool, detail: &str) {
    println!("acceptance {name}: {}  ({detail})", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "acceptance {name} failed: {detail}");
}

/// Documented seed set for every median-over-seeds check.
const SEEDS: [u64; 5] = [11, 13, 17, 19, 23];

struct Medians {
    avg_f1: f64,
    uar: f64,
}

fn median_run(make: impl Fn(u64) -> ExperimentConfig) -> Medians {
    let mut f1s = Vec::new();
    let mut uars = Vec::new();
    for seed in SEEDS {
        let cfg = make(seed).resolve().expect("config resolves");
        let rep = run_config(&cfg, seed).expect("run succeeds");
        f1s.push(rep.avg_f1);
        uars.push(rep.uar);
    }
    Medians { avg_f1: median(&f1s), uar: median(&uars) }
}

struct DirectionalRuns {
    stl: Medians,
    baseline: Medians,
    tsp: Medians,
    tsp_dpm: Medians,
    random_init: Medians,
    frozen_mapping: Medians,
    fe_fraction: Vec<(f64, Medians)>,
}

/// The default-config training runs shared by the directional and the
/// data-scaling checks (computed once; roughly 40 short runs).
fn directional_runs() -> &'static DirectionalRuns {
    static RUNS: OnceLock<DirectionalRuns> = OnceLock::new();
    RUNS.get_or_init(|| {
        let arch_run = |arch| {
            median_run(move |seed| ExperimentConfig { arch, seed, ..Default::default() })
        };
        DirectionalRuns {
            stl: arch_run(Arch::Stl),
            baseline: arch_run(Arch::Baseline),
            tsp: arch_run(Arch::Tsp),
            tsp_dpm: arch_run(Arch::TspDpm),
            random_init: median_run(|seed| ExperimentConfig {
                dpm_init: DpmInit::Random,
                seed,
                ..Default::default()
            }),
            frozen_mapping: median_run(|seed| ExperimentConfig {
                dpm_mode: DpmMode::Frozen,
                seed,
                ..Default::default()
            }),
            fe_fraction: [0.2, 0.6, 1.0]
                .iter()
                .map(|&f| {
                    (
                        f,
                        median_run(move |seed| ExperimentConfig {
                            data_fraction_fe: f,
                            seed,
                            ..Default::default()
                        }),
                    )
                })
                .collect(),
        }
    })
}

#[test]
fn criterion_1_gradient_suite() {
    let start = Instant::now();
    // downsized joint model exercising every trainable parameter class
    // reachable from the full loss: mapping matrices and coefficients,
    // context embeddings, router, private experts, gate, and both
    // temporal blocks
    let tsp_dpm = ExperimentConfig {
        arch: Arch::TspDpm,
        context_length: 2,
        d_tok: 4,
        backbone: BackboneConfig {
            d_raw: 6,
            d: 8,
            d_hidden: 4,
            num_experts: 2,
            top_k: 2,
            positional: true,
        },
        world: SyntheticWorldSpec {
            d_raw: 6,
            frames: 4,
            au_samples: 8,
            fe_samples: 8,
            ..Default::default()
        },
        ..Default::default()
    };
    let mut worst = 0.0f64;
    let mut worst_param = String::new();
    for seed in 0..10u64 {
        let cfg = ExperimentConfig { seed, ..tsp_dpm.clone() }.resolve().unwrap();
        let world = generate_synthetic_world(&cfg.world, seed).unwrap();
        let report = grad_check_full(&cfg, &world, 2, 2, 1e-5).unwrap();
        if report.max_rel_err > worst {
            worst = report.max_rel_err;
            worst_param = report.worst_param.clone();
        }
    }
    // plain affine heads are only reachable in the baseline architecture
    for seed in 0..10u64 {
        let cfg = ExperimentConfig { arch: Arch::Baseline, seed, ..tsp_dpm.clone() }
            .resolve()
            .unwrap();
        let world = generate_synthetic_world(&cfg.world, seed).unwrap();
        let report = grad_check_full(&cfg, &world, 2, 2, 1e-5).unwrap();
        if report.max_rel_err > worst {
            worst = report.max_rel_err;
            worst_param = report.worst_param.clone();
        }
    }
    let elapsed = start.elapsed();
    let ok = worst <= 1e-4 && elapsed.as_secs() < 60;
    verdict(
        "1 gradient-suite",
        ok,
        &format!("worst rel err {worst:.3e} at `{worst_param}`, {elapsed:.2?}"),
    );
}

#[test]
fn criterion_2_facs_golden_table() {
    let table = builtin_facs_table();
    let prior = build_prior_matrix(&table, &EXPR_7, &BP4D_AUS).unwrap();
    // hand-checked correspondence, AU columns [1,2,4,6,7,10,12,14,15,17,23,24]
    let golden: [(&str, [f64; 12]); 7] = [
        ("Happiness", [0., 0., 0., 1., 0., 0., 1., 0., 0., 0., 0., 0.]),
        ("Sadness", [1., 0., 1., 0., 0., 0., 0., 0., 1., 0., 0., 0.]),
        ("Neutral", [0., 0., 0., 0., 0., 0., 0., 0., 0., 0., 0., 0.]),
        ("Anger", [0., 0., 1., 0., 1., 0., 0., 0., 0., 0., 1., 0.]),
        ("Surprise", [1., 1., 0., 0., 0., 0., 0., 0., 0., 0., 0., 0.]),
        ("Disgust", [0., 0., 0., 0., 0., 1., 0., 0., 1., 0., 0., 0.]),
        ("Fear", [1., 1., 1., 0., 1., 0., 0., 0., 0., 0., 0., 0.]),
    ];
    let mut ok = prior.au_order == BP4D_AUS.to_vec();
    for (r, (name, row)) in golden.iter().enumerate() {
        ok &= prior.expr_order[r] == *name;
        ok &= prior.p.row(r) == &row[..];
    }
    // Happiness engages exactly the cheek raiser and the lip corner puller
    let happiness = prior.p.row(0);
    ok &= happiness.iter().sum::<f64>() == 2.0 && happiness[3] == 1.0 && happiness[6] == 1.0;
    verdict("2 facs-golden-table", ok, "7x12 correspondence matches the hand-checked table");
}

#[test]
fn criterion_3_exact_loss_values() {
    let mut tape = Tape::new();

    let a = tape.constant(Tensor::scalar(0.9));
    let b = tape.constant(Tensor::scalar(0.3));
    let combined = total_loss(&mut tape, a, b, 2.0).unwrap();
    let e1 = (tape.value(combined).data()[0] - 0.5).abs();

    // uniform scores over 7 classes: cross-entropy is ln 7
    let scores = tape.constant(Tensor::zeros(3, 7));
    let labels = Tensor::from_rows(&[
        vec![1., 0., 0., 0., 0., 0., 0.],
        vec![0., 0., 0., 1., 0., 0., 0.],
        vec![0., 0., 0., 0., 0., 0., 1.],
    ])
    .unwrap();
    let ce = dfer_loss(&mut tape, scores, &labels).unwrap();
    let e2 = (tape.value(ce).data()[0] - 7.0f64.ln()).abs();

    // zero logits: binary cross-entropy is ln 2 regardless of labels
    let au_scores = tape.constant(Tensor::zeros(4, 12));
    let au_labels = Tensor::new(4, 12, {
        let mut rng = rng_for(3, "acceptance.loss.labels");
        (0..48).map(|_| f64::from(rng.gen_bool(0.4))).collect()
    })
    .unwrap();
    let bce = au_loss(&mut tape, au_scores, &au_labels).unwrap();
    let e3 = (tape.value(bce).data()[0] - 2.0f64.ln()).abs();

    let ok = e1 <= 1e-12 && e2 <= 1e-12 && e3 <= 1e-12;
    verdict("3 exact-loss-values", ok, &format!("errors {e1:.1e} {e2:.1e} {e3:.1e}"));
}

#[test]
fn criterion_4_mapping_structure() {
    // prior init: the reverse matrix is the exact transpose
    let cfg = ExperimentConfig::default().resolve().unwrap();
    let model = Model::new(cfg.clone(), None).unwrap();
    let w_ae = model.store.by_name(dpm::W_AE).unwrap().value.clone();
    let w_ea = model.store.by_name(dpm::W_EA).unwrap().value.clone();
    let transpose_exact = w_ea == w_ae.transpose();

    // alpha = beta = 0 reproduces the prototype-only scores bitwise
    let small_world = SyntheticWorldSpec { au_samples: 16, fe_samples: 12, ..Default::default() };
    let world = generate_synthetic_world(&small_world, 5).unwrap();
    let base = ExperimentConfig { world: small_world, seed: 5, ..Default::default() };
    let mut plain = Model::new(
        ExperimentConfig { arch: Arch::Tsp, ..base.clone() }.resolve().unwrap(),
        None,
    )
    .unwrap();
    let mut zeroed = Model::new(
        ExperimentConfig { alpha0: 0.0, beta0: 0.0, ..base }.resolve().unwrap(),
        None,
    )
    .unwrap();
    let bitwise = plain.eval_scores(&world.au_test).unwrap()
        == zeroed.eval_scores(&world.au_test).unwrap()
        && plain.eval_scores(&world.fe_test).unwrap()
            == zeroed.eval_scores(&world.fe_test).unwrap();

    // temperature softmax rows are distributions
    let mix = row_softmax(&w_ae, cfg.tau_m).unwrap();
    let rows_sum = (0..mix.rows())
        .all(|r| (mix.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-9);

    // after a default training run the two matrices diverge from
    // being transposes of each other
    let trained_world = generate_synthetic_world(&cfg.world, cfg.seed).unwrap();
    let out = train(&cfg, &trained_world, None).unwrap();
    let w_ae_t = out.model.store.by_name(dpm::W_AE).unwrap().value.transpose();
    let w_ea_t = out.model.store.by_name(dpm::W_EA).unwrap().value.clone();
    let frob = w_ea_t.frobenius_distance(&w_ae_t);

    let ok = transpose_exact && bitwise && rows_sum && frob > 0.0;
    verdict(
        "4 mapping-structure",
        ok,
        &format!(
            "transpose {transpose_exact}, zero-coefficient bitwise {bitwise}, \
             rows sum {rows_sum}, trained frobenius gap {frob:.3e}"
        ),
    );
}

#[test]
fn criterion_5_moe_contract() {
    let cfg = BackboneConfig { d_raw: 6, d: 8, d_hidden: 4, ..BackboneConfig::default() };
    let mut store = ParamStore::new();
    backbone::register_backbone(&mut store, 7, &cfg).unwrap();

    let x_val = ssm::numerics::seeded_gaussian(7, "acceptance.moe.x", 5, cfg.d, 1.0);
    let mut tape = Tape::new();
    let mut leaves = Leaves::new();
    let x = tape.constant(x_val.clone());
    let mut load = MoeLoad::default();
    let moe = backbone::moe_forward(&mut tape, &store, &mut leaves, &cfg, x, &mut load).unwrap();

    // with the gate at its zero init the sublayer output equals the
    // frozen shared expert applied to the normalized input, exactly
    let shared = {
        let mut t = Tape::new();
        let xc = t.constant(x_val);
        let xn = t.row_layer_norm(xc).unwrap();
        let w1 = t.constant(store.by_name(&backbone::expert_param("shared", "w1")).unwrap().value.clone());
        let b1 = t.constant(store.by_name(&backbone::expert_param("shared", "b1")).unwrap().value.clone());
        let w2 = t.constant(store.by_name(&backbone::expert_param("shared", "w2")).unwrap().value.clone());
        let b2 = t.constant(store.by_name(&backbone::expert_param("shared", "b2")).unwrap().value.clone());
        let h = t.matmul(xn, w1);
        let h = t.add_row_broadcast(h, b1);
        let o = t.matmul(h, w2);
        let o = t.add_row_broadcast(o, b2);
        t.value(o).clone()
    };
    let shared_exact = tape.value(moe) == &shared;

    // exactly top_k private experts per token
    let sparsity = load.tokens == 5
        && load.total_evaluations() == cfg.top_k * load.tokens
        && load.per_expert.iter().all(|&n| n <= load.tokens);

    // the shared expert stays bitwise frozen across a full training run
    let run_cfg = ExperimentConfig {
        epochs: 3,
        world: SyntheticWorldSpec { au_samples: 24, fe_samples: 16, ..Default::default() },
        ..Default::default()
    }
    .resolve()
    .unwrap();
    let world = generate_synthetic_world(&run_cfg.world, run_cfg.seed).unwrap();
    let trained = train(&run_cfg, &world, None).unwrap();
    let fresh = Model::new(run_cfg, None).unwrap();
    let frozen = ["w1", "b1", "w2", "b2"].iter().all(|f| {
        let name = backbone::expert_param("shared", f);
        trained.model.store.by_name(&name).unwrap().value
            == fresh.store.by_name(&name).unwrap().value
    });

    verdict(
        "5 moe-contract",
        shared_exact && sparsity && frozen,
        &format!("gate-off identity {shared_exact}, sparsity {sparsity}, shared frozen {frozen}"),
    );
}

#[test]
fn criterion_6_metrics_oracle() {
    let mut rng = rng_for(2024, "acceptance.metrics");
    let mut ok = true;
    for _ in 0..100 {
        let n = rng.gen_range(1..40);
        let m = rng.gen_range(1..8);
        let k = rng.gen_range(2..9);
        let draw = |rng: &mut rand_chacha::ChaCha8Rng| -> Tensor {
            Tensor::new(n, m, (0..n * m).map(|_| f64::from(rng.gen_bool(0.5))).collect()).unwrap()
        };
        let pred = draw(&mut rng);
        let truth = draw(&mut rng);
        let (per, avg) = f1_scores(&pred, &truth).unwrap();
        // brute-force recount straight from the definitions
        for c in 0..m {
            let (mut tp, mut fp, mut fne) = (0.0, 0.0, 0.0);
            for r in 0..n {
                let (p, t) = (pred.at(r, c), truth.at(r, c));
                tp += p * t;
                fp += p * (1.0 - t);
                fne += (1.0 - p) * t;
            }
            let expect = if tp + fp + fne == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fne) };
            ok &= per[c] == expect;
        }
        ok &= avg == per.iter().sum::<f64>() / m as f64;

        let cls_pred: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let cls_truth: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let (uar, war) = uar_war(&cls_pred, &cls_truth, k).unwrap();
        let mut recalls = Vec::new();
        let mut hits = 0usize;
        for class in 0..k {
            let support = cls_truth.iter().filter(|&&t| t == class).count();
            if support == 0 {
                continue;
            }
            let correct = cls_truth
                .iter()
                .zip(&cls_pred)
                .filter(|&(&t, &p)| t == class && p == class)
                .count();
            hits += correct;
            recalls.push(correct as f64 / support as f64);
        }
        ok &= uar == recalls.iter().sum::<f64>() / recalls.len() as f64;
        ok &= war == hits as f64 / n as f64;
    }

    // the two annotation sets overlap on exactly five action units
    let scores = ssm::numerics::seeded_gaussian(1, "acceptance.subset", 20, BP4D_AUS.len(), 1.0);
    let truth = Tensor::new(
        20,
        DISFA_AUS.len(),
        (0..20 * DISFA_AUS.len()).map(|i| f64::from(i % 3 == 0)).collect(),
    )
    .unwrap();
    let (shared, per, _) = subset_eval(&scores, &BP4D_AUS, &truth, &DISFA_AUS).unwrap();
    ok &= shared == vec![1, 2, 4, 6, 12] && per.len() == 5;

    verdict("6 metrics-oracle", ok, "100 brute-force recounts and the shared-AU subset agree");
}

#[test]
fn criterion_7_directional_ablations() {
    let r = directional_runs();
    let joint_beats_single =
        r.tsp_dpm.avg_f1 >= r.stl.avg_f1 && r.tsp_dpm.uar >= r.stl.uar;
    let monotone =
        r.baseline.avg_f1 <= r.tsp.avg_f1 && r.tsp.avg_f1 <= r.tsp_dpm.avg_f1;
    let prior_beats_random =
        r.tsp_dpm.avg_f1 >= r.random_init.avg_f1 && r.tsp_dpm.uar >= r.random_init.uar;
    let learnable_beats_frozen = r.tsp_dpm.avg_f1 >= r.frozen_mapping.avg_f1;
    let ok = joint_beats_single && monotone && prior_beats_random && learnable_beats_frozen;
    verdict(
        "7 directional-ablations",
        ok,
        &format!(
            "medians over seeds {SEEDS:?}: au f1 stl {:.3} base {:.3} tsp {:.3} full {:.3} \
             rand-init {:.3} frozen {:.3}; uar stl {:.3} full {:.3} rand-init {:.3}",
            r.stl.avg_f1,
            r.baseline.avg_f1,
            r.tsp.avg_f1,
            r.tsp_dpm.avg_f1,
            r.random_init.avg_f1,
            r.frozen_mapping.avg_f1,
            r.stl.uar,
            r.tsp_dpm.uar,
            r.random_init.uar,
        ),
    );
}

#[test]
fn criterion_8_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        epochs: 3,
        world: SyntheticWorldSpec { au_samples: 24, fe_samples: 16, ..Default::default() },
        ..Default::default()
    };
    let cfg_path = dir.path().join("config.json");
    std::fs::write(&cfg_path, cfg.to_json()).unwrap();
    let run = |out: &str| {
        let out_dir = dir.path().join(out);
        let status = std::process::Command::new(env!("CARGO_BIN_EXE_ssm"))
            .args(["train", "--config"])
            .arg(&cfg_path)
            .args(["--seed", "7", "--out-dir"])
            .arg(&out_dir)
            .status()
            .unwrap();
        assert!(status.success());
        (
            std::fs::read(out_dir.join("checkpoint.bin")).unwrap(),
            std::fs::read(out_dir.join("metrics.json")).unwrap(),
        )
    };
    let (ckpt_a, metrics_a) = run("a");
    let (ckpt_b, metrics_b) = run("b");
    let ok = ckpt_a == ckpt_b && metrics_a == metrics_b;
    verdict(
        "8 determinism",
        ok,
        "two identical train invocations produced byte-identical checkpoint and metrics files",
    );
}

#[test]
fn criterion_9_data_scaling() {
    let r = directional_runs();
    let solo_level = r.stl.avg_f1;
    let ok = r.fe_fraction.iter().all(|(_, m)| m.avg_f1 >= solo_level);
    let detail: Vec<String> = r
        .fe_fraction
        .iter()
        .map(|(f, m)| format!("{f}: {:.3}", m.avg_f1))
        .collect();
    verdict(
        "9 data-scaling",
        ok,
        &format!("paired-task fractions [{}] vs single-task {solo_level:.3}", detail.join(", ")),
    );
}
