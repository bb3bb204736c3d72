//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line for
//! each, and exits non-zero if any failed.
//!
//! `ACCEPTANCE_ONLY=3,4` restricts the run to the listed criteria.

use std::process::ExitCode;
use std::time::Instant;

use ciga::graphdata::{write_dataset, Batch, Graph};
use ciga::harness::{plot_curves, run_experiment, ExperimentConfig, RunReport};
use ciga::model::{forward, forward_bound, ModelConfig, ModelParams};
use ciga::numerics::{grad_check_guarded, Matrix, Tape, Var};
use ciga::objectives::{
    ciga_loss, contrastive_cmi, cross_entropy, hinge_spurious, CigaVersion, HingeDirection, LossWeights,
};
use ciga::par::Execution;
use ciga::rng::SplitRng;
use ciga::scmgen::{gen_dataset, gen_graph, GenConfig, ShiftMode, Split};
use ciga::trainer::{train, Objective, RunConfig};

const SEEDS: [u64; 3] = [1, 2, 3];
const RATIO: f64 = 0.25;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn desk_gen(mode: ShiftMode, bias: f64) -> GenConfig {
    GenConfig {
        bias,
        train_per_class: 500,
        val_per_class: 200,
        test_per_class: 200,
        shift_mode: mode,
        ..GenConfig::default()
    }
}

fn desk_run(objective: Objective, loss: LossWeights) -> RunConfig {
    RunConfig {
        objective,
        loss,
        layers: 3,
        hidden: 32,
        ratio: RATIO,
        batch_norm: true,
        ..RunConfig::default()
    }
}

fn desk_ciga_weights() -> LossWeights {
    LossWeights {
        alpha: 1.0,
        beta: 1.0,
        ..LossWeights::default()
    }
}

fn mean_metric(report: &RunReport, config: usize, metric: &str) -> f64 {
    report.aggregate(config, metric).map_or(f64::NAN, |a| a.mean)
}

// 1

fn small_graphs(seed: u64) -> Vec<Graph> {
    let cfg = GenConfig {
        base_size_range: (4, 7),
        shift_mode: ShiftMode::Struc,
        seed,
        ..GenConfig::default()
    };
    [0, 0, 1, 1, 2]
        .iter()
        .enumerate()
        .map(|(i, &y)| gen_graph(&cfg, Split::Train, i, y).unwrap())
        .collect()
}

fn gradient_check() -> Outcome {
    let weights = desk_ciga_weights();
    let (mut worst, mut checked, mut skipped) = (0.0f64, 0usize, 0usize);
    for instance in 0..100u64 {
        let graphs = small_graphs(instance);
        let batch = Batch::new(&graphs).unwrap();
        let cfg = ModelConfig {
            feature_dim: graphs[0].feature_dim(),
            hidden: 5,
            layers: 3,
            num_classes: 3,
            ratio: 0.4,
            classifier_input: Default::default(),
            batch_norm: false,
        };
        // every tensor random, biases included, so no hidden layer starts dead
        let mut params = ModelParams::init(cfg, &mut SplitRng::new(instance, 7)).unwrap();
        let mut rng = SplitRng::new(instance, 8);
        for t in &mut params.tensors {
            t.data_mut().iter_mut().for_each(|v| *v = 0.5 * rng.normal());
        }
        for t in 0..params.tensors.len() {
            let f = |tape: &mut Tape, w: Var| {
                let mut bound = params.bind(tape);
                bound.vars[t] = w;
                let fwd = forward_bound(tape, bound, &params.config, &batch)?;
                let rc = cross_entropy(tape, fwd.invariant.logits, &batch.labels)?;
                let rs = cross_entropy(tape, fwd.spurious.logits, &batch.labels)?;
                let contrast = contrastive_cmi(tape, fwd.invariant.repr, &batch.labels, weights.tau)?;
                let hinge = hinge_spurious(tape, rs.per_sample, rc.per_sample, HingeDirection::default())?;
                let loss = ciga_loss(tape, CigaVersion::V2, rc.mean, contrast.value, hinge, &weights)?;
                let mut sig = fwd.mask.hard.clone();
                sig.extend(tape.relu_pattern());
                let (c, s) = (tape.value(rc.per_sample), tape.value(rs.per_sample));
                sig.extend(c.data().iter().zip(s.data()).map(|(c, s)| c <= s));
                Ok((loss, sig))
            };
            let report = grad_check_guarded(f, &params.tensors[t], 1e-5, None).unwrap();
            worst = worst.max(report.max_rel_error);
            checked += report.checked;
            skipped += report.skipped;
        }
    }
    outcome(
        worst < 1e-4 && checked > 0,
        format!("max rel error {worst:.2e} over {checked} coordinates ({skipped} on kinks skipped)"),
    )
}

// 2

fn generator_statistics() -> Outcome {
    let cfg = GenConfig {
        bias: 0.9,
        seed: 11,
        ..GenConfig::default()
    };
    let draws = 10_000;
    let mut counts = [[0usize; 3]; 3];
    let mut paired = 0usize;
    for i in 0..draws {
        let g = gen_graph(&cfg, Split::Train, i, i % 3).unwrap();
        let (m, b) = (g.meta().motif, g.meta().base);
        counts[m][b] += 1;
        paired += usize::from(m == b);
    }
    let train_rate = paired as f64 / draws as f64;
    let mut off = Vec::new();
    for (m, row) in counts.iter().enumerate() {
        let total: usize = row.iter().sum();
        for (b, &c) in row.iter().enumerate() {
            if b != m {
                off.push(c as f64 / total as f64);
            }
        }
    }
    let mut held_out = Vec::new();
    for split in [Split::Val, Split::Test] {
        let hits = (0..draws)
            .filter(|&i| {
                let g = gen_graph(&cfg, split, i, i % 3).unwrap();
                g.meta().motif == g.meta().base
            })
            .count();
        held_out.push(hits as f64 / draws as f64);
    }
    let pass = (0.88..=0.92).contains(&train_rate)
        && off.iter().all(|f| (0.03..=0.07).contains(f))
        && held_out.iter().all(|f| (0.303..=0.363).contains(f));
    let (lo, hi) = off.iter().fold((1.0f64, 0.0f64), |(l, h), &f| (l.min(f), h.max(f)));
    outcome(
        pass,
        format!(
            "train paired {train_rate:.4}, off-diagonal [{lo:.4}, {hi:.4}], val {:.4}, test {:.4}",
            held_out[0], held_out[1]
        ),
    )
}

// 3

fn erm_degradation() -> Outcome {
    let biases = [0.33, 0.6, 0.9];
    let grid: Vec<ExperimentConfig> = biases
        .iter()
        .map(|&b| ExperimentConfig {
            gen: desk_gen(ShiftMode::Struc, b),
            run: desk_run(Objective::Erm, LossWeights::default()),
        })
        .collect();
    let report = run_experiment(&grid, &SEEDS, Execution::Parallel).unwrap();
    let means: Vec<f64> = (0..biases.len()).map(|c| mean_metric(&report, c, "test_acc")).collect();
    let pass = report.excluded.is_empty() && means.windows(2).all(|w| w[1] <= w[0] + 0.03);
    outcome(
        pass,
        format!(
            "ERM struc test acc at bias {biases:?}: [{}]",
            means.iter().map(|m| format!("{:.2}", 100.0 * m)).collect::<Vec<_>>().join(", ")
        ),
    )
}

// 4

fn ciga_improvement() -> Outcome {
    let cells = [
        desk_run(Objective::Erm, LossWeights::default()),
        desk_run(
            Objective::CigaV1,
            LossWeights {
                beta: 0.0,
                ..desk_ciga_weights()
            },
        ),
        desk_run(Objective::CigaV2, desk_ciga_weights()),
    ];
    let grid: Vec<ExperimentConfig> = cells
        .into_iter()
        .map(|run| ExperimentConfig {
            gen: desk_gen(ShiftMode::MixedFiif, 0.9),
            run,
        })
        .collect();
    let report = run_experiment(&grid, &SEEDS, Execution::Parallel).unwrap();
    let [erm, v1, v2] = [0, 1, 2].map(|c| 100.0 * mean_metric(&report, c, "test_acc"));
    let pass = report.excluded.is_empty() && v2 - erm >= 5.0 && v1 - erm >= 3.0;
    outcome(
        pass,
        format!(
            "mixed_fiif b=0.9 test acc: ERM {erm:.2}, CIGAv1 {v1:.2} ({:+.2}), CIGAv2 {v2:.2} ({:+.2})",
            v1 - erm,
            v2 - erm
        ),
    )
}

// 5

fn reduction_identity() -> Outcome {
    let data = gen_dataset(&GenConfig {
        bias: 0.8,
        train_per_class: 30,
        val_per_class: 10,
        test_per_class: 10,
        shift_mode: ShiftMode::MixedFiif,
        seed: 4,
        ..GenConfig::default()
    })
    .unwrap();
    let base = RunConfig {
        max_epochs: 6,
        pretrain_epochs: 3,
        hidden: 8,
        seed: 4,
        ..RunConfig::default()
    };
    let erm = train(&base, &data).unwrap();
    let mut identical = true;
    for objective in [Objective::CigaV1, Objective::CigaV2] {
        let cfg = RunConfig {
            objective,
            loss: LossWeights {
                alpha: 0.0,
                beta: 0.0,
                ..LossWeights::default()
            },
            ..base.clone()
        };
        let run = train(&cfg, &data).unwrap();
        identical &= run.log.to_csv() == erm.log.to_csv();
        identical &= run.checkpoint.params == erm.checkpoint.params;
    }
    outcome(
        identical,
        format!("{} epochs; logs and weights compared byte for byte", erm.log.rows.len()),
    )
}

// 6

fn subgraph_recovery() -> Outcome {
    let grid = [ExperimentConfig {
        gen: desk_gen(ShiftMode::Struc, 0.33),
        run: desk_run(Objective::CigaV2, desk_ciga_weights()),
    }];
    let report = run_experiment(&grid, &SEEDS, Execution::Parallel).unwrap();
    let recall = mean_metric(&report, 0, "motif_recall");
    outcome(
        report.excluded.is_empty() && recall >= RATIO + 0.10,
        format!("CIGAv2 struc b=0.33 mean motif recall {recall:.4} vs random baseline {RATIO}"),
    )
}

// 7

fn contrast_value(rows: &[&[f64]], labels: &[usize]) -> f64 {
    let mut tape = Tape::new();
    let h = tape.constant(Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap());
    let c = contrastive_cmi(&mut tape, h, labels, 1.0).unwrap();
    tape.scalar(c.value)
}

fn hinge_value(rc: &[f64], rs: &[f64]) -> f64 {
    let mut tape = Tape::new();
    let c = tape.constant(Matrix::column(rc));
    let s = tape.constant(Matrix::column(rs));
    let h = hinge_spurious(&mut tape, s, c, HingeDirection::default()).unwrap();
    tape.scalar(h)
}

fn loss_hand_values() -> Outcome {
    let zero = contrast_value(&[&[1.0, 2.0], &[1.0, 2.0]], &[0, 0]);
    let one_neg = contrast_value(&[&[1.0, 0.0], &[1.0, 0.0], &[-1.0, 0.0]], &[0, 0, 1]);
    // only the anchors of class 0 have positives; each sees 3 equal negatives
    let row: &[f64] = &[0.5, 0.5];
    let same = contrast_value(&[row; 5], &[0, 0, 1, 2, 3]);
    let want = [0.0, (1.0 + (-2.0f64).exp()).ln(), 4f64.ln()];
    let got = [zero, one_neg, same];
    let contrast_ok = got.iter().zip(&want).all(|(g, w)| (g - w).abs() < 1e-6);
    let hinges = [hinge_value(&[0.2], &[0.5]), hinge_value(&[0.9], &[0.5]), hinge_value(&[0.2, 0.9], &[0.5, 0.5])];
    let hinge_ok = hinges == [0.5, 0.0, 0.25];
    outcome(
        contrast_ok && hinge_ok,
        format!("contrast {got:?} vs {want:?}; hinge {hinges:?}"),
    )
}

// 8

/// Every artifact of a gen -> train -> report -> plot pipeline, as bytes.
fn pipeline_bytes() -> Vec<Vec<u8>> {
    let mut out = Vec::new();
    let mut results = Vec::new();
    for bias in [0.5, 0.9] {
        let cfg = GenConfig {
            bias,
            train_per_class: 10,
            val_per_class: 5,
            test_per_class: 5,
            base_size_range: (4, 8),
            shift_mode: ShiftMode::MixedFiif,
            seed: 7,
            ..GenConfig::default()
        };
        let data = gen_dataset(&cfg).unwrap();
        let mut file = Vec::new();
        write_dataset(&data, &mut file).unwrap();
        out.push(file);
        let run = RunConfig {
            objective: Objective::CigaV2,
            loss: desk_ciga_weights(),
            batch_size: 8,
            max_epochs: 4,
            pretrain_epochs: 2,
            hidden: 8,
            seed: 7,
            ..RunConfig::default()
        };
        let exp = ExperimentConfig { gen: cfg, run };
        let (result, trained) = ciga::harness::run_single(&exp, &data);
        let trained = trained.unwrap();
        out.push(trained.log.to_csv().into_bytes());
        out.push(trained.checkpoint.to_json().unwrap().into_bytes());
        results.push(result);
    }
    let report = RunReport::from_results(results).unwrap();
    out.push(report.to_json().unwrap().into_bytes());
    out.push(report.to_csv().into_bytes());
    out.push(plot_curves(&[report], "test_acc").unwrap().into_bytes());
    out
}

fn determinism() -> Outcome {
    let a = pipeline_bytes();
    let b = pipeline_bytes();
    let same = a == b;
    outcome(
        same,
        format!(
            "{} artifacts ({} bytes) identical across reruns",
            a.len(),
            a.iter().map(Vec::len).sum::<usize>()
        ),
    )
}

// 9

fn permutation_invariance() -> Outcome {
    let cfg = GenConfig {
        shift_mode: ShiftMode::Struc,
        seed: 9,
        ..GenConfig::default()
    };
    let graphs: Vec<Graph> = (0..20).map(|i| gen_graph(&cfg, Split::Test, i, i % 3).unwrap()).collect();
    let model = desk_run(Objective::CigaV2, desk_ciga_weights()).model_config(graphs[0].feature_dim(), 3);
    let params = ModelParams::init(model, &mut SplitRng::new(9, 1)).unwrap();
    let logits = |gs: &[Graph]| {
        let batch = Batch::new(gs).unwrap();
        let mut tape = Tape::new();
        let f = forward(&mut tape, &params, &batch, false).unwrap();
        (tape.value(f.invariant.logits).clone(), tape.value(f.spurious.logits).clone())
    };
    let (inv, spu) = logits(&graphs);
    let mut rng = SplitRng::new(9, 2);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let permuted: Vec<Graph> = graphs
            .iter()
            .map(|g| {
                let mut p: Vec<usize> = (0..g.num_nodes()).collect();
                rng.shuffle(&mut p);
                g.permute_nodes(&p).unwrap()
            })
            .collect();
        let (i2, s2) = logits(&permuted);
        worst = worst.max(inv.max_abs_diff(&i2)).max(spu.max_abs_diff(&s2));
    }
    outcome(worst < 1e-6, format!("max logit change {worst:.2e} over 50 relabelings of 20 graphs"))
}

type Criterion = (u32, &'static str, fn() -> Outcome);

const CRITERIA: [Criterion; 9] = [
    (1, "gradient correctness", gradient_check),
    (2, "generator statistics", generator_statistics),
    (3, "ERM degradation trend", erm_degradation),
    (4, "CIGA improvement trend", ciga_improvement),
    (5, "reduction identity", reduction_identity),
    (6, "subgraph recovery", subgraph_recovery),
    (7, "loss hand values", loss_hand_values),
    (8, "determinism", determinism),
    (9, "permutation invariance", permutation_invariance),
];

fn main() -> ExitCode {
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let mut failed = 0;
    for (id, name, run) in CRITERIA {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let started = Instant::now();
        let result = run();
        let status = if result.pass { "PASS" } else { "FAIL" };
        println!(
            "criterion {id} [{status}] {name}: {} ({:.1}s)",
            result.detail,
            started.elapsed().as_secs_f64()
        );
        failed += usize::from(!result.pass);
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
