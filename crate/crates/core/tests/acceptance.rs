//! One PASS/FAIL line per acceptance criterion, each with the measured
//! numbers and the wall time. INFO lines carry context that is not gated.
//! Exits non-zero when any criterion fails.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use picl::activation::{build_dataset, generate_planted, PlantedSpec, QuantityKind};
use picl::config::{EvaluationConfig, ExperimentConfig, InterventionConfig, SimulationConfig};
use picl::correlation::{correlate_all, labels_of, pearson, sync_strength, top_k, PearsonAccumulator, SelectionMode};
use picl::forecast::bounded_relative_error;
use picl::physics::{
    energy, integrate, sample_system, simulate, PhaseState, SamplingRanges, SystemKind, SystemSpec, Trajectory,
};
use picl::pipeline::{Manifest, Pipeline, RunOptions, Stage};
use picl::sae::{train, SaeParams, TrainConfig};
use picl::tokenizer::{fit_scaling, parse, serialize, ScalingParams};

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

fn tokenization() -> Verdict {
    let worked = serialize(&[-1.348, -0.74, -0.054, 0.582, 1.050], &ScalingParams::identity(), 3).unwrap();
    let exact = worked.text == "-1348,-740,-54,582,1050";

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(2..200);
        let scale = 10f64.powf(rng.random_range(-3.0..4.0));
        let shift = rng.random_range(-1e3..1e3);
        let series: Vec<f64> = (0..n).map(|_| shift + scale * rng.random_range(-1.0..1.0)).collect();
        let params = fit_scaling(&series, 0.99, 0.3).unwrap();
        let back = parse(&serialize(&series, &params, 3).unwrap(), &params).unwrap();
        for (v, r) in series.iter().zip(&back) {
            // Bound a * 0.5e-3, plus a few ulps of the unscaling arithmetic.
            let bound = params.a * 0.5e-3 + 4.0 * f64::EPSILON * (v.abs() + params.b.abs() + params.a);
            worst = worst.max((v - r).abs() / bound);
        }
    }
    verdict(
        exact && worst <= 1.0,
        format!("worked example {:?}, worst round-trip error / bound {worst:.3}", worked.text),
    )
}

/// Mass 2 between two near-immovable masses oscillates with omega 0.5.
fn sho_max_error(dt: f64) -> f64 {
    let spec = SystemSpec {
        kind: SystemKind::MassSpring1D,
        masses: [1e15, 4.0, 1e15],
        spring_constants: [0.5, 0.5],
        natural_lengths: [1.0, 1.0],
        gravity: 0.0,
    };
    let mut state = PhaseState::at_rest(spec.equilibrium_positions());
    state.positions[1] += 0.3;
    let steps = (10.0 / dt).round() as usize;
    integrate(&spec, &state, dt, steps)
        .unwrap()
        .states
        .iter()
        .map(|s| (s.positions[1] - (1.0 + 0.3 * (0.5 * s.time).cos())).abs() / 0.3)
        .fold(0.0, f64::max)
}

fn drift(spec: &SystemSpec, initial: &PhaseState, dt: f64, steps: usize) -> f64 {
    let e0 = energy(spec, initial).unwrap().total;
    integrate(spec, initial, dt, steps)
        .unwrap()
        .states
        .iter()
        .map(|s| (energy(spec, s).unwrap().total - e0).abs() / e0.abs())
        .fold(0.0, f64::max)
}

fn simulator() -> Verdict {
    let sho = sho_max_error(0.1);
    let spec = SystemSpec {
        kind: SystemKind::MassSpring1D,
        masses: [1.5; 3],
        spring_constants: [0.75; 2],
        natural_lengths: [1.0; 2],
        gravity: 9.8,
    };
    let initial = PhaseState {
        positions: vec![0.2, 0.9, 2.15],
        velocities: vec![0.3, -0.2, 0.1],
        time: 0.0,
    };
    let coarse = drift(&spec, &initial, 0.1, 1056);
    let fine = drift(&spec, &initial, 0.05, 2112);
    verdict(
        sho < 1e-6 && coarse <= 1e-4 && coarse / fine >= 8.0,
        format!("SHO rel. error {sho:.2e}, drift {coarse:.2e}, halving dt reduces drift {:.1}x", coarse / fine),
    )
}

fn default_range_drift() -> String {
    let ranges = SamplingRanges::default();
    let drifts: Vec<f64> = (0..200)
        .map(|seed| {
            let (spec, state) = sample_system(seed, SystemKind::MassSpring1D, &ranges).unwrap();
            drift(&spec, &state, 0.1, 1056)
        })
        .collect();
    let mut sorted = drifts.clone();
    sorted.sort_by(f64::total_cmp);
    format!(
        "default-range mass-spring drift <= 1e-4 in {}/200 draws, median {:.1e}",
        drifts.iter().filter(|&&d| d <= 1e-4).count(),
        sorted[100]
    )
}

fn sae_gradient() -> Verdict {
    let (h, lambda, step) = (3, 0.1, 1e-6);
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = SaeParams::<f64>::init(h, seed).unwrap();
        p.b_e.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
        p.b_d.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
        let rows: Vec<Vec<f64>> = (0..4).map(|_| (0..h).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let batch: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        let analytic = p.gradient(&batch, lambda).unwrap().1.flatten();
        let flat = p.flatten();
        let loss = |v: &[f64]| SaeParams::from_flat(h, v).unwrap().loss(&batch, lambda).unwrap().total;
        let numeric: Vec<f64> = (0..flat.len())
            .map(|k| {
                let (mut plus, mut minus) = (flat.clone(), flat.clone());
                plus[k] += step;
                minus[k] -= step;
                (loss(&plus) - loss(&minus)) / (2.0 * step)
            })
            .collect();
        let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
        let diff = norm(&mut analytic.iter().zip(&numeric).map(|(a, b)| a - b));
        let rel = diff / (norm(&mut analytic.iter().copied()) + norm(&mut numeric.iter().copied()));
        worst = worst.max(rel);
    }
    verdict(worst < 1e-5, format!("worst relative gradient error {worst:.2e} over 20 instances"))
}

fn direct_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    sxy / (sxx * syy).sqrt()
}

fn streaming(x: &[f64], y: &[f64]) -> Option<f64> {
    let mut acc = PearsonAccumulator::default();
    x.iter().zip(y).for_each(|(&a, &b)| acc.push(a, b));
    acc.finish()
}

fn pearson_correctness() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    let mut exact = true;
    for _ in 0..100 {
        let n = rng.random_range(2..500);
        let offset = rng.random_range(-100.0..100.0);
        let x: Vec<f64> = (0..n).map(|_| offset + rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = x.iter().map(|v| 0.3 * v + rng.random_range(-1.0..1.0)).collect();
        worst = worst.max((streaming(&x, &y).unwrap() - direct_pearson(&x, &y)).abs());
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        exact &= streaming(&x, &x) == Some(1.0) && streaming(&x, &neg) == Some(-1.0);
        exact &= pearson(&x, &x).unwrap() == Some(1.0) && pearson(&x, &neg).unwrap() == Some(-1.0);
    }
    verdict(
        worst <= 1e-10 && exact,
        format!("streaming vs direct max |diff| {worst:.1e}, self/negated exact: {exact}"),
    )
}

/// A 17-block planted dataset; `plants[b]` are the sources of block `b`,
/// blocks with none carry only sparse distractors.
fn planted_matrix(plants: &[&[QuantityKind]], trajectories: &BTreeMap<String, Trajectory>) -> picl::correlation::CorrelationMatrix {
    let h = 32;
    let config = TrainConfig {
        learning_rate: 1e-3,
        sparsity_weight: 0.1,
        batch_size: 64,
        epochs: 30,
        ..TrainConfig::default()
    };
    let mut labels = None;
    let mut blocks = Vec::new();
    for b in 0..17u32 {
        let sources = plants.get(b as usize).copied().unwrap_or(&[]);
        let distractors = if sources.is_empty() { 24 } else { 0 };
        let spec = PlantedSpec::random(h, sources.to_vec(), distractors, 3.0, 0.1, 100 + u64::from(b)).unwrap();
        let data = generate_planted(&spec, b, trajectories, 0..64, 7).unwrap();
        let dataset = build_dataset(&data.tensors, trajectories, &data.alignments, 1).unwrap();
        let rows = dataset.residuals();
        let (sae, _) = train(&rows, &TrainConfig { seed: u64::from(b), ..config.clone() }).unwrap();
        blocks.push((b, rows.iter().map(|r| sae.encode(r).unwrap()).collect()));
        labels = Some(dataset.samples.iter().map(labels_of).collect::<Vec<_>>());
    }
    correlate_all(64, &blocks, &labels.unwrap()).unwrap()
}

fn planted_recovery(info: &mut Vec<String>) -> Verdict {
    use QuantityKind::*;
    let trajectories: BTreeMap<String, Trajectory> = (0..80)
        .map(|i| {
            let t = simulate(i, SystemKind::MassSpring1D, &SamplingRanges::default(), 0.1, 64).unwrap();
            (format!("t{i:03}"), t)
        })
        .collect();
    let top1 = |m: &picl::correlation::CorrelationMatrix, q| top_k(m, q, 1).unwrap().entries[0].rho.abs();

    let three = planted_matrix(&[&[TotalEnergy], &[KineticEnergy], &[PotentialEnergy]], &trajectories);
    let sources = [TotalEnergy, KineticEnergy, PotentialEnergy].map(|q| top1(&three, q));
    let baseline = top1(&three, RandomBaseline);
    let three_sync = sync_strength(&three, TotalEnergy, 0.25, SelectionMode::Signed).unwrap();
    info.push(format!(
        "three-source dataset: sync(E, KE) {:.3}, sync(E, PE) {:.3}",
        three_sync.strength[&KineticEnergy].unwrap_or(f64::NAN),
        three_sync.strength[&PotentialEnergy].unwrap_or(f64::NAN)
    ));

    let co = planted_matrix(&[&[TotalEnergy], &[KineticEnergy]], &trajectories);
    let sync = sync_strength(&co, TotalEnergy, 0.25, SelectionMode::Signed).unwrap();
    let ke = sync.strength[&KineticEnergy].unwrap_or(f64::NAN);
    let null = sync.strength[&RandomBaseline].unwrap_or(f64::NAN);

    verdict(
        sources.iter().all(|&r| r >= 0.9) && baseline <= 0.3 && ke >= 0.8 && null.abs() <= 0.3,
        format!(
            "top-1 |rho| E {:.3} KE {:.3} PE {:.3}, baseline {baseline:.3}; co-planted sync(E, KE) {ke:.3}, baseline {null:.3} over {} pairs",
            sources[0],
            sources[1],
            sources[2],
            sync.selected.len()
        ),
    )
}

fn error_metric() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut fixed = true;
    let mut in_range = true;
    for i in 0..10_000 {
        let n = rng.random_range(1..40);
        let scale = 10f64.powf(rng.random_range(-6.0..6.0));
        let z: Vec<f64> = (0..n).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..n).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
        let e = bounded_relative_error(&w, &z).unwrap();
        in_range &= (0.0..=1.0).contains(&e);
        if i < 1000 {
            let neg: Vec<f64> = z.iter().map(|v| -v).collect();
            let dbl: Vec<f64> = z.iter().map(|v| 2.0 * v).collect();
            fixed &= bounded_relative_error(&z, &z).unwrap() == 0.0;
            fixed &= bounded_relative_error(&neg, &z).unwrap() == 1.0;
            fixed &= bounded_relative_error(&dbl, &z).unwrap() == 1.0 / 3.0;
        }
    }
    verdict(
        fixed && in_range,
        format!("fixed points exact on 1000 vectors: {fixed}; Err in [0, 1] on 10^4 pairs: {in_range}"),
    )
}

fn mock_run(root: &std::path::Path) -> Pipeline {
    let config = ExperimentConfig {
        output_dir: root.to_path_buf(),
        systems: vec![SystemKind::MassSpring1D],
        context_lengths: vec![8, 16, 24, 32, 64],
        simulation: SimulationConfig {
            n_trajectories: 8,
            ..SimulationConfig::default()
        },
        sae: TrainConfig {
            learning_rate: 1e-3,
            sparsity_weight: 0.1,
            batch_size: 64,
            epochs: 30,
            ..TrainConfig::default()
        },
        evaluation: EvaluationConfig::default(),
        intervention: InterventionConfig {
            window: 16,
            trials: 10,
            ..InterventionConfig::default()
        },
        ..ExperimentConfig::default()
    };
    let pipeline = Pipeline::new(config, b"acceptance", RunOptions::default()).unwrap();
    let summary = pipeline.run(&Stage::ALL).unwrap();
    assert!(summary.success(), "{summary}");
    pipeline
}

fn intervention(p: &Pipeline) -> Verdict {
    let outcome = p.read_intervention(SystemKind::MassSpring1D).unwrap();
    let planted = &p.config().mock.plants;
    let selected: Vec<u32> = outcome.spec.targets.iter().map(|t| t.block).collect();
    let recovered = planted.iter().all(|pl| selected.contains(&pl.block));
    let wins = outcome
        .trials
        .iter()
        .filter(|t| t.planted.epsilon.is_some_and(|e| e > 0.0) && t.planted_wins())
        .count();
    let eps = |f: &dyn Fn(&picl::pipeline::TrialRecord) -> Option<f64>| {
        outcome.trials.iter().filter_map(f).sum::<f64>() / outcome.trials.len() as f64
    };
    verdict(
        recovered && wins >= 9 && outcome.trials.len() == 10,
        format!(
            "top-4 blocks {selected:?} (planted {:?}); planted > control and > 0 in {wins}/{} trials; mean eps planted {:.3}, control {:.3}",
            planted.iter().map(|p| p.block).collect::<Vec<_>>(),
            outcome.trials.len(),
            eps(&|t| t.planted.epsilon),
            eps(&|t| t.control.epsilon)
        ),
    )
}

fn sweep_shape(p: &Pipeline) -> Verdict {
    let manifest = Manifest::read(&p.root().join("manifest.json")).unwrap();
    let checkpoints = manifest.count(Stage::TrainSae, ".psae");
    let tables = ["forecast_first_step", "forecast_per_step", "energy_top_k", "energy_block_max", "sync_strength"];
    let missing: Vec<&str> = tables
        .iter()
        .copied()
        .filter(|t| !p.report_dir().join(format!("{t}.csv")).is_file())
        .collect();

    let lengths = &p.config().context_lengths;
    let reports: Vec<_> = lengths.iter().map(|&l| p.read_forecast(SystemKind::MassSpring1D, l).unwrap()).collect();
    let mut violations = 0;
    let mut compared = 0;
    for pair in reports.windows(2) {
        for (short, long) in pair[0].per_step.iter().zip(&pair[1].per_step) {
            compared += 1;
            if long.mean > short.mean {
                violations += 1;
            }
        }
    }
    let first: Vec<String> = reports
        .iter()
        .map(|r| format!("{:.4}", r.first_step().map_or(f64::NAN, |s| s.mean)))
        .collect();
    verdict(
        checkpoints == 85 && missing.is_empty() && violations == 0 && compared > 0,
        format!(
            "{checkpoints} SAE checkpoints, missing tables {missing:?}; per-step error increases with L at {violations}/{compared} (step, L) pairs; first-step error by L {first:?}"
        ),
    )
}

fn main() {
    let mut info = Vec::new();
    let mut lines = Vec::new();
    let mut run = |name: &str, f: &mut dyn FnMut() -> Verdict| {
        let start = Instant::now();
        let v = f();
        let elapsed = start.elapsed();
        lines.push((name.to_owned(), v, elapsed));
        let (name, v, elapsed) = lines.last().unwrap();
        println!("{} {name}: {} [{:.1}s]", if v.passed { "PASS" } else { "FAIL" }, v.detail, elapsed.as_secs_f64());
    };

    run("tokenization exactness", &mut tokenization);
    run("simulator correctness", &mut simulator);
    run("SAE gradient check", &mut sae_gradient);
    run("Pearson correctness", &mut pearson_correctness);
    run("planted-feature recovery", &mut || planted_recovery(&mut info));
    run("error metric properties", &mut error_metric);

    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let pipeline = mock_run(&dir.path().join("run"));
    let pipeline_time = start.elapsed();
    run("intervention causality", &mut || {
        let mut v = intervention(&pipeline);
        v.detail.push_str(&format!("; full pipeline {:.1}s", pipeline_time.as_secs_f64()));
        v
    });
    run("sweep shape", &mut || sweep_shape(&pipeline));

    info.push(default_range_drift());
    for line in &info {
        println!("INFO {line}");
    }
    let failed = lines.iter().filter(|(_, v, _)| !v.passed).count();
    let total: Duration = lines.iter().map(|(_, _, t)| *t).sum();
    println!("{}/{} criteria passed in {:.1}s", lines.len() - failed, lines.len(), total.as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
