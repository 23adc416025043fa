use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use delta_core::adapt::MethodSpec;
use delta_core::harness::compare::median;
use delta_core::harness::report::write_report_file;
use delta_core::harness::{
    compare, emit_report, emit_summary, fast_slow_schedule, make_synthetic_task, metrics, parse_csv_report,
    parse_json_lines, prepare_task, run_episode, run_online, EpisodeOptions, EpisodeReport, PreparedTask,
    ReportFormat, ReportRecord, RunLabel, Schedule, Shift, SweepConfig, TaskSpec, CSV_HEADER, DEFAULT_HIDDEN,
    SYNTHETIC_TASK_LR,
};
use delta_core::netcore::{forward, train_source, ModelSpec, OptimizerConfig, TrainConfig};
use delta_core::normalize::NormMode;
use delta_core::streams::{make_scenario, Balance, LabeledDataset, ScenarioSpec, TestStream};
use delta_core::{Error, FeatureMatrix};

fn prepared() -> &'static PreparedTask {
    static TASK: OnceLock<PreparedTask> = OnceLock::new();
    TASK.get_or_init(|| prepare_task(&TaskSpec::default(), &DEFAULT_HIDDEN, &TrainConfig::default()).unwrap())
}

fn method(name: &str) -> MethodSpec {
    MethodSpec::preset(name).unwrap().with_optimizer(OptimizerConfig::adam(SYNTHETIC_TASK_LR))
}

fn stream(spec: &ScenarioSpec) -> TestStream {
    make_scenario(&prepared().test, spec).unwrap()
}

fn episode(name: &str, spec: &ScenarioSpec, options: &EpisodeOptions) -> EpisodeReport {
    let p = prepared();
    run_episode(&p.model, &stream(spec), &method(name), options, &RunLabel::from_scenario(spec)).unwrap()
}

fn source_accuracy(model: &delta_core::netcore::ModelState, data: &LabeledDataset) -> f64 {
    let preds = forward(model, &data.features, NormMode::SourceEma).unwrap().probs.argmax_rows();
    metrics(&preds, &data.labels, data.classes).unwrap().mean_class_acc
}

fn without_duration(mut r: EpisodeReport) -> EpisodeReport {
    r.duration_ms = 0.0;
    r
}

#[test]
fn source_online_equals_offline() {
    let spec = ScenarioSpec::ds_cb(0.5, 3);
    let s = stream(&spec);
    let r = episode("source", &spec, &EpisodeOptions::new(64));
    let offline = forward(&prepared().model, &s.features, NormMode::SourceEma).unwrap().probs.argmax_rows();
    let m = metrics(&offline, &s.labels, s.classes).unwrap();
    assert_eq!(r.acc_mean_class, m.mean_class_acc);
    assert_eq!(r.acc_overall, m.overall_acc);
    assert_eq!(r.pred_counts, m.counts);
    assert_eq!(r.updates, 0);
}

#[test]
fn final_partial_batch_is_processed_as_is() {
    let p = prepared();
    let x = p.test.features.select_rows(&(0..10).collect::<Vec<_>>());
    let run = run_online(&p.model, &x, &method("tent"), &EpisodeOptions::new(3)).unwrap();
    assert_eq!(run.prediction_batches, vec![3, 3, 3, 1]);
    assert_eq!(run.predictions.len(), 10);
}

#[test]
fn replay_is_bit_identical_and_leaves_the_model_alone() {
    let before = prepared().model.clone();
    let spec = ScenarioSpec::ds_ci(0.5, 0.1, 8);
    let mut opts = EpisodeOptions::new(64);
    opts.record_stats_error = true;
    opts.record_gamma_norm = true;
    let a = episode("ent-w+delta", &spec, &opts);
    let _other = episode("tent+tbr+la", &spec, &opts);
    let b = episode("ent-w+delta", &spec, &opts);
    assert_eq!(without_duration(a), without_duration(b));
    assert_eq!(prepared().model, before);
}

#[test]
fn traces_have_one_entry_per_step_and_update() {
    let mut opts = EpisodeOptions::new(64);
    opts.record_stats_error = true;
    opts.record_gamma_norm = true;
    let r = episode("tent+delta", &ScenarioSpec::is_cb(1), &opts);
    assert_eq!(r.steps, 2000usize.div_ceil(64));
    assert_eq!(r.stats_error.as_ref().unwrap().len(), r.steps);
    assert_eq!(r.gamma_norm.as_ref().unwrap().len(), r.updates + 1);
    assert_eq!(r.pred_counts.iter().sum::<usize>(), 2000);
    assert!((0.0..=1.0).contains(&r.acc_mean_class) && (0.0..=1.0).contains(&r.acc_overall));
}

#[test]
fn fast_slow_small_batch_arithmetic() {
    let p = prepared();
    let x = p.test.features.select_rows(&(0..128).collect::<Vec<_>>());
    let opts = EpisodeOptions::new(1).with_schedule(Schedule::FastSlow { window: 64 });
    let run = run_online(&p.model, &x, &method("tent+delta"), &opts).unwrap();
    assert_eq!(run.predictions.len(), 128);
    assert!(run.prediction_batches.iter().all(|&b| b == 1));
    assert_eq!(run.update_batches, 2);
    assert_eq!(run.updates, 2);

    // a trailing partial window is predicted but never used for an update
    let x = p.test.features.select_rows(&(0..150).collect::<Vec<_>>());
    let run = run_online(&p.model, &x, &method("tent+delta"), &opts).unwrap();
    assert_eq!((run.predictions.len(), run.update_batches), (150, 2));

    assert_eq!(fast_slow_schedule(128, 1, 64).unwrap(), vec![(0, 64), (64, 128)]);
    assert_eq!(fast_slow_schedule(128, 16, 48).unwrap(), vec![(0, 48), (48, 96)]);
    for (b, l) in [(16, 40), (64, 32), (0, 64)] {
        assert!(matches!(fast_slow_schedule(128, b, l), Err(Error::Config(_))), "B={b} L={l}");
    }
}

#[test]
fn window_equal_to_batch_is_the_standard_schedule() {
    let spec = ScenarioSpec::ds_cb(0.1, 2);
    for name in ["tent", "tent+delta", "pl+tbr+sample-drop"] {
        let plain = episode(name, &spec, &EpisodeOptions::new(32));
        let fs = episode(name, &spec, &EpisodeOptions::new(32).with_schedule(Schedule::FastSlow { window: 32 }));
        assert_eq!(plain.pred_counts, fs.pred_counts, "{name}");
        assert_eq!(plain.acc_mean_class, fs.acc_mean_class, "{name}");
        // the standard schedule also updates on the final partial batch; no prediction follows it
        assert_eq!(fs.updates, 2000 / 32, "{name}");
        assert!(plain.updates <= fs.updates + 1, "{name}");
    }
}

#[test]
fn non_finite_input_names_the_step() {
    let p = prepared();
    let mut x = p.test.features.select_rows(&(0..200).collect::<Vec<_>>());
    x.set(130, 0, f64::NAN);
    let err = run_online(&p.model, &x, &method("tent"), &EpisodeOptions::new(64)).unwrap_err();
    match err {
        Error::Numeric { detail, .. } => assert!(detail.contains("step 2"), "{detail}"),
        other => panic!("expected a numeric error, got {other:?}"),
    }
}

#[test]
fn bad_episode_inputs() {
    let p = prepared();
    let empty = FeatureMatrix::zeros(0, 16);
    assert!(matches!(run_online(&p.model, &empty, &method("tent"), &EpisodeOptions::new(4)), Err(Error::Input(_))));
    let narrow = FeatureMatrix::zeros(4, 3);
    assert!(matches!(run_online(&p.model, &narrow, &method("tent"), &EpisodeOptions::new(4)), Err(Error::Config(_))));
    let x = p.test.features.select_rows(&[0, 1]);
    assert!(matches!(run_online(&p.model, &x, &method("tent"), &EpisodeOptions::new(0)), Err(Error::Config(_))));
}

#[test]
fn metric_examples() {
    let labels: Vec<usize> = (0..8).map(|i| i % 2).collect();
    let perfect = metrics(&labels, &labels, 2).unwrap();
    assert_eq!((perfect.mean_class_acc, perfect.range), (1.0, 0));
    let flipped: Vec<usize> = labels.iter().map(|y| 1 - y).collect();
    assert_eq!(metrics(&flipped, &labels, 2).unwrap().mean_class_acc, 0.0);

    let labels: Vec<usize> = (0..100).map(|i| i % 4).collect();
    let m = metrics(&vec![0; 100], &labels, 4).unwrap();
    assert_eq!((m.counts.clone(), m.range), (vec![100, 0, 0, 0], 100));
    assert!((m.std - 1875f64.sqrt()).abs() < 1e-12);

    // classes absent from the labels do not count toward the mean
    let m = metrics(&[0, 0, 2], &[0, 0, 2], 3).unwrap();
    assert_eq!(m.mean_class_acc, 1.0);
    assert!(metrics(&[0], &[0, 1], 2).is_err());
}

#[test]
fn reports_round_trip() {
    let opts = EpisodeOptions::new(64);
    let reports = vec![
        episode("tent+delta", &ScenarioSpec::ds_ci(0.5, 0.1, 4), &opts),
        episode("bn-adapt", &ScenarioSpec::is_cb(4), &opts),
    ];

    let mut csv = Vec::new();
    emit_report(&reports, ReportFormat::Csv, &mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert_eq!(text.lines().next(), Some(CSV_HEADER));
    let parsed = parse_csv_report(&text).unwrap();
    let want: Vec<ReportRecord> = reports.iter().map(ReportRecord::from).collect();
    assert_eq!(parsed, want);
    // independent scenarios leave rho blank, balanced ones leave pi blank
    assert!(text.lines().nth(2).unwrap().starts_with("bn-adapt,is+cb,,,64,"));

    let mut jl = Vec::new();
    emit_report(&reports, ReportFormat::JsonLines, &mut jl).unwrap();
    let text = String::from_utf8(jl).unwrap();
    assert_eq!(text.lines().count(), reports.len());
    assert_eq!(parse_json_lines(&text).unwrap(), reports);
    assert!(text.contains("\"B\":64"));

    let mut empty = Vec::new();
    emit_report(&[], ReportFormat::Csv, &mut empty).unwrap();
    assert_eq!(String::from_utf8(empty).unwrap(), format!("{CSV_HEADER}\n"));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.csv");
    write_report_file(&path, &reports, ReportFormat::from_path(&path)).unwrap();
    assert_eq!(parse_csv_report(&std::fs::read_to_string(&path).unwrap()).unwrap(), want);
    let unwritable = dir.path().join("missing/r.csv");
    assert!(matches!(write_report_file(&unwritable, &reports, ReportFormat::Csv), Err(Error::Io(_))));
}

#[test]
fn malformed_csv_is_a_parse_error() {
    assert!(matches!(parse_csv_report("a,b\n"), Err(Error::Parse(_))));
    let bad = format!("{CSV_HEADER}\ntent,is+cb,,,64,0.95,0.9,x,0.5,0.5,1,2,3\n");
    assert!(matches!(parse_csv_report(&bad), Err(Error::Parse(_))));
}

fn small_sweep(methods: &[&str], scenarios: Vec<ScenarioSpec>, seeds: Vec<u64>) -> SweepConfig {
    let mut cfg = SweepConfig::new(methods.iter().map(|m| method(m)).collect(), scenarios, seeds, 64);
    cfg.task.n_train = 2000;
    cfg.task.n_test = 640;
    cfg.hidden = vec![32];
    cfg.train.epochs = 5;
    cfg
}

#[test]
fn single_cell_sweep_matches_its_episode() {
    let cfg = small_sweep(&["tent+delta"], vec![ScenarioSpec::ds_cb(0.5, 0)], vec![7]);
    let result = compare(&cfg).unwrap();
    assert_eq!(result.cells.len(), 1);
    let report = result.cells[0].report.clone().unwrap();

    let p = prepare_task(&cfg.task.with_seed(7), &cfg.hidden, &cfg.train).unwrap();
    let spec = ScenarioSpec::ds_cb(0.5, 7);
    let s = make_scenario(&p.test, &spec).unwrap();
    let direct = run_episode(&p.model, &s, &cfg.methods[0], &cfg.episode, &RunLabel::from_scenario(&spec)).unwrap();
    assert_eq!(without_duration(report.clone()), without_duration(direct));

    let row = &result.summary[0];
    assert_eq!((row.episodes, row.failures, row.seeds.clone()), (1, 0, vec![7]));
    assert_eq!(row.acc_mean, report.acc_mean_class);
    assert_eq!(row.acc_median, report.acc_mean_class);
    assert_eq!(row.acc_std, 0.0);
    assert_eq!(row.pred_std_mean, report.pred_std);
}

#[test]
fn sweep_echoes_seeds_and_records_failed_cells() {
    let impossible = ScenarioSpec {
        balance: Balance::Imbalanced { pi: 0.5, n_max: Some(100_000) },
        ..ScenarioSpec::is_cb(0)
    };
    let seeds: Vec<u64> = (2020..2030).collect();
    let mut cfg = small_sweep(&["tent"], vec![ScenarioSpec::is_cb(0), impossible], seeds.clone());
    cfg.task.n_train = 500;
    cfg.train.epochs = 2;
    let result = compare(&cfg).unwrap();
    assert_eq!(result.cells.len(), 20);
    assert_eq!(result.summary[0].seeds, seeds);
    assert_eq!((result.summary[0].episodes, result.summary[0].failures), (10, 0));
    assert_eq!((result.summary[1].episodes, result.summary[1].failures), (0, 10));
    assert!(result.cells.iter().filter(|c| c.scenario == 1).all(|c| c.report.is_err()));

    let mut out = Vec::new();
    emit_summary(&result.summary, &mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert!(text.lines().nth(1).unwrap().contains(",10,0,2020 2021 2022 2023 2024 2025 2026 2027 2028 2029,"));

    // failed rows aggregate to NaN, so compare the emitted text
    let again = compare(&cfg).unwrap();
    let strip = |r: &delta_core::harness::SweepResult| {
        r.cells.iter().map(|c| c.report.clone().map(without_duration)).collect::<Vec<_>>()
    };
    assert_eq!(strip(&result), strip(&again));
    let mut out2 = Vec::new();
    emit_summary(&again.summary, &mut out2).unwrap();
    assert_eq!(text, String::from_utf8(out2).unwrap());
}

#[test]
fn sweep_rejects_empty_or_invalid_matrices() {
    let cfg = small_sweep(&[], vec![ScenarioSpec::is_cb(0)], vec![1]);
    assert!(matches!(compare(&cfg), Err(Error::Config(_))));
    let cfg = small_sweep(&["tent"], vec![ScenarioSpec::ds_cb(-1.0, 0)], vec![1]);
    assert!(matches!(compare(&cfg), Err(Error::Config(_))));
}

#[test]
fn delta_column_at_least_tent_on_dependent_stream() {
    let cfg = SweepConfig::new(
        vec![method("tent"), method("tent+delta")],
        vec![ScenarioSpec::ds_cb(0.1, 0)],
        (2020..2030).collect(),
        64,
    );
    let result = compare(&cfg).unwrap();
    let tent = result.row("tent", "ds+cb").unwrap();
    let delta = result.row("tent+delta", "ds+cb").unwrap();
    assert_eq!(tent.failures + delta.failures, 0);
    assert!(delta.acc_median >= tent.acc_median, "{} < {}", delta.acc_median, tent.acc_median);
}

#[test]
fn synthetic_task_is_deterministic() {
    let spec = TaskSpec { n_train: 300, n_test: 100, ..TaskSpec::default() };
    assert_eq!(make_synthetic_task(&spec).unwrap(), make_synthetic_task(&spec).unwrap());
    assert_ne!(make_synthetic_task(&spec).unwrap(), make_synthetic_task(&spec.with_seed(1)).unwrap());
    for shift in [Shift::Scale(1.5), Shift::Affine(0.5)] {
        let (train, test) = make_synthetic_task(&TaskSpec { shift, ..spec.clone() }).unwrap();
        assert_eq!((train.len(), test.len()), (300, 100));
    }
    assert!(make_synthetic_task(&TaskSpec { classes: 1, ..spec.clone() }).is_err());
    assert!(make_synthetic_task(&TaskSpec { dim: 1, ..spec }).is_err());
}

#[test]
fn unshifted_test_matches_held_out_training_data() {
    let task = TaskSpec { shift: Shift::Noise(0.0), ..TaskSpec::default() };
    let (train, test) = make_synthetic_task(&task).unwrap();
    let fit = train.subset(&(0..4000).collect::<Vec<_>>());
    let held_out = train.subset(&(4000..5000).collect::<Vec<_>>());
    let spec = ModelSpec { input_dim: 16, hidden: DEFAULT_HIDDEN.to_vec(), classes: 10, seed: task.seed };
    let model = train_source(&spec, &fit, &TrainConfig { seed: task.seed, ..TrainConfig::default() }).unwrap();
    let (a, b) = (source_accuracy(&model, &test), source_accuracy(&model, &held_out));
    assert!((a - b).abs() <= 0.02, "test {a} vs held-out {b}");
}

#[test]
fn noise_shift_hurts_the_source_model_for_every_seed() {
    let worse = (2020..2030u64)
        .into_par_iter()
        .filter(|&seed| {
            let p = prepare_task(&TaskSpec::default().with_seed(seed), &DEFAULT_HIDDEN, &TrainConfig::default()).unwrap();
            let clean = TaskSpec { shift: Shift::Noise(0.0), ..p.task.clone() };
            let (_, clean_test) = make_synthetic_task(&clean).unwrap();
            source_accuracy(&p.model, &p.test) < source_accuracy(&p.model, &clean_test)
        })
        .count();
    assert_eq!(worse, 10);
}

fn blobs(n: usize, seed: u64) -> LabeledDataset {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let mut data = Vec::with_capacity(2 * n);
    for &y in &labels {
        let c = if y == 0 { -2.5 } else { 2.5 };
        for _ in 0..2 {
            let e: f64 = r.sample(StandardNormal);
            data.push(c + e);
        }
    }
    LabeledDataset::new(FeatureMatrix::from_vec(n, 2, data).unwrap(), labels, 2).unwrap()
}

/// Linear discriminant with pooled covariance: the closed-form optimum for two
/// equal-covariance Gaussian classes with equal priors.
fn lda_predictions(train: &LabeledDataset, test: &LabeledDataset) -> Vec<usize> {
    let mut mu = [[0.0; 2]; 2];
    let counts = train.class_counts();
    for (i, &y) in train.labels.iter().enumerate() {
        for j in 0..2 {
            mu[y][j] += train.features.get(i, j) / counts[y] as f64;
        }
    }
    let mut s = [[0.0; 2]; 2];
    for (i, &y) in train.labels.iter().enumerate() {
        let d = [train.features.get(i, 0) - mu[y][0], train.features.get(i, 1) - mu[y][1]];
        for a in 0..2 {
            for b in 0..2 {
                s[a][b] += d[a] * d[b] / (train.len() - 2) as f64;
            }
        }
    }
    let det = s[0][0] * s[1][1] - s[0][1] * s[1][0];
    let inv = [[s[1][1] / det, -s[0][1] / det], [-s[1][0] / det, s[0][0] / det]];
    let diff = [mu[1][0] - mu[0][0], mu[1][1] - mu[0][1]];
    let w = [inv[0][0] * diff[0] + inv[0][1] * diff[1], inv[1][0] * diff[0] + inv[1][1] * diff[1]];
    let mid = [(mu[0][0] + mu[1][0]) / 2.0, (mu[0][1] + mu[1][1]) / 2.0];
    (0..test.len())
        .map(|i| {
            let score = w[0] * (test.features.get(i, 0) - mid[0]) + w[1] * (test.features.get(i, 1) - mid[1]);
            usize::from(score > 0.0)
        })
        .collect()
}

#[test]
fn separable_blobs_are_learned() {
    let train = blobs(1000, 1);
    let held_out = blobs(1000, 2);
    let oracle = metrics(&lda_predictions(&train, &held_out), &held_out.labels, 2).unwrap().mean_class_acc;
    assert!(oracle >= 0.95, "linear baseline {oracle}");

    let spec = ModelSpec { input_dim: 2, hidden: vec![16], classes: 2, seed: 3 };
    let model = train_source(&spec, &train, &TrainConfig { epochs: 20, ..TrainConfig::default() }).unwrap();
    let acc = source_accuracy(&model, &held_out);
    assert!(acc >= 0.95, "network {acc} (linear baseline {oracle})");
}

#[test]
fn median_helper_of_tied_and_even_inputs() {
    assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
    assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), 2.5);
    assert!(median(&[]).is_nan());
}
