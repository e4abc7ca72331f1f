use lap_core::experiment::*;
use lap_core::models::simulate::Scenario;
use lap_core::solvers::{IterationRecord, Method};

fn tiny(method: Method, dir: &std::path::Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(ProblemKind::Sr2d, method, dir);
    cfg.scenario_override = Some(Scenario::SuperRes {
        fine_cells: vec![32, 32],
        factor: vec![4, 4],
        n_frames: 8,
    });
    cfg.trials = 3;
    cfg.max_outer = Some(4);
    cfg
}

fn record(i: usize) -> IterationRecord {
    IterationRecord {
        iter: i,
        objective: 1.0 / (i as f64 + 3.0),
        data_misfit: 0.1 + 1e-17 * i as f64,
        relerr_x: f64::NAN,
        relerr_w: 2.0f64.sqrt(),
        matvecs: 7 * i as u64,
        alpha: 1e-300,
        eta: 0.5f64.powi(i as i32),
        step_norm: 0.0,
        pgrad_norm: 0.0,
        iterate_norm: 0.0,
        time_s: 0.123456789,
    }
}

#[test]
fn convergence_csv_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.csv");
    let hist: Vec<IterationRecord> = (0..6).map(record).collect();
    write_convergence_csv(&path, &hist).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().next().unwrap(), CONVERGENCE_HEADER);
    let back = read_convergence_csv(&path).unwrap();
    assert_eq!(back.len(), hist.len());
    for (a, b) in back.iter().zip(&hist) {
        let b = ConvergenceRow::from(b);
        assert_eq!(a.iter, b.iter);
        assert_eq!(a.objective.to_bits(), b.objective.to_bits());
        assert_eq!(a.data_misfit.to_bits(), b.data_misfit.to_bits());
        assert!(a.relerr_x.is_nan());
        assert_eq!(a.relerr_w.to_bits(), b.relerr_w.to_bits());
        assert_eq!(a.matvecs, b.matvecs);
        assert_eq!(a.alpha.to_bits(), b.alpha.to_bits());
        assert_eq!(a.eta.to_bits(), b.eta.to_bits());
        assert_eq!(a.time_s.to_bits(), b.time_s.to_bits());
    }
}

#[test]
fn pgm_file_layout() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.pgm");
    write_pgm(&path, 3, 2, &[0.0, 0.5, 1.0, 0.25, 0.75, 0.1]).unwrap();
    let b = std::fs::read(&path).unwrap();
    assert_eq!(&b[..11], b"P5\n3 2\n255\n");
    assert_eq!(&b[11..], &[0, 128, 255, 64, 191, 26]);
}

#[test]
fn run_writes_artifacts_and_summary_means() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(Method::Lap, dir.path());
    let res = run_experiment(&cfg).unwrap();
    for t in 0..3 {
        let td = trial_dir(dir.path(), t);
        for f in ["convergence.csv", "motion_true.csv", "motion_est.csv", "x_init.pgm", "x_est.pgm", "x_true.pgm"] {
            assert!(td.join(f).exists(), "{f} missing");
        }
        let pgm = std::fs::read(td.join("x_est.pgm")).unwrap();
        assert_eq!(pgm.len(), 13 + 32 * 32);
        let motion = std::fs::read_to_string(td.join("motion_est.csv")).unwrap();
        assert_eq!(motion.lines().count(), 1 + 8);
    }
    let cfgtxt = std::fs::read_to_string(dir.path().join("config.txt")).unwrap();
    assert!(cfgtxt.contains("solver=lap\n") && cfgtxt.contains("seed=7\n"));
    let rows = read_summary(&dir.path().join("summary.csv")).unwrap();
    assert_eq!(rows.len(), 1);
    let finals: Vec<ConvergenceRow> = (0..3)
        .map(|t| {
            read_convergence_csv(&trial_dir(dir.path(), t).join("convergence.csv"))
                .unwrap()
                .pop()
                .unwrap()
        })
        .collect();
    let mean = |f: &dyn Fn(&ConvergenceRow) -> f64| finals.iter().map(f).sum::<f64>() / 3.0;
    let s = &rows[0];
    assert_eq!(s.trials, 3);
    assert_eq!(s.failed, 0);
    assert!((s.mean_iters - mean(&|r| r.iter as f64)).abs() <= 1e-12);
    assert!((s.mean_relerr_x - mean(&|r| r.relerr_x)).abs() <= 1e-12);
    assert!((s.mean_relerr_w - mean(&|r| r.relerr_w)).abs() <= 1e-12);
    assert!((s.mean_matvecs - mean(&|r| r.matvecs as f64)).abs() <= 1e-12);
    assert_eq!(res.summary, *s);
    let table = merge_tables(&[dir.path().to_path_buf()]).unwrap();
    assert!(table.lines().count() == 2 && table.contains("lap"));
}

#[test]
fn start_at_truth_without_noise_keeps_the_truth() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(Method::Lap, dir.path());
    cfg.trials = 1;
    cfg.noise = 0.0;
    cfg.alpha = 0.0;
    cfg.start_at_truth = true;
    let res = run_experiment(&cfg).unwrap();
    assert!(res.summary.mean_relerr_x <= 1e-8);
}

#[test]
fn problem_sizes_match_the_scenarios() {
    use lap_core::models::simulate::generate;
    let cfg = ExperimentConfig::new(ProblemKind::Sr2d, Method::Lap, "unused");
    let p = generate(&cfg.problem_spec(), 1, 0).unwrap().problem;
    assert_eq!((p.n_image(), p.n_motion()), (16384, 96));
    assert_eq!(p.n_image() + p.n_motion(), 16480);
    let mut cfg = ExperimentConfig::new(ProblemKind::Mri, Method::Lap, "unused");
    cfg.regularizer = lap_core::models::Regularizer::Hybrid;
    let p = generate(&cfg.problem_spec(), 1, 0).unwrap().problem;
    // complex samples counted once
    assert_eq!(p.data.len() / 2, 128 * 128 * 32 / 16 * 16);
}

#[test]
fn three_d_artifacts_include_raw_volumes() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::new(ProblemKind::Sr3d, Method::Bcd, dir.path());
    cfg.scenario_override = Some(Scenario::SuperRes {
        fine_cells: vec![16, 12, 8],
        factor: vec![4, 4, 2],
        n_frames: 4,
    });
    cfg.max_outer = Some(2);
    run_experiment(&cfg).unwrap();
    let td = trial_dir(dir.path(), 0);
    let raw = std::fs::read(td.join("x_est.raw")).unwrap();
    assert_eq!(raw.len(), 4 * 16 * 12 * 8);
    let side = std::fs::read_to_string(td.join("x_est.txt")).unwrap();
    assert!(side.contains("shape=16x12x8"));
    let pgm = std::fs::read(td.join("x_est.pgm")).unwrap();
    assert_eq!(&pgm[..13], b"P5\n16 12\n255\n");
}
