use dynres::agents::{Algorithm, HandlerKind};
use dynres::env::EnvConfig;
use dynres::harness::{
    compute_metrics, read_csv, run_evaluation, run_training, write_csv, EpisodeRow, ExperimentConfig, MetricsRow,
};

fn config(algorithm: Algorithm, handler: HandlerKind, steps: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(algorithm, handler, vec![3, 4], steps);
    cfg.iteration_steps = 200;
    cfg
}

#[test]
fn strict_handlers_only_collide_in_dead_ends() {
    for (a, h) in [
        (Algorithm::Td3, HandlerKind::Projection),
        (Algorithm::Td3, HandlerKind::RandomReplacement),
        (Algorithm::Ppo, HandlerKind::ContinuousMasking),
        (Algorithm::MpsTd3, HandlerKind::Native),
    ] {
        let mut cfg = config(a, h, 800);
        cfg.env = EnvConfig::scenario("moving").unwrap();
        let report = run_training(&cfg).unwrap();
        assert!(report.failures.is_empty());
        for run in &report.runs {
            let collisions = run.episodes.iter().filter(|r| r.collided).count();
            assert_eq!(collisions, run.dead_end_collisions, "{a}/{h}");
        }
    }
}

#[test]
fn repeated_training_writes_identical_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(Algorithm::Pam, HandlerKind::Native, 1_200);
    let mut bytes = Vec::new();
    for i in 0..2 {
        let path = dir.path().join(format!("run{i}.csv"));
        write_csv(&path, &run_training(&cfg).unwrap().episodes()).unwrap();
        bytes.push(std::fs::read(path).unwrap());
    }
    assert_eq!(bytes[0], bytes[1]);
}

#[test]
fn metrics_are_recomputable_from_exported_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(Algorithm::Ppo, HandlerKind::DiscreteMasking, 600);
    let report = run_training(&cfg).unwrap();
    let rows = report.episodes();
    let path = dir.path().join("episodes.csv");
    write_csv(&path, &rows).unwrap();
    let back: Vec<EpisodeRow> = read_csv(&path).unwrap();
    assert_eq!(back, rows);
    let direct = compute_metrics(&rows).unwrap();
    assert_eq!(compute_metrics(&back).unwrap(), direct);

    let mpath = dir.path().join("metrics.csv");
    write_csv(&mpath, &direct).unwrap();
    let table: Vec<MetricsRow> = read_csv(&mpath).unwrap();
    assert_eq!(table, direct);
}

#[test]
fn evaluation_covers_every_seed_pair() {
    let cfg = config(Algorithm::Td3, HandlerKind::ContinuousMasking, 100);
    let report = run_training(&cfg).unwrap();
    let env = EnvConfig::scenario("simple").unwrap();
    let seeds: Vec<u64> = (0..40).collect();
    let mut rows = Vec::new();
    for run in &report.runs {
        rows.extend(run_evaluation(&run.checkpoint, Some(&env), &seeds).unwrap().rows);
    }
    assert_eq!(rows.len(), 80);
    for r in &rows {
        assert!(!(r.solved && r.collided));
        assert!(r.allowed_fraction >= 0.0 && r.allowed_fraction <= 1.0);
        if !r.solved {
            assert_eq!(r.steps, env.max_steps);
        }
    }
}
