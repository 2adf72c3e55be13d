use std::path::Path;
use std::sync::OnceLock;

use curvrestore::curvature::harvest;
use curvrestore::data::Part;
use curvrestore::influence::{apply_update, influence_direction, restore, IterationStatus, RestorationConfig};
use curvrestore::landscape::{trajectory_compare, TrajectoryConfig};
use curvrestore::math::dot;
use curvrestore::persist::Table;
use curvrestore::pipeline::{cmd_landscape, cmd_scenario, CheckpointLabel, LandscapeData, ProbeKind, RunConfig};
use curvrestore::scenario::{build_scenario, Scenario};
use curvrestore::{Objective, RngState};

fn small_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.scenario.train.epochs = 4;
    cfg.probe_samples = 8;
    cfg.grid.n = 5;
    cfg.grid.eval_samples = 8;
    cfg
}

fn scenario() -> &'static Scenario {
    static S: OnceLock<Scenario> = OnceLock::new();
    S.get_or_init(|| build_scenario(&small_config().scenario).unwrap())
}

#[test]
fn config_toml_round_trip() {
    let cfg = RunConfig::default();
    let text = cfg.to_toml();
    assert!(text.starts_with("# schema curvrestore.run-config v1\n# config_hash "));
    let back = RunConfig::from_toml(Path::new("x.toml"), &text).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.config_hash(), cfg.config_hash());
}

#[test]
fn config_hash_ignores_output_root_only() {
    let a = RunConfig::default();
    let mut b = a.clone();
    b.output_dir = "elsewhere".into();
    assert_eq!(a.config_hash(), b.config_hash());
    b.seed += 1;
    assert_ne!(a.config_hash(), b.config_hash());
}

#[test]
fn null_step_schedule_leaves_params_unchanged() {
    let s = scenario();
    let rcfg = RestorationConfig {
        iterations: 1,
        lambda: 0.0,
        eta_grid: Some(vec![0.0]),
        ..RestorationConfig::default()
    };
    let (params, report) = restore(&s.model, &s.ckpt, &s.parts, &rcfg, &Default::default(), RngState::new(1, 1)).unwrap();
    assert_eq!(params, s.ckpt.tuned);
    assert_eq!(report.records[0].status, IterationStatus::Applied);
}

#[test]
fn applied_updates_respect_the_retain_budget() {
    let s = scenario();
    let rcfg = RestorationConfig {
        eta_grid: Some(vec![0.05, 0.5, 2.0]),
        ..RestorationConfig::default()
    };
    let (_, report) = restore(&s.model, &s.ckpt, &s.parts, &rcfg, &Default::default(), RngState::new(2, 1)).unwrap();
    for r in &report.records {
        if r.status == IterationStatus::Applied {
            assert!(r.retain_after <= report.retain_baseline + report.epsilon, "{r:?}");
        }
        if r.status == IterationStatus::ConstraintBlocked {
            assert!(r.candidates.iter().all(|c| !c.admissible));
        }
    }
}

#[test]
fn small_steps_follow_the_first_order_expansion() {
    let s = scenario();
    let (model, theta) = (&s.model, &s.ckpt.tuned);
    let (history, _) = harvest(model, theta, &s.parts, &Default::default(), RngState::new(3, 0)).unwrap();
    let (dir, _) = influence_direction(&history, model, theta, &s.parts.batches(Part::ForgetEval)).unwrap();
    let retain = s.parts.retain_train().unwrap();
    let (l0, g) = model.loss_and_grad(theta, &retain).unwrap();
    let eta = 1e-3;
    let moved = apply_update(theta, &dir, eta, 0.0).unwrap();
    let measured = model.loss(&moved, &retain).unwrap() - l0;
    let predicted = eta * dot(&g, &dir).unwrap();
    assert!(
        (measured - predicted).abs() <= 0.2 * predicted.abs(),
        "measured {measured:e} vs predicted {predicted:e}"
    );
}

#[test]
fn single_step_trajectories_have_two_points() {
    let s = scenario();
    let cfg = TrajectoryConfig {
        step_budget: 1,
        lrs: vec![0.05],
        ..TrajectoryConfig::default()
    };
    let report = trajectory_compare(&s.model, &s.ckpt, &s.parts, &cfg, &Default::default(), RngState::new(4, 3)).unwrap();
    let run = &report.runs[0];
    for t in [&run.first_order, &run.curvature] {
        assert_eq!(t.objective.len(), 2);
        assert_eq!(t.coords.len(), 2);
        assert_eq!(t.accepted.len(), 1);
    }
    assert_eq!(run.first_order.objective[0], run.curvature.objective[0]);
}

#[test]
fn landscape_tables_parse_back_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let run_dir = tmp.path().join("run");
    cmd_scenario(&small_config(), &run_dir).unwrap();
    let out = cmd_landscape(&run_dir, &[CheckpointLabel::Tuned], &[LandscapeData::Forget], 2).unwrap();
    let grid = &out.grids[0].2;
    let (table, hash) = Table::read(&out.stage.file("grid-tuned-forget.tsv")).unwrap();
    assert_eq!(hash, out.stage.manifest.config_hash);
    assert_eq!(table.columns, ["i", "j", "lambda1", "lambda2", "loss"]);
    let losses = table.reals("loss").unwrap();
    assert_eq!(losses.len(), grid.spec.n * grid.spec.n);
    for (k, v) in losses.iter().enumerate() {
        assert_eq!(v.to_bits(), grid.losses.get(k / grid.spec.n, k % grid.spec.n).to_bits());
    }
    let (sec, _) = Table::read(&out.stage.file("section-tuned-forget-d1.tsv")).unwrap();
    assert_eq!(sec.rows.len(), grid.spec.n);
    assert!(out.struct_diffs.is_empty());
}

#[test]
fn per_dataset_probes_give_each_grid_its_own_directions() {
    let tmp = tempfile::tempdir().unwrap();
    let run_dir = tmp.path().join("run");
    let mut cfg = small_config();
    let both = [LandscapeData::Forget, LandscapeData::Retain];
    cmd_scenario(&cfg, &run_dir).unwrap();
    let mixed = cmd_landscape(&run_dir, &[CheckpointLabel::Tuned], &both, 1).unwrap();
    cfg.probe = ProbeKind::PerDataset;
    let other = tmp.path().join("other");
    cmd_scenario(&cfg, &other).unwrap();
    let split = cmd_landscape(&other, &[CheckpointLabel::Tuned], &both, 1).unwrap();
    let cos = |out: &curvrestore::pipeline::LandscapeOutput, d: &str| {
        let (t, _) = Table::read(&out.stage.file(&format!("grid-tuned-{d}.tsv"))).unwrap();
        t.meta["direction_cosine"].clone()
    };
    assert_eq!(cos(&mixed, "forget"), cos(&mixed, "retain"));
    assert_ne!(cos(&split, "forget"), cos(&split, "retain"));
    assert_eq!(mixed.grids.len(), 2);
}
