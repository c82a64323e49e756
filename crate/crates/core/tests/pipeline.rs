use sce_core::checkpoint::{load_checkpoint, save_checkpoint};
use sce_core::config::RunConfig;
use sce_core::engine::{load_trained, pretrain_run, RunOptions};
use sce_core::eval::linear_probe_train;
use sce_core::metrics::read_steps;

fn tiny(dir: &std::path::Path, kind: &str) -> RunConfig {
    let text = format!(
        r#"seed = 9
epochs = 3
batch_size = 16
queue_size = 32
output_dir = "{}"
objective.kind = "{kind}"
optim.warmup_epochs = 1
encoder.image_size = 8
encoder.widths = [4, 8]
projector.hidden = [16]
projector.output = 8
data.blobs.per_class = 20
data.blobs.image_size = 8
probe.epochs = 4
probe.milestones = [3]
"#,
        dir.display()
    );
    RunConfig::parse(&text).unwrap()
}

#[test]
fn every_objective_trains_checkpoints_and_probes() {
    for kind in ["sce", "infonce", "ressl", "combined"] {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path(), kind);
        let data = cfg.data.load().unwrap();
        let (state, summary) = pretrain_run(&cfg, &data, &RunOptions::default()).unwrap();
        assert_eq!(summary.steps, 15, "{kind}");
        assert!(summary.last_loss.is_finite());

        let steps = read_steps(&summary.metrics).unwrap();
        assert!(steps.windows(2).all(|w| w[0].step < w[1].step));
        assert!(steps.iter().all(|s| s.queue_fill <= cfg.queue_size));

        let (restored_cfg, restored) = load_trained(&summary.checkpoint).unwrap();
        assert_eq!(restored_cfg, cfg);
        assert_eq!(restored, state);

        let test = cfg.data.load_test().unwrap();
        let (_, probe) = linear_probe_train(&state.network, &state.online, &data, &test, &cfg.probe).unwrap();
        assert_eq!(probe.test_samples, 16);
        assert!((0.0..=1.0).contains(&probe.test_accuracy));
    }
}

#[test]
fn checkpoint_file_survives_a_copy_and_rejects_truncation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), "sce");
    let data = cfg.data.load().unwrap();
    let (_, summary) = pretrain_run(&cfg, &data, &RunOptions::default()).unwrap();
    let ckpt = load_checkpoint(&summary.checkpoint).unwrap();
    let copy = dir.path().join("copy.ckpt");
    save_checkpoint(&copy, &ckpt).unwrap();
    assert_eq!(std::fs::read(&copy).unwrap(), std::fs::read(&summary.checkpoint).unwrap());

    let bytes = std::fs::read(&copy).unwrap();
    std::fs::write(&copy, &bytes[..bytes.len() / 2]).unwrap();
    assert!(load_checkpoint(&copy).is_err());
}

#[test]
fn config_round_trips_through_its_flat_form() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), "ressl");
    let text = cfg.to_flat_string();
    assert_eq!(RunConfig::parse(&text).unwrap(), cfg);
    assert_eq!(RunConfig::parse(&text).unwrap().to_flat_string(), text);
    let bumped = cfg.with_overrides(&["objective.lambda = 0.25".into()]).unwrap();
    assert_eq!(bumped.objective.lambda, 0.25);
}
