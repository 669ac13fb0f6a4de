use voxelbench::config::{
    echo, expand_grid, parse_config, parse_config_str, ExperimentConfig, SweepAxis,
};
use voxelbench::data::Task;
use voxelbench::losses::LossKind;
use voxelbench::models::Arch;
use voxelbench::optim::OptimKind;

const MINIMAL: &str = r#"
task = "whole_tumor"
manifest = "data/manifest.json"

[model]
arch = "unet"
"#;

#[test]
fn minimal_config_resolves_paper_defaults() {
    let cfg = parse_config_str(MINIMAL).unwrap();
    assert_eq!(cfg.task, Task::WholeTumor);
    assert_eq!(cfg.model.arch, Arch::Unet);
    assert_eq!(cfg.model.width_scale, 1.0);
    let opt = cfg.optimizer.unwrap();
    assert_eq!(opt.kind, OptimKind::Adam);
    assert_eq!(opt.lr, 1e-3);
    assert_eq!(cfg.loss, LossKind::Combined { alpha: 0.5 });
    assert_eq!(cfg.sequences, vec!["t1w", "t1ce", "t2w", "flair"]);
    assert_eq!(cfg.split.folds, 5);
    assert_eq!(cfg.split.holdout_fraction, 0.2);
    assert_eq!(cfg.sampler.batch_size, 60);
    assert_eq!(cfg.sampler.volume_batch, 2);
    assert_eq!(cfg.sampler.fg_fraction, 0.5);
    assert_eq!(cfg.sampler.max_subjects, 10);
    assert_eq!(cfg.schedule.reduce_patience, 5);
    assert_eq!(cfg.schedule.stop_patience, 10);
    assert_eq!(cfg.schedule.factor, 5.0);
    assert_eq!(cfg.normalization.label(), "p95");
    assert!(cfg.transfer.is_none());
}

#[test]
fn deepmedic_defaults_to_nesterov() {
    let text = MINIMAL.replace("unet", "deepmedic");
    let cfg = parse_config_str(&text).unwrap();
    let opt = cfg.optimizer.unwrap();
    assert_eq!(opt.kind, OptimKind::SgdNesterov);
    assert_eq!(opt.lr, 1e-3);
}

#[test]
fn unknown_key_is_located() {
    let text = format!("{MINIMAL}\nlearning_rate = 0.1\n");
    let err = parse_config_str(&text).unwrap_err().to_string();
    assert!(err.contains("learning_rate"), "{err}");
    assert!(err.contains("line"), "{err}");
}

#[test]
fn unknown_nested_key_is_located() {
    let text = format!("{MINIMAL}\n[sampler]\npatch_size = 19\n");
    let err = parse_config_str(&text).unwrap_err().to_string();
    assert!(err.contains("patch_size"), "{err}");
}

// build a config with `top` spliced in at top level, before the tables
fn with_top(task: &str, top: &str) -> String {
    format!("task = \"{task}\"\nmanifest = \"data/manifest.json\"\n{top}\n[model]\narch = \"unet\"\n")
}

#[test]
fn out_of_range_omega_is_a_range_error() {
    let text = format!("{MINIMAL}\n[loss]\nkind = \"weighted_cross_entropy\"\nomega = 1.3\n");
    let err = parse_config_str(&text).unwrap_err().to_string();
    assert!(err.contains("omega") && err.contains("1.3"), "{err}");
}

#[test]
fn missing_required_key_is_named() {
    let err = parse_config_str("task = \"whole_tumor\"\n[model]\narch = \"unet\"\n")
        .unwrap_err()
        .to_string();
    assert!(err.contains("manifest"), "{err}");
    let err = parse_config_str("manifest = \"m.json\"\n[model]\narch = \"unet\"\n")
        .unwrap_err()
        .to_string();
    assert!(err.contains("task"), "{err}");
}

#[test]
fn bad_enum_tokens_are_rejected() {
    let err = parse_config_str(&MINIMAL.replace("unet", "vnet")).unwrap_err().to_string();
    assert!(err.contains("vnet") || err.contains("unknown variant"), "{err}");
    let err =
        parse_config_str(&MINIMAL.replace("whole_tumor", "everything")).unwrap_err().to_string();
    assert!(err.contains("everything") || err.contains("unknown variant"), "{err}");
}

#[test]
fn sequences_are_canonicalized_and_checked() {
    let cfg = parse_config_str(&with_top("whole_tumor", "sequences = [\"flair\", \"t1w\"]")).unwrap();
    assert_eq!(cfg.sequences, vec!["t1w", "flair"]);

    let dup = with_top("whole_tumor", "sequences = [\"t1w\", \"t1w\"]");
    assert!(parse_config_str(&dup).unwrap_err().to_string().contains("twice"));

    let bogus = with_top("whole_tumor", "sequences = [\"t1\"]");
    assert!(parse_config_str(&bogus).unwrap_err().to_string().contains("t1"));
}

#[test]
fn tumor_core_sequence_restriction() {
    let bad = with_top("tumor_core", "sequences = [\"flair\"]");
    let err = parse_config_str(&bad).unwrap_err().to_string();
    assert!(err.contains("tumor_core"), "{err}");

    let ok = with_top("tumor_core", "sequences = [\"t1w\", \"t1ce\"]");
    assert!(parse_config_str(&ok).is_ok());

    let relaxed =
        with_top("tumor_core", "allow_any_sequences = true\nsequences = [\"flair\"]");
    assert!(parse_config_str(&relaxed).is_ok());
}

#[test]
fn echo_round_trips() {
    let mut cfg = ExperimentConfig::new(Task::TumorCore, Arch::Deepmedic, "some/manifest.json");
    cfg.model.width_scale = 0.25;
    cfg.loss = LossKind::Focal { omega: 0.75, gamma: 1.5 };
    cfg.train.max_epochs = 3;
    cfg.validate().unwrap();
    let text = echo(&cfg);
    let back = parse_config_str(&text).unwrap();
    assert_eq!(back, cfg);
    // echo of the reparse is byte-identical
    assert_eq!(echo(&back), text);
}

#[test]
fn parse_config_reads_files_and_reports_io() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    std::fs::write(&path, MINIMAL).unwrap();
    let cfg = parse_config(&path).unwrap();
    assert_eq!(cfg.model.arch, Arch::Unet);

    let missing = parse_config(&dir.path().join("absent.toml")).unwrap_err();
    assert!(missing.to_string().contains("absent.toml"));

    std::fs::write(&path, format!("{MINIMAL}\n[loss]\nkind = \"combined\"\nalpha = 2.0\n"))
        .unwrap();
    let err = parse_config(&path).unwrap_err().to_string();
    assert!(err.contains("run.toml") && err.contains("alpha"), "{err}");
}

#[test]
fn schedule_and_split_ranges_are_validated() {
    for (snippet, needle) in [
        ("[schedule]\nfactor = 1.0\n", "factor"),
        ("[schedule]\nreduce_patience = 0\n", "patience"),
        ("[split]\nfolds = 1\n", "folds"),
        ("[split]\nholdout_fraction = 1.0\n", "holdout"),
        ("[sampler]\nfg_fraction = 1.5\n", "fg_fraction"),
        ("[model2]\n", "model2"),
        ("[augment]\nscale_min = 1.2\nscale_max = 0.9\n", "scale"),
        ("[train]\nbatches_per_epoch_cap = 0\n", "batches_per_epoch_cap"),
    ] {
        let text = format!("{MINIMAL}\n{snippet}");
        let err = parse_config_str(&text).unwrap_err().to_string();
        assert!(err.contains(needle), "{snippet}: {err}");
    }
}

#[test]
fn width_scale_must_be_positive() {
    let text = format!("{MINIMAL}\n").replace("arch = \"unet\"", "arch = \"unet\"\nwidth_scale = -0.5");
    let err = parse_config_str(&text).unwrap_err().to_string();
    assert!(err.contains("width_scale"), "{err}");
}

fn base() -> ExperimentConfig {
    ExperimentConfig::new(Task::WholeTumor, Arch::Unet, "m.json")
}

#[test]
fn lr_sweep_expands_exactly_three() {
    let runs = expand_grid(&base(), SweepAxis::Lr).unwrap();
    assert_eq!(runs.len(), 3);
    let lrs: Vec<f64> = runs.iter().map(|c| c.optimizer.unwrap().lr).collect();
    assert_eq!(lrs, vec![1e-4, 1e-3, 1e-2]);
    for r in &runs {
        assert_eq!(r.optimizer.unwrap().kind, OptimKind::Adam);
    }
}

#[test]
fn sequence_sweep_mirrors_table_rows() {
    let wt = expand_grid(&base(), SweepAxis::Sequences).unwrap();
    assert_eq!(wt.len(), 7);
    assert_eq!(wt[6].sequences, vec!["t1w", "t2w", "flair"]);

    let core = ExperimentConfig::new(Task::TumorCore, Arch::Unet, "m.json");
    let tc = expand_grid(&core, SweepAxis::Sequences).unwrap();
    assert_eq!(tc.len(), 3);
    assert_eq!(tc[2].sequences, vec!["t1w", "t1ce"]);
}

#[test]
fn loss_sweep_covers_all_grids() {
    let runs = expand_grid(&base(), SweepAxis::Loss).unwrap();
    // 4 wce + 16 focal + 1 soft dice + 9 combined
    assert_eq!(runs.len(), 30);
    let focal = runs
        .iter()
        .filter(|c| matches!(c.loss, LossKind::Focal { .. }))
        .count();
    assert_eq!(focal, 16);
}

#[test]
fn width_sweep_has_four_points() {
    let runs = expand_grid(&base(), SweepAxis::Width).unwrap();
    let widths: Vec<f64> = runs.iter().map(|c| c.model.width_scale).collect();
    assert_eq!(widths, vec![0.25, 0.5, 1.0, 1.5]);
}

#[test]
fn sweep_axis_parses_from_cli_tokens() {
    assert_eq!("lr".parse::<SweepAxis>().unwrap(), SweepAxis::Lr);
    assert_eq!("sequences".parse::<SweepAxis>().unwrap(), SweepAxis::Sequences);
    assert!("epochs".parse::<SweepAxis>().is_err());
}
