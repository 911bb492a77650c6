//! Command-level integration tests: artifact layout, schemas, refusal
//! behavior, and exit codes of the installed binary.

use std::path::Path;
use std::process::Command;

use factorlab::cli::{
    cmd_backtest, cmd_gen_data, cmd_interpret, cmd_train, Checkpoint, CliError, RunConfig,
};

fn smoke_config() -> RunConfig {
    RunConfig::from_toml(
        r#"
seed = 5
[data]
n_stocks = 10
n_factors = 3
n_days = 60
n_sectors = 2
[model]
context_dim = 4
encoder_hidden = 6
selection_hidden = 4
horizons = [3, 5]
[training]
max_epochs = 2
n_folds = 4
folds = [3]
[evaluation]
horizon = 5
n_deciles = 3
baselines = ["linear", "ew", "mlp", "s_best", "s_avg", "s_t20"]
"#,
    )
    .unwrap()
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("reading {path:?}: {e}"))
}

#[test]
fn gen_data_writes_csvs_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    let cfg = smoke_config();
    let summary = cmd_gen_data(&cfg, &out, false).unwrap();
    assert!(summary.contains("10 stocks"));
    for file in [
        "factors.csv",
        "prices.csv",
        "sectors.csv",
        "factor_groups.csv",
        "manifest.json",
        "resolved_config.toml",
    ] {
        assert!(out.join(file).exists(), "missing {file}");
    }
    let factors = read(&out.join("factors.csv"));
    assert!(factors.starts_with("date,stock_id,F00,F01,F02\n"));
    let prices = read(&out.join("prices.csv"));
    assert!(prices.starts_with("date,stock_id,vwap\n"));
    // 60 dates x 10 stocks + header.
    assert_eq!(prices.lines().count(), 601);

    // Refusal without --force on a non-empty directory.
    let err = cmd_gen_data(&cfg, &out, false).unwrap_err();
    assert!(matches!(err, CliError::Validation(_)));
    assert_eq!(err.exit_code(), 1);
    // --force overwrites.
    cmd_gen_data(&cfg, &out, true).unwrap();
}

#[test]
fn gen_data_roundtrips_through_load_panel() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    let cfg = smoke_config();
    cmd_gen_data(&cfg, &out, false).unwrap();

    let panel = factorlab::marketdata::load_panel(&factorlab::marketdata::PanelPaths {
        factors: out.join("factors.csv"),
        prices: out.join("prices.csv"),
        sectors: out.join("sectors.csv"),
        groups: Some(out.join("factor_groups.csv")),
    })
    .unwrap();
    let (direct, _) = factorlab::cli::derive_market(&cfg).unwrap();
    assert_eq!(panel.n_dates(), direct.n_dates());
    assert_eq!(panel.factor_names, direct.factor_names);
    for t in 0..panel.n_dates() {
        assert_eq!(panel.day(t).factors, direct.day(t).factors);
        assert_eq!(panel.day(t).prices, direct.day(t).prices);
    }
}

#[test]
fn train_backtest_interpret_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config();

    let train_out = dir.path().join("train");
    let summary = cmd_train(&cfg, &train_out, false, 1).unwrap();
    assert!(summary.contains("fold 3"));
    let fold_dir = train_out.join("fold_3");
    let log = read(&fold_dir.join("training_log.csv"));
    assert!(log.starts_with("epoch,l_ret,l_up,l_s,l_f,l_e,total,val_l_ret\n"));
    // One row per epoch.
    assert_eq!(log.lines().count(), 1 + 2);
    let buffers = read(&fold_dir.join("buffers.csv"));
    assert!(buffers.starts_with("factor,direction,accumulator\n"));
    // 3 factors + 2 horizons.
    assert_eq!(buffers.lines().count(), 1 + 3 + 2);
    for line in buffers.lines().skip(1) {
        let dir_field = line.split(',').nth(1).unwrap();
        assert!(dir_field == "1" || dir_field == "-1");
    }

    let checkpoint_path = fold_dir.join("checkpoint.json");
    let checkpoint = Checkpoint::load(&checkpoint_path).unwrap();
    assert_eq!(checkpoint.horizons, vec![3, 5]);
    assert_eq!(checkpoint.fold_index, 3);
    assert_eq!(checkpoint.config_hash, cfg.config_hash());

    let bt_out = dir.path().join("bt");
    let comparison = cmd_backtest(&cfg, &checkpoint_path, &bt_out, false).unwrap();
    assert!(comparison.starts_with("strategy,alpha,ir,md,tt,n_avg\n"));
    let lines: Vec<&str> = comparison.lines().collect();
    // Three end-to-end strategies plus six baselines.
    assert_eq!(lines.len(), 1 + 3 + 6);
    assert!(lines[1].starts_with("e2e_auto,"));
    // EW is flat against its own benchmark.
    let ew_row = lines.iter().find(|l| l.starts_with("ew,")).unwrap();
    let alpha: f64 = ew_row.split(',').nth(1).unwrap().parse().unwrap();
    assert_eq!(alpha, 0.0);
    for strategy in ["e2e_auto", "e2e_deep", "e2e_linear", "linear", "ew"] {
        for suffix in ["metrics", "active", "weights"] {
            assert!(
                bt_out.join(format!("{strategy}_{suffix}.csv")).exists(),
                "missing {strategy}_{suffix}.csv"
            );
        }
    }
    let weights = read(&bt_out.join("e2e_auto_weights.csv"));
    assert!(weights.starts_with("date,stock_id,weight\n"));
    let active = read(&bt_out.join("e2e_auto_active.csv"));
    assert!(active.starts_with("date,active_return\n"));

    // Hash mismatch refusal.
    let mut drifted = cfg.clone();
    drifted.training.max_epochs = 9;
    let err = cmd_backtest(&drifted, &checkpoint_path, &dir.path().join("bt2"), false).unwrap_err();
    assert!(matches!(err, CliError::Validation(_)));
    assert!(err.to_string().contains("hash"));

    // Changing only evaluation settings is allowed.
    let mut eval_changed = cfg.clone();
    eval_changed.evaluation.n_deciles = 5;
    eval_changed.evaluation.baselines = vec!["ew".into()];
    cmd_backtest(
        &eval_changed,
        &checkpoint_path,
        &dir.path().join("bt3"),
        false,
    )
    .unwrap();

    let interp_out = dir.path().join("interp");
    cmd_interpret(&cfg, &checkpoint_path, &interp_out, false).unwrap();
    for k in [3, 5] {
        let mono = read(&interp_out.join(format!("monotonicity_k{k}.csv")));
        assert!(mono.starts_with("decile,deep_mean_return,estimate_mean_return\n"));
        // Decile rows plus the spearman footer.
        assert_eq!(mono.lines().count(), 1 + 3 + 1);
        assert!(mono.lines().last().unwrap().starts_with("spearman,"));
        let heatmap = read(&interp_out.join(format!("heatmap_k{k}.csv")));
        // Three factors fall in three groups round-robin.
        assert_eq!(heatmap.lines().next().unwrap(), "bucket,Growth,Momentum,Value");
    }

    // Heatmap directions must match the buffer dump signs: a single-group
    // check that the signed export columns are consistent with buffers.csv.
    let heatmap = read(&interp_out.join("heatmap_k5.csv"));
    let buffer_dirs: std::collections::BTreeMap<String, f64> = buffers
        .lines()
        .skip(1)
        .take(3)
        .map(|l| {
            let mut parts = l.split(',');
            let name = parts.next().unwrap().to_string();
            let d: f64 = parts.next().unwrap().parse().unwrap();
            (name, d)
        })
        .collect();
    // Groups here hold exactly one factor each (F00->Value, F01->Growth,
    // F02->Momentum), so each column's sign matches its factor direction.
    let header: Vec<&str> = heatmap.lines().next().unwrap().split(',').collect();
    let group_of = [("F00", "Value"), ("F01", "Growth"), ("F02", "Momentum")];
    for row in heatmap.lines().skip(1) {
        let cells: Vec<&str> = row.split(',').collect();
        for (factor, group) in group_of {
            let col = header.iter().position(|h| *h == group).unwrap();
            let value: f64 = cells[col].parse().unwrap();
            if value != 0.0 {
                assert_eq!(
                    value.signum(),
                    buffer_dirs[factor],
                    "heatmap sign for {factor} disagrees with the buffer dump"
                );
            }
        }
    }
}

#[test]
fn train_with_parallel_jobs_matches_serial() {
    let mut cfg = smoke_config();
    cfg.training.folds = vec![2, 3];
    let dir = tempfile::tempdir().unwrap();
    let serial = dir.path().join("serial");
    let parallel = dir.path().join("parallel");
    cmd_train(&cfg, &serial, false, 1).unwrap();
    cmd_train(&cfg, &parallel, false, 4).unwrap();
    for fold in [2, 3] {
        for file in ["training_log.csv", "buffers.csv", "checkpoint.json"] {
            let a = std::fs::read(serial.join(format!("fold_{fold}/{file}"))).unwrap();
            let b = std::fs::read(parallel.join(format!("fold_{fold}/{file}"))).unwrap();
            assert_eq!(a, b, "fold {fold} {file} differs under --jobs");
        }
    }
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_factorlab");
    let dir = tempfile::tempdir().unwrap();

    // Validation error: bad config -> exit 1.
    let bad_cfg = dir.path().join("bad.toml");
    std::fs::write(&bad_cfg, "[data]\nn_stocks = 4\nn_sectors = 7\n").unwrap();
    let out = Command::new(bin)
        .args(["gen-data", "--config"])
        .arg(&bad_cfg)
        .arg("--out")
        .arg(dir.path().join("x"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));

    // Success: exit 0 and a dataset summary on stdout.
    let good_cfg = dir.path().join("good.toml");
    std::fs::write(
        &good_cfg,
        "[data]\nn_stocks = 6\nn_factors = 2\nn_days = 12\nn_sectors = 2\n",
    )
    .unwrap();
    let out_dir = dir.path().join("data");
    let out = Command::new(bin)
        .args(["gen-data", "--config"])
        .arg(&good_cfg)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{out:?}");
    assert!(String::from_utf8_lossy(&out.stdout).contains("6 stocks"));

    // Seed flag override changes the data hash.
    let out2_dir = dir.path().join("data2");
    Command::new(bin)
        .args(["gen-data", "--seed", "777", "--config"])
        .arg(&good_cfg)
        .arg("--out")
        .arg(&out2_dir)
        .output()
        .unwrap();
    let a = std::fs::read(out_dir.join("prices.csv")).unwrap();
    let b = std::fs::read(out2_dir.join("prices.csv")).unwrap();
    assert_ne!(a, b);

    // Runtime-class failure: unreadable checkpoint -> validation exit 1.
    let out = Command::new(bin)
        .args(["backtest", "--checkpoint"])
        .arg(dir.path().join("missing.json"))
        .arg("--config")
        .arg(&good_cfg)
        .arg("--out")
        .arg(dir.path().join("bt"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn gen_data_same_seed_same_hashes() {
    let cfg = smoke_config();
    let dir = tempfile::tempdir().unwrap();
    let a_dir = dir.path().join("a");
    let b_dir = dir.path().join("b");
    cmd_gen_data(&cfg, &a_dir, false).unwrap();
    cmd_gen_data(&cfg, &b_dir, false).unwrap();
    for file in [
        "factors.csv",
        "prices.csv",
        "sectors.csv",
        "factor_groups.csv",
        "manifest.json",
    ] {
        let a = std::fs::read(a_dir.join(file)).unwrap();
        let b = std::fs::read(b_dir.join(file)).unwrap();
        assert_eq!(a, b, "{file} differs across identical seeds");
    }
}
