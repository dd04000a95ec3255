mod common;

use std::fs;
use std::process::Command;

use stocksignal::cli::{self, EvalDocument, LabelSummary, ModelKind, RunConfig, SignalDocument};
use stocksignal::labelling::SchemeKind;
use stocksignal::textprep::{write_messages_csv, RawMessage};

use common::{planted, write_inputs, PlantedSpec};

fn small(seed: u64) -> PlantedSpec {
    PlantedSpec { symbols: vec!["AAPL".into(), "AMZN".into()], trading_days: 40, per_day: 6, noise: 0.0, seed }
}

fn json<T: serde::de::DeserializeOwned>(path: std::path::PathBuf) -> T {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn empty_message_file_labels_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = write_inputs(dir.path(), &planted(&small(1)));
    fs::write(config.data.messages.as_ref().unwrap(), write_messages_csv(&[])).unwrap();
    config.data.ohlc.clear();
    let out = cli::cmd_label(&config).unwrap();
    assert!(out.lines[0].starts_with("0 of 0"));
    let s: LabelSummary = json(config.data_dir().join("label_summary.json"));
    assert_eq!((s.messages, s.labelled, s.excluded), (0, 0, 0));
    assert!(s.classes.iter().all(|c| c.count == 0));
    let csv = fs::read_to_string(config.data_dir().join("labelled.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1);
}

#[test]
fn out_of_span_messages_are_listed() {
    let dir = tempfile::tempdir().unwrap();
    let mut data = planted(&small(2));
    for (i, id) in ["late-1", "late-2"].iter().enumerate() {
        data.messages.push(RawMessage {
            symbol: "AAPL".into(),
            message: "$AAPL moon".into(),
            datetime: format!("2030-01-0{}T10:00:00Z", i + 1),
            user: "u".into(),
            message_id: id.to_string(),
        });
    }
    let config = write_inputs(dir.path(), &data);
    let err = cli::cmd_label(&config).unwrap_err();
    assert_eq!(err.exit_code(), 1);
    let msg = err.to_string();
    assert!(msg.contains("late-1") && msg.contains("late-2"), "{msg}");
}

#[test]
fn unknown_symbol_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = write_inputs(dir.path(), &planted(&small(3)));
    config.data.ohlc.remove("AMZN");
    let err = cli::cmd_label(&config).unwrap_err();
    assert_eq!(err.exit_code(), 1);
    assert!(err.to_string().contains("AMZN"));
}

#[test]
fn pipeline_trains_evaluates_and_signals() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = write_inputs(dir.path(), &planted(&small(4)));
    cli::cmd_label(&config).unwrap();
    cli::cmd_prep(&config).unwrap();
    cli::cmd_train(&config).unwrap();
    cli::cmd_eval(&config).unwrap();
    let doc: EvalDocument = json(config.run_dir().join("report.json"));
    assert!(doc.report.macro_avg.f1 >= 0.9, "{}", doc.report.macro_avg.f1);
    assert!(config.run_dir().join("config.toml").exists());
    let table = fs::read_to_string(config.run_dir().join("report.csv")).unwrap();
    let first: Vec<&str> = table.lines().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(first, ["label", "0", "1", "accuracy", "macro avg", "weighted avg"]);

    // a symbol in the config without messages is skipped, the others signal
    config.data.ohlc.insert("NFLX".into(), dir.path().join("AAPL.csv"));
    let out = cli::cmd_signal(&config).unwrap();
    let s: SignalDocument = json(config.run_dir().join("signal.json"));
    assert_eq!(s.skipped, ["NFLX"]);
    assert_eq!(s.signals.len(), 2);
    assert!(out.warnings.iter().any(|w| w.contains("NFLX")));
    for sig in &s.signals {
        assert_eq!((sig.end - sig.start).num_days(), 13);
        // perfectly separable planted data predicts every positive correctly
        assert_eq!(sig.signal.message, "Invest!");
        assert!(sig.in_training > 0);
    }

    config.signal.exclude_window_from_training = true;
    cli::cmd_train(&config).unwrap();
    cli::cmd_signal(&config).unwrap();
    let s: SignalDocument = json(config.run_dir().join("signal.json"));
    assert!(s.signals.iter().all(|sig| sig.in_training == 0));
}

#[test]
fn rerun_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = write_inputs(dir.path(), &planted(&small(5)));
    config.model.kind = ModelKind::Lr;
    let run = |c: &RunConfig| {
        cli::cmd_label(c).unwrap();
        cli::cmd_prep(c).unwrap();
        cli::cmd_train(c).unwrap();
        cli::cmd_eval(c).unwrap();
        ["model.json", "vocab.csv", "split.csv", "report.json", "predictions.csv"]
            .map(|f| fs::read(c.run_dir().join(f)).unwrap())
    };
    let a = run(&config);
    fs::remove_dir_all(&config.out_dir).unwrap();
    assert_eq!(a, run(&config));
}

#[test]
fn grid_writes_four_ranked_rows() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_inputs(dir.path(), &planted(&small(6)));
    cli::cmd_label(&config).unwrap();
    cli::cmd_prep(&config).unwrap();
    cli::cmd_grid(&config).unwrap();
    let grid = fs::read_to_string(config.grid_dir().join("grid.csv")).unwrap();
    let rows: Vec<&str> = grid.lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    for (i, r) in rows.iter().enumerate() {
        assert!(r.starts_with(&format!("{},", i + 1)));
    }
}

#[test]
fn report_aggregates_runs_and_balances() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = write_inputs(dir.path(), &planted(&small(7)));
    config.window = "1-year".into();
    cli::cmd_label(&config).unwrap();
    cli::cmd_prep(&config).unwrap();
    for kind in [ModelKind::Nb, ModelKind::Lr] {
        config.model.kind = kind;
        cli::cmd_train(&config).unwrap();
        cli::cmd_eval(&config).unwrap();
    }
    let mut pct3 = config.clone();
    pct3.labels.scheme = SchemeKind::PctThree;
    cli::cmd_label(&pct3).unwrap();
    cli::cmd_report(&config).unwrap();

    let table = fs::read_to_string(config.out_dir.join("report/comparison.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "scheme,alignment,window,vectorizer,model,macro_f1,accuracy,support");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].contains(",lr,") && lines[2].contains(",nb,"));

    let balance = fs::read_to_string(config.out_dir.join("report/class_balance_pct3-same-day.csv")).unwrap();
    let shares: Vec<f64> = balance.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(shares.len(), 3);
    assert!((shares.iter().sum::<f64>() - 1.0).abs() < 1e-5);
}

#[test]
fn report_without_runs_fails() {
    let dir = tempfile::tempdir().unwrap();
    let config = RunConfig { out_dir: dir.path().to_path_buf(), ..Default::default() };
    assert_eq!(cli::cmd_report(&config).unwrap_err().exit_code(), 1);
}

#[test]
fn binary_exit_codes_and_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_inputs(dir.path(), &planted(&small(8)));
    let config_path = dir.path().join("run.toml");
    fs::write(&config_path, config.to_toml()).unwrap();
    let bin = env!("CARGO_BIN_EXE_stocksignal");

    let status = |args: &[&str]| Command::new(bin).args(args).output().unwrap();
    let ok = status(&["label", "--config", config_path.to_str().unwrap(), "--scheme", "pct2", "--tz-offset", "-5"]);
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stderr));
    let snapshot = fs::read_to_string(config.out_dir.join("data/pct2-same-day/config.toml")).unwrap();
    let resolved = RunConfig::from_toml(&snapshot).unwrap();
    assert_eq!((resolved.labels.scheme, resolved.labels.tz_offset), (SchemeKind::PctTwo, -5));

    let missing = status(&["train", "--config", config_path.to_str().unwrap(), "--scheme", "pct3"]);
    assert_eq!(missing.status.code(), Some(1));
    let bad_config = dir.path().join("bad.toml");
    fs::write(&bad_config, "seed = \"many\"").unwrap();
    assert_eq!(status(&["label", "--config", bad_config.to_str().unwrap()]).status.code(), Some(1));

    // an unstable step without clamping diverges: a runtime failure
    let mut diverging = config.clone();
    diverging.model.kind = ModelKind::Lr;
    diverging.model.lr.step_size = 1e300;
    diverging.model.lr.clamp_step = false;
    diverging.model.lr.lambda = 0.0;
    diverging.features.vectorizer = stocksignal::features::Weighting::Count;
    let diverging_path = dir.path().join("diverge.toml");
    fs::write(&diverging_path, diverging.to_toml()).unwrap();
    for cmd in ["label", "prep", "train"] {
        let out = status(&[cmd, "--config", diverging_path.to_str().unwrap()]);
        if cmd == "train" {
            assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
        } else {
            assert!(out.status.success());
        }
    }
}

#[test]
fn example_config_parses() {
    let c = RunConfig::from_toml(include_str!("../../../config.example.toml")).unwrap();
    assert_eq!(c.data.ohlc.len(), 2);
    assert_eq!(c.grid_spec().cells().len(), 4);
    c.validate().unwrap();
}
