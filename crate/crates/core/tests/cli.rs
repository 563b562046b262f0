use std::fs;
use std::path::Path;

use hea_core::chem::{ElementTable, PairEnthalpyTable};
use hea_core::cli::run;
use hea_core::dataset::{ingest_corpus, ingest_dataset};
use hea_core::interpret::read_attention;

const TINY: [&str; 16] = [
    "--set",
    "encoder.n_layers=1",
    "--set",
    "encoder.n_heads=2",
    "--set",
    "encoder.d_model=8",
    "--set",
    "encoder.d_ff=8",
    "--set",
    "encoder.max_len=12",
    "--set",
    "train.epochs=1",
    "--set",
    "train.batch_size=4",
    "--set",
    "generator.corpus_size=20",
];

fn hea(args: &[&str]) -> anyhow::Result<std::path::PathBuf> {
    let mut all = vec!["hea"];
    all.extend_from_slice(args);
    run(all)
}

fn write(path: &Path, text: &str) {
    fs::write(path, text).unwrap();
}

#[test]
fn bad_composition_reports_its_line() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.csv");
    write(
        &data,
        "composition,target\nFe1 Ni1,1\nCo1 Ni1,2\nCr1 Fe1,3\nAl1 Ni1,4\nCu1 Fe1,5\nFe1 Xq2,6\nNi1 Ti1,7\n",
    );
    let t = ElementTable::bundled();
    let p = PairEnthalpyTable::bundled();
    let err = ingest_dataset(&data, "target", &t, &p)
        .unwrap_err()
        .to_string();
    assert!(err.contains("line 7"), "{err}");

    let run_dir = dir.path().join("run");
    let err = hea(&[
        "stats",
        "--input",
        data.to_str().unwrap(),
        "--run-dir",
        run_dir.to_str().unwrap(),
    ])
    .unwrap_err();
    assert!(format!("{err:#}").contains("line 7"));
}

#[test]
fn composition_and_target_only_gets_features() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.csv");
    write(
        &data,
        "composition,target\nCo1 Cr1 Fe1 Mn1 Ni1,1.5\nFe1 Ni1,2\n",
    );
    let rows = ingest_dataset(
        &data,
        "target",
        &ElementTable::bundled(),
        &PairEnthalpyTable::bundled(),
    )
    .unwrap();
    assert!((rows[0].features[5] - 13.3814).abs() < 1e-3);
    assert_eq!(rows[1].target, 2.0);
}

#[test]
fn featurize_output_reingests_losslessly() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("comps.csv");
    write(
        &input,
        "composition\nCo1 Cr1 Fe1 Mn1 Ni1\nAl0.3 Co1 Fe1 Ni1\nNb1 Ti1.7 V0.25\n",
    );
    let out = dir.path().join("features.csv");
    let run_dir = dir.path().join("run");
    hea(&[
        "featurize",
        "--input",
        input.to_str().unwrap(),
        "--output",
        out.to_str().unwrap(),
        "--run-dir",
        run_dir.to_str().unwrap(),
    ])
    .unwrap();
    let header = fs::read_to_string(&out)
        .unwrap()
        .lines()
        .next()
        .unwrap()
        .to_string();
    assert_eq!(header.split(',').count(), 15);

    let t = ElementTable::bundled();
    let p = PairEnthalpyTable::bundled();
    let first = ingest_corpus(&out, &t, &p).unwrap();
    let again = dir.path().join("again.csv");
    hea(&[
        "featurize",
        "--input",
        out.to_str().unwrap(),
        "--output",
        again.to_str().unwrap(),
        "--run-dir",
        run_dir.to_str().unwrap(),
    ])
    .unwrap();
    assert_eq!(fs::read(&out).unwrap(), fs::read(&again).unwrap());
    assert_eq!(first, ingest_corpus(&again, &t, &p).unwrap());
}

#[test]
fn run_directory_is_self_describing() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("gen");
    let mut args = vec![
        "gen-corpus",
        "--run-dir",
        run_dir.to_str().unwrap(),
        "--seed",
        "5",
    ];
    args.extend_from_slice(&TINY);
    hea(&args).unwrap();
    let config = fs::read_to_string(run_dir.join("config.toml")).unwrap();
    assert!(config.contains("seed = 5"));
    assert!(config.contains("corpus_size = 20"));
    assert_eq!(fs::read_to_string(run_dir.join("seed.txt")).unwrap(), "5\n");
    let versions = fs::read_to_string(run_dir.join("versions.txt")).unwrap();
    assert!(versions.contains("elements ") && versions.contains("pairs "));
    let corpus = fs::read_to_string(run_dir.join("corpus.csv")).unwrap();
    assert_eq!(corpus.lines().count(), 21);
}

#[test]
fn config_file_with_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    write(&cfg, "seed = 3\n[generator]\ncorpus_size = 12\n");
    let run_dir = dir.path().join("gen");
    hea(&[
        "gen-corpus",
        "--config",
        cfg.to_str().unwrap(),
        "--set",
        "generator.corpus_size=9",
        "--run-dir",
        run_dir.to_str().unwrap(),
    ])
    .unwrap();
    let corpus = fs::read_to_string(run_dir.join("corpus.csv")).unwrap();
    assert_eq!(corpus.lines().count(), 10);
    assert_eq!(fs::read_to_string(run_dir.join("seed.txt")).unwrap(), "3\n");
}

#[test]
fn train_evaluate_and_attention_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = |n: &str| dir.path().join(n).display().to_string();
    let mut common: Vec<&str> = TINY.to_vec();
    common.extend_from_slice(&["--set", "target=mixing_entropy"]);
    let with = |mut a: Vec<String>| {
        a.extend(common.iter().map(|s| s.to_string()));
        a
    };
    let corpus = format!("{}/corpus.csv", d("gen"));
    let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
    let call = |a: Vec<String>| {
        let mut all = vec!["hea".to_string()];
        all.extend(a);
        run(all).unwrap()
    };
    call(with(s(&["gen-corpus", "--run-dir", &d("gen")])));
    call(with(s(&[
        "pretrain",
        "--corpus",
        &corpus,
        "--run-dir",
        &d("pre"),
    ])));
    let log = fs::read_to_string(dir.path().join("pre/pretrain_log.csv")).unwrap();
    assert!(log.starts_with("0,validation,"));

    let model = format!("{}/model.bin", d("pre"));
    call(with(s(&[
        "finetune",
        "--input",
        &corpus,
        "--model",
        &model,
        "--folds",
        "2",
        "--layers",
        "1",
        "--run-dir",
        &d("ft"),
    ])));
    let ft = dir.path().join("ft");
    let report = fs::read_to_string(ft.join("report.toml")).unwrap();
    assert!(report.contains("[[folds]]"));
    let residuals = fs::read_to_string(ft.join("residuals.csv")).unwrap();
    assert_eq!(
        residuals.lines().next().unwrap(),
        "row_index,fold,actual,predicted,residual"
    );
    assert_eq!(residuals.lines().count(), 21);
    let fold_log = fs::read_to_string(ft.join("finetune_log_fold0.csv")).unwrap();
    let val_line = fold_log
        .lines()
        .find(|l| l.starts_with("1,validation,"))
        .unwrap();
    assert_eq!(val_line.split(',').count(), 6);

    let ft_model = format!("{}/model.bin", d("ft"));
    call(with(s(&[
        "evaluate",
        "--model",
        &ft_model,
        "--input",
        &corpus,
        "--run-dir",
        &d("ev"),
    ])));
    assert!(dir.path().join("ev/report.toml").exists());

    call(with(s(&[
        "attention",
        "--model",
        &ft_model,
        "--composition",
        "Ni1 Co1 Fe1",
        "--run-dir",
        &d("att"),
    ])));
    let heat = fs::read(dir.path().join("att/attention.csv")).unwrap();
    let text = String::from_utf8(heat.clone()).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], ",Co,Fe,Ni");
    assert!(lines[1].starts_with("Co,,"));
    let m = read_attention(heat.as_slice()).unwrap();
    assert_eq!(m.get(0, 1), m.get(1, 0));

    call(with(s(&[
        "attention",
        "--model",
        &ft_model,
        "--composition",
        "Ni1 Co1 Fe1",
        "--run-dir",
        &d("att2"),
    ])));
    assert_eq!(
        heat,
        fs::read(dir.path().join("att2/attention.csv")).unwrap()
    );

    for algo in ["gp", "rf", "dt", "gbr", "knn"] {
        call(with(s(&[
            "baseline",
            "--algo",
            algo,
            "--input",
            &corpus,
            "--folds",
            "2",
            "--run-dir",
            &d(algo),
        ])));
        let summary = fs::read_to_string(dir.path().join(algo).join("model_summary.txt")).unwrap();
        assert!(!summary.is_empty());
    }
    call(with(s(&[
        "stats",
        "--input",
        &corpus,
        "--run-dir",
        &d("stats"),
    ])));
    for f in [
        "element_totals.csv",
        "element_counts.csv",
        "target_histogram.csv",
        "correlations.csv",
    ] {
        assert!(dir.path().join("stats").join(f).exists(), "{f}");
    }
    call(with(s(&[
        "outliers",
        "--input",
        &corpus,
        "--run-dir",
        &d("out"),
    ])));
    let out = fs::read_to_string(dir.path().join("out/outliers.csv")).unwrap();
    assert!(out.starts_with("row_index,line,composition,mixing_entropy,z"));
}

#[test]
fn wrong_vocabulary_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let d = |n: &str| dir.path().join(n).display().to_string();
    let mut args = vec!["pretrain".to_string(), "--run-dir".into(), d("pre")];
    args.extend(TINY.iter().map(|s| s.to_string()));
    let mut all = vec!["hea".to_string()];
    all.extend(args);
    run(all).unwrap();
    let vocab = dir.path().join("other_vocab.txt");
    write(&vocab, "[PAD]\n[UNK]\n[CLS]\n[MASK]\nFe1\n");
    let err = hea(&[
        "attention",
        "--model",
        &format!("{}/model.bin", d("pre")),
        "--vocab",
        vocab.to_str().unwrap(),
        "--composition",
        "Fe1 Ni1",
        "--run-dir",
        &d("att"),
    ])
    .unwrap_err();
    assert!(format!("{err:#}").contains("vocabulary"));
}

#[test]
fn subcommand_flags_are_recorded_in_config() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("gen");
    hea(&[
        "gen-corpus",
        "--size",
        "4",
        "--run-dir",
        run_dir.to_str().unwrap(),
    ])
    .unwrap();
    let config = fs::read_to_string(run_dir.join("config.toml")).unwrap();
    assert!(config.contains("corpus_size = 4"), "{config}");
    assert_eq!(
        fs::read_to_string(run_dir.join("corpus.csv"))
            .unwrap()
            .lines()
            .count(),
        5
    );
}
