use std::fs;
use std::path::{Path, PathBuf};

use proptest::prelude::*;
use srcloc_core::data::{Condition, SpeechSource};
use srcloc_core::experiment::Strategy as Mask;
use srcloc_core::experiment::{
    cmd_attribute, cmd_dataset, cmd_manipulate, cmd_stft_export, cmd_tdoa, cmd_train,
    condition_groups, mae, manipulate_window, mask_count, Arch, ErrorClass, ExperimentError,
    MaeMetric, ManipulationResult, RunConfig, Scale,
};

fn tiny(out: &Path) -> RunConfig {
    let text = format!(
        r#"
seed = 7
out_dir = "{}"
models = ["loccnn"]

[dataset]
window_len = 1024
conditions = [{{ snr_db = 25.0, t60 = 0.15 }}, {{ snr_db = 10.0, t60 = 0.3 }}]

[dataset.grid]
nx = 3
ny = 3
test_nx = 2
test_ny = 2

[dataset.speech]
kind = "surrogate"
duration_s = 0.4

[loccnn]
input_len = 1024
channels = [4, 4, 4]
kernel_sizes = [5, 5, 5]
pool_sizes = [4, 4, 4]
dense_width = 8

[samplecnn]
input_len = 1024

[train]
max_epochs = 2

[manipulate]
fractions = [0.0, 0.2, 0.4]
"#,
        out.display()
    );
    RunConfig::from_toml(&text, Scale::Desk).unwrap()
}

fn run_all(cfg: &RunConfig) {
    cmd_dataset(cfg).unwrap();
    cmd_train(cfg).unwrap();
    cmd_attribute(cfg).unwrap();
    cmd_manipulate(cfg).unwrap();
    cmd_tdoa(cfg).unwrap();
    cmd_stft_export(cfg).unwrap();
}

/// Every output file below `dir` except the frozen configs, which record
/// the output directory itself.
fn outputs(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                if p.file_name().unwrap() != "frozen" {
                    stack.push(p);
                }
            } else {
                out.push(p.strip_prefix(dir).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

#[test]
fn rerun_from_frozen_configs_is_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = tiny(a.path());
    run_all(&cfg);

    let store = fs::read(cfg.dataset_dir().join("examples.bin")).unwrap();
    let stored = |cmd: &str| {
        let mut c = RunConfig::load(
            &a.path().join("frozen").join(format!("{cmd}.toml")),
            Scale::Full,
        )
        .unwrap();
        c.out_dir = b.path().to_path_buf();
        c
    };
    cmd_dataset(&stored("dataset")).unwrap();
    cmd_train(&stored("train")).unwrap();
    cmd_attribute(&stored("attribute")).unwrap();
    cmd_manipulate(&stored("manipulate")).unwrap();
    cmd_tdoa(&stored("tdoa")).unwrap();
    cmd_stft_export(&stored("stft-export")).unwrap();

    let files = outputs(a.path());
    assert_eq!(files, outputs(b.path()));
    assert!(files.iter().any(|f| f.ends_with("tdoa/table.csv")));
    for f in &files {
        assert!(
            fs::read(a.path().join(f)).unwrap() == fs::read(b.path().join(f)).unwrap(),
            "{} differs",
            f.display()
        );
    }
    // Manipulation works on copies.
    assert_eq!(
        fs::read(cfg.dataset_dir().join("examples.bin")).unwrap(),
        store
    );

    let result: ManipulationResult =
        serde_json::from_slice(&fs::read(a.path().join("manipulation/loccnn.json")).unwrap())
            .unwrap();
    let at_zero: Vec<f64> = result.curves.iter().map(|c| c.mae[0]).collect();
    assert_eq!(result.curves.len(), 3);
    assert!(at_zero.iter().all(|v| *v == at_zero[0]), "{at_zero:?}");
    assert!(result.curves.iter().flat_map(|c| &c.mae).all(|v| *v >= 0.0));
    for c in &result.curves {
        let mean = (c.per_condition[0][1] + c.per_condition[1][1]) / 2.0;
        assert!((c.mae[1] - mean).abs() < 1e-12);
    }

    let table = fs::read_to_string(a.path().join("tdoa/table.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(
        lines[0],
        "snr_db,t60_s,d0.15_Signal,d0.15_LocCNN,d0.15_SampleCNN,d0.45_Signal,d0.45_LocCNN,d0.45_SampleCNN,d0.75_Signal,d0.75_LocCNN,d0.75_SampleCNN"
    );
    assert!(lines[1].starts_with("25,0.15,") && lines[2].starts_with("10,0.3,"));

    let audit: serde_json::Value = serde_json::from_slice(
        &fs::read(a.path().join("relevance/loccnn_snr25db_t0.15s.audit.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(audit["failed"], 0);
    assert_eq!(audit["windows"], 4 * 6);
}

#[test]
fn commands_report_missing_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let err = cmd_train(&cfg).unwrap_err();
    assert!(matches!(err, ExperimentError::Missing(_)), "{err}");
    assert_eq!(err.class(), ErrorClass::Data);
    cmd_dataset(&cfg).unwrap();
    assert!(matches!(
        cmd_attribute(&cfg).unwrap_err(),
        ExperimentError::Missing(_)
    ));
    assert!(matches!(
        cmd_tdoa(&cfg).unwrap_err(),
        ExperimentError::Missing(_)
    ));

    let mut other = cfg.clone();
    other.dataset.window_len = 2048;
    other.loccnn.input_len = 2048;
    other.samplecnn.input_len = 2048;
    assert!(matches!(
        cmd_train(&other).unwrap_err(),
        ExperimentError::Config(_)
    ));
    assert!(dir.path().join("frozen/train.toml").exists());
}

#[test]
fn presets_and_overrides() {
    let full = RunConfig::preset(Scale::Full);
    assert_eq!(full.dataset.conditions.len(), 16);
    for snr in [10.0, 15.0, 20.0, 25.0] {
        for t60 in [0.15, 0.3, 0.4, 0.6] {
            assert!(full
                .dataset
                .conditions
                .contains(&Condition { snr_db: snr, t60 }));
        }
    }
    assert_eq!(full.models, vec![Arch::LocCnn, Arch::SampleCnn]);

    let desk = RunConfig::preset(Scale::Desk);
    assert_eq!(desk.dataset.conditions.len(), 2);

    let cfg = RunConfig::from_toml(
        "seed = 9\n[train]\nbatch_size = 4\n[lrp]\ngamma = 0.5\n",
        Scale::Desk,
    )
    .unwrap();
    assert_eq!(cfg.seed, 9);
    assert_eq!(cfg.dataset.seed, 9);
    assert_eq!(cfg.train.batch_size, 4);
    assert_eq!(cfg.train.max_epochs, desk.train.max_epochs);
    assert_eq!(cfg.lrp.gamma, 0.5);
    assert_eq!(cfg.lrp.epsilon, desk.lrp.epsilon);

    let cfg = RunConfig::from_toml("scale = \"full\"\n", Scale::Desk).unwrap();
    assert_eq!(cfg, full);
    let round = RunConfig::from_toml(&cfg.to_toml(), Scale::Desk).unwrap();
    assert_eq!(round, cfg);

    let cfg = RunConfig::from_toml(
        "[dataset.speech]\nkind = \"corpus\"\ndir = \"wavs\"\n",
        Scale::Desk,
    )
    .unwrap();
    assert_eq!(
        cfg.dataset.speech,
        SpeechSource::Corpus { dir: "wavs".into() }
    );

    for bad in [
        "models = []",
        "[manipulate]\nfractions = [0.0, 1.0]",
        "[manipulate]\nfractions = [-0.1]",
        "[lrp]\ngamma = -1.0",
        "[dataset]\nwindow_len = 4096",
        "unknown_key = 1",
        "scale = \"huge\"",
        "[stft]\nmic = 16",
    ] {
        let err = RunConfig::from_toml(bad, Scale::Desk).unwrap_err();
        assert_eq!(err.class(), ErrorClass::Config, "{bad}: {err}");
    }
}

#[test]
fn shipped_configs_match_their_presets() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for (file, scale) in [("desk.toml", Scale::Desk), ("full.toml", Scale::Full)] {
        let cfg = RunConfig::load(&root.join(file), Scale::Desk).unwrap();
        assert_eq!(cfg, RunConfig::preset(scale), "{file}");
    }
}

#[test]
fn condition_groups_per_condition_or_pooled() {
    let mut cfg = RunConfig::preset(Scale::Desk);
    let groups = condition_groups(&cfg);
    assert_eq!(groups.len(), 2);
    assert_eq!(groups[1].conditions, vec![1]);
    assert_eq!(groups[1].label, "snr10db_t0.6s");
    cfg.pooled = true;
    let groups = condition_groups(&cfg);
    assert_eq!(groups.len(), 1);
    assert_eq!(groups[0].conditions, vec![0, 1]);
}

#[test]
fn mae_metrics() {
    let p = [[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]];
    let t = [[3.0, 4.0, 0.0], [1.0, 1.0, 1.0]];
    assert_eq!(mae(&p, &t, MaeMetric::Euclidean), 2.5);
    assert!((mae(&p, &t, MaeMetric::L1) - 7.0 / 6.0).abs() < 1e-15);
}

#[test]
fn mask_count_hits_decimal_fractions() {
    assert_eq!(mask_count(0.0, 81920), 0);
    assert_eq!(mask_count(0.3, 10), 3);
    assert_eq!(mask_count(0.7, 81920), 57344);
    assert_eq!(mask_count(0.1, 5), 1);
    assert_eq!(mask_count(0.15, 10), 2);
}

#[test]
fn ties_go_to_the_lower_index() {
    let x = [1.0, -2.0, 2.0, 0.5, -2.0, 0.0];
    let out = manipulate_window(&x, 2, Mask::Amplitude, 0.5, None, 0, false);
    assert_eq!(out, vec![1.0, 0.0, 0.0, 0.5, 0.0, 0.0]);
    let r = [0.0, 3.0, 3.0, 3.0, -1.0, 5.0];
    let out = manipulate_window(&x, 2, Mask::Lrp, 0.5, Some(&r), 0, false);
    assert_eq!(out, vec![1.0, 0.0, 0.0, 0.5, -2.0, 0.0]);
    // Per channel: column 0 is (1, 2, -2), column 1 is (-2, 0.5, 0).
    let out = manipulate_window(&x, 2, Mask::Amplitude, 0.3, None, 0, true);
    assert_eq!(out, vec![1.0, 0.0, 0.0, 0.5, -2.0, 0.0]);
}

fn window() -> impl Strategy<Value = (Vec<f64>, usize)> {
    (1usize..5, 1usize..40)
        .prop_flat_map(|(m, n)| (prop::collection::vec(-3.0f64..3.0, m * n), Just(m)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn amplitude_matches_sort_oracle((x, m) in window(), f in 0.0f64..1.0) {
        let out = manipulate_window(&x, m, Mask::Amplitude, f, None, 0, false);
        let k = mask_count(f, x.len());
        // Oracle: stable sort by |x| descending keeps equal keys in index order.
        let mut order: Vec<usize> = (0..x.len()).collect();
        order.sort_by(|&a, &b| x[b].abs().partial_cmp(&x[a].abs()).unwrap());
        let mut expected = x.clone();
        for &i in &order[..k] {
            expected[i] = 0.0;
        }
        prop_assert_eq!(out, expected);
    }

    #[test]
    fn every_strategy_zeroes_exactly_k((x, m) in window(), f in 0.0f64..1.0, seed in any::<u64>()) {
        let x: Vec<f64> = x.iter().map(|v| if *v == 0.0 { 1.0 } else { *v }).collect();
        let r: Vec<f64> = x.iter().map(|v| v * 0.5 - 0.1).collect();
        for s in [Mask::Random, Mask::Amplitude, Mask::Lrp] {
            let out = manipulate_window(&x, m, s, f, Some(&r), seed, false);
            let zeros = out.iter().filter(|v| **v == 0.0).count();
            prop_assert_eq!(zeros, mask_count(f, x.len()));
            prop_assert!(out.iter().zip(&x).all(|(o, v)| *o == 0.0 || o == v));
        }
        let a = manipulate_window(&x, m, Mask::Random, f, None, seed, false);
        prop_assert_eq!(a, manipulate_window(&x, m, Mask::Random, f, None, seed, false));
        for s in [Mask::Random, Mask::Amplitude, Mask::Lrp] {
            prop_assert_eq!(manipulate_window(&x, m, s, 0.0, Some(&r), seed, false), x.clone());
        }
    }
}
