use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{Arch, MaeMetric, RunConfig, Strategy};
use super::manipulate::{manipulate_window, ManipulationCurve, ManipulationResult};
use super::ExperimentError;
use crate::data::{
    build_dataset, load_recordings, DatasetManifest, ExampleSet, ExampleStore, Split, StoreHeader,
    StoreWriter, MANIFEST_FILE,
};
use crate::dsp::{
    center_pairs, evaluate_tdoa, gcc_phat, max_lag, signal_correlation_time, stft, TdoaCase,
    TdoaStats, TdoaTable,
};
use crate::lrp::{attribute, relevance_signal, write_relevance_wav, RelevanceMap, RuleAssignment};
use crate::nn::{load_weights, save_weights, train, LayerGraph, Mode, Samples, Tensor};
use crate::seed::derive_seed;

type Result<T> = std::result::Result<T, ExperimentError>;

/// In-memory training sets above this size are read from disk per window.
const IN_MEMORY_LIMIT: u64 = 1 << 30;

/// Conditions sharing one model: one group per condition, or a single
/// pooled group.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionGroup {
    pub label: String,
    pub conditions: Vec<usize>,
}

pub fn condition_groups(cfg: &RunConfig) -> Vec<ConditionGroup> {
    let conds = &cfg.dataset.conditions;
    if cfg.pooled {
        vec![ConditionGroup {
            label: "pooled".into(),
            conditions: (0..conds.len()).collect(),
        }]
    } else {
        conds
            .iter()
            .enumerate()
            .map(|(i, c)| ConditionGroup {
                label: c.label(),
                conditions: vec![i],
            })
            .collect()
    }
}

fn group_of(cfg: &RunConfig, condition: usize) -> ConditionGroup {
    condition_groups(cfg)
        .into_iter()
        .find(|g| g.conditions.contains(&condition))
        .expect("every condition belongs to a group")
}

fn freeze(cfg: &RunConfig, command: &str) -> Result<()> {
    let dir = cfg.out_dir.join("frozen");
    fs::create_dir_all(&dir)?;
    fs::write(dir.join(format!("{command}.toml")), cfg.to_toml())?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

fn open_dataset(cfg: &RunConfig) -> Result<(DatasetManifest, ExampleStore)> {
    let dir = cfg.dataset_dir();
    if !dir.join(MANIFEST_FILE).exists() {
        return Err(ExperimentError::Missing(format!(
            "no dataset in {}; run the `dataset` command first",
            dir.display()
        )));
    }
    let manifest = DatasetManifest::load(&dir)?;
    if manifest.config != cfg.dataset {
        return Err(ExperimentError::Config(format!(
            "dataset in {} was built from a different configuration",
            dir.display()
        )));
    }
    let store = manifest.open_store(&dir)?;
    Ok((manifest, store))
}

/// Builds the dataset, or reuses an existing one built from the same
/// configuration.
pub fn cmd_dataset(cfg: &RunConfig) -> Result<DatasetManifest> {
    freeze(cfg, "dataset")?;
    if let Ok((manifest, _)) = open_dataset(cfg) {
        log::info!("reusing dataset in {}", cfg.dataset_dir().display());
        return Ok(manifest);
    }
    let m = build_dataset(&cfg.dataset, &cfg.dataset_dir())?;
    log::info!(
        "built {} examples from {} sources",
        m.n_examples,
        m.sources.len()
    );
    Ok(m)
}

fn indices(
    manifest: &DatasetManifest,
    store: &ExampleStore,
    split: Split,
    conditions: &[usize],
) -> Vec<usize> {
    let splits: BTreeMap<usize, Split> = manifest.sources.iter().map(|s| (s.id, s.split)).collect();
    store
        .keys()
        .iter()
        .enumerate()
        .filter(|(_, k)| conditions.contains(&k.condition) && splits.get(&k.source) == Some(&split))
        .map(|(i, _)| i)
        .collect()
}

fn model_path(cfg: &RunConfig, arch: Arch, group: &str) -> PathBuf {
    cfg.out_dir
        .join("models")
        .join(format!("{}_{group}.ck", arch.name()))
}

fn relevance_path(cfg: &RunConfig, arch: Arch, condition: usize) -> PathBuf {
    cfg.out_dir.join("relevance").join(format!(
        "{}_{}.bin",
        arch.name(),
        cfg.dataset.conditions[condition].label()
    ))
}

fn load_model(cfg: &RunConfig, arch: Arch, group: &str) -> Result<LayerGraph> {
    let path = model_path(cfg, arch, group);
    if !path.exists() {
        return Err(ExperimentError::Missing(format!(
            "no trained model at {}; run the `train` command first",
            path.display()
        )));
    }
    let mut g = cfg.model(arch).build()?;
    load_weights(&mut g, &path)?;
    Ok(g)
}

/// Mean localization error in meters.
pub fn mae(pred: &[[f64; 3]], truth: &[[f64; 3]], metric: MaeMetric) -> f64 {
    let n = pred.len().max(1) as f64;
    pred.iter()
        .zip(truth)
        .map(|(p, t)| match metric {
            MaeMetric::Euclidean => (0..3).map(|k| (p[k] - t[k]).powi(2)).sum::<f64>().sqrt(),
            MaeMetric::L1 => (0..3).map(|k| (p[k] - t[k]).abs()).sum::<f64>() / 3.0,
        })
        .sum::<f64>()
        / n
}

fn predict(g: &LayerGraph, x: &Tensor) -> Result<[f64; 3]> {
    let y = g.predict(x)?;
    Ok([y[0], y[1], y[2]])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub model: String,
    pub group: String,
    pub epochs: usize,
    pub best_epoch: Option<usize>,
    pub best_val_mse: f64,
    pub test_mae: f64,
    /// MAE of always predicting the mean training target.
    pub baseline_mae: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

fn load_split<'a>(store: &'a ExampleStore, idx: Vec<usize>) -> Result<Box<dyn Samples + 'a>> {
    let h = store.header();
    let bytes = idx.len() as u64 * (h.window_len * h.n_mics) as u64 * 4;
    if bytes > IN_MEMORY_LIMIT {
        Ok(Box::new(store.view(idx)))
    } else {
        Ok(Box::new(store.load_indices(&idx)?))
    }
}

/// Trains every configured model on every condition group.
pub fn cmd_train(cfg: &RunConfig) -> Result<Vec<TrainOutcome>> {
    freeze(cfg, "train")?;
    let (manifest, store) = open_dataset(cfg)?;
    let mut outcomes = Vec::new();
    for &arch in &cfg.models {
        for (gi, group) in condition_groups(cfg).iter().enumerate() {
            let tr = load_split(
                &store,
                indices(&manifest, &store, Split::Train, &group.conditions),
            )?;
            let va = load_split(
                &store,
                indices(&manifest, &store, Split::Val, &group.conditions),
            )?;
            let test_idx = indices(&manifest, &store, Split::Test, &group.conditions);
            if tr.is_empty() || va.is_empty() || test_idx.is_empty() {
                return Err(ExperimentError::Missing(format!(
                    "group {} lacks train, validation or test examples",
                    group.label
                )));
            }
            log::info!(
                "training {} on {} ({} examples)",
                arch.name(),
                group.label,
                tr.len()
            );
            let mut g = cfg.model(arch).build()?;
            g.initialize(derive_seed(cfg.seed, &[21, arch as u64, gi as u64]));
            let history = train(&mut g, tr.as_ref(), va.as_ref(), cfg.train_config(arch))?;

            let path = model_path(cfg, arch, &group.label);
            fs::create_dir_all(path.parent().expect("models dir"))?;
            save_weights(
                &g,
                &path,
                serde_json::json!({"model": arch.name(), "group": group.label, "conditions": group.conditions}),
            )?;
            history.write_csv(&path.with_extension("history.csv"))?;

            let n_train = tr.len();
            let mut mean = [0.0; 3];
            for i in 0..n_train {
                for (m, t) in mean.iter_mut().zip(tr.target(i)) {
                    *m += t / n_train as f64;
                }
            }
            let mut pred = Vec::with_capacity(test_idx.len());
            let mut truth = Vec::with_capacity(test_idx.len());
            for chunk in test_idx.chunks(64) {
                let set = store.load_indices(chunk)?;
                for i in 0..set.len() {
                    pred.push(predict(&g, &set.tensor(i))?);
                    truth.push(set.targets[i]);
                }
            }
            let baseline = vec![mean; truth.len()];
            let best_val_mse = history
                .best_epoch
                .map_or(f64::NAN, |e| history.records[e - 1].val_mse);
            let outcome = TrainOutcome {
                model: arch.name().into(),
                group: group.label.clone(),
                epochs: history.records.len(),
                best_epoch: history.best_epoch,
                best_val_mse,
                test_mae: mae(&pred, &truth, cfg.manipulate.metric),
                baseline_mae: mae(&baseline, &truth, cfg.manipulate.metric),
                n_train,
                n_val: va.len(),
                n_test: truth.len(),
            };
            log::info!(
                "{} {}: test MAE {:.3} m, baseline {:.3} m",
                arch.name(),
                group.label,
                outcome.test_mae,
                outcome.baseline_mae
            );
            write_json(&path.with_extension("eval.json"), &outcome)?;
            outcomes.push(outcome);
        }
    }
    Ok(outcomes)
}

fn relative_deficit(map: &RelevanceMap) -> f64 {
    let seed: f64 = map.output_seed.iter().sum();
    let got = map.input.sum();
    (seed - got).abs() / seed.abs().max(f64::MIN_POSITIVE)
}

fn relevance(
    g: &LayerGraph,
    rules: &RuleAssignment,
    cfg: &RunConfig,
    x: &Tensor,
) -> Result<RelevanceMap> {
    let (_, trace) = g.forward(x, Mode::Inference)?;
    Ok(attribute(g, &trace, rules, cfg.lrp.selector)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditSummary {
    pub store: String,
    pub windows: usize,
    /// Windows whose epsilon-free relevance misses the seed by more than
    /// `tolerance`.
    pub failed: usize,
    /// Largest `|seed - sum(R_in)| / |seed|` without epsilon.
    pub max_relative_deficit: f64,
    pub epsilon: f64,
    /// Largest relative deficit of the stored (epsilon) relevance.
    pub max_absorbed: f64,
    /// Stored maps whose total exceeds the seed in magnitude; absorbing
    /// negative relevance can raise the total.
    pub above_seed: usize,
    pub tolerance: f64,
}

/// Relevance of every test window, per model and condition, with a
/// conservation audit and optional per-source relevance WAVs.
pub fn cmd_attribute(cfg: &RunConfig) -> Result<Vec<AuditSummary>> {
    freeze(cfg, "attribute")?;
    let (manifest, store) = open_dataset(cfg)?;
    let mut audits = Vec::new();
    for &arch in &cfg.models {
        for (ci, cond) in cfg.dataset.conditions.iter().enumerate() {
            let group = group_of(cfg, ci);
            let g = load_model(cfg, arch, &group.label)?;
            let rules = RuleAssignment::default_for(&g, cfg.lrp.gamma, cfg.lrp.epsilon);
            // Epsilon absorbs relevance by design, so conservation is audited on
            // the same rules with epsilon set to zero.
            let strict = RuleAssignment::default_for(&g, cfg.lrp.gamma, 0.0);
            let idx = indices(&manifest, &store, Split::Test, &[ci]);
            let path = relevance_path(cfg, arch, ci);
            fs::create_dir_all(path.parent().expect("relevance dir"))?;
            let h = store.header();
            let mut writer = StoreWriter::create(
                &path,
                StoreHeader {
                    window_len: h.window_len,
                    n_mics: h.n_mics,
                    count: idx.len(),
                },
            )?;
            let wav_dir = cfg.out_dir.join("relevance").join("wav");
            if cfg.lrp.export_wav {
                fs::create_dir_all(&wav_dir)?;
            }
            let mut audit = AuditSummary {
                store: path
                    .file_name()
                    .expect("file name")
                    .to_string_lossy()
                    .into_owned(),
                windows: idx.len(),
                failed: 0,
                max_relative_deficit: 0.0,
                epsilon: cfg.lrp.epsilon,
                max_absorbed: 0.0,
                above_seed: 0,
                tolerance: cfg.lrp.audit_tolerance,
            };
            let mut pending: Vec<(usize, Tensor)> = Vec::new();
            for (n, &i) in idx.iter().enumerate() {
                let set = store.load_indices(&[i])?;
                let key = set.keys[0];
                let x = set.tensor(0);
                let map = relevance(&g, &rules, cfg, &x)?;
                let check = if cfg.lrp.epsilon == 0.0 {
                    map.clone()
                } else {
                    relevance(&g, &strict, cfg, &x)?
                };
                let deficit = relative_deficit(&check);
                if deficit > cfg.lrp.audit_tolerance {
                    audit.failed += 1;
                }
                audit.max_relative_deficit = audit.max_relative_deficit.max(deficit);
                audit.max_absorbed = audit.max_absorbed.max(relative_deficit(&map));
                let seed: f64 = map.output_seed.iter().sum();
                if map.input.sum().abs() > seed.abs() * (1.0 + cfg.lrp.audit_tolerance) {
                    audit.above_seed += 1;
                }
                writer.push(key, &set.targets[0], &map.input)?;
                if cfg.lrp.export_wav {
                    pending.push((key.window, map.input));
                    let last = idx.get(n + 1).map(|&j| store.keys()[j].source) != Some(key.source);
                    if last {
                        let refs: Vec<(usize, &Tensor)> =
                            pending.iter().map(|(w, t)| (*w, t)).collect();
                        let channels = relevance_signal(&refs)?;
                        let name =
                            format!("{}_{}_src{:05}.wav", arch.name(), cond.label(), key.source);
                        write_relevance_wav(
                            &wav_dir.join(name),
                            &channels,
                            cfg.dataset.room.sample_rate as u32,
                        )?;
                        pending.clear();
                    }
                }
            }
            writer.finish()?;
            write_json(&path.with_extension("audit.json"), &audit)?;
            log::info!(
                "{}: {} windows, max conservation deficit {:.2e}",
                audit.store,
                audit.windows,
                audit.max_relative_deficit
            );
            if audit.failed > 0 {
                return Err(ExperimentError::Audit {
                    store: audit.store,
                    failed: audit.failed,
                    total: audit.windows,
                });
            }
            audits.push(audit);
        }
    }
    Ok(audits)
}

/// Relevance windows for `arch` on condition `ci`, aligned with `set`:
/// read from the relevance store when present, computed otherwise.
fn relevance_for(
    cfg: &RunConfig,
    arch: Arch,
    ci: usize,
    g: &LayerGraph,
    set: &ExampleSet,
) -> Result<Vec<Vec<f64>>> {
    let path = relevance_path(cfg, arch, ci);
    if path.exists() {
        let rs = ExampleStore::open(&path)?;
        if rs.keys() == set.keys.as_slice() {
            let all = rs.load(|_| true)?;
            return Ok(all
                .data
                .iter()
                .map(|d| d.iter().map(|v| f64::from(*v)).collect())
                .collect());
        }
        log::warn!(
            "{} does not match the test windows; recomputing",
            path.display()
        );
    }
    let rules = RuleAssignment::default_for(g, cfg.lrp.gamma, cfg.lrp.epsilon);
    (0..set.len())
        .map(|i| Ok(relevance(g, &rules, cfg, &set.tensor(i))?.input.into_data()))
        .collect()
}

/// Zeroes growing fractions of every test window by each strategy's
/// ranking and records the localization error.
pub fn cmd_manipulate(cfg: &RunConfig) -> Result<Vec<ManipulationResult>> {
    freeze(cfg, "manipulate")?;
    let (manifest, store) = open_dataset(cfg)?;
    let fr = &cfg.manipulate.fractions;
    let mut results = Vec::new();
    for &arch in &cfg.models {
        let n_cond = cfg.dataset.conditions.len();
        let mut per: BTreeMap<Strategy, Vec<Vec<f64>>> = BTreeMap::new();
        for (ci, _) in cfg.dataset.conditions.iter().enumerate() {
            let group = group_of(cfg, ci);
            let g = load_model(cfg, arch, &group.label)?;
            let set = store.load_indices(&indices(&manifest, &store, Split::Test, &[ci]))?;
            let needs_lrp = cfg.manipulate.strategies.contains(&Strategy::Lrp);
            let rel = if needs_lrp {
                relevance_for(cfg, arch, ci, &g, &set)?
            } else {
                Vec::new()
            };
            for &strategy in &cfg.manipulate.strategies {
                let mut curve = Vec::with_capacity(fr.len());
                for &f in fr {
                    let mut pred = Vec::with_capacity(set.len());
                    for i in 0..set.len() {
                        let x = set.tensor(i);
                        let k = set.keys[i];
                        let seed = derive_seed(
                            cfg.seed,
                            &[30, ci as u64, k.source as u64, k.window as u64],
                        );
                        let masked = manipulate_window(
                            x.data(),
                            set.n_mics,
                            strategy,
                            f,
                            rel.get(i).map(Vec::as_slice),
                            seed,
                            cfg.manipulate.per_channel,
                        );
                        pred.push(predict(&g, &Tensor::new(x.shape().to_vec(), masked)?)?);
                    }
                    curve.push(mae(&pred, &set.targets, cfg.manipulate.metric));
                }
                log::info!(
                    "{} {} condition {ci}: {:?}",
                    arch.name(),
                    strategy.name(),
                    curve
                );
                per.entry(strategy).or_default().push(curve);
            }
        }
        let curves = cfg
            .manipulate
            .strategies
            .iter()
            .map(|s| {
                let pc = per.remove(s).unwrap_or_default();
                let mean = (0..fr.len())
                    .map(|f| pc.iter().map(|c| c[f]).sum::<f64>() / n_cond as f64)
                    .collect();
                ManipulationCurve {
                    strategy: *s,
                    mae: mean,
                    per_condition: pc,
                }
            })
            .collect();
        let result = ManipulationResult {
            model: arch.name().into(),
            fractions: fr.clone(),
            conditions: cfg.dataset.conditions.iter().map(|c| c.label()).collect(),
            curves,
        };
        let dir = cfg.out_dir.join("manipulation");
        fs::create_dir_all(&dir)?;
        result
            .write_csv(&dir.join(format!("{}.csv", arch.name())))
            .map_err(crate::dsp::DspError::from)?;
        write_json(&dir.join(format!("{}.json", arch.name())), &result)?;
        results.push(result);
    }
    Ok(results)
}

/// Test windows of one condition grouped by source, in source order.
fn by_source(set: &ExampleSet) -> BTreeMap<usize, Vec<usize>> {
    let mut m: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, k) in set.keys.iter().enumerate() {
        m.entry(k.source).or_default().push(i);
    }
    m
}

fn tdoa_stats(
    cfg: &RunConfig,
    manifest: &DatasetManifest,
    sct: &BTreeMap<usize, f64>,
    keys: &ExampleSet,
    windows: &[Tensor],
) -> Result<TdoaStats> {
    let cases: Vec<TdoaCase> = by_source(keys)
        .into_iter()
        .map(|(source, idx)| TdoaCase {
            source: manifest
                .source(source)
                .expect("source in manifest")
                .position,
            sct: sct[&source],
            windows: idx.iter().map(|&i| &windows[i]).collect(),
        })
        .collect();
    Ok(evaluate_tdoa(
        &cases,
        &cfg.dataset.array,
        cfg.dataset.room.speed_of_sound,
        cfg.dataset.room.sample_rate,
        &cfg.tdoa.config(),
    )?)
}

#[derive(Serialize)]
struct EstimateRow<'a> {
    condition: &'a str,
    signal: &'a str,
    spacing_m: f64,
    source: usize,
    window: Option<usize>,
    estimate: i64,
    truth: f64,
    sct: f64,
    anomalous: bool,
}

fn write_estimates(
    w: &mut csv::Writer<fs::File>,
    cond: &str,
    signal: &str,
    set: &ExampleSet,
    stats: &TdoaStats,
) -> Result<()> {
    let sources: Vec<usize> = by_source(set).into_keys().collect();
    for s in &stats.spacings {
        for e in &s.estimates {
            w.serialize(EstimateRow {
                condition: cond,
                signal,
                spacing_m: s.pair.spacing,
                source: sources[e.case],
                window: e.window,
                estimate: e.estimate,
                truth: e.truth,
                sct: e.sct,
                anomalous: e.anomalous,
            })
            .map_err(crate::dsp::DspError::from)?;
        }
    }
    Ok(())
}

/// Probability of anomalous GCC-PHAT estimates for microphone and
/// relevance signals, laid out as one row per condition.
pub fn cmd_tdoa(cfg: &RunConfig) -> Result<TdoaTable> {
    freeze(cfg, "tdoa")?;
    let (manifest, store) = open_dataset(cfg)?;
    for &arch in &cfg.models {
        for ci in 0..cfg.dataset.conditions.len() {
            if !relevance_path(cfg, arch, ci).exists() {
                return Err(ExperimentError::Missing(format!(
                    "relevance store {} missing; run the `attribute` command first",
                    relevance_path(cfg, arch, ci).display()
                )));
            }
        }
    }
    let recordings = load_recordings(&manifest.config)?;
    let mut sct = BTreeMap::new();
    for s in &manifest.sources {
        if s.split == Split::Test {
            sct.insert(
                s.id,
                signal_correlation_time(&recordings[s.recording].samples, cfg.tdoa.sct_threshold)?,
            );
        }
    }
    let signals = vec![
        "Signal".to_string(),
        Arch::LocCnn.label().to_string(),
        Arch::SampleCnn.label().to_string(),
    ];
    let mut table = TdoaTable::new(cfg.tdoa.spacings.clone(), signals);
    let dir = cfg.out_dir.join("tdoa");
    fs::create_dir_all(&dir)?;
    let mut est =
        csv::Writer::from_path(dir.join("estimates.csv")).map_err(crate::dsp::DspError::from)?;
    for (ci, cond) in cfg.dataset.conditions.iter().enumerate() {
        let set = store.load_indices(&indices(&manifest, &store, Split::Test, &[ci]))?;
        let mics: Vec<Tensor> = (0..set.len()).map(|i| set.tensor(i)).collect();
        let stats = tdoa_stats(cfg, &manifest, &sct, &set, &mics)?;
        table.insert(cond.snr_db, cond.t60, "Signal", &stats)?;
        write_estimates(&mut est, &cond.label(), "Signal", &set, &stats)?;
        for &arch in &cfg.models {
            let rs = ExampleStore::open(&relevance_path(cfg, arch, ci))?;
            if rs.keys() != set.keys.as_slice() {
                return Err(ExperimentError::Missing(format!(
                    "relevance store for {} on {} does not match the test windows",
                    arch.name(),
                    cond.label()
                )));
            }
            let rel = rs.load(|_| true)?;
            let windows: Vec<Tensor> = (0..rel.len()).map(|i| rel.tensor(i)).collect();
            let stats = tdoa_stats(cfg, &manifest, &sct, &set, &windows)?;
            table.insert(cond.snr_db, cond.t60, arch.label(), &stats)?;
            write_estimates(&mut est, &cond.label(), arch.label(), &set, &stats)?;
        }
    }
    est.flush()?;
    table.write_csv(&dir.join("table.csv"))?;
    Ok(table)
}

fn channel_of(set: &ExampleSet, idx: &[usize], windows: &[Tensor], mic: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for &i in idx {
        out.extend(windows[i].data().iter().skip(mic).step_by(set.n_mics));
    }
    out
}

fn write_spectrogram(path: &Path, x: &[f64], cfg: &RunConfig) -> Result<()> {
    let spec = stft(x, cfg.stft.nfft, cfg.stft.hop)?;
    let fs_hz = cfg.dataset.room.sample_rate;
    let mut w = csv::Writer::from_path(path).map_err(crate::dsp::DspError::from)?;
    let mut header = vec!["time_s".to_string()];
    header.extend(
        (0..spec.n_bins()).map(|b| format!("{:.2}", b as f64 * fs_hz / cfg.stft.nfft as f64)),
    );
    w.write_record(&header)
        .map_err(crate::dsp::DspError::from)?;
    for (f, row) in spec.magnitude_db().iter().enumerate() {
        let t = (f * cfg.stft.hop) as f64 / fs_hz;
        let mut rec = vec![format!("{t:.4}")];
        rec.extend(row.iter().map(|v| format!("{v:.3}")));
        w.write_record(&rec).map_err(crate::dsp::DspError::from)?;
    }
    w.flush()?;
    Ok(())
}

/// STFT magnitudes of the concatenated windows of one test source and
/// microphone, for the microphone signal and each model's relevance, plus
/// GCC-PHAT curves of the smallest centered pair.
pub fn cmd_stft_export(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    freeze(cfg, "stft-export")?;
    let (manifest, store) = open_dataset(cfg)?;
    let source = match cfg.stft.source {
        Some(s) => {
            if manifest.split_of(s) != Some(Split::Test) {
                return Err(ExperimentError::Config(format!(
                    "source {s} is not a test source"
                )));
            }
            s
        }
        None => {
            manifest
                .sources
                .iter()
                .find(|s| s.split == Split::Test)
                .ok_or_else(|| ExperimentError::Missing("dataset has no test source".into()))?
                .id
        }
    };
    let dir = cfg.out_dir.join("stft");
    fs::create_dir_all(&dir)?;
    let pair = center_pairs(
        &cfg.dataset.array,
        &cfg.tdoa.spacings[..1.min(cfg.tdoa.spacings.len())],
    )?;
    let mut written = Vec::new();
    for (ci, cond) in cfg.dataset.conditions.iter().enumerate() {
        let set = store.load(|k| k.condition == ci && k.source == source)?;
        let idx: Vec<usize> = (0..set.len()).collect();
        let mut signals: Vec<(String, Vec<Tensor>)> =
            vec![("mic".into(), idx.iter().map(|&i| set.tensor(i)).collect())];
        for &arch in &cfg.models {
            let path = relevance_path(cfg, arch, ci);
            let rel = if path.exists() {
                ExampleStore::open(&path)?.load(|k| k.source == source)?
            } else {
                return Err(ExperimentError::Missing(format!(
                    "relevance store {} missing; run the `attribute` command first",
                    path.display()
                )));
            };
            signals.push((
                arch.name().into(),
                (0..rel.len()).map(|i| rel.tensor(i)).collect(),
            ));
        }
        let mut gcc =
            csv::Writer::from_path(dir.join(format!("gcc_{}_src{source:05}.csv", cond.label())))
                .map_err(crate::dsp::DspError::from)?;
        gcc.write_record(["signal", "spacing_m", "lag", "value"])
            .map_err(crate::dsp::DspError::from)?;
        for (name, windows) in &signals {
            let x = channel_of(&set, &idx, windows, cfg.stft.mic);
            let path = dir.join(format!(
                "{}_{name}_src{source:05}_mic{:02}.csv",
                cond.label(),
                cfg.stft.mic
            ));
            write_spectrogram(&path, &x, cfg)?;
            written.push(path);
            for p in &pair {
                let a = channel_of(&set, &idx, windows, p.first);
                let b = channel_of(&set, &idx, windows, p.second);
                let lag = max_lag(
                    p.spacing,
                    cfg.dataset.room.speed_of_sound,
                    cfg.dataset.room.sample_rate,
                    cfg.tdoa.lag_margin,
                );
                let curve = gcc_phat(&a, &b, lag)?;
                for (l, v) in curve.lags().zip(&curve.values) {
                    gcc.write_record([
                        name.clone(),
                        format!("{}", p.spacing),
                        l.to_string(),
                        format!("{v:.6}"),
                    ])
                    .map_err(crate::dsp::DspError::from)?;
                }
            }
        }
        gcc.flush()?;
    }
    Ok(written)
}
