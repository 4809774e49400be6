use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Checkpoint, LayerGraph, LayerKind, Mode, NnError, Tensor};
use crate::seed::derive_seed;

/// Indexed supervised examples.
pub trait Samples {
    fn len(&self) -> usize;
    fn input(&self, i: usize) -> Tensor;
    fn target(&self, i: usize) -> Vec<f64>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug)]
pub struct Example {
    pub input: Tensor,
    pub target: Vec<f64>,
}

impl Samples for [Example] {
    fn len(&self) -> usize {
        <[Example]>::len(self)
    }
    fn input(&self, i: usize) -> Tensor {
        self[i].input.clone()
    }
    fn target(&self, i: usize) -> Vec<f64> {
        self[i].target.clone()
    }
}

impl Samples for Vec<Example> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }
    fn input(&self, i: usize) -> Tensor {
        self[i].input.clone()
    }
    fn target(&self, i: usize) -> Vec<f64> {
        self[i].target.clone()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub learning_rate: f64,
    /// Epochs without validation improvement before the learning rate halves.
    pub lr_patience: usize,
    /// Epochs without validation improvement before training stops.
    pub stop_patience: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Start the output layer's bias at the mean training target.
    pub output_bias_from_targets: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 100,
            max_epochs: 1000,
            learning_rate: 1e-3,
            lr_patience: 100,
            stop_patience: 200,
            seed: 0,
            adam: AdamConfig::default(),
            output_bias_from_targets: true,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), NnError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(NnError::Config(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 || self.lr_patience == 0 || self.stop_patience == 0 {
            return Err(NnError::Config(
                "batch size and patience values must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Adam with bias correction; moments are kept per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, config: AdamConfig, shapes: &[usize]) -> Self {
        Self {
            lr,
            config,
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn update(&mut self, params: Vec<&mut Vec<f64>>, grads: &[Vec<f64>]) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (k, p) in params.into_iter().enumerate() {
            let (m, v, g) = (&mut self.m[k], &mut self.v[k], &grads[k]);
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p[i] -= self.lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlateauEvent {
    Improved,
    Stalled,
    Halved,
    Stop,
}

/// Learning-rate halving and early stopping driven by validation loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauSchedule {
    pub lr_patience: usize,
    pub stop_patience: usize,
    pub best: f64,
    /// Non-improving epochs since the last improvement or halving.
    pub plateau: usize,
    /// Non-improving epochs since the last improvement.
    pub since_best: usize,
}

impl PlateauSchedule {
    pub fn new(lr_patience: usize, stop_patience: usize) -> Self {
        Self {
            lr_patience,
            stop_patience,
            best: f64::INFINITY,
            plateau: 0,
            since_best: 0,
        }
    }

    pub fn observe(&mut self, val: f64) -> PlateauEvent {
        if val < self.best {
            self.best = val;
            self.plateau = 0;
            self.since_best = 0;
            return PlateauEvent::Improved;
        }
        self.plateau += 1;
        self.since_best += 1;
        if self.since_best >= self.stop_patience {
            return PlateauEvent::Stop;
        }
        if self.plateau == self.lr_patience {
            self.plateau = 0;
            return PlateauEvent::Halved;
        }
        PlateauEvent::Stalled
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
    /// Learning rate in effect during the epoch.
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossHistory {
    pub records: Vec<EpochRecord>,
    /// Epochs at whose end the learning rate was halved.
    pub halvings: Vec<usize>,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

impl LossHistory {
    pub fn write_csv(&self, path: &Path) -> Result<(), NnError> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(["epoch", "train_mse", "val_mse", "lr"])
            .map_err(csv_err)?;
        for r in &self.records {
            w.write_record([
                r.epoch.to_string(),
                format!("{:e}", r.train_mse),
                format!("{:e}", r.val_mse),
                format!("{:e}", r.lr),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Parses a history CSV, rejecting any deviation from the column schema.
    pub fn read_csv(path: &Path) -> Result<Vec<EpochRecord>, NnError> {
        let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
        let headers = r.headers().map_err(csv_err)?.clone();
        if headers.iter().collect::<Vec<_>>() != ["epoch", "train_mse", "val_mse", "lr"] {
            return Err(NnError::Corrupt(format!(
                "unexpected history columns {headers:?}"
            )));
        }
        let mut out = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(csv_err)?;
            let num = |i: usize| -> Result<f64, NnError> {
                rec[i]
                    .parse()
                    .map_err(|_| NnError::Corrupt(format!("bad number `{}`", &rec[i])))
            };
            out.push(EpochRecord {
                epoch: rec[0]
                    .parse()
                    .map_err(|_| NnError::Corrupt(format!("bad epoch `{}`", &rec[0])))?,
                train_mse: num(1)?,
                val_mse: num(2)?,
                lr: num(3)?,
            });
        }
        Ok(out)
    }
}

fn csv_err(e: csv::Error) -> NnError {
    NnError::Corrupt(e.to_string())
}

/// Mean over examples of the per-example mean squared error.
pub fn evaluate_mse<S: Samples + ?Sized>(graph: &LayerGraph, set: &S) -> Result<f64, NnError> {
    let mut total = 0.0;
    for i in 0..set.len() {
        let y = graph.predict(&set.input(i))?;
        total += mse(&y, &set.target(i));
    }
    Ok(total / set.len() as f64)
}

fn mse(y: &[f64], t: &[f64]) -> f64 {
    y.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64
}

/// Resumable training loop state.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub adam: Adam,
    pub schedule: PlateauSchedule,
    pub history: LossHistory,
    /// Completed epochs.
    pub epoch: usize,
    pub best_params: Option<Vec<Vec<f64>>>,
    pub finished: bool,
}

impl Trainer {
    pub fn new(config: TrainConfig, graph: &LayerGraph) -> Result<Self, NnError> {
        config.validate()?;
        let shapes: Vec<usize> = graph.params().iter().map(|p| p.len()).collect();
        Ok(Self {
            adam: Adam::new(config.learning_rate, config.adam, &shapes),
            schedule: PlateauSchedule::new(config.lr_patience, config.stop_patience),
            history: LossHistory::default(),
            epoch: 0,
            best_params: None,
            finished: false,
            config,
        })
    }

    /// Sets the output bias to the mean training target (fresh runs only).
    pub fn prime_output_bias<S: Samples + ?Sized>(&self, graph: &mut LayerGraph, train: &S) {
        if !self.config.output_bias_from_targets || self.epoch > 0 || train.is_empty() {
            return;
        }
        let Some(last) = graph.nodes().last() else {
            return;
        };
        let LayerKind::Dense(d) = &last.kind else {
            return;
        };
        let (dim, id) = (d.out_dim, last.id.clone());
        let mut mean = vec![0.0; dim];
        for i in 0..train.len() {
            for (m, t) in mean.iter_mut().zip(train.target(i)) {
                *m += t;
            }
        }
        if let Some((_, bias)) = graph.layer_params_mut(&id) {
            for (b, m) in bias.iter_mut().zip(&mean) {
                *b = m / train.len() as f64;
            }
        }
    }

    /// Runs one epoch: seeded shuffle, mini-batch Adam steps, validation.
    pub fn run_epoch<S, V>(
        &mut self,
        graph: &mut LayerGraph,
        train: &S,
        val: &V,
    ) -> Result<PlateauEvent, NnError>
    where
        S: Samples + ?Sized,
        V: Samples + ?Sized,
    {
        let epoch = self.epoch + 1;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            self.config.seed,
            &[epoch as u64],
        )));

        let lr = self.adam.lr;
        let mut loss_sum = 0.0;
        for batch in order.chunks(self.config.batch_size) {
            let mut grads: Vec<Vec<f64>> =
                graph.params().iter().map(|p| vec![0.0; p.len()]).collect();
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let x = train.input(i);
                let target = train.target(i);
                let dropout_seed = derive_seed(self.config.seed, &[epoch as u64, i as u64]);
                let (y, trace) = graph.forward(&x, Mode::Training { dropout_seed })?;
                let y = y.data();
                loss_sum += mse(y, &target);
                let n = y.len() as f64;
                let g: Vec<f64> = y
                    .iter()
                    .zip(&target)
                    .map(|(a, b)| 2.0 * (a - b) / n * scale)
                    .collect();
                graph.backward_into(&trace, &Tensor::from_vec(g), &mut grads)?;
            }
            self.adam.update(graph.params_mut(), &grads);
        }
        let train_mse = loss_sum / train.len() as f64;
        let val_mse = evaluate_mse(graph, val)?;
        if !val_mse.is_finite() || !train_mse.is_finite() {
            return Err(NnError::Diverged {
                epoch,
                detail: format!("train mse {train_mse}, validation mse {val_mse}"),
            });
        }
        self.epoch = epoch;
        self.history.records.push(EpochRecord {
            epoch,
            train_mse,
            val_mse,
            lr,
        });
        let event = self.schedule.observe(val_mse);
        match event {
            PlateauEvent::Improved => {
                self.best_params = Some(graph.params().iter().map(|p| p.to_vec()).collect());
                self.history.best_epoch = Some(epoch);
            }
            PlateauEvent::Halved => {
                self.adam.lr *= 0.5;
                self.history.halvings.push(epoch);
                log::info!("epoch {epoch}: learning rate halved to {}", self.adam.lr);
            }
            PlateauEvent::Stop => {
                self.history.stopped_early = true;
                self.finished = true;
            }
            PlateauEvent::Stalled => {}
        }
        if epoch >= self.config.max_epochs {
            self.finished = true;
        }
        log::info!("epoch {epoch}: train {train_mse:.5} val {val_mse:.5}");
        Ok(event)
    }

    /// Trains until finished or until `stop_after` total epochs.
    pub fn run<S, V>(
        &mut self,
        graph: &mut LayerGraph,
        train: &S,
        val: &V,
        stop_after: Option<usize>,
    ) -> Result<(), NnError>
    where
        S: Samples + ?Sized,
        V: Samples + ?Sized,
    {
        if train.is_empty() || val.is_empty() {
            return Err(NnError::Config(
                "training and validation sets must be non-empty".into(),
            ));
        }
        self.prime_output_bias(graph, train);
        while !self.finished && stop_after.is_none_or(|n| self.epoch < n) {
            self.run_epoch(graph, train, val)?;
        }
        Ok(())
    }

    /// Loads the best-validation parameters into `graph`.
    pub fn restore_best(&self, graph: &mut LayerGraph) {
        if let Some(best) = &self.best_params {
            for (p, b) in graph.params_mut().into_iter().zip(best) {
                p.copy_from_slice(b);
            }
        }
    }

    /// Writes weights plus optimizer state so training can resume exactly.
    pub fn save(&self, graph: &LayerGraph, path: &Path) -> Result<(), NnError> {
        let names = graph.param_names();
        let mut tensors: Vec<(String, Vec<f64>)> = Vec::new();
        for (n, p) in names.iter().zip(graph.params()) {
            tensors.push((n.clone(), p.to_vec()));
        }
        for (k, n) in names.iter().enumerate() {
            tensors.push((format!("adam.m.{n}"), self.adam.m[k].clone()));
            tensors.push((format!("adam.v.{n}"), self.adam.v[k].clone()));
            if let Some(best) = &self.best_params {
                tensors.push((format!("best.{n}"), best[k].clone()));
            }
        }
        let meta = serde_json::json!({
            "kind": "train_state",
            "config": self.config,
            "epoch": self.epoch,
            "adam_step": self.adam.step,
            "lr": self.adam.lr,
            "schedule": self.schedule,
            "history": self.history,
            "finished": self.finished,
        });
        Checkpoint {
            fingerprint: graph.fingerprint(),
            meta,
            tensors,
        }
        .write(path)
    }

    /// Restores a state written by [`Trainer::save`] into `graph`.
    pub fn load(graph: &mut LayerGraph, path: &Path) -> Result<Self, NnError> {
        let ck = Checkpoint::read(path)?;
        if ck.fingerprint != graph.fingerprint() {
            return Err(NnError::FingerprintMismatch);
        }
        let meta = &ck.meta;
        let field = |k: &str| {
            meta.get(k)
                .cloned()
                .ok_or_else(|| NnError::Corrupt(format!("missing `{k}`")))
        };
        let parse = |e: serde_json::Error| NnError::Corrupt(e.to_string());
        let config: TrainConfig = serde_json::from_value(field("config")?).map_err(parse)?;
        let mut trainer = Trainer::new(config, graph)?;
        trainer.epoch = serde_json::from_value(field("epoch")?).map_err(parse)?;
        trainer.adam.step = serde_json::from_value(field("adam_step")?).map_err(parse)?;
        trainer.adam.lr = serde_json::from_value(field("lr")?).map_err(parse)?;
        trainer.schedule = serde_json::from_value(field("schedule")?).map_err(parse)?;
        trainer.history = serde_json::from_value(field("history")?).map_err(parse)?;
        trainer.finished = serde_json::from_value(field("finished")?).map_err(parse)?;

        let names = graph.param_names();
        let lookup = |name: &str, len: usize| -> Result<Vec<f64>, NnError> {
            let t = ck
                .tensor(name)
                .ok_or_else(|| NnError::Corrupt(format!("missing tensor `{name}`")))?;
            if t.len() != len {
                return Err(NnError::Corrupt(format!(
                    "tensor `{name}` has wrong length"
                )));
            }
            Ok(t.to_vec())
        };
        let lens: Vec<usize> = graph.params().iter().map(|p| p.len()).collect();
        let mut weights = Vec::new();
        let mut best = Vec::new();
        for (k, n) in names.iter().enumerate() {
            weights.push(lookup(n, lens[k])?);
            trainer.adam.m[k] = lookup(&format!("adam.m.{n}"), lens[k])?;
            trainer.adam.v[k] = lookup(&format!("adam.v.{n}"), lens[k])?;
            if ck.tensor(&format!("best.{n}")).is_some() {
                best.push(lookup(&format!("best.{n}"), lens[k])?);
            }
        }
        trainer.best_params = (best.len() == names.len()).then_some(best);
        for (p, w) in graph.params_mut().into_iter().zip(weights) {
            *p = w;
        }
        Ok(trainer)
    }
}

/// Trains `graph` in place and leaves it holding the best-validation
/// parameters.
pub fn train<S, V>(
    graph: &mut LayerGraph,
    train: &S,
    val: &V,
    config: TrainConfig,
) -> Result<LossHistory, NnError>
where
    S: Samples + ?Sized,
    V: Samples + ?Sized,
{
    let mut trainer = Trainer::new(config, graph)?;
    trainer.run(graph, train, val, None)?;
    trainer.restore_best(graph);
    Ok(trainer.history)
}
