//! Adam training on the NLL of the two tokens after `=`.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Sample, Sentence, Token};
use crate::error::{Error, Result};
use crate::model::{init_params, loss_counts, loss_full, CountEngine, LossAndGrad, ModelConfig, ModelParams, QueryToken};
use crate::numerics::{argmax, AdamConfig, AdamState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TrainPath {
    /// Batches of count triples through the count-collapsed route.
    #[default]
    CountsFast,
    /// Explicit token sequences through the reference route (supports dropout).
    FullReference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Seeds parameter initialisation, per-epoch shuffling and dropout.
    pub seed: u64,
    pub path: TrainPath,
    /// Cosine decay of the learning rate to zero over the run.
    pub cosine_lr: bool,
}

impl TrainConfig {
    pub fn new(model: ModelConfig, seed: u64) -> Self {
        Self {
            model,
            epochs: 100,
            batch_size: 64,
            adam: AdamConfig::default(),
            seed,
            path: TrainPath::CountsFast,
            cosine_lr: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.path == TrainPath::CountsFast && self.model.dropout != 0.0 {
            return Err(Error::Config(
                "the counts-fast path requires dropout = 0; use the full-reference path".into(),
            ));
        }
        Ok(())
    }
}

/// Main-task, syntactic-task and joint accuracy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Accuracy {
    pub main: f64,
    pub syntactic: f64,
    pub joint: f64,
}

/// Main: argmax at `=` is the true answer. Syntactic: argmax at the (true)
/// answer token is `[EOS]`. Joint: both.
pub fn evaluate(config: &ModelConfig, params: &ModelParams, samples: &[Sample]) -> Result<Accuracy> {
    let engine = CountEngine::new(config, params)?;
    Ok(evaluate_with(&engine, samples))
}

pub fn evaluate_with(engine: &CountEngine<'_>, samples: &[Sample]) -> Accuracy {
    if samples.is_empty() {
        return Accuracy::default();
    }
    let (mut main, mut syn, mut joint) = (0usize, 0usize, 0usize);
    for s in samples {
        let m = argmax(&engine.forward(s.counts, QueryToken::Eq).logits) == s.answer.id();
        let y = argmax(&engine.forward(s.counts, QueryToken::answer(s.answer)).logits) == Token::Eos.id();
        main += m as usize;
        syn += y as usize;
        joint += (m && y) as usize;
    }
    let n = samples.len() as f64;
    Accuracy {
        main: main as f64 / n,
        syntactic: syn as f64 / n,
        joint: joint as f64 / n,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val: Accuracy,
    pub test: Accuracy,
    pub wall_secs: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    /// Metrics table: `epoch,loss,acc_main_val,acc_main_test,acc_syn_test,acc_joint_test`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["epoch", "loss", "acc_main_val", "acc_main_test", "acc_syn_test", "acc_joint_test"])?;
        for r in &self.epochs {
            w.write_record([
                r.epoch.to_string(),
                r.train_loss.to_string(),
                r.val.main.to_string(),
                r.test.main.to_string(),
                r.test.syntactic.to_string(),
                r.test.joint.to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Receives the parameters after every completed epoch.
pub trait EpochObserver {
    fn on_epoch(&mut self, record: &EpochRecord, params: &ModelParams, is_final: bool) -> Result<()>;
}

/// Observer that ignores everything.
pub struct NoCheckpoints;

impl EpochObserver for NoCheckpoints {
    fn on_epoch(&mut self, _: &EpochRecord, _: &ModelParams, _: bool) -> Result<()> {
        Ok(())
    }
}

/// Keeps every epoch's parameters in memory.
#[derive(Default)]
pub struct InMemoryCheckpoints {
    pub snapshots: Vec<(usize, ModelParams)>,
}

impl EpochObserver for InMemoryCheckpoints {
    fn on_epoch(&mut self, record: &EpochRecord, params: &ModelParams, _: bool) -> Result<()> {
        self.snapshots.push((record.epoch, params.clone()));
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: TrainLog,
}

/// Loss and gradient for one batch on the selected route.
pub fn loss_batch(
    config: &TrainConfig,
    params: &ModelParams,
    batch: &[&Sentence],
    dropout_rng: &mut ChaCha8Rng,
) -> Result<LossAndGrad> {
    match config.path {
        TrainPath::CountsFast => {
            let samples: Vec<Sample> = batch.iter().map(|s| Sample::from(*s)).collect();
            loss_counts(&config.model, params, &samples)
        }
        TrainPath::FullReference => {
            let owned: Vec<Sentence> = batch.iter().map(|s| (*s).clone()).collect();
            Ok(loss_full(&config.model, params, &owned, Some(dropout_rng)))
        }
    }
}

pub fn init_for(config: &TrainConfig) -> Result<ModelParams> {
    init_params(&config.model, &mut ChaCha8Rng::seed_from_u64(config.seed))
}

/// Trains from the seeded initialisation.
pub fn train(config: &TrainConfig, dataset: &Dataset, observer: &mut dyn EpochObserver) -> Result<TrainOutcome> {
    let params = init_for(config)?;
    train_from(config, params, dataset, observer)
}

/// Trains from the given parameters. Epoch `e` shuffles the training set
/// with a generator keyed by `(seed, e)`.
pub fn train_from(
    config: &TrainConfig,
    mut params: ModelParams,
    dataset: &Dataset,
    observer: &mut dyn EpochObserver,
) -> Result<TrainOutcome> {
    config.validate()?;
    let val: Vec<Sample> = dataset.val.iter().map(Sample::from).collect();
    let test: Vec<Sample> = dataset.test.iter().map(Sample::from).collect();
    let mut adam = AdamState::new(config.adam, &params.tensor_sizes());
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xD0D0_D0D0);
    let steps_per_epoch = dataset.train.len().div_ceil(config.batch_size);
    let total_steps = (steps_per_epoch * config.epochs).max(1);
    let mut log = TrainLog::default();
    let start = Instant::now();

    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..dataset.train.len()).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
        shuffle_rng.set_stream(epoch as u64);
        order.shuffle(&mut shuffle_rng);

        let mut loss_sum = 0.0;
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&Sentence> = chunk.iter().map(|&i| &dataset.train[i]).collect();
            let lg = loss_batch(config, &params, &batch, &mut dropout_rng)?;
            if !lg.loss.is_finite() {
                return Err(Error::Diverged { epoch, step });
            }
            loss_sum += lg.loss * batch.len() as f64;
            let global = adam.step as usize;
            let lr = if config.cosine_lr {
                0.5 * config.adam.lr * (1.0 + (std::f64::consts::PI * global as f64 / total_steps as f64).cos())
            } else {
                config.adam.lr
            };
            apply_adam(&mut adam, &mut params, &lg.grad, lr).map_err(|e| match e {
                Error::NonFiniteGradient { .. } => Error::Diverged { epoch, step },
                other => other,
            })?;
        }

        let (val_acc, test_acc) = {
            let mut eval_cfg = config.model.clone();
            eval_cfg.dropout = 0.0;
            let engine = CountEngine::new(&eval_cfg, &params)?;
            (evaluate_with(&engine, &val), evaluate_with(&engine, &test))
        };
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / dataset.train.len().max(1) as f64,
            val: val_acc,
            test: test_acc,
            wall_secs: start.elapsed().as_secs_f64(),
        };
        observer.on_epoch(&record, &params, epoch == config.epochs)?;
        log.epochs.push(record);
    }
    Ok(TrainOutcome { params, log })
}

fn apply_adam(adam: &mut AdamState, params: &mut ModelParams, grad: &ModelParams, lr: f64) -> Result<()> {
    let mut grads: Vec<(String, Vec<f64>)> = Vec::new();
    grad.for_each(|n, m| grads.push((n.to_string(), m.as_slice().to_vec())));
    let named: Vec<(&str, &[f64])> = grads.iter().map(|(n, g)| (n.as_str(), g.as_slice())).collect();
    adam.begin_step(&named)?;
    let mut k = 0;
    params.for_each_mut(|_, m| {
        adam.update(k, m.as_mut_slice(), &grads[k].1, lr);
        k += 1;
    });
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{CountTriple, Interval};

    fn tiny_dataset(seed: u64) -> Dataset {
        Dataset::generate_with(seed, |mut s| {
            s.count = 64;
            s.n01 = Interval::new(s.n01.lo / 10, s.n01.hi / 10);
            s.n2 = Interval::new(0, s.n2.hi / 10);
            s
        })
        .unwrap()
    }

    #[test]
    fn metrics_csv_header() {
        let log = TrainLog {
            epochs: vec![EpochRecord {
                epoch: 1,
                train_loss: 0.5,
                val: Accuracy::default(),
                test: Accuracy {
                    main: 1.0,
                    syntactic: 0.5,
                    joint: 0.5,
                },
                wall_secs: 3.0,
            }],
        };
        let csv = log.to_csv().unwrap();
        assert_eq!(
            csv,
            "epoch,loss,acc_main_val,acc_main_test,acc_syn_test,acc_joint_test\n1,0.5,0,1,0.5,0.5\n"
        );
    }

    #[test]
    fn same_seed_same_log() {
        let ds = tiny_dataset(1);
        let mut cfg = TrainConfig::new(ModelConfig::new(8, 4), 3);
        cfg.epochs = 3;
        let a = train(&cfg, &ds, &mut NoCheckpoints).unwrap();
        let b = train(&cfg, &ds, &mut NoCheckpoints).unwrap();
        assert_eq!(a.log.to_csv().unwrap(), b.log.to_csv().unwrap());
        assert_eq!(a.params, b.params);
        assert_eq!(a.log.epochs.len(), 3);
    }

    #[test]
    fn fast_path_with_dropout_is_rejected() {
        let ds = tiny_dataset(1);
        let mut cfg = TrainConfig::new(ModelConfig::new(8, 4), 3);
        cfg.model.dropout = 0.1;
        assert!(matches!(train(&cfg, &ds, &mut NoCheckpoints), Err(Error::Config(_))));
        cfg.path = TrainPath::FullReference;
        cfg.epochs = 1;
        train(&cfg, &ds, &mut NoCheckpoints).unwrap();
    }

    #[test]
    fn divergence_is_reported() {
        let ds = tiny_dataset(2);
        let mut cfg = TrainConfig::new(ModelConfig::new(4, 2), 0);
        cfg.epochs = 2;
        let mut params = init_for(&cfg).unwrap();
        params.out_w.set(0, 0, f64::NAN);
        let mut snaps = InMemoryCheckpoints::default();
        let err = train_from(&cfg, params, &ds, &mut snaps).unwrap_err();
        assert!(matches!(err, Error::Diverged { epoch: 1, step: 0 }));
        assert!(snaps.snapshots.is_empty());
    }

    #[test]
    fn ablated_model_predicts_majority_class() {
        let cfg = ModelConfig::new(4, 2);
        let mut p = ModelParams::zeros(&cfg);
        p.out_b.set(0, Token::Five.id(), 1.0);
        let samples: Vec<Sample> = (0..40).map(|i| Sample::new(CountTriple::new(i % 7, i % 5, 0))).collect();
        let acc = evaluate(&cfg, &p, &samples).unwrap();
        let fives = samples.iter().filter(|s| s.answer == Token::Five).count() as f64 / 40.0;
        assert_eq!(acc.main, fives);
        assert_eq!(acc.syntactic, 0.0);
    }
}
