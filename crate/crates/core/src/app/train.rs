use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use super::{create_dir, resolve_out_dir, OutputLock};
use crate::checkpoint::Checkpoint;
use crate::config::{ClassBalance, RunConfig};
use crate::data::{augment, class_pixel_distribution, load_dataset, Sample};
use crate::decoder::SegModel;
use crate::error::{Error, Result};
use crate::loss::{class_balanced_weights, inverse_frequency_weights, segmentation_loss, LossConfig};
use crate::optim::{adamw_step, AdamWHyper, AdamWState, PolySchedule};
use crate::tensor::Rng;

/// Rng stream tag for the per-epoch sample order.
const ORDER_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub iter: u64,
    pub lr: f64,
    pub main_loss: f64,
    pub aux_loss: Option<f64>,
    pub wall_ms: f64,
}

impl StepLog {
    pub const CSV_HEADER: &'static str = "iter,lr,main_loss,aux_loss,wall_ms";

    pub fn csv_row(&self) -> String {
        let aux = self.aux_loss.map(|a| format!("{a:.6}")).unwrap_or_default();
        format!("{},{:e},{:.6},{aux},{:.1}", self.iter, self.lr, self.main_loss, self.wall_ms)
    }
}

/// Model, optimizer state and loss setup for one run.
///
/// Every random choice of step `i` (sample order, augmentation) is drawn
/// from streams derived from `(seed, i)`, so resuming at `i` reproduces an
/// uninterrupted run exactly.
#[derive(Debug)]
pub struct Trainer {
    pub cfg: RunConfig,
    pub model: SegModel<f32>,
    pub state: AdamWState<f32>,
    pub loss: LossConfig,
    pub iteration: u64,
    hyper: AdamWHyper,
    schedule: PolySchedule,
}

impl Trainer {
    pub fn new(cfg: &RunConfig, train: &[Sample]) -> Result<Self> {
        cfg.validate()?;
        let model = SegModel::new(&cfg.model_config()?, cfg.seed)?;
        Self::assemble(cfg, model, None, 0, train)
    }

    /// Continue from `ck`: parameters, optimizer state and iteration.
    pub fn resume(cfg: &RunConfig, ck: Checkpoint, train: &[Sample]) -> Result<Self> {
        cfg.validate()?;
        Self::check_compatible(cfg, &ck)?;
        if ck.seed != cfg.seed {
            return Err(Error::Checkpoint(format!(
                "checkpoint was trained with seed {}, config says {}",
                ck.seed, cfg.seed
            )));
        }
        let model = ck.build_model()?;
        Self::assemble(cfg, model, ck.optimizer, ck.iteration, train)
    }

    /// Start a fresh schedule from the weights of `ck`.
    pub fn fine_tune(cfg: &RunConfig, ck: &Checkpoint, train: &[Sample]) -> Result<Self> {
        cfg.validate()?;
        Self::check_compatible(cfg, ck)?;
        let model = ck.build_model()?;
        Self::assemble(cfg, model, None, 0, train)
    }

    fn check_compatible(cfg: &RunConfig, ck: &Checkpoint) -> Result<()> {
        if ck.model != cfg.model_config()? {
            return Err(Error::Checkpoint(format!(
                "checkpoint model ({}) differs from the configured model ({})",
                ck.model.encoder.variant_name, cfg.model.variant
            )));
        }
        Ok(())
    }

    fn assemble(
        cfg: &RunConfig,
        model: SegModel<f32>,
        state: Option<AdamWState<f32>>,
        iteration: u64,
        train: &[Sample],
    ) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Data("training split has no samples".into()));
        }
        let schedule = cfg.optim.schedule();
        if iteration > schedule.total_iters {
            return Err(Error::Checkpoint(format!(
                "checkpoint iteration {iteration} is past total_iters {}",
                schedule.total_iters
            )));
        }
        // The AdamW α is the base rate; the schedule supplies η_t = lr_t/lr0.
        // weight_decay keeps its usual per-lr meaning: λ = weight_decay · lr0.
        let mut hyper = cfg.optim.hyper();
        hyper.alpha = schedule.lr0;
        hyper.weight_decay = cfg.optim.weight_decay * schedule.lr0;

        let mut loss = cfg.loss.base();
        let counts = || class_pixel_distribution(train.iter().map(|s| &s.label)).counts;
        loss.class_weights = match cfg.loss.class_balance {
            ClassBalance::None => None,
            ClassBalance::Effective => Some(class_balanced_weights(&counts(), cfg.loss.beta)?),
            ClassBalance::Inverse => Some(inverse_frequency_weights(&counts())?),
        };

        let state = match state {
            Some(s) => {
                let sizes_match = s.m.len() == model.params.len()
                    && model.params.iter().zip(&s.m).all(|((_, p), m)| p.numel() == m.len());
                if !sizes_match {
                    return Err(Error::Checkpoint("optimizer state does not match the parameters".into()));
                }
                s
            }
            None => AdamWState::new(&model.params),
        };
        Ok(Self { cfg: cfg.clone(), model, state, loss, iteration, hyper, schedule })
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.schedule.total_iters
    }

    pub fn schedule(&self) -> &PolySchedule {
        &self.schedule
    }

    /// Sample indices of step `iter`: epochs walk a seeded permutation.
    pub fn batch_indices(&self, iter: u64, n: usize) -> Vec<usize> {
        let bs = self.cfg.train.batch_size as u64;
        let mut cached: Option<(u64, Vec<usize>)> = None;
        (0..bs)
            .map(|j| {
                let k = iter * bs + j;
                let (epoch, pos) = (k / n as u64, (k % n as u64) as usize);
                if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
                    let mut order: Vec<usize> = (0..n).collect();
                    Rng::derive(self.cfg.seed, &[ORDER_STREAM, epoch]).shuffle(&mut order);
                    cached = Some((epoch, order));
                }
                cached.as_ref().unwrap().1[pos]
            })
            .collect()
    }

    /// One optimizer step over a batch drawn from `train`.
    pub fn step(&mut self, train: &[Sample]) -> Result<StepLog> {
        if self.is_done() {
            return Err(Error::Contract("training already reached total_iters".into()));
        }
        let start = Instant::now();
        let i = self.iteration;
        let batch = self.batch_indices(i, train.len());
        let inv = 1.0 / batch.len() as f64;
        self.model.params.zero_grad();
        let (mut main, mut aux) = (0.0, None::<f64>);
        for (j, &idx) in batch.iter().enumerate() {
            let mut rng = Rng::derive(self.cfg.seed, &[i, j as u64]);
            let s = augment(&train[idx], &self.cfg.augment, &mut rng)?;
            let out = self.model.forward_full(&s.image)?;
            let l = segmentation_loss(&out, &s.label, &self.loss)?;
            l.value.scale(inv).backward()?;
            main += l.main * inv;
            if let Some(a) = l.aux {
                *aux.get_or_insert(0.0) += a * inv;
            }
        }
        let lr = self.schedule.lr_at(i);
        adamw_step(&mut self.model.params, &mut self.state, &self.hyper, self.schedule.multiplier(i))?;
        self.model.params.zero_grad();
        self.iteration += 1;
        Ok(StepLog { iter: i, lr, main_loss: main, aux_loss: aux, wall_ms: start.elapsed().as_secs_f64() * 1e3 })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            iteration: self.iteration,
            seed: self.cfg.seed,
            model: self.model.cfg.clone(),
            run: Some(self.cfg.clone()),
            params: self.model.params.clone(),
            optimizer: Some(self.state.clone()),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainArgs {
    pub config: PathBuf,
    /// Continue an interrupted run.
    pub resume: Option<PathBuf>,
    /// Initialize weights from a checkpoint and start a fresh schedule.
    pub init: Option<PathBuf>,
    pub seed: Option<u64>,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub out_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub iterations: u64,
    pub last: Option<StepLog>,
}

pub const LOG_FILE: &str = "train_log.csv";
pub const LAST_CHECKPOINT: &str = "last.ckpt";

fn periodic_name(iter: u64) -> String {
    format!("iter_{iter:06}.ckpt")
}

pub fn cmd_train(args: &TrainArgs) -> Result<TrainSummary> {
    if args.resume.is_some() && args.init.is_some() {
        return Err(Error::Config("--resume and --init are mutually exclusive".into()));
    }
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(d) = &args.data {
        cfg.data.root = d.clone();
    }
    cfg.validate()?;
    let train = load_dataset(&cfg.data.root, &cfg.data.train_split)?;
    let mut trainer = match (&args.resume, &args.init) {
        (Some(p), _) => Trainer::resume(&cfg, Checkpoint::load(p)?, &train)?,
        (_, Some(p)) => Trainer::fine_tune(&cfg, &Checkpoint::load(p)?, &train)?,
        _ => Trainer::new(&cfg, &train)?,
    };

    let out = resolve_out_dir(args.out.as_deref(), &cfg.out_dir);
    create_dir(&out)?;
    let _lock = OutputLock::acquire(&out)?;
    let snapshot = out.join("config.toml");
    std::fs::write(&snapshot, cfg.to_toml()).map_err(|e| Error::io(&snapshot, e))?;
    let mut log = open_log(&out.join(LOG_FILE), args.resume.is_some())?;

    log::info!(
        "training {} on {} samples from iteration {} to {}",
        cfg.model.variant,
        train.len(),
        trainer.iteration,
        trainer.schedule().total_iters
    );
    let mut last = None;
    while !trainer.is_done() {
        let entry = trainer.step(&train)?;
        let done = trainer.iteration;
        if entry.iter % cfg.train.log_every == 0 || trainer.is_done() {
            writeln!(log.1, "{}", entry.csv_row()).map_err(|e| Error::io(&log.0, e))?;
            log::info!(
                "iter {:>6} lr {:.3e} loss {:.4} aux {}",
                entry.iter,
                entry.lr,
                entry.main_loss,
                entry.aux_loss.map_or("-".into(), |a| format!("{a:.4}"))
            );
        }
        if cfg.train.checkpoint_every > 0 && done % cfg.train.checkpoint_every == 0 && !trainer.is_done() {
            trainer.checkpoint().save(&out.join(periodic_name(done)))?;
        }
        last = Some(entry);
    }
    log.1.flush().map_err(|e| Error::io(&log.0, e))?;
    let path = out.join(LAST_CHECKPOINT);
    trainer.checkpoint().save(&path)?;
    Ok(TrainSummary { out_dir: out, checkpoint: path, iterations: trainer.iteration, last })
}

fn open_log(path: &Path, append: bool) -> Result<(PathBuf, std::io::BufWriter<std::fs::File>)> {
    let exists = path.exists();
    let f = std::fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    if !append || !exists {
        writeln!(w, "{}", StepLog::CSV_HEADER).map_err(|e| Error::io(path, e))?;
    }
    Ok((path.to_path_buf(), w))
}
