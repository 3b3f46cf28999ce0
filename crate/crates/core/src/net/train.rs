//! Mini-batch ADAM training with best-validation model selection.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamConfig, AdamState};
use super::arch::{ArchitectureSpec, NetworkParams};
use super::conv::{batch_loss, batch_objective, Sample};
use super::data::{augment, NormalizedSubject, PatchSet, PATCH_SIZE, PATCH_STRIDE};
use super::mlp::MlpParams;
use super::{Gradients, Parameters, TargetKind};
use crate::error::{Error, Result};

/// Learning rate `lr` applies up to and including `until_epoch` (1-based).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrPhase {
    pub until_epoch: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr_schedule: Vec<LrPhase>,
    pub adam: AdamConfig,
    pub batch_size: usize,
    /// Batch size of the per-voxel baseline.
    pub mlp_batch_size: usize,
    pub patch_size: usize,
    pub patch_stride: usize,
    pub augment: bool,
    pub seed: u64,
    pub target: TargetKind,
    pub width: usize,
    pub depth: usize,
    pub include_b0: bool,
    /// Slices used for training and validation; `None` means all.
    pub slices: Option<Vec<usize>>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            lr_schedule: vec![
                LrPhase {
                    until_epoch: 80,
                    lr: 2e-4,
                },
                LrPhase {
                    until_epoch: 100,
                    lr: 1e-4,
                },
            ],
            adam: AdamConfig::default(),
            batch_size: 16,
            mlp_batch_size: 128,
            patch_size: PATCH_SIZE,
            patch_stride: PATCH_STRIDE,
            augment: true,
            seed: 0,
            target: TargetKind::Fa,
            width: 64,
            depth: 10,
            include_b0: true,
            slices: None,
        }
    }
}

impl TrainConfig {
    /// Learning rate of a 1-based epoch; the last phase extends indefinitely.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr_schedule
            .iter()
            .find(|p| epoch <= p.until_epoch)
            .or(self.lr_schedule.last())
            .map_or(0.0, |p| p.lr)
    }

    /// Multiply every phase's learning rate by `factor`.
    pub fn scale_lr(&mut self, factor: f64) {
        self.lr_schedule.iter_mut().for_each(|p| p.lr *= factor);
    }

    /// Keep the schedule's shape (80% then 20%) over a different epoch count.
    pub fn with_epochs(mut self, epochs: usize) -> Self {
        let first = ((epochs as f64) * 0.8).round().max(1.0) as usize;
        if self.lr_schedule.len() == 2 {
            self.lr_schedule[0].until_epoch = first.min(epochs);
            self.lr_schedule[1].until_epoch = epochs;
        }
        self.epochs = epochs;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be ≥ 1".into()));
        }
        if self.lr_schedule.is_empty() || self.lr_schedule.iter().any(|p| !(p.lr > 0.0 && p.lr.is_finite())) {
            return Err(Error::InvalidArgument("learning-rate schedule must be non-empty and positive".into()));
        }
        if self.batch_size == 0 || self.mlp_batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        if self.patch_stride == 0 || self.patch_stride > self.patch_size {
            return Err(Error::InvalidArgument("patch stride must lie in 1..=patch size".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Model {
    Cnn(NetworkParams),
    Mlp(MlpParams),
}

impl Model {
    pub fn method(&self) -> &'static str {
        match self {
            Model::Cnn(_) => "cnn",
            Model::Mlp(_) => "mlp",
        }
    }
}

/// Parameters plus everything needed to run them on a new subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub model: Model,
    pub kind: TargetKind,
    pub include_b0: bool,
    /// Number of weighted DWIs expected at the input.
    pub n_weighted: usize,
    /// Multiplier turning network output back into physical units.
    pub target_divisor: f64,
    pub patch_size: usize,
    pub patch_stride: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub model: TrainedModel,
    pub curve: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    /// Losses of the initial parameters, before any update.
    pub initial_train_loss: f64,
    pub initial_val_loss: f64,
}

impl TrainReport {
    pub fn best_val_loss(&self) -> f64 {
        self.curve[self.best_epoch - 1].val_loss
    }

    pub fn final_train_loss(&self) -> f64 {
        self.curve.last().map_or(f64::NAN, |r| r.train_loss)
    }

    /// `epoch,train_loss,val_loss` with a header row.
    pub fn curve_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss\n");
        for r in &self.curve {
            s.push_str(&format!("{},{:e},{:e}\n", r.epoch, r.train_loss, r.val_loss));
        }
        s
    }
}

/// Train/validation subject indices for a 4:1 split: the last ⌈n/5⌉
/// subjects validate.
pub fn split_subjects(n: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("need ≥ 2 subjects for a train/validation split, got {n}")));
    }
    let n_val = n.div_ceil(5);
    Ok(((0..n - n_val).collect(), (n - n_val..n).collect()))
}

struct Outcome<M> {
    params: M,
    curve: Vec<EpochRecord>,
    best_epoch: usize,
    initial_train: f64,
    initial_val: f64,
}

fn non_finite(what: &str, epoch: usize) -> Error {
    Error::Numerical(format!("{what} became non-finite in epoch {epoch}; lower the learning rate"))
}

/// Shared optimization loop. `objective` evaluates a mini-batch of training
/// indices (without weight decay, which ADAM adds).
fn optimize<M, O, T, V>(init: M, n_train: usize, batch_size: usize, cfg: &TrainConfig, objective: O, train_loss: T, val_loss: V) -> Result<Outcome<M>>
where
    M: Parameters + Clone,
    O: Fn(&M, &[usize]) -> Result<(f64, Gradients)>,
    T: Fn(&M) -> Result<f64>,
    V: Fn(&M) -> Result<f64>,
{
    cfg.validate()?;
    if n_train == 0 {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let mut params = init;
    let initial_train = train_loss(&params)?;
    let initial_val = val_loss(&params)?;
    if !initial_train.is_finite() || !initial_val.is_finite() {
        return Err(non_finite("initial loss", 0));
    }
    let mut state = AdamState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7a11_5eed);
    let mut order: Vec<usize> = (0..n_train).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut best = (f64::INFINITY, 0usize, params.clone());
    for epoch in 1..=cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(batch_size) {
            let (l, g) = objective(&params, chunk)?;
            if !l.is_finite() || !g.is_finite() {
                return Err(non_finite("training loss", epoch));
            }
            sum += l * chunk.len() as f64;
            adam_step(&mut params, &g, &mut state, lr, &cfg.adam)?;
        }
        let val = val_loss(&params)?;
        if !val.is_finite() {
            return Err(non_finite("validation loss", epoch));
        }
        curve.push(EpochRecord {
            epoch,
            train_loss: sum / n_train as f64,
            val_loss: val,
        });
        if val < best.0 {
            best = (val, epoch, params.clone());
        }
    }
    Ok(Outcome {
        params: best.2,
        curve,
        best_epoch: best.1,
        initial_train,
        initial_val,
    })
}

/// Bring every subject's target onto one divisor (the largest among the
/// training subjects) so a single stored value de-normalizes predictions.
fn harmonize(train: &[NormalizedSubject], val: &[NormalizedSubject]) -> Result<(Vec<NormalizedSubject>, Vec<NormalizedSubject>, f64)> {
    let d = train.iter().map(|s| s.target_divisor).fold(0.0, f64::max);
    let fix = |v: &[NormalizedSubject]| -> Result<Vec<NormalizedSubject>> {
        v.iter()
            .map(|s| {
                let mut s = s.clone();
                s.rescale_target(d)?;
                Ok(s)
            })
            .collect()
    };
    Ok((fix(train)?, fix(val)?, d))
}

fn check_subjects(train: &[NormalizedSubject], val: &[NormalizedSubject], cfg: &TrainConfig) -> Result<(usize, Vec<usize>)> {
    let first = train
        .first()
        .ok_or_else(|| Error::InvalidArgument("no training subjects".into()))?;
    if val.is_empty() {
        return Err(Error::InvalidArgument("no validation subjects".into()));
    }
    for s in train.iter().chain(val) {
        if s.kind != cfg.target || s.in_channels != first.in_channels || s.target.is_none() {
            return Err(Error::InvalidArgument("subjects must share target kind and channel layout, with targets".into()));
        }
    }
    let nz = train.iter().chain(val).map(|s| s.dims.nz).min().expect("non-empty");
    let slices = cfg.slices.clone().unwrap_or_else(|| (0..nz).collect());
    if slices.is_empty() || slices.iter().any(|&z| z >= nz) {
        return Err(Error::InvalidArgument(format!("training slices must lie in 0..{nz}")));
    }
    let n_weighted = first.in_channels - cfg.include_b0 as usize;
    Ok((n_weighted, slices))
}

/// Train the residual encoder-decoder on patches of `train`, selecting the
/// epoch with the lowest loss on patches of `val`.
pub fn train_cnn(train: &[NormalizedSubject], val: &[NormalizedSubject], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let (n_weighted, slices) = check_subjects(train, val, cfg)?;
    let (train, val, divisor) = harmonize(train, val)?;
    let mut tset = PatchSet::from_subjects(&train, &slices, cfg.patch_size, cfg.patch_stride)?;
    if cfg.augment {
        tset = augment(&tset);
    }
    let vset = PatchSet::from_subjects(&val, &slices, cfg.patch_size, cfg.patch_stride)?;
    let arch = ArchitectureSpec::encoder_decoder(tset.in_channels, cfg.target.channels(), cfg.width, cfg.depth)?;
    let init = NetworkParams::init(&arch, cfg.seed);
    let tall: Vec<Sample<'_>> = (0..tset.len()).map(|i| tset.sample(i)).collect();
    let vall: Vec<Sample<'_>> = (0..vset.len()).map(|i| vset.sample(i)).collect();
    let out = optimize(
        init,
        tset.len(),
        cfg.batch_size,
        cfg,
        |p, idx| {
            let batch: Vec<Sample<'_>> = idx.iter().map(|&i| tall[i]).collect();
            batch_objective(p, &batch, 0.0)
        },
        |p| batch_loss(p, &tall),
        |p| batch_loss(p, &vall),
    )?;
    Ok(TrainReport {
        model: TrainedModel {
            model: Model::Cnn(out.params),
            kind: cfg.target,
            include_b0: cfg.include_b0,
            n_weighted,
            target_divisor: divisor,
            patch_size: cfg.patch_size,
            patch_stride: cfg.patch_stride,
        },
        curve: out.curve,
        best_epoch: out.best_epoch,
        initial_train_loss: out.initial_train,
        initial_val_loss: out.initial_val,
    })
}

/// Row-major per-voxel features and targets from foreground voxels of the
/// given slices.
pub fn voxel_samples(subjects: &[NormalizedSubject], slices: &[usize]) -> (Vec<f64>, Vec<f64>, usize) {
    let (mut x, mut y, mut n) = (Vec::new(), Vec::new(), 0);
    for s in subjects {
        let len = s.dims.len();
        let co = s.kind.channels();
        let target = s.target.as_ref();
        for &z in slices {
            for idx in z * s.dims.slice_len()..(z + 1) * s.dims.slice_len() {
                if !s.mask[idx] {
                    continue;
                }
                x.extend((0..s.in_channels).map(|c| s.input[c * len + idx]));
                if let Some(t) = target {
                    y.extend((0..co).map(|c| t[c * len + idx]));
                }
                n += 1;
            }
        }
    }
    (x, y, n)
}

/// Train the per-voxel dense baseline on foreground voxels.
pub fn train_mlp(train: &[NormalizedSubject], val: &[NormalizedSubject], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let (n_weighted, slices) = check_subjects(train, val, cfg)?;
    let (train, val, divisor) = harmonize(train, val)?;
    let (tx, ty, tn) = voxel_samples(&train, &slices);
    let (vx, vy, vn) = voxel_samples(&val, &slices);
    if vn == 0 {
        return Err(Error::InvalidArgument("validation subjects have no foreground voxels".into()));
    }
    let (ci, co) = (train[0].in_channels, cfg.target.channels());
    let init = MlpParams::baseline(ci, co, cfg.seed)?;
    let out = optimize(
        init,
        tn,
        cfg.mlp_batch_size,
        cfg,
        |p, idx| {
            let bx: Vec<f64> = idx.iter().flat_map(|&i| tx[i * ci..(i + 1) * ci].iter().copied()).collect();
            let by: Vec<f64> = idx.iter().flat_map(|&i| ty[i * co..(i + 1) * co].iter().copied()).collect();
            p.objective(&bx, &by, idx.len(), 0.0)
        },
        |p| Ok(p.objective(&tx, &ty, tn, 0.0)?.0),
        |p| Ok(p.objective(&vx, &vy, vn, 0.0)?.0),
    )?;
    Ok(TrainReport {
        model: TrainedModel {
            model: Model::Mlp(out.params),
            kind: cfg.target,
            include_b0: cfg.include_b0,
            n_weighted,
            target_divisor: divisor,
            patch_size: cfg.patch_size,
            patch_stride: cfg.patch_stride,
        },
        curve: out.curve,
        best_epoch: out.best_epoch,
        initial_train_loss: out.initial_train,
        initial_val_loss: out.initial_val,
    })
}
