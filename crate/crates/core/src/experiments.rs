//! Seeded phantom cohorts and end-to-end experiment recipes comparing
//! conventional fitting ("mf") with the learned models ("cnn", "mlp").

use serde::{Deserialize, Serialize};

use crate::dti::{compute_maps, DtiMaps, GradientScheme};
use crate::error::{Error, Result};
use crate::metrics::{lesion_contrast, roi_stats, score_scalar, EvalReport, SweepRow};
use crate::net::data::target_volume;
use crate::net::train::split_subjects;
use crate::net::{
    infer_map, normalize_subject, train_cnn, train_mlp, EpochRecord, NormalizedSubject, PredictedMap, TargetKind,
    TrainConfig, TrainReport, TrainedModel,
};
use crate::phantom::{
    add_rician_noise, apply_motion, generate_phantom, generate_scheme, synthesize_dwi, LesionSpec, NoiseInfo, Phantom,
    PhantomSpec, Shape, SignalScale, LABEL_ARC, LABEL_HORIZONTAL, LABEL_TISSUE, LABEL_VERTICAL,
};
use crate::volume::{DwiVolume, ScalarMap};

/// b-value of every synthetic acquisition, s/mm².
pub const B_VALUE: f64 = 1000.0;

/// Phantom grid, acquisition and noise shared by a cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortConfig {
    pub dims: [usize; 3],
    /// Weighted directions optimized for the scheme.
    pub directions: usize,
    /// Leading weighted directions kept (≤ `directions`).
    pub used_directions: usize,
    pub n_b0: usize,
    pub snr_db: f64,
    pub seed: u64,
}

impl Default for CohortConfig {
    fn default() -> Self {
        CohortConfig {
            dims: [48, 48, 16],
            directions: 6,
            used_directions: 6,
            n_b0: 1,
            snr_db: 30.0,
            seed: 1,
        }
    }
}

impl CohortConfig {
    pub fn scheme(&self) -> Result<GradientScheme> {
        let full = generate_scheme(self.directions, B_VALUE, self.n_b0, self.seed)?;
        if self.used_directions == self.directions {
            Ok(full)
        } else {
            full.first_weighted(self.used_directions)
        }
    }

    /// Seed of subject `k`; phantom geometry and noise derive from it.
    pub fn subject_seed(&self, k: usize) -> u64 {
        self.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(k as u64 + 1)
    }
}

/// One synthetic subject: ground truth plus clean and noisy acquisitions.
#[derive(Debug, Clone)]
pub struct Subject {
    pub phantom: Phantom,
    pub clean: DwiVolume,
    pub noisy: DwiVolume,
    pub noise: NoiseInfo,
}

impl Subject {
    pub fn from_spec(spec: &PhantomSpec, scheme: &GradientScheme, snr_db: f64, noise_seed: u64) -> Result<Self> {
        let phantom = generate_phantom(spec)?;
        let clean = synthesize_dwi(&phantom.field, scheme, SignalScale::FromField)?;
        let (noisy, noise) = add_rician_noise(&clean, scheme, snr_db, noise_seed)?;
        Ok(Subject {
            phantom,
            clean,
            noisy,
            noise,
        })
    }

    pub fn target(&self, kind: TargetKind) -> Vec<f64> {
        target_volume(kind, &self.phantom.fa, &self.phantom.md, &self.phantom.color)
    }

    /// Ground-truth map of a scalar target.
    pub fn reference(&self, kind: TargetKind) -> &ScalarMap {
        match kind {
            TargetKind::Md => &self.phantom.md,
            _ => &self.phantom.fa,
        }
    }

    pub fn normalized(&self, scheme: &GradientScheme, kind: TargetKind, include_b0: bool) -> Result<NormalizedSubject> {
        normalize_subject(&self.noisy, scheme, include_b0, kind, Some(self.target(kind)))
    }
}

fn noise_seed(subject_seed: u64) -> u64 {
    subject_seed ^ 0x4e01_5e
}

/// Subject `k` of a cohort (independent of how many are generated).
pub fn cohort_subject(cfg: &CohortConfig, scheme: &GradientScheme, k: usize) -> Result<Subject> {
    let s = cfg.subject_seed(k);
    Subject::from_spec(&PhantomSpec::subject(cfg.dims, s), scheme, cfg.snr_db, noise_seed(s))
}

pub fn cohort(cfg: &CohortConfig, scheme: &GradientScheme, n: usize) -> Result<Vec<Subject>> {
    (0..n).map(|k| cohort_subject(cfg, scheme, k)).collect()
}

/// Conventional tensor fit of a DWI set.
pub fn mf_maps(dwi: &DwiVolume, scheme: &GradientScheme) -> Result<DtiMaps> {
    compute_maps(dwi, scheme)
}

/// Scalar prediction of a model on a DWI set.
pub fn predict_scalar(model: &TrainedModel, dwi: &DwiVolume, scheme: &GradientScheme) -> Result<ScalarMap> {
    match infer_map(model, dwi, scheme)? {
        PredictedMap::Scalar(m) => Ok(m),
        PredictedMap::Color(_) => Err(Error::InvalidArgument("model predicts a colour map".into())),
    }
}

/// Evaluation mask: ground-truth foreground (every labelled voxel).
pub fn eval_mask(subject: &Subject) -> Vec<bool> {
    subject.phantom.mask()
}

/// Four slices spread evenly through the volume (bundle and non-bundle
/// slices alike).
pub fn spread_slices(nz: usize, count: usize) -> Vec<usize> {
    let count = count.clamp(1, nz.max(1));
    let mut v: Vec<usize> = (0..count).map(|k| (2 * k + 1) * nz / (2 * count)).collect();
    v.dedup();
    v
}

/// Epochs of the desk-scale schedule (80% at the first rate, 20% at half).
pub const DESK_EPOCHS: usize = 40;
/// Learning-rate multiplier compensating for the short schedule.
pub const DESK_LR_SCALE: f64 = 3.0;
pub const DESK_WIDTH: usize = 16;
pub const DESK_BATCH: usize = 4;
/// Training slices per subject.
pub const DESK_SLICES: usize = 4;
/// Training plus validation subjects (4:1 split).
pub const DESK_SUBJECTS: usize = 5;

/// Training settings sized for a single CPU core: width-16 network, four
/// spread slices per subject, batch 4, augmentation on, 40 epochs at 3× the
/// default rates.
pub fn desk_train_config(kind: TargetKind, seed: u64, nz: usize) -> TrainConfig {
    let mut cfg = TrainConfig {
        target: kind,
        seed,
        width: DESK_WIDTH,
        batch_size: DESK_BATCH,
        augment: true,
        slices: Some(spread_slices(nz, DESK_SLICES)),
        ..TrainConfig::default()
    }
    .with_epochs(DESK_EPOCHS);
    cfg.scale_lr(DESK_LR_SCALE);
    cfg
}

/// Cohort, split and training settings of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub cohort: CohortConfig,
    /// Training plus validation subjects; subject index `subjects` is the
    /// held-out test subject.
    pub subjects: usize,
    pub train: TrainConfig,
    /// Also train the per-voxel baseline.
    pub mlp: bool,
}

impl ExperimentConfig {
    pub fn desk(kind: TargetKind, seed: u64) -> Self {
        let cohort = CohortConfig {
            seed,
            ..CohortConfig::default()
        };
        let train = desk_train_config(kind, seed, cohort.dims[2]);
        ExperimentConfig {
            cohort,
            subjects: DESK_SUBJECTS,
            train,
            mlp: true,
        }
    }

    /// Same rates over a different number of epochs.
    pub fn with_epochs(mut self, epochs: usize) -> Self {
        self.train = self.train.with_epochs(epochs);
        self
    }

    /// Weighted DWIs fed to the models.
    pub fn n_dwi(&self) -> usize {
        self.cohort.used_directions
    }

    fn test_subject(&self, scheme: &GradientScheme) -> Result<Subject> {
        cohort_subject(&self.cohort, scheme, self.subjects)
    }
}

/// Trained models of one experiment.
#[derive(Debug, Clone)]
pub struct Trained {
    pub cnn: TrainReport,
    pub mlp: Option<TrainReport>,
}

/// Train on subjects `0..cfg.subjects` with a 4:1 subject split.
pub fn train_models(cfg: &ExperimentConfig, scheme: &GradientScheme, subjects: &[Subject]) -> Result<Trained> {
    let kind = cfg.train.target;
    let norm = subjects[..cfg.subjects]
        .iter()
        .map(|s| s.normalized(scheme, kind, cfg.train.include_b0))
        .collect::<Result<Vec<_>>>()?;
    let (tr, va) = split_subjects(cfg.subjects)?;
    let (train, val) = (&norm[..tr.len()], &norm[tr.len()..tr.len() + va.len()]);
    let cnn = train_cnn(train, val, &cfg.train)?;
    let mlp = if cfg.mlp { Some(train_mlp(train, val, &cfg.train)?) } else { None };
    Ok(Trained { cnn, mlp })
}

/// Scores and per-region statistics of a scalar map against ground truth.
pub fn evaluate(method: &str, kind: TargetKind, pred: &ScalarMap, subject: &Subject, n_dwi: usize, seed: u64) -> Result<EvalReport> {
    let reference = subject.reference(kind);
    let mask = eval_mask(subject);
    let scores = score_scalar(pred, reference, &mask)?;
    let wanted = [LABEL_TISSUE, LABEL_ARC, LABEL_VERTICAL, LABEL_HORIZONTAL];
    let (rois, _) = roi_stats(&pred.data, &subject.phantom.labels, &reference.data, &wanted)?;
    Ok(EvalReport {
        method: method.into(),
        map: kind.name().into(),
        n_dwi,
        seed,
        scores,
        rois,
        lesion_contrast: None,
    })
}

fn mf_scalar(dwi: &DwiVolume, scheme: &GradientScheme, kind: TargetKind) -> Result<ScalarMap> {
    let maps = mf_maps(dwi, scheme)?;
    Ok(match kind {
        TargetKind::Md => maps.md,
        _ => maps.fa,
    })
}

/// Held-out comparison of "mf", "cnn" and "mlp" on one scalar map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub recipe: String,
    pub target: TargetKind,
    pub seed: u64,
    pub snr_db: f64,
    pub n_dwi: usize,
    /// "mf" is absent when the scheme cannot determine a tensor.
    pub evals: Vec<EvalReport>,
    pub cnn_curve: Vec<EpochRecord>,
    pub cnn_initial_train_loss: f64,
    pub cnn_initial_val_loss: f64,
    pub cnn_best_epoch: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mlp_curve: Option<Vec<EpochRecord>>,
}

impl ComparisonReport {
    pub fn eval(&self, method: &str) -> Option<&EvalReport> {
        self.evals.iter().find(|e| e.method == method)
    }

    /// NMSE of a method, NaN if it was not evaluated.
    pub fn nmse(&self, method: &str) -> f64 {
        self.eval(method).map_or(f64::NAN, |e| e.scores.nmse)
    }
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub report: ComparisonReport,
    pub models: Trained,
}

/// Train on the cohort and compare every method on the held-out subject's
/// noisy acquisition against its noiseless ground truth.
pub fn compare_methods(cfg: &ExperimentConfig, recipe: &str) -> Result<Comparison> {
    let kind = cfg.train.target;
    if kind == TargetKind::Colormap {
        return Err(Error::InvalidArgument("comparisons cover scalar maps (fa, md)".into()));
    }
    let scheme = cfg.cohort.scheme()?;
    let subjects = cohort(&cfg.cohort, &scheme, cfg.subjects + 1)?;
    let models = train_models(cfg, &scheme, &subjects)?;
    let test = &subjects[cfg.subjects];
    let seed = cfg.cohort.seed;
    let mut evals = Vec::new();
    if scheme.weighted_count() >= 6 {
        evals.push(evaluate("mf", kind, &mf_scalar(&test.noisy, &scheme, kind)?, test, cfg.n_dwi(), seed)?);
    }
    let cnn = predict_scalar(&models.cnn.model, &test.noisy, &scheme)?;
    evals.push(evaluate("cnn", kind, &cnn, test, cfg.n_dwi(), seed)?);
    if let Some(m) = &models.mlp {
        let p = predict_scalar(&m.model, &test.noisy, &scheme)?;
        evals.push(evaluate("mlp", kind, &p, test, cfg.n_dwi(), seed)?);
    }
    let report = ComparisonReport {
        recipe: recipe.into(),
        target: kind,
        seed,
        snr_db: cfg.cohort.snr_db,
        n_dwi: cfg.n_dwi(),
        evals,
        cnn_curve: models.cnn.curve.clone(),
        cnn_initial_train_loss: models.cnn.initial_train_loss,
        cnn_initial_val_loss: models.cnn.initial_val_loss,
        cnn_best_epoch: models.cnn.best_epoch,
        mlp_curve: models.mlp.as_ref().map(|m| m.curve.clone()),
    };
    Ok(Comparison { report, models })
}

/// FA of 6 noisy DWIs: learned models against conventional fitting.
pub fn noise_recipe(cfg: &ExperimentConfig) -> Result<Comparison> {
    let mut cfg = cfg.clone();
    cfg.train.target = TargetKind::Fa;
    compare_methods(&cfg, "noise")
}

/// In-plane shift in pixels (x, y) applied to the corrupted volume.
pub const MOTION_SHIFT_PX: [f64; 2] = [1.0, 0.0];
pub const MOTION_ROTATION_DEG: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionReport {
    pub seed: u64,
    pub shift_px: [f64; 2],
    pub rotation_deg: f64,
    /// Index of the moved volume in the acquisition.
    pub corrupted_volume: usize,
    pub cnn_clean: EvalReport,
    pub cnn_motion: EvalReport,
    pub mf_clean: EvalReport,
    pub mf_motion: EvalReport,
}

impl MotionReport {
    /// NMSE with motion over NMSE without.
    pub fn cnn_degradation(&self) -> f64 {
        self.cnn_motion.scores.nmse / self.cnn_clean.scores.nmse
    }
}

/// Move the first weighted DWI of the held-out subject and score the FA of
/// a trained model and of conventional fitting, with and without motion.
pub fn motion_recipe(model: &TrainedModel, cfg: &ExperimentConfig) -> Result<MotionReport> {
    let scheme = cfg.cohort.scheme()?;
    let test = cfg.test_subject(&scheme)?;
    let v = scheme.weighted_indices()[0];
    let moved = apply_motion(&test.noisy, &scheme, &[v], MOTION_SHIFT_PX, MOTION_ROTATION_DEG)?;
    let (n, seed, fa) = (cfg.n_dwi(), cfg.cohort.seed, TargetKind::Fa);
    Ok(MotionReport {
        seed,
        shift_px: MOTION_SHIFT_PX,
        rotation_deg: MOTION_ROTATION_DEG,
        corrupted_volume: v,
        cnn_clean: evaluate("cnn", fa, &predict_scalar(model, &test.noisy, &scheme)?, &test, n, seed)?,
        cnn_motion: evaluate("cnn", fa, &predict_scalar(model, &moved, &scheme)?, &test, n, seed)?,
        mf_clean: evaluate("mf", fa, &mf_scalar(&test.noisy, &scheme, fa)?, &test, n, seed)?,
        mf_motion: evaluate("mf", fa, &mf_scalar(&moved, &scheme, fa)?, &test, n, seed)?,
    })
}

/// FA reduction inside the lesion, as a fraction of the original FA.
pub const LESION_FACTOR: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LesionReport {
    pub seed: u64,
    pub factor: f64,
    pub lesion_voxels: usize,
    pub background_voxels: usize,
    /// Contrasts (lesion − background) / background; background is the rest
    /// of the host bundle.
    pub reference_contrast: f64,
    pub cnn_contrast: f64,
    pub mf_contrast: f64,
}

impl LesionReport {
    /// |cnn − reference| / |reference|.
    pub fn cnn_relative_error(&self) -> f64 {
        (self.cnn_contrast - self.reference_contrast).abs() / self.reference_contrast.abs()
    }
}

/// Spherical lesion centred on the arc bundle at mid angle, as wide as the
/// bundle.
pub fn arc_lesion(spec: &PhantomSpec, factor: f64) -> Result<LesionSpec> {
    match spec.region(LABEL_ARC).map(|r| &r.shape) {
        Some(&Shape::Arc {
            center,
            radius,
            half_width,
            angle_start,
            angle_end,
            ..
        }) => {
            let t = 0.5 * (angle_start + angle_end);
            Ok(LesionSpec {
                region: LABEL_ARC,
                shape: Shape::Sphere {
                    center: [center[0] + radius * t.cos(), center[1] + radius * t.sin(), center[2]],
                    radius: half_width,
                },
                factor,
            })
        }
        _ => Err(Error::InvalidArgument("phantom has no arc bundle to host a lesion".into())),
    }
}

/// Infer with a model trained on lesion-free subjects on a lesioned copy of
/// the held-out subject.
pub fn lesion_recipe(model: &TrainedModel, cfg: &ExperimentConfig) -> Result<LesionReport> {
    let scheme = cfg.cohort.scheme()?;
    let s = cfg.cohort.subject_seed(cfg.subjects);
    let mut spec = PhantomSpec::subject(cfg.cohort.dims, s);
    let lesion = arc_lesion(&spec, LESION_FACTOR)?;
    spec.lesions.push(lesion.clone());
    let subject = Subject::from_spec(&spec, &scheme, cfg.cohort.snr_db, noise_seed(s))?;
    let dims = subject.phantom.dims();
    let in_lesion: Vec<bool> = (0..dims.len())
        .map(|i| {
            let (x, y, z) = dims.coords(i);
            subject.phantom.labels[i] == LABEL_ARC && lesion.shape.contains([x as f64, y as f64, z as f64])
        })
        .collect();
    let background: Vec<bool> = (0..dims.len())
        .map(|i| subject.phantom.labels[i] == LABEL_ARC && !in_lesion[i])
        .collect();
    let contrast = |fa: &[f64]| lesion_contrast(fa, &in_lesion, &background);
    let cnn = predict_scalar(model, &subject.noisy, &scheme)?;
    let mf = mf_scalar(&subject.noisy, &scheme, TargetKind::Fa)?;
    Ok(LesionReport {
        seed: cfg.cohort.seed,
        factor: LESION_FACTOR,
        lesion_voxels: in_lesion.iter().filter(|&&b| b).count(),
        background_voxels: background.iter().filter(|&&b| b).count(),
        reference_contrast: contrast(&subject.phantom.fa.data)?,
        cnn_contrast: contrast(&cnn.data)?,
        mf_contrast: contrast(&mf.data)?,
    })
}

/// Training-set sizes of the default sweep, in subjects.
pub const SWEEP_SIZES: [usize; 3] = [4, 2, 1];

/// FA scores of the network trained on the first `size` subjects, for each
/// size. Validation and test subjects are fixed across sizes (indices
/// max(size) and max(size)+1).
pub fn training_size_sweep(cfg: &ExperimentConfig, sizes: &[usize]) -> Result<Vec<SweepRow>> {
    let max = sizes.iter().copied().max().filter(|&m| m > 0).ok_or_else(|| {
        Error::InvalidArgument("sweep needs at least one positive training size".into())
    })?;
    let scheme = cfg.cohort.scheme()?;
    let subjects = cohort(&cfg.cohort, &scheme, max + 2)?;
    let kind = TargetKind::Fa;
    let mut train_cfg = cfg.train.clone();
    train_cfg.target = kind;
    let norm = subjects[..=max]
        .iter()
        .map(|s| s.normalized(&scheme, kind, train_cfg.include_b0))
        .collect::<Result<Vec<_>>>()?;
    let test = &subjects[max + 1];
    let mask = eval_mask(test);
    let mut rows = Vec::new();
    for &size in sizes {
        if size == 0 {
            return Err(Error::InvalidArgument("training size 0".into()));
        }
        let rep = train_cnn(&norm[..size], &norm[max..=max], &train_cfg)?;
        let pred = predict_scalar(&rep.model, &test.noisy, &scheme)?;
        let s = score_scalar(&pred, &test.phantom.fa, &mask)?;
        rows.push(SweepRow {
            size,
            psnr: s.psnr,
            ssim: s.ssim,
            nmse: s.nmse,
        });
    }
    Ok(rows)
}
