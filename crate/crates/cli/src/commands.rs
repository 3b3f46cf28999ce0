//! Subcommand implementations. Every command reads and writes the formats of
//! `dtilearn::io` and prints a JSON summary on stdout.

use std::fmt;
use std::path::Path;

use dtilearn::dti::{compute_maps, maps_from_tensors, scheme_condition_number, DtiMaps};
use dtilearn::experiments::{
    cohort_subject, desk_train_config, lesion_recipe, motion_recipe, noise_recipe, training_size_sweep,
    CohortConfig, ExperimentConfig, Subject,
};
use dtilearn::io::checkpoint::{read_checkpoint, write_checkpoint};
use dtilearn::io::image::{render_color_slice, render_error_slice, render_scalar_slice, write_png, Window};
use dtilearn::io::{read_fsl, write_fsl, Semantics, StreamlineFile, VolumeFile};
use dtilearn::metrics::{roi_stats, score_color, score_scalar, sweep_csv, EvalReport};
use dtilearn::net::data::target_volume;
use dtilearn::net::train::split_subjects;
use dtilearn::net::{infer_map, normalize_subject, train_cnn, train_mlp, NormalizedSubject, PredictedMap, TargetKind};
use dtilearn::phantom::{generate_scheme, PhantomSpec};
use dtilearn::tractography::{brute_force_seed, directions_from_colormap, fact_track, roi_filter, DirectionField, TrackParams};
use dtilearn::{GradientScheme, ScalarMap};
use serde::Serialize;
use serde_json::json;

use crate::{
    AcquisitionArgs, Cli, Command, FitArgs, InferArgs, MapsArgs, Method, MetricsArgs, PhantomArgs, Recipe, RenderArgs,
    ReproArgs, SchemeCommand, TrackArgs, TrainArgs,
};

/// Sign-recovery sweeps when tracking on a colour map.
const COLOR_SWEEPS: usize = 4;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(dtilearn::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) if e.is_numerical() => 3,
            CliError::Core(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<dtilearn::Error> for CliError {
    fn from(e: dtilearn::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

type Result<T> = std::result::Result<T, CliError>;

pub fn run(cli: Cli) -> Result<()> {
    // A pool can only be installed once per process; later calls keep it.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.global.threads).build_global();
    let seed = cli.global.seed;
    match cli.command {
        Command::Phantom(a) => phantom(a, seed),
        Command::Scheme(c) => scheme(c, seed),
        Command::Fit(a) => fit(a),
        Command::Maps(a) => maps(a),
        Command::Train(a) => train(a, seed),
        Command::Infer(a) => infer(a),
        Command::Track(a) => track(a),
        Command::Metrics(a) => metrics(a),
        Command::Render(a) => render(a),
        Command::Repro(a) => repro(a, seed),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Core(dtilearn::Error::Io { path: dir.into(), source: e }))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| CliError::Core(dtilearn::Error::Io { path: path.into(), source: e }))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn write_maps(dir: &Path, maps: &DtiMaps) -> Result<()> {
    VolumeFile::from_tensors(&maps.tensors, &maps.fa.mask).write(&dir.join("tensor"))?;
    write_scalar_maps(dir, maps)
}

fn write_scalar_maps(dir: &Path, maps: &DtiMaps) -> Result<()> {
    VolumeFile::from_scalar(&maps.fa, Semantics::Fa).write(&dir.join("fa"))?;
    VolumeFile::from_scalar(&maps.md, Semantics::Md).write(&dir.join("md"))?;
    VolumeFile::from_color(&maps.color).write(&dir.join("color"))?;
    Ok(())
}

fn phantom(a: PhantomArgs, seed: u64) -> Result<()> {
    let dims: [usize; 3] = a.dims.clone().try_into().map_err(|_| CliError::Usage("--dims takes three values".into()))?;
    let cohort = CohortConfig {
        dims,
        directions: a.directions,
        used_directions: a.use_directions.unwrap_or(a.directions),
        n_b0: a.n_b0,
        snr_db: a.snr_db,
        seed,
    };
    let scheme = cohort.scheme()?;
    let subject = if let Some(path) = &a.spec {
        let text = std::fs::read(path).map_err(|e| dtilearn::Error::Io { path: path.clone(), source: e })?;
        let spec: PhantomSpec = serde_json::from_slice(&text)?;
        Subject::from_spec(&spec, &scheme, a.snr_db, seed)?
    } else if a.straight {
        Subject::from_spec(&PhantomSpec::straight_bundle(dims), &scheme, a.snr_db, seed)?
    } else {
        cohort_subject(&cohort, &scheme, a.subject)?
    };
    create_dir(&a.out)?;
    let dwi = if a.noiseless { &subject.clean } else { &subject.noisy };
    VolumeFile::from_dwi(dwi).write(&a.out.join("dwi"))?;
    write_fsl(&scheme, &a.out.join("bvals"), &a.out.join("bvecs"))?;
    let p = &subject.phantom;
    let mask = p.mask();
    VolumeFile::from_tensors(&p.field, &mask).write(&a.out.join("tensor"))?;
    VolumeFile::from_scalar(&p.fa, Semantics::Fa).write(&a.out.join("fa"))?;
    VolumeFile::from_scalar(&p.md, Semantics::Md).write(&a.out.join("md"))?;
    VolumeFile::from_color(&p.color).write(&a.out.join("color"))?;
    VolumeFile::from_labels(p.dims(), p.spec.spacing, &p.labels).write(&a.out.join("labels"))?;
    write_json(&a.out.join("spec.json"), &p.spec)?;
    let summary = json!({
        "dims": dims,
        "measurements": scheme.len(),
        "weighted": scheme.weighted_count(),
        "scheme_id": scheme.fingerprint(),
        "noiseless": a.noiseless,
        "noise": subject.noise,
        "foreground_voxels": mask.iter().filter(|&&m| m).count(),
        "seed": seed,
    });
    write_json(&a.out.join("phantom.json"), &summary)?;
    print_json(&summary)
}

fn scheme_summary(s: &GradientScheme) -> serde_json::Value {
    json!({
        "measurements": s.len(),
        "b0": s.b0_count(),
        "weighted": s.weighted_count(),
        "condition_number": scheme_condition_number(s),
        "scheme_id": s.fingerprint(),
    })
}

fn scheme(c: SchemeCommand, seed: u64) -> Result<()> {
    match c {
        SchemeCommand::Generate { out, directions, b, n_b0 } => {
            let s = generate_scheme(directions, b, n_b0, seed)?;
            create_dir(&out)?;
            write_fsl(&s, &out.join("bvals"), &out.join("bvecs"))?;
            print_json(&scheme_summary(&s))
        }
        SchemeCommand::Validate { bvals, bvecs } => print_json(&scheme_summary(&read_fsl(&bvals, &bvecs)?)),
    }
}

fn read_acquisition(a: &AcquisitionArgs) -> Result<(dtilearn::DwiVolume, GradientScheme)> {
    let dwi = VolumeFile::read(&a.dwi)?.to_dwi()?;
    let scheme = read_fsl(&a.bvals, &a.bvecs)?;
    if dwi.n_meas != scheme.len() {
        return Err(dtilearn::Error::Shape(format!(
            "dwi has {} volumes but the scheme lists {} entries",
            dwi.n_meas,
            scheme.len()
        ))
        .into());
    }
    Ok((dwi, scheme))
}

fn fit(a: FitArgs) -> Result<()> {
    let (dwi, scheme) = read_acquisition(&a.acq)?;
    let maps = compute_maps(&dwi, &scheme)?;
    create_dir(&a.out)?;
    write_maps(&a.out, &maps)?;
    print_json(&json!({
        "foreground_voxels": maps.fa.foreground_count(),
        "outputs": ["tensor", "fa", "md", "color"],
    }))
}

fn maps(a: MapsArgs) -> Result<()> {
    let (field, mask) = VolumeFile::read(&a.tensor)?.to_tensors()?;
    let maps = maps_from_tensors(&field, &mask);
    create_dir(&a.out)?;
    write_scalar_maps(&a.out, &maps)?;
    print_json(&json!({
        "foreground_voxels": maps.fa.foreground_count(),
        "outputs": ["fa", "md", "color"],
    }))
}

/// One phantom directory as a training subject.
fn load_subject(dir: &Path, kind: TargetKind, include_b0: bool) -> Result<(NormalizedSubject, String)> {
    let dwi = VolumeFile::read(&dir.join("dwi"))?.to_dwi()?;
    let scheme = read_fsl(&dir.join("bvals"), &dir.join("bvecs"))?;
    let fa = VolumeFile::read(&dir.join("fa"))?.to_scalar()?;
    let md = VolumeFile::read(&dir.join("md"))?.to_scalar()?;
    let color = VolumeFile::read(&dir.join("color"))?.to_color()?;
    let target = target_volume(kind, &fa, &md, &color);
    Ok((normalize_subject(&dwi, &scheme, include_b0, kind, Some(target))?, scheme.fingerprint()))
}

fn train(a: TrainArgs, seed: u64) -> Result<()> {
    let kind: TargetKind = a.target.into();
    if a.data.len() < 2 {
        return Err(CliError::Usage("--data needs at least two phantom directories".into()));
    }
    let mut subjects = Vec::new();
    let mut scheme_id: Option<String> = None;
    for d in &a.data {
        let (s, id) = load_subject(d, kind, !a.no_b0)?;
        if scheme_id.get_or_insert_with(|| id.clone()) != &id {
            return Err(dtilearn::Error::InvalidScheme(format!("{} uses a different gradient scheme", d.display())).into());
        }
        subjects.push(s);
    }
    let nz = subjects[0].dims.nz;
    let mut cfg = desk_train_config(kind, seed, nz).with_epochs(a.epochs);
    cfg.width = a.width;
    cfg.include_b0 = !a.no_b0;
    if a.all_slices {
        cfg.slices = None;
    }
    let (tr, _) = split_subjects(subjects.len())?;
    let (train, val) = subjects.split_at(tr.len());
    let report = match a.method {
        Method::Cnn => train_cnn(train, val, &cfg)?,
        Method::Mlp => train_mlp(train, val, &cfg)?,
    };
    create_dir(&a.out)?;
    write_checkpoint(&report.model, &a.out.join("model.sdtc"))?;
    write_text(&a.out.join("curve.csv"), &report.curve_csv())?;
    let summary = json!({
        "method": report.model.model.method(),
        "target": kind.name(),
        "train_subjects": train.len(),
        "val_subjects": val.len(),
        "epochs": cfg.epochs,
        "initial_train_loss": report.initial_train_loss,
        "initial_val_loss": report.initial_val_loss,
        "final_train_loss": report.final_train_loss(),
        "best_epoch": report.best_epoch,
        "best_val_loss": report.best_val_loss(),
        "config": cfg,
    });
    write_json(&a.out.join("train.json"), &summary)?;
    print_json(&summary)
}

fn infer(a: InferArgs) -> Result<()> {
    let model = read_checkpoint(&a.model)?;
    let (dwi, scheme) = read_acquisition(&a.acq)?;
    let file = match infer_map(&model, &dwi, &scheme)? {
        PredictedMap::Scalar(m) => {
            let sem = if model.kind == TargetKind::Md { Semantics::Md } else { Semantics::Fa };
            VolumeFile::from_scalar(&m, sem)
        }
        PredictedMap::Color(c) => VolumeFile::from_color(&c),
    };
    file.write(&a.out)?;
    print_json(&json!({
        "method": model.model.method(),
        "target": model.kind.name(),
        "output": a.out,
    }))
}

fn track(a: TrackArgs) -> Result<()> {
    let params = TrackParams {
        fa_threshold: a.fa_threshold,
        angle_threshold_deg: a.angle,
    };
    let fa_file = a.fa.as_ref().map(|p| VolumeFile::read(p).and_then(|v| v.to_scalar())).transpose()?;
    let (field, fa): (DirectionField, ScalarMap) = match (&a.tensor, &a.color) {
        (Some(t), _) => {
            let (tensors, mask) = VolumeFile::read(t)?.to_tensors()?;
            let maps = maps_from_tensors(&tensors, &mask);
            (DirectionField::from(&maps.eigen), fa_file.unwrap_or(maps.fa))
        }
        (None, Some(c)) => {
            let color = VolumeFile::read(c)?.to_color()?;
            let fa = fa_file.ok_or_else(|| CliError::Usage("--color needs --fa".into()))?;
            (directions_from_colormap(&color, &fa, a.fa_threshold, COLOR_SWEEPS)?, fa)
        }
        (None, None) => return Err(CliError::Usage("give --tensor or --color".into())),
    };
    let seeds = brute_force_seed(&fa, a.fa_threshold);
    let all = fact_track(&field, &fa, &seeds, params)?;
    let selected = match (&a.roi, a.roi_label) {
        (Some(p), Some(label)) => {
            let labels = VolumeFile::read(p)?.to_labels()?;
            let roi: Vec<bool> = labels.iter().map(|&l| l == label).collect();
            Some(roi_filter(&all, &roi))
        }
        _ => None,
    };
    let kept = selected.as_ref().unwrap_or(&all);
    let file = StreamlineFile::from_streamlines(kept, field.spacing);
    file.write(&a.out)?;
    if let Some(t) = &a.text {
        write_text(t, &file.to_text())?;
    }
    print_json(&json!({
        "seeds": seeds.len(),
        "streamlines": all.len(),
        "selected": selected.as_ref().map(Vec::len),
        "fa_threshold": a.fa_threshold,
        "angle_deg": a.angle,
    }))
}

fn metrics(a: MetricsArgs) -> Result<()> {
    let map = VolumeFile::read(&a.map)?;
    let reference = VolumeFile::read(&a.reference)?;
    let labels = a.labels.as_ref().map(|p| VolumeFile::read(p).and_then(|v| v.to_labels())).transpose()?;
    let report = if map.header.semantics == Semantics::Colormap {
        let (m, r) = (map.to_color()?, reference.to_color()?);
        let mask = labels.as_ref().map_or_else(|| r.mask.clone(), |l| l.iter().map(|&v| v != 0).collect());
        EvalReport {
            method: a.method,
            map: "colormap".into(),
            n_dwi: a.n_dwi,
            seed: 0,
            scores: score_color(&m, &r, &mask)?,
            rois: Vec::new(),
            lesion_contrast: None,
        }
    } else {
        let (m, r) = (map.to_scalar()?, reference.to_scalar()?);
        let mask = labels.as_ref().map_or_else(|| r.mask.clone(), |l| l.iter().map(|&v| v != 0).collect());
        let rois = match &labels {
            Some(l) => {
                let mut wanted: Vec<u32> = l.iter().copied().filter(|&v| v != 0).collect();
                wanted.sort_unstable();
                wanted.dedup();
                roi_stats(&m.data, l, &r.data, &wanted)?.0
            }
            None => Vec::new(),
        };
        EvalReport {
            method: a.method,
            map: format!("{:?}", map.header.semantics).to_lowercase(),
            n_dwi: a.n_dwi,
            seed: 0,
            scores: score_scalar(&m, &r, &mask)?,
            rois,
            lesion_contrast: None,
        }
    };
    if let Some(out) = &a.out {
        write_json(out, &report)?;
    }
    print_json(&report)
}

fn window_of(args: &Option<Vec<f64>>, file: &VolumeFile, map: &ScalarMap) -> Result<Window> {
    match args.as_deref() {
        Some(&[lo, hi]) => Ok(Window { lo, hi }),
        Some(_) => Err(CliError::Usage("--window takes two values lo,hi".into())),
        None if file.header.semantics == Semantics::Fa => Ok(Window::FA),
        None => Ok(Window::auto(map)),
    }
}

fn render(a: RenderArgs) -> Result<()> {
    let file = VolumeFile::read(&a.map)?;
    let img = if file.header.semantics == Semantics::Colormap {
        if a.reference.is_some() {
            return Err(CliError::Usage("error maps are rendered for scalar maps only".into()));
        }
        render_color_slice(&file.to_color()?, a.slice)?
    } else {
        let map = file.to_scalar()?;
        match &a.reference {
            Some(r) => {
                let rf = VolumeFile::read(r)?;
                let reference = rf.to_scalar()?;
                render_error_slice(&map, &reference, a.slice, window_of(&a.window, &rf, &reference)?)?
            }
            None => render_scalar_slice(&map, a.slice, window_of(&a.window, &file, &map)?)?,
        }
    };
    write_png(&img, &a.out)?;
    print_json(&json!({ "width": img.width, "height": img.height, "channels": img.channels, "output": a.out }))
}

fn fa_model(a: &ReproArgs, cfg: &ExperimentConfig) -> Result<dtilearn::TrainedModel> {
    match &a.model {
        Some(p) => Ok(read_checkpoint(p)?),
        None => {
            let mut c = cfg.clone();
            c.mlp = false;
            let model = noise_recipe(&c)?.models.cnn.model;
            write_checkpoint(&model, &a.out.join("cnn.sdtc"))?;
            Ok(model)
        }
    }
}

fn repro(a: ReproArgs, seed: u64) -> Result<()> {
    if a.epochs == 0 {
        return Err(CliError::Usage("--epochs must be at least 1".into()));
    }
    let mut cfg = ExperimentConfig::desk(TargetKind::Fa, seed).with_epochs(a.epochs);
    cfg.mlp = !a.no_mlp;
    create_dir(&a.out)?;
    write_json(&a.out.join("config.json"), &cfg)?;
    match a.recipe {
        Recipe::Noise => {
            let c = noise_recipe(&cfg)?;
            write_checkpoint(&c.models.cnn.model, &a.out.join("cnn.sdtc"))?;
            write_text(&a.out.join("cnn_curve.csv"), &c.models.cnn.curve_csv())?;
            if let Some(m) = &c.models.mlp {
                write_checkpoint(&m.model, &a.out.join("mlp.sdtc"))?;
                write_text(&a.out.join("mlp_curve.csv"), &m.curve_csv())?;
            }
            write_json(&a.out.join("report.json"), &c.report)?;
            print_json(&c.report.evals)
        }
        Recipe::Motion => {
            let r = motion_recipe(&fa_model(&a, &cfg)?, &cfg)?;
            write_json(&a.out.join("motion.json"), &r)?;
            print_json(&r)
        }
        Recipe::Lesion => {
            let r = lesion_recipe(&fa_model(&a, &cfg)?, &cfg)?;
            write_json(&a.out.join("lesion.json"), &r)?;
            print_json(&r)
        }
        Recipe::Sweep => {
            let rows = training_size_sweep(&cfg, &a.sizes)?;
            let csv = sweep_csv(&rows);
            write_text(&a.out.join("sweep.csv"), &csv)?;
            print!("{csv}");
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_error_class() {
        assert_eq!(CliError::Usage("x".into()).exit_code(), 1);
        assert_eq!(CliError::from(dtilearn::Error::InvalidScheme("x".into())).exit_code(), 2);
        assert_eq!(CliError::from(dtilearn::Error::Numerical("x".into())).exit_code(), 3);
    }
}
