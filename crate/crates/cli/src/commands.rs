use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;
use talkhead::condstream::{audio_stream, read_wav, FilterbankConfig, EXPRESSION_FPS};
use talkhead::denoiser::{load_checkpoint, save_checkpoint, DenoiserParams};
use talkhead::evalkit::EvalReport;
use talkhead::headfield::FieldSpec;
use talkhead::mesher::{marching_cubes, GridSpec, Mesh, ScalarGrid};
use talkhead::rigidfit::{fit_template_sequence, landmark_residual, write_template_dataset, TemplateManifest};
use talkhead::sampler::{meshes_for_codes, sample as sample_codes, Guidance};
use talkhead::schedule::NoiseSchedule;
use talkhead::seqfile::SequenceFile;
use talkhead::seqfit::{fit_sequence, read_point_clouds};
use talkhead::synth::write_dataset;
use talkhead::trainer::{self, load_dataset, smoothed, Manifest};

use crate::config::RunConfig;
use crate::{CliError, EvalArgs, FitArgs, GenSyntheticArgs, MeshArgs, SampleArgs, TemplateFitArgs, TrainArgs};

const LOSS_SMOOTHING: usize = 100;

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|source| CliError::Io { path: dir.to_path_buf(), source })
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|source| CliError::Io { path: path.to_path_buf(), source })
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable") + "\n"
}

fn field_spec(manifest: Option<&Path>, fallback: FieldSpec) -> Result<FieldSpec, CliError> {
    Ok(match manifest {
        Some(m) => Manifest::read(m)?.field,
        None => fallback,
    })
}

fn grid(config: &RunConfig, resolution: Option<usize>) -> GridSpec {
    let mut g = config.grid;
    if let Some(n) = resolution {
        g.resolution = [n; 3];
    }
    g
}

fn write_meshes(dir: &Path, meshes: &[Mesh<f64>]) -> Result<(), CliError> {
    create_dir(dir)?;
    for (i, m) in meshes.iter().enumerate() {
        m.write_obj(dir.join(format!("frame{i:03}.obj")))?;
    }
    Ok(())
}

pub fn gen_synthetic(mut config: RunConfig, a: GenSyntheticArgs) -> Result<(), CliError> {
    let s = &mut config.synth;
    if let Some(v) = a.records {
        s.records = v;
    }
    if let Some(v) = a.frames {
        s.frames = v;
    }
    if let Some(v) = a.cloud_points {
        s.cloud_points = v;
    }
    let manifest = write_dataset(&a.out, &config.synth)?;
    println!("{}", manifest.display());
    if a.template_frames > 0 {
        let t = write_template_dataset(a.out.join("template"), a.template_frames, config.synth.seed)?;
        println!("{}", t.display());
    }
    Ok(())
}

pub fn train(mut config: RunConfig, a: TrainArgs) -> Result<(), CliError> {
    if let Some(s) = a.steps {
        config.train.steps = s;
    }
    let manifest = a
        .manifest
        .or(config.manifest.clone())
        .ok_or_else(|| CliError::Config("no dataset manifest given".into()))?;
    let (dataset, m) = load_dataset::<f64>(&manifest, &config.filterbank)?;
    let sched = NoiseSchedule::cosine(config.model.steps, config.schedule_offset)?;
    let params = DenoiserParams::init(config.model.clone(), config.train.seed)?;
    let outcome = trainer::train(&dataset, params, &config.train, &sched)?;
    create_dir(&a.out)?;
    let extra = json!({
        "field": m.field,
        "filterbank": config.filterbank,
        "schedule_offset": config.schedule_offset,
    });
    save_checkpoint(a.out.join("model.ckpt"), &outcome.params, &extra)?;
    let mut csv = String::from("step,loss,smoothed\n");
    for (i, (l, s)) in outcome
        .losses
        .iter()
        .zip(smoothed(&outcome.losses, LOSS_SMOOTHING))
        .enumerate()
    {
        let _ = writeln!(csv, "{i},{l},{s}");
    }
    write_text(&a.out.join("loss.csv"), &csv)
}

fn from_extra<T: serde::de::DeserializeOwned>(extra: &serde_json::Value, key: &str, fallback: T) -> Result<T, CliError> {
    match extra.get(key) {
        Some(v) => serde_json::from_value(v.clone()).map_err(|e| CliError::Config(format!("checkpoint {key}: {e}"))),
        None => Ok(fallback),
    }
}

pub fn sample(mut config: RunConfig, a: SampleArgs) -> Result<(), CliError> {
    let ckpt = a
        .checkpoint
        .or(config.checkpoint.clone())
        .ok_or_else(|| CliError::Config("no checkpoint given".into()))?;
    let (params, extra) = load_checkpoint::<f64>(&ckpt)?;
    let filterbank: FilterbankConfig = from_extra(&extra, "filterbank", config.filterbank)?;
    let offset: f64 = from_extra(&extra, "schedule_offset", config.schedule_offset)?;
    let field: FieldSpec = from_extra(&extra, "field", config.synth.field)?;
    config.sample.guidance = if a.conditional_only {
        Guidance::ConditionalOnly
    } else if a.unconditional_only {
        Guidance::UnconditionalOnly
    } else if let Some(w) = a.guidance {
        Guidance::Weighted(w)
    } else {
        config.sample.guidance
    };
    let wav = read_wav::<f64>(&a.audio)?;
    let frames = (wav.duration() * EXPRESSION_FPS).round() as usize;
    let cond = audio_stream(&wav, &filterbank, Some(frames))?;
    let sched = NoiseSchedule::cosine(params.config.steps, offset)?;
    let codes = sample_codes(&params, &cond, &config.sample, &sched)?;
    SequenceFile::new(codes.clone()).write(&a.out)?;
    if let Some(dir) = &a.mesh {
        let bound = field.bind::<f64>()?;
        let meshes = meshes_for_codes(&bound, &codes, &grid(&config, a.grid), config.smoothing.as_ref())?;
        write_meshes(dir, &meshes)?;
    }
    Ok(())
}

pub fn fit(config: RunConfig, a: FitArgs) -> Result<(), CliError> {
    let spec = field_spec(a.manifest.as_deref().or(config.manifest.as_deref()), config.synth.field)?;
    let field = spec.bind::<f64>()?;
    let clouds = read_point_clouds::<f64>(&a.clouds)?;
    let result = fit_sequence(&field, &clouds, &config.fit)?;
    SequenceFile::new(result.codes).write(&a.out)?;
    let mut csv = String::from("window,sdf,temp,reg,total\n");
    for (i, w) in result.windows.iter().enumerate() {
        let _ = writeln!(csv, "{i},{},{},{},{}", w.sdf, w.temp, w.reg, w.total);
    }
    write_text(&a.out.with_extension("csv"), &csv)
}

#[derive(Serialize)]
struct FramePoseReport {
    scale: f64,
    rotation: [f64; 3],
    translation: [f64; 3],
    expression: Vec<f64>,
}

pub fn template_fit(mut config: RunConfig, a: TemplateFitArgs) -> Result<(), CliError> {
    if let Some(s) = a.steps {
        config.template_fit.steps = s;
    }
    let (template, observations) = TemplateManifest::load::<f64>(&a.manifest)?;
    let fit = fit_template_sequence(&template, &observations, &config.template_fit)?;
    let residual = landmark_residual(&template, &fit, &observations)?;
    create_dir(&a.out)?;
    let frames: Vec<FramePoseReport> = fit
        .poses
        .iter()
        .map(|p| FramePoseReport {
            scale: p.scale,
            rotation: p.rotation.into(),
            translation: p.translation.into(),
            expression: p.expression.clone(),
        })
        .collect();
    let report = json!({
        "shape": fit.shape,
        "frames": frames,
        "loss": fit.loss,
        "landmark_residual": residual,
    });
    write_text(&a.out.join("template_fit.json"), &to_json(&report))?;
    let mut csv = String::from("step,loss\n");
    for (i, l) in fit.history.iter().enumerate() {
        let _ = writeln!(csv, "{i},{l}");
    }
    write_text(&a.out.join("loss.csv"), &csv)
}

pub fn eval(a: EvalArgs) -> Result<(), CliError> {
    let sets = a
        .sets
        .iter()
        .map(|set| {
            set.split(',')
                .filter(|s| !s.is_empty())
                .map(|p| {
                    let path = PathBuf::from(p);
                    let seq = SequenceFile::<f64>::read(&path)?;
                    Ok((p.to_string(), seq.codes))
                })
                .collect::<Result<Vec<_>, CliError>>()
        })
        .collect::<Result<Vec<_>, _>>()?;
    let report = EvalReport::compute(&sets)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    report.write(&a.out)?;
    print!("{}", report.to_json());
    println!();
    Ok(())
}

#[derive(Serialize)]
struct SphereReport {
    radius: f64,
    resolution: [usize; 3],
    vertices: usize,
    triangles: usize,
    max_radius_error_cells: f64,
    area: f64,
    area_relative_error: f64,
    watertight: bool,
}

pub fn mesh(config: RunConfig, a: MeshArgs) -> Result<(), CliError> {
    let spec = grid(&config, a.grid);
    create_dir(&a.out)?;
    if let Some(r) = a.sphere {
        let values = ScalarGrid::<f64>::from_fn(spec, |p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() - r)?;
        let m = marching_cubes(&values, 0.0)?;
        m.write_obj(a.out.join("sphere.obj"))?;
        let cell = spec.cell_size().iter().cloned().fold(0.0, f64::max);
        let worst = m
            .vertices
            .iter()
            .map(|v| ((v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt() - r).abs())
            .fold(0.0, f64::max);
        let exact = 4.0 * std::f64::consts::PI * r * r;
        let report = SphereReport {
            radius: r,
            resolution: spec.resolution,
            vertices: m.vertices.len(),
            triangles: m.triangles.len(),
            max_radius_error_cells: worst / cell,
            area: m.area(),
            area_relative_error: (m.area() - exact).abs() / exact,
            watertight: m.is_watertight(),
        };
        return write_text(&a.out.join("sphere.json"), &to_json(&report));
    }
    let path = a.sequence.expect("clap requires a sequence without --sphere");
    let codes = SequenceFile::<f64>::read(&path)?.codes;
    let field = field_spec(a.manifest.as_deref().or(config.manifest.as_deref()), config.synth.field)?.bind::<f64>()?;
    let meshes = meshes_for_codes(&field, &codes, &spec, config.smoothing.as_ref())?;
    write_meshes(&a.out, &meshes)
}
