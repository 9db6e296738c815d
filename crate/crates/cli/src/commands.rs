use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use sfkit::camera::RelativePose;
use sfkit::eval::{self, EvalConfig, EvalReport, EvalSample, PredictorOutput, SampleOutcome};
use sfkit::optim::{fit_free_parameters, gradient_audit, FitConfig, LossTarget, Prediction, ScaleStrategy};
use sfkit::param::{from_cso, to_cso, SfRepresentation};
use sfkit::recipe::{self, CycleParams, RecipeConfig, ReferenceFrame};
use sfkit::synthworld::{self, SceneSpec};
use sfkit::tensors::{self, SfKind, META_FILE};

use crate::{Cli, Command, Common};

pub fn run(cli: &Cli) -> anyhow::Result<u8> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.common.jobs)
        .build()
        .context("building worker pool")?;
    pool.install(|| dispatch(&cli.common, &cli.command))
}

fn dispatch(common: &Common, command: &Command) -> anyhow::Result<u8> {
    match command {
        Command::Synth {
            out,
            count,
            seed,
            height,
            width,
            integer_flow,
            scene,
        } => synth(out, *count, *seed, *height, *width, *integer_flow, scene.as_deref()),
        Command::Uplift { input } => uplift(common, input),
        Command::Convert { input, to } => convert(common, input, (*to).into()),
        Command::Eval {
            input,
            predictor,
            align_sf,
            report,
        } => evaluate(common, input, predictor, *align_sf, report.as_deref()),
        Command::Fit {
            input,
            steps,
            step_size,
            noise,
            seed,
            report,
        } => fit(common, input, *steps, *step_size, *noise, *seed, report.as_deref()),
        Command::Losscheck { seed, size, h, noise } => losscheck(common, *seed, *size, *h, *noise),
    }
}

fn recipe_config(common: &Common) -> RecipeConfig {
    RecipeConfig {
        cycle: CycleParams {
            alpha1: common.alpha1,
            alpha2: common.alpha2,
        },
        interpolation: common.interp.into(),
    }
}

/// `input` itself when it is a sample directory, otherwise its sample
/// subdirectories in lexicographic order.
fn sample_dirs(input: &Path) -> anyhow::Result<Vec<PathBuf>> {
    if input.join(META_FILE).is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let entries = fs::read_dir(input).with_context(|| format!("reading {}", input.display()))?;
    let mut dirs = Vec::new();
    for entry in entries {
        let path = entry?.path();
        if path.join(META_FILE).is_file() {
            dirs.push(path);
        }
    }
    if dirs.is_empty() {
        bail!("no sample directories under {}", input.display());
    }
    dirs.sort();
    Ok(dirs)
}

fn sample_name(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

/// 0 when every sample succeeded, 2 when some failed, 1 when all failed.
fn batch_status(failures: usize, total: usize) -> u8 {
    match failures {
        0 => 0,
        f if f < total => 2,
        _ => 1,
    }
}

/// Runs `job` on every directory in parallel and reports results in order.
fn for_each_dir<F>(dirs: &[PathBuf], job: F) -> u8
where
    F: Fn(&Path) -> anyhow::Result<String> + Sync,
{
    let results: Vec<_> = dirs.par_iter().map(|d| job(d)).collect();
    let mut failures = 0;
    for (dir, result) in dirs.iter().zip(results) {
        match result {
            Ok(msg) => println!("{}: {msg}", sample_name(dir)),
            Err(e) => {
                failures += 1;
                eprintln!("{}: error: {e:#}", sample_name(dir));
            }
        }
    }
    batch_status(failures, dirs.len())
}

fn write_json<T: Serialize>(value: &T, path: Option<&Path>) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn write_scene(dir: &Path, spec: &SceneSpec) -> anyhow::Result<()> {
    let (sample, gt) = synthworld::render(spec)?;
    tensors::write_sample(&sample, dir)?;
    tensors::write_grid(dir, "gt_sf", &gt.sf)?;
    tensors::write_mask(dir, "m_gt_sf", &gt.mask_sf)?;
    tensors::write_mask(dir, "m_occlusion", &gt.occlusion)?;
    tensors::add_fields(dir, &["gt_sf", "m_gt_sf", "m_occlusion"], None)?;
    fs::write(dir.join("scene.json"), serde_json::to_string_pretty(spec)? + "\n")?;
    Ok(())
}

fn synth(
    out: &Path,
    count: usize,
    seed: u64,
    height: usize,
    width: usize,
    integer_flow: bool,
    scene: Option<&Path>,
) -> anyhow::Result<u8> {
    if let Some(path) = scene {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let spec: SceneSpec = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        write_scene(out, &spec)?;
        println!("{}: rendered", sample_name(out));
        return Ok(0);
    }
    if height == 0 || width == 0 {
        bail!("resolution must be positive");
    }
    fs::create_dir_all(out)?;
    let dirs: Vec<PathBuf> = (0..count as u64)
        .map(|i| out.join(format!("scene_{:05}", seed + i)))
        .collect();
    Ok(for_each_dir(&dirs, |dir| {
        let s = seed + dirs.iter().position(|d| d == dir).expect("dir from list") as u64;
        let spec = if integer_flow {
            SceneSpec::integer_flow(s, height, width)
        } else {
            SceneSpec::random(s, height, width)
        };
        write_scene(dir, &spec)?;
        Ok(format!("rendered seed {s}"))
    }))
}

fn uplift(common: &Common, input: &Path) -> anyhow::Result<u8> {
    let config = recipe_config(common);
    let frame: ReferenceFrame = common.frame.into();
    // Containers carry no world pose; camera 1 serves as the world frame.
    let world = RelativePose::identity();
    let dirs = sample_dirs(input)?;
    Ok(for_each_dir(&dirs, |dir| {
        let sample = tensors::read_sample(dir)?;
        let result = recipe::uplift(&sample, &config)?;
        let sf = recipe::reframe_sceneflow(&result, &sample.pose_1_to_2, frame, Some(&world))?;
        recipe::write_uplift(dir, &result, &config, &sf, frame)?;
        Ok(format!(
            "{} of {} pixels valid",
            result.mask_sf.count_valid(),
            result.mask_sf.bits().len()
        ))
    }))
}

fn convert(common: &Common, input: &Path, kind: SfKind) -> anyhow::Result<u8> {
    let mode = common.interp.into();
    let dirs = sample_dirs(input)?;
    Ok(for_each_dir(&dirs, |dir| {
        let sample = tensors::read_sample(dir)?;
        let (payload, m_sf) = sample.sf.clone().ok_or_else(|| anyhow!("sample has no scene flow"))?;
        if sample.sf_kind == kind {
            return Ok(format!("already {kind}"));
        }
        let (x1, _) = recipe::gt_pointmaps(&sample);
        let mask = m_sf.and(&sample.m_d1)?;
        let rep = SfRepresentation {
            kind: sample.sf_kind,
            payload,
        };
        let (cso, m_cso) = to_cso(&rep, &x1, &mask, &sample.intrinsics, mode)?;
        let (out, m_out) = from_cso(&cso, &x1, &m_cso, &sample.intrinsics, kind)?;
        tensors::write_grid(dir, "sf", &out.payload)?;
        tensors::write_mask(dir, "m_sf", &m_out)?;
        tensors::add_fields(dir, &["sf", "m_sf"], Some(kind))?;
        Ok(format!(
            "{} -> {kind}, {} pixels valid",
            sample.sf_kind,
            m_out.count_valid()
        ))
    }))
}

fn load_eval_samples(dirs: &[PathBuf]) -> (Vec<EvalSample>, Vec<SampleOutcome>) {
    let loaded: Vec<_> = dirs
        .par_iter()
        .map(|d| (sample_name(d), tensors::read_sample(d)))
        .collect();
    let mut samples = Vec::new();
    let mut failed = Vec::new();
    for (name, record) in loaded {
        match record {
            Ok(record) => samples.push(EvalSample { name, record }),
            Err(e) => failed.push(SampleOutcome {
                name,
                metrics: None,
                error: Some(e.to_string()),
            }),
        }
    }
    (samples, failed)
}

fn read_prediction(root: &Path, sample: &EvalSample) -> sfkit::Result<PredictorOutput> {
    let dir = root.join(&sample.name);
    let (h, w) = (sample.record.height(), sample.record.width());
    Ok(PredictorOutput {
        x1_hat: tensors::read_grid(&dir, "x1", h, w, 3)?,
        x2_hat: tensors::read_grid(&dir, "x2", h, w, 3)?,
        sf_hat: tensors::read_grid(&dir, "sf", h, w, 3)?,
    })
}

fn evaluate(
    common: &Common,
    input: &Path,
    predictor: &str,
    align_sf: bool,
    report: Option<&Path>,
) -> anyhow::Result<u8> {
    let dirs = sample_dirs(input)?;
    let config = EvalConfig {
        align_sceneflow: align_sf,
        pixel_pooled: common.pixel_pooled,
    };
    let recipe_config = recipe_config(common);
    let (samples, load_failures) = load_eval_samples(&dirs);
    let mut result: EvalReport = match predictor {
        "oracle" => eval::evaluate(&samples, eval::oracle_predictor, &config),
        "dof" => eval::evaluate(
            &samples,
            |s| {
                let r = &s.record;
                let (out, _) = eval::baseline_dof(
                    &r.d1,
                    &r.m_d1,
                    &r.d2,
                    &r.m_d2,
                    Some((&r.flow_fwd, &r.m_flow_fwd)),
                    &r.intrinsics,
                    Some(&r.pose_1_to_2),
                    &recipe_config,
                )?;
                Ok(out)
            },
            &config,
        ),
        path => {
            let root = PathBuf::from(path);
            if !root.is_dir() {
                bail!("predictor must be `oracle`, `dof` or a directory, got `{path}`");
            }
            eval::evaluate(&samples, |s| read_prediction(&root, s), &config)
        }
    };
    if !load_failures.is_empty() {
        result.failures += load_failures.len();
        result.samples.extend(load_failures);
        result.samples.sort_by(|a, b| a.name.cmp(&b.name));
    }
    for s in result.samples.iter().filter(|s| s.error.is_some()) {
        eprintln!("{}: error: {}", s.name, s.error.as_deref().unwrap_or_default());
    }
    write_json(&result, report)?;
    Ok(batch_status(result.failures, result.samples.len()))
}

/// Ground truth plus independent uniform noise in `[-noise, noise]` on every coordinate.
fn perturbed_oracle(target: &LossTarget, noise: f64, seed: u64) -> Prediction {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pred = target.oracle();
    if noise > 0.0 {
        for x in pred.coords_mut() {
            *x += rng.gen_range(-noise..=noise);
        }
    }
    pred
}

fn mean_sf_error(target: &LossTarget, pred: &Prediction) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, (p, g)) in pred.sf.iter().zip(&target.sf).enumerate() {
        if target.m_sf.is_valid(i) {
            sum += (p - g).norm();
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn fit(
    common: &Common,
    input: &Path,
    steps: usize,
    step_size: f64,
    noise: f64,
    seed: u64,
    report: Option<&Path>,
) -> anyhow::Result<u8> {
    let sample = tensors::read_sample(input)?;
    if sample.sf_kind != SfKind::Cso {
        bail!("fit needs cso scene flow, found {}", sample.sf_kind);
    }
    let target = LossTarget::from_sample(&sample)?;
    let strategy: ScaleStrategy = common.strategy.map(Into::into).unwrap_or(ScaleStrategy::Xor);
    let init = perturbed_oracle(&target, noise, seed);
    let config = FitConfig {
        steps,
        step_size,
        mu_weight: common.mu_weight,
    };
    let outcome = fit_free_parameters(&target, &init, strategy, &config)?;
    let first = &outcome.trajectory[0];
    let last = outcome.trajectory.last().expect("trajectory holds the initial report");
    let reduction = if first.total > 0.0 {
        1.0 - last.total / first.total
    } else {
        0.0
    };
    let value = json!({
        "strategy": strategy,
        "iterations": outcome.trajectory.len() - 1,
        "converged": outcome.converged,
        "initial": first,
        "final": last,
        "reduction": reduction,
        "initial_epe": mean_sf_error(&target, &init),
        "final_epe": mean_sf_error(&target, &outcome.prediction),
        "trajectory": outcome.trajectory.iter().map(|r| r.total).collect::<Vec<_>>(),
    });
    write_json(&value, report)?;
    Ok(0)
}

fn losscheck(common: &Common, seed: u64, size: usize, h: f64, noise: f64) -> anyhow::Result<u8> {
    let spec = SceneSpec::random(seed, size, size);
    let (mut sample, gt) = synthworld::render(&spec)?;
    sample.sf = Some((gt.sf, gt.mask_sf));
    let target = LossTarget::from_sample(&sample)?;
    let pred = perturbed_oracle(&target, noise, seed);
    let strategies = match common.strategy {
        Some(s) => vec![s.into()],
        None => vec![
            ScaleStrategy::Align,
            ScaleStrategy::Always,
            ScaleStrategy::Never,
            ScaleStrategy::Xor,
        ],
    };
    let mut audits = Vec::new();
    let mut max_rel = 0.0f64;
    for strategy in strategies {
        let audit = gradient_audit(&target, &pred, strategy, common.mu_weight, h)?;
        max_rel = max_rel.max(audit.max_rel_error);
        audits.push(json!({ "strategy": strategy, "audit": audit }));
    }
    write_json(
        &json!({
            "seed": seed,
            "size": size,
            "h": h,
            "metric": target.metric,
            "max_rel_error": max_rel,
            "audits": audits,
        }),
        None,
    )?;
    Ok(0)
}
