use std::fs;
use std::path::{Path, PathBuf};

use cycleflow::espada;
use cycleflow::metrics::{self, prp_report};
use cycleflow::model::{ModelRole, ObsEncoder, VelocityModel};
use cycleflow::net::Checkpoint;
use cycleflow::pipeline::{self, LossPoint};
use cycleflow::runner::{
    run_continuous, run_single_trial, FlowPolicy, RunConfig, RunLabel, RunLog, RunMode, Sampler,
    STUDENT_INFERENCE_COST, TEACHER_INFERENCE_COST,
};
use cycleflow::simenv::{find_task, generate_demos, Amount, GenConfig};
use cycleflow::traj::{Dataset, Regime};
use serde::Serialize;

use crate::config::Loaded;
use crate::manifest::Manifest;
use crate::{
    Cli, CliError, Command, DistillArgs, EspadaArgs, EvalArgs, EvalMode, GenArgs, ReportArgs, Stage, TrainArgs,
};

pub const DATASET_FILE: &str = "data.cfds";
pub const MODEL_FILE: &str = "model.ckpt.json";
pub const STUDENT_FILE: &str = "student.ckpt.json";
pub const LOSS_FILE: &str = "loss.csv";

type Result<T> = std::result::Result<T, CliError>;

pub fn run(cli: Cli) -> Result<()> {
    let loaded = Loaded::resolve(cli.config.as_deref(), cli.seed)?;
    match cli.command {
        Command::Gen(a) => gen(&loaded, a),
        Command::Train(a) => train(&loaded, a),
        Command::Distill(a) => distill(&loaded, a),
        Command::Espada(a) => espada_cmd(&loaded, a),
        Command::Eval(a) => eval(&loaded, a),
        Command::Report(a) => report(&loaded, a),
    }
}

fn out_dir(flag: Option<PathBuf>, loaded: &Loaded, command: &str) -> Result<PathBuf> {
    let dir = match (flag, &loaded.config.out_dir) {
        (Some(d), _) => d,
        (None, Some(base)) => base.join(command),
        (None, None) => {
            return Err(CliError::Usage(
                "--out is required (or set out_dir in the config)".into(),
            ))
        }
    };
    fs::create_dir_all(&dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
    Ok(dir)
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    let ds = Dataset::load(path).map_err(|e| CliError::Data(e.to_string()))?;
    ds.validate()
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(ds)
}

fn load_model(path: &Path) -> Result<VelocityModel> {
    Checkpoint::load(path)
        .and_then(|c| VelocityModel::from_checkpoint(&c))
        .map_err(|e| CliError::Data(e.to_string()))
}

fn save_model(model: &VelocityModel, path: &Path) -> Result<()> {
    model.to_checkpoint()?.save(path)?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn loss_csv(curve: &[LossPoint]) -> String {
    let mut s = String::from("step,loss\n");
    for p in curve {
        s.push_str(&format!("{},{}\n", p.step, p.loss));
    }
    s
}

fn gen(loaded: &Loaded, args: GenArgs) -> Result<()> {
    let cfg = &loaded.config;
    let regime: Regime = args.regime.parse()?;
    let task = args.task.as_deref().map(|t| find_task(&cfg.tasks, t)).transpose()?;
    if regime != Regime::Play && task.is_none() {
        return Err(CliError::Usage(format!("{} data needs --task", regime.as_str())));
    }
    let amount = match (args.seconds, args.episodes) {
        (Some(s), None) => Amount::Seconds(s),
        (None, Some(n)) => Amount::Episodes(n),
        _ => return Err(CliError::Usage("give exactly one of --seconds and --episodes".into())),
    };
    let out = out_dir(args.out, loaded, "gen")?;
    let gen_cfg = GenConfig {
        world: cfg.world.clone(),
        expert: cfg.expert.clone(),
        horizon: cfg.model.horizon,
        ..GenConfig::default()
    };
    let ds = generate_demos(&gen_cfg, &cfg.tasks, task, regime, amount, cfg.seed)?;
    ds.validate().map_err(|e| CliError::Data(e.to_string()))?;
    let path = out.join(DATASET_FILE);
    ds.save(&path)?;
    let mut manifest = Manifest::new("gen", cfg);
    manifest.output(&out, &path)?;
    manifest.write(&out)?;
    let successes: usize = ds.trajectories.iter().map(|t| t.success_frames.len()).sum();
    println!(
        "{}: {} trajectories, {} frames, {} successes",
        path.display(),
        ds.trajectories.len(),
        ds.frame_count(),
        successes
    );
    Ok(())
}

fn regime_label(datasets: &[Dataset]) -> String {
    let mut names: Vec<&str> = datasets.iter().map(|d| d.meta.regime.as_str()).collect();
    names.sort_unstable();
    names.dedup();
    names.join("+")
}

fn train(loaded: &Loaded, args: TrainArgs) -> Result<()> {
    let mut cfg = loaded.config.clone();
    if let Some(steps) = args.steps {
        cfg.train.steps = steps;
    }
    if let Some(n) = args.espada {
        cfg.espada.n = n;
    }
    cfg.train.seed = cfg.seed;
    let mut datasets = args.data.iter().map(|p| load_dataset(p)).collect::<Result<Vec<_>>>()?;
    let first = &datasets[0].meta;
    if datasets
        .iter()
        .any(|d| d.meta.state_dim != first.state_dim || d.meta.tasks != first.tasks)
    {
        return Err(CliError::Data(
            "datasets disagree on state dimension or task registry".into(),
        ));
    }
    let encoder = ObsEncoder {
        state_dim: first.state_dim,
        num_tasks: first.tasks.len(),
    };
    let tasks = first.tasks.clone();
    let mut model = match args.stage {
        Stage::Pretrain => {
            if let Some(d) = datasets.iter().find(|d| d.meta.regime != Regime::Play) {
                return Err(CliError::Usage(format!(
                    "pretraining uses play data, got {} data",
                    d.meta.regime.as_str()
                )));
            }
            if args.init.is_some() || args.from_scratch || args.espada.is_some() {
                return Err(CliError::Usage(
                    "--init, --from-scratch and --espada apply to post-training only".into(),
                ));
            }
            let mut m = VelocityModel::new(&cfg.model, encoder, tasks, cfg.seed)?;
            m.meta.stages.push("pretrain".into());
            m
        }
        Stage::Posttrain => {
            if datasets.iter().any(|d| d.meta.regime == Regime::Play) {
                return Err(CliError::Usage("post-training uses task data, got play data".into()));
            }
            let mut m = match (&args.init, args.from_scratch) {
                (Some(path), false) => load_model(path)?,
                (None, true) => VelocityModel::new(&cfg.model, encoder, tasks, cfg.seed)?,
                _ => {
                    return Err(CliError::Usage(
                        "post-training needs --init <checkpoint> or --from-scratch".into(),
                    ))
                }
            };
            if m.meta.encoder.state_dim != first.state_dim || m.meta.tasks != first.tasks {
                return Err(CliError::Data(
                    "checkpoint and datasets disagree on state dimension or task registry".into(),
                ));
            }
            if m.meta.espada_factor.is_some() {
                return Err(CliError::Usage(
                    "checkpoint was already trained on downsampled data".into(),
                ));
            }
            m.meta.stages.push(format!("posttrain:{}", regime_label(&datasets)));
            if args.espada.is_some() {
                cfg.espada.validate()?;
                datasets = datasets
                    .iter()
                    .map(|d| pipeline::espada_dataset(d, &cfg.espada).map(|(ds, _)| ds))
                    .collect::<cycleflow::Result<_>>()?;
                let h = espada::rescale_horizon(m.meta.base_horizon, cfg.espada.n);
                m = m.with_horizon(h)?;
                m.meta.espada_factor = Some(cfg.espada.n);
                m.meta.stages.push(format!("espada:{}", cfg.espada.n));
            }
            m
        }
    };
    cfg.flow.horizon = model.horizon();
    let windows = pipeline::training_windows(&datasets, model.horizon())?;
    let curve = pipeline::train_flow(&mut model, &windows, &cfg.flow, &cfg.train)?;

    let out = out_dir(args.out, loaded, "train")?;
    let ckpt = out.join(MODEL_FILE);
    save_model(&model, &ckpt)?;
    let loss = out.join(LOSS_FILE);
    write_text(&loss, &loss_csv(&curve))?;
    let mut manifest = Manifest::new("train", &cfg);
    for p in args.data.iter().chain(&args.init) {
        manifest.input(p)?;
    }
    manifest.output(&out, &ckpt)?;
    manifest.output(&out, &loss)?;
    manifest.write(&out)?;
    println!(
        "{}: horizon {}, loss {:.5} -> {:.5}",
        ckpt.display(),
        model.horizon(),
        curve[0].loss,
        curve[curve.len() - 1].loss
    );
    Ok(())
}

fn distill(loaded: &Loaded, args: DistillArgs) -> Result<()> {
    let mut cfg = loaded.config.clone();
    if let Some(steps) = args.steps {
        cfg.distill_train.steps = steps;
    }
    cfg.distill_train.seed = cfg.seed;
    let teacher = load_model(&args.teacher)?;
    if teacher.meta.role != ModelRole::Teacher {
        return Err(CliError::Usage(
            "the --teacher checkpoint is a distilled student".into(),
        ));
    }
    let datasets = args.data.iter().map(|p| load_dataset(p)).collect::<Result<Vec<_>>>()?;
    let observations = pipeline::observations(&datasets);
    let (student, curve) = pipeline::distill_student(&teacher, &observations, &cfg.distill, &cfg.distill_train)?;

    let out = out_dir(args.out, loaded, "distill")?;
    let ckpt = out.join(STUDENT_FILE);
    save_model(&student, &ckpt)?;
    let loss = out.join(LOSS_FILE);
    write_text(&loss, &loss_csv(&curve))?;
    let mut manifest = Manifest::new("distill", &cfg);
    manifest.input(&args.teacher)?;
    for p in &args.data {
        manifest.input(p)?;
    }
    manifest.output(&out, &ckpt)?;
    manifest.output(&out, &loss)?;
    manifest.write(&out)?;
    println!(
        "{}: loss {:.5} -> {:.5}",
        ckpt.display(),
        curve[0].loss,
        curve[curve.len() - 1].loss
    );
    Ok(())
}

#[derive(Serialize)]
struct SegmentSummary {
    trajectory: usize,
    frames: usize,
    kept: usize,
    casual_fraction: f64,
    segments: Vec<espada::Segment>,
}

fn espada_cmd(loaded: &Loaded, args: EspadaArgs) -> Result<()> {
    let mut cfg = loaded.config.clone();
    if let Some(n) = args.n {
        cfg.espada.n = n;
    }
    cfg.espada.validate()?;
    let ds = load_dataset(&args.data)?;
    let (down, segs) = pipeline::espada_dataset(&ds, &cfg.espada)?;
    let summary: Vec<SegmentSummary> = segs
        .into_iter()
        .enumerate()
        .map(|(i, seg)| SegmentSummary {
            trajectory: i,
            frames: ds.trajectories[i].len(),
            kept: down.trajectories[i].len(),
            casual_fraction: seg.casual_fraction(),
            segments: seg.segments,
        })
        .collect();

    let out = out_dir(args.out, loaded, "espada")?;
    let data = out.join(DATASET_FILE);
    down.save(&data)?;
    let seg_path = out.join("segments.json");
    let text = serde_json::to_string_pretty(&summary).map_err(|e| CliError::Data(e.to_string()))?;
    write_text(&seg_path, &(text + "\n"))?;
    let mut manifest = Manifest::new("espada", &cfg);
    manifest.input(&args.data)?;
    manifest.output(&out, &data)?;
    manifest.output(&out, &seg_path)?;
    manifest.write(&out)?;
    println!(
        "{}: {} -> {} frames, horizon {} -> {}",
        data.display(),
        ds.frame_count(),
        down.frame_count(),
        ds.meta.horizon,
        down.meta.horizon
    );
    Ok(())
}

fn default_method(model: &VelocityModel) -> String {
    let role = match model.meta.role {
        ModelRole::Teacher => "teacher",
        ModelRole::Student => "student",
    };
    match model.meta.espada_factor {
        Some(n) => format!("{role}-espada{n}"),
        None => role.to_string(),
    }
}

fn default_regime(model: &VelocityModel) -> String {
    model
        .meta
        .stages
        .iter()
        .rev()
        .find_map(|s| s.strip_prefix("posttrain:"))
        .unwrap_or("play")
        .to_string()
}

#[derive(Serialize)]
struct SeedSummary {
    seed: u64,
    n_succ: usize,
    interventions: usize,
    tph: f64,
    mtbi: f64,
    mtbi_censored: bool,
    success_rate: Option<f64>,
}

#[derive(Serialize)]
struct TrialSummary {
    seed: u64,
    episodes: usize,
    successes: usize,
    success_rate: f64,
}

fn eval(loaded: &Loaded, args: EvalArgs) -> Result<()> {
    let mut cfg = loaded.config.clone();
    if args.seeds == 0 {
        return Err(CliError::Usage("--seeds must be at least 1".into()));
    }
    match args.mode {
        EvalMode::Continuous => {
            if args.episodes.is_some() {
                return Err(CliError::Usage("--episodes applies to single-trial mode".into()));
            }
            if let Some(t) = args.duration {
                cfg.run.duration = t;
            }
            cfg.run.mode = RunMode::Continuous;
        }
        EvalMode::Single => {
            if args.duration.is_some() {
                return Err(CliError::Usage("--T applies to continuous mode".into()));
            }
            cfg.run.mode = RunMode::SingleTrial {
                episodes: args.episodes.unwrap_or(100),
            };
        }
    }
    let model = load_model(&args.checkpoint)?;
    let task = find_task(&model.meta.tasks, &args.task)?.clone();
    let (sampler, role_cost) = match model.meta.role {
        ModelRole::Teacher => (
            Sampler::Teacher {
                steps: args.steps.unwrap_or(cfg.flow.teacher_steps),
            },
            TEACHER_INFERENCE_COST,
        ),
        ModelRole::Student => (
            Sampler::Student {
                steps: args.steps.unwrap_or(cfg.distill.student_steps),
            },
            STUDENT_INFERENCE_COST,
        ),
    };
    cfg.run.inference_cost = match args.inference_cost {
        Some(c) => c,
        None if loaded.file_sets(&["run", "inference_cost"]) => cfg.run.inference_cost,
        None => role_cost,
    };
    if args.exec_horizon.is_some() {
        cfg.run.exec_horizon = args.exec_horizon;
    }
    if let Some(w) = args.cfg_scale {
        cfg.guidance.w = w;
    }
    if let Some(r) = args.cfg_rescale {
        cfg.guidance.rescale = r;
    }
    cfg.guidance.validate()?;
    cfg.run.validate(model.horizon())?;
    let method = args.method.clone().unwrap_or_else(|| default_method(&model));
    let regime = args.regime.clone().unwrap_or_else(|| default_regime(&model));

    let out = out_dir(args.out, loaded, "eval")?;
    let mut manifest = Manifest::new("eval", &cfg);
    manifest.input(&args.checkpoint)?;
    let summary_path = out.join("summary.json");
    let summary_text = match cfg.run.mode {
        RunMode::Continuous => {
            let logs_dir = out.join("logs");
            let mut rows = Vec::new();
            for seed in cfg.seed..cfg.seed + args.seeds {
                let run_cfg = RunConfig {
                    seed,
                    ..cfg.run.clone()
                };
                let mut policy = FlowPolicy::new(model.clone(), sampler, cfg.guidance, policy_seed(seed));
                let label = RunLabel {
                    method: method.clone(),
                    regime: regime.clone(),
                    task: task.name.clone(),
                    seed,
                };
                let log = run_continuous(&mut policy, &cfg.world, &model.meta.tasks, &task, &run_cfg, label)?;
                let (summary, events) = log.save(&logs_dir)?;
                manifest.output(&out, &summary)?;
                manifest.output(&out, &events)?;
                let m = metrics::run_metrics(&log)?;
                println!(
                    "seed {seed}: {} successes, {} interventions, tph {:.1}, mtbi {}{:.1}",
                    log.totals.n_succ,
                    log.totals.interventions(),
                    m.tph,
                    if m.mtbi.is_censored() { ">=" } else { "" },
                    m.mtbi.bound()
                );
                rows.push(SeedSummary {
                    seed,
                    n_succ: log.totals.n_succ,
                    interventions: log.totals.interventions(),
                    tph: m.tph,
                    mtbi: m.mtbi.bound(),
                    mtbi_censored: m.mtbi.is_censored(),
                    success_rate: m.success_rate,
                });
            }
            serde_json::to_string_pretty(&rows)
        }
        RunMode::SingleTrial { episodes } => {
            let mut csv = String::from("seed,episode,success\n");
            let mut rows = Vec::new();
            for seed in cfg.seed..cfg.seed + args.seeds {
                let run_cfg = RunConfig {
                    seed,
                    ..cfg.run.clone()
                };
                let mut policy = FlowPolicy::new(model.clone(), sampler, cfg.guidance, policy_seed(seed));
                let flags = run_single_trial(&mut policy, &cfg.world, &model.meta.tasks, &task, episodes, &run_cfg)?;
                for (i, ok) in flags.iter().enumerate() {
                    csv.push_str(&format!("{seed},{i},{}\n", u8::from(*ok)));
                }
                let successes = flags.iter().filter(|&&ok| ok).count();
                println!("seed {seed}: {successes}/{episodes} episodes succeeded");
                rows.push(TrialSummary {
                    seed,
                    episodes,
                    successes,
                    success_rate: successes as f64 / episodes as f64,
                });
            }
            let path = out.join("episodes.csv");
            write_text(&path, &csv)?;
            manifest.output(&out, &path)?;
            serde_json::to_string_pretty(&rows)
        }
    }
    .map_err(|e| CliError::Data(e.to_string()))?;
    write_text(&summary_path, &(summary_text + "\n"))?;
    manifest.output(&out, &summary_path)?;
    manifest.write(&out)
}

/// Sampler noise stream for a run seed, kept apart from the world's stream.
fn policy_seed(seed: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 0x5eed
}

fn find_summaries(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::Usage(format!("{}: {e}", dir.display())))?;
    for entry in entries {
        let path = entry.map_err(|e| CliError::Data(e.to_string()))?.path();
        if path.is_dir() {
            find_summaries(&path, out)?;
        } else if path.to_string_lossy().ends_with(".summary.json") {
            out.push(path);
        }
    }
    Ok(())
}

fn report(loaded: &Loaded, args: ReportArgs) -> Result<()> {
    let mut paths = Vec::new();
    for dir in &args.logs {
        find_summaries(dir, &mut paths)?;
    }
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Usage(
            "no run summaries found in the given log directories".into(),
        ));
    }
    let logs = paths
        .iter()
        .map(|p| RunLog::load(p).map_err(|e| CliError::Data(e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    let report = prp_report(&logs)?;
    let prp = metrics::prp_csv(&report.points);

    let out = out_dir(args.out, loaded, "report")?;
    let prp_path = out.join("prp.csv");
    write_text(&prp_path, &prp)?;
    let timeline_path = out.join("timeline.csv");
    write_text(&timeline_path, &metrics::timeline_csv(&report.timeline))?;
    let mut manifest = Manifest::new("report", &loaded.config);
    for p in &paths {
        manifest.input(p)?;
    }
    manifest.output(&out, &prp_path)?;
    manifest.output(&out, &timeline_path)?;
    manifest.write(&out)?;
    print!("{prp}");
    for p in report.points.iter().filter(|p| p.dominated) {
        println!("dominated: {}/{}/{}", p.method, p.regime, p.task);
    }
    Ok(())
}
