use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use lifusion::eval::{ap_40, parse_detections_jsonl, parse_ground_truth_jsonl, sweep_consistency, ConsistencyConfig};
use lifusion::fusion::weight_map_stats;
use lifusion::kitti::layout::{read_scene, scene_indices, verify_roundtrip, write_scene};
use lifusion::kitti::{generate_synthetic_scene, SyntheticSceneConfig};
use lifusion::pipeline::{
    apply_kv, parse_kv, prepare_all, render_kv, run_consistency_experiment, run_fusion_ablation, synthetic_split, train, ExperimentConfig,
    KvConfig, LossMode, Split, TrainState, TwoStreamConfig,
};
use lifusion::tensor::Graph;
use lifusion::verify::{check_corrupted, gradient_suite, iou_oracle_suite, operator_cases, GRAD_TOL};
use lifusion::Error;

#[derive(Parser, Debug)]
#[command(name = "lifusion", version, about = "Two-stream LiDAR/image fusion toolkit")]
struct Cli {
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Flat `key = value` file applied before `--set`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Repeatable `key=value` override.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Print machine-readable JSON on stdout.
    #[arg(long, global = true)]
    json: bool,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Central-difference check of every operator and the fusion layer.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        /// Perturb the analytic gradient of this case (negative control).
        #[arg(long)]
        corrupt_op: Option<String>,
    },
    /// Rotated 3D IoU against a Monte-Carlo estimate.
    IouOracle {
        #[arg(long, default_value_t = 200)]
        pairs: usize,
        #[arg(long, default_value_t = 1_000_000)]
        samples: usize,
    },
    /// Writes synthetic scenes in the KITTI directory layout to `--out`.
    Synth {
        #[arg(long, default_value_t = 4)]
        scenes: usize,
    },
    /// Parses and re-serializes every scene of a KITTI-layout directory.
    ParseKitti { dir: PathBuf },
    /// Trains on synthetic scenes; writes `checkpoint.bin` and `trace.jsonl` to `--out`.
    Train {
        #[arg(long, value_enum, default_value_t = LossArg::Ce)]
        loss: LossArg,
        /// Total step count (a resumed run continues up to it).
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Runs one experiment and writes its JSON report.
    Experiment {
        #[arg(value_enum)]
        which: ExperimentArg,
        #[arg(long, value_enum, default_value_t = LossArg::Ce)]
        loss: LossArg,
    },
    /// Evaluates external JSON-lines detections against ground truth.
    Eval {
        #[arg(long)]
        dets: PathBuf,
        #[arg(long)]
        gts: PathBuf,
        #[arg(long, default_value_t = 0.7)]
        tau: f64,
        /// Comma-separated confidence thresholds.
        #[arg(long, default_value = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9")]
        upsilons: String,
        /// Also report AP over 40 recall positions at this 3D IoU.
        #[arg(long)]
        ap: Option<f64>,
    },
    /// Gate statistics of every fusion site on one synthetic scene.
    FuseInspect {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LossArg {
    Ce,
    Iou,
    None,
}

impl From<LossArg> for LossMode {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::Ce => LossMode::Ce,
            LossArg::Iou => LossMode::IouOnly,
            LossArg::None => LossMode::None,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ExperimentArg {
    Consistency,
    Fusion,
}

enum Failure {
    Verification(String),
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Parse(_) | Error::Input(_) | Error::Json(_) => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

struct Ctx {
    json: bool,
    out: Option<PathBuf>,
}

impl Ctx {
    fn emit<T: Serialize>(&self, value: &T, text: impl FnOnce() -> String) {
        if self.json {
            println!("{}", serde_json::to_string_pretty(value).expect("report serializes"));
        } else {
            println!("{}", text());
        }
    }

    fn out_dir(&self) -> Result<&Path, Failure> {
        let dir = self.out.as_deref().ok_or_else(|| Failure::Usage("this command needs --out <dir>".into()))?;
        fs::create_dir_all(dir)?;
        Ok(dir)
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Outcome {
        if let Some(dir) = &self.out {
            fs::create_dir_all(dir)?;
            fs::write(dir.join(name), serde_json::to_string_pretty(value).expect("report serializes"))?;
        }
        Ok(())
    }
}

fn resolve(cli: &Cli) -> Result<(TwoStreamConfig, ExperimentConfig), Failure> {
    let mut model = TwoStreamConfig { seed: cli.seed, ..TwoStreamConfig::default() };
    let mut exp = ExperimentConfig::default();
    let text = match &cli.config {
        Some(p) => fs::read_to_string(p).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?,
        None => String::new(),
    };
    let mut pairs = parse_kv(&text)?;
    for o in &cli.overrides {
        pairs.extend(parse_kv(o)?);
    }
    apply_kv(&pairs, &mut [&mut model as &mut dyn KvConfig, &mut exp])?;
    model.validate()?;
    exp.validate()?;
    eprintln!("# resolved config\n{}", render_kv(&[&model, &exp]));
    Ok((model, exp))
}

fn run(cli: Cli) -> Outcome {
    let ctx = Ctx { json: cli.json, out: cli.out.clone() };
    let (model, exp) = resolve(&cli)?;
    match &cli.command {
        Command::Gradcheck { seeds, corrupt_op } => gradcheck(&ctx, *seeds, corrupt_op.as_deref()),
        Command::IouOracle { pairs, samples } => iou_oracle(&ctx, *pairs, *samples, cli.seed),
        Command::Synth { scenes } => synth(&ctx, *scenes, &exp, cli.seed),
        Command::ParseKitti { dir } => parse_kitti(&ctx, dir),
        Command::Train { loss, steps, resume } => train_cmd(&ctx, model, &exp, (*loss).into(), *steps, resume.as_deref()),
        Command::Experiment { which, loss } => experiment(&ctx, *which, &model, &exp, (*loss).into()),
        Command::Eval { dets, gts, tau, upsilons, ap } => eval(&ctx, dets, gts, *tau, upsilons, *ap),
        Command::FuseInspect { checkpoint } => fuse_inspect(&ctx, model, &exp, checkpoint.as_deref()),
    }
}

fn gradcheck(ctx: &Ctx, seeds: u64, corrupt: Option<&str>) -> Outcome {
    let mut reports = gradient_suite(0..seeds)?;
    if let Some(name) = corrupt {
        let case = operator_cases()
            .into_iter()
            .find(|c| c.name == name)
            .ok_or_else(|| Failure::Usage(format!("unknown operator `{name}`")))?;
        reports.push(check_corrupted(&case, 0, 0.1)?);
    }
    let failed: Vec<_> = reports.iter().filter(|r| !r.passes(GRAD_TOL)).collect();
    let worst = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    ctx.write_json("gradcheck.json", &reports)?;
    ctx.emit(&reports, || {
        let mut s = format!("{} checks, worst relative error {worst:.3e}, tolerance {GRAD_TOL:e}", reports.len());
        for r in &failed {
            s.push_str(&format!("\nFAIL {} seed {}: {:.3e}", r.op_name, r.seed, r.max_rel_err));
        }
        s
    });
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Verification(format!("{} gradient checks failed", failed.len())))
    }
}

fn iou_oracle(ctx: &Ctx, pairs: usize, samples: usize, seed: u64) -> Outcome {
    let cases = iou_oracle_suite(pairs, samples, seed);
    let bad: Vec<_> = cases.iter().enumerate().filter(|(_, c)| !c.passes()).collect();
    let worst = cases.iter().map(|c| c.abs_err()).fold(0.0, f64::max);
    ctx.write_json("iou_oracle.json", &cases)?;
    ctx.emit(&cases, || {
        let mut s = format!("{} pairs, {samples} samples each, worst |iou - estimate| {worst:.3e}", cases.len());
        for (i, c) in &bad {
            s.push_str(&format!("\nFAIL pair {i}: iou {:.5} estimate {:.5} ± {:.1e}", c.iou, c.estimate, c.std_err));
        }
        s
    });
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Failure::Verification(format!("{} pairs disagree with the oracle", bad.len())))
    }
}

#[derive(Serialize)]
struct DirSummary {
    scenes: usize,
    points: usize,
    objects: usize,
}

fn synth(ctx: &Ctx, count: usize, exp: &ExperimentConfig, seed: u64) -> Outcome {
    let dir = ctx.out_dir()?;
    let mut sum = DirSummary { scenes: 0, points: 0, objects: 0 };
    for i in 0..count {
        let scene = generate_synthetic_scene(&SyntheticSceneConfig { seed: seed.wrapping_add(i as u64), ..exp.scene.clone() })?;
        write_scene(dir, i, &scene)?;
        sum.scenes += 1;
        sum.points += scene.points.len();
        sum.objects += scene.objects.len();
    }
    ctx.emit(&sum, || format!("wrote {} scenes ({} points, {} objects) to {}", sum.scenes, sum.points, sum.objects, dir.display()));
    Ok(())
}

fn parse_kitti(ctx: &Ctx, dir: &Path) -> Outcome {
    let mut sum = DirSummary { scenes: 0, points: 0, objects: 0 };
    for i in scene_indices(dir)? {
        verify_roundtrip(dir, i).map_err(|e| Failure::Verification(format!("scene {i:06}: {e}")))?;
        let scene = read_scene(dir, i)?;
        sum.scenes += 1;
        sum.points += scene.points.len();
        sum.objects += scene.objects.len();
    }
    ctx.emit(&sum, || format!("{} scenes round-trip ({} points, {} objects)", sum.scenes, sum.points, sum.objects));
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    step: u64,
    loss_mode: LossMode,
    first_loss: Option<f64>,
    last_loss: Option<f64>,
}

fn train_cmd(ctx: &Ctx, model: TwoStreamConfig, exp: &ExperimentConfig, mode: LossMode, steps: Option<usize>, resume: Option<&Path>) -> Outcome {
    let dir = ctx.out_dir()?.to_path_buf();
    let mut state = match resume {
        Some(p) => TrainState::load(fs::File::open(p)?)?,
        None => TrainState::new(&model)?,
    };
    let cfg = state.config().clone();
    let total = steps.unwrap_or(exp.steps) as u64;
    let scenes = prepare_all(&synthetic_split(exp, cfg.seed, Split::Train, false)?, &cfg)?;
    let remaining = total.saturating_sub(state.step) as usize;
    let trace = train(&mut state, &scenes, remaining, mode)?;
    let mut lines = String::new();
    for l in &trace {
        lines.push_str(&serde_json::to_string(l).expect("loss serializes"));
        lines.push('\n');
    }
    let trace_path = dir.join("trace.jsonl");
    if resume.is_some() && trace_path.exists() {
        let mut old = fs::read_to_string(&trace_path)?;
        old.push_str(&lines);
        lines = old;
    }
    fs::write(&trace_path, lines)?;
    state.save(fs::File::create(dir.join("checkpoint.bin"))?)?;
    let sum = TrainSummary {
        step: state.step,
        loss_mode: mode,
        first_loss: trace.first().map(|l| l.total),
        last_loss: trace.last().map(|l| l.total),
    };
    ctx.emit(&sum, || format!("step {} ({:?}): loss {:?} -> {:?}", sum.step, mode, sum.first_loss, sum.last_loss));
    Ok(())
}

fn experiment(ctx: &Ctx, which: ExperimentArg, model: &TwoStreamConfig, exp: &ExperimentConfig, mode: LossMode) -> Outcome {
    match which {
        ExperimentArg::Consistency => {
            let r = run_consistency_experiment(model, exp)?;
            ctx.write_json("consistency.json", &r)?;
            ctx.emit(&r, || {
                let mut s = format!("upsilon  R_ce     R_iou    (tau {})", r.tau);
                for row in &r.rows {
                    s.push_str(&format!("\n{:.2}     {}  {}", row.upsilon, opt(row.r_first), opt(row.r_second)));
                }
                s.push_str(&format!("\nce >= iou at every defined threshold: {:?}", r.ce_dominates));
                s
            });
        }
        ExperimentArg::Fusion => {
            let r = run_fusion_ablation(model, exp, mode)?;
            ctx.write_json("fusion_ablation.json", &r)?;
            ctx.emit(&r, || {
                let mut s = format!("fusion   images     AP@40 (3D IoU {})", r.ap_iou);
                for a in r.clean.iter().chain(&r.corrupted) {
                    let img = if a.corrupted { "corrupted" } else { "clean" };
                    s.push_str(&format!("\n{:<8} {img:<10} {}", a.fusion.to_string(), opt(a.ap)));
                }
                s
            });
        }
    }
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "   -   ".to_string(), |x| format!("{x:.4}"))
}

#[derive(Serialize)]
struct EvalReport {
    detections: usize,
    ground_truth: usize,
    tau: f64,
    sweep: Vec<lifusion::eval::SweepPoint>,
    ap_iou: Option<f64>,
    ap_40: Option<f64>,
}

fn eval(ctx: &Ctx, dets: &Path, gts: &Path, tau: f64, upsilons: &str, ap: Option<f64>) -> Outcome {
    let read = |p: &Path| fs::read_to_string(p).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())));
    let d = parse_detections_jsonl(&read(dets)?).map_err(|e| Failure::Usage(format!("{}: {e}", dets.display())))?;
    let g = parse_ground_truth_jsonl(&read(gts)?).map_err(|e| Failure::Usage(format!("{}: {e}", gts.display())))?;
    let ups = upsilons
        .split(',')
        .map(|u| u.trim().parse::<f64>().map_err(|_| Failure::Usage(format!("bad threshold `{u}`"))))
        .collect::<Result<Vec<_>, _>>()?;
    let cfg = ConsistencyConfig { tau, upsilons: ups };
    cfg.validate()?;
    let report = EvalReport {
        detections: d.len(),
        ground_truth: g.len(),
        tau,
        sweep: sweep_consistency(&d, &g, &cfg),
        ap_iou: ap,
        ap_40: ap.and_then(|t| ap_40(&d, &g, t)),
    };
    ctx.write_json("eval.json", &report)?;
    ctx.emit(&report, || {
        let mut s = format!("{} detections, {} ground-truth boxes, tau {tau}", report.detections, report.ground_truth);
        for p in &report.sweep {
            s.push_str(&format!("\nupsilon {:.2}: R {} over {} candidates", p.upsilon, opt(p.ratio), p.n_candidates));
        }
        if let Some(t) = ap {
            s.push_str(&format!("\nAP@40 (3D IoU {t}): {}", opt(report.ap_40)));
        }
        s
    });
    Ok(())
}

#[derive(Serialize)]
struct SiteStats {
    site: String,
    stats: Option<lifusion::fusion::WeightMapStats>,
}

fn fuse_inspect(ctx: &Ctx, model: TwoStreamConfig, exp: &ExperimentConfig, checkpoint: Option<&Path>) -> Outcome {
    let state = match checkpoint {
        Some(p) => TrainState::load(fs::File::open(p)?)?,
        None => TrainState::new(&model)?,
    };
    let cfg = state.config().clone();
    let one = ExperimentConfig { eval_scenes: 1, ..exp.clone() };
    let scene = prepare_all(&synthetic_split(&one, cfg.seed, Split::Eval, false)?, &cfg)?.remove(0);
    let mut g = Graph::new();
    let p = state.params.bind(&mut g, false);
    let out = state.model.two_stream_forward(&mut g, &p, &scene)?;
    let names = ["site0", "site1", "site2", "site3", "final"];
    let sites: Vec<SiteStats> = out
        .weight_maps
        .iter()
        .zip(names)
        .map(|(&w, n)| SiteStats { site: n.to_string(), stats: weight_map_stats(g.value(w).data()) })
        .collect();
    ctx.write_json("weight_maps.json", &sites)?;
    ctx.emit(&sites, || {
        if sites.is_empty() {
            return format!("fusion mode `{}` has no gates", cfg.fusion);
        }
        let mut s = String::from("site    min      mean     max      points");
        for x in &sites {
            if let Some(st) = &x.stats {
                s.push_str(&format!("\n{:<7} {:.4}   {:.4}   {:.4}   {}", x.site, st.min, st.mean, st.max, st.count));
            }
        }
        s
    });
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            e.print().ok();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verification(m)) => {
            eprintln!("verification failed: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
