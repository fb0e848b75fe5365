use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use behave::compose::{split_prompt, CompositionConfig, Generator};
use behave::dataset::Dataset;
use behave::error::Error;
use behave::pipeline::{self, RunConfig};
use behave::text::{TokenTable, Vocabulary};
use behave::theory::{self, Prop1Grid, SuiteReport};
use behave::train::{read_jsonl, smooth, write_jsonl, LossRecord};
use behave::flow::FlowRecord;

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERIC: u8 = 3;
const EXIT_BOUND: u8 = 4;

#[derive(Parser)]
#[command(name = "behave", version, about = "Text-conditioned behavioral programs over a synthetic latent-conditioned policy")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Run configuration (JSON). Defaults to the built-in configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed; overrides BEHAVE_SEED and the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Artifact directory; overrides `paths.out_dir`.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Upper bound on worker threads.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    GenData,
    /// Train the bottleneck on the dataset.
    TrainVbb,
    /// Train the generator on top of a trained bottleneck.
    TrainFlow,
    /// Single-shot generation from one prompt.
    Generate(PromptArgs),
    /// Clause-by-clause generation with overlap blending.
    Compose(ComposeArgs),
    /// Evaluate the trained models on the held-out split.
    Eval {
        /// Also write CSV series for loss curves and the bound-tightness sweep.
        #[arg(long)]
        emit_plot_data: bool,
    },
    /// Check the rollout, smoothing and retrieval bounds on random instances.
    VerifyBounds {
        #[arg(long, value_enum, default_value_t = Prop::All)]
        prop: Prop,
        #[arg(long, default_value_t = 500)]
        instances: usize,
        /// JSON grid for the rollout-bound tightness sweep.
        #[arg(long)]
        grid: Option<PathBuf>,
    },
    /// Train one bottleneck per compression factor and compare reconstruction.
    SweepCompression {
        #[arg(long, value_delimiter = ',', default_values_t = vec![4usize, 8, 16])]
        factors: Vec<usize>,
    },
}

#[derive(Args)]
struct PromptArgs {
    /// Prompt text, e.g. "walk" or "walk then turn".
    #[arg(long)]
    prompt: String,
    /// Output JSON file; defaults to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    guidance: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args)]
struct ComposeArgs {
    #[command(flatten)]
    prompt: PromptArgs,
    #[arg(long)]
    overlap: Option<usize>,
    /// Frames kept per clause; defaults to a split of the dataset's latent length.
    #[arg(long)]
    stage_len: Option<usize>,
    /// Re-project blended latents onto the sphere.
    #[arg(long)]
    reproject: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Prop {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Tv,
    All,
}

enum Failure {
    Error(Error),
    Bounds(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Error(e.into())
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::ConfigInvalid(_) | Error::InvalidSpec(_) | Error::MissingArtifact(_) | Error::Io(_) | Error::Serde(_) | Error::EmptyClause(_) => EXIT_CONFIG,
        _ => EXIT_NUMERIC,
    }
}

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
    threads: usize,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn load_dataset(&self) -> Result<Dataset, Error> {
        let p = self.path("dataset.json");
        if !p.exists() {
            return Err(Error::MissingArtifact(format!("{} (run `behave gen-data` first)", p.display())));
        }
        Dataset::load(&p)
    }
}

fn load_config(global: &Global) -> Result<Ctx, Error> {
    let base = match &global.config {
        Some(p) => RunConfig::from_json(&std::fs::read_to_string(p).map_err(|e| Error::ConfigInvalid(format!("{}: {e}", p.display())))?)?,
        None => RunConfig::default(),
    };
    let env_seed = match std::env::var("BEHAVE_SEED") {
        Ok(v) => Some(v.trim().parse::<u64>().map_err(|_| Error::ConfigInvalid(format!("BEHAVE_SEED={v:?} is not an unsigned integer")))?),
        Err(_) => None,
    };
    let seed = global.seed.or(env_seed).unwrap_or(base.seed);
    let mut cfg = base.resolved(seed);
    if let Some(dir) = &global.out_dir {
        cfg.paths.out_dir = dir.clone();
    }
    cfg.validate()?;
    if global.threads == 0 {
        return Err(Error::ConfigInvalid("--threads must be at least 1".into()));
    }
    std::fs::create_dir_all(&cfg.paths.out_dir)?;
    Ok(Ctx { out: cfg.paths.out_dir.clone(), cfg, threads: global.threads })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Error> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn write_timing(ctx: &Ctx, command: &str, started: SystemTime, elapsed: f64) -> Result<(), Error> {
    let secs = |t: SystemTime| t.duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
    write_json(
        &ctx.path(&format!("{command}.timing.json")),
        &json!({ "command": command, "started_unix": secs(started), "elapsed_seconds": elapsed, "threads": ctx.threads }),
    )
}

fn gen_data(ctx: &Ctx) -> CmdResult {
    let ds = pipeline::generate_data(&ctx.cfg)?;
    ds.save(&ctx.path("dataset.json"))?;
    write_json(&ctx.path("config.json"), &ctx.cfg)?;
    println!("wrote {} samples ({} behaviors) to {}", ds.samples.len(), ds.spec.n_behaviors, ctx.path("dataset.json").display());
    Ok(())
}

fn train_vbb(ctx: &Ctx) -> CmdResult {
    let ds = ctx.load_dataset()?;
    let trained = pipeline::train_vbb(&ctx.cfg, &ds)?;
    pipeline::save_bottleneck(&ctx.path("bottleneck"), &trained, &ctx.cfg)?;
    write_jsonl(&ctx.path("bottleneck_loss.jsonl"), &trained.history)?;
    let last = trained.history.last().map_or(f64::NAN, |r| r.total);
    println!("bottleneck: {} parameters, {} steps, final loss {last:.5}", trained.model.num_params(), trained.history.len());
    Ok(())
}

fn load_bottleneck(ctx: &Ctx) -> Result<behave::bottleneck::BottleneckModel, Error> {
    pipeline::load_bottleneck(&ctx.path("bottleneck")).map_err(|e| match e {
        Error::MissingArtifact(m) => Error::MissingArtifact(format!("{m} (run `behave train-vbb` first)")),
        e => e,
    })
}

fn load_flow(ctx: &Ctx) -> Result<behave::flow::FlowModel, Error> {
    pipeline::load_flow(&ctx.path("flow")).map_err(|e| match e {
        Error::MissingArtifact(m) => Error::MissingArtifact(format!("{m} (run `behave train-flow` first)")),
        e => e,
    })
}

fn train_flow(ctx: &Ctx) -> CmdResult {
    let ds = ctx.load_dataset()?;
    let bottleneck = load_bottleneck(ctx)?;
    let trained = pipeline::train_generator(&ctx.cfg, &ds, &bottleneck)?;
    pipeline::save_flow(&ctx.path("flow"), &trained, &ctx.cfg)?;
    write_jsonl(&ctx.path("flow_loss.jsonl"), &trained.history)?;
    let last = trained.history.last().map_or(f64::NAN, |r| r.loss);
    println!("generator: {} parameters, {} steps, final loss {last:.5}", trained.model.num_params(), trained.history.len());
    Ok(())
}

fn emit(out: Option<&Path>, value: &serde_json::Value) -> Result<(), Error> {
    match out {
        Some(p) => write_json(p, value),
        None => {
            println!("{}", serde_json::to_string_pretty(value)?);
            Ok(())
        }
    }
}

fn generate(ctx: &Ctx, args: &PromptArgs, compose: Option<&ComposeArgs>) -> CmdResult {
    let ds = ctx.load_dataset()?;
    let bottleneck = load_bottleneck(ctx)?;
    let flow = load_flow(ctx)?;
    let world = ds.world()?;
    let table = TokenTable::new(bottleneck.cfg.text);
    let vocab = Vocabulary::for_behaviors(ds.spec.n_behaviors);
    let tokens = vocab.tokenize(&args.prompt)?;
    let mut sampler = ctx.cfg.sampler;
    if let Some(g) = args.guidance {
        sampler.guidance_scale = g;
    }
    if let Some(s) = args.steps {
        sampler.steps = s;
    }
    let generator = Generator { flow: &flow, bottleneck: &bottleneck, table: &table, world: &world, norm_floor: ds.spec.extraction.norm_floor };
    let s1 = pipeline::cli_initial_state(&ctx.cfg, ctx.cfg.seed);
    let seed = ctx.cfg.eval_seed();
    let (rollout, mode, comp) = match compose {
        None => (generator.generate(&tokens, &sampler, s1.view(), seed)?, "single", None),
        Some(o) => {
            let prompt = split_prompt(&tokens, ds.spec.separator_token())?;
            let mut comp = CompositionConfig { overlap: o.overlap.unwrap_or(ctx.cfg.composition.overlap), ..ctx.cfg.composition.clone() };
            if o.stage_len.is_some() {
                comp.stage_len = o.stage_len;
            }
            comp.reproject |= o.reproject;
            if comp.stage_len.is_none() {
                comp.stage_len = Some(behave::compose::stage_len_for_total(ds.spec.latent_len, prompt.len(), comp.overlap));
            }
            (generator.generate_composed(&prompt, &sampler, &comp, s1.view(), seed)?, "compose", Some(comp))
        }
    };
    let value = json!({
        "prompt": args.prompt,
        "tokens": tokens,
        "mode": mode,
        "composition": comp,
        "sampler": sampler,
        "states": rollout.states.to_rows(),
        "latents": rollout.latents.to_rows(),
        "boundaries": rollout.boundaries,
        "per_stage_lengths": rollout.stage_lengths,
        "sphere_deviation": rollout.sphere_deviation,
        "config": ctx.cfg,
    });
    emit(args.out.as_deref(), &value)?;
    if args.out.is_some() {
        println!("{mode}: {} latents, boundaries {:?}", rollout.latents.len(), rollout.boundaries);
    }
    Ok(())
}

fn eval(ctx: &Ctx, emit_plot_data: bool) -> CmdResult {
    let ds = ctx.load_dataset()?;
    let bottleneck = load_bottleneck(ctx)?;
    let flow = load_flow(ctx)?;
    let ev = pipeline::evaluate(&ctx.cfg, &ds, &bottleneck, &flow)?;
    write_json(&ctx.path("eval.json"), &json!({ "evaluation": ev, "config": ctx.cfg }))?;
    std::fs::write(ctx.path("eval.csv"), format!("{}\n{}\n", ev.report.csv_header(), ev.report.csv_row()))?;
    let r = &ev.report;
    let c = &ev.composition;
    println!("recon mse      {:.5} ({:.3} of untrained)", r.recon_mse, ev.recon_ratio);
    println!("action kl      {:.5}", r.action_kl);
    println!("retrieval top1 {:.3} (frame-token similarity {:.3})", r.retrieval_top_k.get(&1).copied().unwrap_or(f64::NAN), ev.similarity_top1);
    println!("prototype acc  {:.3}", ev.prototype_accuracy);
    println!("order acc      compose {:.3} / single {:.3} (p = {:.2e})", c.compose_order_accuracy, c.single_order_accuracy, c.order_p_value);
    println!("transition     compose {:.3} / single {:.3} (p = {:.2e})", c.compose_transition, c.single_transition, c.transition_p_value);
    if emit_plot_data {
        let dir = ctx.path("plots");
        std::fs::create_dir_all(&dir)?;
        let bn: Vec<LossRecord> = read_jsonl(&ctx.path("bottleneck_loss.jsonl")).map_err(|_| Error::MissingArtifact("bottleneck_loss.jsonl".into()))?;
        let totals: Vec<f64> = bn.iter().map(|r| r.total).collect();
        let sm = smooth(&totals, 25);
        let mut csv = String::from("step,total,rec,kl,sem,total_smoothed\n");
        for (r, s) in bn.iter().zip(&sm) {
            csv += &format!("{},{},{},{},{},{}\n", r.step, r.total, r.rec, r.kl, r.sem, s);
        }
        std::fs::write(dir.join("bottleneck_loss.csv"), csv)?;
        let fl: Vec<FlowRecord> = read_jsonl(&ctx.path("flow_loss.jsonl")).map_err(|_| Error::MissingArtifact("flow_loss.jsonl".into()))?;
        let sm = smooth(&fl.iter().map(|r| r.loss).collect::<Vec<_>>(), 25);
        let mut csv = String::from("step,loss,loss_smoothed\n");
        for (r, s) in fl.iter().zip(&sm) {
            csv += &format!("{},{},{}\n", r.step, r.loss, s);
        }
        std::fs::write(dir.join("flow_loss.csv"), csv)?;
        std::fs::write(dir.join("rollout_bound_sweep.csv"), theory::sweep_csv(&theory::sweep_prop1(&Prop1Grid::default())?))?;
        println!("plot data in {}", dir.display());
    }
    Ok(())
}

fn verify_bounds(ctx: &Ctx, prop: Prop, instances: usize, grid: Option<&Path>) -> CmdResult {
    let seed = ctx.cfg.seed;
    let mut suites: Vec<SuiteReport> = Vec::new();
    if matches!(prop, Prop::One | Prop::All) {
        suites.push(theory::prop1_suite(instances, seed)?);
    }
    if matches!(prop, Prop::Two | Prop::All) {
        suites.push(theory::prop2_suite(instances, seed)?);
    }
    if matches!(prop, Prop::Tv | Prop::All) {
        suites.push(theory::tv_suite(instances, seed)?);
    }
    let sweep = match grid {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::ConfigInvalid(format!("{}: {e}", p.display())))?;
            let g: Prop1Grid = serde_json::from_str(&text).map_err(|e| Error::ConfigInvalid(format!("grid: {e}")))?;
            let rows = theory::sweep_prop1(&g)?;
            std::fs::write(ctx.path("rollout_bound_sweep.csv"), theory::sweep_csv(&rows))?;
            Some(rows)
        }
        None => None,
    };
    let sweep_ok = sweep.as_ref().map_or(true, |rows| rows.iter().all(|r| r.pass));
    let all_pass = suites.iter().all(SuiteReport::all_pass) && sweep_ok;
    write_json(&ctx.path("bounds.json"), &json!({ "seed": seed, "instances": instances, "suites": suites, "sweep": sweep, "all_pass": all_pass }))?;
    for s in &suites {
        println!("{:<6} {}/{} pass ({} outside the margin regime)", s.check, s.passed, s.instances, s.outside_regime);
    }
    if all_pass {
        Ok(())
    } else {
        Err(Failure::Bounds(suites.iter().flat_map(|s| s.failures.iter().take(3).cloned()).collect::<Vec<_>>().join("; ")))
    }
}

fn sweep_compression(ctx: &Ctx, factors: &[usize]) -> CmdResult {
    let ds = ctx.load_dataset()?;
    let rows = pipeline::sweep_compression(&ctx.cfg, &ds, factors)?;
    write_json(&ctx.path("sweep.json"), &json!({ "rows": rows, "config": ctx.cfg }))?;
    let mut csv = String::from("compression,recon_mse,action_kl\n");
    println!("{:>5} {:>12} {:>12}", "c", "recon_mse", "action_kl");
    for r in &rows {
        csv += &format!("{},{},{}\n", r.compression, r.recon_mse, r.action_kl);
        println!("{:>5} {:>12.6} {:>12.6}", r.compression, r.recon_mse, r.action_kl);
    }
    std::fs::write(ctx.path("sweep.csv"), csv)?;
    Ok(())
}

fn run(cli: &Cli, ctx: &Ctx) -> (&'static str, CmdResult) {
    match &cli.command {
        Command::GenData => ("gen-data", gen_data(ctx)),
        Command::TrainVbb => ("train-vbb", train_vbb(ctx)),
        Command::TrainFlow => ("train-flow", train_flow(ctx)),
        Command::Generate(a) => ("generate", generate(ctx, a, None)),
        Command::Compose(a) => ("compose", generate(ctx, &a.prompt, Some(a))),
        Command::Eval { emit_plot_data } => ("eval", eval(ctx, *emit_plot_data)),
        Command::VerifyBounds { prop, instances, grid } => ("verify-bounds", verify_bounds(ctx, *prop, *instances, grid.as_deref())),
        Command::SweepCompression { factors } => ("sweep-compression", sweep_compression(ctx, factors)),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let ctx = match load_config(&cli.global) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(exit_code(&e));
        }
    };
    let started = SystemTime::now();
    let clock = Instant::now();
    let (name, result) = run(&cli, &ctx);
    if let Err(e) = write_timing(&ctx, name, started, clock.elapsed().as_secs_f64()) {
        eprintln!("warning: could not write timing sidecar: {e}");
    }
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
        Err(Failure::Bounds(msg)) => {
            eprintln!("bound violation: {msg}");
            ExitCode::from(EXIT_BOUND)
        }
    }
}
