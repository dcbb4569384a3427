//! `nebula` command-line entry point.
//!
//! Exit codes: 0 success, 1 probe or I/O failure, 2 usage error.

mod config;

use std::ffi::OsString;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use nebula::bridge::{serve_policy_session, EchoPolicy};
use nebula::capability::{
    episode_id, run_capability_suite, run_isolation_ablation, CapabilityReport, RunOptions,
};
use nebula::episode::{validate_episode, CameraId, EmbodimentConfig, Family, Tier};
use nebula::policy::{from_selector, PolicyError, PolicyHandle};
use nebula::query::{filter, stratified_split, QueryExpr, SplitSpec, StrataKey};
use nebula::report::{aggregate, export, ExportFormat};
use nebula::storage::{locate_manifest, verify_shard, Dataset, DatasetWriter, Manifest};
use nebula::stress::{run_adaptability, run_probe, Level, MetricRecord, StressKind, StressProfile};
use nebula::taskgen::{generate_variant, list_tasks, TemplateRef, Variant};
use serde_json::json;

#[derive(Parser)]
#[command(name = "nebula", version, about = "Episode data platform and policy evaluation harness")]
struct Cli {
    /// JSON object of flag values for the subcommand; command-line flags win.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Log more to stderr (repeat for more).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate expert episodes into a sharded dataset.
    Gen(GenArgs),
    /// Run the capability suite for one policy.
    RunCapability(CapabilityArgs),
    /// Run one stress probe.
    RunStress(StressArgs),
    /// Compare isolated and entangled Perception grading.
    AblateIsolation(AblateArgs),
    /// List episode refs matching a query.
    Query(QueryArgs),
    /// Stratified train/test split of a dataset.
    Split(SplitArgs),
    /// Check shard integrity and episode validity.
    Verify(VerifyArgs),
    /// Aggregate capability reports and stress records.
    Report(ReportArgs),
    /// Serve a zero-action policy over the bridge on stdio.
    #[command(hide = true)]
    BridgeEcho {
        /// Announce this joint count instead of echoing the harness.
        #[arg(long)]
        dof: Option<u32>,
    },
}

#[derive(Args, Clone)]
struct CatalogArgs {
    /// Families to include (comma-separated; default all).
    #[arg(long, value_delimiter = ',')]
    family: Vec<Family>,
    /// Tiers to include (comma-separated; default all).
    #[arg(long, value_delimiter = ',')]
    tier: Vec<Tier>,
    /// Template ids 1-3 to include (comma-separated; default all).
    #[arg(long, value_delimiter = ',')]
    template: Vec<u8>,
}

impl CatalogArgs {
    fn catalog(&self) -> Vec<TemplateRef> {
        let f = (!self.family.is_empty()).then_some(self.family.as_slice());
        let t = (!self.tier.is_empty()).then_some(self.tier.as_slice());
        list_tasks(f, t)
            .into_iter()
            .filter(|r| self.template.is_empty() || self.template.contains(&r.template_id))
            .collect()
    }
}

#[derive(Args, Clone)]
struct EpisodeArgs {
    /// Episodes per template; seeds run from --seed upward.
    #[arg(long, default_value_t = 10)]
    n: u32,
    /// First seed.
    #[arg(long, env = "NEBULA_SEED", default_value_t = 0)]
    seed: u64,
    /// Square image side per camera; 0 sends blank images.
    #[arg(long, default_value_t = 16)]
    image_size: u32,
    /// Parallel episode workers.
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    catalog: CatalogArgs,
    #[command(flatten)]
    episodes: EpisodeArgs,
    /// Output directory for shards and manifest.
    #[arg(long)]
    out: PathBuf,
    /// Dataset name (shard and manifest file prefix).
    #[arg(long, default_value = "nebula")]
    name: String,
    /// Episodes per shard.
    #[arg(long, default_value_t = 1000)]
    shard_size: usize,
    /// Also write each task spec and initial scene under OUT/scenes.
    #[arg(long)]
    dump_scene: bool,
}

#[derive(Args)]
struct CapabilityArgs {
    #[command(flatten)]
    catalog: CatalogArgs,
    #[command(flatten)]
    episodes: EpisodeArgs,
    /// expert, frozen, reach-only, random:SEED, delayed:MS, jitter:AMP or bridge:COMMAND.
    #[arg(long, default_value = "expert")]
    policy: String,
    /// Output directory; the report is printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Cameras blanked in what the policy sees (comma-separated).
    #[arg(long, value_delimiter = ',')]
    camera_mask: Vec<CameraId>,
    /// Grade Perception with the full grasp-and-place criterion.
    #[arg(long)]
    entangled: bool,
    /// Store every episode under OUT/episodes.
    #[arg(long)]
    record: bool,
    /// Add elapsed seconds to the report metadata.
    #[arg(long)]
    timing: bool,
    /// Also write each task spec and initial scene under OUT/scenes.
    #[arg(long)]
    dump_scene: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Frequency,
    Latency,
    Stability,
    Adaptability,
    Resources,
}

#[derive(Clone, Copy, ValueEnum)]
enum LevelArg {
    V1,
    V2,
    V3,
}

#[derive(Args)]
struct StressArgs {
    #[arg(long, value_enum)]
    kind: KindArg,
    #[arg(long, value_enum)]
    level: LevelArg,
    #[arg(long, default_value = "expert")]
    policy: String,
    /// Closed-loop steps K.
    #[arg(long, default_value_t = nebula::stress::DEFAULT_STEPS)]
    steps: u32,
    /// Calls excluded from timing (default K/10).
    #[arg(long)]
    warmup: Option<u32>,
    /// Episodes for the adaptability probe.
    #[arg(long, default_value_t = 40)]
    n: u32,
    #[arg(long, env = "NEBULA_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 16)]
    image_size: u32,
    /// Accepted for symmetry; probes always run on one thread.
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory; the record is printed to stdout either way.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long, default_value = "reach-only")]
    policy: String,
    #[arg(long, default_value = "Easy")]
    tier: Tier,
    #[command(flatten)]
    episodes: EpisodeArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct QueryArgs {
    /// Manifest file or directory holding one.
    dataset: PathBuf,
    /// Query as JSON, e.g. {"final_success":1}.
    #[arg(long, default_value = "{}")]
    query: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrataArg {
    Family,
    FamilyXTier,
}

#[derive(Args)]
struct SplitArgs {
    dataset: PathBuf,
    #[arg(long, default_value_t = 0.8)]
    train_ratio: f64,
    #[arg(long, value_enum, default_value = "family-x-tier")]
    strata: StrataArg,
    #[arg(long, env = "NEBULA_SEED", default_value_t = 0)]
    seed: u64,
    /// Put every Robustness episode in the test split.
    #[arg(long)]
    holdout_robustness: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Manifest, directory, or a single shard file.
    dataset: PathBuf,
    /// Also decode and validate every episode.
    #[arg(long)]
    deep: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// Capability report or stress record JSON files.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// json, csv or radar_json.
    #[arg(long, default_value = "json")]
    format: String,
    /// Tiers shown in radar output (comma-separated; default all).
    #[arg(long, value_delimiter = ',')]
    tier_mask: Vec<Tier>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// A failed command with its exit code.
struct Fail {
    code: u8,
    message: String,
}

fn failure(e: impl std::fmt::Display) -> Fail {
    Fail {
        code: 1,
        message: e.to_string(),
    }
}

fn usage(e: impl std::fmt::Display) -> Fail {
    Fail {
        code: 2,
        message: e.to_string(),
    }
}

type CmdResult = Result<(), Fail>;

fn write_out(path: &Path, bytes: &[u8]) -> CmdResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| failure(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, bytes).map_err(|e| failure(format!("{}: {e}", path.display())))
}

fn stdout(bytes: &[u8]) -> CmdResult {
    let mut out = io::stdout().lock();
    out.write_all(bytes).and_then(|_| out.flush()).map_err(failure)
}

/// Writes to `out` when given, otherwise to stdout.
fn emit(out: Option<&Path>, bytes: &[u8]) -> CmdResult {
    match out {
        Some(p) => write_out(p, bytes),
        None => stdout(bytes),
    }
}

fn with_newline(mut s: String) -> Vec<u8> {
    s.push('\n');
    s.into_bytes()
}

fn policy_factory(selector: &str) -> Result<impl Fn() -> Result<PolicyHandle, PolicyError> + Sync + '_, Fail> {
    let emb = EmbodimentConfig::desk_arm();
    // Surface selector mistakes as usage errors before any work starts.
    if selector.is_empty() || !selector.starts_with("bridge:") {
        from_selector(selector, &emb).map_err(usage)?;
    }
    Ok(move || from_selector(selector, &emb))
}

fn dump_scenes(dir: &Path, catalog: &[TemplateRef], ep: &EpisodeArgs, entangled: bool) -> CmdResult {
    let variant = Variant {
        probe: None,
        entangled,
    };
    for t in catalog {
        if entangled && t.family != Family::Perception {
            continue;
        }
        for seed in ep.seed..ep.seed + ep.n as u64 {
            let (spec, scene) =
                generate_variant(t.family, t.tier, t.template_id, seed, &variant).map_err(failure)?;
            let doc = json!({"spec": spec, "scene": scene});
            let path = dir.join(format!("{}.json", episode_id(&spec)));
            write_out(&path, &with_newline(serde_json::to_string_pretty(&doc).unwrap()))?;
        }
    }
    Ok(())
}

fn run_options(ep: &EpisodeArgs) -> RunOptions {
    RunOptions {
        image_size: ep.image_size,
        workers: ep.workers.max(1),
        ..RunOptions::default()
    }
}

fn gen(a: GenArgs) -> CmdResult {
    let catalog = a.catalog.catalog();
    if catalog.is_empty() {
        return Err(usage("catalog filter selects no templates"));
    }
    if a.dump_scene {
        dump_scenes(&a.out.join("scenes"), &catalog, &a.episodes, false)?;
    }
    let mut w = DatasetWriter::new(&a.out, a.name.clone(), a.shard_size).map_err(failure)?;
    let factory = policy_factory("expert")?;
    let report = run_capability_suite(&factory, &catalog, a.episodes.n, a.episodes.seed, &run_options(&a.episodes), Some(&mut w))
        .map_err(failure)?;
    let (manifest, path) = w.finish().map_err(failure)?;
    let solved: u32 = report.templates.iter().map(|t| t.successes).sum();
    let summary = json!({
        "episodes": manifest.episode_count(),
        "successful": solved,
        "shards": manifest.shards.len(),
        "manifest": path,
    });
    stdout(&with_newline(summary.to_string()))
}

fn run_capability(a: CapabilityArgs) -> CmdResult {
    let catalog = a.catalog.catalog();
    if catalog.is_empty() {
        return Err(usage("catalog filter selects no templates"));
    }
    if (a.record || a.dump_scene) && a.out.is_none() {
        return Err(usage("--record and --dump-scene need --out"));
    }
    let factory = policy_factory(&a.policy)?;
    let opts = RunOptions {
        camera_mask: a.camera_mask.clone(),
        entangled: a.entangled,
        timing: a.timing,
        ..run_options(&a.episodes)
    };
    if let (true, Some(out)) = (a.dump_scene, &a.out) {
        dump_scenes(&out.join("scenes"), &catalog, &a.episodes, a.entangled)?;
    }
    let mut writer = match (&a.out, a.record) {
        (Some(out), true) => Some(DatasetWriter::new(out.join("episodes"), "capability", 1000).map_err(failure)?),
        _ => None,
    };
    let report = run_capability_suite(&factory, &catalog, a.episodes.n, a.episodes.seed, &opts, writer.as_mut())
        .map_err(failure)?;
    if let Some(w) = writer {
        w.finish().map_err(failure)?;
    }
    let bytes = with_newline(report.to_json());
    emit(a.out.as_ref().map(|o| o.join("capability.json")).as_deref(), &bytes)?;
    let errors: usize = report.templates.iter().map(|t| t.errors.len()).sum();
    if errors > 0 {
        return Err(failure(format!("{errors} episode(s) ended in a policy error")));
    }
    Ok(())
}

fn run_stress(a: StressArgs) -> CmdResult {
    if a.workers.is_some_and(|w| w > 1) {
        log::info!("--workers is ignored: stress probes run on one thread");
    }
    let kind = match a.kind {
        KindArg::Frequency => StressKind::Frequency,
        KindArg::Latency => StressKind::Latency,
        KindArg::Stability => StressKind::Stability,
        KindArg::Adaptability => StressKind::Adaptability,
        KindArg::Resources => StressKind::Resources,
    };
    let level = match a.level {
        LevelArg::V1 => Level::V1,
        LevelArg::V2 => Level::V2,
        LevelArg::V3 => Level::V3,
    };
    let factory = policy_factory(&a.policy)?;
    let mut policy = factory().map_err(failure)?;
    let record: MetricRecord = if kind == StressKind::Adaptability {
        run_adaptability(&mut policy, level, a.n, a.seed, a.image_size).map_err(failure)?
    } else {
        let mut profile = StressProfile::new(kind, level).with_steps(a.steps);
        if let Some(w) = a.warmup {
            profile.warmup = w;
        }
        profile.seed = a.seed;
        profile.image_size = a.image_size;
        run_probe(&mut policy, &profile).map_err(|e| match e {
            nebula::stress::StressError::BadProfile { .. } => usage(e),
            e => failure(e),
        })?
    };
    let bytes = with_newline(record.to_json());
    if let Some(out) = &a.out {
        write_out(&out.join(format!("stress-{}-{}.json", kind.to_string().to_lowercase(), level)), &bytes)?;
    }
    stdout(&bytes)?;
    match &record.error {
        Some(e) => Err(failure(format!("probe failed: {e}"))),
        None => Ok(()),
    }
}

fn ablate(a: AblateArgs) -> CmdResult {
    let factory = policy_factory(&a.policy)?;
    let r = run_isolation_ablation(&factory, a.tier, a.episodes.n, a.episodes.seed, &run_options(&a.episodes))
        .map_err(failure)?;
    emit(a.out.as_ref().map(|o| o.join("ablation.json")).as_deref(), &with_newline(r.to_json()))?;
    if r.implication_violations > 0 {
        return Err(failure(format!("{} trajectories violate entangled => isolated", r.implication_violations)));
    }
    Ok(())
}

fn load_manifest(path: &Path) -> Result<Manifest, Fail> {
    Dataset::open(path).map(|d| d.manifest).map_err(failure)
}

fn query(a: QueryArgs) -> CmdResult {
    let q = QueryExpr::from_json(&a.query).map_err(usage)?;
    let m = load_manifest(&a.dataset)?;
    let refs = filter(&m, &q).map_err(usage)?;
    emit(a.out.as_deref(), &with_newline(serde_json::to_string(&refs).unwrap()))
}

fn split(a: SplitArgs) -> CmdResult {
    let spec = SplitSpec {
        train_ratio: a.train_ratio,
        strata_key: match a.strata {
            StrataArg::Family => StrataKey::Family,
            StrataArg::FamilyXTier => StrataKey::FamilyXTier,
        },
        seed: a.seed,
        holdout_robustness: a.holdout_robustness,
    };
    let m = load_manifest(&a.dataset)?;
    let s = stratified_split(&m, &spec).map_err(|e| match e {
        nebula::query::QueryError::BadRatio(_) => usage(e),
        e => failure(e),
    })?;
    emit(a.out.as_deref(), &with_newline(serde_json::to_string_pretty(&s).unwrap()))
}

fn verify(a: VerifyArgs) -> CmdResult {
    let is_shard = a.dataset.is_file() && !a.dataset.to_string_lossy().ends_with(".json");
    let shards: Vec<PathBuf> = if is_shard {
        vec![a.dataset.clone()]
    } else {
        let ds = Dataset::open(locate_manifest(&a.dataset).map_err(failure)?).map_err(failure)?;
        (0..ds.manifest.shards.len()).filter_map(|i| ds.shard_path(i)).collect()
    };
    let mut problems = Vec::new();
    if !is_shard {
        let m = load_manifest(&a.dataset)?;
        problems.extend(m.validate().into_iter().map(|p| json!({"manifest": p})));
    }
    let mut episodes = 0u64;
    for path in &shards {
        let report = verify_shard(path).map_err(|e| failure(format!("{}: {e}", path.display())))?;
        episodes += report.episode_count.unwrap_or(0);
        for f in &report.failures {
            problems.push(json!({"shard": path, "failure": f}));
        }
        if a.deep && report.is_ok() {
            let shard = nebula::storage::Shard::open(path).map_err(failure)?;
            for ep in shard.episodes() {
                let ep = ep.map_err(failure)?;
                let v = validate_episode(&ep);
                if !v.is_valid() {
                    problems.push(json!({"episode": ep.episode_id, "violations": v.violations}));
                }
            }
        }
    }
    let summary = json!({"shards": shards.len(), "episodes": episodes, "ok": problems.is_empty(), "problems": problems});
    stdout(&with_newline(serde_json::to_string_pretty(&summary).unwrap()))?;
    if problems.is_empty() {
        Ok(())
    } else {
        Err(failure(format!("{} problem(s) found", problems.len())))
    }
}

fn report(a: ReportArgs) -> CmdResult {
    let format: ExportFormat = a.format.parse().map_err(usage)?;
    let mut caps: Vec<CapabilityReport> = Vec::new();
    let mut stress: Vec<MetricRecord> = Vec::new();
    for path in &a.inputs {
        let text = fs::read_to_string(path).map_err(|e| failure(format!("{}: {e}", path.display())))?;
        if let Ok(r) = serde_json::from_str::<CapabilityReport>(&text) {
            caps.push(r);
        } else if let Ok(m) = serde_json::from_str::<MetricRecord>(&text) {
            stress.push(m);
        } else {
            return Err(failure(format!("{}: neither a capability report nor a stress record", path.display())));
        }
    }
    let r = aggregate(&caps, &stress).map_err(failure)?;
    let tiers = (!a.tier_mask.is_empty()).then_some(a.tier_mask.as_slice());
    let mut bytes = export(&r, format, tiers).map_err(failure)?;
    if format != ExportFormat::Csv {
        bytes.push(b'\n');
    }
    emit(a.out.as_deref(), &bytes)
}

fn bridge_echo(dof: Option<u32>) -> CmdResult {
    let stdin = io::stdin();
    let stdout = io::stdout();
    let (mut r, mut w) = (stdin.lock(), stdout.lock());
    let summary = serve_policy_session(&mut r, &mut w, &mut EchoPolicy::new(), dof);
    match summary.error {
        Some(e) => Err(failure(e)),
        None => Ok(()),
    }
}

/// Parses argv, folding in `--config` values the command line left unset.
fn parse(argv: Vec<OsString>) -> Result<Cli, clap::Error> {
    let cmd = Cli::command();
    let first = cmd.clone().try_get_matches_from(&argv)?;
    let merged = config::apply(&cmd, &argv, &first)
        .map_err(|e| Cli::command().error(clap::error::ErrorKind::ValueValidation, e))?;
    let matches = cmd.try_get_matches_from(merged)?;
    Cli::from_arg_matches(&matches)
}

fn main() -> ExitCode {
    let cli = match parse(std::env::args_os().collect()) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .target(env_logger::Target::Stderr)
        .init();
    let result = match cli.cmd {
        Cmd::Gen(a) => gen(a),
        Cmd::RunCapability(a) => run_capability(a),
        Cmd::RunStress(a) => run_stress(a),
        Cmd::AblateIsolation(a) => ablate(a),
        Cmd::Query(a) => query(a),
        Cmd::Split(a) => split(a),
        Cmd::Verify(a) => verify(a),
        Cmd::Report(a) => report(a),
        Cmd::BridgeEcho { dof } => bridge_echo(dof),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("nebula: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
