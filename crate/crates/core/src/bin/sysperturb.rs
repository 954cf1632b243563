use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use sysperturb::diff::{Thresholds, Verdict};
use sysperturb::monitor::resolve_target;
use sysperturb::orchestrator::{
    plan_campaign, profile, resume_campaign, run_campaign, CampaignConfig, ExperimentResult, Phases, Progress, Runner,
    WorkloadConfig,
};
use sysperturb::report::{self, TableFormat};
use sysperturb::syscall_model::{errno_by_name, syscall_by_name, DelaySpec, SyscallTable};
use sysperturb::workload::{RequestTemplate, WorkloadSpec};
use sysperturb::PerturbationSpec;

/// System call perturbation experiments against a running process.
#[derive(Parser, Debug)]
#[command(name = "sysperturb", version)]
struct Cli {
    /// More logging (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    /// Output directory.
    #[arg(long, env = "SYSPERTURB_OUT", global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Count the target's syscalls without perturbing it.
    Profile {
        /// pid:N, name:SUBSTR or cgroup:PATH
        #[arg(long)]
        target: String,
        /// Seconds.
        #[arg(long, default_value_t = 10.0)]
        duration: f64,
        #[arg(long)]
        no_follow: bool,
        #[arg(long)]
        json: bool,
    },
    /// One before/during/after experiment.
    Experiment(ExperimentArgs),
    /// Every planned perturbation, for the configured number of rounds.
    Campaign {
        /// JSON campaign file.
        #[arg(required_unless_present = "resume")]
        config: Option<PathBuf>,
        /// Print the plan and exit.
        #[arg(long)]
        dry_run: bool,
        /// Continue the campaign stored in this directory.
        #[arg(long, conflicts_with = "config")]
        resume: Option<PathBuf>,
        /// Override a classifier threshold, e.g. `dip=0.7`.
        #[arg(long = "threshold", value_name = "NAME=VALUE")]
        thresholds: Vec<String>,
    },
    /// Regenerate tables, charts and index.html of a campaign directory.
    Report {
        dir: PathBuf,
        #[arg(long, value_enum, default_value = "markdown")]
        format: Format,
    },
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
enum Format {
    Markdown,
    Csv,
}

#[derive(Args, Debug)]
struct ExperimentArgs {
    /// Running target; omit with --fixture.
    #[arg(long, required_unless_present = "fixture")]
    target: Option<String>,
    #[arg(long)]
    syscall: String,
    /// Errno name, or 0 for none.
    #[arg(long, default_value = "0")]
    errno: String,
    /// Milliseconds.
    #[arg(long, default_value_t = 0)]
    delay: u64,
    /// Seconds per phase.
    #[arg(long, default_value_t = 60.0)]
    phase: f64,
    /// Drive HTTP requests at this base URL.
    #[arg(long, conflicts_with = "fixture")]
    url: Option<String>,
    /// Request paths (repeatable), used round-robin.
    #[arg(long = "request", default_value = "/")]
    requests: Vec<String>,
    /// Requests per second.
    #[arg(long, default_value_t = 10.0)]
    rate: f64,
    /// Run this fixture once per phase instead of attaching to a target.
    #[arg(long)]
    fixture: Option<String>,
    /// Fixture arguments, after `--`.
    #[arg(last = true)]
    fixture_args: Vec<String>,
    #[arg(long)]
    no_follow: bool,
    #[arg(long = "threshold", value_name = "NAME=VALUE")]
    thresholds: Vec<String>,
    #[arg(long, default_value_t = 1000)]
    sample_interval_ms: u64,
}

fn apply_thresholds(t: &mut Thresholds, overrides: &[String]) -> Result<()> {
    for o in overrides {
        let (k, v) = o.split_once('=').with_context(|| format!("--threshold {o}: expected NAME=VALUE"))?;
        let v: f64 = v.parse().with_context(|| format!("--threshold {o}: not a number"))?;
        t.set(k, v).map_err(anyhow::Error::msg)?;
    }
    Ok(())
}

/// Tracing needs root, CAP_SYS_PTRACE, or a permissive Yama scope.
fn check_privilege() -> Result<()> {
    if unsafe { libc::geteuid() } == 0 {
        return Ok(());
    }
    let cap = std::fs::read_to_string("/proc/self/status")
        .ok()
        .and_then(|s| s.lines().find_map(|l| l.strip_prefix("CapEff:").map(|v| v.trim().to_owned())))
        .and_then(|hex| u64::from_str_radix(&hex, 16).ok())
        .is_some_and(|bits| bits & (1 << 19) != 0);
    let scope = std::fs::read_to_string("/proc/sys/kernel/yama/ptrace_scope").map(|s| s.trim().to_owned()).unwrap_or_default();
    if cap || scope.is_empty() || scope == "0" {
        return Ok(());
    }
    bail!(
        "tracing other processes needs CAP_SYS_PTRACE (kernel.yama.ptrace_scope={scope}); \
         run as root, or grant it with `sudo setcap cap_sys_ptrace+ep $(which sysperturb)`"
    )
}

fn kv(s: &str) -> String {
    if s.contains(char::is_whitespace) { format!("{s:?}") } else { s.to_owned() }
}

fn print_progress(p: Progress<'_>) {
    match p {
        Progress::Planned { experiments, rounds } => {
            eprintln!("event=planned specs={experiments} rounds={rounds} total={}", experiments * rounds as usize)
        }
        Progress::Skipped { index, round, spec } => eprintln!("event=skipped index={index} round={round} spec={}", spec.slug()),
        Progress::Started { index, round, total, spec, id } => {
            eprintln!("event=started index={index} round={round} total={total} spec={} id={id}", spec.slug())
        }
        Progress::Phase { id, phase } => eprintln!("event=phase id={id} phase={phase}"),
        Progress::Finished { result } => eprintln!(
            "event=finished id={} spec={} verdict={} notes={}",
            result.id,
            result.perturbation.slug(),
            result.verdict(),
            kv(&result.diff.notes.join("; "))
        ),
        Progress::Restarted { target } => eprintln!("event=restarted target={target}"),
    }
}

fn summarize(result: &ExperimentResult) {
    println!("verdict={} exit={} id={} spec={}", result.verdict(), result.verdict().exit_code(), result.id, result.perturbation.slug());
    let row = report::table_row(result);
    println!();
    println!("| {} |", report::TABLE_HEADER.join(" | "));
    println!("|{}", "---|".repeat(report::TABLE_HEADER.len()));
    println!("| {} |", row.join(" | "));
    if let Some(d) = &result.diff.domain {
        let show = |s: &Option<sysperturb::diff::DominantStatus>| {
            s.as_ref().map_or("mixed".to_string(), |d| format!("{} ({:.0}%)", d.status, d.share * 100.0))
        };
        println!("\nhttp: before {} / during {} / after {}", show(&d.before), show(&d.during), show(&d.after));
    }
    for n in &result.diff.notes {
        println!("note: {n}");
    }
}

fn cmd_experiment(out: Option<&Path>, a: ExperimentArgs) -> Result<Verdict> {
    let table = SyscallTable::host();
    let syscall = syscall_by_name(&a.syscall, table)?;
    let error = if a.errno == "0" { None } else { Some(errno_by_name(&a.errno)?) };
    let spec = PerturbationSpec::new(syscall, error, DelaySpec::from_millis(a.delay))
        .context("nothing to inject: give --errno, --delay, or both")?;
    let workload = match (&a.fixture, &a.url) {
        (Some(name), _) => Some(WorkloadConfig::Fixture { name: name.clone(), args: a.fixture_args.clone() }),
        (None, Some(url)) => Some(WorkloadConfig::Http(WorkloadSpec {
            requests: a.requests.iter().map(|p| RequestTemplate::get(p)).collect(),
            rate: a.rate,
            duration: a.phase,
            base_url: url.clone(),
        })),
        _ => None,
    };
    let mut file = CampaignConfig::single(a.target.clone(), &spec, workload, Phases::uniform(a.phase)).to_file();
    file.follow_children = !a.no_follow;
    file.sample_interval_ms = a.sample_interval_ms;
    let mut config = CampaignConfig::from_file(file)?;
    apply_thresholds(&mut config.thresholds, &a.thresholds)?;
    check_privilege()?;
    let (result, store) = Runner::new(&config).run(&spec, 1, 1, 1, &mut print_progress)?;
    if let Some(dir) = out {
        let plan = plan_campaign(&config)?;
        let index = plan.iter().position(|p| *p == spec).map_or(1, |i| i + 1);
        let result = ExperimentResult { index, ..result.clone() };
        report::init_campaign_dir(dir, &config.to_file(), &plan, 1)?;
        report::persist_experiment(dir, &result, &store)?;
        report::write_report(dir)?;
        eprintln!("event=written dir={}", dir.display());
    }
    print_progress(Progress::Finished { result: &result });
    summarize(&result);
    Ok(result.verdict())
}

fn cmd_campaign(out: Option<&Path>, config: Option<PathBuf>, dry_run: bool, resume: Option<PathBuf>, overrides: &[String]) -> Result<()> {
    if let Some(dir) = resume {
        check_privilege()?;
        let result = resume_campaign(&dir, &mut print_progress)?;
        return finish_campaign(&dir, &result);
    }
    let path = config.expect("clap requires config without --resume");
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let mut config = CampaignConfig::from_json(&text).with_context(|| format!("in {}", path.display()))?;
    apply_thresholds(&mut config.thresholds, overrides)?;
    let plan = plan_campaign(&config)?;
    println!(
        "planned {} experiments x {} rounds ({} runs)",
        plan.len(),
        config.rounds,
        plan.len() * config.rounds as usize
    );
    if dry_run {
        for (i, spec) in plan.iter().enumerate() {
            println!("{:4} {}", i + 1, spec);
        }
        return Ok(());
    }
    check_privilege()?;
    if let Some(target) = &config.target {
        resolve_target(target).with_context(|| format!("target {target}"))?;
    }
    let dir = out.map(Path::to_owned).unwrap_or_else(|| PathBuf::from("sysperturb-campaign"));
    let result = run_campaign(&config, Some(&dir), &mut print_progress)?;
    finish_campaign(&dir, &result)
}

fn finish_campaign(dir: &Path, result: &sysperturb::CampaignResult) -> Result<()> {
    report::write_report(dir)?;
    let counts = result.verdict_counts();
    let part = |v: Verdict| format!("{}={}", v, counts.get(&v).copied().unwrap_or(0));
    println!(
        "finished {} experiments: {} {} {} {}",
        result.experiments.len(),
        part(Verdict::Survived),
        part(Verdict::Degraded),
        part(Verdict::Crashed),
        part(Verdict::Aborted)
    );
    println!("report: {}", dir.join("report/index.html").display());
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    let out = cli.out.as_deref();
    match cli.command {
        Cmd::Profile { target, duration, no_follow, json } => {
            check_privilege()?;
            let handle = resolve_target(&target)?;
            let table = profile(&handle, Duration::from_secs_f64(duration), !no_follow)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&table)?);
            } else {
                print!("{}", table.to_markdown());
            }
            if let Some(dir) = out {
                std::fs::create_dir_all(dir)?;
                std::fs::write(dir.join("profile.md"), table.to_markdown())?;
                std::fs::write(dir.join("profile.json"), serde_json::to_string_pretty(&table)?)?;
            }
        }
        Cmd::Experiment(args) => {
            let verdict = cmd_experiment(out, args)?;
            return Ok(ExitCode::from(verdict.exit_code() as u8));
        }
        Cmd::Campaign { config, dry_run, resume, thresholds } => cmd_campaign(out, config, dry_run, resume, &thresholds)?,
        Cmd::Report { dir, format } => {
            let result = report::load_results(&dir)?;
            let files = report::write_report(&dir)?;
            let format = match format {
                Format::Markdown => TableFormat::Markdown,
                Format::Csv => TableFormat::Csv,
            };
            print!("{}", report::render_campaign_table(&result, format)?);
            eprintln!("event=report files={} index={}", files.len(), dir.join("report/index.html").display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    // Quiet exit when piped into `head`.
    unsafe { libc::signal(libc::SIGPIPE, libc::SIG_DFL) };
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
