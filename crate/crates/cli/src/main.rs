mod campaign;
mod exit;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::AtomicBool;
use std::time::Duration;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use ckptlab::config::LaunchConfig;
use ckptlab::coordinator::{global_checkpoint, global_restart, query_status, Coordinator, WorkerLink};
use ckptlab::emulator::format_bits;
use ckptlab::engine::{ImageReader, ImageSource};
use ckptlab::license::{LicenseServer, DEFAULT_LEASE};
use ckptlab::process::{BarrierDriver, Process, ProcessOptions, RestoreOptions, Standalone};
use ckptlab::virt::VirtConfig;

use exit::{Failure, ResultExt};

#[derive(Parser)]
#[command(name = "ckptlab", version, about = "Checkpoint, restart and fault-inject gate-level simulations")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a workload described by a launch config.
    Launch(LaunchArgs),
    /// Take a checkpoint: of a freshly launched config at a given cycle, or of
    /// every worker attached to a coordinator.
    Ckpt(CkptArgs),
    /// Resume one image standalone, or several under a coordinator.
    Restart(RestartArgs),
    /// Restart an image once per fault spec and classify every outcome.
    Campaign(campaign::CampaignArgs),
    #[command(hide = true)]
    CampaignWorker(campaign::WorkerArgs),
    /// Run the checkpoint coordinator, or query a running one.
    Coordinator(CoordinatorArgs),
    /// Run the mock seat-licensing service.
    LicenseServe(LicenseArgs),
    /// Print an image header and its section table.
    Inspect { image: PathBuf },
}

#[derive(Args, Clone, Default)]
struct Output {
    /// Write the output trace, one row of bits per cycle.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Do not print script observations.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct LaunchArgs {
    config: PathBuf,
    /// Checkpoint at the first safe-point at or after this cycle. Repeatable.
    #[arg(long = "at-cycle")]
    at_cycle: Vec<u64>,
    /// Also checkpoint every this many milliseconds of wall-clock time.
    #[arg(long)]
    interval_ms: Option<u64>,
    /// Override the cycle count given by the config's `run` line.
    #[arg(long)]
    run: Option<u64>,
    /// After the last cycle, keep serving coordinator checkpoint requests
    /// until killed.
    #[arg(long)]
    serve: bool,
    /// Sleep this long between cycles.
    #[arg(long, default_value_t = 0)]
    pace_us: u64,
    #[command(flatten)]
    out: Output,
}

#[derive(Args)]
struct CkptArgs {
    /// Launch config to run up to the checkpoint.
    config: Option<PathBuf>,
    #[arg(long = "at-cycle", requires = "config")]
    at_cycle: Option<u64>,
    /// Checkpoint every worker registered with this coordinator instead.
    #[arg(long, conflicts_with = "config")]
    coordinator: Option<String>,
    #[arg(long, default_value_t = 60)]
    timeout_secs: u64,
}

#[derive(Args)]
struct RestartArgs {
    #[arg(required = true)]
    images: Vec<PathBuf>,
    /// Load register segments on first access instead of up front.
    #[arg(long)]
    fast: bool,
    /// Environment override applied at restart, `KEY=VALUE`. Repeatable.
    #[arg(long, value_parser = parse_pair)]
    setenv: Vec<(String, String)>,
    #[arg(long)]
    unsetenv: Vec<String>,
    /// Path prefix rewrite applied at restart, `FROM=TO`. Repeatable.
    #[arg(long, value_parser = parse_pair)]
    rewrite: Vec<(String, String)>,
    /// File of `rewrite` / `setenv` / `unsetenv` lines.
    #[arg(long)]
    virt: Option<PathBuf>,
    /// Cycles to run after the restart.
    #[arg(long, default_value_t = 0)]
    run: u64,
    #[arg(long = "at-cycle")]
    at_cycle: Vec<u64>,
    #[arg(long)]
    ckpt_dir: Option<PathBuf>,
    #[arg(long)]
    ckpt_name: Option<String>,
    /// Restart every image together through this coordinator.
    #[arg(long)]
    coordinator: Option<String>,
    #[command(flatten)]
    out: Output,
}

#[derive(Args)]
struct CoordinatorArgs {
    #[arg(long, default_value = "127.0.0.1:7070", conflicts_with = "status")]
    listen: String,
    /// Print the worker table of the coordinator at this address and exit.
    #[arg(long)]
    status: Option<String>,
}

#[derive(Args)]
struct LicenseArgs {
    #[arg(long, default_value = "127.0.0.1:7171")]
    listen: String,
    #[arg(long, default_value_t = 1)]
    capacity: usize,
    #[arg(long, default_value_t = DEFAULT_LEASE.as_secs())]
    lease_secs: u64,
}

fn parse_pair(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .ok_or_else(|| format!("expected KEY=VALUE, got `{s}`"))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::CONFIG } else { exit::OK });
        }
    };
    match dispatch(cli.cmd) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("ckptlab: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<u8, Failure> {
    match cmd {
        Cmd::Launch(a) => launch(a),
        Cmd::Ckpt(a) => ckpt(a),
        Cmd::Restart(a) => restart(a),
        Cmd::Campaign(a) => campaign::run(a),
        Cmd::CampaignWorker(a) => campaign::worker(a),
        Cmd::Coordinator(a) => coordinator(a),
        Cmd::LicenseServe(a) => license_serve(a),
        Cmd::Inspect { image } => inspect(&image),
    }
}

fn load_config(path: &Path) -> Result<LaunchConfig, Failure> {
    LaunchConfig::load(path)
        .with_context(|| format!("config {}", path.display()))
        .config()
}

fn launch_process(cfg: &LaunchConfig, worker_id: u64) -> Result<Process, Failure> {
    let plugins = cfg.build_plugins().config()?;
    let mut spec = cfg.launch_spec();
    spec.options.worker_id = worker_id;
    std::fs::create_dir_all(&spec.options.ckpt_dir)
        .with_context(|| format!("creating {}", spec.options.ckpt_dir.display()))
        .runtime()?;
    Process::launch(spec, plugins).runtime()
}

fn report(p: &Process, out: &Output) -> Result<(), Failure> {
    if !out.quiet {
        for o in p.observations() {
            println!("{o}");
        }
    }
    for c in p.checkpoints() {
        c.wait().runtime()?;
        println!("checkpoint {} {}", c.cycle, c.path.display());
    }
    if let Some(path) = &out.trace {
        let text: String = p.trace().rows().iter().map(|r| format_bits(r) + "\n").collect();
        std::fs::write(path, text)
            .with_context(|| format!("writing {}", path.display()))
            .runtime()?;
    }
    match p.failures() {
        [] => Ok(()),
        fs => Err(Failure::runtime(anyhow!("{}", fs.join("; ")))),
    }
}

fn start_interval(p: &Process, ms: u64) {
    let control = p.control().clone();
    std::thread::spawn(move || loop {
        std::thread::sleep(Duration::from_millis(ms));
        let ticket = control.request();
        while control.result(ticket).is_none() {
            std::thread::sleep(Duration::from_millis(1));
        }
    });
}

fn drive(p: &mut Process, run: u64, serve: bool, pace: Duration, driver: &mut dyn BarrierDriver) -> Result<(), Failure> {
    if serve || !pace.is_zero() {
        let stop = AtomicBool::new(false);
        if serve {
            return p.serve(run, driver, &stop, pace).runtime();
        }
        while p.cycle() < run {
            p.run(1, driver).runtime()?;
            std::thread::sleep(pace);
        }
        Ok(())
    } else {
        p.run_to(run, driver).runtime()
    }
}

fn launch(a: LaunchArgs) -> Result<u8, Failure> {
    let cfg = load_config(&a.config)?;
    let run = a.run.unwrap_or(cfg.run);
    let pace = Duration::from_micros(a.pace_us);
    let mut link = match &cfg.coordinator {
        Some(addr) => Some(
            WorkerLink::connect(addr, 0, 0)
                .with_context(|| format!("coordinator {addr}"))
                .runtime()?,
        ),
        None => None,
    };
    let worker_id = link.as_ref().map_or(1, |l| l.worker_id());
    let mut p = launch_process(&cfg, worker_id)?;
    for c in &a.at_cycle {
        p.checkpoint_at(*c).config()?;
    }
    if let Some(ms) = a.interval_ms {
        start_interval(&p, ms);
    }
    match link.as_mut() {
        Some(l) => drive(&mut p, run, a.serve, pace, l)?,
        None => drive(&mut p, run, a.serve, pace, &mut Standalone::with_worker_id(worker_id))?,
    }
    report(&p, &a.out)?;
    Ok(exit::OK)
}

fn ckpt(a: CkptArgs) -> Result<u8, Failure> {
    if let Some(addr) = &a.coordinator {
        let done = global_checkpoint(addr, Duration::from_secs(a.timeout_secs))
            .with_context(|| format!("coordinator {addr}"))
            .runtime()?;
        for (worker, path) in done {
            println!("worker {worker} {path}");
        }
        return Ok(exit::OK);
    }
    let (Some(config), Some(at)) = (&a.config, a.at_cycle) else {
        return Err(Failure::config(anyhow!("give a config with --at-cycle, or --coordinator")));
    };
    let cfg = load_config(config)?;
    let mut p = launch_process(&cfg, 1)?;
    p.checkpoint_at(at).config()?;
    p.run_to(at, &mut Standalone::new()).runtime()?;
    report(&p, &Output { quiet: true, ..Output::default() })?;
    Ok(exit::OK)
}

fn restart_overrides(a: &RestartArgs) -> Result<VirtConfig, Failure> {
    let mut virt = match &a.virt {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))
                .config()?;
            VirtConfig::parse(&text)
                .with_context(|| path.display().to_string())
                .config()?
        }
        None => VirtConfig::default(),
    };
    for (from, to) in &a.rewrite {
        virt.paths.add_rule(from, to);
    }
    for (k, v) in &a.setenv {
        virt.env.set(k, v);
    }
    for k in &a.unsetenv {
        virt.env.unset(k);
    }
    Ok(virt)
}

fn restore_options(a: &RestartArgs, virt: &VirtConfig, image: &Path) -> RestoreOptions {
    let defaults = ProcessOptions::default();
    let ckpt_dir = a
        .ckpt_dir
        .clone()
        .unwrap_or_else(|| image.parent().map(Path::to_path_buf).unwrap_or_default());
    RestoreOptions {
        fast: a.fast,
        virt: virt.clone(),
        options: ProcessOptions {
            ckpt_dir,
            ckpt_name: a.ckpt_name.clone().unwrap_or(defaults.ckpt_name.clone()),
            ..defaults
        },
        ..RestoreOptions::default()
    }
}

fn restart(a: RestartArgs) -> Result<u8, Failure> {
    let virt = restart_overrides(&a)?;
    for img in &a.images {
        if !img.exists() {
            return Err(Failure::config(anyhow!("{} does not exist", img.display())));
        }
    }
    let Some(addr) = &a.coordinator else {
        let [image] = a.images.as_slice() else {
            return Err(Failure::config(anyhow!("several images need --coordinator")));
        };
        let mut drv = Standalone::new();
        let mut p = Process::restore(&ImageSource::Path(image.clone()), restore_options(&a, &virt, image), &mut drv)
            .with_context(|| format!("restoring {}", image.display()))
            .runtime()?;
        let mut drv = Standalone::with_worker_id(p.worker_id());
        for c in &a.at_cycle {
            p.checkpoint_at(*c).config()?;
        }
        p.run(a.run, &mut drv).runtime()?;
        report(&p, &a.out)?;
        return Ok(exit::OK);
    };

    let sources: Vec<ImageSource> = a.images.iter().map(|i| ImageSource::Path(i.clone())).collect();
    let restarted = global_restart(addr, &sources, |i| restore_options(&a, &virt, &a.images[i]));
    let mut procs = Vec::new();
    for (r, img) in restarted.into_iter().zip(&a.images) {
        procs.push(
            r.with_context(|| format!("restoring {}", img.display()))
                .runtime()?,
        );
    }
    let results: Vec<Result<Process, Failure>> = std::thread::scope(|s| {
        let handles: Vec<_> = procs
            .into_iter()
            .map(|mut r| {
                let a = &a;
                s.spawn(move || {
                    for c in &a.at_cycle {
                        r.process.checkpoint_at(*c).config()?;
                    }
                    r.process.run(a.run, &mut r.link).runtime()?;
                    Ok(r.process)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Failure::runtime(anyhow!("worker thread panicked")))))
            .collect()
    });
    for r in results {
        let p = r?;
        if !a.out.quiet {
            println!("worker {}", p.worker_id());
        }
        report(&p, &a.out)?;
    }
    Ok(exit::OK)
}

fn coordinator(a: CoordinatorArgs) -> Result<u8, Failure> {
    if let Some(addr) = &a.status {
        for line in query_status(addr)
            .with_context(|| format!("coordinator {addr}"))
            .runtime()?
        {
            println!("{line}");
        }
        return Ok(exit::OK);
    }
    let c = Coordinator::serve(&a.listen)
        .with_context(|| format!("listening on {}", a.listen))
        .runtime()?;
    println!("coordinator listening on {}", c.addr());
    c.wait();
    Ok(exit::OK)
}

fn license_serve(a: LicenseArgs) -> Result<u8, Failure> {
    if a.capacity == 0 {
        return Err(Failure::config(anyhow!("capacity must be at least 1")));
    }
    let s = LicenseServer::bind(&a.listen, a.capacity, Duration::from_secs(a.lease_secs))
        .with_context(|| format!("listening on {}", a.listen))
        .runtime()?;
    println!("license service on {} with {} seat(s)", s.addr(), a.capacity);
    s.wait();
    Ok(exit::OK)
}

fn inspect(image: &Path) -> Result<u8, Failure> {
    let file = std::fs::File::open(image)
        .with_context(|| format!("opening {}", image.display()))
        .runtime()?;
    let r = ImageReader::new(file).runtime()?;
    let h = r.header();
    println!("version {}", h.version);
    println!("incarnation {}", h.incarnation);
    println!("cycle {}", h.cycle);
    println!("timestamp {}", h.timestamp);
    println!("schedule-hash {:016x}", h.schedule_hash);
    for e in r.entries() {
        println!("section {} {} bytes", e.name, e.length);
    }
    Ok(exit::OK)
}
