//! A checkpointable process: runtime, layer stack, plugins and the emulator
//! workload wired together, plus the checkpoint and restart lifecycles.

mod driver;
mod script;
mod workload;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;

use crate::call::{Call, CallError, ClockStep, Reply};
use crate::emulator::{Bits, EmulatorState, Netlist, NetlistError, SimError, Stimulus, Trace};
use crate::engine::{
    load_image, write_image, EngineError, FilePolicy, FileRule, FileImage, ForkTicket, ForkedWriter, ImageSource,
    ImageSummary, ConnImage, PluginBlob, ProcessSnapshot, Registers, TaskImage, WriteOptions,
};
use crate::plugin::{
    CkptControl, ControlError, Event, EventCtx, LockImage, Plugin, PluginEnv, PluginError, PluginSet, RestartInfo,
    Schedule, Side, DEFAULT_GATE_TIMEOUT,
};
use crate::runtime::{ConnClass, ConnRecord, Device, LockRecord, QuiesceError, Runtime, DEFAULT_QUIESCE_TIMEOUT};
use crate::virt::{LayerStack, VirtConfig, VirtTables};

pub use driver::{BarrierDriver, BeginInfo, DriverError, Lifecycle, Standalone};
pub use script::{parse_at, Action, Script};
pub use workload::WorkloadState;

pub const MAIN_TASK: &str = "main";
pub const DEFAULT_CKPT_NAME: &str = "ckpt-%04d.img";

#[derive(Debug, Error)]
pub enum ProcessError {
    #[error(transparent)]
    Netlist(#[from] NetlistError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Call(#[from] CallError),
    #[error(transparent)]
    Plugin(#[from] PluginError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Driver(#[from] DriverError),
    #[error(transparent)]
    Quiesce(#[from] QuiesceError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error("checkpoint cycle {requested} already passed (workload is at cycle {current})")]
    AlreadyPassed { requested: u64, current: u64 },
    #[error("stimulus is {stimulus} bits wide, netlist has {inputs} inputs")]
    StimulusWidth { stimulus: usize, inputs: usize },
    #[error("workload section: {0}")]
    Workload(String),
    #[error("plugin configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone)]
pub struct ProcessOptions {
    pub worker_id: u64,
    pub files: FilePolicy,
    pub ckpt_dir: PathBuf,
    /// `%d` / `%0Nd` is the checkpoint sequence number, `%w` the worker id.
    pub ckpt_name: String,
    pub forked: bool,
    pub segment_index: bool,
    pub quiesce_timeout: Duration,
    pub gate_timeout: Duration,
    /// The runtime's real environment.
    pub env: BTreeMap<String, String>,
}

impl Default for ProcessOptions {
    fn default() -> Self {
        Self {
            worker_id: 1,
            files: FilePolicy::new(),
            ckpt_dir: PathBuf::from("."),
            ckpt_name: DEFAULT_CKPT_NAME.to_string(),
            forked: false,
            segment_index: true,
            quiesce_timeout: DEFAULT_QUIESCE_TIMEOUT,
            gate_timeout: DEFAULT_GATE_TIMEOUT,
            env: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LaunchSpec {
    pub netlist_src: String,
    pub stimulus: Stimulus,
    pub script: Script,
    pub virt: VirtConfig,
    pub options: ProcessOptions,
}

impl LaunchSpec {
    pub fn new(netlist_src: &str, stimulus: Stimulus) -> Self {
        Self {
            netlist_src: netlist_src.to_string(),
            stimulus,
            script: Script::new(),
            virt: VirtConfig::default(),
            options: ProcessOptions::default(),
        }
    }
}

#[derive(Clone, Default)]
pub struct RestoreOptions {
    pub fast: bool,
    /// Applied on top of the path and environment rules in the image.
    pub virt: VirtConfig,
    /// Plugin set to restart with; `None` rebuilds the one recorded in the image.
    pub plugins: Option<Vec<Arc<dyn Plugin>>>,
    pub extra_plugins: Vec<Arc<dyn Plugin>>,
    pub options: ProcessOptions,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogEntry {
    pub nanos: u64,
    pub what: String,
}

#[derive(Clone)]
pub struct CheckpointRecord {
    pub cycle: u64,
    pub path: PathBuf,
    pub forked: Option<ForkTicket>,
    pub summary: Option<ImageSummary>,
}

impl CheckpointRecord {
    /// Waits for a background write if there is one.
    pub fn wait(&self) -> Result<ImageSummary, EngineError> {
        match (&self.forked, &self.summary) {
            (Some(t), _) => t.wait(),
            (None, Some(s)) => Ok(s.clone()),
            (None, None) => Err(EngineError::MissingSection("image".into())),
        }
    }
}

/// Expands a checkpoint naming pattern.
pub fn image_name(pattern: &str, seq: u32, worker: u64) -> String {
    let pattern = pattern.replace("%w", &worker.to_string());
    let Some(start) = pattern.find('%') else {
        return pattern;
    };
    let rest = &pattern[start + 1..];
    let digits: String = rest.chars().take_while(|c| c.is_ascii_digit()).collect();
    if !rest[digits.len()..].starts_with('d') {
        return pattern;
    }
    let width: usize = digits.parse().unwrap_or(0);
    format!(
        "{}{:0width$}{}",
        &pattern[..start],
        seq,
        &rest[digits.len() + 1..],
        width = width
    )
}

/// `(worker id, world size)` recorded in an image.
pub fn image_identity(source: &ImageSource) -> Result<(u64, u64), ProcessError> {
    let bytes = source.open()?.read_section("core.workload")?;
    let wl = WorkloadState::decode(&bytes).map_err(|e| ProcessError::Workload(e.to_string()))?;
    Ok((wl.worker_id, wl.world))
}

pub struct Process {
    env: PluginEnv,
    plugins: PluginSet,
    wl: WorkloadState,
    opts: ProcessOptions,
    worker_id: u64,
    trace: Trace,
    start_cycle: u64,
    at_cycles: BTreeSet<u64>,
    writer: ForkedWriter,
    checkpoints: Vec<CheckpointRecord>,
    failures: Vec<String>,
    log: Vec<LogEntry>,
    leaders: BTreeMap<String, u64>,
    image_bytes: Option<Arc<AtomicU64>>,
}

fn build_env(runtime: Runtime, virt: &VirtConfig, netlist: Arc<Netlist>) -> PluginEnv {
    let runtime = Arc::new(runtime);
    let control = Arc::new(CkptControl::new());
    let stack = Arc::new(LayerStack::new(runtime.clone(), Some(control.clone())));
    PluginEnv {
        runtime,
        tables: Arc::new(VirtTables::with_config(virt)),
        control,
        stack,
        netlist,
    }
}

impl Process {
    pub fn launch(spec: LaunchSpec, plugins: Vec<Arc<dyn Plugin>>) -> Result<Self, ProcessError> {
        let netlist = Arc::new(Netlist::parse(&spec.netlist_src)?);
        if spec.stimulus.width() != netlist.inputs().len() {
            return Err(ProcessError::StimulusWidth {
                stimulus: spec.stimulus.width(),
                inputs: netlist.inputs().len(),
            });
        }
        let plugins = PluginSet::new(plugins)?;
        let runtime =
            Runtime::with_env(0, spec.options.env.clone()).with_quiesce_timeout(spec.options.quiesce_timeout);
        let env = build_env(runtime, &spec.virt, netlist.clone());
        plugins.install(&env)?;
        env.runtime
            .attach_device(Device::new(netlist.clone(), EmulatorState::new(&netlist)));
        let main = match env.stack.dispatch(Call::Spawn { entry: MAIN_TASK.into() })? {
            Reply::Tid(t) => t,
            other => return Err(ProcessError::Workload(format!("spawn returned {other:?}"))),
        };
        let wl = WorkloadState {
            netlist_src: spec.netlist_src,
            stimulus: spec.stimulus,
            script: spec.script,
            next_step: 0,
            tasks: BTreeMap::from([(MAIN_TASK.to_string(), main)]),
            handles: BTreeMap::new(),
            observations: Vec::new(),
            plugin_lines: plugins.spec_lines(),
            worker_id: spec.options.worker_id,
            world: 1,
            ckpt_seq: 0,
        };
        let p = Process {
            worker_id: spec.options.worker_id,
            env,
            plugins,
            wl,
            opts: spec.options,
            trace: Trace::default(),
            start_cycle: 0,
            at_cycles: BTreeSet::new(),
            writer: ForkedWriter::new(),
            checkpoints: Vec::new(),
            failures: Vec::new(),
            log: Vec::new(),
            leaders: BTreeMap::new(),
            image_bytes: None,
        };
        let leaders = p.plugins.resources().into_iter().map(|r| (r, p.worker_id)).collect();
        let ctx = p.ctx(None, &leaders);
        for plugin in p.plugins.ascending() {
            plugin.on_launch(&ctx)?;
        }
        Ok(p)
    }

    fn ctx<'a>(&'a self, restart: Option<&'a RestartInfo>, leaders: &'a BTreeMap<String, u64>) -> EventCtx<'a> {
        EventCtx {
            env: &self.env,
            restart,
            leaders,
            worker_id: self.worker_id,
            cycle: self.cycle(),
        }
    }

    fn note(&mut self, what: impl Into<String>) {
        let what = what.into();
        log::debug!("worker {}: {what}", self.worker_id);
        self.log.push(LogEntry {
            nanos: crate::clock::monotonic_nanos(),
            what,
        });
    }

    pub fn env(&self) -> &PluginEnv {
        &self.env
    }

    pub fn runtime(&self) -> &Arc<Runtime> {
        &self.env.runtime
    }

    pub fn tables(&self) -> &Arc<VirtTables> {
        &self.env.tables
    }

    pub fn control(&self) -> &Arc<CkptControl> {
        &self.env.control
    }

    pub fn stack(&self) -> &Arc<LayerStack> {
        &self.env.stack
    }

    pub fn netlist(&self) -> &Arc<Netlist> {
        &self.env.netlist
    }

    pub fn plugins(&self) -> &PluginSet {
        &self.plugins
    }

    pub fn workload(&self) -> &WorkloadState {
        &self.wl
    }

    pub fn worker_id(&self) -> u64 {
        self.worker_id
    }

    pub fn cycle(&self) -> u64 {
        self.env.runtime.with_device(|d| d.cycle).unwrap_or(0)
    }

    /// Outputs of every cycle run by this incarnation.
    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    /// Cycle this incarnation started at.
    pub fn start_cycle(&self) -> u64 {
        self.start_cycle
    }

    pub fn observations(&self) -> &[String] {
        &self.wl.observations
    }

    pub fn log(&self) -> &[LogEntry] {
        &self.log
    }

    pub fn checkpoints(&self) -> &[CheckpointRecord] {
        &self.checkpoints
    }

    pub fn failures(&self) -> &[String] {
        &self.failures
    }

    pub fn leaders(&self) -> &BTreeMap<String, u64> {
        &self.leaders
    }

    /// Image bytes read by the restore that created this process, including
    /// register segments loaded lazily since.
    pub fn image_bytes_read(&self) -> Option<u64> {
        self.image_bytes.as_ref().map(|c| c.load(Ordering::Relaxed))
    }

    pub fn main_tid(&self) -> Result<u64, ProcessError> {
        self.env
            .runtime
            .task_by_entry(MAIN_TASK)
            .ok_or_else(|| ProcessError::Workload("no main task".into()))
    }

    /// Schedules a checkpoint at the first safe-point at or after `cycle`.
    pub fn checkpoint_at(&mut self, cycle: u64) -> Result<(), ProcessError> {
        let current = self.cycle();
        if cycle < current {
            return Err(ProcessError::AlreadyPassed {
                requested: cycle,
                current,
            });
        }
        self.at_cycles.insert(cycle);
        Ok(())
    }

    /// Runs `n` cycles, handling script actions and checkpoint requests at
    /// every cycle boundary including the last one.
    pub fn run(&mut self, n: u64, driver: &mut dyn BarrierDriver) -> Result<(), ProcessError> {
        for _ in 0..n {
            self.boundary(driver)?;
            self.step()?;
        }
        self.boundary(driver)
    }

    pub fn run_to(&mut self, cycle: u64, driver: &mut dyn BarrierDriver) -> Result<(), ProcessError> {
        let n = cycle.saturating_sub(self.cycle());
        self.run(n, driver)
    }

    /// Runs up to `max_cycle`, then keeps serving checkpoint requests until
    /// `stop` is set.
    pub fn serve(
        &mut self,
        max_cycle: u64,
        driver: &mut dyn BarrierDriver,
        stop: &AtomicBool,
        pace: Duration,
    ) -> Result<(), ProcessError> {
        while !stop.load(Ordering::SeqCst) {
            if self.cycle() < max_cycle {
                self.boundary(driver)?;
                self.step()?;
            } else {
                self.boundary(driver)?;
            }
            if !pace.is_zero() {
                std::thread::sleep(pace);
            }
        }
        Ok(())
    }

    /// Requests a checkpoint and takes it at the current boundary.
    pub fn checkpoint_now(&mut self, driver: &mut dyn BarrierDriver) -> Result<CheckpointRecord, ProcessError> {
        if !self.env.control.is_enabled() {
            return Err(ProcessError::Control(ControlError::DisabledTimeout));
        }
        let ticket = self.env.control.request();
        let taken = self.env.control.take_ready();
        debug_assert_eq!(taken, Some(ticket));
        let result = self.checkpoint_lifecycle(driver);
        self.env.control.complete(
            ticket,
            result
                .as_ref()
                .map(|r| r.path.display().to_string())
                .map_err(|e| e.to_string()),
        );
        result
    }

    fn boundary(&mut self, driver: &mut dyn BarrierDriver) -> Result<(), ProcessError> {
        let cycle = self.cycle();
        self.run_script(cycle)?;
        if self.at_cycles.remove(&cycle) {
            self.env.control.request();
        }
        if driver.poll() {
            self.env.control.request();
        }
        if let Some(ticket) = self.env.control.take_ready() {
            let result = self.checkpoint_lifecycle(driver);
            self.env.control.complete(
                ticket,
                result
                    .as_ref()
                    .map(|r| r.path.display().to_string())
                    .map_err(|e| e.to_string()),
            );
            if let Err(e) = result {
                log::warn!("checkpoint at cycle {cycle} failed: {e}");
                self.failures.push(e.to_string());
            }
        }
        Ok(())
    }

    fn run_script(&mut self, cycle: u64) -> Result<(), ProcessError> {
        while let Some((at, action)) = self.wl.script.steps().get(self.wl.next_step).cloned() {
            if at > cycle {
                break;
            }
            self.wl.next_step += 1;
            let main = self.main_tid()?;
            self.env.runtime.enter(main)?;
            let result = self.act(&action);
            self.env.runtime.safepoint(main)?;
            self.wl.observations.push(format!("{cycle}: {action} => {result}"));
        }
        Ok(())
    }

    fn act(&mut self, action: &Action) -> String {
        let stack = self.env.stack.clone();
        let tid = |wl: &WorkloadState, name: &str| {
            wl.tasks.get(name).copied().ok_or_else(|| format!("error: no task named {name}"))
        };
        let handle = |wl: &WorkloadState, label: &str| {
            wl.handles
                .get(label)
                .copied()
                .ok_or_else(|| format!("error: no connection labelled {label}"))
        };
        let show = |r: Result<Reply, CallError>| match r {
            Ok(Reply::Ack) => "ok".to_string(),
            Ok(Reply::Tid(t) | Reply::File(t) | Reply::Handle(t)) => t.to_string(),
            Ok(Reply::Env(v)) => v.unwrap_or_else(|| "<unset>".into()),
            Ok(Reply::Sent(n)) => n.to_string(),
            Ok(Reply::Data(d)) => String::from_utf8_lossy(&d).into_owned(),
            Ok(Reply::Step(s)) => format!("cycle {}", s.cycle),
            Err(e) => format!("error: {e}"),
        };
        let outcome: Result<String, String> = (|| match action {
            Action::Spawn(name) => {
                let r = stack.dispatch(Call::Spawn { entry: name.clone() });
                if let Ok(Reply::Tid(t)) = &r {
                    self.wl.tasks.insert(name.clone(), *t);
                }
                Ok(show(r))
            }
            Action::Kill(name, sig) => Ok(show(stack.dispatch(Call::Kill {
                tid: tid(&self.wl, name)?,
                sig: *sig,
            }))),
            Action::Lock(lock, name) => Ok(show(stack.dispatch(Call::Lock {
                lock: *lock,
                tid: tid(&self.wl, name)?,
            }))),
            Action::Unlock(lock, name) => Ok(show(stack.dispatch(Call::Unlock {
                lock: *lock,
                tid: tid(&self.wl, name)?,
            }))),
            Action::Open(path) => Ok(show(stack.dispatch(Call::OpenPath { path: path.clone() }))),
            Action::Getenv(key) => Ok(show(stack.dispatch(Call::Getenv { key: key.clone() }))),
            Action::Connect(label, peer) => {
                let r = stack.dispatch(Call::Connect { peer: peer.clone() });
                if let Ok(Reply::Handle(h)) = &r {
                    self.wl.handles.insert(label.clone(), *h);
                }
                Ok(show(r))
            }
            Action::Send(label, data) => Ok(show(stack.dispatch(Call::Send {
                handle: handle(&self.wl, label)?,
                data: data.as_bytes().to_vec(),
            }))),
            Action::Recv(label, max) => Ok(show(stack.dispatch(Call::Recv {
                handle: handle(&self.wl, label)?,
                max: *max,
            }))),
            Action::Disable => {
                self.env.control.disable();
                Ok("ok".into())
            }
            Action::Enable => Ok(match self.env.control.enable() {
                Ok(()) => "ok".into(),
                Err(e) => format!("error: {e}"),
            }),
            Action::Checkpoint => {
                self.env.control.request();
                Ok("requested".into())
            }
        })();
        outcome.unwrap_or_else(|e| e)
    }

    fn step(&mut self) -> Result<Bits, ProcessError> {
        let cycle = self.cycle();
        let inputs = self.wl.stimulus.vector(cycle)?.to_vec();
        let main = self.main_tid()?;
        self.env.runtime.enter(main)?;
        let reply = self.env.stack.dispatch(Call::ClockStep(ClockStep {
            cycle,
            inputs,
            ..ClockStep::default()
        }));
        self.env.runtime.safepoint(main)?;
        match reply? {
            Reply::Step(s) => {
                self.trace.push(s.outcome.outputs.clone());
                Ok(s.outcome.outputs)
            }
            other => Err(ProcessError::Workload(format!("clock step returned {other:?}"))),
        }
    }

    fn image_path(&self) -> PathBuf {
        self.opts
            .ckpt_dir
            .join(image_name(&self.opts.ckpt_name, self.wl.ckpt_seq, self.worker_id))
    }

    fn checkpoint_lifecycle(&mut self, driver: &mut dyn BarrierDriver) -> Result<CheckpointRecord, ProcessError> {
        let local = Schedule::build(Side::Checkpoint, &self.plugins.custom_barriers());
        let resources = self.plugins.resources();
        let lc = driver.begin(BeginInfo {
            side: Side::Checkpoint,
            local: &local,
            resources: &resources,
            image_hash: None,
        })?;
        self.worker_id = lc.worker_id;
        self.wl.worker_id = lc.worker_id;
        self.wl.world = lc.world;
        self.wl.ckpt_seq += 1;
        let cycle = self.cycle();
        self.note(format!("lifecycle {} checkpoint at cycle {cycle}", lc.id));
        let walked = self.walk_checkpoint(driver, &lc);
        let snap = match walked {
            Ok(s) => s,
            Err(e) => {
                driver.fail(&e.to_string());
                self.env.runtime.resume();
                self.note(format!("aborted: {e}"));
                return Err(e);
            }
        };
        let path = self.image_path();
        let wopts = WriteOptions {
            segment_index: self.opts.segment_index,
        };
        let record = if self.opts.forked {
            let ticket = self.writer.submit(snap, path.clone(), wopts);
            driver.finish(&path.display().to_string());
            self.env.runtime.resume();
            CheckpointRecord {
                cycle,
                path,
                forked: Some(ticket),
                summary: None,
            }
        } else {
            let written = write_image(&snap, &path, wopts);
            match &written {
                Ok(_) => driver.finish(&path.display().to_string()),
                Err(e) => driver.fail(&e.to_string()),
            }
            self.env.runtime.resume();
            CheckpointRecord {
                cycle,
                path,
                forked: None,
                summary: Some(written?),
            }
        };
        self.note("resume");
        self.checkpoints.push(record.clone());
        Ok(record)
    }

    fn walk_checkpoint(
        &mut self,
        driver: &mut dyn BarrierDriver,
        lc: &Lifecycle,
    ) -> Result<ProcessSnapshot, ProcessError> {
        let hash = lc.schedule.hash(lc.id);
        let mut snap = None;
        let last = lc.schedule.steps.len().saturating_sub(1);
        for (i, step) in lc.schedule.steps.iter().enumerate() {
            self.note(format!("begin {}", step.name));
            {
                let leaders = self.leaders.clone();
                let ctx = self.ctx(None, &leaders);
                match (&step.event, &step.owner) {
                    (Event::Suspend, None) => {
                        self.env.runtime.quiesce()?;
                        self.plugins.dispatch(step, &ctx)?;
                    }
                    (Event::WriteCkpt, None) => {
                        let mut blobs = Vec::new();
                        for p in self.plugins.ordered_for(&Event::WriteCkpt) {
                            p.on_event(&Event::WriteCkpt, &ctx)?;
                            if let Some(blob) = p.save(&ctx)? {
                                blobs.push(PluginBlob {
                                    name: p.name().to_string(),
                                    optional: p.optional(),
                                    blob,
                                });
                            }
                        }
                        blobs.reverse();
                        snap = Some(self.capture(hash, blobs)?);
                    }
                    (Event::Refill, None) => {
                        self.env.runtime.refill();
                        self.plugins.dispatch(step, &ctx)?;
                    }
                    _ => self.plugins.dispatch(step, &ctx)?,
                }
                if i == last {
                    self.env.control.wait_gates(self.opts.gate_timeout)?;
                }
            }
            if i == last {
                self.note("gates open");
            }
            self.note(format!("arrive {}", step.name));
            driver.arrive(&step.name)?;
            self.note(format!("release {}", step.name));
            if step.event == Event::Suspend {
                self.leaders = driver.leaders();
            }
        }
        snap.ok_or_else(|| ProcessError::Workload("schedule has no WriteCkpt phase".into()))
    }

    fn capture(&self, schedule_hash: u64, plugins: Vec<PluginBlob>) -> Result<ProcessSnapshot, ProcessError> {
        let rt = &self.env.runtime;
        if !rt.is_quiescent() {
            return Err(EngineError::NotQuiescent.into());
        }
        let tids = self.env.tables.tid_table();
        let conns = self.env.tables.conn_table();
        let tasks = rt
            .tasks()
            .into_iter()
            .map(|t| TaskImage {
                real: t.tid,
                virt: tids.to_virtual(t.tid).ok(),
                entry: t.entry,
                state: t.state,
                signals: t.signals,
            })
            .collect();
        let locks = rt
            .locks()
            .into_iter()
            .map(|l| LockImage {
                id: l.id,
                owner_real: l.owner,
                owner_virtual: l.owner.and_then(|o| tids.to_virtual(o).ok()),
            })
            .collect();
        let conn_images = rt
            .connections()
            .into_iter()
            .filter(|c| c.class == ConnClass::Internal)
            .map(|c| ConnImage {
                real: c.handle,
                virt: conns.to_virtual(c.handle).ok(),
                peer: c.peer,
                inflight: c.inflight,
            })
            .collect();
        let mut files = Vec::new();
        for f in rt.files() {
            let path = f.path.to_string_lossy().into_owned();
            match self.opts.files.rule_for(&path) {
                FileRule::Ignore => {}
                FileRule::SavePathOnly => files.push(FileImage { path, content: None }),
                FileRule::SaveContent => {
                    let content = std::fs::read(&f.path).map_err(EngineError::from)?;
                    files.push(FileImage {
                        path,
                        content: Some(content),
                    });
                }
            }
        }
        let mut wl = self.wl.clone();
        wl.plugin_lines = self.plugins.spec_lines();
        Ok(ProcessSnapshot {
            incarnation: rt.incarnation(),
            schedule_hash,
            tasks,
            locks,
            conns: conn_images,
            emu: rt.device_state()?,
            virt: self.env.tables.config(),
            files,
            workload: wl.encode(),
            plugins,
        })
    }

    /// Rebuilds a process from an image: fresh runtime incarnation, tasks and
    /// connections recreated under new real ids, then the restart-side
    /// barrier schedule. The process is running (resumed) on success.
    pub fn restore(
        source: &ImageSource,
        ro: RestoreOptions,
        driver: &mut dyn BarrierDriver,
    ) -> Result<Self, ProcessError> {
        let loaded = load_image(source, ro.fast)?;
        let wl = WorkloadState::decode(&loaded.workload).map_err(|e| ProcessError::Workload(e.to_string()))?;
        let netlist = Arc::new(Netlist::parse(&wl.netlist_src)?);
        if netlist.id() != loaded.netlist_id {
            return Err(SimError::NetlistMismatch {
                state: loaded.netlist_id,
                netlist: netlist.id(),
            }
            .into());
        }
        let mut list = match ro.plugins {
            Some(p) => p,
            None => crate::config::build_plugins(&wl.plugin_lines).map_err(|e| ProcessError::Config(e.to_string()))?,
        };
        list.extend(ro.extra_plugins);
        let plugins = PluginSet::new(list)?;
        for blob in &loaded.plugins {
            if plugins.get(&blob.name).is_none() && !blob.optional {
                return Err(PluginError::UnknownBlob(blob.name.clone()).into());
            }
        }
        let recorded: BTreeSet<&str> = wl
            .plugin_lines
            .iter()
            .filter_map(|l| l.split_whitespace().nth(1))
            .collect();
        for p in plugins.ascending() {
            let has_blob = loaded.plugins.iter().any(|b| b.name == p.name());
            if !p.optional() && recorded.contains(p.name()) && !has_blob {
                return Err(PluginError::MissingBlob(p.name().to_string()).into());
            }
        }

        let incarnation = loaded.header.incarnation + 1;
        let opts = ro.options;
        let mut virt = loaded.virt.clone();
        virt.merge(&ro.virt);
        let runtime = Runtime::with_env(incarnation, opts.env.clone()).with_quiesce_timeout(opts.quiesce_timeout);
        let env = build_env(runtime, &virt, netlist.clone());
        plugins.install(&env)?;
        let rt = env.runtime.clone();

        let mut tid_assignment = BTreeMap::new();
        for t in &loaded.tasks {
            let new = rt.spawn_task(&t.entry)?;
            for &sig in &t.signals {
                rt.kill_task(new, sig)?;
            }
            tid_assignment.insert(t.real, new);
        }
        let mut conn_assignment = BTreeMap::new();
        for c in &loaded.conns {
            let new = rt.restore_connection(&ConnRecord {
                handle: c.real,
                peer: c.peer.clone(),
                class: ConnClass::Internal,
                inflight: c.inflight.clone(),
            })?;
            conn_assignment.insert(c.real, new);
        }
        for l in &loaded.locks {
            rt.set_lock(LockRecord {
                id: l.id,
                owner: l.owner_real,
            });
        }
        for f in &loaded.files {
            let path = virt.paths.rewrite_prefix(&f.path);
            if let Some(content) = &f.content {
                if let Some(dir) = Path::new(&path).parent() {
                    std::fs::create_dir_all(dir).map_err(EngineError::from)?;
                }
                std::fs::write(&path, content).map_err(EngineError::from)?;
            }
            rt.open_path(&path)?;
        }
        let image_bytes = loaded.bytes_counter();
        let cycle = loaded.cycle();
        let device = match loaded.registers {
            Registers::Eager(regs) => Device::new(
                netlist.clone(),
                EmulatorState {
                    netlist_id: loaded.netlist_id,
                    cycle,
                    regs,
                    last_outputs: loaded.last_outputs.clone(),
                },
            ),
            Registers::Lazy(lazy) => Device {
                netlist: netlist.clone(),
                cycle,
                regs: Box::new(lazy),
                last_outputs: loaded.last_outputs.clone(),
            },
        };
        rt.attach_device(device);

        let info = RestartInfo {
            incarnation,
            tid_assignment,
            conn_assignment,
            locks: loaded.locks.clone(),
        };
        let mut p = Process {
            worker_id: wl.worker_id,
            env,
            plugins,
            wl,
            opts,
            trace: Trace::default(),
            start_cycle: cycle,
            at_cycles: BTreeSet::new(),
            writer: ForkedWriter::new(),
            checkpoints: Vec::new(),
            failures: Vec::new(),
            log: Vec::new(),
            leaders: BTreeMap::new(),
            image_bytes: Some(image_bytes),
        };
        p.walk_restart(driver, &info, &loaded.plugins, loaded.header.schedule_hash)?;
        Ok(p)
    }

    fn walk_restart(
        &mut self,
        driver: &mut dyn BarrierDriver,
        info: &RestartInfo,
        blobs: &[PluginBlob],
        image_hash: u64,
    ) -> Result<(), ProcessError> {
        let local = Schedule::build(Side::Restart, &self.plugins.custom_barriers());
        let resources = self.plugins.resources();
        let lc = driver.begin(BeginInfo {
            side: Side::Restart,
            local: &local,
            resources: &resources,
            image_hash: Some(image_hash),
        })?;
        self.note(format!("lifecycle {} restart at cycle {}", lc.id, self.cycle()));
        let result = (|| -> Result<(), ProcessError> {
            let last = lc.schedule.steps.len().saturating_sub(1);
            for (i, step) in lc.schedule.steps.iter().enumerate() {
                self.note(format!("begin {}", step.name));
                {
                    let leaders = self.leaders.clone();
                    let ctx = self.ctx(Some(info), &leaders);
                    match (&step.event, &step.owner) {
                        (Event::Restart, None) => {
                            for p in self.plugins.ascending() {
                                if let Some(b) = blobs.iter().find(|b| b.name == p.name()) {
                                    p.load(&b.blob, &ctx)?;
                                }
                            }
                            self.plugins.dispatch(step, &ctx)?;
                        }
                        (Event::Refill, None) => {
                            self.env.runtime.refill();
                            self.plugins.dispatch(step, &ctx)?;
                        }
                        _ => self.plugins.dispatch(step, &ctx)?,
                    }
                    if i == last {
                        self.env.control.wait_gates(self.opts.gate_timeout)?;
                    }
                }
                if i == last {
                    self.note("gates open");
                }
                self.note(format!("arrive {}", step.name));
                driver.arrive(&step.name)?;
                self.note(format!("release {}", step.name));
            }
            Ok(())
        })();
        if let Err(e) = result {
            driver.fail(&e.to_string());
            self.note(format!("restart failed: {e}"));
            return Err(e);
        }
        driver.finish("");
        self.env.runtime.resume();
        self.note("resume");
        Ok(())
    }

    /// Waits for every background image write started by this process.
    pub fn wait_checkpoints(&self) -> Result<Vec<ImageSummary>, EngineError> {
        self.checkpoints.iter().map(|c| c.wait()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_names() {
        assert_eq!(image_name("ckpt-%04d.img", 7, 1), "ckpt-0007.img");
        assert_eq!(image_name("w%w-%d.img", 12, 3), "w3-12.img");
        assert_eq!(image_name("fixed.img", 2, 1), "fixed.img");
    }
}
