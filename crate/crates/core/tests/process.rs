mod common;

use ckptlab::engine::ImageSource;
use ckptlab::process::{Process, RestoreOptions, Standalone};
use ckptlab::workloads::{counter_stimulus, COUNTER_PARITY};
use ckptlab::process::LaunchSpec;
use common::{options, virt_plugins, Oracle};

#[test]
fn checkpoint_then_restore_continues_the_trace() {
    let dir = tempfile::tempdir().unwrap();
    let stim = counter_stimulus(40);
    let mut spec = LaunchSpec::new(COUNTER_PARITY, stim.clone());
    spec.options = options(dir.path());
    let mut p = Process::launch(spec, virt_plugins()).unwrap();
    let mut drv = Standalone::new();
    p.checkpoint_at(15).unwrap();
    p.run_to(40, &mut drv).unwrap();
    assert!(p.failures().is_empty(), "{:?}", p.failures());
    let image = p.checkpoints()[0].path.clone();

    let ro = RestoreOptions {
        options: options(dir.path()),
        ..RestoreOptions::default()
    };
    let mut q = Process::restore(&ImageSource::Path(image), ro, &mut drv).unwrap();
    assert_eq!(q.cycle(), 15);
    q.run_to(40, &mut drv).unwrap();

    let golden = Oracle::new(COUNTER_PARITY).run(stim.rows());
    assert_eq!(p.trace().rows(), &golden[..]);
    assert_eq!(q.trace().rows(), &golden[15..]);
}
