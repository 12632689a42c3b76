pub mod call;
pub mod clock;
pub mod codec;
pub mod config;
pub mod coordinator;
pub mod emulator;
pub mod engine;
pub mod fault;
pub mod license;
pub mod plugin;
pub mod process;
pub mod runtime;
pub mod virt;
pub mod workloads;
