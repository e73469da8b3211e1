//! Process-wide warning counters.
//!
//! Several operations degrade gracefully instead of failing (clamped logs,
//! skipped generations, carried-over kernel groups). Each such event bumps a
//! named counter and emits a `log::warn!` so nothing is dropped silently.

use std::sync::atomic::{AtomicU64, Ordering};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Warning {
    AllPadTarget,
    ClampedLog,
    ZeroBandwidth,
    SkippedShortGeneration,
    DegenerateGeneration,
    AbsentClass,
    DroppedKernelGroup,
}

const COUNT: usize = 7;

static COUNTERS: [AtomicU64; COUNT] = [const { AtomicU64::new(0) }; COUNT];

impl Warning {
    fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Warning::AllPadTarget => "all_pad_target",
            Warning::ClampedLog => "clamped_log",
            Warning::ZeroBandwidth => "zero_bandwidth",
            Warning::SkippedShortGeneration => "skipped_short_generation",
            Warning::DegenerateGeneration => "degenerate_generation",
            Warning::AbsentClass => "absent_class",
            Warning::DroppedKernelGroup => "dropped_kernel_group",
        }
    }
}

pub fn warn(kind: Warning, detail: &str) {
    COUNTERS[kind.index()].fetch_add(1, Ordering::Relaxed);
    log::warn!("{}: {}", kind.name(), detail);
}

pub fn count(kind: Warning) -> u64 {
    COUNTERS[kind.index()].load(Ordering::Relaxed)
}
