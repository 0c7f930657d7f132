//! Time-domain decomposition over worker lanes.
//!
//! Each lane owns a contiguous, C-point aligned range of intervals. A sweep
//! starts with one boundary message per interior boundary: every lane sends
//! the current value of its last owned C-point to its right neighbour, which
//! uses it as the left state of its first interval. Lanes then relax their
//! own intervals exactly as the single-lane path does, so results are bitwise
//! identical for every worker count.

use std::ops::Range;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use crate::error::{Error, ProtocolFault, Result};
use crate::grid::{Hierarchy, Sequence, TimeStepper, MIN_COARSE_STEPS};
use crate::mgrit::{check_config, check_sweep, relax_chunk, CycleConfig, Lanes, Mgrit, SweepKind};
use crate::numerics::DenseVector;

pub const PROTOCOL_VERSION: u8 = 1;

/// Environment variable consulted by the CLI for the default worker count.
pub const WORKERS_ENV: &str = "PGRU_WORKERS";

#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryMessage {
    pub version: u8,
    pub level: usize,
    /// Runtime-wide sweep counter; strictly increasing on every channel.
    pub tag: u64,
    pub kind: SweepKind,
    pub sender: usize,
    pub state: DenseVector,
}

/// Number of lanes that take part on a level with `steps` steps: at most one
/// per interval, and none with fewer than [`MIN_COARSE_STEPS`] steps.
pub fn active_workers(workers: usize, steps: usize, cf: usize) -> usize {
    let intervals = if cf == 0 { 0 } else { steps / cf };
    workers.min(intervals).min(steps / MIN_COARSE_STEPS).max(1)
}

/// Splits `0..n` into `parts` contiguous ranges whose sizes differ by at most one.
pub fn balanced_ranges(n: usize, parts: usize) -> Vec<Range<usize>> {
    let parts = parts.max(1);
    (0..parts).map(|w| w * n / parts..(w + 1) * n / parts).collect()
}

/// Ownership of one level: interval ranges per active lane.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LevelPartition {
    pub level: usize,
    pub steps: usize,
    pub cf: usize,
    pub intervals: Vec<Range<usize>>,
}

impl LevelPartition {
    pub fn active(&self) -> usize {
        self.intervals.len()
    }

    /// Level-local time indices owned by lane `w` (its left C-point excluded).
    pub fn owned_steps(&self, w: usize) -> Range<usize> {
        let r = &self.intervals[w];
        r.start * self.cf + 1..r.end * self.cf + 1
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimePartition {
    pub requested: usize,
    pub workers: usize,
    /// Every level but the coarsest, which is solved on the controller.
    pub levels: Vec<LevelPartition>,
}

impl TimePartition {
    pub fn was_clamped(&self) -> bool {
        self.workers != self.requested
    }

    pub fn warning(&self) -> Option<String> {
        self.was_clamped().then(|| {
            format!(
                "requested {} workers but the sequence only supports {}; using {}",
                self.requested, self.workers, self.workers
            )
        })
    }
}

/// Distributes `hierarchy` over `workers` lanes, clamping to one coarse
/// interval per lane on the finest level.
pub fn partition(workers: usize, hierarchy: &Hierarchy) -> TimePartition {
    let cf = hierarchy.cf();
    let requested = workers.max(1);
    let usable = requested.min((hierarchy.steps(0) / cf).max(1));
    let levels = (0..hierarchy.num_levels().saturating_sub(1))
        .map(|l| {
            let steps = hierarchy.steps(l);
            LevelPartition {
                level: l,
                steps,
                cf,
                intervals: balanced_ranges(steps / cf, active_workers(usable, steps, cf)),
            }
        })
        .collect();
    TimePartition { requested, workers: usable, levels }
}

/// One-shot protocol faults for exercising the watchdog and checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InjectedFault {
    /// Lane `sender` skips its boundary message.
    Drop { sender: usize },
    /// Lane `sender` sends its boundary message twice.
    Duplicate { sender: usize },
    /// Lane `sender` stamps its message with a stale tag.
    WrongTag { sender: usize },
    /// Lane `sender` sends an unknown protocol version.
    WrongVersion { sender: usize },
}

struct Channels {
    senders: Vec<Sender<BoundaryMessage>>,
    receivers: Vec<Receiver<BoundaryMessage>>,
}

/// Threaded executor; channel `w` carries boundary states from lane `w` to `w + 1`.
pub struct LaneRuntime {
    workers: usize,
    watchdog: Duration,
    next_tag: AtomicU64,
    messages: AtomicU64,
    channels: Mutex<Channels>,
    fault: Mutex<Option<InjectedFault>>,
}

impl LaneRuntime {
    pub fn new(workers: usize) -> Self {
        let workers = workers.max(1);
        let (senders, receivers) = (1..workers).map(|_| mpsc::channel()).unzip();
        Self {
            workers,
            watchdog: Duration::from_secs(60),
            next_tag: AtomicU64::new(1),
            messages: AtomicU64::new(0),
            channels: Mutex::new(Channels { senders, receivers }),
            fault: Mutex::new(None),
        }
    }

    /// How long a lane waits for its boundary message before reporting a stall.
    pub fn with_watchdog(mut self, watchdog: Duration) -> Self {
        self.watchdog = watchdog;
        self
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    /// Boundary messages sent since construction.
    pub fn messages_sent(&self) -> u64 {
        self.messages.load(Ordering::SeqCst)
    }

    /// Arms a fault for the next sweep that involves the named lane.
    pub fn inject(&self, fault: InjectedFault) {
        *self.fault.lock().expect("fault slot") = Some(fault);
    }

    fn take_fault(&self, active: usize) -> Option<InjectedFault> {
        let mut slot = self.fault.lock().expect("fault slot");
        let sender = match (*slot)? {
            InjectedFault::Drop { sender }
            | InjectedFault::Duplicate { sender }
            | InjectedFault::WrongTag { sender }
            | InjectedFault::WrongVersion { sender } => sender,
        };
        if sender + 1 < active {
            slot.take()
        } else {
            None
        }
    }

    fn receive(&self, rx: &Receiver<BoundaryMessage>, lane: usize, level: usize, tag: u64) -> Result<DenseVector> {
        let msg = match rx.recv_timeout(self.watchdog) {
            Ok(m) => m,
            Err(RecvTimeoutError::Timeout | RecvTimeoutError::Disconnected) => {
                return Err(ProtocolFault::Stalled { receiver: lane, tag }.into());
            }
        };
        if msg.version != PROTOCOL_VERSION {
            return Err(ProtocolFault::Version(msg.version).into());
        }
        if msg.tag != tag || msg.level != level || msg.sender + 1 != lane {
            return Err(ProtocolFault::UnexpectedTag {
                receiver: lane,
                expected: tag,
                received: msg.tag,
            }
            .into());
        }
        Ok(msg.state)
    }
}

fn drain(channels: &Channels) {
    for rx in &channels.receivers {
        while rx.try_recv().is_ok() {}
    }
}

impl Lanes for LaneRuntime {
    fn sweep<S: TimeStepper + ?Sized>(
        &self,
        stepper: &S,
        level: usize,
        cf: usize,
        kind: SweepKind,
        h: &mut Sequence,
        forcing: Option<&Sequence>,
    ) -> Result<()> {
        check_sweep(stepper, cf, h, forcing)?;
        let steps = h.steps();
        let ranges = balanced_ranges(steps / cf, active_workers(self.workers, steps, cf));
        let active = ranges.len();
        let tag = self.next_tag.fetch_add(1, Ordering::SeqCst);
        let fault = self.take_fault(active);

        let anchor = h[0].clone();
        let mut rest: &mut [DenseVector] = &mut h[1..];
        let mut chunks = Vec::with_capacity(active);
        for r in &ranges {
            let (mine, tail) = rest.split_at_mut(r.len() * cf);
            chunks.push((r.start * cf, mine));
            rest = tail;
        }

        let mut channels = self.channels.lock().expect("channel table");
        let Channels { senders, receivers } = &mut *channels;
        let mut inbound: Vec<Option<&mut Receiver<BoundaryMessage>>> =
            std::iter::once(None).chain(receivers.iter_mut().map(Some)).collect();

        let outcomes: Vec<thread::Result<Result<()>>> = thread::scope(|scope| {
            let handles: Vec<_> = chunks
                .into_iter()
                .enumerate()
                .map(|(w, (base, chunk))| {
                    let tx = (w + 1 < active).then(|| &senders[w]);
                    let rx = inbound[w].take();
                    let anchor = &anchor;
                    scope.spawn(move || -> Result<()> {
                        if let Some(tx) = tx {
                            let mut msg = BoundaryMessage {
                                version: PROTOCOL_VERSION,
                                level,
                                tag,
                                kind,
                                sender: w,
                                state: chunk[chunk.len() - 1].clone(),
                            };
                            let mut copies = 1;
                            match fault {
                                Some(InjectedFault::Drop { sender }) if sender == w => copies = 0,
                                Some(InjectedFault::Duplicate { sender }) if sender == w => copies = 2,
                                Some(InjectedFault::WrongTag { sender }) if sender == w => msg.tag = tag.wrapping_sub(1),
                                Some(InjectedFault::WrongVersion { sender }) if sender == w => msg.version = PROTOCOL_VERSION + 1,
                                _ => {}
                            }
                            for _ in 0..copies {
                                // The receiver lives in the runtime, so the send cannot fail.
                                let _ = tx.send(msg.clone());
                                self.messages.fetch_add(1, Ordering::SeqCst);
                            }
                        }
                        let left = match rx {
                            None => anchor.clone(),
                            Some(rx) => self.receive(rx, w, level, tag)?,
                        };
                        relax_chunk(stepper, level, cf, kind, base, &left, chunk, forcing);
                        Ok(())
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join()).collect()
        });

        let mut result = Ok(());
        for (w, outcome) in outcomes.into_iter().enumerate() {
            let r = match outcome {
                Ok(r) => r,
                Err(_) => Err(ProtocolFault::WorkerPanic(w).into()),
            };
            if result.is_ok() {
                result = r;
            }
        }
        if result.is_ok() {
            for (channel, rx) in channels.receivers.iter().enumerate().take(active - 1) {
                if let Ok(extra) = rx.try_recv() {
                    result = Err(ProtocolFault::Duplicate { channel, tag: extra.tag }.into());
                    break;
                }
            }
        }
        if result.is_err() {
            drain(&channels);
        }
        result
    }

    fn map_intervals<R, F>(&self, _level: usize, n: usize, f: F) -> Result<Vec<R>>
    where
        R: Send,
        F: Fn(usize) -> R + Sync,
    {
        let lanes = self.workers.min(n);
        if lanes <= 1 {
            return Ok((0..n).map(f).collect());
        }
        let f = &f;
        let outcomes: Vec<thread::Result<Vec<R>>> = thread::scope(|scope| {
            let handles: Vec<_> = balanced_ranges(n, lanes)
                .into_iter()
                .map(|r| scope.spawn(move || r.map(f).collect::<Vec<R>>()))
                .collect();
            handles.into_iter().map(|h| h.join()).collect()
        });
        let mut out = Vec::with_capacity(n);
        for (w, part) in outcomes.into_iter().enumerate() {
            out.extend(part.map_err(|_| Error::from(ProtocolFault::WorkerPanic(w)))?);
        }
        Ok(out)
    }
}

/// One forward cycle distributed over the runtime's lanes.
pub fn parallel_mgprop<S: TimeStepper + ?Sized>(
    runtime: &LaneRuntime,
    stepper: &S,
    hierarchy: &Hierarchy,
    config: &CycleConfig,
    h: &Sequence,
) -> Result<Sequence> {
    check_config(hierarchy, config)?;
    let mut out = h.clone();
    Mgrit::new(stepper, hierarchy, config.fine_relax, runtime).cycle(&mut out, None)?;
    Ok(out)
}

/// One adjoint cycle distributed over the runtime's lanes; arguments as in
/// [`crate::mgrit::mgbackprop`].
pub fn parallel_mgbackprop<S: TimeStepper + ?Sized>(
    runtime: &LaneRuntime,
    adjoint: &S,
    hierarchy: &Hierarchy,
    config: &CycleConfig,
    w: &Sequence,
    source: Option<&Sequence>,
) -> Result<Sequence> {
    check_config(hierarchy, config)?;
    let mut v = w.reversed();
    let forcing = source.map(Sequence::reversed);
    Mgrit::new(adjoint, hierarchy, config.fine_relax, runtime).cycle(&mut v, forcing.as_ref())?;
    Ok(v.reversed())
}
