//! Layer-parallel epoch execution.
//!
//! Each worker owns a contiguous block of layers. Phases are separated by
//! fork-join barriers; tensors that cross a block boundary travel through
//! in-process channels and are accounted for in a [`CommLedger`]:
//!
//! - after the input phase, the first layer of a block sends `p_l` to the
//!   owner of layer `l − 1`, which needs it for its output and dual phases;
//! - at the start of an epoch, the last layer of a block sends `(q_l, u_l)`
//!   to the owner of layer `l + 1`, which needs them for its input phase.
//!
//! Input messages use the quantized codec in quantized mode. Per-layer
//! arithmetic is identical to [`SequentialRunner`](crate::solver::SequentialRunner),
//! so results are bit-identical to it.

mod speedup;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::Arc;

use ndarray::{Array2, ArrayView2};
#[cfg(feature = "parallel")]
use rayon::prelude::*;

pub use speedup::{measure_speedup, time_epochs, SpeedupRow, SPEEDUP_HEADER};

use crate::error::{Error, Result};
use crate::model::{LayerState, ModelState};
use crate::quantization::{decode_message, encode_dense_message, encode_message, QuantizationSet, HEADER_BYTES};
use crate::solver::phi::Coupling;
use crate::solver::{run_block_phase, EpochContext, EpochReport, EpochRunner, Phase};

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "PDADMM_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecutorMode {
    /// Blocks run one after another on the calling thread.
    Sequential,
    /// Blocks run concurrently on a thread pool.
    Parallel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultKind {
    Error,
    Panic,
}

/// Makes the worker owning `layer` (1-based) fail when it reaches `phase`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FaultInjection {
    pub phase: Phase,
    pub layer: usize,
    pub kind: FaultKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecutorConfig {
    pub worker_count: usize,
    pub mode: ExecutorMode,
    pub fault: Option<FaultInjection>,
}

impl ExecutorConfig {
    pub fn new(worker_count: usize, mode: ExecutorMode) -> Self {
        ExecutorConfig { worker_count, mode, fault: None }
    }

    pub fn validate(&self, depth: usize) -> Result<()> {
        if self.worker_count == 0 || self.worker_count > depth {
            return Err(Error::invalid(format!(
                "worker count {} must lie in 1..={depth}",
                self.worker_count
            )));
        }
        Ok(())
    }
}

/// Contiguous, near-equal layer blocks `[start, end)` covering `0..depth`.
pub fn partition(depth: usize, workers: usize) -> Vec<(usize, usize)> {
    let base = depth / workers;
    let extra = depth % workers;
    let mut start = 0;
    (0..workers)
        .map(|w| {
            let len = base + usize::from(w < extra);
            let block = (start, start + len);
            start += len;
            block
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ChannelKind {
    /// `p_l` towards layer `l − 1`.
    Input,
    /// `(q_l, u_l)` towards layer `l + 1`.
    Coupling,
}

/// Sender and receiver layers (1-based) and the message kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ChannelKey {
    pub from: usize,
    pub to: usize,
    pub kind: ChannelKind,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ChannelStats {
    pub messages: u64,
    /// Bytes on the wire, headers included.
    pub bytes: u64,
    /// Bytes after the fixed headers.
    pub payload_bytes: u64,
    /// Matrix entries carried.
    pub entries: u64,
}

impl ChannelStats {
    fn add(&mut self, other: &ChannelStats) {
        self.messages += other.messages;
        self.bytes += other.bytes;
        self.payload_bytes += other.payload_bytes;
        self.entries += other.entries;
    }
}

/// Communication volume of one epoch, per channel.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CommLedger {
    channels: BTreeMap<ChannelKey, ChannelStats>,
}

impl CommLedger {
    pub fn record(&mut self, key: ChannelKey, bytes: usize, entries: usize) {
        let s = self.channels.entry(key).or_default();
        s.messages += 1;
        s.bytes += bytes as u64;
        s.payload_bytes += (bytes - HEADER_BYTES) as u64;
        s.entries += entries as u64;
    }

    pub fn channels(&self) -> &BTreeMap<ChannelKey, ChannelStats> {
        &self.channels
    }

    pub fn total_bytes(&self) -> u64 {
        self.channels.values().map(|s| s.bytes).sum()
    }

    pub fn totals(&self, kind: ChannelKind) -> ChannelStats {
        let mut t = ChannelStats::default();
        for (_, s) in self.channels.iter().filter(|(k, _)| k.kind == kind) {
            t.add(s);
        }
        t
    }

    pub fn reset(&mut self) {
        self.channels.clear();
    }

    fn merge(&mut self, other: &CommLedger) {
        for (k, s) in &other.channels {
            self.channels.entry(*k).or_default().add(s);
        }
    }
}

#[derive(Debug)]
struct Message {
    bytes: Vec<u8>,
}

/// A channel end that counts every byte it pushes.
#[derive(Debug)]
struct CountingSender {
    inner: Sender<Message>,
    pushed: Arc<AtomicU64>,
}

impl CountingSender {
    fn send(&self, bytes: Vec<u8>) -> Result<()> {
        let n = bytes.len() as u64;
        self.inner
            .send(Message { bytes })
            .map_err(|_| Error::Worker("channel closed".into()))?;
        self.pushed.fetch_add(n, Ordering::Relaxed);
        Ok(())
    }
}

struct Block {
    first: usize,
    layers: Vec<LayerState>,
    prev_in: Option<(Array2<f64>, Array2<f64>)>,
    next_in: Option<Array2<f64>>,
    to_prev: Option<CountingSender>,
    to_next: Option<CountingSender>,
    from_prev: Option<Receiver<Message>>,
    from_next: Option<Receiver<Message>>,
    ledger: CommLedger,
    fault: Option<FaultInjection>,
}

fn recv(rx: &Receiver<Message>) -> Result<Vec<u8>> {
    rx.try_recv()
        .map(|m| m.bytes)
        .map_err(|_| Error::Worker("expected message missing".into()))
}

impl Block {
    fn last_id(&self) -> usize {
        self.first + self.layers.len()
    }

    fn inject(&self, phase: Phase) -> Result<()> {
        if let Some(f) = self.fault {
            let owned = f.layer > self.first && f.layer <= self.last_id();
            if owned && f.phase == phase {
                match f.kind {
                    FaultKind::Error => {
                        return Err(Error::Worker(format!("injected fault in {} phase of layer {}", phase.name(), f.layer)))
                    }
                    FaultKind::Panic => panic!("injected panic in {} phase of layer {}", phase.name(), f.layer),
                }
            }
        }
        Ok(())
    }

    fn send_coupling(&mut self) -> Result<()> {
        let Some(tx) = &self.to_next else { return Ok(()) };
        let id = self.last_id();
        let last = self.layers.last().expect("non-empty block");
        let key = ChannelKey { from: id, to: id + 1, kind: ChannelKind::Coupling };
        for m in [last.output.as_ref(), last.dual.as_ref()] {
            let m = m.expect("block boundary is a hidden layer");
            let bytes = encode_dense_message(id as u16, &m.view())?;
            self.ledger.record(key, bytes.len(), m.len());
            tx.send(bytes)?;
        }
        Ok(())
    }

    fn recv_coupling(&mut self) -> Result<()> {
        let Some(rx) = &self.from_prev else { return Ok(()) };
        let (_, q) = decode_message(&recv(rx)?, None)?;
        let (_, u) = decode_message(&recv(rx)?, None)?;
        self.prev_in = Some((q, u));
        Ok(())
    }

    fn send_input(&mut self, quant: Option<&QuantizationSet>) -> Result<()> {
        let Some(tx) = &self.to_prev else { return Ok(()) };
        let id = self.first + 1;
        let p = self.layers[0].input.view();
        let bytes = match quant {
            Some(set) => encode_message(id as u16, &p, set)?,
            None => encode_dense_message(id as u16, &p)?,
        };
        self.ledger.record(ChannelKey { from: id, to: id - 1, kind: ChannelKind::Input }, bytes.len(), p.len());
        tx.send(bytes)
    }

    fn recv_input(&mut self, quant: Option<&QuantizationSet>) -> Result<()> {
        let Some(rx) = &self.from_next else { return Ok(()) };
        let (_, p) = decode_message(&recv(rx)?, quant)?;
        self.next_in = Some(p);
        Ok(())
    }

    fn phase(&mut self, phase: Phase, ctx: &EpochContext<'_>) -> Result<()> {
        self.inject(phase)?;
        let prev = self.prev_in.as_ref().map(|(q, u)| Coupling { output: q.view(), dual: u.view() });
        let next: Option<ArrayView2<'_, f64>> = self.next_in.as_ref().map(|p| p.view());
        run_block_phase(phase, &mut self.layers, self.first, prev, next, ctx)
    }
}

/// Runs epochs across layer-owning workers.
pub struct LayerParallelExecutor {
    config: ExecutorConfig,
    ledger: CommLedger,
    pushed: Arc<AtomicU64>,
    #[cfg(feature = "parallel")]
    pool: Option<rayon::ThreadPool>,
}

impl std::fmt::Debug for LayerParallelExecutor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LayerParallelExecutor")
            .field("config", &self.config)
            .field("ledger", &self.ledger)
            .finish()
    }
}

/// Thread count for `workers` workers, capped by [`THREADS_ENV`].
pub fn thread_count(workers: usize) -> usize {
    let cap = std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok()).filter(|&n| n > 0);
    cap.map_or(workers, |c| workers.min(c))
}

impl LayerParallelExecutor {
    pub fn new(config: ExecutorConfig) -> Result<Self> {
        if config.worker_count == 0 {
            return Err(Error::invalid("worker count must be positive"));
        }
        #[cfg(feature = "parallel")]
        let pool = match config.mode {
            ExecutorMode::Parallel => Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(thread_count(config.worker_count))
                    .thread_name(|i| format!("pdadmm-worker-{i}"))
                    .build()
                    .map_err(|e| Error::Worker(e.to_string()))?,
            ),
            ExecutorMode::Sequential => None,
        };
        Ok(LayerParallelExecutor {
            config,
            ledger: CommLedger::default(),
            pushed: Arc::new(AtomicU64::new(0)),
            #[cfg(feature = "parallel")]
            pool,
        })
    }

    pub fn config(&self) -> &ExecutorConfig {
        &self.config
    }

    pub fn set_fault(&mut self, fault: Option<FaultInjection>) {
        self.config.fault = fault;
    }

    /// Ledger of the most recent epoch.
    pub fn ledger(&self) -> &CommLedger {
        &self.ledger
    }

    /// Bytes counted by the channel senders during the most recent epoch.
    pub fn channel_bytes(&self) -> u64 {
        self.pushed.load(Ordering::Relaxed)
    }

    fn build_blocks(&self, layers: Vec<LayerState>) -> Vec<Block> {
        let ranges = partition(layers.len(), self.config.worker_count);
        let mut layers = layers.into_iter();
        let mut blocks: Vec<Block> = ranges
            .iter()
            .map(|&(start, end)| Block {
                first: start,
                layers: layers.by_ref().take(end - start).collect(),
                prev_in: None,
                next_in: None,
                to_prev: None,
                to_next: None,
                from_prev: None,
                from_next: None,
                ledger: CommLedger::default(),
                fault: self.config.fault,
            })
            .collect();
        for b in 1..blocks.len() {
            let (up_tx, up_rx) = channel();
            let (down_tx, down_rx) = channel();
            blocks[b - 1].to_next = Some(CountingSender { inner: up_tx, pushed: Arc::clone(&self.pushed) });
            blocks[b].from_prev = Some(up_rx);
            blocks[b].to_prev = Some(CountingSender { inner: down_tx, pushed: Arc::clone(&self.pushed) });
            blocks[b - 1].from_next = Some(down_rx);
        }
        blocks
    }

    /// Runs `f` on every block; the call returns once all blocks are done.
    /// The first error in block order wins.
    fn stage<F>(&self, blocks: &mut [Block], f: F) -> Result<()>
    where
        F: Fn(&mut Block) -> Result<()> + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if let Some(pool) = &self.pool {
            let results: Vec<Result<()>> = pool.install(|| blocks.par_iter_mut().map(&f).collect());
            return results.into_iter().collect();
        }
        blocks.iter_mut().try_for_each(f)
    }

    fn run_blocks(&self, blocks: &mut [Block], ctx: &EpochContext<'_>) -> Result<()> {
        let quant = ctx.quantization;
        self.stage(blocks, |b| b.send_coupling())?;
        self.stage(blocks, |b| b.recv_coupling())?;
        self.stage(blocks, |b| b.phase(Phase::Input, ctx))?;
        self.stage(blocks, |b| b.send_input(quant))?;
        self.stage(blocks, |b| b.recv_input(quant))?;
        for phase in &Phase::ALL[1..] {
            self.stage(blocks, |b| b.phase(*phase, ctx))?;
        }
        Ok(())
    }
}

fn panic_message(payload: Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = payload.downcast_ref::<&str>() {
        (*s).to_string()
    } else if let Some(s) = payload.downcast_ref::<String>() {
        s.clone()
    } else {
        "worker panicked".to_string()
    }
}

impl EpochRunner for LayerParallelExecutor {
    /// One epoch across the workers. On any failure the state is restored to
    /// its value at entry.
    fn run_epoch(&mut self, state: &mut ModelState, ctx: &EpochContext<'_>) -> Result<EpochReport> {
        self.config.validate(state.depth())?;
        self.ledger.reset();
        self.pushed.store(0, Ordering::Relaxed);
        let snapshot = state.clone();
        let mut blocks = self.build_blocks(std::mem::take(&mut state.layers));
        let outcome = catch_unwind(AssertUnwindSafe(|| self.run_blocks(&mut blocks, ctx)))
            .unwrap_or_else(|p| Err(Error::Worker(panic_message(p))));
        if let Err(e) = outcome {
            *state = snapshot;
            return Err(e);
        }
        for block in blocks {
            self.ledger.merge(&block.ledger);
            state.layers.extend(block.layers);
        }
        Ok(EpochReport { bytes_sent: self.ledger.total_bytes() })
    }
}
