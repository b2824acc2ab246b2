//! Pipes, directors and the pipeline engine.
//!
//! A top-level sequential pipeline runs each child as its own stage on a
//! dedicated worker thread, connected by bounded queues, so distinct windows
//! occupy distinct stages at the same time. Parallel and loop groups run as a
//! single composite stage. Output order always equals input order: every
//! envelope carries its source sequence number and the sink resequences.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, unbounded, Receiver, RecvTimeoutError, Sender};
use serde::Deserialize;
use thiserror::Error;

use crate::window::{keys, DataWindow, InferenceSlot, SlotPayload, WindowId};

pub const DEFAULT_QUEUE_CAPACITY: usize = 4;

/// Error raised by a pipe's transform. The engine wraps it into a
/// [`StageFailure`] carrying the pipe name and window.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("{0}")]
pub struct PipeError(pub String);

impl PipeError {
    pub fn new(msg: impl fmt::Display) -> Self {
        PipeError(msg.to_string())
    }
}

macro_rules! pipe_error_from {
    ($($t:ty),*) => {
        $(impl From<$t> for PipeError {
            fn from(e: $t) -> Self {
                PipeError(e.to_string())
            }
        })*
    };
}

pipe_error_from!(
    crate::window::WindowError,
    crate::window::ImageError,
    crate::adapters::AdapterError,
    crate::keyframe::KeyframeError,
    crate::inference::BoxError
);

#[derive(Debug, Clone, PartialEq, Error)]
#[error("stage {pipe} failed on window {window}: {message}")]
pub struct StageFailure {
    pub pipe: String,
    pub window: WindowId,
    pub window_index: u32,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PipelineError {
    #[error("parallel group {group}: children {a} and {b} both write {key}")]
    OverlappingWrites {
        group: String,
        a: String,
        b: String,
        key: String,
    },
    #[error("loop {0} needs max_iterations >= 1")]
    LoopIterations(String),
    #[error("pipeline {0} has no children")]
    Empty(String),
    #[error("queue capacity must be positive")]
    QueueCapacity,
    #[error("batch size must be positive")]
    BatchSize,
    #[error("unknown pipe {0}")]
    UnknownPipe(String),
    #[error("unknown loop predicate {0}")]
    UnknownPredicate(String),
    #[error("config: {0}")]
    Config(String),
}

/// A window transform: reads some slots, writes the slots it declares.
pub trait Pipe: Send + Sync {
    fn name(&self) -> &str;

    fn reads(&self) -> Vec<String> {
        Vec::new()
    }

    fn writes(&self) -> Vec<String>;

    fn process(&self, window: DataWindow) -> Result<DataWindow, PipeError>;

    /// Vectorized form. Results are positional; the default applies
    /// `process` one window at a time.
    fn process_batch(&self, windows: Vec<DataWindow>) -> Vec<Result<DataWindow, PipeError>> {
        windows.into_iter().map(|w| self.process(w)).collect()
    }
}

/// Extracts a pipe-specific request from a window and injects the response.
pub trait PipeDirector: Send + Sync {
    type Request;
    type Response;

    fn extract(&self, window: &DataWindow) -> Result<Self::Request, PipeError>;
    fn inject(&self, window: DataWindow, response: Self::Response) -> Result<DataWindow, PipeError>;
}

/// The model side of a directed pipe.
pub trait Inference<Req, Resp>: Send + Sync {
    fn infer(&self, request: Req) -> Result<Resp, PipeError>;
}

impl<Req, Resp, F> Inference<Req, Resp> for F
where
    F: Fn(Req) -> Result<Resp, PipeError> + Send + Sync,
{
    fn infer(&self, request: Req) -> Result<Resp, PipeError> {
        self(request)
    }
}

/// A pipe assembled from a director and a model.
pub struct DirectedPipe<D, M> {
    name: String,
    writes: Vec<String>,
    director: D,
    model: M,
}

impl<D, M> DirectedPipe<D, M>
where
    D: PipeDirector,
    M: Inference<D::Request, D::Response>,
{
    pub fn new(name: impl Into<String>, writes: &[&str], director: D, model: M) -> Self {
        Self {
            name: name.into(),
            writes: writes.iter().map(|s| s.to_string()).collect(),
            director,
            model,
        }
    }
}

impl<D, M> Pipe for DirectedPipe<D, M>
where
    D: PipeDirector,
    M: Inference<D::Request, D::Response>,
{
    fn name(&self) -> &str {
        &self.name
    }

    fn writes(&self) -> Vec<String> {
        self.writes.clone()
    }

    fn process(&self, window: DataWindow) -> Result<DataWindow, PipeError> {
        let request = self.director.extract(&window)?;
        let response = self.model.infer(request)?;
        self.director.inject(window, response)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchPolicy {
    pub max_batch: usize,
    pub flush_timeout: Duration,
}

impl BatchPolicy {
    pub fn new(max_batch: usize, flush_timeout: Duration) -> Result<Self, PipelineError> {
        if max_batch == 0 {
            return Err(PipelineError::BatchSize);
        }
        Ok(Self {
            max_batch,
            flush_timeout,
        })
    }
}

pub type LoopPredicate = Arc<dyn Fn(&DataWindow) -> bool + Send + Sync>;

#[derive(Clone)]
pub enum Variant {
    Sequential,
    Parallel,
    Loop {
        predicate: LoopPredicate,
        max_iterations: u32,
    },
}

impl fmt::Debug for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Sequential => f.write_str("Sequential"),
            Variant::Parallel => f.write_str("Parallel"),
            Variant::Loop { max_iterations, .. } => write!(f, "Loop(max={max_iterations})"),
        }
    }
}

#[derive(Clone)]
pub enum Node {
    Pipe(Arc<dyn Pipe>),
    Batched { pipe: Arc<dyn Pipe>, policy: BatchPolicy },
    Pipeline(Arc<PipelineSpec>),
}

impl Node {
    pub fn pipe(p: impl Pipe + 'static) -> Self {
        Node::Pipe(Arc::new(p))
    }

    fn as_pipe(&self) -> &dyn Pipe {
        match self {
            Node::Pipe(p) | Node::Batched { pipe: p, .. } => p.as_ref(),
            Node::Pipeline(spec) => spec.as_ref(),
        }
    }
}

impl fmt::Debug for Node {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Node({})", self.as_pipe().name())
    }
}

/// A tree of pipes. A spec is itself a pipe, so specs nest.
#[derive(Clone, Debug)]
pub struct PipelineSpec {
    pub name: String,
    pub variant: Variant,
    pub children: Vec<Node>,
    pub queue_capacity: usize,
    /// Worker threads per top-level stage.
    pub workers: usize,
}

impl PipelineSpec {
    pub fn new(name: impl Into<String>, variant: Variant, children: Vec<Node>) -> Self {
        Self {
            name: name.into(),
            variant,
            children,
            queue_capacity: DEFAULT_QUEUE_CAPACITY,
            workers: 1,
        }
    }

    pub fn sequential(name: impl Into<String>, children: Vec<Node>) -> Self {
        Self::new(name, Variant::Sequential, children)
    }

    pub fn parallel(name: impl Into<String>, children: Vec<Node>) -> Self {
        Self::new(name, Variant::Parallel, children)
    }

    pub fn looped(name: impl Into<String>, children: Vec<Node>, predicate: LoopPredicate, max_iterations: u32) -> Self {
        Self::new(
            name,
            Variant::Loop {
                predicate,
                max_iterations,
            },
            children,
        )
    }

    pub fn with_queue_capacity(mut self, capacity: usize) -> Self {
        self.queue_capacity = capacity;
        self
    }

    pub fn with_workers(mut self, workers: usize) -> Self {
        self.workers = workers.max(1);
        self
    }

    pub fn loop_slot_key(&self) -> String {
        format!("{}.{}", keys::LOOP, self.name)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.children.is_empty() {
            return Err(PipelineError::Empty(self.name.clone()));
        }
        if self.queue_capacity == 0 {
            return Err(PipelineError::QueueCapacity);
        }
        match &self.variant {
            Variant::Loop { max_iterations, .. } if *max_iterations == 0 => {
                return Err(PipelineError::LoopIterations(self.name.clone()));
            }
            Variant::Parallel => {
                let mut owner: BTreeMap<String, String> = BTreeMap::new();
                for child in &self.children {
                    let pipe = child.as_pipe();
                    for key in pipe.writes() {
                        if let Some(prev) = owner.insert(key.clone(), pipe.name().to_string()) {
                            return Err(PipelineError::OverlappingWrites {
                                group: self.name.clone(),
                                a: prev,
                                b: pipe.name().to_string(),
                                key,
                            });
                        }
                    }
                }
            }
            _ => {}
        }
        for child in &self.children {
            match child {
                Node::Pipeline(spec) => spec.validate()?,
                Node::Batched { policy, .. } if policy.max_batch == 0 => return Err(PipelineError::BatchSize),
                _ => {}
            }
        }
        Ok(())
    }
}

impl Pipe for PipelineSpec {
    fn name(&self) -> &str {
        &self.name
    }

    fn reads(&self) -> Vec<String> {
        let set: BTreeSet<String> = self.children.iter().flat_map(|c| c.as_pipe().reads()).collect();
        set.into_iter().collect()
    }

    fn writes(&self) -> Vec<String> {
        let mut set: BTreeSet<String> = self.children.iter().flat_map(|c| c.as_pipe().writes()).collect();
        if matches!(self.variant, Variant::Loop { .. }) {
            set.insert(self.loop_slot_key());
        }
        set.into_iter().collect()
    }

    fn process(&self, window: DataWindow) -> Result<DataWindow, PipeError> {
        let children: Vec<&dyn Pipe> = self.children.iter().map(Node::as_pipe).collect();
        match &self.variant {
            Variant::Sequential => run_sequence(&children, window).map_err(|f| PipeError(f.to_string())),
            Variant::Parallel => run_parallel(&self.name, &children, window).map_err(|f| PipeError(f.to_string())),
            Variant::Loop {
                predicate,
                max_iterations,
            } => run_loop_keyed(&self.loop_slot_key(), &self.name, &children, window, predicate.as_ref(), *max_iterations)
                .map_err(|f| PipeError(f.to_string())),
        }
    }
}

/// Applies one pipe and enforces stage isolation: no slot may disappear and
/// only declared keys may change.
pub fn apply_checked(pipe: &dyn Pipe, window: DataWindow) -> Result<DataWindow, StageFailure> {
    let id = window.id().clone();
    let index = window.index();
    let fail = |message: String| StageFailure {
        pipe: pipe.name().to_string(),
        window: id.clone(),
        window_index: index,
        message,
    };
    let before = window.slots().clone();
    let out = catch_unwind(AssertUnwindSafe(|| pipe.process(window)))
        .map_err(|p| fail(panic_message(p)))?
        .map_err(|e| fail(e.0))?;
    check_writes(pipe, &before, &out).map_err(fail)?;
    Ok(out)
}

fn check_writes(pipe: &dyn Pipe, before: &BTreeMap<String, InferenceSlot>, after: &DataWindow) -> Result<(), String> {
    let declared: BTreeSet<String> = pipe.writes().into_iter().collect();
    for key in before.keys() {
        if !after.slots().contains_key(key) {
            return Err(format!("slot {key} was removed"));
        }
    }
    for (key, slot) in after.slots() {
        if before.get(key) != Some(slot) && !declared.contains(key) {
            return Err(format!("undeclared write to slot {key}"));
        }
    }
    Ok(())
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = p.downcast_ref::<&str>() {
        format!("panic: {s}")
    } else if let Some(s) = p.downcast_ref::<String>() {
        format!("panic: {s}")
    } else {
        "panic".to_string()
    }
}

fn run_sequence(pipes: &[&dyn Pipe], mut window: DataWindow) -> Result<DataWindow, StageFailure> {
    for pipe in pipes {
        window = apply_checked(*pipe, window)?;
    }
    Ok(window)
}

fn run_parallel(group: &str, pipes: &[&dyn Pipe], window: DataWindow) -> Result<DataWindow, StageFailure> {
    let outputs: Vec<Result<DataWindow, StageFailure>> = thread::scope(|s| {
        let handles: Vec<_> = pipes
            .iter()
            .map(|pipe| {
                let w = window.clone();
                s.spawn(move || apply_checked(*pipe, w))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("apply_checked catches panics"))
            .collect()
    });
    let base = window.slots().clone();
    let mut merged = window;
    for out in outputs {
        let out = out?;
        for (key, slot) in out.into_slots() {
            if base.get(&key) != Some(&slot) {
                let id = merged.id().clone();
                let index = merged.index();
                merged = merged.put_slot(slot).map_err(|e| StageFailure {
                    pipe: group.to_string(),
                    window: id,
                    window_index: index,
                    message: e.to_string(),
                })?;
            }
        }
    }
    Ok(merged)
}

/// Outcome of a loop, recorded in the window's bookkeeping slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoopOutcome {
    pub iterations: u32,
    pub max_reached: bool,
}

impl LoopOutcome {
    pub fn from_slot(slot: &InferenceSlot) -> Option<Self> {
        match &slot.payload {
            SlotPayload::Value(v) => Some(LoopOutcome {
                iterations: v.get("iterations")?.as_u64()? as u32,
                max_reached: v.get("max_reached")?.as_bool()?,
            }),
            _ => None,
        }
    }
}

/// Re-passes a window through `pipes` until `predicate` holds (checked after
/// each pass) or `max_iterations` passes have run.
pub fn run_loop(
    name: &str,
    pipes: &[&dyn Pipe],
    window: DataWindow,
    predicate: &dyn Fn(&DataWindow) -> bool,
    max_iterations: u32,
) -> Result<(DataWindow, LoopOutcome), StageFailure> {
    let key = format!("{}.{}", keys::LOOP, name);
    let out = run_loop_keyed(&key, name, pipes, window, predicate, max_iterations)?;
    let outcome = out.slot(&key).and_then(LoopOutcome::from_slot).expect("loop slot written");
    Ok((out, outcome))
}

fn run_loop_keyed(
    key: &str,
    name: &str,
    pipes: &[&dyn Pipe],
    mut window: DataWindow,
    predicate: &dyn Fn(&DataWindow) -> bool,
    max_iterations: u32,
) -> Result<DataWindow, StageFailure> {
    let max_iterations = max_iterations.max(1);
    let mut iterations = 0;
    let mut satisfied = false;
    while iterations < max_iterations {
        window = run_sequence(pipes, window)?;
        iterations += 1;
        if predicate(&window) {
            satisfied = true;
            break;
        }
    }
    let record = serde_json::json!({ "iterations": iterations, "max_reached": !satisfied });
    let id = window.id().clone();
    let index = window.index();
    window
        .put_slot(InferenceSlot::new(key, SlotPayload::Value(record), name))
        .map_err(|e| StageFailure {
            pipe: name.to_string(),
            window: id,
            window_index: index,
            message: e.to_string(),
        })
}

struct Envelope {
    seq: u64,
    item: Result<DataWindow, StageFailure>,
}

enum Stage {
    Single(Arc<dyn Pipe>),
    Batched(Arc<dyn Pipe>, BatchPolicy),
}

/// Handle on a running pipeline. Iterating yields output windows in source
/// order; failed windows are skipped and reported on the failure channel.
pub struct PipelineRun {
    rx: Receiver<Envelope>,
    pending: BTreeMap<u64, Result<DataWindow, StageFailure>>,
    next_seq: u64,
    failure_tx: Sender<StageFailure>,
    failure_rx: Receiver<StageFailure>,
    handles: Vec<JoinHandle<()>>,
}

impl PipelineRun {
    /// Receiver of per-window stage failures, in source order.
    pub fn failures(&self) -> Receiver<StageFailure> {
        self.failure_rx.clone()
    }

    /// Drains the run, returning outputs and failures.
    pub fn collect_all(mut self) -> (Vec<DataWindow>, Vec<StageFailure>) {
        let outputs: Vec<DataWindow> = self.by_ref().collect();
        let failures = self.failure_rx.try_iter().collect();
        (outputs, failures)
    }
}

impl Iterator for PipelineRun {
    type Item = DataWindow;

    fn next(&mut self) -> Option<DataWindow> {
        loop {
            if let Some(item) = self.pending.remove(&self.next_seq) {
                self.next_seq += 1;
                match item {
                    Ok(w) => return Some(w),
                    Err(f) => {
                        log::warn!("{f}");
                        let _ = self.failure_tx.send(f);
                        continue;
                    }
                }
            }
            match self.rx.recv() {
                Ok(env) => {
                    self.pending.insert(env.seq, env.item);
                }
                Err(_) => {
                    for h in self.handles.drain(..) {
                        let _ = h.join();
                    }
                    // all senders gone: whatever is left drains in sequence order
                    match self.pending.keys().next() {
                        Some(&seq) => self.next_seq = seq,
                        None => return None,
                    }
                }
            }
        }
    }
}

/// Runs `spec` over `source` with pipeline parallelism.
pub fn run_pipeline<I>(spec: Arc<PipelineSpec>, source: I) -> Result<PipelineRun, PipelineError>
where
    I: IntoIterator<Item = DataWindow>,
    I::IntoIter: Send + 'static,
{
    spec.validate()?;
    let stages: Vec<Stage> = match spec.variant {
        Variant::Sequential => spec
            .children
            .iter()
            .map(|c| match c {
                Node::Pipe(p) => Stage::Single(p.clone()),
                Node::Batched { pipe, policy } => Stage::Batched(pipe.clone(), *policy),
                Node::Pipeline(s) => Stage::Single(s.clone() as Arc<dyn Pipe>),
            })
            .collect(),
        _ => vec![Stage::Single(spec.clone() as Arc<dyn Pipe>)],
    };
    Ok(spawn_stages(stages, spec.queue_capacity, spec.workers, source.into_iter()))
}

/// Runs one batch-capable pipe over a stream of windows.
pub fn run_batched<I>(pipe: Arc<dyn Pipe>, policy: BatchPolicy, source: I) -> Result<PipelineRun, PipelineError>
where
    I: IntoIterator<Item = DataWindow>,
    I::IntoIter: Send + 'static,
{
    if policy.max_batch == 0 {
        return Err(PipelineError::BatchSize);
    }
    Ok(spawn_stages(
        vec![Stage::Batched(pipe, policy)],
        DEFAULT_QUEUE_CAPACITY,
        1,
        source.into_iter(),
    ))
}

fn spawn_stages<S>(stages: Vec<Stage>, capacity: usize, workers: usize, source: S) -> PipelineRun
where
    S: Iterator<Item = DataWindow> + Send + 'static,
{
    let mut handles = Vec::new();
    let (first_tx, mut rx) = bounded::<Envelope>(capacity);
    handles.push(thread::spawn(move || {
        for (seq, window) in source.enumerate() {
            if first_tx
                .send(Envelope {
                    seq: seq as u64,
                    item: Ok(window),
                })
                .is_err()
            {
                break;
            }
        }
    }));
    for stage in stages {
        let (tx, next_rx) = bounded::<Envelope>(capacity);
        match stage {
            Stage::Single(pipe) => {
                for _ in 0..workers {
                    let (rx, tx, pipe) = (rx.clone(), tx.clone(), pipe.clone());
                    handles.push(thread::spawn(move || {
                        for env in rx.iter() {
                            let item = env.item.and_then(|w| apply_checked(pipe.as_ref(), w));
                            if tx.send(Envelope { seq: env.seq, item }).is_err() {
                                break;
                            }
                        }
                    }));
                }
            }
            Stage::Batched(pipe, policy) => {
                let rx = rx.clone();
                handles.push(thread::spawn(move || batch_worker(pipe.as_ref(), policy, rx, tx)));
            }
        }
        rx = next_rx;
    }
    let (failure_tx, failure_rx) = unbounded();
    PipelineRun {
        rx,
        pending: BTreeMap::new(),
        next_seq: 0,
        failure_tx,
        failure_rx,
        handles,
    }
}

fn batch_worker(pipe: &dyn Pipe, policy: BatchPolicy, rx: Receiver<Envelope>, tx: Sender<Envelope>) {
    let mut disconnected = false;
    while !disconnected {
        let first = match rx.recv() {
            Ok(env) => env,
            Err(_) => break,
        };
        let deadline = Instant::now() + policy.flush_timeout;
        let mut batch = vec![first];
        while batch.len() < policy.max_batch {
            match rx.recv_deadline(deadline) {
                Ok(env) => batch.push(env),
                Err(RecvTimeoutError::Timeout) => break,
                Err(RecvTimeoutError::Disconnected) => {
                    disconnected = true;
                    break;
                }
            }
        }
        let mut seqs = Vec::new();
        let mut windows = Vec::new();
        let mut befores = Vec::new();
        for env in batch {
            match env.item {
                Ok(w) => {
                    seqs.push(env.seq);
                    befores.push((w.id().clone(), w.index(), w.slots().clone()));
                    windows.push(w);
                }
                Err(f) => {
                    if tx.send(Envelope { seq: env.seq, item: Err(f) }).is_err() {
                        return;
                    }
                }
            }
        }
        if windows.is_empty() {
            continue;
        }
        let n = windows.len();
        let results = catch_unwind(AssertUnwindSafe(|| pipe.process_batch(windows)))
            .unwrap_or_else(|p| vec![Err(PipeError(panic_message(p))); n]);
        for (i, (seq, (id, index, before))) in seqs.into_iter().zip(befores).enumerate() {
            let fail = |message: String| StageFailure {
                pipe: pipe.name().to_string(),
                window: id.clone(),
                window_index: index,
                message,
            };
            let item = match results.get(i) {
                Some(Ok(w)) => check_writes(pipe, &before, w).map(|_| w.clone()).map_err(fail),
                Some(Err(e)) => Err(fail(e.0.clone())),
                None => Err(fail("batch returned too few results".into())),
            };
            if tx.send(Envelope { seq, item }).is_err() {
                return;
            }
        }
    }
}

/// One unit produced by a branching step.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchUnit<T> {
    pub window: WindowId,
    pub branch_index: u32,
    pub payload: T,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BranchError {
    #[error("window {window}: branch {branch_index} of {expected} never arrived")]
    MissingBranch {
        window: WindowId,
        branch_index: u32,
        expected: u32,
    },
    #[error("window {window}: unexpected branch {branch_index} (from {from})")]
    UnexpectedBranch {
        window: WindowId,
        branch_index: u32,
        from: WindowId,
    },
}

impl From<BranchError> for PipeError {
    fn from(e: BranchError) -> Self {
        PipeError(e.to_string())
    }
}

/// Maps one window into many tagged units.
pub fn branch<T>(
    window: &DataWindow,
    split: impl FnOnce(&DataWindow) -> Result<Vec<T>, PipeError>,
) -> Result<Vec<BranchUnit<T>>, PipeError> {
    Ok(split(window)?
        .into_iter()
        .enumerate()
        .map(|(i, payload)| BranchUnit {
            window: window.id().clone(),
            branch_index: i as u32,
            payload,
        })
        .collect())
}

/// Reassembles all `expected` branches of `window` in branch order and hands
/// them to `merger`.
pub fn merge<R>(
    window: DataWindow,
    expected: u32,
    mut units: Vec<BranchUnit<R>>,
    merger: impl FnOnce(DataWindow, Vec<R>) -> Result<DataWindow, PipeError>,
) -> Result<DataWindow, PipeError> {
    units.sort_by_key(|u| u.branch_index);
    for u in &units {
        if &u.window != window.id() || u.branch_index >= expected {
            return Err(BranchError::UnexpectedBranch {
                window: window.id().clone(),
                branch_index: u.branch_index,
                from: u.window.clone(),
            }
            .into());
        }
    }
    for i in 0..expected {
        if units.get(i as usize).map(|u| u.branch_index) != Some(i) {
            return Err(BranchError::MissingBranch {
                window: window.id().clone(),
                branch_index: i,
                expected,
            }
            .into());
        }
    }
    merger(window, units.into_iter().map(|u| u.payload).collect())
}

/// Split / per-unit / merge behavior of a branching pipe.
pub trait Brancher: Send + Sync {
    type Unit: Send;
    type Output: Send;

    fn split(&self, window: &DataWindow) -> Result<Vec<Self::Unit>, PipeError>;
    fn process_unit(&self, unit: Self::Unit) -> Result<Self::Output, PipeError>;
    fn merge(&self, window: DataWindow, outputs: Vec<Self::Output>) -> Result<DataWindow, PipeError>;
}

/// Branch, process every unit, merge back into the owning window.
pub struct BranchingPipe<B> {
    name: String,
    writes: Vec<String>,
    brancher: B,
}

impl<B: Brancher> BranchingPipe<B> {
    pub fn new(name: impl Into<String>, writes: &[&str], brancher: B) -> Self {
        Self {
            name: name.into(),
            writes: writes.iter().map(|s| s.to_string()).collect(),
            brancher,
        }
    }
}

impl<B: Brancher> Pipe for BranchingPipe<B> {
    fn name(&self) -> &str {
        &self.name
    }

    fn writes(&self) -> Vec<String> {
        self.writes.clone()
    }

    fn process(&self, window: DataWindow) -> Result<DataWindow, PipeError> {
        let units = branch(&window, |w| self.brancher.split(w))?;
        let expected = units.len() as u32;
        let mut done = Vec::with_capacity(units.len());
        for u in units {
            done.push(BranchUnit {
                window: u.window,
                branch_index: u.branch_index,
                payload: self.brancher.process_unit(u.payload)?,
            });
        }
        merge(window, expected, done, |w, outs| self.brancher.merge(w, outs))
    }
}

/// Named pipes and predicates a declarative config refers to.
#[derive(Default, Clone)]
pub struct PipeRegistry {
    pipes: HashMap<String, Arc<dyn Pipe>>,
    predicates: HashMap<String, LoopPredicate>,
}

impl PipeRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, pipe: Arc<dyn Pipe>) -> &mut Self {
        self.pipes.insert(pipe.name().to_string(), pipe);
        self
    }

    pub fn register_predicate(&mut self, name: &str, predicate: LoopPredicate) -> &mut Self {
        self.predicates.insert(name.to_string(), predicate);
        self
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "lowercase")]
enum VariantConfig {
    Sequential,
    Parallel,
    Loop,
}

#[derive(Debug, Clone, Deserialize)]
struct BatchConfig {
    max_batch: usize,
    #[serde(default)]
    flush_timeout_ms: u64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum NodeConfig {
    Pipe {
        pipe: String,
        #[serde(default)]
        batch: Option<BatchConfig>,
    },
    Group(Box<GroupConfig>),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct GroupConfig {
    #[serde(default)]
    name: Option<String>,
    variant: VariantConfig,
    #[serde(default)]
    queue_capacity: Option<usize>,
    #[serde(default)]
    workers: Option<usize>,
    #[serde(default)]
    predicate: Option<String>,
    #[serde(default)]
    max_iterations: Option<u32>,
    children: Vec<NodeConfig>,
}

/// Builds a spec from a TOML document:
///
/// ```toml
/// name = "recipe"
/// variant = "sequential"
/// queue_capacity = 4
///
/// [[children]]
/// pipe = "keyframes"
///
/// [[children]]
/// variant = "parallel"
/// children = [{ pipe = "ocr" }, { pipe = "tagger" }]
///
/// [[children]]
/// pipe = "captioner"
/// batch = { max_batch = 4, flush_timeout_ms = 20 }
/// ```
pub fn spec_from_toml(text: &str, registry: &PipeRegistry) -> Result<PipelineSpec, PipelineError> {
    let cfg: GroupConfig = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
    let spec = build_group(&cfg, registry, "pipeline", 0)?;
    spec.validate()?;
    Ok(spec)
}

fn build_group(
    cfg: &GroupConfig,
    registry: &PipeRegistry,
    default_name: &str,
    depth: usize,
) -> Result<PipelineSpec, PipelineError> {
    let name = cfg.name.clone().unwrap_or_else(|| default_name.to_string());
    let mut children = Vec::new();
    for (i, child) in cfg.children.iter().enumerate() {
        children.push(match child {
            NodeConfig::Pipe { pipe, batch } => {
                let p = registry
                    .pipes
                    .get(pipe)
                    .cloned()
                    .ok_or_else(|| PipelineError::UnknownPipe(pipe.clone()))?;
                match batch {
                    Some(b) => Node::Batched {
                        pipe: p,
                        policy: BatchPolicy::new(b.max_batch, Duration::from_millis(b.flush_timeout_ms))?,
                    },
                    None => Node::Pipe(p),
                }
            }
            NodeConfig::Group(g) => Node::Pipeline(Arc::new(build_group(
                g,
                registry,
                &format!("{name}.{depth}.{i}"),
                depth + 1,
            )?)),
        });
    }
    let variant = match cfg.variant {
        VariantConfig::Sequential => Variant::Sequential,
        VariantConfig::Parallel => Variant::Parallel,
        VariantConfig::Loop => {
            let pname = cfg
                .predicate
                .clone()
                .ok_or_else(|| PipelineError::Config(format!("loop {name} needs a predicate")))?;
            let predicate = registry
                .predicates
                .get(&pname)
                .cloned()
                .ok_or(PipelineError::UnknownPredicate(pname))?;
            Variant::Loop {
                predicate,
                max_iterations: cfg
                    .max_iterations
                    .ok_or_else(|| PipelineError::LoopIterations(name.clone()))?,
            }
        }
    };
    let mut spec = PipelineSpec::new(name, variant, children);
    if let Some(c) = cfg.queue_capacity {
        spec.queue_capacity = c;
    }
    if let Some(w) = cfg.workers {
        spec.workers = w.max(1);
    }
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::window::{Frame, FrameImage, FrameRef, TranscriptSegment};
    use std::sync::Mutex;

    fn window(i: u32) -> DataWindow {
        let t = i as f64;
        DataWindow::new(
            "v",
            i,
            vec![Frame::new(FrameRef::new("v", i, i as u64, t), FrameImage::Missing)],
            TranscriptSegment::new("x", vec![], t, t + 1.0),
        )
        .unwrap()
    }

    /// Appends its name to the "trail" slot.
    struct Trail(&'static str);

    impl Pipe for Trail {
        fn name(&self) -> &str {
            self.0
        }
        fn writes(&self) -> Vec<String> {
            vec!["trail".into()]
        }
        fn process(&self, w: DataWindow) -> Result<DataWindow, PipeError> {
            let mut trail = match w.slot("trail").map(|s| &s.payload) {
                Some(SlotPayload::Value(serde_json::Value::Array(a))) => a.clone(),
                _ => vec![],
            };
            trail.push(self.0.into());
            // every trail writer shares one producer so appends are replacements
            Ok(w.put_slot(InferenceSlot::new("trail", SlotPayload::Value(trail.into()), "trail"))?)
        }
    }

    struct Writer {
        name: &'static str,
        key: &'static str,
    }

    impl Pipe for Writer {
        fn name(&self) -> &str {
            self.name
        }
        fn writes(&self) -> Vec<String> {
            vec![self.key.into()]
        }
        fn process(&self, w: DataWindow) -> Result<DataWindow, PipeError> {
            Ok(w.put_slot(InferenceSlot::new(self.key, SlotPayload::Value(self.name.into()), self.name))?)
        }
    }

    struct Counter;

    fn count_of(w: &DataWindow) -> u64 {
        match w.slot("count").map(|s| &s.payload) {
            Some(SlotPayload::Value(v)) => v.as_u64().unwrap_or(0),
            _ => 0,
        }
    }

    impl Pipe for Counter {
        fn name(&self) -> &str {
            "counter"
        }
        fn writes(&self) -> Vec<String> {
            vec!["count".into()]
        }
        fn process(&self, w: DataWindow) -> Result<DataWindow, PipeError> {
            let n = count_of(&w) + 1;
            Ok(w.put_slot(InferenceSlot::new("count", SlotPayload::Value(n.into()), "counter"))?)
        }
    }

    #[test]
    fn sequential_composes_in_order() {
        let spec = PipelineSpec::sequential(
            "seq",
            vec![Node::pipe(Trail("A")), Node::pipe(Trail("B")), Node::pipe(Trail("C"))],
        );
        let out = spec.process(window(0)).unwrap();
        assert_eq!(
            out.slot("trail").unwrap().payload,
            SlotPayload::Value(serde_json::json!(["A", "B", "C"]))
        );
    }

    #[test]
    fn parallel_merges_disjoint_writes() {
        let spec = PipelineSpec::parallel(
            "par",
            vec![
                Node::pipe(Writer { name: "A", key: "a" }),
                Node::pipe(Writer { name: "B", key: "b" }),
            ],
        );
        spec.validate().unwrap();
        let out = spec.process(window(0)).unwrap();
        assert!(out.slot("a").is_some() && out.slot("b").is_some());
    }

    #[test]
    fn parallel_overlapping_writes_rejected() {
        let spec = PipelineSpec::parallel(
            "par",
            vec![
                Node::pipe(Writer { name: "A", key: "a" }),
                Node::pipe(Writer { name: "A2", key: "a" }),
            ],
        );
        assert!(matches!(spec.validate(), Err(PipelineError::OverlappingWrites { .. })));
    }

    #[test]
    fn loop_stops_on_predicate() {
        let c = Counter;
        let pred = |w: &DataWindow| count_of(w) >= 3;
        let (out, outcome) = run_loop("l", &[&c], window(0), &pred, 10).unwrap();
        assert_eq!(count_of(&out), 3);
        assert_eq!(
            outcome,
            LoopOutcome {
                iterations: 3,
                max_reached: false
            }
        );
    }

    #[test]
    fn loop_hits_max() {
        let c = Counter;
        let (out, outcome) = run_loop("l", &[&c], window(0), &|_: &DataWindow| false, 5).unwrap();
        assert_eq!(count_of(&out), 5);
        assert!(outcome.max_reached);
        assert_eq!(outcome.iterations, 5);
    }

    #[test]
    fn loop_checks_predicate_after_first_pass() {
        let c = Counter;
        let (out, outcome) = run_loop("l", &[&c], window(0), &|_: &DataWindow| true, 5).unwrap();
        assert_eq!(count_of(&out), 1);
        assert_eq!(outcome.iterations, 1);
        assert!(!outcome.max_reached);
    }

    struct Sneaky;

    impl Pipe for Sneaky {
        fn name(&self) -> &str {
            "sneaky"
        }
        fn writes(&self) -> Vec<String> {
            vec!["declared".into()]
        }
        fn process(&self, w: DataWindow) -> Result<DataWindow, PipeError> {
            Ok(w.put_slot(InferenceSlot::new("other", SlotPayload::Value(1.into()), "sneaky"))?)
        }
    }

    #[test]
    fn undeclared_write_is_stage_failure() {
        let err = apply_checked(&Sneaky, window(0)).unwrap_err();
        assert_eq!(err.pipe, "sneaky");
        assert!(err.message.contains("undeclared"));
    }

    struct FailOdd;

    impl Pipe for FailOdd {
        fn name(&self) -> &str {
            "fail_odd"
        }
        fn writes(&self) -> Vec<String> {
            vec![]
        }
        fn process(&self, w: DataWindow) -> Result<DataWindow, PipeError> {
            if w.index() % 2 == 1 {
                Err(PipeError::new("odd"))
            } else {
                Ok(w)
            }
        }
    }

    #[test]
    fn failures_drop_window_and_report() {
        let spec = Arc::new(PipelineSpec::sequential(
            "s",
            vec![Node::pipe(FailOdd), Node::pipe(Trail("A"))],
        ));
        let (out, failures) = run_pipeline(spec, (0..6).map(window)).unwrap().collect_all();
        assert_eq!(out.iter().map(|w| w.index()).collect::<Vec<_>>(), vec![0, 2, 4]);
        assert_eq!(failures.iter().map(|f| f.window_index).collect::<Vec<_>>(), vec![1, 3, 5]);
        assert!(failures.iter().all(|f| f.pipe == "fail_odd"));
    }

    struct Panics;

    impl Pipe for Panics {
        fn name(&self) -> &str {
            "panics"
        }
        fn writes(&self) -> Vec<String> {
            vec![]
        }
        fn process(&self, _: DataWindow) -> Result<DataWindow, PipeError> {
            panic!("boom")
        }
    }

    #[test]
    fn panicking_pipe_becomes_failure() {
        let spec = Arc::new(PipelineSpec::sequential("s", vec![Node::pipe(Panics)]));
        let (out, failures) = run_pipeline(spec, (0..2).map(window)).unwrap().collect_all();
        assert!(out.is_empty());
        assert_eq!(failures.len(), 2);
    }

    #[test]
    fn multi_worker_stage_keeps_order() {
        struct Jitter;
        impl Pipe for Jitter {
            fn name(&self) -> &str {
                "jitter"
            }
            fn writes(&self) -> Vec<String> {
                vec![]
            }
            fn process(&self, w: DataWindow) -> Result<DataWindow, PipeError> {
                thread::sleep(Duration::from_millis(((w.index() * 7) % 5) as u64));
                Ok(w)
            }
        }
        let spec = Arc::new(PipelineSpec::sequential("s", vec![Node::pipe(Jitter)]).with_workers(4));
        let out: Vec<u32> = run_pipeline(spec, (0..20).map(window)).unwrap().map(|w| w.index()).collect();
        assert_eq!(out, (0..20).collect::<Vec<_>>());
    }

    struct BatchRecorder {
        sizes: Mutex<Vec<usize>>,
    }

    impl Pipe for BatchRecorder {
        fn name(&self) -> &str {
            "batch"
        }
        fn writes(&self) -> Vec<String> {
            vec!["b".into()]
        }
        fn process(&self, w: DataWindow) -> Result<DataWindow, PipeError> {
            let v = w.index() * 10;
            Ok(w.put_slot(InferenceSlot::new("b", SlotPayload::Value(v.into()), "batch"))?)
        }
        fn process_batch(&self, ws: Vec<DataWindow>) -> Vec<Result<DataWindow, PipeError>> {
            self.sizes.lock().unwrap().push(ws.len());
            ws.into_iter().map(|w| self.process(w)).collect()
        }
    }

    #[test]
    fn batches_fill_to_max() {
        let pipe = Arc::new(BatchRecorder {
            sizes: Mutex::new(vec![]),
        });
        let windows: Vec<DataWindow> = (0..7).map(window).collect();
        let policy = BatchPolicy::new(3, Duration::from_secs(2)).unwrap();
        let out: Vec<DataWindow> = run_batched(pipe.clone(), policy, windows).unwrap().collect();
        assert_eq!(out.len(), 7);
        assert_eq!(*pipe.sizes.lock().unwrap(), vec![3, 3, 1]);
    }

    #[test]
    fn partial_batch_flushes_on_timeout() {
        let pipe = Arc::new(BatchRecorder {
            sizes: Mutex::new(vec![]),
        });
        let (tx, rx) = crossbeam_channel::unbounded();
        tx.send(window(0)).unwrap();
        let policy = BatchPolicy::new(3, Duration::from_millis(10)).unwrap();
        let started = Instant::now();
        let mut run = run_batched(pipe.clone(), policy, rx.into_iter()).unwrap();
        let first = run.next().unwrap();
        let waited = started.elapsed();
        assert_eq!(first.index(), 0);
        assert!(waited < Duration::from_millis(500), "waited {waited:?}");
        drop(tx);
        assert!(run.next().is_none());
        assert_eq!(*pipe.sizes.lock().unwrap(), vec![1]);
    }

    #[test]
    fn batched_equals_unbatched() {
        let pipe = Arc::new(BatchRecorder {
            sizes: Mutex::new(vec![]),
        });
        let policy = BatchPolicy::new(4, Duration::from_millis(5)).unwrap();
        let batched: Vec<DataWindow> = run_batched(pipe.clone(), policy, (0..20).map(window)).unwrap().collect();
        let single: Vec<DataWindow> = (0..20).map(|i| pipe.process(window(i)).unwrap()).collect();
        assert_eq!(batched.len(), single.len());
        for (a, b) in batched.iter().zip(&single) {
            assert_eq!(a.slot("b").unwrap().payload, b.slot("b").unwrap().payload);
        }
    }

    #[test]
    fn merge_orders_branches() {
        let w = window(0);
        let units = branch(&w, |_| Ok(vec!["a", "b", "c", "d"])).unwrap();
        let mut mapped: Vec<BranchUnit<String>> = units
            .into_iter()
            .map(|u| BranchUnit {
                window: u.window,
                branch_index: u.branch_index,
                payload: format!("caption of {}", u.payload),
            })
            .collect();
        mapped.reverse();
        let merged = merge(w, 4, mapped, |w, outs| {
            Ok(w.put_slot(InferenceSlot::new("caps", SlotPayload::Value(outs.into()), "m"))?)
        })
        .unwrap();
        assert_eq!(
            merged.slot("caps").unwrap().payload,
            SlotPayload::Value(serde_json::json!([
                "caption of a",
                "caption of b",
                "caption of c",
                "caption of d"
            ]))
        );
    }

    #[test]
    fn merge_with_zero_branches() {
        let w = window(0);
        let units: Vec<BranchUnit<String>> = branch(&w, |_| Ok(vec![])).unwrap();
        let merged = merge(w, 0, units, |w, outs| {
            Ok(w.put_slot(InferenceSlot::new("caps", SlotPayload::Value(outs.into()), "m"))?)
        })
        .unwrap();
        assert_eq!(merged.slot("caps").unwrap().payload, SlotPayload::Value(serde_json::json!([])));
    }

    #[test]
    fn merge_detects_missing_branch() {
        let w = window(0);
        let mut units = branch(&w, |_| Ok(vec![1, 2, 3])).unwrap();
        units.remove(1);
        let err = merge(w, 3, units, |w, _| Ok(w)).unwrap_err();
        assert!(err.0.contains("branch 1"));
    }

    #[test]
    fn spec_loads_from_toml() {
        let mut reg = PipeRegistry::new();
        reg.register(Arc::new(Writer { name: "A", key: "a" }));
        reg.register(Arc::new(Writer { name: "B", key: "b" }));
        reg.register(Arc::new(Counter));
        reg.register_predicate("three", Arc::new(|w: &DataWindow| count_of(w) >= 3));
        let text = r#"
            name = "root"
            variant = "sequential"
            queue_capacity = 2

            [[children]]
            variant = "parallel"
            children = [{ pipe = "A" }, { pipe = "B" }]

            [[children]]
            name = "again"
            variant = "loop"
            predicate = "three"
            max_iterations = 10
            children = [{ pipe = "counter" }]
        "#;
        let spec = spec_from_toml(text, &reg).unwrap();
        assert_eq!(spec.queue_capacity, 2);
        let out = spec.process(window(0)).unwrap();
        assert_eq!(count_of(&out), 3);
        assert!(out.slot("a").is_some() && out.slot("b").is_some());
        assert!(out.slot("loop.again").is_some());

        let bad = text.replace("{ pipe = \"B\" }", "{ pipe = \"missing\" }");
        assert!(matches!(spec_from_toml(&bad, &reg), Err(PipelineError::UnknownPipe(_))));
    }
}
