//! Parallel verification over a pool of checker handles.
//!
//! A batch is served by at most `workers` tasks, each exclusively owning one
//! [`CheckerHandle`] and pulling from the batch's shared queue. Results are
//! delivered in completion order. Cancelling a batch terminates the
//! subprocesses of running jobs (tactic search cannot be interrupted
//! in-band) and resolves pending jobs as cancelled; every submitted job
//! yields exactly one [`JobResult`] either way.

use std::collections::{HashSet, VecDeque};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::{mpsc, Semaphore};
use tokio_util::sync::CancellationToken;

use crate::lean::{CheckerConfig, CheckerError, CheckerHandle, ProofOutcome};

pub type JobId = u64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationJob {
    pub id: JobId,
    pub source: String,
    #[serde(with = "millis")]
    pub timeout: Duration,
    /// Caller label, e.g. `goal-sample-3`.
    pub tag: String,
}

mod millis {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        u64::deserialize(d).map(Duration::from_millis)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum JobOutcome {
    Finished { outcome: ProofOutcome },
    Cancelled,
    Crashed { detail: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobResult {
    pub job_id: JobId,
    pub tag: String,
    pub outcome: JobOutcome,
}

impl JobResult {
    pub fn proved(&self) -> bool {
        matches!(&self.outcome, JobOutcome::Finished { outcome } if outcome.proved())
    }

    pub fn is_cancelled(&self) -> bool {
        matches!(self.outcome, JobOutcome::Cancelled)
    }

    pub fn proof_outcome(&self) -> Option<&ProofOutcome> {
        match &self.outcome {
            JobOutcome::Finished { outcome } => Some(outcome),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    pub workers: usize,
    /// Replacement handles a worker may start after crashes, per batch.
    pub max_respawns: u32,
    #[serde(with = "millis")]
    pub default_timeout: Duration,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            workers: default_workers(4),
            max_respawns: 3,
            default_timeout: Duration::from_secs(60),
        }
    }
}

/// `min(2 * k_p, host CPUs)`, but never below 2 so a hanging goal job cannot
/// starve its negation.
pub fn default_workers(k_p: usize) -> usize {
    let cpus = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    (2 * k_p).min(cpus).max(2)
}

#[derive(Debug, Error)]
pub enum SchedulerError {
    #[error("no checker handle could be started: {0}")]
    PoolExhausted(#[source] CheckerError),
    #[error("invalid job: {0}")]
    InvalidJob(String),
    #[error("worker count must be at least 1")]
    NoWorkers,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchedulerMetrics {
    pub jobs_run: u64,
    pub jobs_cancelled: u64,
    pub jobs_crashed: u64,
    pub handles_started: u64,
    pub queue_latency_micros: u64,
}

#[derive(Default)]
struct Metrics {
    jobs_run: AtomicU64,
    jobs_cancelled: AtomicU64,
    jobs_crashed: AtomicU64,
    handles_started: AtomicU64,
    queue_latency_micros: AtomicU64,
}

pub struct Scheduler {
    checker: Arc<CheckerConfig>,
    config: SchedulerConfig,
    idle: Mutex<Vec<CheckerHandle>>,
    permits: Arc<Semaphore>,
    metrics: Metrics,
}

struct Queued {
    job: VerificationJob,
    enqueued: Instant,
}

struct BatchShared {
    queue: Mutex<VecDeque<Queued>>,
    token: CancellationToken,
    tx: mpsc::UnboundedSender<JobResult>,
    live_workers: AtomicUsize,
}

impl BatchShared {
    fn pop(&self) -> Option<Queued> {
        self.queue.lock().unwrap().pop_front()
    }

    fn send(&self, job: &VerificationJob, outcome: JobOutcome) {
        let _ = self.tx.send(JobResult {
            job_id: job.id,
            tag: job.tag.clone(),
            outcome,
        });
    }
}

impl Scheduler {
    pub fn new(checker: CheckerConfig, config: SchedulerConfig) -> Arc<Self> {
        let workers = config.workers.max(1);
        Arc::new(Self {
            checker: Arc::new(checker),
            permits: Arc::new(Semaphore::new(workers)),
            config,
            idle: Mutex::new(Vec::new()),
            metrics: Metrics::default(),
        })
    }

    pub fn config(&self) -> &SchedulerConfig {
        &self.config
    }

    pub fn checker(&self) -> &CheckerConfig {
        &self.checker
    }

    pub fn metrics(&self) -> SchedulerMetrics {
        let m = &self.metrics;
        SchedulerMetrics {
            jobs_run: m.jobs_run.load(Ordering::Relaxed),
            jobs_cancelled: m.jobs_cancelled.load(Ordering::Relaxed),
            jobs_crashed: m.jobs_crashed.load(Ordering::Relaxed),
            handles_started: m.handles_started.load(Ordering::Relaxed),
            queue_latency_micros: m.queue_latency_micros.load(Ordering::Relaxed),
        }
    }

    async fn acquire_handle(&self) -> Result<CheckerHandle, CheckerError> {
        let reused = self.idle.lock().unwrap().pop();
        match reused {
            Some(h) => Ok(h),
            None => {
                let h = CheckerHandle::start(self.checker.clone()).await?;
                self.metrics.handles_started.fetch_add(1, Ordering::Relaxed);
                Ok(h)
            }
        }
    }

    fn release_handle(&self, handle: CheckerHandle) {
        if handle.is_dead() {
            return;
        }
        let mut idle = self.idle.lock().unwrap();
        if idle.len() < self.config.workers {
            idle.push(handle);
        }
    }

    /// Dispatches `jobs` onto at most `workers` concurrent checker handles.
    pub async fn submit_batch(
        self: &Arc<Self>,
        jobs: Vec<VerificationJob>,
        workers: usize,
    ) -> Result<BatchHandle, SchedulerError> {
        if workers == 0 {
            return Err(SchedulerError::NoWorkers);
        }
        let mut seen = HashSet::new();
        for job in &jobs {
            if !seen.insert(job.id) {
                return Err(SchedulerError::InvalidJob(format!("duplicate job id {}", job.id)));
            }
            if job.timeout.is_zero() {
                return Err(SchedulerError::InvalidJob(format!("job {} has zero timeout", job.id)));
            }
        }
        let (tx, rx) = mpsc::unbounded_channel();
        let token = CancellationToken::new();
        let expected = jobs.len();
        if jobs.is_empty() {
            return Ok(BatchHandle::new(rx, token, 0));
        }

        let wanted = workers.min(jobs.len());
        let started = futures::future::join_all((0..wanted).map(|_| self.acquire_handle())).await;
        let mut handles = Vec::new();
        let mut last_err = None;
        for r in started {
            match r {
                Ok(h) => handles.push(h),
                Err(e) => last_err = Some(e),
            }
        }
        if handles.is_empty() {
            return Err(SchedulerError::PoolExhausted(
                last_err.expect("at least one start attempt"),
            ));
        }

        let now = Instant::now();
        let shared = Arc::new(BatchShared {
            queue: Mutex::new(
                jobs.into_iter()
                    .map(|job| Queued { job, enqueued: now })
                    .collect(),
            ),
            token: token.clone(),
            tx,
            live_workers: AtomicUsize::new(handles.len()),
        });
        for handle in handles {
            tokio::spawn(worker(self.clone(), handle, shared.clone()));
        }
        Ok(BatchHandle::new(rx, token, expected))
    }

    /// Runs a single job to completion.
    pub async fn run_one(self: &Arc<Self>, job: VerificationJob) -> Result<JobResult, SchedulerError> {
        let mut batch = self.submit_batch(vec![job], 1).await?;
        Ok(batch
            .join()
            .await
            .pop()
            .expect("one job yields one result"))
    }
}

async fn worker(sched: Arc<Scheduler>, handle: CheckerHandle, shared: Arc<BatchShared>) {
    let mut handle = Some(handle);
    let mut respawns_left = sched.config.max_respawns;
    while let Some(q) = shared.pop() {
        let job = q.job;
        let permit = tokio::select! {
            biased;
            _ = shared.token.cancelled() => None,
            p = sched.permits.clone().acquire_owned() => p.ok(),
        };
        let Some(_permit) = permit else {
            sched.metrics.jobs_cancelled.fetch_add(1, Ordering::Relaxed);
            shared.send(&job, JobOutcome::Cancelled);
            continue;
        };
        if handle.is_none() {
            if respawns_left == 0 {
                shared.queue.lock().unwrap().push_front(Queued {
                    job,
                    enqueued: q.enqueued,
                });
                break;
            }
            respawns_left -= 1;
            match sched.acquire_handle().await {
                Ok(h) => handle = Some(h),
                Err(e) => {
                    sched.metrics.jobs_crashed.fetch_add(1, Ordering::Relaxed);
                    shared.send(
                        &job,
                        JobOutcome::Crashed {
                            detail: format!("respawn failed: {e}"),
                        },
                    );
                    continue;
                }
            }
        }
        let h = handle.as_mut().expect("handle present");
        sched
            .metrics
            .queue_latency_micros
            .fetch_add(q.enqueued.elapsed().as_micros() as u64, Ordering::Relaxed);

        let result = tokio::select! {
            biased;
            _ = shared.token.cancelled() => None,
            r = h.check_proof(&job.source, job.timeout) => Some(r),
        };
        match result {
            None => {
                h.terminate().await;
                sched.metrics.jobs_cancelled.fetch_add(1, Ordering::Relaxed);
                shared.send(&job, JobOutcome::Cancelled);
            }
            Some(Ok(outcome)) => {
                sched.metrics.jobs_run.fetch_add(1, Ordering::Relaxed);
                shared.send(&job, JobOutcome::Finished { outcome });
            }
            Some(Err(e)) => {
                handle = None;
                sched.metrics.jobs_crashed.fetch_add(1, Ordering::Relaxed);
                shared.send(&job, JobOutcome::Crashed { detail: e.to_string() });
            }
        }
    }
    if let Some(h) = handle {
        sched.release_handle(h);
    }
    if shared.live_workers.fetch_sub(1, Ordering::SeqCst) == 1 {
        // Last worker out resolves whatever is left so results are conserved.
        while let Some(q) = shared.pop() {
            let outcome = if shared.token.is_cancelled() {
                JobOutcome::Cancelled
            } else {
                JobOutcome::Crashed {
                    detail: "no live checker workers".into(),
                }
            };
            shared.send(&q.job, outcome);
        }
    }
}

#[derive(Debug)]
pub enum Race {
    Winner(JobResult),
    Inconclusive,
}

/// Single-consumer view of a submitted batch. Dropping it cancels the batch.
pub struct BatchHandle {
    rx: mpsc::UnboundedReceiver<JobResult>,
    token: CancellationToken,
    expected: usize,
    received: Vec<JobResult>,
}

impl BatchHandle {
    fn new(rx: mpsc::UnboundedReceiver<JobResult>, token: CancellationToken, expected: usize) -> Self {
        Self {
            rx,
            token,
            expected,
            received: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.expected
    }

    pub fn is_empty(&self) -> bool {
        self.expected == 0
    }

    pub fn is_complete(&self) -> bool {
        self.received.len() == self.expected
    }

    /// Results received so far, in arrival order.
    pub fn received(&self) -> &[JobResult] {
        &self.received
    }

    /// Next result in completion order, or `None` once every job resolved.
    pub async fn next(&mut self) -> Option<JobResult> {
        if self.is_complete() {
            return None;
        }
        let r = self.rx.recv().await?;
        self.received.push(r.clone());
        Some(r)
    }

    /// Returns the first arriving result satisfying `conclusive` and cancels
    /// every sibling that is still pending or running.
    pub async fn await_first_conclusive(&mut self, conclusive: impl Fn(&JobResult) -> bool) -> Race {
        while let Some(r) = self.next().await {
            if conclusive(&r) {
                self.cancel();
                return Race::Winner(r);
            }
        }
        Race::Inconclusive
    }

    /// Idempotent; a no-op once the batch has completed.
    pub fn cancel(&self) {
        self.token.cancel();
    }

    /// Waits for every job and returns all results in arrival order.
    pub async fn join(&mut self) -> Vec<JobResult> {
        while self.next().await.is_some() {}
        self.received.clone()
    }
}

impl Drop for BatchHandle {
    fn drop(&mut self) {
        self.token.cancel();
    }
}
