//! Fixed pool of single-request inference workers with least-loaded dispatch.
//!
//! Each worker is an OS thread that runs one request at a time. A request goes
//! to the idle worker with the fewest completed requests (ties to the lowest
//! id); when every worker is busy it waits in a bounded FIFO queue and is
//! picked up by the next worker to finish.

use std::collections::VecDeque;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{mpsc, Arc, Mutex, MutexGuard};
use std::thread::JoinHandle;

use caire_core::corpus::Turn;
use caire_core::generator::{Reply, Responder};
use serde::Serialize;
use tokio::sync::oneshot;

pub const DEFAULT_WORKERS: usize = 2;
pub const DEFAULT_QUEUE_CAPACITY: usize = 64;

/// Produces a reply for a context. Implementations must be safe to call from
/// several workers at once.
pub trait Engine: Send + Sync + 'static {
    fn respond(&self, persona: &[String], history: &[Turn]) -> Result<Reply, String>;
}

impl Engine for Responder {
    fn respond(&self, persona: &[String], history: &[Turn]) -> Result<Reply, String> {
        Responder::respond(self, persona, history).map_err(|e| e.to_string())
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum PoolError {
    #[error("all workers are busy and the queue is full; retry later")]
    QueueFull,
    #[error("generation failed: {0}")]
    Engine(String),
    #[error("worker pool is shut down")]
    Closed,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct WorkerLoad {
    pub completed: u64,
    pub in_flight: usize,
}

/// Index of the idle worker with the lowest completed count, ties to the
/// lowest index; `None` when every worker is busy.
pub fn select_worker(loads: &[WorkerLoad]) -> Option<usize> {
    loads
        .iter()
        .enumerate()
        .filter(|(_, w)| w.in_flight == 0)
        .min_by_key(|(i, w)| (w.completed, *i))
        .map(|(i, _)| i)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct WorkerStats {
    pub worker_id: usize,
    pub completed: u64,
    pub in_flight: usize,
    /// Highest number of requests this worker was ever observed executing at
    /// once, measured inside the worker around the engine call.
    pub peak_in_flight: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct PoolStats {
    pub workers: Vec<WorkerStats>,
    pub queue_depth: usize,
}

struct Job {
    persona: Vec<String>,
    history: Vec<Turn>,
    reply: oneshot::Sender<Result<Reply, PoolError>>,
}

struct State {
    loads: Vec<WorkerLoad>,
    queue: VecDeque<Job>,
    senders: Vec<mpsc::Sender<Job>>,
}

struct Shared {
    state: Mutex<State>,
    engine: Arc<dyn Engine>,
    capacity: usize,
    executing: Vec<AtomicUsize>,
    peak: Vec<AtomicUsize>,
}

impl Shared {
    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn execute(&self, id: usize, job: Job) {
        let now = self.executing[id].fetch_add(1, Ordering::SeqCst) + 1;
        self.peak[id].fetch_max(now, Ordering::SeqCst);
        let result = catch_unwind(AssertUnwindSafe(|| {
            self.engine.respond(&job.persona, &job.history)
        }))
        .unwrap_or_else(|_| Err("engine panicked".into()))
        .map_err(PoolError::Engine);
        self.executing[id].fetch_sub(1, Ordering::SeqCst);
        // The requester may have gone away; nothing to do then.
        let _ = job.reply.send(result);
    }
}

pub struct WorkerPool {
    shared: Arc<Shared>,
    handles: Vec<JoinHandle<()>>,
}

impl WorkerPool {
    pub fn new(engine: Arc<dyn Engine>, workers: usize, capacity: usize) -> Self {
        let workers = workers.max(1);
        let mut receivers = Vec::with_capacity(workers);
        let mut senders = Vec::with_capacity(workers);
        for _ in 0..workers {
            let (tx, rx) = mpsc::channel::<Job>();
            senders.push(tx);
            receivers.push(rx);
        }
        let shared = Arc::new(Shared {
            state: Mutex::new(State {
                loads: vec![WorkerLoad::default(); workers],
                queue: VecDeque::new(),
                senders,
            }),
            engine,
            capacity,
            executing: (0..workers).map(|_| AtomicUsize::new(0)).collect(),
            peak: (0..workers).map(|_| AtomicUsize::new(0)).collect(),
        });
        let handles = receivers
            .into_iter()
            .enumerate()
            .map(|(id, rx)| {
                let shared = Arc::clone(&shared);
                std::thread::Builder::new()
                    .name(format!("worker-{id}"))
                    .spawn(move || worker_loop(id, &shared, rx))
                    .expect("spawn worker thread")
            })
            .collect();
        Self { shared, handles }
    }

    pub fn workers(&self) -> usize {
        self.shared.executing.len()
    }

    /// Hands the request to a worker or queues it. The receiver resolves
    /// with the reply.
    pub fn submit(
        &self,
        persona: Vec<String>,
        history: Vec<Turn>,
    ) -> Result<oneshot::Receiver<Result<Reply, PoolError>>, PoolError> {
        let (tx, rx) = oneshot::channel();
        let job = Job {
            persona,
            history,
            reply: tx,
        };
        let mut st = self.shared.lock();
        if st.senders.is_empty() {
            return Err(PoolError::Closed);
        }
        match select_worker(&st.loads) {
            Some(id) => {
                st.loads[id].in_flight = 1;
                st.senders[id].send(job).map_err(|_| PoolError::Closed)?;
            }
            None if st.queue.len() < self.shared.capacity => st.queue.push_back(job),
            None => return Err(PoolError::QueueFull),
        }
        Ok(rx)
    }

    pub async fn run(&self, persona: Vec<String>, history: Vec<Turn>) -> Result<Reply, PoolError> {
        self.submit(persona, history)?
            .await
            .map_err(|_| PoolError::Closed)?
    }

    pub fn stats(&self) -> PoolStats {
        let st = self.shared.lock();
        PoolStats {
            workers: st
                .loads
                .iter()
                .enumerate()
                .map(|(i, l)| WorkerStats {
                    worker_id: i,
                    completed: l.completed,
                    in_flight: l.in_flight,
                    peak_in_flight: self.shared.peak[i].load(Ordering::SeqCst),
                })
                .collect(),
            queue_depth: st.queue.len(),
        }
    }
}

fn worker_loop(id: usize, shared: &Shared, rx: mpsc::Receiver<Job>) {
    while let Ok(job) = rx.recv() {
        let mut next = Some(job);
        while let Some(job) = next.take() {
            shared.execute(id, job);
            let mut st = shared.lock();
            st.loads[id].completed += 1;
            next = st.queue.pop_front();
            if next.is_none() {
                st.loads[id].in_flight = 0;
            }
        }
    }
}

impl Drop for WorkerPool {
    fn drop(&mut self) {
        {
            let mut st = self.shared.lock();
            st.senders.clear();
            for job in st.queue.drain(..) {
                let _ = job.reply.send(Err(PoolError::Closed));
            }
        }
        for h in self.handles.drain(..) {
            let _ = h.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};
    use std::sync::Condvar;

    fn load(completed: u64, in_flight: usize) -> WorkerLoad {
        WorkerLoad {
            completed,
            in_flight,
        }
    }

    #[test]
    fn picks_least_completed_idle_worker() {
        assert_eq!(
            select_worker(&[load(5, 0), load(2, 0), load(3, 1)]),
            Some(1)
        );
        assert_eq!(select_worker(&[load(2, 0), load(2, 0)]), Some(0));
        assert_eq!(select_worker(&[load(0, 1), load(0, 1)]), None);
    }

    proptest! {
        #[test]
        fn selection_is_idle_and_minimal(loads in proptest::collection::vec((0u64..10, 0usize..2), 1..8)) {
            let loads: Vec<WorkerLoad> = loads.into_iter().map(|(c, f)| load(c, f)).collect();
            match select_worker(&loads) {
                None => prop_assert!(loads.iter().all(|w| w.in_flight == 1)),
                Some(i) => {
                    prop_assert_eq!(loads[i].in_flight, 0);
                    for (j, w) in loads.iter().enumerate() {
                        if w.in_flight == 0 {
                            prop_assert!((loads[i].completed, i) <= (w.completed, j));
                        }
                    }
                }
            }
        }
    }

    /// Blocks every call until released.
    struct Gate {
        open: Mutex<bool>,
        cv: Condvar,
    }

    impl Engine for Gate {
        fn respond(&self, _: &[String], history: &[Turn]) -> Result<Reply, String> {
            let mut open = self.open.lock().unwrap();
            while !*open {
                open = self.cv.wait(open).unwrap();
            }
            Ok(Reply {
                text: history.last().map(|t| t.text.clone()).unwrap_or_default(),
                emotion: "content".into(),
                emotion_id: 0,
            })
        }
    }

    #[test]
    fn busy_pool_queues_then_rejects() {
        let gate = Arc::new(Gate {
            open: Mutex::new(false),
            cv: Condvar::new(),
        });
        let pool = WorkerPool::new(gate.clone(), 1, 1);
        let first = pool.submit(vec![], vec![Turn::user("one")]).unwrap();
        let second = pool.submit(vec![], vec![Turn::user("two")]).unwrap();
        assert_eq!(pool.stats().queue_depth, 1);
        assert_eq!(
            pool.submit(vec![], vec![Turn::user("three")]).unwrap_err(),
            PoolError::QueueFull
        );
        *gate.open.lock().unwrap() = true;
        gate.cv.notify_all();
        assert_eq!(first.blocking_recv().unwrap().unwrap().text, "one");
        assert_eq!(second.blocking_recv().unwrap().unwrap().text, "two");
        let stats = pool.stats();
        assert_eq!(stats.workers[0].completed, 2);
        assert_eq!(stats.workers[0].peak_in_flight, 1);
    }

    struct Panics;

    impl Engine for Panics {
        fn respond(&self, _: &[String], _: &[Turn]) -> Result<Reply, String> {
            panic!("boom")
        }
    }

    #[test]
    fn engine_panic_does_not_kill_the_worker() {
        let pool = WorkerPool::new(Arc::new(Panics), 1, 4);
        for _ in 0..2 {
            let r = pool
                .submit(vec![], vec![])
                .unwrap()
                .blocking_recv()
                .unwrap();
            assert!(matches!(r, Err(PoolError::Engine(_))));
        }
    }
}
