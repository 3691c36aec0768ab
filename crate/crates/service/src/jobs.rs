//! Job records, their on-disk store and the worker pool that runs them.

use std::collections::HashMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use textstyle::pipeline::Model;
use textstyle::{ImageBuffer, LossRecord, StyleConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobKind {
    Retrieve,
    /// Style transfer against an explicitly chosen style image.
    Transfer,
    /// Retrieval of the style image followed by transfer.
    Pipeline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobStatus::Done | JobStatus::Failed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub iteration: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobResult {
    pub image_url: String,
    pub style_id: String,
    /// Absent when the requested style image is not in the index.
    pub style_score: Option<f64>,
    pub history: Vec<LossRecord>,
    pub final_losses: LossRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub id: String,
    pub kind: JobKind,
    pub status: JobStatus,
    pub progress: Progress,
    pub result: Option<JobResult>,
    pub error: Option<String>,
    pub created: DateTime<Utc>,
    pub updated: DateTime<Utc>,
}

impl Job {
    pub fn new(kind: JobKind, total: usize) -> Self {
        let now = Utc::now();
        Self {
            id: uuid::Uuid::new_v4().to_string(),
            kind,
            status: JobStatus::Queued,
            progress: Progress { iteration: 0, total },
            result: None,
            error: None,
            created: now,
            updated: now,
        }
    }
}

/// In-memory job table mirrored to `<dir>/<id>.json`, with results at
/// `<dir>/<id>.png`. Every mutation goes through one mutex.
#[derive(Debug)]
pub struct JobStore {
    dir: PathBuf,
    jobs: Mutex<HashMap<String, Job>>,
}

impl JobStore {
    /// Loads existing jobs. Jobs that were queued or running when the
    /// previous process stopped are marked failed.
    pub fn open(dir: impl Into<PathBuf>) -> io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        let mut jobs = HashMap::new();
        for entry in fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.extension().is_none_or(|e| e != "json") {
                continue;
            }
            let mut job: Job = match serde_json::from_slice(&fs::read(&path)?) {
                Ok(job) => job,
                Err(e) => {
                    log::warn!("skipping unreadable job file {}: {e}", path.display());
                    continue;
                }
            };
            if !job.status.is_terminal() {
                job.status = JobStatus::Failed;
                job.error = Some("interrupted".into());
                job.updated = Utc::now();
                write_json(&dir, &job)?;
            }
            jobs.insert(job.id.clone(), job);
        }
        Ok(Self {
            dir,
            jobs: Mutex::new(jobs),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn result_path(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.png"))
    }

    pub fn insert(&self, job: Job) -> io::Result<()> {
        let mut jobs = self.jobs.lock().expect("job store poisoned");
        write_json(&self.dir, &job)?;
        jobs.insert(job.id.clone(), job);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<Job> {
        self.jobs.lock().expect("job store poisoned").get(id).cloned()
    }

    /// Progress only moves forward and is kept in memory.
    pub fn set_progress(&self, id: &str, iteration: usize) {
        if let Some(job) = self.jobs.lock().expect("job store poisoned").get_mut(id) {
            if iteration > job.progress.iteration {
                job.progress.iteration = iteration;
                job.updated = Utc::now();
            }
        }
    }

    fn transition(&self, id: &str, to: JobStatus, apply: impl FnOnce(&mut Job)) -> io::Result<()> {
        let mut jobs = self.jobs.lock().expect("job store poisoned");
        let Some(job) = jobs.get_mut(id) else {
            return Ok(());
        };
        let allowed = matches!(
            (job.status, to),
            (JobStatus::Queued, JobStatus::Running)
                | (JobStatus::Queued, JobStatus::Failed)
                | (JobStatus::Running, JobStatus::Done)
                | (JobStatus::Running, JobStatus::Failed)
        );
        if !allowed {
            log::error!("refusing job {id} transition {:?} -> {to:?}", job.status);
            return Ok(());
        }
        job.status = to;
        apply(job);
        job.updated = Utc::now();
        write_json(&self.dir, job)
    }

    pub fn mark_running(&self, id: &str) -> io::Result<()> {
        self.transition(id, JobStatus::Running, |_| {})
    }

    pub fn mark_done(&self, id: &str, result: JobResult) -> io::Result<()> {
        self.transition(id, JobStatus::Done, |job| {
            job.progress.iteration = job.progress.total;
            job.result = Some(result);
        })
    }

    pub fn mark_failed(&self, id: &str, message: String) -> io::Result<()> {
        self.transition(id, JobStatus::Failed, |job| job.error = Some(message))
    }
}

fn write_json(dir: &Path, job: &Job) -> io::Result<()> {
    let tmp = dir.join(format!("{}.json.tmp", job.id));
    fs::write(&tmp, serde_json::to_vec_pretty(job).expect("job serializes"))?;
    fs::rename(tmp, dir.join(format!("{}.json", job.id)))
}

/// Inputs of one pipeline or transfer job.
#[derive(Debug, Clone)]
pub struct Task {
    pub job_id: String,
    pub content: ImageBuffer,
    pub title: String,
    pub description: String,
    pub style_id: Option<String>,
    pub config: StyleConfig,
}

/// Fixed set of threads running tasks in submission order.
pub struct WorkerPool {
    sender: Mutex<Option<Sender<Task>>>,
    handles: Vec<JoinHandle<()>>,
}

impl WorkerPool {
    pub fn start(size: usize, model: Arc<Model>, store: Arc<JobStore>) -> Self {
        let (sender, receiver) = mpsc::channel::<Task>();
        let receiver = Arc::new(Mutex::new(receiver));
        let handles = (0..size.max(1))
            .map(|i| {
                let (model, store, receiver) = (model.clone(), store.clone(), receiver.clone());
                thread::Builder::new()
                    .name(format!("textstyle-worker-{i}"))
                    .spawn(move || worker_loop(&receiver, &model, &store))
                    .expect("spawn worker thread")
            })
            .collect();
        Self {
            sender: Mutex::new(Some(sender)),
            handles,
        }
    }

    pub fn submit(&self, task: Task) -> bool {
        let sender = self.sender.lock().expect("pool poisoned");
        sender.as_ref().is_some_and(|s| s.send(task).is_ok())
    }
}

impl Drop for WorkerPool {
    fn drop(&mut self) {
        self.sender.lock().expect("pool poisoned").take();
        for handle in self.handles.drain(..) {
            let _ = handle.join();
        }
    }
}

fn worker_loop(receiver: &Mutex<Receiver<Task>>, model: &Model, store: &JobStore) {
    loop {
        let task = match receiver.lock().expect("queue poisoned").recv() {
            Ok(task) => task,
            Err(_) => return,
        };
        let id = task.job_id.clone();
        if let Err(e) = run_task(task, model, store) {
            log::error!("job {id}: {e}");
            if let Err(e) = store.mark_failed(&id, e) {
                log::error!("job {id}: cannot record failure: {e}");
            }
        }
    }
}

fn run_task(task: Task, model: &Model, store: &JobStore) -> Result<(), String> {
    store.mark_running(&task.job_id).map_err(|e| e.to_string())?;
    let out = model
        .pipeline(
            &task.content,
            &task.title,
            &task.description,
            task.style_id.as_deref(),
            &task.config,
            |rec| store.set_progress(&task.job_id, rec.iteration + 1),
        )
        .map_err(|e| e.to_string())?;
    let path = store.result_path(&task.job_id);
    fs::write(&path, out.synthesis.image.to_png_bytes()).map_err(|e| format!("{}: {e}", path.display()))?;
    let result = JobResult {
        image_url: format!("/api/jobs/{}/result", task.job_id),
        style_id: out.style_id,
        style_score: out.style_score.is_finite().then_some(out.style_score),
        history: out.synthesis.history,
        final_losses: out.synthesis.final_losses,
    };
    store.mark_done(&task.job_id, result).map_err(|e| e.to_string())
}
