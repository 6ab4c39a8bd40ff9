use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use dreampaint_core::text::build_prompt;
use dreampaint_core::{inpaint_sample, ImageTensor, MaskTensor, SampleRequest};
use serde::{Deserialize, Serialize};

use crate::concepts::Concept;
use crate::error::ErrorBody;

pub const JOB_FILE: &str = "job.json";
pub const RESULT_FILE: &str = "result.png";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

/// Resolved sampling parameters of a job (payload images excluded).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobParams {
    pub concept_id: String,
    pub prompt: String,
    pub prompt_extra: Option<String>,
    pub guidance: f64,
    pub seed: u64,
    pub composite: bool,
    pub steps: Option<usize>,
    pub width: usize,
    pub height: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub id: String,
    pub state: JobState,
    pub request: JobParams,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub result_url: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorBody>,
    pub created_at_ms: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub started_at_ms: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub finished_at_ms: Option<u64>,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

struct Pending {
    image: ImageTensor,
    mask: MaskTensor,
    concept: Arc<Concept>,
}

#[derive(Default)]
struct Registry {
    jobs: HashMap<String, Job>,
    pending: HashMap<String, Pending>,
    queued: usize,
}

/// Why a submission was refused.
#[derive(Debug, PartialEq, Eq)]
pub enum SubmitError {
    QueueFull(usize),
    Stopped,
}

/// Job registry plus a FIFO queue drained by a fixed pool of worker threads.
pub struct JobQueue {
    registry: Mutex<Registry>,
    sender: Mutex<Option<Sender<String>>>,
    // Held so submissions still enqueue when no worker is running.
    _receiver: Arc<Mutex<Receiver<String>>>,
    jobs_dir: PathBuf,
    limit: usize,
}

impl JobQueue {
    /// Starts `workers` threads. With zero workers jobs stay queued.
    pub fn start(jobs_dir: PathBuf, workers: usize, limit: usize) -> Arc<Self> {
        let (tx, rx) = mpsc::channel::<String>();
        let rx = Arc::new(Mutex::new(rx));
        let queue = Arc::new(Self {
            registry: Mutex::new(Registry::default()),
            sender: Mutex::new(Some(tx)),
            _receiver: Arc::clone(&rx),
            jobs_dir,
            limit,
        });
        queue.restore();
        for i in 0..workers {
            let q = Arc::downgrade(&queue);
            let rx = Arc::clone(&rx);
            std::thread::Builder::new()
                .name(format!("inpaint-worker-{i}"))
                .spawn(move || worker_loop(q, rx))
                .expect("spawn worker");
        }
        queue
    }

    /// Reloads finished jobs whose result survives on disk.
    fn restore(&self) {
        let Ok(entries) = fs::read_dir(&self.jobs_dir) else { return };
        let mut reg = self.registry.lock().unwrap();
        for entry in entries.flatten() {
            let dir = entry.path();
            let Ok(bytes) = fs::read(dir.join(JOB_FILE)) else { continue };
            match serde_json::from_slice::<Job>(&bytes) {
                Ok(job) if job.state == JobState::Done && dir.join(RESULT_FILE).is_file() => {
                    reg.jobs.insert(job.id.clone(), job);
                }
                Ok(_) => {}
                Err(e) => log::warn!("ignoring {}: {e}", dir.display()),
            }
        }
    }

    pub fn submit(
        &self,
        params: JobParams,
        image: ImageTensor,
        mask: MaskTensor,
        concept: Arc<Concept>,
    ) -> Result<Job, SubmitError> {
        let id = uuid::Uuid::new_v4().to_string();
        let job = Job {
            id: id.clone(),
            state: JobState::Queued,
            request: params,
            result_url: None,
            error: None,
            created_at_ms: now_ms(),
            started_at_ms: None,
            finished_at_ms: None,
        };
        let mut reg = self.registry.lock().unwrap();
        if reg.queued >= self.limit {
            return Err(SubmitError::QueueFull(self.limit));
        }
        let sender = self.sender.lock().unwrap();
        let tx = sender.as_ref().ok_or(SubmitError::Stopped)?;
        reg.jobs.insert(id.clone(), job.clone());
        reg.pending.insert(id.clone(), Pending { image, mask, concept });
        reg.queued += 1;
        tx.send(id).map_err(|_| SubmitError::Stopped)?;
        Ok(job)
    }

    pub fn get(&self, id: &str) -> Option<Job> {
        self.registry.lock().unwrap().jobs.get(id).cloned()
    }

    pub fn queued(&self) -> usize {
        self.registry.lock().unwrap().queued
    }

    pub fn result_path(&self, id: &str) -> PathBuf {
        self.jobs_dir.join(id).join(RESULT_FILE)
    }

    /// Closes the queue; workers exit once it drains.
    pub fn stop(&self) {
        self.sender.lock().unwrap().take();
    }

    fn take(&self, id: &str) -> Option<(JobParams, Pending)> {
        let mut reg = self.registry.lock().unwrap();
        let pending = reg.pending.remove(id)?;
        reg.queued -= 1;
        let job = reg.jobs.get_mut(id)?;
        job.state = JobState::Running;
        job.started_at_ms = Some(now_ms());
        Some((job.request.clone(), pending))
    }

    fn finish(&self, id: &str, outcome: Result<Vec<u8>, ErrorBody>) {
        let dir = self.jobs_dir.join(id);
        let outcome = outcome.and_then(|png| {
            write_result(&dir, &png).map_err(|e| ErrorBody {
                code: "E_STORAGE".into(),
                message: e.to_string(),
            })
        });
        let mut reg = self.registry.lock().unwrap();
        let Some(job) = reg.jobs.get_mut(id) else { return };
        job.finished_at_ms = Some(now_ms());
        match outcome {
            Ok(()) => {
                job.state = JobState::Done;
                job.result_url = Some(format!("/api/jobs/{id}/result"));
                if let Err(e) = write_job(&dir, job) {
                    log::warn!("job {id}: could not persist record: {e}");
                }
            }
            Err(body) => {
                job.state = JobState::Failed;
                job.error = Some(body);
            }
        }
    }
}

fn write_result(dir: &Path, png: &[u8]) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(RESULT_FILE), png)
}

fn write_job(dir: &Path, job: &Job) -> std::io::Result<()> {
    let json = serde_json::to_vec_pretty(job).map_err(std::io::Error::other)?;
    fs::write(dir.join(JOB_FILE), json)
}

fn run(params: &JobParams, pending: &Pending) -> Result<Vec<u8>, ErrorBody> {
    let c = &pending.concept;
    let mut req = SampleRequest::new(pending.image.clone(), pending.mask.clone(), params.prompt.clone(), params.seed);
    req.guidance = params.guidance;
    req.steps = params.steps;
    req.composite_unmasked = params.composite;
    req.concept_token = Some(c.token.clone());
    let numeric = |e: dreampaint_core::Error| ErrorBody {
        code: if e.is_data_error() { "E_DATA" } else { "E_NUMERIC" }.into(),
        message: e.to_string(),
    };
    let out = inpaint_sample(&req, &c.checkpoint).map_err(numeric)?;
    out.to_png_bytes().map_err(numeric)
}

fn worker_loop(queue: std::sync::Weak<JobQueue>, rx: Arc<Mutex<Receiver<String>>>) {
    loop {
        let next = rx.lock().unwrap().recv();
        let Ok(id) = next else { return };
        let Some(queue) = queue.upgrade() else { return };
        let Some((params, pending)) = queue.take(&id) else { continue };
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| run(&params, &pending)))
            .unwrap_or_else(|_| {
                Err(ErrorBody {
                    code: "E_INTERNAL".into(),
                    message: "sampler panicked".into(),
                })
            });
        queue.finish(&id, outcome);
    }
}

/// The prompt sent to the sampler for a concept and optional extras.
pub fn concept_prompt(concept: &Concept, extra: Option<&str>) -> dreampaint_core::Result<String> {
    build_prompt(&concept.checkpoint.vocab, &concept.token, &concept.class_noun, extra)
}
