//! HTTP service behind the click-collection front-end.
//!
//! `GET /api/session` hands out up to 20 trials, `GET /api/image/{id}` serves
//! the 800x800 stimulus and `POST /api/response` validates and appends one
//! click log line.

use std::collections::{HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{Cursor, Write};
use std::path::Path;
use std::sync::{Arc, Mutex};

use anyhow::{bail, Context};
use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use image::imageops::FilterType;
use image::RgbImage;
use rand::seq::SliceRandom;
use rand::Rng;
use seco_core::dataset::Split;
use seco_core::humanmaps::{read_logs, validate_log, Click, ClickLog, Violation, REQUIRED_CLICKS};
use serde::{Deserialize, Serialize};
use serde_json::json;

pub const TRIALS_PER_SESSION: usize = 20;
pub const SUBJECTS_PER_PAIR: usize = 3;
pub const STIMULUS_SIDE: u32 = 800;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StimulusPair {
    pub image_id: u64,
    pub target_class: String,
}

/// Image/target pairs to collect clicks for.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub pairs: Vec<StimulusPair>,
}

impl Manifest {
    /// Every image paired with every class that has no instance in it.
    pub fn from_split(split: &Split) -> Self {
        let names = split.annotations.category_names();
        let by_image = split.annotations.by_image();
        let mut pairs = Vec::new();
        for entry in &split.annotations.images {
            let present: HashSet<u64> = by_image
                .get(&entry.id)
                .map(|v| v.iter().map(|a| a.category_id).collect())
                .unwrap_or_default();
            for (id, name) in &names {
                if !present.contains(id) {
                    pairs.push(StimulusPair {
                        image_id: entry.id,
                        target_class: name.clone(),
                    });
                }
            }
        }
        Self { pairs }
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Pairs naming unknown images or classes, or whose class already appears
    /// in the image.
    pub fn violations(&self, split: &Split) -> Vec<String> {
        let names = split.annotations.category_names();
        let by_image = split.annotations.by_image();
        let mut out = Vec::new();
        for p in &self.pairs {
            let Some(anns) = split.annotations.images.iter().find(|e| e.id == p.image_id).map(|e| {
                by_image.get(&e.id).cloned().unwrap_or_default()
            }) else {
                out.push(format!("image {} is not in the split", p.image_id));
                continue;
            };
            let Some((&class_id, _)) = names.iter().find(|(_, n)| **n == p.target_class) else {
                out.push(format!("unknown class {:?}", p.target_class));
                continue;
            };
            if anns.iter().any(|a| a.category_id == class_id) {
                out.push(format!("image {} already contains a {}", p.image_id, p.target_class));
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialAssignment {
    pub trial_id: u32,
    pub image_id: u64,
    pub image_url: String,
    pub target_class: String,
    pub required_clicks: usize,
    pub session_id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionResponse {
    pub session_id: String,
    pub trials: Vec<TrialAssignment>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResponseBody {
    pub session_id: String,
    pub trial_id: u32,
    pub clicks: Vec<Click>,
}

struct Session {
    /// Pair index per trial id.
    trials: Vec<usize>,
    submitted: HashSet<u32>,
}

struct Inner {
    pairs: Vec<StimulusPair>,
    /// Sessions that completed each pair.
    completed: Vec<HashSet<String>>,
    sessions: HashMap<String, Session>,
    log: File,
}

impl Inner {
    fn pending(&self, pair: usize) -> usize {
        self.sessions
            .iter()
            .filter(|(id, s)| {
                !self.completed[pair].contains(*id)
                    && s.trials.iter().enumerate().any(|(t, &p)| p == pair && !s.submitted.contains(&(t as u32)))
            })
            .count()
    }
}

pub struct Collection {
    inner: Mutex<Inner>,
    images: HashMap<u64, RgbImage>,
}

impl Collection {
    /// Serves `manifest` over the images of `split`, appending to `log_path`.
    /// Completed trials already in the log count towards each pair's quota.
    pub fn new(split: &Split, manifest: Manifest, log_path: &Path) -> anyhow::Result<Self> {
        let problems = manifest.violations(split);
        if !problems.is_empty() {
            bail!(seco_core::Error::InvalidConfig(problems));
        }
        let mut completed = vec![HashSet::new(); manifest.pairs.len()];
        if log_path.exists() {
            for log in read_logs(log_path)? {
                if let Some(i) = manifest
                    .pairs
                    .iter()
                    .position(|p| p.image_id == log.image_id && p.target_class == log.target_class)
                {
                    completed[i].insert(log.subject_id);
                }
            }
        }
        if let Some(dir) = log_path.parent() {
            fs::create_dir_all(dir)?;
        }
        let log = OpenOptions::new().create(true).append(true).open(log_path)?;
        let wanted: HashSet<u64> = manifest.pairs.iter().map(|p| p.image_id).collect();
        let images = split
            .annotations
            .images
            .iter()
            .zip(&split.images)
            .filter(|(e, _)| wanted.contains(&e.id))
            .map(|(e, img)| (e.id, img.clone()))
            .collect();
        Ok(Self {
            inner: Mutex::new(Inner {
                pairs: manifest.pairs,
                completed,
                sessions: HashMap::new(),
                log,
            }),
            images,
        })
    }

    /// Opens a session with up to 20 pairs that still need subjects, least
    /// covered first.
    pub fn open_session(&self) -> SessionResponse {
        let mut inner = self.inner.lock().expect("state lock");
        let session_id = uuid::Uuid::new_v4().to_string();
        let mut rng = rand::rng();
        let mut open: Vec<(usize, usize, u64)> = (0..inner.pairs.len())
            .filter(|&i| inner.completed[i].len() < SUBJECTS_PER_PAIR)
            .map(|i| (inner.completed[i].len() + inner.pending(i), i, rng.random()))
            .collect();
        open.shuffle(&mut rng);
        open.sort_by_key(|&(load, _, tie)| (load, tie));
        let chosen: Vec<usize> = open.into_iter().take(TRIALS_PER_SESSION).map(|(_, i, _)| i).collect();
        let trials = chosen
            .iter()
            .enumerate()
            .map(|(t, &i)| TrialAssignment {
                trial_id: t as u32,
                image_id: inner.pairs[i].image_id,
                image_url: format!("/api/image/{}", inner.pairs[i].image_id),
                target_class: inner.pairs[i].target_class.clone(),
                required_clicks: REQUIRED_CLICKS,
                session_id: session_id.clone(),
            })
            .collect();
        inner.sessions.insert(
            session_id.clone(),
            Session {
                trials: chosen,
                submitted: HashSet::new(),
            },
        );
        SessionResponse { session_id, trials }
    }

    /// The stimulus as an 800x800 PNG.
    pub fn image_png(&self, id: u64) -> Option<Vec<u8>> {
        let img = self.images.get(&id)?;
        let img = if img.dimensions() == (STIMULUS_SIDE, STIMULUS_SIDE) {
            img.clone()
        } else {
            image::imageops::resize(img, STIMULUS_SIDE, STIMULUS_SIDE, FilterType::Triangle)
        };
        let mut out = Cursor::new(Vec::new());
        img.write_to(&mut out, image::ImageFormat::Png).ok()?;
        Some(out.into_inner())
    }

    pub fn submit(&self, body: ResponseBody) -> Result<ClickLog, Rejection> {
        let mut inner = self.inner.lock().expect("state lock");
        let session = inner.sessions.get(&body.session_id).ok_or(Rejection::UnknownTrial)?;
        let pair = *session.trials.get(body.trial_id as usize).ok_or(Rejection::UnknownTrial)?;
        if session.submitted.contains(&body.trial_id) {
            return Err(Rejection::Duplicate);
        }
        let log = ClickLog {
            image_id: inner.pairs[pair].image_id,
            target_class: inner.pairs[pair].target_class.clone(),
            subject_id: body.session_id.clone(),
            image_size: [STIMULUS_SIDE; 2],
            clicks: body.clicks,
        };
        let violations = validate_log(&log);
        if !violations.is_empty() {
            return Err(Rejection::Invalid(violations));
        }
        let mut line = serde_json::to_vec(&log).map_err(|e| Rejection::Io(e.to_string()))?;
        line.push(b'\n');
        // One write per line while holding the lock keeps appends whole.
        inner.log.write_all(&line).map_err(|e| Rejection::Io(e.to_string()))?;
        inner.log.flush().map_err(|e| Rejection::Io(e.to_string()))?;
        inner.completed[pair].insert(body.session_id.clone());
        inner
            .sessions
            .get_mut(&body.session_id)
            .expect("session exists")
            .submitted
            .insert(body.trial_id);
        Ok(log)
    }

    /// Number of sessions that completed each manifest pair.
    pub fn completions(&self) -> Vec<usize> {
        self.inner.lock().expect("state lock").completed.iter().map(HashSet::len).collect()
    }
}

#[derive(Debug)]
pub enum Rejection {
    UnknownTrial,
    Duplicate,
    Invalid(Vec<Violation>),
    Io(String),
}

impl IntoResponse for Rejection {
    fn into_response(self) -> Response {
        match self {
            Rejection::UnknownTrial => (StatusCode::NOT_FOUND, Json(json!({"error": "unknown session or trial"}))).into_response(),
            Rejection::Duplicate => (StatusCode::CONFLICT, Json(json!({"error": "trial already submitted"}))).into_response(),
            Rejection::Invalid(v) => {
                let messages: Vec<String> = v.iter().map(ToString::to_string).collect();
                (
                    StatusCode::UNPROCESSABLE_ENTITY,
                    Json(json!({"error": "invalid clicks", "violations": v, "messages": messages})),
                )
                    .into_response()
            }
            Rejection::Io(e) => (StatusCode::INTERNAL_SERVER_ERROR, Json(json!({"error": e}))).into_response(),
        }
    }
}

async fn session(State(c): State<Arc<Collection>>) -> Json<SessionResponse> {
    Json(c.open_session())
}

async fn image(State(c): State<Arc<Collection>>, UrlPath(id): UrlPath<u64>) -> Response {
    match c.image_png(id) {
        Some(png) => ([(header::CONTENT_TYPE, "image/png")], png).into_response(),
        None => (StatusCode::NOT_FOUND, Json(json!({"error": "unknown image"}))).into_response(),
    }
}

async fn response(State(c): State<Arc<Collection>>, body: Bytes) -> Response {
    let body: ResponseBody = match serde_json::from_slice(&body) {
        Ok(b) => b,
        Err(e) => return (StatusCode::BAD_REQUEST, Json(json!({"error": e.to_string()}))).into_response(),
    };
    match c.submit(body) {
        Ok(_) => Json(json!({"status": "ok"})).into_response(),
        Err(r) => r.into_response(),
    }
}

pub fn router(collection: Arc<Collection>) -> Router {
    Router::new()
        .route("/api/session", get(session))
        .route("/api/image/{id}", get(image))
        .route("/api/response", post(response))
        .with_state(collection)
}

pub async fn serve(collection: Arc<Collection>, port: u16) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(("0.0.0.0", port)).await?;
    log::info!("collecting clicks on {}", listener.local_addr()?);
    axum::serve(listener, router(collection)).await?;
    Ok(())
}
