//! HTTP gateway for the chorus engine.
//!
//! One engine sits behind a mutex. Every request that changes state runs a
//! command, then appends the new log entries to the JSONL file, broadcasts
//! them to session streams and pushes delivered messages to user streams.

use std::convert::Infallible;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Duration;

use anyhow::Context;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::sse::{Event as SseEvent, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chorus_core::analytics::{
    deployment_cost_summary, log_span_days, session_statistics, worker_quality, QualityThresholds,
};
use chorus_core::event::write_entry;
use chorus_core::gateway::Outbound;
use chorus_core::recruiting::ManualPlatform;
use chorus_core::time::Clock;
use chorus_core::{
    Chorus, ChorusConfig, ChorusError, EventLog, EventLogEntry, HitId, MessageId, SessionId,
    Timestamp, UserId, WorkerId,
};
use futures::stream::{self, Stream, StreamExt};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::broadcast;

pub type Engine = Chorus<ManualPlatform>;

const CHANNEL_CAPACITY: usize = 1024;

/// A problem a worker flagged in a session.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionReport {
    pub report_id: u64,
    pub received_at: Timestamp,
    pub session_id: SessionId,
    #[serde(default)]
    pub worker_id: Option<WorkerId>,
    #[serde(default)]
    pub message_indices: Vec<u32>,
    #[serde(default)]
    pub fact_indices: Vec<u32>,
    #[serde(default)]
    pub note: String,
}

struct Inner {
    engine: Engine,
    persisted_seq: u64,
    log: Option<BufWriter<File>>,
    reports: Vec<SessionReport>,
    reports_file: Option<BufWriter<File>>,
}

#[derive(Clone)]
pub struct AppState {
    inner: Arc<Mutex<Inner>>,
    events: broadcast::Sender<EventLogEntry>,
    outbound: broadcast::Sender<Outbound>,
    clock: Arc<dyn Clock>,
}

impl AppState {
    /// Engine without persistence.
    pub fn in_memory(config: ChorusConfig, clock: Arc<dyn Clock>) -> Self {
        Self::build(
            Chorus::new(config, ManualPlatform::new()),
            None,
            0,
            Vec::new(),
            None,
            clock,
        )
    }

    /// Resumes from `log_path` if it exists and appends to it from then on.
    /// Reports go to a sibling file with a `.reports.jsonl` suffix.
    pub fn open(
        config: ChorusConfig,
        log_path: &Path,
        clock: Arc<dyn Clock>,
    ) -> anyhow::Result<Self> {
        let entries = if log_path.exists() {
            let f =
                File::open(log_path).with_context(|| format!("opening {}", log_path.display()))?;
            EventLog::read_jsonl(BufReader::new(f))
                .with_context(|| format!("reading {}", log_path.display()))?
                .into_entries()
        } else {
            Vec::new()
        };
        let last_hit = entries
            .iter()
            .filter_map(|e| match &e.event {
                chorus_core::Event::HitPosted { hit_id, .. } => Some(hit_id.0),
                _ => None,
            })
            .max()
            .unwrap_or(0);
        let mut platform = ManualPlatform::new();
        platform.set_next_hit(last_hit);
        let persisted = entries.len() as u64;
        let engine = Chorus::from_log(config, entries, platform)
            .with_context(|| format!("replaying {}", log_path.display()))?;
        let log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(log_path)
            .with_context(|| format!("opening {} for append", log_path.display()))?;

        let rpath = reports_path(log_path);
        let mut reports = Vec::new();
        if rpath.exists() {
            for line in BufReader::new(File::open(&rpath)?).lines() {
                let line = line?;
                if !line.trim().is_empty() {
                    reports.push(serde_json::from_str(&line)?);
                }
            }
        }
        let rfile = OpenOptions::new().create(true).append(true).open(&rpath)?;
        Ok(Self::build(
            engine,
            Some(BufWriter::new(log)),
            persisted,
            reports,
            Some(BufWriter::new(rfile)),
            clock,
        ))
    }

    fn build(
        engine: Engine,
        log: Option<BufWriter<File>>,
        persisted_seq: u64,
        reports: Vec<SessionReport>,
        reports_file: Option<BufWriter<File>>,
        clock: Arc<dyn Clock>,
    ) -> Self {
        Self {
            inner: Arc::new(Mutex::new(Inner {
                engine,
                persisted_seq,
                log,
                reports,
                reports_file,
            })),
            events: broadcast::channel(CHANNEL_CAPACITY).0,
            outbound: broadcast::channel(CHANNEL_CAPACITY).0,
            clock,
        }
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Runs a command at the clock's current time and publishes whatever it
    /// emitted, including events written before a command failed.
    pub fn mutate<T>(
        &self,
        f: impl FnOnce(&mut Engine, Timestamp) -> Result<T, ChorusError>,
    ) -> Result<T, ApiError> {
        let mut inner = self.lock();
        let now = self.clock.now();
        let result = f(&mut inner.engine, now);
        self.commit(&mut inner)?;
        Ok(result?)
    }

    pub fn read<T>(&self, f: impl FnOnce(&Engine) -> T) -> T {
        f(&self.lock().engine)
    }

    /// Closes timed-out sessions and settles anything due.
    pub fn tick(&self) -> Result<Vec<SessionId>, ApiError> {
        self.mutate(|e, now| e.tick(now))
    }

    fn commit(&self, inner: &mut Inner) -> Result<(), ApiError> {
        let fresh: Vec<EventLogEntry> = inner.engine.log().since(inner.persisted_seq).to_vec();
        let outbox = inner.engine.drain_outbox();
        if let Some(last) = fresh.last() {
            inner.persisted_seq = last.seq;
        }
        let mut io_result = Ok(());
        if let Some(w) = inner.log.as_mut() {
            io_result = fresh
                .iter()
                .try_for_each(|e| write_entry(w, e))
                .map_err(|e| e.to_string())
                .and_then(|()| w.flush().map_err(|e| e.to_string()));
        }
        for e in fresh {
            let _ = self.events.send(e);
        }
        for o in outbox {
            let _ = self.outbound.send(o);
        }
        io_result.map_err(ApiError::Persist)
    }
}

fn reports_path(log: &Path) -> PathBuf {
    let mut name = log.file_stem().unwrap_or_default().to_os_string();
    name.push(".reports.jsonl");
    log.with_file_name(name)
}

/// Calls [`AppState::tick`] every `period` until the runtime shuts down.
pub fn spawn_ticker(state: AppState, period: Duration) -> tokio::task::JoinHandle<()> {
    tokio::spawn(async move {
        let mut iv = tokio::time::interval(period);
        iv.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
        loop {
            iv.tick().await;
            if let Err(e) = state.tick() {
                tracing::error!("tick failed: {e}");
            }
        }
    })
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route(
            "/users/{id}/messages",
            post(user_message).get(user_transcript),
        )
        .route("/users/{id}/stream", get(user_stream))
        .route("/sessions/{id}", get(session_detail))
        .route("/sessions/{id}/view", get(worker_view))
        .route("/sessions/{id}/proposals", post(propose))
        .route("/sessions/{id}/proposals/{mid}/votes", post(vote))
        .route("/sessions/{id}/facts", post(post_fact))
        .route("/sessions/{id}/submission", post(submit))
        .route("/sessions/{id}/heartbeat", post(heartbeat))
        .route("/sessions/{id}/events", get(session_events))
        .route("/workers/{id}/score", get(score))
        .route("/workers/{id}/status", get(worker_status))
        .route("/workers/{id}/ping-response", post(ping_response))
        .route("/platform/claims", post(claim))
        .route("/platform/hits", get(hits))
        .route("/platform/bonuses", get(bonuses))
        .route("/admin/block", post(block))
        .route("/admin/unblock", post(unblock))
        .route("/admin/analytics/{report}", get(analytics))
        .route("/admin/reports", post(file_report).get(list_reports))
        .with_state(state)
}

// ---- errors ----

#[derive(Debug)]
pub enum ApiError {
    Chorus(ChorusError),
    BadRequest(String),
    NotFound(String),
    Persist(String),
}

impl From<ChorusError> for ApiError {
    fn from(e: ChorusError) -> Self {
        ApiError::Chorus(e)
    }
}

impl std::fmt::Display for ApiError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ApiError::Chorus(e) => write!(f, "{e}"),
            ApiError::BadRequest(m) | ApiError::NotFound(m) => f.write_str(m),
            ApiError::Persist(m) => write!(f, "writing event log: {m}"),
        }
    }
}

impl ApiError {
    fn status_and_code(&self) -> (StatusCode, &'static str) {
        use ChorusError::*;
        match self {
            ApiError::BadRequest(_) => (StatusCode::BAD_REQUEST, "bad_request"),
            ApiError::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
            ApiError::Persist(_) => (StatusCode::INTERNAL_SERVER_ERROR, "persist_failed"),
            ApiError::Chorus(e) => match e {
                UnknownSession(_) | UnknownMessage(_) | UnknownUser(_) | UnknownHit(_)
                | UnknownAssignment(_) => (StatusCode::NOT_FOUND, "not_found"),
                EmptyBody => (StatusCode::BAD_REQUEST, "empty_body"),
                Unauthorized => (StatusCode::UNAUTHORIZED, "unauthorized"),
                NotAParticipant { .. } => (StatusCode::FORBIDDEN, "not_a_participant"),
                UserBlocked(_) => (StatusCode::FORBIDDEN, "user_blocked"),
                NotEligible { .. } => (StatusCode::FORBIDDEN, "not_eligible"),
                SessionClosed(_) => (StatusCode::CONFLICT, "session_closed"),
                SessionStillOpen(_) => (StatusCode::CONFLICT, "session_still_open"),
                SessionAlreadyOpen { .. } => (StatusCode::CONFLICT, "session_already_open"),
                MessageNotPending(_) => (StatusCode::CONFLICT, "message_not_pending"),
                AlreadyVoted { .. } => (StatusCode::CONFLICT, "already_voted"),
                AlreadyDelivered(_) => (StatusCode::CONFLICT, "already_delivered"),
                NotAccepted(_) => (StatusCode::CONFLICT, "not_accepted"),
                NoClaimableAssignment(_) => (StatusCode::CONFLICT, "no_claimable_assignment"),
                WorkerBusy(_) => (StatusCode::CONFLICT, "worker_busy"),
                AlreadyJoined { .. } => (StatusCode::CONFLICT, "already_joined"),
                NotPinged(_) => (StatusCode::CONFLICT, "not_pinged"),
                PlatformUnavailable(_) => (StatusCode::SERVICE_UNAVAILABLE, "platform_unavailable"),
                Internal(_) => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
            },
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, code) = self.status_and_code();
        if status.is_server_error() {
            tracing::error!("{self}");
        }
        (
            status,
            Json(json!({ "error": code, "message": self.to_string() })),
        )
            .into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

// ---- ids ----

/// Accepts `s12` or `12` for session 12, and likewise for other minted ids.
fn parse_seq(raw: &str, prefix: char) -> Result<u64, ApiError> {
    raw.strip_prefix(prefix)
        .unwrap_or(raw)
        .parse()
        .map_err(|_| ApiError::BadRequest(format!("malformed id {raw:?}")))
}

fn session_id(raw: &str) -> Result<SessionId, ApiError> {
    parse_seq(raw, 's').map(SessionId)
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum IdRepr {
    Num(u64),
    Text(String),
}

impl IdRepr {
    fn seq(&self, prefix: char) -> Result<u64, ApiError> {
        match self {
            IdRepr::Num(n) => Ok(*n),
            IdRepr::Text(s) => parse_seq(s, prefix),
        }
    }
}

fn bearer(headers: &HeaderMap) -> String {
    headers
        .get(axum::http::header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .unwrap_or_default()
        .to_owned()
}

fn require_admin(state: &AppState, headers: &HeaderMap) -> Result<(), ApiError> {
    let token = bearer(headers);
    let ok = state.read(|e| !token.is_empty() && token == e.config().gateway.admin_token);
    if ok {
        Ok(())
    } else {
        Err(ChorusError::Unauthorized.into())
    }
}

// ---- handlers ----

async fn health(State(st): State<AppState>) -> Json<Value> {
    st.read(|e| {
        Json(json!({
            "status": "ok",
            "last_seq": e.log().last_seq(),
            "open_sessions": e.state().open_sessions.len(),
        }))
    })
}

#[derive(Deserialize)]
struct TextBody {
    text: String,
}

async fn user_message(
    State(st): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Json(b): Json<TextBody>,
) -> ApiResult<chorus_core::gateway::IngestResult> {
    let user = UserId::new(id);
    Ok(Json(st.mutate(|e, now| {
        e.handle_inbound_user_message(&user, &b.text, now)
    })?))
}

async fn user_transcript(
    State(st): State<AppState>,
    UrlPath(id): UrlPath<String>,
) -> Json<Vec<Outbound>> {
    Json(st.read(|e| e.user_transcript(&UserId::new(id))))
}

type SseStream = std::pin::Pin<Box<dyn Stream<Item = Result<SseEvent, Infallible>> + Send>>;

/// Live messages for one user. History comes from `GET /users/{id}/messages`.
async fn user_stream(
    State(st): State<AppState>,
    UrlPath(id): UrlPath<String>,
) -> impl IntoResponse {
    let user = UserId::new(id);
    let rx = st.outbound.subscribe();
    let live = broadcast_stream(rx).filter_map(move |o| {
        let keep = o.user_id == user;
        async move {
            keep.then(|| {
                Ok(SseEvent::default()
                    .event("message")
                    .json_data(&o)
                    .expect("outbound serializes"))
            })
        }
    });
    Sse::new(Box::pin(live) as SseStream).keep_alive(KeepAlive::default())
}

/// Ends when the receiver lags so the client reconnects and resyncs.
fn broadcast_stream<T: Clone + Send + 'static>(
    rx: broadcast::Receiver<T>,
) -> impl Stream<Item = T> + Send {
    stream::unfold(rx, |mut rx| async move {
        match rx.recv().await {
            Ok(v) => Some((v, rx)),
            Err(_) => None,
        }
    })
}

#[derive(Deserialize)]
struct EventsQuery {
    after: Option<u64>,
}

fn entry_event(e: &EventLogEntry) -> SseEvent {
    SseEvent::default()
        .id(e.seq.to_string())
        .event(format!("{:?}", e.kind()))
        .json_data(e)
        .expect("log entries serialize")
}

/// Session entries after `after` (or the `Last-Event-ID` header), then live
/// ones. The backlog is read under the same lock that publishes, so the
/// stream has no gaps.
async fn session_events(
    State(st): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<EventsQuery>,
    headers: HeaderMap,
) -> Result<impl IntoResponse, ApiError> {
    let sid = session_id(&id)?;
    let after = q.after.or_else(|| {
        headers
            .get("last-event-id")
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.parse().ok())
    });
    let after = after.unwrap_or(0);
    let (backlog, rx) = {
        let inner = st.lock();
        if inner.engine.state().session(sid).is_none() {
            return Err(ChorusError::UnknownSession(sid).into());
        }
        let backlog: Vec<EventLogEntry> = inner
            .engine
            .log()
            .since(after)
            .iter()
            .filter(|e| e.session_id == Some(sid))
            .cloned()
            .collect();
        (backlog, st.events.subscribe())
    };
    let floor = backlog.last().map(|e| e.seq).unwrap_or(after);
    let head = stream::iter(backlog.into_iter().map(|e| Ok(entry_event(&e))));
    let live = broadcast_stream(rx).filter_map(move |e| async move {
        (e.session_id == Some(sid) && e.seq > floor).then(|| Ok(entry_event(&e)))
    });
    Ok(Sse::new(Box::pin(head.chain(live)) as SseStream).keep_alive(KeepAlive::default()))
}

async fn session_detail(
    State(st): State<AppState>,
    UrlPath(id): UrlPath<String>,
) -> Result<Json<Value>, ApiError> {
    let sid = session_id(&id)?;
    st.read(|e| {
        let rec = e
            .state()
            .session(sid)
            .ok_or(ChorusError::UnknownSession(sid))?;
        Ok(Json(json!({
            "session": rec,
            "next_deadline": e.next_deadline(),
        })))
    })
}

#[derive(Deserialize)]
struct WorkerQuery {
    worker_id: String,
}

async fn worker_view(
    State(st): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<WorkerQuery>,
) -> ApiResult<chorus_core::consensus::WorkerView> {
    let sid = session_id(&id)?;
    let w = WorkerId::new(q.worker_id);
    Ok(Json(st.read(|e| e.render_worker_view(sid, &w))?))
}

#[derive(Deserialize)]
struct WorkerBody {
    worker_id: String,
    #[serde(default)]
    body: String,
}

async fn propose(
    State(st): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Json(b): Json<WorkerBody>,
) -> Result<(StatusCode, Json<Value>), ApiError> {
    let sid = session_id(&id)?;
    let w = WorkerId::new(b.worker_id);
    let mid = st.mutate(|e, now| e.propose_message(sid, &w, &b.body, now))?;
    let status = st.read(|e| {
        e.state()
            .conversations
            .get(&sid)
            .and_then(|c| c.message(mid).ok())
            .map(|m| m.status)
    });
    Ok((
        StatusCode::CREATED,
        Json(json!({ "message_id": mid, "status": status })),
    ))
}

async fn vote(
    State(st): State<AppState>,
    UrlPath((id, mid)): UrlPath<(String, String)>,
    Json(b): Json<WorkerBody>,
) -> Result<Json<Value>, ApiError> {
    let sid = session_id(&id)?;
    let mid = MessageId(parse_seq(&mid, 'm')?);
    let w = WorkerId::new(b.worker_id);
    let status = st.mutate(|e, now| e.vote_message(sid, &w, mid, now))?;
    Ok(Json(json!({ "message_id": mid, "status": status })))
}

async fn post_fact(
    State(st): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Json(b): Json<WorkerBody>,
) -> Result<(StatusCode, Json<Value>), ApiError> {
    let sid = session_id(&id)?;
    let w = WorkerId::new(b.worker_id);
    let fid = st.mutate(|e, now| e.post_fact(sid, &w, &b.body, now))?;
    Ok((StatusCode::CREATED, Json(json!({ "fact_id": fid }))))
}

#[derive(Deserialize)]
struct WorkerOnly {
    worker_id: String,
}

async fn submit(
    State(st): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Json(b): Json<WorkerOnly>,
) -> ApiResult<chorus_core::gateway::SubmissionResult> {
    let sid = session_id(&id)?;
    let w = WorkerId::new(b.worker_id);
    Ok(Json(st.mutate(|e, now| e.submit_hit(sid, &w, now))?))
}

async fn heartbeat(
    State(st): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Json(b): Json<WorkerOnly>,
) -> Result<StatusCode, ApiError> {
    let sid = session_id(&id)?;
    let w = WorkerId::new(b.worker_id);
    st.mutate(|e, now| e.heartbeat(sid, &w, now))?;
    Ok(StatusCode::NO_CONTENT)
}

#[derive(Deserialize)]
struct ScoreQuery {
    session: Option<String>,
}

async fn score(
    State(st): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<ScoreQuery>,
) -> ApiResult<chorus_core::gateway::ScoreSnapshot> {
    let sid = q.session.as_deref().map(session_id).transpose()?;
    let w = WorkerId::new(id);
    Ok(Json(st.read(|e| e.score(&w, sid))?))
}

async fn worker_status(State(st): State<AppState>, UrlPath(id): UrlPath<String>) -> Json<Value> {
    let w = WorkerId::new(id);
    st.read(|e| {
        let s = e.state();
        Json(json!({
            "worker_id": w,
            "serving": s.serving.get(&w),
            "retainer_position": s.pool.position(&w),
            "ping": s.pool.pings.get(&w),
        }))
    })
}

async fn ping_response(
    State(st): State<AppState>,
    UrlPath(id): UrlPath<String>,
) -> Result<Json<Value>, ApiError> {
    let w = WorkerId::new(id);
    let sid = st.mutate(|e, now| e.respond_to_ping(&w, now))?;
    Ok(Json(json!({ "session_id": sid })))
}

#[derive(Deserialize)]
struct ClaimBody {
    hit_id: IdRepr,
    worker_id: String,
}

async fn claim(
    State(st): State<AppState>,
    Json(b): Json<ClaimBody>,
) -> ApiResult<chorus_core::gateway::ClaimOutcome> {
    let hit = HitId(b.hit_id.seq('h')?);
    let w = WorkerId::new(b.worker_id);
    Ok(Json(st.mutate(|e, now| e.claim_assignment(hit, &w, now))?))
}

async fn hits(State(st): State<AppState>) -> Json<Value> {
    st.read(|e| Json(json!(e.state().hits.values().collect::<Vec<_>>())))
}

async fn bonuses(State(st): State<AppState>) -> Json<Value> {
    st.read(|e| {
        let rows: Vec<Value> = e
            .platform()
            .bonuses
            .iter()
            .map(|(w, c)| json!({ "worker_id": w, "amount_cents": c }))
            .collect();
        Json(json!(rows))
    })
}

#[derive(Deserialize)]
struct BlockBody {
    user_id: String,
    #[serde(default)]
    reason: String,
}

async fn block(
    State(st): State<AppState>,
    headers: HeaderMap,
    Json(b): Json<BlockBody>,
) -> ApiResult<chorus_core::gateway::UserAccount> {
    let token = bearer(&headers);
    let user = UserId::new(b.user_id);
    Ok(Json(st.mutate(|e, now| {
        e.block_user(&user, &b.reason, &token, now)
    })?))
}

async fn unblock(
    State(st): State<AppState>,
    headers: HeaderMap,
    Json(b): Json<BlockBody>,
) -> ApiResult<chorus_core::gateway::UserAccount> {
    let token = bearer(&headers);
    let user = UserId::new(b.user_id);
    Ok(Json(
        st.mutate(|e, now| e.unblock_user(&user, &token, now))?,
    ))
}

#[derive(Deserialize)]
struct AnalyticsQuery {
    days: Option<u32>,
}

async fn analytics(
    State(st): State<AppState>,
    UrlPath(report): UrlPath<String>,
    Query(q): Query<AnalyticsQuery>,
    headers: HeaderMap,
) -> Result<Json<Value>, ApiError> {
    require_admin(&st, &headers)?;
    st.read(|e| {
        let entries = e.log().entries();
        let v = match report.as_str() {
            "cost" => {
                let days = q.days.unwrap_or_else(|| log_span_days(entries));
                let r = &e.config().recruiting;
                json!(deployment_cost_summary(
                    entries,
                    days.max(1),
                    &r.fee_schedule,
                    r.base_pay,
                    r.retainer_fee_percent,
                ))
            }
            "sessions" => json!(session_statistics(entries)),
            "workers" => json!(worker_quality(entries, &QualityThresholds::default())),
            other => return Err(ApiError::NotFound(format!("no report named {other:?}"))),
        };
        Ok(Json(v))
    })
}

#[derive(Deserialize)]
struct ReportBody {
    session_id: IdRepr,
    #[serde(default)]
    worker_id: Option<String>,
    #[serde(default)]
    message_indices: Vec<u32>,
    #[serde(default)]
    fact_indices: Vec<u32>,
    #[serde(default)]
    note: String,
}

/// Workers flag problems here. Closed sessions are accepted too.
async fn file_report(
    State(st): State<AppState>,
    Json(b): Json<ReportBody>,
) -> Result<(StatusCode, Json<SessionReport>), ApiError> {
    let sid = SessionId(b.session_id.seq('s')?);
    let mut inner = st.lock();
    if inner.engine.state().session(sid).is_none() {
        return Err(ChorusError::UnknownSession(sid).into());
    }
    let report = SessionReport {
        report_id: inner.reports.len() as u64 + 1,
        received_at: st.clock.now(),
        session_id: sid,
        worker_id: b.worker_id.map(WorkerId::new),
        message_indices: b.message_indices,
        fact_indices: b.fact_indices,
        note: b.note,
    };
    if let Some(w) = inner.reports_file.as_mut() {
        let line = serde_json::to_string(&report).expect("report serializes");
        writeln!(w, "{line}")
            .and_then(|()| w.flush())
            .map_err(|e| ApiError::Persist(e.to_string()))?;
    }
    inner.reports.push(report.clone());
    Ok((StatusCode::CREATED, Json(report)))
}

async fn list_reports(
    State(st): State<AppState>,
    headers: HeaderMap,
) -> Result<Json<Vec<SessionReport>>, ApiError> {
    require_admin(&st, &headers)?;
    Ok(Json(st.lock().reports.clone()))
}
