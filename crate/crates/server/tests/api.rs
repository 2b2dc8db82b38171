use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{header, Method, Request, StatusCode};
use axum::Router;
use chorus_core::time::{ManualClock, MINUTE_MS, SECOND_MS};
use chorus_core::{ChorusConfig, EventLog, Timestamp};
use chorus_server::{router, AppState};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

const TOKEN: &str = "s3cret";

struct Api {
    state: AppState,
    clock: Arc<ManualClock>,
}

fn config() -> ChorusConfig {
    let mut c = ChorusConfig::default();
    c.gateway.admin_token = TOKEN.into();
    c
}

impl Api {
    fn new(config: ChorusConfig) -> Self {
        let clock = Arc::new(ManualClock::new(Timestamp::from_secs(1)));
        Self {
            state: AppState::in_memory(config, clock.clone()),
            clock,
        }
    }

    fn app(&self) -> Router {
        router(self.state.clone())
    }

    async fn call(
        &self,
        method: Method,
        uri: &str,
        body: Option<Value>,
        auth: bool,
    ) -> (StatusCode, Value) {
        let mut req = Request::builder().method(method).uri(uri);
        if auth {
            req = req.header(header::AUTHORIZATION, format!("Bearer {TOKEN}"));
        }
        let req = match body {
            Some(b) => req
                .header(header::CONTENT_TYPE, "application/json")
                .body(Body::from(b.to_string())),
            None => req.body(Body::empty()),
        }
        .unwrap();
        let resp = self.app().oneshot(req).await.unwrap();
        let status = resp.status();
        let bytes = resp.into_body().collect().await.unwrap().to_bytes();
        let v = if bytes.is_empty() {
            Value::Null
        } else {
            serde_json::from_slice(&bytes).unwrap()
        };
        (status, v)
    }

    async fn get(&self, uri: &str) -> (StatusCode, Value) {
        self.call(Method::GET, uri, None, false).await
    }

    async fn post(&self, uri: &str, body: Value) -> (StatusCode, Value) {
        self.call(Method::POST, uri, Some(body), false).await
    }

    fn step(&self, ms: u64) {
        self.clock.advance(ms);
    }

    /// Opens a session for `user` and has `workers` claim its HIT.
    async fn session_with(&self, user: &str, workers: &[&str]) -> u64 {
        let (st, r) = self
            .post(
                &format!("/users/{user}/messages"),
                json!({"text": "hi there"}),
            )
            .await;
        assert_eq!(st, StatusCode::OK, "{r}");
        assert_eq!(r["opened"], true);
        let sid = r["session_id"].as_u64().unwrap();
        let (_, hits) = self.get("/platform/hits").await;
        let hit = hits
            .as_array()
            .unwrap()
            .iter()
            .rev()
            .find(|h| h["session_id"] == json!(sid))
            .expect("a HIT for the session")["hit_id"]
            .clone();
        for w in workers {
            self.step(SECOND_MS);
            let (st, r) = self
                .post("/platform/claims", json!({"hit_id": hit, "worker_id": w}))
                .await;
            assert_eq!(st, StatusCode::OK, "{r}");
            assert_eq!(r["outcome"], "joined");
        }
        sid
    }
}

#[tokio::test]
async fn proposal_vote_delivery_round_trip() {
    let api = Api::new(config());
    let sid = api.session_with("ann", &["w1", "w2", "w3"]).await;

    api.step(SECOND_MS);
    let (st, r) = api
        .post(
            &format!("/sessions/s{sid}/proposals"),
            json!({"worker_id": "w1", "body": "How can we help?"}),
        )
        .await;
    assert_eq!(st, StatusCode::CREATED, "{r}");
    assert_eq!(r["status"], "pending");
    let mid = r["message_id"].as_u64().unwrap();

    let (st, view) = api.get(&format!("/sessions/{sid}/view?worker_id=w2")).await;
    assert_eq!(st, StatusCode::OK);
    assert!(view.to_string().contains("How can we help?"));

    api.step(SECOND_MS);
    let (st, r) = api
        .post(
            &format!("/sessions/{sid}/proposals/m{mid}/votes"),
            json!({"worker_id": "w2"}),
        )
        .await;
    assert_eq!(st, StatusCode::OK, "{r}");
    assert_eq!(r["status"], "accepted");

    let (st, r) = api
        .post(
            &format!("/sessions/{sid}/proposals/{mid}/votes"),
            json!({"worker_id": "w3"}),
        )
        .await;
    assert_eq!(st, StatusCode::CONFLICT, "{r}");
    assert_eq!(r["error"], "message_not_pending");

    let (_, transcript) = api.get("/users/ann/messages").await;
    let bodies: Vec<&str> = transcript
        .as_array()
        .unwrap()
        .iter()
        .filter(|o| o["auto_reply"].is_null())
        .map(|o| o["body"].as_str().unwrap())
        .collect();
    assert_eq!(bodies, ["hi there", "How can we help?"]);
    // The user client never sees worker ids or pending proposals.
    let text = transcript.to_string();
    assert!(!text.contains("w1") && !text.contains("worker"));

    let (st, score) = api.get(&format!("/workers/w1/score?session=s{sid}")).await;
    assert_eq!(st, StatusCode::OK);
    assert!(score["total"].as_u64().unwrap() > 0);
    let (_, status) = api.get("/workers/w1/status").await;
    assert_eq!(status["serving"], json!(sid));
}

#[tokio::test]
async fn errors_map_to_statuses() {
    let api = Api::new(config());
    let sid = api.session_with("bo", &["w1", "w2", "w3"]).await;

    let (st, r) = api
        .post(
            "/sessions/99/proposals",
            json!({"worker_id": "w1", "body": "x"}),
        )
        .await;
    assert_eq!(
        (st, r["error"].as_str()),
        (StatusCode::NOT_FOUND, Some("not_found"))
    );

    let (st, _) = api
        .post(
            &format!("/sessions/{sid}/proposals"),
            json!({"worker_id": "w1", "body": "  "}),
        )
        .await;
    assert_eq!(st, StatusCode::BAD_REQUEST);

    let (st, r) = api
        .post(
            &format!("/sessions/{sid}/facts"),
            json!({"worker_id": "zed", "body": "x"}),
        )
        .await;
    assert_eq!(
        (st, r["error"].as_str()),
        (StatusCode::FORBIDDEN, Some("not_a_participant"))
    );

    let (st, _) = api
        .post("/sessions/sX/heartbeat", json!({"worker_id": "w1"}))
        .await;
    assert_eq!(st, StatusCode::BAD_REQUEST);

    let (st, r) = api
        .post(
            &format!("/sessions/{sid}/submission"),
            json!({"worker_id": "w1"}),
        )
        .await;
    assert_eq!(
        (st, r["error"].as_str()),
        (StatusCode::FORBIDDEN, Some("not_eligible"))
    );

    let (st, _) = api
        .post(
            &format!("/sessions/{sid}/heartbeat"),
            json!({"worker_id": "w1"}),
        )
        .await;
    assert_eq!(st, StatusCode::NO_CONTENT);

    let (st, r) = api.post("/workers/w9/ping-response", json!({})).await;
    assert_eq!(
        (st, r["error"].as_str()),
        (StatusCode::CONFLICT, Some("not_pinged"))
    );
}

#[tokio::test]
async fn blocking_needs_the_admin_token() {
    let api = Api::new(config());
    let (st, _) = api
        .call(
            Method::POST,
            "/admin/block",
            Some(json!({"user_id": "nobody"})),
            true,
        )
        .await;
    assert_eq!(st, StatusCode::NOT_FOUND);
    let sid = api.session_with("troll", &[]).await;
    let (st, _) = api
        .post(
            "/admin/block",
            json!({"user_id": "troll", "reason": "abuse"}),
        )
        .await;
    assert_eq!(st, StatusCode::UNAUTHORIZED);
    let (st, r) = api
        .call(
            Method::POST,
            "/admin/block",
            Some(json!({"user_id": "troll", "reason": "abuse"})),
            true,
        )
        .await;
    assert_eq!(st, StatusCode::OK, "{r}");
    assert_eq!(r["blocked"], true);

    let (_, d) = api.get(&format!("/sessions/{sid}")).await;
    assert!(
        !d["session"]["closed_at"].is_null(),
        "blocking closes the open session: {d}"
    );
    let (st, r) = api
        .post("/users/troll/messages", json!({"text": "hello?"}))
        .await;
    assert!(
        st == StatusCode::FORBIDDEN || r["dropped"] == true,
        "{st} {r}"
    );
    let (_, h) = api.get("/health").await;
    assert_eq!(h["open_sessions"], 0);

    let (st, _) = api
        .call(
            Method::POST,
            "/admin/unblock",
            Some(json!({"user_id": "troll"})),
            true,
        )
        .await;
    assert_eq!(st, StatusCode::OK);
    let (st, r) = api
        .post("/users/troll/messages", json!({"text": "hello?"}))
        .await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(r["opened"], true);
}

#[tokio::test]
async fn analytics_and_reports() {
    let api = Api::new(config());
    let sid = api.session_with("cy", &["w1", "w2"]).await;
    api.post(
        &format!("/sessions/{sid}/proposals"),
        json!({"worker_id": "w1", "body": "hello"}),
    )
    .await;

    for report in ["cost", "sessions", "workers"] {
        let uri = format!("/admin/analytics/{report}");
        assert_eq!(api.get(&uri).await.0, StatusCode::UNAUTHORIZED);
        let (st, v) = api.call(Method::GET, &uri, None, true).await;
        assert_eq!(st, StatusCode::OK, "{report}: {v}");
    }
    let (_, cost) = api
        .call(Method::GET, "/admin/analytics/cost?days=1", None, true)
        .await;
    assert_eq!(cost["sessions"], 1);
    assert_eq!(
        api.call(Method::GET, "/admin/analytics/nope", None, true)
            .await
            .0,
        StatusCode::NOT_FOUND
    );

    // Reports are taken for closed sessions too.
    api.step(50 * MINUTE_MS);
    api.state.tick().unwrap();
    let (_, detail) = api.get(&format!("/sessions/{sid}")).await;
    assert!(!detail["session"]["closed_at"].is_null(), "{detail}");
    let (st, r) = api
        .post(
            "/admin/reports",
            json!({"session_id": format!("s{sid}"), "worker_id": "w2", "message_indices": [0], "note": "rude"}),
        )
        .await;
    assert_eq!(st, StatusCode::CREATED, "{r}");
    assert_eq!(
        api.post("/admin/reports", json!({"session_id": 42}))
            .await
            .0,
        StatusCode::NOT_FOUND
    );
    assert_eq!(api.get("/admin/reports").await.0, StatusCode::UNAUTHORIZED);
    let (_, list) = api.call(Method::GET, "/admin/reports", None, true).await;
    assert_eq!(list.as_array().unwrap().len(), 1);
    assert_eq!(list[0]["note"], "rude");
}

#[tokio::test]
async fn timeout_closes_and_locks_the_session() {
    let api = Api::new(config());
    let sid = api.session_with("di", &["w1", "w2"]).await;
    let (_, d) = api.get(&format!("/sessions/{sid}")).await;
    let deadline = d["session"]["deadline"].as_u64().unwrap();
    api.clock.set(Timestamp(deadline + 1));
    let (st, r) = api
        .post(
            &format!("/sessions/{sid}/proposals"),
            json!({"worker_id": "w1", "body": "late"}),
        )
        .await;
    assert_eq!(
        (st, r["error"].as_str()),
        (StatusCode::CONFLICT, Some("session_closed"))
    );
    let (_, d) = api.get(&format!("/sessions/{sid}")).await;
    assert!(d["session"]["closed_at"].as_u64().unwrap() >= deadline);
}

async fn next_sse(body: &mut Body) -> Option<Value> {
    let mut buf = String::new();
    loop {
        let frame = tokio::time::timeout(Duration::from_secs(2), body.frame())
            .await
            .ok()??
            .ok()?;
        if let Ok(data) = frame.into_data() {
            buf.push_str(std::str::from_utf8(&data).unwrap());
        }
        if let Some(line) = buf.lines().find(|l| l.starts_with("data:")) {
            return Some(serde_json::from_str(line.trim_start_matches("data:").trim()).unwrap());
        }
    }
}

#[tokio::test]
async fn session_stream_resumes_without_gaps() {
    let api = Api::new(config());
    let sid = api.session_with("ed", &["w1", "w2", "w3"]).await;
    let (_, log_before) = api.get("/health").await;
    let all: Vec<u64> = api.state.read(|e| {
        e.log()
            .entries()
            .iter()
            .filter(|x| x.session_id.map(|s| s.0) == Some(sid))
            .map(|x| x.seq)
            .collect()
    });
    let resume_after = all[1];

    let req = Request::builder()
        .uri(format!("/sessions/{sid}/events"))
        .header("last-event-id", resume_after.to_string())
        .body(Body::empty())
        .unwrap();
    let resp = api.app().oneshot(req).await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    let mut body = resp.into_body();

    let mut seen = Vec::new();
    for _ in all.iter().filter(|s| **s > resume_after) {
        seen.push(next_sse(&mut body).await.unwrap()["seq"].as_u64().unwrap());
    }
    assert_eq!(
        seen,
        all.iter()
            .copied()
            .filter(|s| *s > resume_after)
            .collect::<Vec<_>>()
    );

    // Live events follow the backlog.
    api.post(
        &format!("/sessions/{sid}/facts"),
        json!({"worker_id": "w2", "body": "likes tea"}),
    )
    .await;
    let live = next_sse(&mut body).await.unwrap();
    assert_eq!(live["kind"], "FactPosted");
    assert!(live["seq"].as_u64().unwrap() > log_before["last_seq"].as_u64().unwrap());
}

#[tokio::test]
async fn user_stream_pushes_delivered_messages() {
    let api = Api::new(config());
    let sid = api.session_with("fi", &["w1", "w2"]).await;
    let req = Request::builder()
        .uri("/users/fi/stream")
        .body(Body::empty())
        .unwrap();
    let mut body = api.app().oneshot(req).await.unwrap().into_body();
    let (st, r) = api
        .post(
            &format!("/sessions/{sid}/proposals"),
            json!({"worker_id": "w1", "body": "hey"}),
        )
        .await;
    assert_eq!(st, StatusCode::CREATED);
    assert_eq!(r["status"], "accepted", "two workers accept on proposal");
    let pushed = next_sse(&mut body).await.unwrap();
    assert_eq!(pushed["body"], "hey");
    assert_eq!(pushed["user_id"], "fi");
}

#[tokio::test]
async fn log_file_survives_restart() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("events.jsonl");
    let clock = Arc::new(ManualClock::new(Timestamp::from_secs(5)));
    let first = AppState::open(config(), &path, clock.clone()).unwrap();
    let api = Api {
        state: first,
        clock: clock.clone(),
    };
    let sid = api.session_with("gu", &["w1", "w2"]).await;
    api.post(
        &format!("/sessions/{sid}/proposals"),
        json!({"worker_id": "w1", "body": "one"}),
    )
    .await;
    let before = api.state.read(|e| e.log().to_jsonl());
    drop(api);

    let on_disk = std::fs::read_to_string(&path).unwrap();
    assert_eq!(on_disk, before);

    let second = AppState::open(config(), &path, clock.clone()).unwrap();
    let api = Api {
        state: second,
        clock,
    };
    api.step(SECOND_MS);
    // A second user gets a fresh session and HIT id after the restart.
    let sid2 = api.session_with("ha", &["w3"]).await;
    assert!(sid2 > sid);
    let log = EventLog::read_jsonl(std::io::Cursor::new(std::fs::read(&path).unwrap())).unwrap();
    assert_eq!(log.to_jsonl(), api.state.read(|e| e.log().to_jsonl()));
    let (_, hits) = api.get("/platform/hits").await;
    let ids: Vec<&Value> = hits
        .as_array()
        .unwrap()
        .iter()
        .map(|h| &h["hit_id"])
        .collect();
    let mut uniq = ids.clone();
    uniq.dedup();
    assert_eq!(ids.len(), uniq.len());
}
