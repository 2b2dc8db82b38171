//! Python bindings.
//!
//! Structured results cross the boundary as plain dicts and lists (via
//! `json.loads`), ids as integers, times as integer milliseconds.

use chorus_core::analytics::{
    deployment_cost_summary, hit_base_cost, log_span_days, session_statistics, worker_quality,
    QualityThresholds,
};
use chorus_core::consensus::acceptance_threshold;
use chorus_core::lifecycle::CloseReason;
use chorus_core::recruiting::ManualPlatform;
use chorus_core::sim::{self, check_invariants, Scenario};
use chorus_core::{
    Cents, ChorusConfig, EventLog, EventLogEntry, HitId, MessageId, SessionId, Timestamp, UserId,
    WorkerId,
};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

create_exception!(
    chorus,
    ChorusError,
    PyException,
    "A command the engine refused."
);

fn refused(e: chorus_core::ChorusError) -> PyErr {
    ChorusError::new_err(e.to_string())
}

fn bad(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<T: Serialize>(py: Python<'_>, v: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(v).map_err(bad)?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn load_config(toml: Option<&str>) -> PyResult<ChorusConfig> {
    match toml {
        Some(s) => ChorusConfig::from_toml_str(s).map_err(bad),
        None => Ok(ChorusConfig::default()),
    }
}

fn parse_log(jsonl: &str) -> PyResult<Vec<EventLogEntry>> {
    Ok(EventLog::read_jsonl(jsonl.as_bytes())
        .map_err(bad)?
        .into_entries())
}

/// The engine over a platform whose claims come from `claim`.
#[pyclass(name = "Chorus", module = "chorus")]
struct PyChorus {
    inner: chorus_core::Chorus<ManualPlatform>,
}

#[pymethods]
impl PyChorus {
    /// `config` is TOML text; omitted sections take their defaults.
    #[new]
    #[pyo3(signature = (config = None))]
    fn new(config: Option<&str>) -> PyResult<Self> {
        Ok(Self {
            inner: chorus_core::Chorus::new(load_config(config)?, ManualPlatform::new()),
        })
    }

    /// Resumes from a JSONL event log.
    #[staticmethod]
    #[pyo3(signature = (jsonl, config = None))]
    fn from_jsonl(jsonl: &str, config: Option<&str>) -> PyResult<Self> {
        let entries = parse_log(jsonl)?;
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
        let inner =
            chorus_core::Chorus::from_log(load_config(config)?, entries, platform).map_err(bad)?;
        Ok(Self { inner })
    }

    fn user_message(
        &mut self,
        py: Python<'_>,
        user: &str,
        text: &str,
        now: u64,
    ) -> PyResult<Py<PyAny>> {
        let r = self
            .inner
            .handle_inbound_user_message(&UserId::from(user), text, Timestamp(now))
            .map_err(refused)?;
        to_py(py, &r)
    }

    fn propose(&mut self, session: u64, worker: &str, body: &str, now: u64) -> PyResult<u64> {
        self.inner
            .propose_message(
                SessionId(session),
                &WorkerId::from(worker),
                body,
                Timestamp(now),
            )
            .map(|m| m.0)
            .map_err(refused)
    }

    /// Returns the message status after the vote.
    fn vote(
        &mut self,
        py: Python<'_>,
        session: u64,
        worker: &str,
        message: u64,
        now: u64,
    ) -> PyResult<Py<PyAny>> {
        let s = self
            .inner
            .vote_message(
                SessionId(session),
                &WorkerId::from(worker),
                MessageId(message),
                Timestamp(now),
            )
            .map_err(refused)?;
        to_py(py, &s)
    }

    fn post_fact(&mut self, session: u64, worker: &str, body: &str, now: u64) -> PyResult<u64> {
        self.inner
            .post_fact(
                SessionId(session),
                &WorkerId::from(worker),
                body,
                Timestamp(now),
            )
            .map(|f| f.0)
            .map_err(refused)
    }

    fn heartbeat(&mut self, session: u64, worker: &str, now: u64) -> PyResult<()> {
        self.inner
            .heartbeat(SessionId(session), &WorkerId::from(worker), Timestamp(now))
            .map_err(refused)
    }

    fn submit(
        &mut self,
        py: Python<'_>,
        session: u64,
        worker: &str,
        now: u64,
    ) -> PyResult<Py<PyAny>> {
        let r = self
            .inner
            .submit_hit(SessionId(session), &WorkerId::from(worker), Timestamp(now))
            .map_err(refused)?;
        to_py(py, &r)
    }

    /// Closes a session by hand. Returns bonus settlements in cents.
    #[pyo3(signature = (session, now, reason = "timeout"))]
    fn close_session(
        &mut self,
        py: Python<'_>,
        session: u64,
        now: u64,
        reason: &str,
    ) -> PyResult<Py<PyAny>> {
        let reason: CloseReason =
            serde_json::from_value(serde_json::Value::String(reason.into())).map_err(bad)?;
        let r = self
            .inner
            .close_session(SessionId(session), reason, Timestamp(now))
            .map_err(refused)?;
        to_py(py, &r)
    }

    fn view(&self, py: Python<'_>, session: u64, worker: &str) -> PyResult<Py<PyAny>> {
        let v = self
            .inner
            .render_worker_view(SessionId(session), &WorkerId::from(worker))
            .map_err(refused)?;
        to_py(py, &v)
    }

    #[pyo3(signature = (worker, session = None))]
    fn score(&self, py: Python<'_>, worker: &str, session: Option<u64>) -> PyResult<Py<PyAny>> {
        let s = self
            .inner
            .score(&WorkerId::from(worker), session.map(SessionId))
            .map_err(refused)?;
        to_py(py, &s)
    }

    fn claim(&mut self, py: Python<'_>, hit: u64, worker: &str, now: u64) -> PyResult<Py<PyAny>> {
        let o = self
            .inner
            .claim_assignment(HitId(hit), &WorkerId::from(worker), Timestamp(now))
            .map_err(refused)?;
        to_py(py, &o)
    }

    fn respond_to_ping(&mut self, worker: &str, now: u64) -> PyResult<u64> {
        self.inner
            .respond_to_ping(&WorkerId::from(worker), Timestamp(now))
            .map(|s| s.0)
            .map_err(refused)
    }

    /// Closes due sessions; returns their ids.
    fn tick(&mut self, now: u64) -> PyResult<Vec<u64>> {
        Ok(self
            .inner
            .tick(Timestamp(now))
            .map_err(refused)?
            .into_iter()
            .map(|s| s.0)
            .collect())
    }

    fn next_deadline(&self) -> Option<u64> {
        self.inner.next_deadline().map(|t| t.0)
    }

    #[pyo3(signature = (user, reason, token, now))]
    fn block_user(
        &mut self,
        py: Python<'_>,
        user: &str,
        reason: &str,
        token: &str,
        now: u64,
    ) -> PyResult<Py<PyAny>> {
        let a = self
            .inner
            .block_user(&UserId::from(user), reason, token, Timestamp(now))
            .map_err(refused)?;
        to_py(py, &a)
    }

    fn unblock_user(
        &mut self,
        py: Python<'_>,
        user: &str,
        token: &str,
        now: u64,
    ) -> PyResult<Py<PyAny>> {
        let a = self
            .inner
            .unblock_user(&UserId::from(user), token, Timestamp(now))
            .map_err(refused)?;
        to_py(py, &a)
    }

    fn transcript(&self, py: Python<'_>, user: &str) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.user_transcript(&UserId::from(user)))
    }

    /// Messages pushed to users since the last call.
    fn drain_outbox(&mut self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        let out = self.inner.drain_outbox();
        to_py(py, &out)
    }

    fn hits(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.state().hits.values().collect::<Vec<_>>())
    }

    /// Log entries with `seq > after`.
    #[pyo3(signature = (after = 0))]
    fn events(&self, py: Python<'_>, after: u64) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.log().since(after))
    }

    fn log_jsonl(&self) -> String {
        self.inner.log().to_jsonl()
    }

    fn state(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, self.inner.state())
    }

    /// Replays the log and checks the protocol invariants against live
    /// state. Empty means clean.
    fn check_invariants(&self) -> Vec<String> {
        check_invariants(
            self.inner.config(),
            self.inner.log().entries(),
            self.inner.state(),
        )
    }

    fn __len__(&self) -> usize {
        self.inner.log().len()
    }
}

/// Votes needed to accept a message with `active` workers on the page.
#[pyfunction(name = "acceptance_threshold")]
fn py_acceptance_threshold(active: u32) -> u32 {
    acceptance_threshold(active)
}

/// Base cost of a HIT in cents, platform fee included.
#[pyfunction(name = "hit_base_cost")]
fn py_hit_base_cost(n_assignments: i64, base_pay_cents: i64) -> PyResult<i64> {
    hit_base_cost(n_assignments, Cents(base_pay_cents))
        .map(|c| c.0)
        .map_err(bad)
}

fn parse_scenario(text: &str) -> PyResult<Scenario> {
    if text.trim_start().starts_with('{') {
        Scenario::from_json(text).map_err(bad)
    } else {
        Scenario::from_yaml(text).map_err(bad)
    }
}

/// Runs a scenario (JSON or YAML text). Returns `(summary, jsonl_log)`.
#[pyfunction]
#[pyo3(signature = (scenario, seed = None))]
fn run_scenario(
    py: Python<'_>,
    scenario: &str,
    seed: Option<u64>,
) -> PyResult<(Py<PyAny>, String)> {
    let mut s = parse_scenario(scenario)?;
    if let Some(seed) = seed {
        s.seed = seed;
    }
    let out = py.detach(|| sim::run_scenario(&s)).map_err(bad)?;
    Ok((to_py(py, &out.summary)?, out.log.to_jsonl()))
}

#[pyfunction]
#[pyo3(signature = (runs = 1000, seed = 1))]
fn fuzz(py: Python<'_>, runs: u32, seed: u64) -> PyResult<Py<PyAny>> {
    let r = py.detach(|| sim::fuzz(runs, seed));
    to_py(py, &r)
}

#[pyfunction]
fn scenario_schema(py: Python<'_>) -> PyResult<Py<PyAny>> {
    to_py(py, &Scenario::json_schema())
}

/// Cost report for a JSONL log. `days` defaults to the span of the log.
#[pyfunction]
#[pyo3(signature = (jsonl, days = None, config = None))]
fn cost_report(
    py: Python<'_>,
    jsonl: &str,
    days: Option<u32>,
    config: Option<&str>,
) -> PyResult<Py<PyAny>> {
    let entries = parse_log(jsonl)?;
    let cfg = load_config(config)?;
    let r = &cfg.recruiting;
    let report = deployment_cost_summary(
        &entries,
        days.unwrap_or_else(|| log_span_days(&entries)).max(1),
        &r.fee_schedule,
        r.base_pay,
        r.retainer_fee_percent,
    );
    to_py(py, &report)
}

#[pyfunction]
fn session_stats(py: Python<'_>, jsonl: &str) -> PyResult<Py<PyAny>> {
    to_py(py, &session_statistics(&parse_log(jsonl)?))
}

#[pyfunction(name = "worker_quality")]
fn py_worker_quality(py: Python<'_>, jsonl: &str) -> PyResult<Py<PyAny>> {
    to_py(
        py,
        &worker_quality(&parse_log(jsonl)?, &QualityThresholds::default()),
    )
}

#[pymodule]
fn chorus(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyChorus>()?;
    m.add("ChorusError", m.py().get_type::<ChorusError>())?;
    m.add_function(wrap_pyfunction!(py_acceptance_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(py_hit_base_cost, m)?)?;
    m.add_function(wrap_pyfunction!(run_scenario, m)?)?;
    m.add_function(wrap_pyfunction!(fuzz, m)?)?;
    m.add_function(wrap_pyfunction!(scenario_schema, m)?)?;
    m.add_function(wrap_pyfunction!(cost_report, m)?)?;
    m.add_function(wrap_pyfunction!(session_stats, m)?)?;
    m.add_function(wrap_pyfunction!(py_worker_quality, m)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use pyo3::types::PyDict;

    #[test]
    fn module_drives_a_conversation() {
        Python::initialize();
        Python::attach(|py| {
            let m = PyModule::new(py, "chorus").unwrap();
            chorus(&m).unwrap();
            let globals = PyDict::new(py);
            globals.set_item("chorus", m).unwrap();
            let code = c"
eng = chorus.Chorus()
sid = eng.user_message('u', 'hello', 1000)['session_id']
hit = eng.hits()[0]['hit_id']
eng.claim(hit, 'a', 2000)
eng.claim(hit, 'b', 3000)
mid = eng.propose(sid, 'a', 'hi!', 4000)
assert eng.events(0)[-1]['kind'] == 'MessageDelivered', eng.events(0)[-1]
assert [o['body'] for o in eng.drain_outbox() if o['message_id'] == mid] == ['hi!']
try:
    eng.propose(sid, 'zed', 'x', 5000)
    raise AssertionError('expected refusal')
except chorus.ChorusError:
    pass
assert chorus.acceptance_threshold(3) == 2
assert eng.check_invariants() == []
";
            py.run(code, Some(&globals), None).unwrap();
        });
    }
}
