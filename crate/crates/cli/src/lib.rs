//! Shared pieces of the `chorus-sim` and `chorus-stats` binaries.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{Context, Result};
use chorus_core::analytics::{
    deployment_cost_summary, log_span_days, session_statistics, session_summaries, worker_quality,
    CostReport, QualityThresholds, SessionStats, WorkerQuality,
};
use chorus_core::{ChorusConfig, EventLog, EventLogEntry};
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Report {
    Cost,
    Sessions,
    Workers,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Text,
    Json,
    Csv,
}

pub fn read_log(path: &Path) -> Result<EventLog> {
    let file = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    EventLog::read_jsonl(std::io::BufReader::new(file))
        .with_context(|| format!("reading {}", path.display()))
}

pub fn cost_report(entries: &[EventLogEntry], days: u32, cfg: &ChorusConfig) -> CostReport {
    deployment_cost_summary(
        entries,
        days,
        &cfg.recruiting.fee_schedule,
        cfg.recruiting.base_pay,
        cfg.recruiting.retainer_fee_percent,
    )
}

pub fn render(
    entries: &[EventLogEntry],
    report: Report,
    format: Format,
    days: Option<u32>,
    cfg: &ChorusConfig,
) -> Result<String> {
    match report {
        Report::Cost => {
            let r = cost_report(entries, days.unwrap_or_else(|| log_span_days(entries)), cfg);
            match format {
                Format::Json => Ok(serde_json::to_string_pretty(&r)? + "\n"),
                Format::Csv => csv_rows(r.per_hit.iter().map(|h| HitRow {
                    hit_id: h.hit_id.to_string(),
                    session_id: h.session_id.map(|s| s.to_string()).unwrap_or_default(),
                    assignments: h.assignments,
                    fee_percent: h.fee_percent,
                    base_cents: h.base.0,
                    fee_cents: h.fee.0,
                    bonus_cents: h.bonus.0,
                    retainer_cents: h.retainer.0,
                    total_cents: h.total.0,
                })),
                Format::Text => Ok(cost_text(&r)),
            }
        }
        Report::Sessions => match format {
            Format::Json => Ok(serde_json::to_string_pretty(&session_statistics(entries))? + "\n"),
            Format::Csv => csv_rows(session_summaries(entries).into_iter().map(|s| {
                SessionRow {
                    session_id: s.session_id.to_string(),
                    user_id: s.user_id.to_string(),
                    opened_ms: s.opened_at.0,
                    closed_ms: s.closed_at.map(|t| t.0),
                    close_reason: s
                        .close_reason
                        .map(|r| format!("{r:?}").to_lowercase())
                        .unwrap_or_default(),
                    duration_secs: s.duration_secs,
                    messages: s.messages(),
                    user_messages: s.user_messages,
                    crowd_messages: s.crowd_messages,
                    rejected: s.rejected,
                    workers: s.workers,
                    first_response_secs: s.first_response_secs,
                }
            })),
            Format::Text => Ok(sessions_text(&session_statistics(entries))),
        },
        Report::Workers => {
            let q = worker_quality(entries, &QualityThresholds::default());
            match format {
                Format::Json => Ok(serde_json::to_string_pretty(&q)? + "\n"),
                Format::Csv => csv_rows(q.iter().map(WorkerRow::from)),
                Format::Text => Ok(workers_text(&q)),
            }
        }
    }
}

#[derive(Serialize)]
struct HitRow {
    hit_id: String,
    session_id: String,
    assignments: u32,
    fee_percent: u32,
    base_cents: i64,
    fee_cents: i64,
    bonus_cents: i64,
    retainer_cents: i64,
    total_cents: i64,
}

#[derive(Serialize)]
struct SessionRow {
    session_id: String,
    user_id: String,
    opened_ms: u64,
    closed_ms: Option<u64>,
    close_reason: String,
    duration_secs: f64,
    messages: u32,
    user_messages: u32,
    crowd_messages: u32,
    rejected: u32,
    workers: u32,
    first_response_secs: Option<f64>,
}

#[derive(Serialize)]
struct WorkerRow {
    worker_id: String,
    sessions: u32,
    proposals: u32,
    accepted: u32,
    acceptance_ratio: Option<f64>,
    fact_posts: u32,
    fact_spam_score: f64,
    vote_count: u32,
    vote_rate_per_minute: f64,
    vote_sweep_sessions: u32,
    flags: String,
}

impl From<&WorkerQuality> for WorkerRow {
    fn from(q: &WorkerQuality) -> Self {
        Self {
            worker_id: q.worker_id.to_string(),
            sessions: q.sessions,
            proposals: q.proposals,
            accepted: q.accepted,
            acceptance_ratio: q.acceptance_ratio,
            fact_posts: q.fact_posts,
            fact_spam_score: q.fact_spam_score,
            vote_count: q.vote_count,
            vote_rate_per_minute: q.vote_rate_per_minute,
            vote_sweep_sessions: q.vote_sweep_sessions,
            flags: flag_list(q),
        }
    }
}

fn flag_list(q: &WorkerQuality) -> String {
    q.flags
        .iter()
        .map(|f| {
            serde_json::to_value(f)
                .ok()
                .and_then(|v| v.as_str().map(str::to_owned))
        })
        .map(|f| f.unwrap_or_default())
        .collect::<Vec<_>>()
        .join(";")
}

fn csv_rows<T: Serialize>(rows: impl IntoIterator<Item = T>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

fn cost_text(r: &CostReport) -> String {
    let t = &r.totals;
    let mut s = String::new();
    let _ = writeln!(s, "sessions          {}", r.sessions);
    let _ = writeln!(s, "hits              {}", r.per_hit.len());
    let _ = writeln!(s, "base (with fee)   {}", t.base);
    let _ = writeln!(s, "  of which fee    {}", t.fee);
    let _ = writeln!(s, "bonus             {}", t.bonus);
    let _ = writeln!(s, "retainer          {}", t.retainer);
    let _ = writeln!(s, "grand total       {}", t.grand);
    let _ = writeln!(
        s,
        "base per day      {} over {} days",
        r.per_day, r.period_days
    );
    let _ = writeln!(s, "mean per session  {}", r.mean_per_session);
    s
}

fn sessions_text(st: &SessionStats) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "sessions             {}", st.n_sessions);
    let _ = writeln!(
        s,
        "duration (min)       {:.2} (sd {:.2})",
        st.duration_mean_min, st.duration_sd_min
    );
    let _ = writeln!(
        s,
        "messages             {:.2} (sd {:.2})",
        st.messages_mean, st.messages_sd
    );
    let _ = writeln!(
        s,
        "  from user          {:.2} (sd {:.2})",
        st.user_messages_mean, st.user_messages_sd
    );
    let _ = writeln!(
        s,
        "  from crowd         {:.2} (sd {:.2})",
        st.crowd_messages_mean, st.crowd_messages_sd
    );
    let _ = writeln!(
        s,
        "rejected proposals   {:.2} (sd {:.2})",
        st.rejected_mean, st.rejected_sd
    );
    let _ = writeln!(
        s,
        "within 10 min        {:.1}%",
        st.share_within_10_min * 100.0
    );
    let _ = writeln!(s, "answered sessions    {}", st.sessions_with_response);
    if let Some(m) = st.first_response_mean_secs {
        let _ = writeln!(s, "first response mean  {m:.2} s");
    }
    for q in &st.first_response_quantiles {
        let _ = writeln!(s, "  p{:<4} {:>8.1} s", q.percentile, q.secs);
    }
    for (w, share) in &st.first_response_within {
        let _ = writeln!(s, "  <= {w:>4} s  {:.1}%", share * 100.0);
    }
    s
}

fn workers_text(q: &[WorkerQuality]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<16} {:>5} {:>6} {:>7} {:>6} {:>6} {:>6}  flags",
        "worker", "sess", "props", "accept", "facts", "votes", "sweeps"
    );
    for w in q {
        let ratio = w
            .acceptance_ratio
            .map(|r| format!("{r:.2}"))
            .unwrap_or_else(|| "-".into());
        let _ = writeln!(
            s,
            "{:<16} {:>5} {:>6} {:>7} {:>6} {:>6} {:>6}  {}",
            w.worker_id.as_str(),
            w.sessions,
            w.proposals,
            ratio,
            w.fact_posts,
            w.vote_count,
            w.vote_sweep_sessions,
            flag_list(w)
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use chorus_core::sim::{fuzz_scenario, run_scenario};

    fn log() -> Vec<EventLogEntry> {
        run_scenario(&fuzz_scenario(4)).unwrap().log.into_entries()
    }

    #[test]
    fn every_report_renders_in_every_format() {
        let entries = log();
        let cfg = ChorusConfig::default();
        for report in [Report::Cost, Report::Sessions, Report::Workers] {
            for format in [Format::Text, Format::Json, Format::Csv] {
                let out = render(&entries, report, format, None, &cfg).unwrap();
                assert!(!out.is_empty(), "{report:?} {format:?}");
                if format == Format::Json {
                    serde_json::from_str::<serde_json::Value>(&out).unwrap();
                }
            }
        }
    }

    #[test]
    fn session_csv_has_one_row_per_session() {
        let entries = log();
        let out = render(
            &entries,
            Report::Sessions,
            Format::Csv,
            None,
            &ChorusConfig::default(),
        )
        .unwrap();
        let n = session_summaries(&entries).len();
        assert_eq!(out.lines().count(), n + 1);
        assert!(out.starts_with("session_id,user_id,"));
    }

    #[test]
    fn days_cover_the_log() {
        use chorus_core::time::DAY_MS;
        assert_eq!(log_span_days(&[]), 1);
        let entries = log();
        let span = entries.last().unwrap().at.since(entries[0].at);
        let days = u64::from(log_span_days(&entries));
        assert!(days * DAY_MS >= span && (days - 1) * DAY_MS < span.max(1));
    }
}
