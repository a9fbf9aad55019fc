use std::collections::BTreeMap;
use std::fmt::Write as _;

use chrono::{DateTime, Datelike, NaiveDate, TimeZone, Utc};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clock::{Millis, DAY, MINUTE};
use crate::cv::MotionVerdict;
use crate::protocol::ErrorCode;

use super::report::{CheckReport, CvVerdict, FailReason};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DayStatus {
    /// Every reading passed.
    Online,
    /// Something failed at least once but the hardware was not down all day.
    Partial,
    /// The hardware was down in every reading.
    Offline,
    /// No readings for the day.
    NoData,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DailyStatus {
    pub date: NaiveDate,
    pub experiment_id: String,
    pub status: DayStatus,
    pub readings: Vec<String>,
}

pub fn report_date(report: &CheckReport) -> Option<NaiveDate> {
    let ms = report.started_at()?;
    DateTime::<Utc>::from_timestamp_millis(ms as i64).map(|d| d.date_naive())
}

/// Classifies one experiment-day from its readings.
pub fn aggregate_daily(date: NaiveDate, experiment_id: &str, readings: &[&CheckReport]) -> DailyStatus {
    let status = if readings.is_empty() {
        DayStatus::NoData
    } else if readings.iter().all(|r| r.passed()) {
        DayStatus::Online
    } else if readings.iter().all(|r| r.hardware_down) {
        DayStatus::Offline
    } else {
        DayStatus::Partial
    };
    DailyStatus {
        date,
        experiment_id: experiment_id.to_string(),
        status,
        readings: readings.iter().map(|r| r.report_id.clone()).collect(),
    }
}

/// One status per experiment and calendar day (UTC), including no-data days
/// between an experiment's first and last reading.
pub fn daily_statuses(reports: &[CheckReport]) -> Vec<DailyStatus> {
    let mut by_exp: BTreeMap<&str, BTreeMap<NaiveDate, Vec<&CheckReport>>> = BTreeMap::new();
    for r in reports {
        if let Some(d) = report_date(r) {
            by_exp.entry(&r.experiment_id).or_default().entry(d).or_default().push(r);
        }
    }
    let mut out = Vec::new();
    for (exp, days) in by_exp {
        let (Some(first), Some(last)) = (days.keys().next().copied(), days.keys().next_back().copied()) else {
            continue;
        };
        for date in first.iter_days().take_while(|d| *d <= last) {
            let readings = days.get(&date).map(Vec::as_slice).unwrap_or(&[]);
            out.push(aggregate_daily(date, exp, readings));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub online: u32,
    pub partial: u32,
    pub offline: u32,
    pub no_data: u32,
}

impl Counts {
    fn add(&mut self, s: DayStatus) {
        match s {
            DayStatus::Online => self.online += 1,
            DayStatus::Partial => self.partial += 1,
            DayStatus::Offline => self.offline += 1,
            DayStatus::NoData => self.no_data += 1,
        }
    }

    fn merge(&mut self, o: &Counts) {
        self.online += o.online;
        self.partial += o.partial;
        self.offline += o.offline;
        self.no_data += o.no_data;
    }

    /// Days with at least one reading.
    pub fn days(&self) -> u32 {
        self.online + self.partial + self.offline
    }

    /// Online days over days with readings, in percent.
    pub fn online_percent(&self) -> f64 {
        match self.days() {
            0 => 0.0,
            d => 100.0 * self.online as f64 / d as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonthUptime {
    pub month: String,
    pub counts: Counts,
    pub online_percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentUptime {
    pub experiment_id: String,
    pub counts: Counts,
    pub days: u32,
    pub online_percent: f64,
    pub months: Vec<MonthUptime>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UptimeSummary {
    pub experiments: Vec<ExperimentUptime>,
    pub fleet: Counts,
    pub fleet_days: u32,
    pub fleet_online_percent: f64,
}

/// Per-experiment, per-month and fleet availability. `None` for an empty ledger.
pub fn uptime_summary(reports: &[CheckReport]) -> Option<UptimeSummary> {
    let days = daily_statuses(reports);
    if days.is_empty() {
        return None;
    }
    let mut per_exp: BTreeMap<&str, BTreeMap<String, Counts>> = BTreeMap::new();
    for d in &days {
        let month = format!("{:04}-{:02}", d.date.year(), d.date.month());
        per_exp
            .entry(&d.experiment_id)
            .or_default()
            .entry(month)
            .or_default()
            .add(d.status);
    }
    let mut fleet = Counts::default();
    let experiments = per_exp
        .into_iter()
        .map(|(exp, months)| {
            let mut counts = Counts::default();
            for c in months.values() {
                counts.merge(c);
            }
            fleet.merge(&counts);
            ExperimentUptime {
                experiment_id: exp.to_string(),
                counts,
                days: counts.days(),
                online_percent: counts.online_percent(),
                months: months
                    .into_iter()
                    .map(|(month, counts)| MonthUptime {
                        month,
                        counts,
                        online_percent: counts.online_percent(),
                    })
                    .collect(),
            }
        })
        .collect();
    Some(UptimeSummary {
        experiments,
        fleet,
        fleet_days: fleet.days(),
        fleet_online_percent: fleet.online_percent(),
    })
}

impl UptimeSummary {
    pub fn experiment(&self, id: &str) -> Option<&ExperimentUptime> {
        self.experiments.iter().find(|e| e.experiment_id == id)
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let row = |s: &mut String, a: &str, b: &str, c: &Counts| {
            let _ = writeln!(
                s,
                "{a:<12} {b:<8} {:>7} {:>8} {:>8} {:>8} {:>8.1}",
                c.online,
                c.partial,
                c.offline,
                c.no_data,
                c.online_percent()
            );
        };
        let _ = writeln!(
            s,
            "{:<12} {:<8} {:>7} {:>8} {:>8} {:>8} {:>8}",
            "experiment", "month", "online", "partial", "offline", "no-data", "online%"
        );
        for e in &self.experiments {
            for m in &e.months {
                row(&mut s, &e.experiment_id, &m.month, &m.counts);
            }
            row(&mut s, &e.experiment_id, "total", &e.counts);
        }
        row(&mut s, "fleet", "total", &self.fleet);
        s
    }
}

/// Day counts one synthetic experiment should end up with.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DayPlan {
    pub experiment_id: String,
    pub online: u32,
    pub partial: u32,
    pub offline: u32,
}

fn synthetic_reading(exp: &str, at: Millis, kind: u8, rng: &mut ChaCha8Rng) -> CheckReport {
    let mut r = CheckReport::new(exp, at);
    r.attempts = 1;
    r.stream_ok = true;
    r.cloud_connected = true;
    r.first_frame_ms = Some(rng.random_range(300..2500));
    let motion = |pass: bool, observed: Option<f64>| CvVerdict::Motion {
        input: serde_json::Value::Null,
        verdict: MotionVerdict {
            commanded_mm: 5.0,
            observed_mm: observed,
            tolerance_mm: 0.5,
            pass,
            trace: vec![],
        },
    };
    match kind {
        // healthy
        0 => r.cv_verdicts.push(motion(true, Some(5.0))),
        // stream outage
        1 => r.stream_ok = false,
        // motion off
        2 => r.cv_verdicts.push(motion(false, Some(2.0))),
        // error pin set
        3 => {
            r.cv_verdicts.push(motion(true, Some(5.0)));
            r.error_code = Some(ErrorCode::E02);
        }
        // hardware unreachable: no node passes the availability check
        4 => {
            r.stream_ok = false;
            r.cloud_connected = false;
            r.first_frame_ms = None;
            r.refusal = Some(FailReason::ExperimentOffline);
            r.hardware_down = true;
        }
        // hardware unreachable: cloud link gone
        _ => {
            r.stream_ok = false;
            r.cloud_connected = false;
            r.first_frame_ms = None;
            r.hardware_down = true;
        }
    }
    r.finalize();
    r
}

/// Builds reading streams whose daily aggregation matches `plans` exactly.
/// Day categories are shuffled with `seed`; readings are spread evenly over
/// each day with a few minutes of jitter.
pub fn synthetic_ledger(plans: &[DayPlan], start: NaiveDate, readings_per_day: u32, seed: u64) -> Vec<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = readings_per_day.max(1) as usize;
    let slot = DAY / n as Millis;
    let mut out = Vec::new();
    for plan in plans {
        let mut days: Vec<DayStatus> = std::iter::repeat_n(DayStatus::Online, plan.online as usize)
            .chain(std::iter::repeat_n(DayStatus::Partial, plan.partial as usize))
            .chain(std::iter::repeat_n(DayStatus::Offline, plan.offline as usize))
            .collect();
        days.shuffle(&mut rng);
        for (i, status) in days.into_iter().enumerate() {
            let date = start + chrono::Days::new(i as u64);
            let midnight = Utc
                .from_utc_datetime(&date.and_hms_opt(0, 0, 0).expect("midnight"))
                .timestamp_millis() as Millis;
            let kinds: Vec<u8> = match status {
                DayStatus::Online | DayStatus::NoData => vec![0; n],
                DayStatus::Offline => (0..n).map(|_| rng.random_range(4..=5)).collect(),
                DayStatus::Partial => {
                    let mut k: Vec<u8> = (0..n)
                        .map(|_| if rng.random_bool(0.5) { 0 } else { rng.random_range(1..=5) })
                        .collect();
                    if k.iter().all(|&x| x == 0) {
                        let i = rng.random_range(0..n);
                        k[i] = rng.random_range(1..=5);
                    }
                    if k.iter().all(|&x| x >= 4) {
                        let i = rng.random_range(0..n);
                        k[i] = rng.random_range(0..=3);
                    }
                    k
                }
            };
            for (j, kind) in kinds.into_iter().enumerate() {
                let at = midnight + j as Millis * slot + rng.random_range(0..10 * MINUTE);
                out.push(synthetic_reading(&plan.experiment_id, at, kind, &mut rng));
            }
        }
    }
    out.sort_by(|a, b| a.timestamp.cmp(&b.timestamp).then_with(|| a.experiment_id.cmp(&b.experiment_id)));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reading(kind: u8) -> CheckReport {
        synthetic_reading("VR", 0, kind, &mut ChaCha8Rng::seed_from_u64(0))
    }

    fn day(kinds: &[u8]) -> DayStatus {
        let rs: Vec<CheckReport> = kinds.iter().map(|&k| reading(k)).collect();
        let refs: Vec<&CheckReport> = rs.iter().collect();
        aggregate_daily(NaiveDate::from_ymd_opt(2024, 1, 1).unwrap(), "VR", &refs).status
    }

    #[test]
    fn category_rules() {
        assert_eq!(day(&[0, 0, 0]), DayStatus::Online);
        assert_eq!(day(&[0, 1, 0]), DayStatus::Partial);
        assert_eq!(day(&[4, 5, 4]), DayStatus::Offline);
        assert_eq!(day(&[4, 1, 4]), DayStatus::Partial);
        assert_eq!(day(&[]), DayStatus::NoData);
    }

    #[test]
    fn gaps_become_no_data_days() {
        let a = synthetic_reading("FL", 0, 0, &mut ChaCha8Rng::seed_from_u64(1));
        let b = synthetic_reading("FL", 3 * DAY, 0, &mut ChaCha8Rng::seed_from_u64(1));
        let days = daily_statuses(&[a, b]);
        let st: Vec<DayStatus> = days.iter().map(|d| d.status).collect();
        assert_eq!(st, [DayStatus::Online, DayStatus::NoData, DayStatus::NoData, DayStatus::Online]);
        let s = uptime_summary(&[]).is_none();
        assert!(s);
    }

    #[test]
    fn synthetic_plan_round_trips() {
        let plans = [DayPlan {
            experiment_id: "VR".into(),
            online: 20,
            partial: 5,
            offline: 4,
        }];
        let start = NaiveDate::from_ymd_opt(2024, 2, 20).unwrap();
        let ledger = synthetic_ledger(&plans, start, 3, 11);
        assert_eq!(ledger.len(), 29 * 3);
        let s = uptime_summary(&ledger).unwrap();
        let c = s.experiment("VR").unwrap().counts;
        assert_eq!((c.online, c.partial, c.offline, c.no_data), (20, 5, 4, 0));
        assert_eq!(s.experiment("VR").unwrap().months.len(), 2);
        assert!(s.to_table().contains("fleet"));
    }
}
