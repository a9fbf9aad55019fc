//! The virtual user: logs in, takes a node, drives it through a short
//! actuation script, judges the video with the CV pipeline, reads the error
//! pin and files a [`CheckReport`].

pub mod availability;
pub mod ledger;
pub mod notify;
pub mod report;
pub mod schedule;

use std::collections::{BTreeMap, HashMap};
use std::sync::Mutex;

use thiserror::Error;

use crate::clock::Millis;
use crate::config::{ExperimentConfig, PlatformConfig, TesterConfig};
use crate::cv::{
    calibrate_mm_per_px, detect_moves, ssim, track_displacement, verify_motion, Axis, CvParams, MotionVerdict,
    Tracking,
};
use crate::image::{Frame, GrayImage, Roi};
use crate::orchestrator::{ApiError, EntryStatus, OutputSnapshot};
use crate::physics::{ExperimentKind, ExperimentState, RenderConfig};
use crate::protocol::{Direction, ErrorCode, InputParams, Target};
use crate::sim::World;

pub use availability::{
    aggregate_daily, daily_statuses, synthetic_ledger, uptime_summary, DailyStatus, DayPlan, DayStatus, UptimeSummary,
};
pub use ledger::{load_ledger, Ledger, LedgerError};
pub use notify::{read_notifications, Delivery, DeliveryRecord, Notification, Notifier, WebhookTransport};
pub use report::{CheckReport, CvVerdict, FailReason, Verdict};
pub use schedule::Scheduler;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClientError {
    #[error(transparent)]
    Api(#[from] ApiError),
    #[error("transport: {0}")]
    Transport(String),
}

/// Everything a browser user can do, as seen by the virtual user.
pub trait LabClient {
    fn now_ms(&mut self) -> Millis;
    /// Lets `ms` pass, in whatever time the client runs on.
    fn wait(&mut self, ms: Millis);
    fn login(&mut self, username: &str, secret: &str) -> Result<String, ClientError>;
    fn logout(&mut self, _token: &str) {}
    fn register_peer(&mut self, peer_id: &str) -> Result<(), ClientError>;
    fn unregister_peer(&mut self, peer_id: &str);
    fn enter(&mut self, token: &str, exp_id: &str, peer_id: &str) -> Result<EntryStatus, ClientError>;
    fn status(&mut self, token: &str, exp_id: &str) -> Result<EntryStatus, ClientError>;
    fn input(&mut self, token: &str, exp_id: &str, params: &serde_json::Value) -> Result<(), ClientError>;
    fn output(&mut self, token: &str, exp_id: &str) -> Result<OutputSnapshot, ClientError>;
    fn leave(&mut self, token: &str, exp_id: &str) -> Result<(), ClientError>;
    /// Frames that reached `peer_id` since the last call.
    fn take_frames(&mut self, peer_id: &str) -> Result<Vec<Frame>, ClientError>;
}

impl LabClient for World {
    fn now_ms(&mut self) -> Millis {
        self.now()
    }

    fn wait(&mut self, ms: Millis) {
        self.advance(ms);
    }

    fn login(&mut self, username: &str, secret: &str) -> Result<String, ClientError> {
        Ok(World::login(self, username, secret)?)
    }

    fn logout(&mut self, token: &str) {
        World::logout(self, token);
    }

    fn register_peer(&mut self, peer_id: &str) -> Result<(), ClientError> {
        World::register_peer(self, peer_id).map_err(|e| ClientError::Transport(e.to_string()))
    }

    fn unregister_peer(&mut self, peer_id: &str) {
        World::unregister_peer(self, peer_id);
    }

    fn enter(&mut self, token: &str, exp_id: &str, peer_id: &str) -> Result<EntryStatus, ClientError> {
        Ok(World::enter(self, token, exp_id, peer_id)?)
    }

    fn status(&mut self, token: &str, exp_id: &str) -> Result<EntryStatus, ClientError> {
        Ok(World::status(self, token, exp_id)?)
    }

    fn input(&mut self, token: &str, exp_id: &str, params: &serde_json::Value) -> Result<(), ClientError> {
        Ok(World::input(self, token, exp_id, params)?)
    }

    fn output(&mut self, token: &str, exp_id: &str) -> Result<OutputSnapshot, ClientError> {
        Ok(World::output(self, token, exp_id)?)
    }

    fn leave(&mut self, token: &str, exp_id: &str) -> Result<(), ClientError> {
        Ok(World::leave(self, token, exp_id)?)
    }

    fn take_frames(&mut self, peer_id: &str) -> Result<Vec<Frame>, ClientError> {
        Ok(World::take_frames(self, peer_id).into_iter().map(|d| d.frame).collect())
    }
}

const POLL_MS: Millis = 100;
/// How long an entry may stay pending before the run gives up on it.
const PENDING_LIMIT_MS: Millis = 15_000;

/// Which camera and which part of it the checks look at.
#[derive(Debug, Clone, Copy)]
struct View {
    camera: &'static str,
    fiducial: Roi,
    fiducial_mm: f64,
    tracking: Roi,
    axis: Axis,
    tolerance_mm: f64,
}

pub struct Tester {
    cfg: TesterConfig,
    render: RenderConfig,
    cv: CvParams,
    experiments: BTreeMap<String, ExperimentConfig>,
    baselines: Mutex<HashMap<String, GrayImage>>,
    notifier: Option<Notifier>,
    ledger: Option<Ledger>,
}

impl std::fmt::Debug for Tester {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tester")
            .field("user", &self.cfg.username)
            .field("experiments", &self.experiments.keys().collect::<Vec<_>>())
            .finish_non_exhaustive()
    }
}

enum Entry {
    Granted(String),
    Refused(FailReason),
}

fn pin_f64(out: &OutputSnapshot, pin: &str) -> Option<f64> {
    match out.pins.get(pin)? {
        serde_json::Value::Number(n) => n.as_f64(),
        serde_json::Value::String(s) => s.parse().ok(),
        _ => None,
    }
}

fn error_pin(out: &OutputSnapshot) -> Option<ErrorCode> {
    let text = match out.pins.get(crate::cloud::pins::ERROR)? {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    };
    ErrorCode::ALL.into_iter().find(|c| c.as_str() == text.trim())
}

impl Tester {
    /// A tester with no ledger and no notification sink.
    pub fn new(cfg: &PlatformConfig) -> Self {
        Self {
            cfg: cfg.tester.clone(),
            render: cfg.render.clone(),
            cv: CvParams::default(),
            experiments: cfg.experiments.iter().map(|e| (e.id.clone(), e.clone())).collect(),
            baselines: Mutex::new(HashMap::new()),
            notifier: None,
            ledger: None,
        }
    }

    /// A tester writing to the configured ledger and sink.
    pub fn from_config(cfg: &PlatformConfig) -> Self {
        Self::new(cfg)
            .with_notifier(Notifier::new(cfg.sink.clone()))
            .with_ledger(Ledger::new(cfg.tester.ledger_path.clone()))
    }

    pub fn with_notifier(mut self, notifier: Notifier) -> Self {
        self.notifier = Some(notifier);
        self
    }

    pub fn with_ledger(mut self, ledger: Ledger) -> Self {
        self.ledger = Some(ledger);
        self
    }

    pub fn notifier(&self) -> Option<&Notifier> {
        self.notifier.as_ref()
    }

    pub fn ledger(&self) -> Option<&Ledger> {
        self.ledger.as_ref()
    }

    pub fn config(&self) -> &TesterConfig {
        &self.cfg
    }

    pub fn experiment_ids(&self) -> Vec<String> {
        self.experiments.keys().cloned().collect()
    }

    /// Stores the water-crop reference for a node ahead of the first run.
    pub fn set_baseline(&self, node_id: &str, crop: GrayImage) {
        self.baselines.lock().unwrap().insert(node_id.to_string(), crop);
    }

    fn view(&self, kind: ExperimentKind) -> View {
        let r = &self.render;
        match kind {
            ExperimentKind::FocalLength => View {
                camera: "side",
                fiducial: r.side.fiducial_roi(r),
                fiducial_mm: r.side.fiducial_mm,
                tracking: r.side.tracking_roi(r),
                axis: Axis::X,
                tolerance_mm: self.cfg.fl_tolerance_mm,
            },
            ExperimentKind::VanishingRod => View {
                camera: "beakers",
                fiducial: r.beakers.fiducial_roi(r),
                fiducial_mm: r.beakers.fiducial_mm,
                tracking: r.beakers.tracking_roi(r),
                axis: Axis::Y,
                tolerance_mm: self.cfg.vr_tolerance_mm,
            },
        }
    }

    /// Runs one full check, then notifies and appends to the ledger.
    pub fn run_check(&self, client: &mut dyn LabClient, experiment_id: &str) -> CheckReport {
        let report = self.check(client, experiment_id);
        if let Some(n) = &self.notifier {
            if let Err(e) = n.notify(&report) {
                tracing::error!(report = %report.report_id, error = %e, "notification failed");
            }
        }
        if let Some(l) = &self.ledger {
            if let Err(e) = l.append(&report) {
                tracing::error!(report = %report.report_id, error = %e, "ledger append failed");
            }
        }
        report
    }

    /// Runs one full check without side effects on the ledger or sink.
    pub fn check(&self, client: &mut dyn LabClient, experiment_id: &str) -> CheckReport {
        let started = client.now_ms();
        let mut report = CheckReport::new(experiment_id, started);
        let Some(exp) = self.experiments.get(experiment_id) else {
            report.refusal = Some(FailReason::Transport {
                detail: format!("unknown experiment {experiment_id}"),
            });
            report.finalize();
            return report;
        };
        let token = match client.login(&self.cfg.username, &self.cfg.secret) {
            Ok(t) => t,
            Err(e) => {
                report.refusal = Some(FailReason::Transport { detail: e.to_string() });
                report.finalize();
                return report;
            }
        };
        let peer = format!("vu-{experiment_id}-{started}");
        if let Err(e) = client.register_peer(&peer) {
            report.refusal = Some(FailReason::Transport { detail: e.to_string() });
        } else {
            self.exercise(client, &token, exp, &peer, &mut report);
            // leave even when something above failed, so no node stays held
            let _ = client.leave(&token, experiment_id);
            client.unregister_peer(&peer);
        }
        client.logout(&token);
        report.finalize();
        tracing::info!(
            report = %report.report_id,
            node = ?report.node_id,
            pass = report.passed(),
            reasons = ?report.reason_labels(),
            "check finished"
        );
        report
    }

    fn enter(&self, client: &mut dyn LabClient, token: &str, exp_id: &str, peer: &str, report: &mut CheckReport) -> Entry {
        for attempt in 1..=2 {
            report.attempts = attempt;
            let mut st = client.enter(token, exp_id, peer);
            let pending_since = client.now_ms();
            while let Ok(EntryStatus::Pending { .. }) = st {
                if client.now_ms() - pending_since > PENDING_LIMIT_MS {
                    break;
                }
                client.wait(POLL_MS);
                st = client.status(token, exp_id);
            }
            match st {
                Ok(EntryStatus::Granted { node_id, .. }) => return Entry::Granted(node_id),
                Ok(EntryStatus::Offline) | Err(ClientError::Api(ApiError::ExperimentOffline(_))) => {
                    return Entry::Refused(FailReason::ExperimentOffline);
                }
                Ok(EntryStatus::Queued { .. }) | Ok(EntryStatus::Pending { .. }) | Ok(EntryStatus::Idle) => {
                    let _ = client.leave(token, exp_id);
                    if attempt == 1 {
                        tracing::info!(experiment = %exp_id, backoff_ms = self.cfg.retry_backoff_ms, "all nodes busy, retrying");
                        client.wait(self.cfg.retry_backoff_ms);
                    }
                }
                Err(e) => return Entry::Refused(FailReason::Transport { detail: e.to_string() }),
            }
        }
        Entry::Refused(FailReason::EntryRefused)
    }

    fn exercise(&self, client: &mut dyn LabClient, token: &str, exp: &ExperimentConfig, peer: &str, report: &mut CheckReport) {
        let node_id = match self.enter(client, token, &exp.id, peer, report) {
            Entry::Granted(n) => n,
            Entry::Refused(reason) => {
                report.hardware_down = reason == FailReason::ExperimentOffline;
                report.refusal = Some(reason);
                return;
            }
        };
        report.node_id = Some(node_id.clone());
        let view = self.view(exp.kind);
        let camera = format!("{node_id}/{}", view.camera);
        let entered = client.now_ms();
        let mut frames = FrameWatch::new(peer, &camera);

        if let Some(first) = frames.wait_for(client, entered, entered + self.cfg.first_frame_timeout_ms) {
            report.first_frame_ms = Some(client.now_ms() - entered);
            match calibrate_mm_per_px(&first.image, view.fiducial, view.fiducial_mm) {
                Ok(mm_per_px) => {
                    report.stream_ok = true;
                    if exp.kind == ExperimentKind::VanishingRod {
                        report.cv_verdicts.push(self.water_check(&node_id, &first.image));
                    }
                    self.actuate(client, token, exp, view, mm_per_px, first, &mut frames, report);
                }
                Err(e) => tracing::warn!(node = %node_id, error = %e, "frame unusable for calibration"),
            }
        }

        match client.output(token, &exp.id) {
            Ok(out) => {
                report.cloud_connected = out.cloud_connected;
                report.error_code = error_pin(&out);
                report.hardware_down = !out.cloud_connected;
            }
            Err(e) => {
                tracing::warn!(node = %node_id, error = %e, "output unavailable");
                report.hardware_down = true;
            }
        }
    }

    fn water_check(&self, node_id: &str, frame: &GrayImage) -> CvVerdict {
        let crop = frame.crop_roi(self.render.beakers.water_crop());
        let threshold = self.cfg.ssim_threshold;
        let mut baselines = self.baselines.lock().unwrap();
        match baselines.get(node_id) {
            Some(base) => {
                let score = ssim(base, &crop).unwrap_or(0.0);
                CvVerdict::Ssim {
                    score,
                    threshold,
                    pass: score >= threshold,
                    baseline_set: false,
                }
            }
            None => {
                baselines.insert(node_id.to_string(), crop);
                CvVerdict::Ssim {
                    score: 1.0,
                    threshold,
                    pass: true,
                    baseline_set: true,
                }
            }
        }
    }

    /// Travel in mm a script step asks for, from the rig's nominal geometry.
    fn nominal_mm(exp: &ExperimentConfig, params: InputParams) -> f64 {
        match (exp.initial_state(), params) {
            (ExperimentState::FocalLength(b), InputParams::Lens { steps, .. }) => {
                let mm = b.steps_to_cm(steps.unsigned_abs().min(u32::MAX as u64) as u32) * 10.0;
                mm.copysign(steps as f64)
            }
            (ExperimentState::VanishingRod(r), InputParams::Rods { direction, steps }) => {
                let mm = r.drive().displacement_mm(steps as u64);
                match direction {
                    Direction::Down => mm,
                    Direction::Up => -mm,
                }
            }
            _ => 0.0,
        }
    }

    /// Pins that move with the command.
    fn position_pins(params: InputParams) -> &'static [&'static str] {
        use crate::cloud::pins::{POSITION_A, POSITION_B};
        match params {
            InputParams::Lens { target: Target::Object, .. } => &[POSITION_A],
            InputParams::Lens { target: Target::Screen, .. } => &[POSITION_B],
            InputParams::Rods { .. } => &[POSITION_A],
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn actuate(
        &self,
        client: &mut dyn LabClient,
        token: &str,
        exp: &ExperimentConfig,
        view: View,
        mm_per_px: f64,
        first: Frame,
        frames: &mut FrameWatch,
        report: &mut CheckReport,
    ) {
        let script = match exp.kind {
            ExperimentKind::FocalLength => &self.cfg.fl_script,
            ExperimentKind::VanishingRod => &self.cfg.vr_script,
        };
        let pin_scale = match exp.kind {
            ExperimentKind::FocalLength => 10.0,
            ExperimentKind::VanishingRod => 1.0,
        };
        let mut before = first;
        for step in script {
            let Ok(params) = InputParams::parse(exp.kind, step) else {
                continue;
            };
            let pins = Self::position_pins(params);
            let read = |client: &mut dyn LabClient| -> Option<Vec<f64>> {
                let out = client.output(token, &exp.id).ok()?;
                pins.iter().map(|p| pin_f64(&out, p)).collect()
            };
            let pins_before = read(client);
            if let Err(e) = client.input(token, &exp.id, step) {
                tracing::warn!(error = %e, "input rejected");
                report.cv_verdicts.push(self.motion(step, Self::nominal_mm(exp, params), view, &Tracking::default()));
                return;
            }
            let sent = client.now_ms();
            let mut pins_after = pins_before.clone();
            while client.now_ms() - sent < self.cfg.command_timeout_ms {
                client.wait(POLL_MS);
                pins_after = read(client);
                if pins_after != pins_before {
                    break;
                }
            }
            let commanded = match (&pins_before, &pins_after) {
                (Some(b), Some(a)) if a != b => a.iter().zip(b).map(|(a, b)| (a - b) * pin_scale).sum(),
                _ => Self::nominal_mm(exp, params),
            };
            let settled = client.now_ms();
            let Some(after) = frames.wait_for(client, settled, settled + self.cfg.first_frame_timeout_ms) else {
                report.stream_ok = false;
                return;
            };
            let tracking = detect_moves(&before.image, &after.image, view.tracking, &self.cv)
                .and_then(|m| track_displacement(&m.vacated, &m.appeared, mm_per_px))
                .unwrap_or_default();
            report.cv_verdicts.push(self.motion(step, commanded, view, &tracking));
            before = after;
        }
    }

    fn motion(&self, step: &serde_json::Value, commanded_mm: f64, view: View, tracking: &Tracking) -> CvVerdict {
        let verdict: MotionVerdict = verify_motion(commanded_mm, view.axis, tracking, view.tolerance_mm);
        CvVerdict::Motion {
            input: step.clone(),
            verdict,
        }
    }
}

/// Keeps the newest frame of one camera as frames trickle in.
struct FrameWatch {
    peer: String,
    camera: String,
    latest: Option<Frame>,
}

impl FrameWatch {
    fn new(peer: &str, camera: &str) -> Self {
        Self {
            peer: peer.to_string(),
            camera: camera.to_string(),
            latest: None,
        }
    }

    fn drain(&mut self, client: &mut dyn LabClient) {
        for f in client.take_frames(&self.peer).unwrap_or_default() {
            if f.camera_id == self.camera && self.latest.as_ref().is_none_or(|l| f.timestamp_ms >= l.timestamp_ms) {
                self.latest = Some(f);
            }
        }
    }

    /// Newest frame captured at or after `captured_after`, waiting until `deadline`.
    fn wait_for(&mut self, client: &mut dyn LabClient, captured_after: Millis, deadline: Millis) -> Option<Frame> {
        loop {
            self.drain(client);
            if let Some(f) = self.latest.as_ref().filter(|f| f.timestamp_ms >= captured_after) {
                return Some(f.clone());
            }
            let now = client.now_ms();
            if now >= deadline {
                return None;
            }
            client.wait(POLL_MS.min(deadline - now));
        }
    }
}

/// Drives `world` through scheduled checks of every experiment from now
/// until `until` (exclusive) and returns the reports in run order.
pub fn run_scheduled(world: &mut World, tester: &Tester, interval_ms: Millis, until: Millis) -> Vec<CheckReport> {
    let mut sched = match Scheduler::new(interval_ms, world.now(), tester.experiment_ids()) {
        Ok(s) => s,
        Err(_) => return Vec::new(),
    };
    let mut reports = Vec::new();
    while sched.next_fire() < until {
        let t = sched.next_fire().max(world.now());
        world.run_until(t);
        for exp in sched.poll(t) {
            reports.push(tester.run_check(world, &exp));
            sched.finished(&exp);
        }
    }
    reports
}

#[cfg(test)]
mod tests;
