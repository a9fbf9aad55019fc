use serde::{Deserialize, Serialize};

use crate::clock::{iso8601, parse_iso8601, Millis};
use crate::cv::MotionVerdict;
use crate::protocol::ErrorCode;

/// One image-based check inside a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "check", rename_all = "snake_case")]
pub enum CvVerdict {
    Motion {
        input: serde_json::Value,
        #[serde(flatten)]
        verdict: MotionVerdict,
    },
    Ssim {
        score: f64,
        threshold: f64,
        pass: bool,
        /// Set on the first reading of a node, which stores the reference crop.
        #[serde(default)]
        baseline_set: bool,
    },
}

impl CvVerdict {
    pub fn pass(&self) -> bool {
        match self {
            CvVerdict::Motion { verdict, .. } => verdict.pass,
            CvVerdict::Ssim { pass, .. } => *pass,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum FailReason {
    /// No frame arrived in time.
    Stream,
    /// An object moved by the wrong amount.
    Motion,
    /// Nothing moved at all after a command.
    NoDetection,
    /// The scene drifted away from the stored reference.
    Ssim,
    CloudDisconnected,
    ErrorCode { code: ErrorCode },
    /// Every node stayed busy, even after the retry.
    EntryRefused,
    /// No node of the experiment passed the availability check.
    ExperimentOffline,
    /// The platform itself could not be reached.
    Transport { detail: String },
}

impl FailReason {
    pub fn label(&self) -> String {
        match self {
            FailReason::Stream => "stream".into(),
            FailReason::Motion => "motion".into(),
            FailReason::NoDetection => "no_detection".into(),
            FailReason::Ssim => "ssim".into(),
            FailReason::CloudDisconnected => "cloud_disconnected".into(),
            FailReason::ErrorCode { code } => format!("error_code {}", code.as_str()),
            FailReason::EntryRefused => "entry_refused".into(),
            FailReason::ExperimentOffline => "experiment_offline".into(),
            FailReason::Transport { .. } => "transport".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "result", rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail { reasons: Vec<FailReason> },
}

impl Verdict {
    pub fn is_pass(&self) -> bool {
        matches!(self, Verdict::Pass)
    }

    pub fn reasons(&self) -> &[FailReason] {
        match self {
            Verdict::Pass => &[],
            Verdict::Fail { reasons } => reasons,
        }
    }
}

/// Outcome of one virtual-user run against one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub report_id: String,
    pub experiment_id: String,
    /// ISO-8601 start time of the run.
    pub timestamp: String,
    #[serde(default)]
    pub node_id: Option<String>,
    pub stream_ok: bool,
    #[serde(default)]
    pub first_frame_ms: Option<Millis>,
    pub cv_verdicts: Vec<CvVerdict>,
    pub cloud_connected: bool,
    #[serde(default)]
    pub error_code: Option<ErrorCode>,
    /// Why the run never reached the hardware, when it didn't.
    #[serde(default)]
    pub refusal: Option<FailReason>,
    /// Leg (a) or (c) of the availability check failed for this reading.
    pub hardware_down: bool,
    pub attempts: u32,
    pub overall: Verdict,
}

impl CheckReport {
    pub fn new(experiment_id: &str, started_at: Millis) -> Self {
        Self {
            report_id: format!("{experiment_id}-{started_at}"),
            experiment_id: experiment_id.to_string(),
            timestamp: iso8601(started_at),
            node_id: None,
            stream_ok: false,
            first_frame_ms: None,
            cv_verdicts: Vec::new(),
            cloud_connected: false,
            error_code: None,
            refusal: None,
            hardware_down: false,
            attempts: 0,
            overall: Verdict::Pass,
        }
    }

    pub fn started_at(&self) -> Option<Millis> {
        parse_iso8601(&self.timestamp)
    }

    /// Recomputes `overall` from the observed fields.
    pub fn finalize(&mut self) {
        let mut reasons = Vec::new();
        if let Some(r) = &self.refusal {
            reasons.push(r.clone());
        }
        if !self.stream_ok && self.refusal.is_none() {
            reasons.push(FailReason::Stream);
        }
        for v in &self.cv_verdicts {
            let r = match v {
                CvVerdict::Motion { verdict, .. } if verdict.pass => continue,
                CvVerdict::Motion { verdict, .. } if verdict.no_detection() => FailReason::NoDetection,
                CvVerdict::Motion { .. } => FailReason::Motion,
                CvVerdict::Ssim { pass: true, .. } => continue,
                CvVerdict::Ssim { .. } => FailReason::Ssim,
            };
            if !reasons.contains(&r) {
                reasons.push(r);
            }
        }
        if !self.cloud_connected && self.refusal.is_none() {
            reasons.push(FailReason::CloudDisconnected);
        }
        if let Some(code) = self.error_code {
            reasons.push(FailReason::ErrorCode { code });
        }
        let healthy = self.refusal.is_none()
            && self.stream_ok
            && self.cv_verdicts.iter().all(CvVerdict::pass)
            && self.cloud_connected
            && self.error_code.is_none();
        debug_assert_eq!(healthy, reasons.is_empty());
        self.overall = if healthy { Verdict::Pass } else { Verdict::Fail { reasons } };
    }

    pub fn passed(&self) -> bool {
        self.overall.is_pass()
    }

    pub fn reason_labels(&self) -> Vec<String> {
        self.overall.reasons().iter().map(FailReason::label).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn motion(pass: bool, observed: Option<f64>) -> CvVerdict {
        CvVerdict::Motion {
            input: serde_json::json!({}),
            verdict: MotionVerdict {
                commanded_mm: 5.0,
                observed_mm: observed,
                tolerance_mm: 0.5,
                pass,
                trace: vec![],
            },
        }
    }

    #[test]
    fn healthy_report_passes() {
        let mut r = CheckReport::new("FL", 0);
        r.stream_ok = true;
        r.cloud_connected = true;
        r.cv_verdicts.push(motion(true, Some(5.0)));
        r.finalize();
        assert!(r.passed());
    }

    #[test]
    fn error_pin_alone_fails() {
        let mut r = CheckReport::new("FL", 0);
        r.stream_ok = true;
        r.cloud_connected = true;
        r.error_code = Some(ErrorCode::E02);
        r.finalize();
        assert_eq!(r.reason_labels(), ["error_code E02"]);
    }

    #[test]
    fn refusal_suppresses_derived_reasons() {
        let mut r = CheckReport::new("VR", 0);
        r.refusal = Some(FailReason::ExperimentOffline);
        r.finalize();
        assert_eq!(r.overall.reasons(), [FailReason::ExperimentOffline]);
    }

    #[test]
    fn json_round_trip() {
        let mut r = CheckReport::new("FL", 1_700_000_000_000);
        r.cv_verdicts.push(motion(false, None));
        r.cv_verdicts.push(CvVerdict::Ssim {
            score: 0.5,
            threshold: 0.98,
            pass: false,
            baseline_set: false,
        });
        r.finalize();
        let text = serde_json::to_string(&r).unwrap();
        assert_eq!(serde_json::from_str::<CheckReport>(&text).unwrap(), r);
        assert_eq!(r.started_at(), Some(1_700_000_000_000));
    }

    proptest! {
        #[test]
        fn pass_iff_all_signals_healthy(
            stream_ok: bool,
            cloud: bool,
            err in prop::option::of(0usize..5),
            cv in prop::collection::vec((any::<bool>(), any::<bool>()), 0..4),
        ) {
            let mut r = CheckReport::new("X", 0);
            r.stream_ok = stream_ok;
            r.cloud_connected = cloud;
            r.error_code = err.map(|i| ErrorCode::ALL[i]);
            r.cv_verdicts = cv.iter().map(|&(p, seen)| motion(p, seen.then_some(1.0))).collect();
            r.finalize();
            let expected = stream_ok && cloud && err.is_none() && cv.iter().all(|c| c.0);
            prop_assert_eq!(r.passed(), expected);
        }
    }
}
