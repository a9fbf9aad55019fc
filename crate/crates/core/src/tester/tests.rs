use super::*;
use crate::agent::FaultFlags;
use crate::cloud::{pins, CloudApi};
use crate::clock::HOUR;
use crate::config::SinkConfig;
use crate::orchestrator::Availability;

const T0: Millis = 1_700_000_000_000;

fn world(fl: usize, vr: usize) -> World {
    let mut w = World::new(PlatformConfig::fleet(fl, vr), T0).unwrap();
    w.advance(200);
    w
}

fn motions(r: &CheckReport) -> Vec<&MotionVerdict> {
    r.cv_verdicts
        .iter()
        .filter_map(|v| match v {
            CvVerdict::Motion { verdict, .. } => Some(verdict),
            _ => None,
        })
        .collect()
}

fn vacant(w: &World, exp: &str) -> bool {
    w.orchestrator()
        .nodes(exp)
        .unwrap()
        .iter()
        .all(|n| n.status == "vacant" && n.availability == Availability::Available)
}

#[test]
fn healthy_focal_length_node_passes() {
    let mut w = world(1, 0);
    let tester = Tester::new(w.config());
    let r = tester.check(&mut w, "FL");
    assert!(r.passed(), "{:#?}", r.overall);
    assert_eq!(r.node_id.as_deref(), Some("fl-1"));
    let m = motions(&r);
    assert_eq!(m.len(), 2);
    assert!((m[0].commanded_mm - 5.0).abs() < 1e-9);
    assert!((m[1].commanded_mm + 5.0).abs() < 1e-9);
    assert!((m[0].observed_mm.unwrap() - 5.0).abs() <= 0.25);
    assert!(r.first_frame_ms.unwrap() >= 860);
    w.advance(100);
    assert!(vacant(&w, "FL"));
}

#[test]
fn healthy_vanishing_rod_node_passes_and_sets_baseline() {
    let mut w = world(0, 1);
    let tester = Tester::new(w.config());
    let r = tester.check(&mut w, "VR");
    assert!(r.passed(), "{:#?}", r);
    assert!(matches!(r.cv_verdicts[0], CvVerdict::Ssim { baseline_set: true, .. }));
    w.advance(1_000);
    let again = tester.check(&mut w, "VR");
    assert!(again.passed(), "{:#?}", again.overall);
    let CvVerdict::Ssim { score, baseline_set, .. } = again.cv_verdicts[0] else {
        panic!("ssim first");
    };
    assert!(!baseline_set && score > 0.98);
}

#[test]
fn evaporated_water_fails_ssim() {
    let mut w = world(0, 1);
    let tester = Tester::new(w.config());
    assert!(tester.check(&mut w, "VR").passed());
    w.with_rig("vr-1", |s| {
        if let ExperimentState::VanishingRod(r) = s {
            r.water_level = 0.8;
        }
    });
    let r = tester.check(&mut w, "VR");
    assert_eq!(r.overall.reasons(), [FailReason::Ssim]);
}

#[test]
fn motor_stall_fails_motion_with_one_notification() {
    let dir = tempfile::tempdir().unwrap();
    let sink = dir.path().join("n.ndjson");
    let mut w = world(1, 0);
    w.set_faults("fl-1-ctl", FaultFlags { motor_stall: Some(0.4), ..Default::default() });
    let tester = Tester::new(w.config()).with_notifier(Notifier::new(SinkConfig::File { path: sink.clone() }));
    let r = tester.run_check(&mut w, "FL");
    assert_eq!(r.overall.reasons(), [FailReason::Motion]);
    assert!((motions(&r)[0].observed_mm.unwrap() - 2.0).abs() <= 0.25);
    assert_eq!(read_notifications(&sink).unwrap().len(), 1);
    assert!(tester.notifier().unwrap().notify(&r).unwrap().is_none());
    assert_eq!(read_notifications(&sink).unwrap().len(), 1);
}

#[test]
fn stuck_limit_switch_surfaces_error_code() {
    let mut w = world(0, 1);
    w.set_faults("vr-1-ctl", FaultFlags { stuck_limit_switch: true, ..Default::default() });
    w.power_cycle("vr-1-ctl");
    let tester = Tester::new(w.config());
    let r = tester.check(&mut w, "VR");
    assert_eq!(r.error_code, Some(ErrorCode::E02));
    assert!(r.reason_labels().contains(&"error_code E02".to_string()));
    assert!(!r.hardware_down);
}

#[test]
fn error_pin_written_directly_fails_report() {
    let mut w = world(1, 0);
    w.store().update_pin("tok-fl-1-ctl", pins::ERROR, "E02").unwrap();
    let r = Tester::new(w.config()).check(&mut w, "FL");
    assert_eq!(r.overall.reasons(), [FailReason::ErrorCode { code: ErrorCode::E02 }]);
}

#[test]
fn motor_driver_fault_gives_no_detection() {
    let mut w = world(1, 0);
    w.set_faults("fl-1-ctl", FaultFlags { motor_driver_fault: true, ..Default::default() });
    let r = Tester::new(w.config()).check(&mut w, "FL");
    let reasons = r.overall.reasons();
    assert!(reasons.contains(&FailReason::NoDetection), "{reasons:?}");
    assert!(reasons.contains(&FailReason::ErrorCode { code: ErrorCode::E01 }));
}

#[test]
fn dead_camera_makes_experiment_offline() {
    let mut w = world(1, 0);
    w.set_faults("fl-1-side", FaultFlags { camera_failure: true, ..Default::default() });
    let r = Tester::new(w.config()).check(&mut w, "FL");
    assert_eq!(r.overall.reasons(), [FailReason::ExperimentOffline]);
    assert!(r.hardware_down && !r.stream_ok);
}

#[test]
fn busy_node_is_retried_once_then_refused() {
    let mut w = world(1, 0);
    let student = w.login("student1", "pass1").unwrap();
    w.register_peer("s1").unwrap();
    w.enter(&student, "FL", "s1").unwrap();
    w.advance(100);
    let tester = Tester::new(w.config());
    let r = tester.check(&mut w, "FL");
    assert_eq!(r.attempts, 2);
    assert_eq!(r.overall.reasons(), [FailReason::EntryRefused]);
    assert!(!r.hardware_down);
    assert!(w.orchestrator().queue_snapshot("FL").unwrap().is_empty());
}

#[test]
fn retry_succeeds_when_student_leaves_during_backoff() {
    let mut cfg = PlatformConfig::fleet(1, 0);
    cfg.session_duration_s = 20;
    let mut w = World::new(cfg, T0).unwrap();
    w.advance(200);
    let student = w.login("student1", "pass1").unwrap();
    w.register_peer("s1").unwrap();
    w.enter(&student, "FL", "s1").unwrap();
    let r = Tester::new(w.config()).check(&mut w, "FL");
    assert_eq!(r.attempts, 2);
    assert!(r.passed(), "{:?}", r.overall);
}

#[test]
fn eight_hour_schedule_over_a_day() {
    let dir = tempfile::tempdir().unwrap();
    let mut w = world(1, 1);
    let tester = Tester::new(w.config()).with_ledger(Ledger::new(dir.path().join("ledger.ndjson")));
    let start = w.now();
    let reports = run_scheduled(&mut w, &tester, 8 * HOUR, start + 24 * HOUR);
    assert_eq!(reports.iter().filter(|r| r.experiment_id == "FL").count(), 3);
    assert_eq!(reports.iter().filter(|r| r.experiment_id == "VR").count(), 3);
    assert!(reports.iter().all(CheckReport::passed), "{:?}", reports.iter().map(|r| &r.overall).collect::<Vec<_>>());
    assert_eq!(tester.ledger().unwrap().load().unwrap(), reports);
}
