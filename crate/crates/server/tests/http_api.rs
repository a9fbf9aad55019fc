mod common;

use std::time::{Duration, Instant};

use common::{config, get, launch, post};
use rlabs_core::clock::{Clock, SystemClock};
use rlabs_core::cloud::CloudApi;
use rlabs_core::image::{Frame, GrayImage};
use rlabs_core::signaling::{MediaApi, SignalError};
use rlabs_server::{FrameStream, HttpCloud, HttpMedia, Role};
use serde_json::json;

#[test]
fn cloud_endpoints() {
    let dir = tempfile::tempdir().unwrap();
    let l = launch(&config(1, 0, dir.path()), &[Role::Cloud]);
    let base = format!("http://{}", l.cloud());
    let tok = "tok-fl-1-ctl";

    assert_eq!(get(&format!("{base}/cloud/update?token={tok}&pin=V0&value=20.5"), None), (200, json!({"ok": true})));
    assert_eq!(get(&format!("{base}/cloud/get?token={tok}&pin=V0"), None), (200, json!({"value": 20.5})));
    get(&format!("{base}/cloud/update?token={tok}&pin=V9&value=E02"), None);
    assert_eq!(get(&format!("{base}/cloud/get?token={tok}&pin=V9"), None).1, json!({"value": "E02"}));
    assert_eq!(get(&format!("{base}/cloud/get?token={tok}&pin=V5"), None).1, json!({"value": null}));

    assert_eq!(get(&format!("{base}/cloud/connected?token={tok}"), None).1, json!({"connected": false}));
    assert_eq!(post(&format!("{base}/cloud/heartbeat"), None, json!({"token": tok})).0, 200);
    assert_eq!(get(&format!("{base}/cloud/connected?token={tok}"), None).1, json!({"connected": true}));

    let (status, body) = get(&format!("{base}/cloud/get?token=nope&pin=V0"), None);
    assert_eq!((status, body["error"].as_str()), (404, Some("unknown_token")));
    let (status, body) = get(&format!("{base}/cloud/update?token={tok}&pin=X1&value=1"), None);
    assert_eq!((status, body["error"].as_str()), (400, Some("bad_pin")));
    assert_eq!(get(&format!("{base}/cloud/get?token={tok}"), None).0, 400);

    // the typed client sees the same store
    let cloud = HttpCloud::new(&l.cloud());
    cloud.update_pin(tok, "V2", "1").unwrap();
    assert_eq!(cloud.get_pin(tok, "V2").unwrap().as_deref(), Some("1"));
    assert_eq!(cloud.get_pin(tok, "V0").unwrap().as_deref(), Some("20.5"));
    assert_eq!(cloud.get_pin("nope", "V0"), Err(rlabs_core::cloud::CloudError::UnknownToken));
    assert!(cloud.is_connected(tok));
}

#[test]
fn signaling_endpoints_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let l = launch(&config(1, 0, dir.path()), &[Role::Signaling]);
    let base = format!("http://{}", l.signaling());
    assert_eq!(post(&format!("{base}/peer/register"), None, json!({"peer_id": "cam"})).0, 200);
    let (status, body) = post(&format!("{base}/peer/register"), None, json!({"peer_id": "cam"}));
    assert_eq!((status, body["error"].as_str()), (409, Some("conflict")));
    assert_eq!(post(&format!("{base}/peer/register"), None, json!({"peer_id": ""})).0, 400);
    post(&format!("{base}/peer/register"), None, json!({"peer_id": "ui"}));

    let (status, body) = post(
        &format!("{base}/peer/call"),
        None,
        json!({"caller": "cam", "callee": "ui", "camera_profile": "nosuch"}),
    );
    assert_eq!((status, body["error"].as_str()), (400, Some("unknown_profile")));
    let (status, body) = post(
        &format!("{base}/peer/call"),
        None,
        json!({"caller": "cam", "callee": "ghost", "camera_profile": "pi3b"}),
    );
    assert_eq!((status, body["peer_id"].as_str()), (404, Some("ghost")));
    let (status, body) = post(
        &format!("{base}/peer/call"),
        None,
        json!({"caller": "cam", "callee": "ui", "camera_profile": "pi3b"}),
    );
    assert_eq!(status, 200);
    assert_eq!(body["latency_ms"], json!(350));
    let sid = body["session_id"].as_u64().unwrap();
    assert_eq!(post(&format!("{base}/peer/hangup"), None, json!({"session_id": sid})).0, 200);

    let media = HttpMedia::new(&l.signaling());
    let frame = Frame::new(GrayImage::filled(4, 3, 9), 1, "n/c");
    assert_eq!(media.publish_frame(sid, frame.clone(), 0), Err(SignalError::StaleSession(sid)));
    assert_eq!(media.publish_frame(999, frame, 0), Err(SignalError::NoSuchSession(999)));
    assert_eq!(media.register("cam", 0), Err(SignalError::Conflict("cam".into())));

    // a stream needs a registered peer
    assert!(FrameStream::open(&l.signaling(), "stranger").is_err());
}

#[test]
fn stream_pushes_tagged_pgm_frames() {
    let dir = tempfile::tempdir().unwrap();
    let l = launch(&config(1, 0, dir.path()), &[Role::Signaling]);
    let media = HttpMedia::new(&l.signaling());
    media.register("cam", 0).unwrap();
    media.register("ui", 0).unwrap();
    let stream = FrameStream::open(&l.signaling(), "ui").unwrap();
    let sid = media.call("cam", "ui", "pi3b", 0).unwrap();
    let image = GrayImage::from_fn(8, 6, |x, y| (x * 30 + y) as u8);
    media.publish_frame(sid, Frame::new(image.clone(), 1234, "fl-1/side"), 0).unwrap();
    let until = Instant::now() + Duration::from_secs(3);
    let mut got = Vec::new();
    while got.is_empty() && Instant::now() < until {
        std::thread::sleep(Duration::from_millis(20));
        got = stream.drain();
    }
    let f = got.pop().expect("frame arrives");
    assert_eq!(*f.frame.image, image);
    assert_eq!(f.frame.camera_id, "fl-1/side");
    assert_eq!(f.frame.timestamp_ms, 1234);
    assert_eq!(f.tags["session"], sid.to_string());
    assert_eq!(f.tags["caller"], "cam");
    media.hangup(sid, "done", 0).unwrap();
    let until = Instant::now() + Duration::from_secs(2);
    while stream.hangups().is_empty() && Instant::now() < until {
        std::thread::sleep(Duration::from_millis(10));
    }
    assert_eq!(stream.hangups()[0]["type"], "hangup");
    media.unregister("ui", 0);
    let until = Instant::now() + Duration::from_secs(2);
    while !stream.is_closed() && Instant::now() < until {
        std::thread::sleep(Duration::from_millis(10));
    }
    assert!(stream.is_closed(), "unregistering closes the stream");
}

/// 100 frames per camera profile over real sockets: every frame arrives no
/// earlier than the profile latency and no more than 50 ms after it.
#[test]
fn injected_latency_over_sockets() {
    let dir = tempfile::tempdir().unwrap();
    let l = launch(&config(1, 0, dir.path()), &[Role::Signaling]);
    let clock = SystemClock::new();
    let mut runs = Vec::new();
    for (profile, ms) in [("pi3b", 350u64), ("pizero2w", 860), ("ipcam", 2010)] {
        let media = HttpMedia::new(&l.signaling());
        let (cam, ui) = (format!("cam-{profile}"), format!("ui-{profile}"));
        media.register(&cam, 0).unwrap();
        media.register(&ui, 0).unwrap();
        let stream = FrameStream::open(&l.signaling(), &ui).unwrap();
        let sid = media.call(&cam, &ui, profile, 0).unwrap();
        runs.push((profile, ms, media, stream, sid));
    }
    let image = GrayImage::filled(16, 12, 128);
    for _ in 0..100 {
        for (_, _, media, _, sid) in &runs {
            media.publish_frame(*sid, Frame::new(image.clone(), clock.now_ms(), "n/c"), 0).unwrap();
        }
        std::thread::sleep(Duration::from_millis(5));
    }
    std::thread::sleep(Duration::from_millis(2_200));
    for (profile, ms, _, stream, _) in &runs {
        let frames = stream.drain();
        assert_eq!(frames.len(), 100, "{profile}");
        for f in &frames {
            let sent: u64 = f.tags["sent"].parse().unwrap();
            let delivered: u64 = f.tags["delivered"].parse().unwrap();
            let broker_delay = delivered - sent;
            let seen_delay = f.received_at - f.frame.timestamp_ms;
            assert!(broker_delay >= *ms && broker_delay <= ms + 50, "{profile}: broker delay {broker_delay}");
            assert!(seen_delay >= *ms && seen_delay <= ms + 50, "{profile}: end-to-end delay {seen_delay}");
        }
    }
}
