//! Five users contend for two nodes: the first two are seated, the rest wait
//! in arrival order and move up as sessions end.
//!
//! Run with `cargo run -p rlabs-core --example queue_storm`.

use rlabs_core::config::PlatformConfig;
use rlabs_core::sim::World;

fn main() {
    let mut w = World::new(PlatformConfig::fleet(2, 0), 0).unwrap();
    w.advance(200);
    let users: Vec<(String, String)> = (1..=5)
        .map(|i| {
            let tok = w.login(&format!("student{i}"), &format!("pass{i}")).unwrap();
            let peer = format!("peer-{i}");
            w.register_peer(&peer).unwrap();
            (tok, peer)
        })
        .collect();
    for (tok, peer) in &users {
        w.enter(tok, "FL", peer).unwrap();
        w.advance(50);
    }
    w.advance(200);

    let show = |w: &mut World, title: &str| {
        println!("{title}");
        for (i, (tok, _)) in users.iter().enumerate() {
            println!("  student{}: {:?}", i + 1, w.status(tok, "FL").unwrap());
        }
    };
    show(&mut w, "after five entries");
    w.leave(&users[0].0, "FL").unwrap();
    w.advance(300);
    show(&mut w, "after student1 leaves");
}
