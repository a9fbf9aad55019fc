//! Builds a synthetic ledger of tester readings and prints the availability
//! tables, the same ones `rlabs report` prints.
//!
//! Run with `cargo run -p rlabs-core --example availability_report`.

use chrono::NaiveDate;
use rlabs_core::tester::{synthetic_ledger, uptime_summary, DayPlan};

fn main() {
    let plans = [
        DayPlan {
            experiment_id: "VR".into(),
            online: 106,
            partial: 8,
            offline: 9,
        },
        DayPlan {
            experiment_id: "FL".into(),
            online: 101,
            partial: 12,
            offline: 10,
        },
    ];
    let start = NaiveDate::from_ymd_opt(2023, 3, 1).unwrap();
    let ledger = synthetic_ledger(&plans, start, 3, 7);
    println!("{} readings", ledger.len());

    let summary = uptime_summary(&ledger).expect("ledger is not empty");
    print!("{}", summary.to_table());
    println!("fleet availability: {:.1}% online", summary.fleet_online_percent);
}
