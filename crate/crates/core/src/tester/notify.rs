use std::collections::HashSet;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::config::SinkConfig;

use super::report::CheckReport;

/// The message sent to administrators for one failed report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Notification {
    pub report_id: String,
    pub experiment_id: String,
    pub node_id: Option<String>,
    pub timestamp: String,
    pub reasons: Vec<String>,
    pub report: CheckReport,
}

/// Where a notification ended up.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "via", rename_all = "snake_case")]
pub enum Delivery {
    Stdout,
    Memory,
    File { path: PathBuf },
    Webhook { url: String },
    /// The webhook failed and the record was spooled locally instead.
    Fallback { path: PathBuf, error: String },
}

/// Posts a JSON body to a URL. Implemented by the HTTP layer.
pub trait WebhookTransport: Send + Sync {
    fn post_json(&self, url: &str, body: &str) -> Result<(), String>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeliveryRecord {
    pub report_id: String,
    pub delivery: Delivery,
}

/// Sends one record per failed report, never more.
pub struct Notifier {
    sink: SinkConfig,
    transport: Option<Box<dyn WebhookTransport>>,
    state: Mutex<NotifierState>,
}

#[derive(Default)]
struct NotifierState {
    sent: HashSet<String>,
    log: Vec<DeliveryRecord>,
}

impl std::fmt::Debug for Notifier {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Notifier").field("sink", &self.sink).finish_non_exhaustive()
    }
}

fn append_line(path: &Path, line: &str) -> std::io::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{line}")
}

/// Report ids already present in an NDJSON notification file.
fn ids_in(path: &Path) -> HashSet<String> {
    std::fs::read_to_string(path)
        .unwrap_or_default()
        .lines()
        .filter_map(|l| serde_json::from_str::<serde_json::Value>(l).ok())
        .filter_map(|v| v.get("report_id").and_then(|r| r.as_str()).map(str::to_string))
        .collect()
}

impl Notifier {
    /// A file sink picks up the ids it already holds, so a restarted tester
    /// does not notify twice for the same report.
    pub fn new(sink: SinkConfig) -> Self {
        let sent = match &sink {
            SinkConfig::File { path } => ids_in(path),
            SinkConfig::Webhook { fallback_path, .. } => ids_in(fallback_path),
            SinkConfig::Stdout | SinkConfig::Memory => HashSet::new(),
        };
        Self {
            sink,
            transport: None,
            state: Mutex::new(NotifierState { sent, log: Vec::new() }),
        }
    }

    pub fn with_transport(mut self, transport: Box<dyn WebhookTransport>) -> Self {
        self.transport = Some(transport);
        self
    }

    pub fn sink(&self) -> &SinkConfig {
        &self.sink
    }

    /// Delivers a notification for a failed report. Returns `None` for
    /// passing reports and for reports already notified.
    pub fn notify(&self, report: &CheckReport) -> std::io::Result<Option<DeliveryRecord>> {
        if report.passed() {
            return Ok(None);
        }
        let mut st = self.state.lock().unwrap();
        if st.sent.contains(&report.report_id) {
            return Ok(None);
        }
        let note = Notification {
            report_id: report.report_id.clone(),
            experiment_id: report.experiment_id.clone(),
            node_id: report.node_id.clone(),
            timestamp: report.timestamp.clone(),
            reasons: report.reason_labels(),
            report: report.clone(),
        };
        let line = serde_json::to_string(&note).expect("notification serializes");
        let delivery = match &self.sink {
            SinkConfig::Stdout => {
                println!("{line}");
                Delivery::Stdout
            }
            SinkConfig::Memory => Delivery::Memory,
            SinkConfig::File { path } => {
                append_line(path, &line)?;
                Delivery::File { path: path.clone() }
            }
            SinkConfig::Webhook { url, fallback_path } => {
                let body = serde_json::to_string(report).expect("report serializes");
                let sent = match &self.transport {
                    Some(t) => t.post_json(url, &body),
                    None => Err("no webhook transport configured".into()),
                };
                match sent {
                    Ok(()) => Delivery::Webhook { url: url.clone() },
                    Err(error) => {
                        tracing::warn!(%url, %error, "webhook delivery failed, spooling to file");
                        append_line(fallback_path, &line)?;
                        Delivery::Fallback {
                            path: fallback_path.clone(),
                            error,
                        }
                    }
                }
            }
        };
        st.sent.insert(report.report_id.clone());
        let record = DeliveryRecord {
            report_id: report.report_id.clone(),
            delivery,
        };
        st.log.push(record.clone());
        Ok(Some(record))
    }

    pub fn delivered(&self) -> usize {
        self.state.lock().unwrap().log.len()
    }

    pub fn deliveries(&self) -> Vec<DeliveryRecord> {
        self.state.lock().unwrap().log.clone()
    }
}

/// Reads the records of an NDJSON notification file.
pub fn read_notifications(path: &Path) -> std::io::Result<Vec<Notification>> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e),
    };
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e)))
        .collect()
}
