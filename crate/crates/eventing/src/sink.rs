use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::{Broker, BrokerError, Event, Filter, HandlerError, TriggerId};

/// Terminal consumers for chained events.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Sink {
    /// Append one JSON document per line.
    Jsonl { path: PathBuf },
    /// JSONL append plus a warning log line per event.
    AlertLog { path: PathBuf },
    Stdout,
}

struct Appender {
    path: PathBuf,
    file: Option<File>,
}

impl Appender {
    fn write_line(&mut self, line: &[u8]) -> io::Result<()> {
        if self.file.is_none() {
            self.file = Some(OpenOptions::new().create(true).append(true).open(&self.path)?);
        }
        let file = self.file.as_mut().expect("opened above");
        // One write per line keeps concurrent appenders from interleaving.
        let result = file.write_all(line).and_then(|()| file.flush());
        if result.is_err() {
            self.file = None;
        }
        result
    }
}

fn encode(event: &Event) -> Result<Vec<u8>, HandlerError> {
    let mut line = serde_json::to_vec(event)?;
    line.push(b'\n');
    Ok(line)
}

/// Forward matching events to `sink`. Write failures are logged and counted
/// as handler errors on the returned trigger; the broker keeps running.
pub fn chain_sink(
    broker: &Broker,
    name: impl Into<String>,
    filter: Filter,
    sink: Sink,
    capacity: usize,
) -> Result<TriggerId, BrokerError> {
    match sink {
        Sink::Jsonl { path } => {
            let mut out = Appender { path, file: None };
            broker.register_trigger(name, filter, capacity, move |e| {
                out.write_line(&encode(e)?)
                    .map_err(|err| format!("{}: {err}", out.path.display()).into())
            })
        }
        Sink::AlertLog { path } => {
            let mut out = Appender { path, file: None };
            broker.register_trigger(name, filter, capacity, move |e| {
                tracing::warn!(id = %e.id, topic = %e.topic, kind = %e.kind, payload = %e.payload, "alert");
                out.write_line(&encode(e)?)
                    .map_err(|err| format!("{}: {err}", out.path.display()).into())
            })
        }
        Sink::Stdout => broker.register_trigger(name, filter, capacity, |e| {
            let line = encode(e)?;
            let mut stdout = io::stdout().lock();
            stdout.write_all(&line)?;
            stdout.flush()?;
            Ok(())
        }),
    }
}
