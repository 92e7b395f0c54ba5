//! Bus recordings: one envelope per line plus the local receive time.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use avp_msgbus::{now_ns, BusError, Envelope, Session};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TapEntry {
    #[serde(flatten)]
    pub envelope: Envelope,
    pub recv_ns: i64,
}

pub fn write_tap(path: impl AsRef<Path>, entries: &[TapEntry]) -> io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for e in entries {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn read_tap(path: impl AsRef<Path>) -> io::Result<Vec<TapEntry>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry = serde_json::from_str(&line)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, format!("line {}: {e}", i + 1)))?;
        out.push(entry);
    }
    Ok(out)
}

/// Live recorder: subscribes to everything and keeps entries in memory,
/// optionally mirroring them to an NDJSON file as they arrive.
pub struct LiveTap {
    entries: Arc<Mutex<Vec<TapEntry>>>,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<Result<(), BusError>>>,
}

impl LiveTap {
    pub fn start(session: Arc<Session>, mirror: Option<&Path>) -> Result<Self, BusError> {
        let sub = session.subscribe("**")?;
        let mut file = match mirror {
            Some(p) => Some(BufWriter::new(File::create(p)?)),
            None => None,
        };
        let entries = Arc::new(Mutex::new(Vec::new()));
        let stop = Arc::new(AtomicBool::new(false));
        let (e2, s2) = (Arc::clone(&entries), Arc::clone(&stop));
        let handle = std::thread::spawn(move || -> Result<(), BusError> {
            let _keep = session;
            loop {
                let next = sub.recv_timeout(Duration::from_millis(50));
                let env = match next {
                    Ok(Some(env)) => env,
                    Ok(None) => {
                        if s2.load(Ordering::Relaxed) {
                            break;
                        }
                        continue;
                    }
                    Err(BusError::Closed) => break,
                    Err(e) => return Err(e),
                };
                let entry = TapEntry {
                    envelope: env,
                    recv_ns: now_ns(),
                };
                if let Some(f) = file.as_mut() {
                    serde_json::to_writer(&mut *f, &entry)?;
                    f.write_all(b"\n")?;
                }
                e2.lock().unwrap().push(entry);
            }
            if let Some(f) = file.as_mut() {
                f.flush()?;
            }
            Ok(())
        });
        Ok(Self {
            entries,
            stop,
            handle: Some(handle),
        })
    }

    /// Copy of everything recorded so far.
    pub fn snapshot(&self) -> Vec<TapEntry> {
        self.entries.lock().unwrap().clone()
    }

    /// Runs `f` over the recording without copying it.
    pub fn with_entries<R>(&self, f: impl FnOnce(&[TapEntry]) -> R) -> R {
        f(&self.entries.lock().unwrap())
    }

    /// Stops recording after draining what is already queued.
    pub fn finish(mut self) -> Result<Vec<TapEntry>, BusError> {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(h) = self.handle.take() {
            h.join().expect("tap thread panicked")?;
        }
        Ok(std::mem::take(&mut *self.entries.lock().unwrap()))
    }
}

impl Drop for LiveTap {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
    }
}
