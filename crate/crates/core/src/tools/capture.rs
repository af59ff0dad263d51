use std::collections::VecDeque;
use std::io::Read;
use std::sync::{mpsc, Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

#[derive(Debug, Clone, Copy)]
pub(crate) enum Keep {
    Head(usize),
    Tail(usize),
}

#[derive(Debug, Default, Clone)]
pub(crate) struct Captured {
    pub bytes: Vec<u8>,
    pub truncated: bool,
}

impl Captured {
    pub fn text(&self) -> String {
        String::from_utf8_lossy(&self.bytes).into_owned()
    }
}

#[derive(Default)]
struct Buffer {
    head: Vec<u8>,
    tail: VecDeque<u8>,
    truncated: bool,
}

impl Buffer {
    fn push(&mut self, keep: Keep, data: &[u8]) {
        match keep {
            Keep::Head(cap) => {
                let room = cap.saturating_sub(self.head.len());
                self.head.extend_from_slice(&data[..data.len().min(room)]);
                if data.len() > room {
                    self.truncated = true;
                }
            }
            Keep::Tail(cap) => {
                self.tail.extend(data);
                if self.tail.len() > cap {
                    let excess = self.tail.len() - cap;
                    self.tail.drain(..excess);
                    self.truncated = true;
                }
            }
        }
    }

    fn snapshot(&self, keep: Keep) -> Captured {
        Captured {
            bytes: match keep {
                Keep::Head(_) => self.head.clone(),
                Keep::Tail(_) => self.tail.iter().copied().collect(),
            },
            truncated: self.truncated,
        }
    }
}

/// Drains `src` to EOF on a background thread, keeping at most the
/// configured number of bytes. Draining continues past the cap so the
/// writer never blocks on a full pipe.
pub(crate) struct Drain {
    keep: Keep,
    buffer: Arc<Mutex<Buffer>>,
    done: mpsc::Receiver<()>,
    handle: Option<thread::JoinHandle<()>>,
}

impl Drain {
    pub fn spawn<R: Read + Send + 'static>(mut src: R, keep: Keep) -> Drain {
        let (tx, done) = mpsc::channel();
        let buffer = Arc::new(Mutex::new(Buffer::default()));
        let shared = Arc::clone(&buffer);
        let handle = thread::spawn(move || {
            let mut buf = [0u8; 8192];
            loop {
                let n = match src.read(&mut buf) {
                    Ok(0) => break,
                    Ok(n) => n,
                    Err(e) if e.kind() == std::io::ErrorKind::Interrupted => continue,
                    Err(_) => break,
                };
                shared.lock().unwrap_or_else(|e| e.into_inner()).push(keep, &buf[..n]);
            }
            let _ = tx.send(());
        });
        Drain {
            keep,
            buffer,
            done,
            handle: Some(handle),
        }
    }

    fn snapshot(&self) -> Captured {
        self.buffer.lock().unwrap_or_else(|e| e.into_inner()).snapshot(self.keep)
    }

    /// Waits until `deadline` for EOF. `None` means the writer side is still open.
    pub fn finish_by(&mut self, deadline: Instant) -> Option<Captured> {
        let wait = deadline.saturating_duration_since(Instant::now());
        match self.done.recv_timeout(wait) {
            Err(mpsc::RecvTimeoutError::Timeout) => None,
            _ => {
                self.join();
                Some(self.snapshot())
            }
        }
    }

    #[cfg(test)]
    pub fn finish(&mut self) -> Captured {
        let _ = self.done.recv();
        self.join();
        self.snapshot()
    }

    /// What has arrived so far. The reader thread is left to run until some
    /// other holder of the write end closes it.
    pub fn abandon(&mut self) -> Captured {
        self.handle.take();
        self.snapshot()
    }

    fn join(&mut self) {
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

/// Sleeps with a growing interval, for try_wait polling.
pub(crate) struct Backoff(Duration);

impl Backoff {
    pub fn new() -> Self {
        Backoff(Duration::from_micros(500))
    }

    pub fn sleep(&mut self) {
        thread::sleep(self.0);
        self.0 = (self.0 * 2).min(Duration::from_millis(20));
    }
}
