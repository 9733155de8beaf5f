// Copyright 2026 The vmstream Authors. All Rights Reserved.
// SPDX-License-Identifier: Apache-2.0

//! Page serving over a local stream socket.
//!
//! The server answers framed `PageRequest`s from a shared [`ImageServer`].
//! Requests are idempotent; each connection is served by its own thread.
//! The requester's cache view travels through an in-process slot shared with
//! the server, which is why the client and server must live in one process.

use std::collections::HashSet;
use std::io::{ErrorKind, Read, Write};
use std::os::unix::net::{UnixListener, UnixStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::thread::JoinHandle;

use super::server::ImageServer;
use super::wire::WireMessage;
use crate::error::{Error, Result};
use crate::page_store::ContentHash;

/// Hashes the current requester already holds.
pub type HeldSlot = Arc<Mutex<HashSet<ContentHash>>>;

pub struct LivePageServer {
    path: PathBuf,
    slot: HeldSlot,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

fn unavailable(e: std::io::Error) -> Error {
    Error::StreamUnavailable(e.to_string())
}

impl LivePageServer {
    pub fn spawn(images: Arc<RwLock<ImageServer>>, path: &Path) -> Result<Self> {
        let listener = UnixListener::bind(path).map_err(unavailable)?;
        let slot: HeldSlot = Arc::default();
        let stop = Arc::new(AtomicBool::new(false));
        let (s2, stop2) = (slot.clone(), stop.clone());
        let accept = std::thread::spawn(move || {
            let mut workers = Vec::new();
            for conn in listener.incoming() {
                if stop2.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(conn) = conn else { continue };
                let (images, slot) = (images.clone(), s2.clone());
                workers.push(std::thread::spawn(move || serve_conn(conn, &images, &slot)));
            }
            for w in workers {
                let _ = w.join();
            }
        });
        Ok(LivePageServer {
            path: path.to_path_buf(),
            slot,
            stop,
            accept: Some(accept),
        })
    }

    pub fn connect(&self) -> Result<LiveClient> {
        Ok(LiveClient {
            stream: UnixStream::connect(&self.path).map_err(unavailable)?,
            slot: self.slot.clone(),
        })
    }
}

impl Drop for LivePageServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Wake the accept loop.
        let _ = UnixStream::connect(&self.path);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
        let _ = std::fs::remove_file(&self.path);
    }
}

fn read_frame(s: &mut UnixStream) -> std::io::Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    match s.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let n = u32::from_le_bytes(len) as usize;
    let mut buf = vec![0u8; 4 + n];
    buf[..4].copy_from_slice(&len);
    s.read_exact(&mut buf[4..])?;
    Ok(Some(buf))
}

fn serve_conn(mut conn: UnixStream, images: &RwLock<ImageServer>, slot: &Mutex<HashSet<ContentHash>>) {
    while let Ok(Some(frame)) = read_frame(&mut conn) {
        let reply = WireMessage::decode(&frame).and_then(|req| {
            let held = slot.lock().expect("slot poisoned");
            images.read().expect("image table poisoned").serve(&req, &*held)
        });
        let Ok(reply) = reply else {
            // A malformed request ends the connection.
            return;
        };
        if conn.write_all(&reply.encode()).is_err() {
            return;
        }
    }
}

pub struct LiveClient {
    stream: UnixStream,
    slot: HeldSlot,
}

impl LiveClient {
    /// Sends one request and waits for its reply. `held` is the subset of
    /// the requester's resident hashes relevant to this request.
    pub fn request(&mut self, req: &WireMessage, held: HashSet<ContentHash>) -> Result<WireMessage> {
        *self.slot.lock().expect("slot poisoned") = held;
        self.stream.write_all(&req.encode()).map_err(unavailable)?;
        let frame = read_frame(&mut self.stream)
            .map_err(unavailable)?
            .ok_or_else(|| Error::StreamUnavailable("page server closed the connection".into()))?;
        WireMessage::decode(&frame)
    }
}
