//! WebSocket front end: one thread per connection, fixed tick rate.
//!
//! Query parameters on the upgrade request: `seed` (env seed of a new
//! session), `alpha` (comma list, initial α) and `session` (resume a
//! disconnected session that has not timed out yet).

use std::collections::HashMap;
use std::io::ErrorKind;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use tungstenite::handshake::server::{Request, Response};
use tungstenite::{accept_hdr, Message, WebSocket};

use crate::protocol::{ClientMessage, ErrorCode, ServerMessage};
use crate::session::{alpha_error, ServedModel, Session};
use crate::Result;

#[derive(Clone, Debug)]
pub struct ServeOptions {
    pub tick_rate: f64,
    /// How long a disconnected session stays resumable.
    pub session_timeout: Duration,
    pub default_seed: u64,
    /// α for sessions that do not pass one; all ones when absent.
    pub default_alpha: Option<Vec<f64>>,
}

impl Default for ServeOptions {
    fn default() -> Self {
        Self {
            tick_rate: 20.0,
            session_timeout: Duration::from_secs(30),
            default_seed: 0,
            default_alpha: None,
        }
    }
}

struct Entry {
    session: Arc<Mutex<Session>>,
    connected: bool,
    last_seen: Instant,
}

#[derive(Default)]
struct Registry {
    sessions: HashMap<u64, Entry>,
}

impl Registry {
    fn reap(&mut self, timeout: Duration) {
        let now = Instant::now();
        self.sessions
            .retain(|_, e| e.connected || now.duration_since(e.last_seen) < timeout);
    }
}

struct Shared {
    model: Arc<ServedModel>,
    options: ServeOptions,
    registry: Mutex<Registry>,
    next_id: AtomicU64,
    stop: AtomicBool,
}

pub struct Server {
    listener: TcpListener,
    shared: Arc<Shared>,
}

/// A server running on a background thread.
pub struct ServerHandle {
    pub addr: SocketAddr,
    shared: Arc<Shared>,
    thread: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn session_count(&self) -> usize {
        self.shared.registry.lock().unwrap().sessions.len()
    }

    pub fn reap(&self) {
        self.shared
            .registry
            .lock()
            .unwrap()
            .reap(self.shared.options.session_timeout);
    }

    pub fn stop(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        self.shared.stop.store(true, Ordering::SeqCst);
        // wake the accept loop
        let _ = TcpStream::connect(self.addr);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn query(uri: &str) -> HashMap<String, String> {
    uri.split_once('?')
        .map(|(_, q)| {
            q.split('&')
                .filter_map(|kv| kv.split_once('='))
                .map(|(k, v)| (k.to_string(), v.replace("%2C", ",").replace("%2c", ",")))
                .collect()
        })
        .unwrap_or_default()
}

impl Server {
    pub fn bind(addr: &str, model: ServedModel, options: ServeOptions) -> Result<Self> {
        Ok(Self {
            listener: TcpListener::bind(addr)?,
            shared: Arc::new(Shared {
                model: Arc::new(model),
                options,
                registry: Mutex::new(Registry::default()),
                next_id: AtomicU64::new(1),
                stop: AtomicBool::new(false),
            }),
        })
    }

    pub fn local_addr(&self) -> Result<SocketAddr> {
        Ok(self.listener.local_addr()?)
    }

    /// Accepts connections until stopped.
    pub fn run(self) -> Result<()> {
        for stream in self.listener.incoming() {
            if self.shared.stop.load(Ordering::SeqCst) {
                break;
            }
            let stream = match stream {
                Ok(s) => s,
                Err(_) => continue,
            };
            {
                let mut reg = self.shared.registry.lock().unwrap();
                reg.reap(self.shared.options.session_timeout);
            }
            let shared = Arc::clone(&self.shared);
            std::thread::spawn(move || {
                let _ = serve_connection(stream, shared);
            });
        }
        Ok(())
    }

    pub fn spawn(self) -> Result<ServerHandle> {
        let addr = self.local_addr()?;
        let shared = Arc::clone(&self.shared);
        let thread = std::thread::spawn(move || {
            let _ = self.run();
        });
        Ok(ServerHandle {
            addr,
            shared,
            thread: Some(thread),
        })
    }
}

fn send(ws: &mut WebSocket<TcpStream>, msg: &ServerMessage) -> Result<()> {
    ws.send(Message::Text(msg.to_line()))?;
    Ok(())
}

fn open_session(
    shared: &Shared,
    params: &HashMap<String, String>,
) -> std::result::Result<(u64, Arc<Mutex<Session>>), ServerMessage> {
    let mut reg = shared.registry.lock().unwrap();
    reg.reap(shared.options.session_timeout);
    if let Some(id) = params.get("session") {
        let id: u64 = id
            .parse()
            .map_err(|_| ServerMessage::error(ErrorCode::BadMessage, format!("bad session id `{id}`")))?;
        return match reg.sessions.get_mut(&id) {
            Some(e) if !e.connected => {
                e.connected = true;
                Ok((id, Arc::clone(&e.session)))
            }
            Some(_) => Err(ServerMessage::error(
                ErrorCode::BadMessage,
                format!("session {id} is in use"),
            )),
            None => Err(ServerMessage::error(ErrorCode::BadMessage, format!("no session {id}"))),
        };
    }
    let seed = match params.get("seed") {
        Some(s) => s
            .parse()
            .map_err(|_| ServerMessage::error(ErrorCode::BadMessage, format!("bad seed `{s}`")))?,
        None => shared.options.default_seed,
    };
    let alpha = match params.get("alpha") {
        Some(a) => Some(
            a.split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| ServerMessage::error(ErrorCode::BadMessage, format!("bad alpha `{a}`")))?,
        ),
        None => shared.options.default_alpha.clone(),
    };
    if let Some(e) = alpha.as_deref().and_then(|a| alpha_error(a, shared.model.n_personas())) {
        return Err(e);
    }
    let id = shared.next_id.fetch_add(1, Ordering::SeqCst);
    let session = Session::new(id, Arc::clone(&shared.model), seed, alpha)
        .map_err(|e| ServerMessage::error(ErrorCode::Internal, e.to_string()))?;
    let session = Arc::new(Mutex::new(session));
    reg.sessions.insert(
        id,
        Entry {
            session: Arc::clone(&session),
            connected: true,
            last_seen: Instant::now(),
        },
    );
    Ok((id, session))
}

fn serve_connection(stream: TcpStream, shared: Arc<Shared>) -> Result<()> {
    if shared.stop.load(Ordering::SeqCst) {
        return Ok(());
    }
    stream.set_nodelay(true)?;
    let mut uri = String::new();
    let mut ws = accept_hdr(stream, |req: &Request, resp: Response| {
        uri = req.uri().to_string();
        Ok(resp)
    })
    .map_err(|e| std::io::Error::new(ErrorKind::Other, e.to_string()))?;
    let (id, session) = match open_session(&shared, &query(&uri)) {
        Ok(v) => v,
        Err(msg) => {
            send(&mut ws, &msg)?;
            let _ = ws.close(None);
            return Ok(());
        }
    };
    let result = run_session(&mut ws, &shared, &session);
    let mut reg = shared.registry.lock().unwrap();
    if let Some(e) = reg.sessions.get_mut(&id) {
        e.connected = false;
        e.last_seen = Instant::now();
    }
    result
}

fn run_session(ws: &mut WebSocket<TcpStream>, shared: &Shared, session: &Mutex<Session>) -> Result<()> {
    let period = Duration::from_secs_f64(1.0 / shared.options.tick_rate);
    send(ws, &session.lock().unwrap().hello(shared.options.tick_rate))?;
    ws.get_mut().set_read_timeout(Some(Duration::from_millis(2)))?;
    let mut next_tick = Instant::now() + period;
    loop {
        if shared.stop.load(Ordering::SeqCst) {
            let _ = ws.close(None);
            return Ok(());
        }
        // drain client messages
        loop {
            match ws.read() {
                Ok(Message::Text(t)) => {
                    let reply = match ClientMessage::parse(&t) {
                        Ok(ClientMessage::SetAlpha { values }) => Some(session.lock().unwrap().set_alpha(values)),
                        Ok(ClientMessage::Reset) => {
                            session.lock().unwrap().request_reset();
                            None
                        }
                        Err(e) => Some(ServerMessage::error(ErrorCode::BadMessage, e)),
                    };
                    if let Some(r) = reply {
                        send(ws, &r)?;
                    }
                }
                Ok(Message::Close(_)) => return Ok(()),
                Ok(_) => {}
                Err(tungstenite::Error::Io(e)) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {
                    break
                }
                Err(tungstenite::Error::ConnectionClosed | tungstenite::Error::AlreadyClosed) => return Ok(()),
                Err(e) => return Err(e.into()),
            }
        }
        let now = Instant::now();
        if now >= next_tick {
            let msgs = match session.lock().unwrap().advance() {
                Ok(m) => m,
                Err(e) => vec![ServerMessage::error(ErrorCode::Internal, e.to_string())],
            };
            for m in &msgs {
                send(ws, m)?;
            }
            next_tick += period;
            // skip ticks rather than bursting after a stall
            if next_tick < now {
                next_tick = now + period;
            }
        } else {
            std::thread::sleep((next_tick - now).min(Duration::from_millis(1)));
        }
    }
}
