//! Serves a trained policy over a WebSocket so the auxiliary input can be
//! changed while an episode runs.
//!
//! Each connection owns one [`Session`]: an environment instance, the
//! current α and a rolling action histogram. The server steps every session
//! at a fixed tick rate and streams one `frame` per step. Message formats are
//! in [`protocol`] and in `protocol/schema.json`.

pub mod protocol;
pub mod server;
pub mod session;

pub use protocol::{ClientMessage, ServerMessage, PROTOCOL_VERSION};
pub use server::{ServeOptions, Server, ServerHandle};
pub use session::{ServedModel, Session};

#[derive(Debug, thiserror::Error)]
pub enum ServerError {
    #[error(transparent)]
    Core(#[from] multigail::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("websocket: {0}")]
    WebSocket(#[from] tungstenite::Error),
    #[error("{0}")]
    Model(String),
}

pub type Result<T> = std::result::Result<T, ServerError>;
