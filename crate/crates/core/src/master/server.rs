//! TCP front end for the master.
//!
//! One listener; the first frame on a connection decides its role. A
//! `register` frame opens a node session: subsequent frames are node
//! messages, and the master pushes `assign` frames back over the same
//! socket. Any other frame is a one-shot client request answered with a
//! single response frame.
//!
//! All state lives on a single event-loop thread; connection threads only
//! shuttle frames.

use std::collections::HashMap;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{mpsc, Arc};
use std::thread::JoinHandle;
use std::time::Duration;

use super::Master;
use crate::wire::{self, ClientRequest, ClientResponse, ErrorCode, NodeMessage};

enum LoopMsg {
    NodeSession {
        stream: TcpStream,
        register: NodeMessage,
    },
    Node(NodeMessage),
    NodeGone(String),
    Client {
        req: ClientRequest,
        reply: mpsc::Sender<ClientResponse>,
    },
    Tick,
    Shutdown,
}

pub struct MasterHandle {
    addr: SocketAddr,
    shutdown: Arc<AtomicBool>,
    tx: mpsc::Sender<LoopMsg>,
    join: Option<JoinHandle<()>>,
}

impl MasterHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        let _ = self.tx.send(LoopMsg::Shutdown);
        // Unblock the acceptor.
        let _ = TcpStream::connect(self.addr);
        if let Some(join) = self.join.take() {
            let _ = join.join();
        }
    }
}

/// Serve `master` on `bind` (use port 0 for an ephemeral port). `tick_ms`
/// is the event-loop tick driving liveness checks and assignment.
pub fn serve(master: Master, bind: &str, tick_ms: u64) -> std::io::Result<MasterHandle> {
    let listener = TcpListener::bind(bind)?;
    let addr = listener.local_addr()?;
    let shutdown = Arc::new(AtomicBool::new(false));
    let (tx, rx) = mpsc::channel::<LoopMsg>();

    // Ticker.
    {
        let tx = tx.clone();
        let shutdown = Arc::clone(&shutdown);
        std::thread::spawn(move || loop {
            std::thread::sleep(Duration::from_millis(tick_ms));
            if shutdown.load(Ordering::SeqCst) || tx.send(LoopMsg::Tick).is_err() {
                return;
            }
        });
    }

    // Acceptor.
    {
        let tx = tx.clone();
        let shutdown = Arc::clone(&shutdown);
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                if shutdown.load(Ordering::SeqCst) {
                    return;
                }
                let Ok(stream) = stream else { continue };
                stream.set_nodelay(true).ok();
                let tx = tx.clone();
                std::thread::spawn(move || handle_connection(stream, &tx));
            }
        });
    }

    // Event loop.
    let join = {
        let shutdown = Arc::clone(&shutdown);
        std::thread::spawn(move || event_loop(master, rx, &shutdown))
    };

    Ok(MasterHandle {
        addr,
        shutdown,
        tx,
        join: Some(join),
    })
}

fn handle_connection(mut stream: TcpStream, tx: &mpsc::Sender<LoopMsg>) {
    let Ok(first) = wire::read_frame_bytes(&mut stream) else {
        return;
    };
    let Ok(value) = serde_json::from_slice::<serde_json::Value>(&first) else {
        return;
    };
    if value.get("type").and_then(|t| t.as_str()) == Some("register") {
        let Ok(register) = serde_json::from_value::<NodeMessage>(value) else {
            return;
        };
        let node_id = register.node_id().unwrap_or_default().to_string();
        let Ok(session_stream) = stream.try_clone() else {
            return;
        };
        if tx
            .send(LoopMsg::NodeSession {
                stream: session_stream,
                register,
            })
            .is_err()
        {
            return;
        }
        // Forward node messages until the connection drops.
        loop {
            match wire::read_frame::<_, NodeMessage>(&mut stream) {
                Ok(msg) => {
                    if tx.send(LoopMsg::Node(msg)).is_err() {
                        return;
                    }
                }
                Err(_) => {
                    let _ = tx.send(LoopMsg::NodeGone(node_id));
                    return;
                }
            }
        }
    } else {
        // One-shot client request.
        let Ok(req) = serde_json::from_value::<ClientRequest>(value) else {
            let _ = wire::write_frame(
                &mut stream,
                &ClientResponse::Error {
                    code: ErrorCode::Validation,
                    message: "unrecognized request".into(),
                },
            );
            return;
        };
        let (reply_tx, reply_rx) = mpsc::channel();
        if tx.send(LoopMsg::Client { req, reply: reply_tx }).is_err() {
            return;
        }
        if let Ok(resp) = reply_rx.recv() {
            let _ = wire::write_frame(&mut stream, &resp);
        }
    }
}

fn event_loop(mut master: Master, rx: mpsc::Receiver<LoopMsg>, shutdown: &AtomicBool) {
    let mut node_writers: HashMap<String, TcpStream> = HashMap::new();
    while let Ok(msg) = rx.recv() {
        if shutdown.load(Ordering::SeqCst) {
            return;
        }
        match msg {
            LoopMsg::NodeSession { stream, register } => {
                let node_id = register.node_id().unwrap_or_default().to_string();
                match master.handle_node_message(register) {
                    Ok(()) => {
                        node_writers.insert(node_id, stream);
                    }
                    // Duplicate id or invalid registration: reject by
                    // closing the connection. An explicit shutdown is
                    // needed because the connection thread holds another
                    // descriptor for the same socket.
                    Err(_) => {
                        let _ = stream.shutdown(std::net::Shutdown::Both);
                    }
                }
            }
            LoopMsg::Node(msg) => {
                if let Err(e) = master.handle_node_message(msg) {
                    eprintln!("master: node message failed: {e}");
                    return;
                }
            }
            LoopMsg::NodeGone(node_id) => {
                node_writers.remove(&node_id);
            }
            LoopMsg::Client { req, reply } => {
                let _ = reply.send(master.handle_client(req));
            }
            LoopMsg::Tick => {
                let directives = match master.tick() {
                    Ok(d) => d,
                    Err(e) => {
                        eprintln!("master: tick failed: {e}");
                        return;
                    }
                };
                for (node_id, assign) in directives {
                    if let Some(stream) = node_writers.get_mut(&node_id) {
                        if wire::write_frame(stream, &assign).is_err() {
                            node_writers.remove(&node_id);
                        }
                    }
                }
            }
            LoopMsg::Shutdown => return,
        }
    }
}
