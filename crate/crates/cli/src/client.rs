//! One-shot request/response client for the master API.

use std::net::TcpStream;
use std::time::Duration;

use hyper_core::wire::{read_frame, write_frame, ClientRequest, ClientResponse};

use crate::CliError;

pub fn request(master: &str, req: &ClientRequest) -> Result<ClientResponse, CliError> {
    let transport = |e: String| CliError::transport(format!("master {master}: {e}"));
    let mut stream = TcpStream::connect(master).map_err(|e| transport(e.to_string()))?;
    stream.set_nodelay(true).ok();
    stream
        .set_read_timeout(Some(Duration::from_secs(30)))
        .ok();
    write_frame(&mut stream, req).map_err(|e| transport(e.to_string()))?;
    read_frame(&mut stream).map_err(|e| transport(e.to_string()))
}
