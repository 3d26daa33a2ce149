//! Length-prefixed frame transport over a byte stream, and the endpoint
//! abstraction the client uses to reach the servers.

use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use crate::server::Server;

/// Upper bound on a single frame; larger prefixes are treated as corrupt.
pub const MAX_FRAME_LEN: usize = 64 << 20;

pub fn write_frame<W: Write>(w: &mut W, frame: &[u8]) -> io::Result<()> {
    let len = u32::try_from(frame.len())
        .ok()
        .filter(|&n| n as usize <= MAX_FRAME_LEN)
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "frame too large"))?;
    w.write_all(&len.to_be_bytes())?;
    w.write_all(frame)?;
    w.flush()
}

/// Returns `None` on a clean end of stream between frames.
pub fn read_frame<R: Read>(r: &mut R) -> io::Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME_LEN {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "frame length over limit"));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(Some(buf))
}

/// Where the client sends requests.
pub trait Endpoint {
    fn exchange(&mut self, request: &[u8]) -> io::Result<Vec<u8>>;
}

pub struct InProcess(pub Arc<Server>);

impl Endpoint for InProcess {
    fn exchange(&mut self, request: &[u8]) -> io::Result<Vec<u8>> {
        Ok(self.0.handle(request))
    }
}

/// Wraps an endpoint and keeps every request/response pair it carried.
pub struct Recorder<E> {
    pub inner: E,
    pub exchanges: Vec<(Vec<u8>, Vec<u8>)>,
}

impl<E> Recorder<E> {
    pub fn new(inner: E) -> Self {
        Recorder { inner, exchanges: Vec::new() }
    }

    pub fn last_response(&self) -> Option<&[u8]> {
        self.exchanges.last().map(|(_, r)| r.as_slice())
    }
}

impl<E: Endpoint> Endpoint for Recorder<E> {
    fn exchange(&mut self, request: &[u8]) -> io::Result<Vec<u8>> {
        let response = self.inner.exchange(request)?;
        self.exchanges.push((request.to_vec(), response.clone()));
        Ok(response)
    }
}

impl<E: Endpoint + ?Sized> Endpoint for &mut E {
    fn exchange(&mut self, request: &[u8]) -> io::Result<Vec<u8>> {
        (**self).exchange(request)
    }
}

impl<E: Endpoint + ?Sized> Endpoint for Box<E> {
    fn exchange(&mut self, request: &[u8]) -> io::Result<Vec<u8>> {
        (**self).exchange(request)
    }
}

pub struct TcpEndpoint {
    stream: TcpStream,
}

impl TcpEndpoint {
    pub fn connect<A: ToSocketAddrs>(addr: A) -> io::Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(TcpEndpoint { stream })
    }
}

impl Endpoint for TcpEndpoint {
    fn exchange(&mut self, request: &[u8]) -> io::Result<Vec<u8>> {
        write_frame(&mut self.stream, request)?;
        read_frame(&mut self.stream)?
            .ok_or_else(|| io::Error::new(io::ErrorKind::UnexpectedEof, "server closed the connection"))
    }
}

fn serve_connection(server: &Server, mut stream: TcpStream) -> io::Result<()> {
    stream.set_nodelay(true)?;
    while let Some(request) = read_frame(&mut stream)? {
        let response = server.handle(&request);
        write_frame(&mut stream, &response)?;
    }
    Ok(())
}

/// Accepts connections until `shutdown` is set, one thread per connection.
pub fn serve(listener: TcpListener, server: Arc<Server>, shutdown: Arc<AtomicBool>) -> io::Result<()> {
    listener.set_nonblocking(true)?;
    while !shutdown.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, peer)) => {
                stream.set_nonblocking(false)?;
                log::info!("connection from {peer}");
                let server = Arc::clone(&server);
                thread::spawn(move || {
                    if let Err(e) = serve_connection(&server, stream) {
                        log::warn!("connection {peer} ended: {e}");
                    }
                });
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(5)),
            Err(e) => return Err(e),
        }
    }
    Ok(())
}

/// A listener running on a background thread; stops when dropped.
pub struct ServerHandle {
    pub addr: SocketAddr,
    shutdown: Arc<AtomicBool>,
    thread: Option<JoinHandle<io::Result<()>>>,
}

impl ServerHandle {
    pub fn spawn<A: ToSocketAddrs>(addr: A, server: Arc<Server>) -> io::Result<ServerHandle> {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        let shutdown = Arc::new(AtomicBool::new(false));
        let flag = Arc::clone(&shutdown);
        let thread = thread::spawn(move || serve(listener, server, flag));
        Ok(ServerHandle { addr, shutdown, thread: Some(thread) })
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}
