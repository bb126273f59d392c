//! Prediction service over a byte stream.
//!
//! Request: 4-byte big-endian length, then that many bytes of canonical image
//! encoding. Response: 4-byte big-endian class index. A connection carries any
//! number of request/response pairs.

use std::cell::RefCell;
use std::io::{self, ErrorKind, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use crate::image::Image;
use crate::keying;
use crate::oracle::{Classifier, OracleError};

/// Largest accepted request body.
pub const MAX_REQUEST: usize = 64 << 20;
const ATTEMPTS: usize = 3;

pub fn write_request<W: Write>(w: &mut W, image: &Image) -> io::Result<()> {
    let body = keying::canonical_bytes(image);
    w.write_all(&(body.len() as u32).to_be_bytes())?;
    w.write_all(&body)?;
    w.flush()
}

/// `Ok(None)` on a clean end of stream before a new request.
pub fn read_request<R: Read>(r: &mut R) -> io::Result<Option<Image>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let n = u32::from_be_bytes(len) as usize;
    if n > MAX_REQUEST {
        return Err(io::Error::new(ErrorKind::InvalidData, "request too large"));
    }
    let mut body = vec![0u8; n];
    r.read_exact(&mut body)?;
    keying::image_from_canonical(&body)
        .map(Some)
        .map_err(|e| io::Error::new(ErrorKind::InvalidData, e))
}

pub fn write_response<W: Write>(w: &mut W, class: u32) -> io::Result<()> {
    w.write_all(&class.to_be_bytes())?;
    w.flush()
}

pub fn read_response<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_be_bytes(b))
}

/// Answer requests on one connection until the peer closes it. A request the
/// classifier rejects closes the connection.
pub fn serve_connection<C: Classifier + ?Sized>(stream: &mut TcpStream, classifier: &C) -> io::Result<usize> {
    let mut served = 0;
    while let Some(img) = read_request(stream)? {
        let class = classifier
            .classify(&img)
            .map_err(|e| io::Error::new(ErrorKind::InvalidInput, e.to_string()))?;
        write_response(stream, class as u32)?;
        served += 1;
    }
    Ok(served)
}

/// A background prediction service; stops when dropped.
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn endpoint(&self) -> String {
        self.addr.to_string()
    }

    pub fn stop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Serve `classifier` on `listener`, one thread per connection.
pub fn spawn_server<C>(listener: TcpListener, classifier: C) -> io::Result<ServerHandle>
where
    C: Classifier + Send + Sync + 'static,
{
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let flag = stop.clone();
    let classifier = Arc::new(classifier);
    let thread = std::thread::spawn(move || {
        for conn in listener.incoming() {
            if flag.load(Ordering::SeqCst) {
                break;
            }
            let Ok(mut stream) = conn else { continue };
            let c = classifier.clone();
            std::thread::spawn(move || {
                let _ = serve_connection(&mut stream, &*c);
                let _ = stream.shutdown(Shutdown::Both);
            });
        }
    });
    Ok(ServerHandle {
        addr,
        stop,
        thread: Some(thread),
    })
}

/// Client side: one persistent connection, reopened on failure, three
/// attempts per query.
pub struct RemoteOracle {
    endpoint: String,
    timeout: Duration,
    conn: RefCell<Option<TcpStream>>,
}

impl RemoteOracle {
    pub fn new(endpoint: &str, timeout: Duration) -> Self {
        Self {
            endpoint: endpoint.to_string(),
            timeout,
            conn: RefCell::new(None),
        }
    }

    fn connect(&self) -> io::Result<TcpStream> {
        let mut last = io::Error::new(ErrorKind::NotFound, "endpoint resolved to no address");
        for addr in self.endpoint.to_socket_addrs()? {
            match TcpStream::connect_timeout(&addr, self.timeout) {
                Ok(s) => {
                    s.set_read_timeout(Some(self.timeout))?;
                    s.set_write_timeout(Some(self.timeout))?;
                    s.set_nodelay(true)?;
                    return Ok(s);
                }
                Err(e) => last = e,
            }
        }
        Err(last)
    }

    fn query_once(&self, image: &Image) -> io::Result<u32> {
        let mut slot = self.conn.borrow_mut();
        if slot.is_none() {
            *slot = Some(self.connect()?);
        }
        let stream = slot.as_mut().expect("connected above");
        let out = write_request(stream, image).and_then(|_| read_response(stream));
        if out.is_err() {
            *slot = None;
        }
        out
    }
}

impl Classifier for RemoteOracle {
    fn classes(&self) -> Option<usize> {
        None
    }

    fn classify(&self, image: &Image) -> Result<usize, OracleError> {
        let mut last = None;
        for _ in 0..ATTEMPTS {
            match self.query_once(image) {
                Ok(c) => return Ok(c as usize),
                Err(e) => last = Some(e),
            }
        }
        Err(OracleError::Transport(format!(
            "{}: {}",
            self.endpoint,
            last.expect("at least one attempt")
        )))
    }
}
