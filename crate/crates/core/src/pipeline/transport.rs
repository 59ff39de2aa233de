//! Reliable ordered byte streams for the two roles: an in-process duplex
//! pipe and TCP.

use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{channel, Receiver, Sender};

use crate::error::Result;

use super::protocol::{recv, send, Message};

/// One end of a connection.
pub struct Endpoint {
    reader: Box<dyn Read + Send>,
    writer: Box<dyn Write + Send>,
    sent_reals: usize,
}

impl Endpoint {
    pub fn new(reader: Box<dyn Read + Send>, writer: Box<dyn Write + Send>) -> Self {
        Self { reader, writer, sent_reals: 0 }
    }

    pub fn send(&mut self, msg: &Message) -> Result<()> {
        send(&mut self.writer, msg)?;
        self.sent_reals += msg.payload_reals();
        Ok(())
    }

    pub fn recv(&mut self) -> Result<Message> {
        recv(&mut self.reader)
    }

    /// 8-byte payload values sent so far.
    pub fn sent_reals(&self) -> usize {
        self.sent_reals
    }

    pub fn tcp(stream: TcpStream) -> Result<Self> {
        stream.set_nodelay(true)?;
        let reader = BufReader::new(stream.try_clone()?);
        Ok(Self::new(Box::new(reader), Box::new(BufWriter::new(stream))))
    }

    /// Connects to `addr`, retrying for up to `attempts` × 100 ms while the
    /// listener comes up.
    pub fn connect(addr: impl ToSocketAddrs + Clone, attempts: usize) -> Result<Self> {
        let mut last = None;
        for _ in 0..attempts.max(1) {
            match TcpStream::connect(addr.clone()) {
                Ok(s) => return Self::tcp(s),
                Err(e) => {
                    last = Some(e);
                    std::thread::sleep(std::time::Duration::from_millis(100));
                }
            }
        }
        Err(last.expect("at least one attempt").into())
    }

    /// Accepts a single connection on `listener`.
    pub fn accept(listener: &TcpListener) -> Result<Self> {
        let (s, _) = listener.accept()?;
        Self::tcp(s)
    }
}

struct ChannelWriter {
    tx: Sender<Vec<u8>>,
    buf: Vec<u8>,
}

impl Write for ChannelWriter {
    fn write(&mut self, data: &[u8]) -> io::Result<usize> {
        self.buf.extend_from_slice(data);
        Ok(data.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        if !self.buf.is_empty() {
            let chunk = std::mem::take(&mut self.buf);
            self.tx.send(chunk).map_err(|_| io::Error::new(io::ErrorKind::BrokenPipe, "peer dropped"))?;
        }
        Ok(())
    }
}

impl Drop for ChannelWriter {
    fn drop(&mut self) {
        let _ = self.flush();
    }
}

struct ChannelReader {
    rx: Receiver<Vec<u8>>,
    chunk: Vec<u8>,
    pos: usize,
}

impl Read for ChannelReader {
    fn read(&mut self, out: &mut [u8]) -> io::Result<usize> {
        while self.pos == self.chunk.len() {
            match self.rx.recv() {
                Ok(c) => {
                    self.chunk = c;
                    self.pos = 0;
                }
                // Sender gone: end of stream.
                Err(_) => return Ok(0),
            }
        }
        let n = out.len().min(self.chunk.len() - self.pos);
        out[..n].copy_from_slice(&self.chunk[self.pos..self.pos + n]);
        self.pos += n;
        Ok(n)
    }
}

fn pipe() -> (ChannelWriter, ChannelReader) {
    let (tx, rx) = channel();
    (ChannelWriter { tx, buf: Vec::new() }, ChannelReader { rx, chunk: Vec::new(), pos: 0 })
}

/// Two connected in-process endpoints.
pub fn duplex() -> (Endpoint, Endpoint) {
    let (w1, r1) = pipe();
    let (w2, r2) = pipe();
    (Endpoint::new(Box::new(r2), Box::new(w1)), Endpoint::new(Box::new(r1), Box::new(w2)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplex_carries_messages_both_ways() {
        let (mut a, mut b) = duplex();
        a.send(&Message::DeltaN(vec![1.0, 2.0])).unwrap();
        b.send(&Message::Error("x".into())).unwrap();
        assert_eq!(b.recv().unwrap(), Message::DeltaN(vec![1.0, 2.0]));
        assert_eq!(a.recv().unwrap(), Message::Error("x".into()));
        assert_eq!(a.sent_reals(), 2);
        drop(a);
        assert!(b.recv().is_err());
    }

    #[test]
    fn tcp_loopback() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let t = std::thread::spawn(move || {
            let mut s = Endpoint::accept(&listener).unwrap();
            let m = s.recv().unwrap();
            s.send(&m).unwrap();
        });
        let mut c = Endpoint::connect(addr, 10).unwrap();
        c.send(&Message::ScaleGrid(vec![0.5])).unwrap();
        assert_eq!(c.recv().unwrap(), Message::ScaleGrid(vec![0.5]));
        t.join().unwrap();
    }
}
