//! Links between roles. Participant, requester and SP traffic goes through
//! an in-process [`Bus`]; the SP-CSP link is either in-process or a
//! localhost TCP connection framed as `u32 length | message bytes`.

use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::thread::JoinHandle;
use std::time::Instant;

use crate::audit::Role;
use crate::encoding::DecodeError;
use crate::protocols::{CspChannel, CspEndpoint, ProtocolError};
use crate::sim::codec::WireMessage;
use crate::sim::ledger::MessageLedger;

/// Largest frame accepted from a socket.
pub const MAX_FRAME: usize = 64 << 20;

/// Delivers messages between actors through the byte codec and logs them.
#[derive(Debug, Clone)]
pub struct Bus {
    ledger: MessageLedger,
}

impl Bus {
    pub fn new(ledger: MessageLedger) -> Self {
        Self { ledger }
    }

    pub fn ledger(&self) -> &MessageLedger {
        &self.ledger
    }

    pub fn deliver(&self, from: Role, to: Role, msg: &WireMessage) -> Result<WireMessage, DecodeError> {
        self.ledger.record(from, to, msg);
        WireMessage::decode(&msg.encode())
    }
}

/// Records both directions of an SP-CSP exchange.
pub struct LedgerChannel<C> {
    inner: C,
    ledger: MessageLedger,
}

impl<C> LedgerChannel<C> {
    pub fn new(inner: C, ledger: MessageLedger) -> Self {
        Self { inner, ledger }
    }

    pub fn inner(&self) -> &C {
        &self.inner
    }

    pub fn into_inner(self) -> C {
        self.inner
    }
}

impl<C: CspChannel> CspChannel for LedgerChannel<C> {
    fn exchange(&mut self, request: WireMessage) -> Result<WireMessage, ProtocolError> {
        self.ledger.record(Role::Sp, Role::Csp, &request);
        let reply = self.inner.exchange(request)?;
        self.ledger.record(Role::Csp, Role::Sp, &reply);
        Ok(reply)
    }
}

pub fn write_frame<W: Write>(w: &mut W, bytes: &[u8]) -> io::Result<()> {
    let len = u32::try_from(bytes.len()).map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "frame too large"))?;
    w.write_all(&len.to_be_bytes())?;
    w.write_all(bytes)?;
    w.flush()
}

/// `Ok(None)` on a clean end of stream before a frame starts.
pub fn read_frame<R: Read>(r: &mut R) -> io::Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "frame exceeds limit"));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(Some(buf))
}

/// SP side of a socket link to CSP.
pub struct TcpCsp {
    stream: TcpStream,
}

impl TcpCsp {
    pub fn connect(addr: SocketAddr) -> io::Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(Self { stream })
    }
}

impl CspChannel for TcpCsp {
    fn exchange(&mut self, request: WireMessage) -> Result<WireMessage, ProtocolError> {
        let io_err = |e: io::Error| ProtocolError::Transport(e.to_string());
        write_frame(&mut self.stream, &request.encode()).map_err(io_err)?;
        let reply = read_frame(&mut self.stream)
            .map_err(io_err)?
            .ok_or_else(|| ProtocolError::Transport("CSP closed the connection".into()))?;
        Ok(WireMessage::decode(&reply)?)
    }
}

/// Serves one SP connection on an ephemeral localhost port until SP hangs
/// up, then hands the endpoint back.
pub fn spawn_csp_server(mut endpoint: CspEndpoint) -> io::Result<(SocketAddr, JoinHandle<io::Result<CspEndpoint>>)> {
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let addr = listener.local_addr()?;
    let handle = std::thread::spawn(move || {
        let (mut stream, _) = listener.accept()?;
        stream.set_nodelay(true)?;
        while let Some(frame) = read_frame(&mut stream)? {
            let reply = match WireMessage::decode(&frame) {
                Ok(msg) => endpoint.handle(&msg),
                Err(e) => crate::protocols::abort_message(0, 0, &e.to_string()),
            };
            write_frame(&mut stream, &reply.encode())?;
        }
        Ok(endpoint)
    });
    Ok((addr, handle))
}

/// Time source for acceptance windows.
pub trait Clock {
    fn now(&self) -> u64;
}

/// Simulator ticks, set explicitly by the scheduler.
#[derive(Debug, Clone, Copy, Default)]
pub struct TickClock(pub u64);

impl Clock for TickClock {
    fn now(&self) -> u64 {
        self.0
    }
}

/// Milliseconds since construction, for runs over real sockets.
#[derive(Debug, Clone, Copy)]
pub struct WallClock(Instant);

impl Default for WallClock {
    fn default() -> Self {
        Self(Instant::now())
    }
}

impl Clock for WallClock {
    fn now(&self) -> u64 {
        self.0.elapsed().as_millis() as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::codec::MessageKind;

    #[test]
    fn frames_roundtrip_and_reject_oversize() {
        let mut buf = Vec::new();
        write_frame(&mut buf, b"abc").unwrap();
        write_frame(&mut buf, b"").unwrap();
        let mut r = buf.as_slice();
        assert_eq!(read_frame(&mut r).unwrap().unwrap(), b"abc");
        assert_eq!(read_frame(&mut r).unwrap().unwrap(), b"");
        assert!(read_frame(&mut r).unwrap().is_none());
        let huge = ((MAX_FRAME + 1) as u32).to_be_bytes();
        assert!(read_frame(&mut huge.as_slice()).is_err());
        let mut cut = Vec::new();
        write_frame(&mut cut, b"abcdef").unwrap();
        cut.truncate(6);
        assert!(read_frame(&mut cut.as_slice()).is_err());
    }

    #[test]
    fn bus_records_and_roundtrips() {
        let bus = Bus::new(MessageLedger::new());
        let mut m = WireMessage::new(MessageKind::Submission, 3, 1);
        m.push(vec![1, 2, 3]);
        assert_eq!(bus.deliver(Role::Participant(3), Role::Sp, &m).unwrap(), m);
        assert_eq!(bus.ledger().records().len(), 1);
    }

    #[test]
    fn clocks() {
        assert_eq!(TickClock(5).now(), 5);
        let w = WallClock::default();
        assert!(w.now() < 60_000);
    }
}
