use std::io::{self, Read, Write};
use std::net::TcpStream;
use std::sync::mpsc::{channel, Receiver, Sender};

use thiserror::Error;

use super::{decode, encode, frame_len, MessageType, ProtocolError, WireMessage, FRAME_OVERHEAD, HEADER_LEN};

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("peer closed the connection")]
    Closed,
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("expected {expected} but received {actual}")]
    Unexpected {
        expected: MessageType,
        actual: MessageType,
    },
}

/// Moves whole frames between two endpoints, in order.
pub trait Transport: Send {
    fn send_frame(&mut self, frame: &[u8]) -> Result<(), TransportError>;
    fn recv_frame(&mut self) -> Result<Vec<u8>, TransportError>;
}

/// One end of an in-process duplex channel.
pub struct MemoryTransport {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
}

/// Two connected in-process endpoints.
pub fn memory_pair() -> (MemoryTransport, MemoryTransport) {
    let (a_tx, b_rx) = channel();
    let (b_tx, a_rx) = channel();
    (
        MemoryTransport { tx: a_tx, rx: a_rx },
        MemoryTransport { tx: b_tx, rx: b_rx },
    )
}

impl Transport for MemoryTransport {
    fn send_frame(&mut self, frame: &[u8]) -> Result<(), TransportError> {
        self.tx.send(frame.to_vec()).map_err(|_| TransportError::Closed)
    }

    fn recv_frame(&mut self) -> Result<Vec<u8>, TransportError> {
        self.rx.recv().map_err(|_| TransportError::Closed)
    }
}

/// Frames over a TCP stream; the header's payload length delimits frames.
pub struct TcpTransport {
    stream: TcpStream,
}

impl TcpTransport {
    pub fn new(stream: TcpStream) -> io::Result<Self> {
        stream.set_nodelay(true)?;
        Ok(Self { stream })
    }

    pub fn connect(addr: &str) -> io::Result<Self> {
        Self::new(TcpStream::connect(addr)?)
    }
}

impl Transport for TcpTransport {
    fn send_frame(&mut self, frame: &[u8]) -> Result<(), TransportError> {
        self.stream.write_all(frame)?;
        Ok(())
    }

    fn recv_frame(&mut self) -> Result<Vec<u8>, TransportError> {
        let mut frame = vec![0u8; HEADER_LEN];
        match self.stream.read_exact(&mut frame) {
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Err(TransportError::Closed),
            other => other?,
        }
        let total = frame_len(&frame)?;
        frame.resize(total, 0);
        self.stream.read_exact(&mut frame[HEADER_LEN..])?;
        Ok(frame)
    }
}

/// Per-direction byte counters, split by message type.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrafficStats {
    pub frames_sent: u64,
    pub frames_received: u64,
    pub bytes_sent: u64,
    pub bytes_received: u64,
    /// Indexed by message tag; frame bytes including header and CRC.
    pub sent_by_type: [u64; 9],
    pub received_by_type: [u64; 9],
    /// Indexed by message tag; payload bytes only.
    pub payload_sent_by_type: [u64; 9],
    pub payload_received_by_type: [u64; 9],
}

impl TrafficStats {
    /// The same traffic as counted by the other end of the link.
    pub fn mirrored(&self) -> Self {
        Self {
            frames_sent: self.frames_received,
            frames_received: self.frames_sent,
            bytes_sent: self.bytes_received,
            bytes_received: self.bytes_sent,
            sent_by_type: self.received_by_type,
            received_by_type: self.sent_by_type,
            payload_sent_by_type: self.payload_received_by_type,
            payload_received_by_type: self.payload_sent_by_type,
        }
    }

    fn record_sent(&mut self, tag: MessageType, frame_len: usize) {
        self.frames_sent += 1;
        self.bytes_sent += frame_len as u64;
        self.sent_by_type[tag as usize] += frame_len as u64;
        self.payload_sent_by_type[tag as usize] += (frame_len - FRAME_OVERHEAD) as u64;
    }

    fn record_received(&mut self, tag: MessageType, frame_len: usize) {
        self.frames_received += 1;
        self.bytes_received += frame_len as u64;
        self.received_by_type[tag as usize] += frame_len as u64;
        self.payload_received_by_type[tag as usize] += (frame_len - FRAME_OVERHEAD) as u64;
    }
}

/// A transport that speaks [`WireMessage`]s and counts traffic.
pub struct Link {
    transport: Box<dyn Transport>,
    stats: TrafficStats,
}

impl Link {
    pub fn new(transport: impl Transport + 'static) -> Self {
        Self {
            transport: Box::new(transport),
            stats: TrafficStats::default(),
        }
    }

    pub fn send(&mut self, msg: &WireMessage) -> Result<(), TransportError> {
        let frame = encode(msg)?;
        self.transport.send_frame(&frame)?;
        self.stats.record_sent(msg.message_type(), frame.len());
        Ok(())
    }

    pub fn recv(&mut self) -> Result<WireMessage, TransportError> {
        let frame = self.transport.recv_frame()?;
        let msg = decode(&frame)?;
        self.stats.record_received(msg.message_type(), frame.len());
        Ok(msg)
    }

    /// Receives a message and checks its type.
    pub fn expect(&mut self, expected: MessageType) -> Result<WireMessage, TransportError> {
        let msg = self.recv()?;
        if msg.message_type() != expected {
            return Err(TransportError::Unexpected {
                expected,
                actual: msg.message_type(),
            });
        }
        Ok(msg)
    }

    pub fn stats(&self) -> &TrafficStats {
        &self.stats
    }
}

#[cfg(test)]
mod tests {
    use std::net::TcpListener;

    use super::super::Body;
    use super::*;
    use crate::tensor::Tensor;

    fn sample_messages() -> Vec<WireMessage> {
        vec![
            WireMessage::new(0, 3, Body::Hello { num_samples: 12 }),
            WireMessage::new(
                2,
                3,
                Body::Activation {
                    label: 4,
                    tensor: Tensor::new(vec![2, 2], vec![1.0, -0.0, f32::MIN_POSITIVE, 7.5]).unwrap(),
                },
            ),
            WireMessage::new(2, 3, Body::Bye),
        ]
    }

    #[test]
    fn memory_pair_delivers_in_order_and_counts() {
        let (a, b) = memory_pair();
        let (mut a, mut b) = (Link::new(a), Link::new(b));
        let msgs = sample_messages();
        for m in &msgs {
            a.send(m).unwrap();
        }
        for m in &msgs {
            assert_eq!(&b.recv().unwrap(), m);
        }
        assert_eq!(a.stats().bytes_sent, b.stats().bytes_received);
        assert_eq!(a.stats().frames_sent, 3);
        let act = MessageType::Activation as usize;
        assert_eq!(a.stats().payload_sent_by_type[act], 1 + 1 + 8 + 16);
        assert_eq!(a.stats().sent_by_type[act], (26 + FRAME_OVERHEAD) as u64);
    }

    #[test]
    fn unexpected_type_and_closed_peer() {
        let (a, b) = memory_pair();
        let (mut a, mut b) = (Link::new(a), Link::new(b));
        a.send(&WireMessage::new(0, 0, Body::Bye)).unwrap();
        assert!(matches!(
            b.expect(MessageType::Hello),
            Err(TransportError::Unexpected { .. })
        ));
        drop(a);
        assert!(matches!(b.recv(), Err(TransportError::Closed)));
    }

    #[test]
    fn tcp_stream_framing() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap().to_string();
        let msgs = sample_messages();
        let sent = msgs.clone();
        let handle = std::thread::spawn(move || {
            let mut link = Link::new(TcpTransport::connect(&addr).unwrap());
            for m in &sent {
                link.send(m).unwrap();
            }
        });
        let (stream, _) = listener.accept().unwrap();
        let mut link = Link::new(TcpTransport::new(stream).unwrap());
        for m in &msgs {
            assert_eq!(&link.recv().unwrap(), m);
        }
        handle.join().unwrap();
        assert!(matches!(link.recv(), Err(TransportError::Closed)));
    }
}
