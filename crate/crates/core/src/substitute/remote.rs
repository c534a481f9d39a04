//! A posterior oracle over TCP.
//!
//! On connect the server sends the class count as a u32. Each request is one
//! `MELSPEC1` block; each response is a u32 length followed by that many f32
//! probabilities, all little-endian. A zero length means the server's query
//! budget is spent.

use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use super::PosteriorOracle;
use crate::audiofeat::{encode_mel, read_mel_from, MelSpectrogram};
use crate::error::{Error, Result};
use crate::numkernel::ProbVector;

fn net_err(e: std::io::Error) -> Error {
    Error::io("<oracle socket>", e)
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn serve_connection(stream: TcpStream, oracle: &dyn PosteriorOracle) -> Result<()> {
    let mut reader = BufReader::new(stream.try_clone().map_err(net_err)?);
    let mut writer = BufWriter::new(stream);
    writer
        .write_all(&(oracle.n_classes() as u32).to_le_bytes())
        .and_then(|_| writer.flush())
        .map_err(net_err)?;
    loop {
        // A clean close between requests ends the session.
        let mut first = [0u8; 1];
        match reader.read(&mut first) {
            Ok(0) => return Ok(()),
            Ok(_) => {}
            Err(e) if e.kind() == ErrorKind::ConnectionReset => return Ok(()),
            Err(e) => return Err(net_err(e)),
        }
        let (mel, _) = read_mel_from(&mut first.as_slice().chain(&mut reader))?;
        let mut out = Vec::new();
        match oracle.query(&mel) {
            Ok(p) => {
                out.extend_from_slice(&(p.len() as u32).to_le_bytes());
                for &x in p.probs() {
                    out.extend_from_slice(&(x as f32).to_le_bytes());
                }
            }
            Err(Error::BudgetExhausted { .. }) => out.extend_from_slice(&0u32.to_le_bytes()),
            Err(e) => return Err(e),
        }
        writer
            .write_all(&out)
            .and_then(|_| writer.flush())
            .map_err(net_err)?;
    }
}

/// Answers queries on `listener`, one connection at a time. Stops after
/// `max_connections` sessions when given.
pub fn serve_oracle(
    listener: &TcpListener,
    oracle: &dyn PosteriorOracle,
    max_connections: Option<usize>,
) -> Result<()> {
    for (served, stream) in listener.incoming().enumerate() {
        serve_connection(stream.map_err(net_err)?, oracle)?;
        if max_connections.is_some_and(|m| served + 1 >= m) {
            break;
        }
    }
    Ok(())
}

/// Client side of [`serve_oracle`].
#[derive(Debug)]
pub struct RemoteOracle {
    stream: Mutex<TcpStream>,
    n_classes: usize,
    count: AtomicU64,
}

impl RemoteOracle {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self> {
        let mut stream = TcpStream::connect(addr).map_err(net_err)?;
        stream.set_nodelay(true).map_err(net_err)?;
        let n_classes = read_u32(&mut stream).map_err(net_err)? as usize;
        if n_classes < 2 {
            return Err(Error::format(
                "oracle greeting",
                format!("{n_classes} classes"),
            ));
        }
        Ok(RemoteOracle {
            stream: Mutex::new(stream),
            n_classes,
            count: AtomicU64::new(0),
        })
    }
}

impl PosteriorOracle for RemoteOracle {
    fn query(&self, m: &MelSpectrogram) -> Result<ProbVector> {
        let mut stream = self.stream.lock().expect("oracle socket poisoned");
        stream.write_all(&encode_mel(m, 0)).map_err(net_err)?;
        let n = read_u32(&mut *stream).map_err(net_err)? as usize;
        if n == 0 {
            let used = self.count.load(Ordering::SeqCst);
            return Err(Error::BudgetExhausted { used, budget: used });
        }
        if n != self.n_classes {
            return Err(Error::format(
                "oracle answer",
                format!("{n} classes, expected {}", self.n_classes),
            ));
        }
        let mut body = vec![0u8; 4 * n];
        stream.read_exact(&mut body).map_err(net_err)?;
        let raw: Vec<f64> = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        // f32 transport loses the exact unit sum.
        let s: f64 = raw.iter().sum();
        self.count.fetch_add(1, Ordering::SeqCst);
        ProbVector::new(raw.into_iter().map(|p| (p / s).min(1.0)).collect())
    }

    fn query_count(&self) -> u64 {
        self.count.load(Ordering::SeqCst)
    }

    fn n_classes(&self) -> usize {
        self.n_classes
    }
}
