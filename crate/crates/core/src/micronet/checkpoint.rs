//! Binary parameter snapshots.
//!
//! Layout: 8 magic bytes, the network configuration as little-endian `u32`
//! words, a `u64` parameter count, then every parameter as a little-endian
//! `f64` in graph order.

use std::io::{Read, Write};

use super::{Network, NetworkConfig, SCALES};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"OBBSEGN1";

fn config_words(cfg: &NetworkConfig) -> Vec<u32> {
    let mut words = vec![
        cfg.input_size as u32,
        cfg.channel_divisor as u32,
        cfg.convset_repeats as u32,
        cfg.classes as u32,
        cfg.in_channels as u32,
    ];
    words.extend(cfg.residual_repeats.iter().map(|&r| r as u32));
    words
}

const CONFIG_WORDS: usize = 5 + SCALES;

pub fn write_params<W: Write>(net: &Network, mut out: W) -> Result<()> {
    out.write_all(MAGIC)?;
    for w in config_words(net.config()) {
        out.write_all(&w.to_le_bytes())?;
    }
    out.write_all(&(net.params.len() as u64).to_le_bytes())?;
    let mut buf = Vec::with_capacity(net.params.len() * 8);
    for p in &net.params {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format(format!("checkpoint truncated in {what}")),
        _ => Error::Io(e),
    })
}

/// Reads a snapshot and rebuilds the network it describes.
pub fn read_params<R: Read>(mut input: R) -> Result<Network> {
    let mut magic = [0u8; 8];
    read_exact(&mut input, &mut magic, "header")?;
    if &magic != MAGIC {
        return Err(Error::Format("not a network checkpoint (bad magic)".into()));
    }
    let mut words = [0u32; CONFIG_WORDS];
    for w in &mut words {
        let mut b = [0u8; 4];
        read_exact(&mut input, &mut b, "configuration")?;
        *w = u32::from_le_bytes(b);
    }
    let mut repeats = [0usize; SCALES];
    for (r, &w) in repeats.iter_mut().zip(&words[5..]) {
        *r = w as usize;
    }
    let cfg = NetworkConfig {
        input_size: words[0] as usize,
        channel_divisor: words[1] as usize,
        convset_repeats: words[2] as usize,
        classes: words[3] as usize,
        in_channels: words[4] as usize,
        residual_repeats: repeats,
    };
    let mut net = Network::build(&cfg, 0)?;
    let mut b = [0u8; 8];
    read_exact(&mut input, &mut b, "parameter count")?;
    let count = u64::from_le_bytes(b) as usize;
    if count != net.params.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {count} parameters, configuration needs {}",
            net.params.len()
        )));
    }
    let mut buf = vec![0u8; count * 8];
    read_exact(&mut input, &mut buf, "parameters")?;
    for (p, chunk) in net.params.iter_mut().zip(buf.chunks_exact(8)) {
        *p = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
    }
    Ok(net)
}

pub fn save(net: &Network, path: &std::path::Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write_params(net, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &std::path::Path) -> Result<Network> {
    let file = std::fs::File::open(path)?;
    read_params(std::io::BufReader::new(file))
}
