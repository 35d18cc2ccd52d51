//! Versioned adapter parameter files.
//!
//! Text layout (UTF-8, one token group per line):
//!
//! ```text
//! sail-adapter 1 text
//! d_in 32
//! widths 32 32
//! classes 10
//! eps_norm 0.00001
//! values 2410
//! <one f64 per line, shortest round-trip decimal>
//! ```
//!
//! Binary layout: magic `SAILADP1`, then little-endian `u32` d_in, `u32`
//! block count, one `u32` per width, `u32` classes, `f64` eps_norm, `u64`
//! value count and the values as `f64`.
//!
//! Values are stored in order: for each block its weight (row-major) and
//! bias, then the output weight and bias, then the trainable vector in depth
//! order.

use std::io::{BufRead, Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{AdapterArchitecture, AdapterParams, DenseBlock};
use crate::error::{Result, SailError};
use crate::linalg::Matrix;

const TEXT_MAGIC: &str = "sail-adapter";
const BINARY_MAGIC: &[u8; 8] = b"SAILADP1";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SnapshotEncoding {
    #[default]
    Text,
    Binary,
}

impl FromStr for SnapshotEncoding {
    type Err = SailError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(Self::Text),
            "binary" => Ok(Self::Binary),
            other => Err(SailError::Config(format!("unknown snapshot encoding `{other}`"))),
        }
    }
}

fn all_values(p: &AdapterParams) -> Vec<f64> {
    let mut v = p.frozen_values();
    v.extend(p.flatten());
    v
}

fn value_count(arch: &AdapterArchitecture) -> usize {
    let mut fan_in = arch.d_in;
    let mut total = 0;
    for &w in &arch.widths {
        total += w * fan_in + w;
        fan_in = w;
    }
    total + arch.classes * fan_in + arch.classes + arch.trainable_len()
}

fn from_values(arch: AdapterArchitecture, values: &[f64]) -> Result<AdapterParams> {
    arch.validate()?;
    if values.len() != value_count(&arch) {
        return Err(SailError::parse(
            "values",
            format!("expected {} values, found {}", value_count(&arch), values.len()),
        ));
    }
    let mut off = 0;
    let mut take = |len: usize| {
        let s = &values[off..off + len];
        off += len;
        s.to_vec()
    };
    let mut fan_in = arch.d_in;
    let mut blocks = Vec::new();
    for &w in &arch.widths {
        let weight = Matrix::from_vec(w, fan_in, take(w * fan_in));
        let bias = take(w);
        blocks.push(DenseBlock { weight, bias });
        fan_in = w;
    }
    let out_weight = Matrix::from_vec(arch.classes, fan_in, take(arch.classes * fan_in));
    let out_bias = take(arch.classes);
    let trainable = take(arch.trainable_len());
    let mut p = AdapterParams {
        gamma: arch.widths.iter().map(|&w| vec![0.0; w]).collect(),
        beta: arch.widths.iter().map(|&w| vec![0.0; w]).collect(),
        arch,
        blocks,
        out_weight,
        out_bias,
    };
    p.unflatten(&trainable)?;
    Ok(p)
}

pub fn write_snapshot<W: Write>(params: &AdapterParams, encoding: SnapshotEncoding, mut w: W) -> Result<()> {
    let arch = params.architecture();
    let values = all_values(params);
    match encoding {
        SnapshotEncoding::Text => {
            writeln!(w, "{TEXT_MAGIC} {VERSION} text")?;
            writeln!(w, "d_in {}", arch.d_in)?;
            let widths: Vec<String> = arch.widths.iter().map(|x| x.to_string()).collect();
            writeln!(w, "widths {}", widths.join(" "))?;
            writeln!(w, "classes {}", arch.classes)?;
            writeln!(w, "eps_norm {:?}", arch.eps_norm)?;
            writeln!(w, "values {}", values.len())?;
            for v in values {
                writeln!(w, "{v:?}")?;
            }
        }
        SnapshotEncoding::Binary => {
            w.write_all(BINARY_MAGIC)?;
            let u32_of = |x: usize| (x as u32).to_le_bytes();
            w.write_all(&u32_of(arch.d_in))?;
            w.write_all(&u32_of(arch.widths.len()))?;
            for &x in &arch.widths {
                w.write_all(&u32_of(x))?;
            }
            w.write_all(&u32_of(arch.classes))?;
            w.write_all(&arch.eps_norm.to_le_bytes())?;
            w.write_all(&(values.len() as u64).to_le_bytes())?;
            for v in values {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

/// Reads either encoding, detected from the leading bytes.
pub fn read_snapshot<R: BufRead>(mut r: R) -> Result<AdapterParams> {
    let head = r.fill_buf()?;
    if head.starts_with(BINARY_MAGIC) {
        read_binary(r)
    } else {
        read_text(r)
    }
}

fn read_binary<R: Read>(mut r: R) -> Result<AdapterParams> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    let read_u32 = |r: &mut R| -> Result<usize> {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b) as usize)
    };
    let d_in = read_u32(&mut r)?;
    let depth = read_u32(&mut r)?;
    if depth > 1024 {
        return Err(SailError::parse("header", format!("implausible depth {depth}")));
    }
    let widths = (0..depth).map(|_| read_u32(&mut r)).collect::<Result<Vec<_>>>()?;
    let classes = read_u32(&mut r)?;
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let eps_norm = f64::from_le_bytes(b8);
    r.read_exact(&mut b8)?;
    let count = u64::from_le_bytes(b8) as usize;
    let arch = AdapterArchitecture {
        d_in,
        widths,
        classes,
        eps_norm,
    };
    if count != value_count(&arch) {
        return Err(SailError::parse("header", "value count does not match architecture"));
    }
    let mut values = Vec::with_capacity(count);
    for _ in 0..count {
        r.read_exact(&mut b8)?;
        values.push(f64::from_le_bytes(b8));
    }
    from_values(arch, &values)
}

fn read_text<R: BufRead>(r: R) -> Result<AdapterParams> {
    let mut lines = r.lines().enumerate();
    let mut next = |what: &str| -> Result<(usize, String)> {
        match lines.next() {
            Some((i, line)) => Ok((i + 1, line?)),
            None => Err(SailError::parse("end of file", format!("missing {what}"))),
        }
    };
    let (ln, header) = next("header")?;
    let toks: Vec<&str> = header.split_whitespace().collect();
    if toks.len() != 3 || toks[0] != TEXT_MAGIC || toks[2] != "text" {
        return Err(SailError::parse(format!("line {ln}"), "not a text adapter snapshot"));
    }
    if toks[1] != VERSION.to_string() {
        return Err(SailError::parse(format!("line {ln}"), format!("unsupported version {}", toks[1])));
    }
    let mut field = |key: &str| -> Result<(usize, Vec<String>)> {
        let (ln, line) = next(key)?;
        let mut it = line.split_whitespace();
        if it.next() != Some(key) {
            return Err(SailError::parse(format!("line {ln}"), format!("expected `{key}`")));
        }
        Ok((ln, it.map(str::to_string).collect()))
    };
    let parse_usize = |ln: usize, s: &str| {
        s.parse::<usize>()
            .map_err(|e| SailError::parse(format!("line {ln}"), e.to_string()))
    };
    let (ln, d) = field("d_in")?;
    let d_in = parse_usize(ln, d.first().map_or("", String::as_str))?;
    let (ln, ws) = field("widths")?;
    let widths = ws.iter().map(|s| parse_usize(ln, s)).collect::<Result<Vec<_>>>()?;
    let (ln, c) = field("classes")?;
    let classes = parse_usize(ln, c.first().map_or("", String::as_str))?;
    let (ln, e) = field("eps_norm")?;
    let eps_norm = e
        .first()
        .map_or("", String::as_str)
        .parse::<f64>()
        .map_err(|err| SailError::parse(format!("line {ln}"), err.to_string()))?;
    let (ln, cnt) = field("values")?;
    let count = parse_usize(ln, cnt.first().map_or("", String::as_str))?;
    let mut values = Vec::with_capacity(count);
    for _ in 0..count {
        let (ln, line) = next("value")?;
        values.push(
            line.trim()
                .parse::<f64>()
                .map_err(|e| SailError::parse(format!("line {ln}"), e.to_string()))?,
        );
    }
    from_values(
        AdapterArchitecture {
            d_in,
            widths,
            classes,
            eps_norm,
        },
        &values,
    )
}
