//! Binary checkpoint format.
//!
//! Layout, all integers little-endian u32 unless noted:
//!
//! ```text
//! magic    8 bytes  "RLAGCKPT"
//! version  u32      currently 1
//! config   7 x u32  n_layers, n_heads, d_model, d_ff, vocab_size,
//!                   context_len, seed
//! count    u32      number of parameter blocks
//! blocks   repeated: name_len u32, name bytes (utf-8),
//!                    ndim u32, dims (u32 each),
//!                    data (f64 little-endian, row-major)
//! ```

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::lm::{LmConfig, LmParams};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"RLAGCKPT";
const VERSION: u32 = 1;

pub fn save(params: &LmParams, path: &Path) -> Result<()> {
    let io_err = |e| Error::io(path.display().to_string(), e);
    let file = std::fs::File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    let cfg = params.config();

    w.write_all(MAGIC).map_err(io_err)?;
    write_u32(&mut w, VERSION).map_err(io_err)?;
    for field in [
        cfg.n_layers as u32,
        cfg.n_heads as u32,
        cfg.d_model as u32,
        cfg.d_ff as u32,
        cfg.vocab_size as u32,
        cfg.context_len as u32,
        cfg.seed,
    ] {
        write_u32(&mut w, field).map_err(io_err)?;
    }

    let names = cfg.param_names();
    write_u32(&mut w, names.len() as u32).map_err(io_err)?;
    for (name, tensor) in names.iter().zip(params.tensors()) {
        write_u32(&mut w, name.len() as u32).map_err(io_err)?;
        w.write_all(name.as_bytes()).map_err(io_err)?;
        write_u32(&mut w, tensor.shape().len() as u32).map_err(io_err)?;
        for &d in tensor.shape() {
            write_u32(&mut w, d as u32).map_err(io_err)?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

pub fn load(path: &Path) -> Result<LmParams> {
    let io_err = |e| Error::io(path.display().to_string(), e);
    let fmt_err = |detail: String| Error::Format {
        path: path.display().to_string(),
        detail,
    };
    let file = std::fs::File::open(path).map_err(io_err)?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != MAGIC {
        return Err(fmt_err(format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut r).map_err(io_err)?;
    if version != VERSION {
        return Err(fmt_err(format!(
            "unsupported checkpoint version {version}, expected {VERSION}"
        )));
    }

    let fields: Vec<u32> = (0..7)
        .map(|_| read_u32(&mut r))
        .collect::<std::io::Result<_>>()
        .map_err(io_err)?;
    let config = LmConfig {
        n_layers: fields[0] as usize,
        n_heads: fields[1] as usize,
        d_model: fields[2] as usize,
        d_ff: fields[3] as usize,
        vocab_size: fields[4] as usize,
        context_len: fields[5] as usize,
        seed: fields[6],
    };

    let count = read_u32(&mut r).map_err(io_err)? as usize;
    let expected_names = config.param_names();
    if count != expected_names.len() {
        return Err(fmt_err(format!(
            "checkpoint has {count} parameter blocks, config implies {}",
            expected_names.len()
        )));
    }

    let mut tensors = Vec::with_capacity(count);
    for expected in &expected_names {
        let name_len = read_u32(&mut r).map_err(io_err)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(io_err)?;
        let name = String::from_utf8(name)
            .map_err(|e| fmt_err(format!("non-utf8 parameter name: {e}")))?;
        if &name != expected {
            return Err(fmt_err(format!(
                "parameter block {name:?} out of order, expected {expected:?}"
            )));
        }
        let ndim = read_u32(&mut r).map_err(io_err)? as usize;
        let shape: Vec<usize> = (0..ndim)
            .map(|_| read_u32(&mut r).map(|d| d as usize))
            .collect::<std::io::Result<_>>()
            .map_err(io_err)?;
        let n: usize = shape.iter().product();
        let mut data = vec![0.0f64; n];
        let mut buf = [0u8; 8];
        for v in data.iter_mut() {
            r.read_exact(&mut buf).map_err(io_err)?;
            *v = f64::from_le_bytes(buf);
        }
        tensors.push(Arc::new(Tensor::new(shape, data)?));
    }

    LmParams::from_tensors(config, tensors)
}

fn write_u32<W: Write>(w: &mut W, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}
