//! Denoiser checkpoint container.
//!
//! Layout: magic `PNPTTT01`, version `u32`, the denoiser config block, then
//! per layer the weights and biases, then per layer the spectral state, all
//! as little-endian `f64`, followed by an 8-byte checksum of the preceding
//! bytes. Array lengths follow from the config block.

use std::path::Path;

use pnpttt_core::conv::ConvKernel;
use pnpttt_core::denoiser::{DenoiserConfig, DenoiserParams};

use crate::binio::{format_err, read_file, write_file, Reader, Writer};
use crate::error::Result;

pub const MAGIC: &[u8; 8] = b"PNPTTT01";
pub const VERSION: u32 = 1;

fn to_u32(path: &Path, v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| format_err(path, format!("{what} does not fit in u32")))
}

pub fn encode(params: &DenoiserParams) -> Result<Vec<u8>> {
    params.validate()?;
    let here = Path::new("<checkpoint>");
    let c = &params.config;
    let mut w = Writer::new();
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.u32(to_u32(here, c.depth, "depth")?);
    w.u32(to_u32(here, c.channels, "channels")?);
    w.u32(to_u32(here, c.kernel_size, "kernel size")?);
    w.u8(c.residual as u8);
    w.u8(c.spectral_norm as u8);
    w.u32(to_u32(here, c.power_iters, "power iterations")?);
    w.u32(to_u32(here, c.sn_reference_size, "reference size")?);
    w.f64(c.lipschitz_target);
    for layer in &params.layers {
        w.f64s(&layer.weights);
        w.f64s(&layer.bias);
    }
    for state in &params.sn_state {
        w.f64s(state);
    }
    Ok(w.finish())
}

fn flag(r: &mut Reader, what: &str) -> Result<bool> {
    match r.u8()? {
        0 => Ok(false),
        1 => Ok(true),
        _ => Err(r.error(&format!("invalid {what} flag"))),
    }
}

pub fn decode(path: &Path, bytes: &[u8]) -> Result<DenoiserParams> {
    let mut r = Reader::new(path, bytes)?;
    r.expect_magic(MAGIC)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.error(&format!("unsupported checkpoint version {version}")));
    }
    let config = DenoiserConfig {
        depth: r.u32()? as usize,
        channels: r.u32()? as usize,
        kernel_size: r.u32()? as usize,
        residual: flag(&mut r, "residual")?,
        spectral_norm: flag(&mut r, "spectral norm")?,
        power_iters: r.u32()? as usize,
        sn_reference_size: r.u32()? as usize,
        lipschitz_target: r.f64()?,
    };
    config.validate().map_err(|e| r.error(&e.to_string()))?;
    let k = config.kernel_size;
    let rr = config.sn_reference_size * config.sn_reference_size;
    let shapes = config.layer_shapes();
    let mut layers = Vec::with_capacity(shapes.len());
    for &(cout, cin) in &shapes {
        let weights = r.f64s(cout * cin * k * k)?;
        let bias = r.f64s(cout)?;
        layers.push(ConvKernel::new(cout, cin, k, k, weights, bias).map_err(|e| r.error(&e.to_string()))?);
    }
    let sn_state = shapes.iter().map(|&(cout, _)| r.f64s(cout * rr)).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    let params = DenoiserParams { config, layers, sn_state };
    params.validate().map_err(|e| format_err(path, e.to_string()))?;
    Ok(params)
}

pub fn save(path: &Path, params: &DenoiserParams) -> Result<()> {
    write_file(path, &encode(params)?)
}

pub fn load(path: &Path) -> Result<DenoiserParams> {
    decode(path, &read_file(path)?)
}
