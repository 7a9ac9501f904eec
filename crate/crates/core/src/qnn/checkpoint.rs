//! Binary checkpoint container, little-endian throughout.
//!
//! ```text
//! magic        4 bytes  "QNNM"
//! version      u16      = 1
//! num_layers   u16
//! num_classes  u32
//! input_len    u32
//! per layer:
//!   kind       u8       0 = dense, 1 = conv2d
//!   activation u8       0 = identity, 1 = relu, 2 = tanh
//!   dims       dense: u32 inputs, u32 outputs
//!              conv2d: u32 in_ch, out_ch, kernel, in_h, in_w
//!   scale      f64
//!   n_codes    u32, then n_codes x i8
//!   n_bias     u32, then n_bias x f64
//! ```

use std::path::Path;

use super::{Activation, Layer, LayerKind, QnnError, QuantizedModel};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"QNNM";
pub const CHECKPOINT_VERSION: u16 = 1;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], QnnError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| QnnError::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, QnnError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, QnnError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<usize, QnnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f64(&mut self) -> Result<f64, QnnError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<QuantizedModel, QnnError> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(QnnError::Format("missing QNNM magic".into()));
    }
    let version = r.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(QnnError::Format(format!("unsupported version {version}")));
    }
    let n_layers = r.u16()? as usize;
    let num_classes = r.u32()?;
    let input_len = r.u32()?;
    let mut layers = Vec::with_capacity(n_layers);
    for i in 0..n_layers {
        let kind = r.u8()?;
        let activation = Activation::from_code(r.u8()?)
            .ok_or_else(|| QnnError::Format(format!("layer {i}: unknown activation")))?;
        let kind = match kind {
            0 => LayerKind::Dense {
                inputs: r.u32()?,
                outputs: r.u32()?,
            },
            1 => LayerKind::Conv2d {
                in_ch: r.u32()?,
                out_ch: r.u32()?,
                kernel: r.u32()?,
                in_h: r.u32()?,
                in_w: r.u32()?,
            },
            k => return Err(QnnError::Format(format!("layer {i}: unknown kind {k}"))),
        };
        let scale = r.f64()?;
        let n = r.u32()?;
        let codes = r.take(n)?.iter().map(|&b| b as i8).collect();
        let nb = r.u32()?;
        let mut bias = Vec::with_capacity(nb);
        for _ in 0..nb {
            bias.push(r.f64()?);
        }
        layers.push(Layer {
            kind,
            activation,
            scale,
            codes,
            bias,
        });
    }
    if r.pos != buf.len() {
        return Err(QnnError::Format("trailing bytes".into()));
    }
    let model = QuantizedModel::new(layers, num_classes)
        .map_err(|e| QnnError::Format(e.to_string()))?;
    if model.input_len() != input_len {
        return Err(QnnError::Format("input_len header mismatch".into()));
    }
    Ok(model)
}

pub fn encode_checkpoint(model: &QuantizedModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(model.layers().len() as u16).to_le_bytes());
    out.extend_from_slice(&(model.num_classes() as u32).to_le_bytes());
    out.extend_from_slice(&(model.input_len() as u32).to_le_bytes());
    let u32le = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
    for l in model.layers() {
        match l.kind {
            LayerKind::Dense { inputs, outputs } => {
                out.extend_from_slice(&[0, l.activation.code()]);
                u32le(&mut out, inputs);
                u32le(&mut out, outputs);
            }
            LayerKind::Conv2d {
                in_ch,
                out_ch,
                kernel,
                in_h,
                in_w,
            } => {
                out.extend_from_slice(&[1, l.activation.code()]);
                for v in [in_ch, out_ch, kernel, in_h, in_w] {
                    u32le(&mut out, v);
                }
            }
        }
        out.extend_from_slice(&l.scale.to_le_bytes());
        u32le(&mut out, l.codes.len());
        out.extend(l.codes.iter().map(|&c| c as u8));
        u32le(&mut out, l.bias.len());
        for b in &l.bias {
            out.extend_from_slice(&b.to_le_bytes());
        }
    }
    out
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<QuantizedModel, QnnError> {
    decode_checkpoint(&std::fs::read(path)?)
}

pub fn write_checkpoint(path: impl AsRef<Path>, model: &QuantizedModel) -> Result<(), QnnError> {
    std::fs::write(path, encode_checkpoint(model))?;
    Ok(())
}
