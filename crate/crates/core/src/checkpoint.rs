//! The `NFCK` checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "NFCK" | version: u16 = 1 | records: u16
//! per record: tag: u8 | rank: u8 | dims: u32 × rank | f32 payload
//! crc32: u32 over every preceding byte
//! ```
//!
//! The first record (tag 0) carries the per-sample input shape and no
//! payload. Layer records follow in order:
//!
//! | tag | layer   | dims                           | payload         |
//! |-----|---------|--------------------------------|-----------------|
//! | 1   | dense   | `in, out`                      | weight, bias    |
//! | 2   | conv    | `out, in, k, k, stride, pad`   | weight, bias    |
//! | 3   | relu    | none                           | none            |
//! | 4   | maxpool | `k, stride`                    | none            |
//! | 5   | flatten | none                           | none            |
//!
//! Injection points are a runtime choice and are not stored.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{InjectionConfig, Layer, LayerKind, ModelGraph};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"NFCK";
const VERSION: u16 = 1;

const TAG_INPUT: u8 = 0;
const TAG_DENSE: u8 = 1;
const TAG_CONV: u8 = 2;
const TAG_RELU: u8 = 3;
const TAG_POOL: u8 = 4;
const TAG_FLATTEN: u8 = 5;

fn push_record(out: &mut Vec<u8>, tag: u8, dims: &[usize]) {
    out.push(tag);
    out.push(dims.len() as u8);
    for &d in dims {
        out.extend((d as u32).to_le_bytes());
    }
}

fn push_payload<T: Scalar>(out: &mut Vec<u8>, t: &Tensor<T>) {
    for v in t.data() {
        out.extend((v.as_f64() as f32).to_le_bytes());
    }
}

/// Serializes a model. Parameters are stored as `f32`.
pub fn encode_checkpoint<T: Scalar>(model: &ModelGraph<T>) -> Result<Vec<u8>> {
    let records = model.layers().len() + 1;
    let records = u16::try_from(records)
        .map_err(|_| Error::Usage(format!("{records} layers exceed the checkpoint limit")))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend(VERSION.to_le_bytes());
    out.extend(records.to_le_bytes());
    push_record(&mut out, TAG_INPUT, model.input_shape());
    for layer in model.layers() {
        match layer.kind {
            LayerKind::Dense { input, output } => {
                push_record(&mut out, TAG_DENSE, &[input, output])
            }
            LayerKind::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                pad,
            } => push_record(
                &mut out,
                TAG_CONV,
                &[out_channels, in_channels, kernel, kernel, stride, pad],
            ),
            LayerKind::Relu => push_record(&mut out, TAG_RELU, &[]),
            LayerKind::MaxPool { kernel, stride } => {
                push_record(&mut out, TAG_POOL, &[kernel, stride])
            }
            LayerKind::Flatten => push_record(&mut out, TAG_FLATTEN, &[]),
        }
        if let (Some(w), Some(b)) = (&layer.weight, &layer.bias) {
            push_payload(&mut out, w);
            push_payload(&mut out, b);
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend(crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::format(
                self.path,
                format!(
                    "truncated at byte offset {} (needed {n} more bytes)",
                    self.pos
                ),
            ));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn tensor<T: Scalar>(&mut self, shape: Vec<usize>) -> Result<Tensor<T>> {
        let n: usize = shape.iter().product();
        let raw = self.take(n * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        Tensor::new(shape, data).map_err(|e| Error::format(self.path, e.to_string()))
    }
}

/// Parses checkpoint bytes. `path` only labels errors.
pub fn decode_checkpoint<T: Scalar>(
    bytes: &[u8],
    path: &Path,
    injection: InjectionConfig,
) -> Result<ModelGraph<T>> {
    if bytes.len() < 12 {
        return Err(Error::format(
            path,
            format!("file of {} bytes is too short", bytes.len()),
        ));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::format(path, format!("bad magic {:?}", &bytes[..4])));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::format(
            path,
            format!("unsupported version {version}, expected {VERSION}"),
        ));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes([trailer[0], trailer[1], trailer[2], trailer[3]]);
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(Error::format(
            path,
            format!("crc mismatch: stored {stored:#010x}, computed {actual:#010x} (truncated or corrupted)"),
        ));
    }
    let records = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    let mut r = Reader {
        bytes: body,
        pos: 8,
        path,
    };
    let mut input_shape = None;
    let mut layers = Vec::with_capacity(records.saturating_sub(1));
    for i in 0..records {
        let at = r.pos;
        let tag = r.u8()?;
        let rank = r.u8()? as usize;
        let dims = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let bad_dims = |what: &str| {
            Error::format(
                path,
                format!("record {i} at byte offset {at}: {what} with dims {dims:?}"),
            )
        };
        if i == 0 {
            if tag != TAG_INPUT || dims.is_empty() {
                return Err(bad_dims("first record must be the input shape"));
            }
            input_shape = Some(dims);
            continue;
        }
        let layer = match tag {
            TAG_DENSE => {
                let [input, output] = dims[..] else {
                    return Err(bad_dims("dense"));
                };
                let kind = LayerKind::Dense { input, output };
                Layer {
                    kind,
                    weight: Some(r.tensor(vec![input, output])?),
                    bias: Some(r.tensor(vec![output])?),
                }
            }
            TAG_CONV => {
                let [out_channels, in_channels, kh, kw, stride, pad] = dims[..] else {
                    return Err(bad_dims("conv"));
                };
                if kh != kw {
                    return Err(bad_dims("non-square conv kernel"));
                }
                let kind = LayerKind::Conv {
                    in_channels,
                    out_channels,
                    kernel: kh,
                    stride,
                    pad,
                };
                Layer {
                    kind,
                    weight: Some(r.tensor(vec![out_channels, in_channels, kh, kw])?),
                    bias: Some(r.tensor(vec![out_channels])?),
                }
            }
            TAG_RELU if dims.is_empty() => Layer::parameterless(LayerKind::Relu),
            TAG_FLATTEN if dims.is_empty() => Layer::parameterless(LayerKind::Flatten),
            TAG_POOL => {
                let [kernel, stride] = dims[..] else {
                    return Err(bad_dims("maxpool"));
                };
                Layer::parameterless(LayerKind::MaxPool { kernel, stride })
            }
            _ => return Err(bad_dims(&format!("unknown layer tag {tag}"))),
        };
        layers.push(layer);
    }
    if r.pos != body.len() {
        return Err(Error::format(
            path,
            format!(
                "{} trailing bytes after the last record",
                body.len() - r.pos
            ),
        ));
    }
    let input_shape = input_shape.ok_or_else(|| Error::format(path, "no records"))?;
    let kinds: Vec<LayerKind> = layers.iter().map(|l| l.kind).collect();
    ModelGraph::new(input_shape, layers, injection.points(&kinds))
        .map_err(|e| Error::format(path, format!("inconsistent layer shapes: {e}")))
}

/// Writes `model` to `path` atomically (temp file, then rename).
pub fn save_checkpoint<T: Scalar>(model: &ModelGraph<T>, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(model)?;
    let tmp = path.with_extension("nfck.tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint with the default injection points.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<ModelGraph<T>> {
    load_checkpoint_with(path, InjectionConfig::default())
}

pub fn load_checkpoint_with<T: Scalar>(
    path: &Path,
    injection: InjectionConfig,
) -> Result<ModelGraph<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path, injection)
}

/// Loads a checkpoint that must match `expected`'s architecture; the
/// result takes `expected`'s injection points.
pub fn load_checkpoint_as<T: Scalar>(
    path: &Path,
    expected: &ModelGraph<T>,
) -> Result<ModelGraph<T>> {
    let mut model: ModelGraph<T> = load_checkpoint(path)?;
    expected
        .check_same_architecture(&model)
        .map_err(|e| Error::format(path, format!("shape disagreement: {e}")))?;
    model.set_injection_points(expected.injection_points().to_vec())?;
    Ok(model)
}
