//! Binary model file: networks, loss history, optional sphere, config.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! "OCRM1"  u32 version
//! u32 tensor count, then per tensor:
//!     u32 name length, UTF-8 name, u8 dtype code, u32 rank, u64 dims[rank], payload
//! u8 sphere flag, then if set (every field f64):
//!     kernel code (0 linear, 1 rbf), gamma, c, m, d, support vectors [m*d], alphas [m], r^2
//! u32 config length, UTF-8 config text
//! ```

use std::fs;
use std::path::Path;

use crate::autodiff::{DType, Element, Tensor};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::networks::Module;
use crate::pipeline::{Detector, EpochLosses, Networks, TrainConfig, TrainedModel};
use crate::svdd::{Kernel, SvddModel};

pub const MAGIC: &[u8; 5] = b"OCRM1";
pub const VERSION: u32 = 1;
const HISTORY: &str = "history";
const CHANNELS_KEY: &str = "channels";

struct Record {
    name: String,
    dtype: DType,
    dims: Vec<usize>,
    payload: Vec<u8>,
}

fn encode_values<T: Element>(values: &[T]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 8);
    for v in values {
        match T::DTYPE {
            DType::F32 => out.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes()),
            DType::F64 => out.extend_from_slice(&v.to_f64_lossy().to_le_bytes()),
        }
    }
    out
}

fn decode_values<T: Element>(rec: &Record) -> Result<Vec<T>> {
    if rec.dtype != T::DTYPE {
        return Err(Error::Data(format!(
            "tensor `{}` stored as {:?}, expected {:?}",
            rec.name,
            rec.dtype,
            T::DTYPE
        )));
    }
    Ok(match rec.dtype {
        DType::F32 => rec
            .payload
            .chunks_exact(4)
            .map(|b| T::from_f64_lossy(f32::from_le_bytes(b.try_into().unwrap()) as f64))
            .collect(),
        DType::F64 => rec
            .payload
            .chunks_exact(8)
            .map(|b| T::from_f64_lossy(f64::from_le_bytes(b.try_into().unwrap())))
            .collect(),
    })
}

fn records<T: Element>(model: &TrainedModel<T>) -> Vec<Record> {
    let mut out = Vec::new();
    let mut push = |name: String, dims: Vec<usize>, values: &[T]| {
        out.push(Record {
            name,
            dtype: T::DTYPE,
            dims,
            payload: encode_values(values),
        })
    };
    let nets = &model.networks;
    let mut modules: Vec<&dyn Module<T>> = vec![&nets.encoder, &nets.decoder];
    if let Some(d) = &nets.discriminator {
        modules.push(d);
    }
    for m in modules {
        for (name, t) in m.parameters() {
            push(name, t.shape().to_vec(), t.data());
        }
        for (name, b) in m.buffers() {
            push(name, vec![b.len()], b);
        }
    }
    let hist: Vec<f64> = model
        .history
        .iter()
        .flat_map(|e| [e.l_mse, e.loss_g, e.loss_d])
        .collect();
    if !hist.is_empty() {
        out.push(Record {
            name: HISTORY.into(),
            dtype: DType::F64,
            dims: vec![model.history.len(), 3],
            payload: encode_values(&hist),
        });
    }
    out
}

/// Serializes a detector to bytes.
pub fn to_bytes<T: Element>(detector: &Detector<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let recs = records(&detector.model);
    out.extend_from_slice(&(recs.len() as u32).to_le_bytes());
    for r in recs {
        out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
        out.extend_from_slice(r.name.as_bytes());
        out.push(r.dtype.code());
        out.extend_from_slice(&(r.dims.len() as u32).to_le_bytes());
        for d in &r.dims {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        out.extend_from_slice(&r.payload);
    }
    match &detector.svdd {
        None => out.push(0),
        Some(s) => {
            out.push(1);
            out.extend_from_slice(&svdd_record(s));
        }
    }
    let config = config_snapshot(&detector.model);
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    out
}

/// Bytes of the sphere record alone (without the presence flag).
pub fn svdd_record(s: &SvddModel) -> Vec<u8> {
    let (code, gamma) = match s.kernel() {
        Kernel::Linear => (0.0, 0.0),
        Kernel::Rbf { gamma } => (1.0, gamma),
    };
    let sv = s.support_vectors();
    let mut fields = vec![code, gamma, s.c(), sv.rows() as f64, sv.cols() as f64];
    fields.extend_from_slice(sv.data());
    fields.extend_from_slice(s.alphas());
    fields.push(s.radius2());
    encode_values(&fields)
}

fn config_snapshot<T: Element>(model: &TrainedModel<T>) -> String {
    format!(
        "{}{CHANNELS_KEY} = {}\n",
        model.config.to_kv(),
        model.channels()
    )
}

pub fn save<T: Element>(detector: &Detector<T>, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(detector)).map_err(|e| Error::io(path, e))
}

pub fn load<T: Element>(path: &Path) -> Result<Detector<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes).map_err(|e| match e {
        Error::Data(msg) => Error::format(path, msg),
        other => other,
    })
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Data("truncated model file".into()))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Data("invalid UTF-8".into()))
    }
}

fn as_count(v: f64, what: &str) -> Result<usize> {
    if v >= 0.0 && v.fract() == 0.0 && v < 1e12 {
        Ok(v as usize)
    } else {
        Err(Error::Data(format!("invalid {what} {v}")))
    }
}

pub fn from_bytes<T: Element>(bytes: &[u8]) -> Result<Detector<T>> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Data("not a model file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Data(format!("unsupported model version {version}")));
    }
    let count = r.u32()? as usize;
    let mut recs = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.string()?;
        let dtype = DType::from_code(r.u8()?)
            .ok_or_else(|| Error::Data(format!("bad dtype for `{name}`")))?;
        let rank = r.u32()? as usize;
        let dims = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let width = match dtype {
            DType::F32 => 4,
            DType::F64 => 8,
        };
        let payload = r.take(dims.iter().product::<usize>() * width)?.to_vec();
        recs.push(Record {
            name,
            dtype,
            dims,
            payload,
        });
    }
    let svdd = match r.u8()? {
        0 => None,
        1 => {
            let code = r.f64()?;
            let gamma = r.f64()?;
            let c = r.f64()?;
            let m = as_count(r.f64()?, "support vector count")?;
            let d = as_count(r.f64()?, "feature dimension")?;
            let sv = r.f64s(m * d)?;
            let alphas = r.f64s(m)?;
            let radius2 = r.f64()?;
            let kernel = match code {
                0.0 => Kernel::Linear,
                1.0 => Kernel::Rbf { gamma },
                _ => return Err(Error::Data(format!("unknown kernel code {code}"))),
            };
            Some(SvddModel::from_parts(
                kernel,
                c,
                Matrix::new(m, d, sv)?,
                alphas,
                radius2,
            )?)
        }
        f => return Err(Error::Data(format!("bad sphere flag {f}"))),
    };
    let config_text = r.string()?;
    if r.at != bytes.len() {
        return Err(Error::Data("trailing bytes after config".into()));
    }

    let mut config = TrainConfig::default();
    let mut channels = None;
    for (k, v) in crate::config::parse_kv(&config_text)? {
        if k == CHANNELS_KEY {
            channels = Some(crate::config::parse_value::<usize>(&k, &v)?);
        } else if !config.apply(&k, &v)? {
            return Err(Error::Data(format!(
                "unknown config key `{k}` in model file"
            )));
        }
    }
    let channels =
        channels.ok_or_else(|| Error::Data("model config lacks channel count".into()))?;
    let mut networks = Networks::<T>::new(channels, &config)?;
    fill(&mut networks, &recs)?;

    let history = match recs.iter().find(|r| r.name == HISTORY) {
        None => Vec::new(),
        Some(rec) => {
            let v: Vec<f64> = decode_values(rec)?;
            v.chunks_exact(3)
                .enumerate()
                .map(|(epoch, c)| EpochLosses {
                    epoch,
                    l_mse: c[0],
                    loss_g: c[1],
                    loss_d: c[2],
                })
                .collect()
        }
    };
    Ok(Detector {
        model: TrainedModel {
            networks,
            config,
            history,
        },
        svdd,
    })
}

fn find<'r>(recs: &'r [Record], name: &str) -> Result<&'r Record> {
    recs.iter()
        .find(|r| r.name == name)
        .ok_or_else(|| Error::Data(format!("missing tensor `{name}`")))
}

fn fill<T: Element>(nets: &mut Networks<T>, recs: &[Record]) -> Result<()> {
    fn fill_module<T: Element>(m: &mut dyn Module<T>, recs: &[Record]) -> Result<()> {
        let names: Vec<(String, Vec<usize>)> = m
            .parameters()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        for ((name, shape), t) in names.iter().zip(m.parameters_mut()) {
            let rec = find(recs, name)?;
            if &rec.dims != shape {
                return Err(Error::Data(format!(
                    "tensor `{name}` has shape {:?}, expected {shape:?}",
                    rec.dims
                )));
            }
            *t = Tensor::new(shape.clone(), decode_values(rec)?)?;
        }
        let buf_names: Vec<(String, usize)> =
            m.buffers().into_iter().map(|(n, b)| (n, b.len())).collect();
        for ((name, len), b) in buf_names.iter().zip(m.buffers_mut()) {
            let rec = find(recs, name)?;
            if rec.dims != [*len] {
                return Err(Error::Data(format!(
                    "buffer `{name}` has shape {:?}",
                    rec.dims
                )));
            }
            *b = decode_values(rec)?;
        }
        Ok(())
    }
    fill_module(&mut nets.encoder, recs)?;
    fill_module(&mut nets.decoder, recs)?;
    if let Some(d) = &mut nets.discriminator {
        fill_module(d, recs)?;
    }
    Ok(())
}
