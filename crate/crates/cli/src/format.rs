//! Binary containers. All integers and floats are little-endian.
//!
//! Tensor record: `u32` name length, UTF-8 name, `u32` rank, `u64` per dim,
//! row-major `f64` data.
//!
//! * checkpoint `LIPG`: version, `u64` config length, TOML config, `u32`
//!   tensor count, tensor records, CRC-32 of everything before it.
//! * dataset `LIPD`: version, task code, `u32` n, `u64` count; per sample a
//!   `u32` label, `u64` phantom seed, `u64` noise seed, `u32` augmented flag,
//!   `u64` augment seed, then `input`, `target` and `source` tensor records;
//!   CRC-32 trailer.
//! * tensor file `LIPT`: version, `u32` count, tensor records, CRC-32 trailer.

use std::path::Path;

use lipgate::datagen::{Encoding, SampleMeta, SamplePair, SensorInput, Task};
use lipgate::metrics::Label;
use lipgate::models::{ReconModel, Tensor};
use lipgate::Image;

use crate::config::StoredArch;
use crate::error::{CliError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LIPG";
pub const DATASET_MAGIC: &[u8; 4] = b"LIPD";
pub const TENSOR_MAGIC: &[u8; 4] = b"LIPT";
pub const VERSION: u32 = 1;

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn tensor(&mut self, name: &str, shape: &[usize], data: &[f64]) {
        self.u32(name.len() as u32);
        self.buf.extend_from_slice(name.as_bytes());
        self.u32(shape.len() as u32);
        for &d in shape {
            self.u64(d as u64);
        }
        for v in data {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.u32(crc);
        self.buf
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Verifies magic, trailing CRC and version.
    fn open(bytes: &'a [u8], magic: &[u8; 4]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != magic {
            return Err(CliError::Format(format!(
                "expected {} container",
                String::from_utf8_lossy(magic)
            )));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(CliError::Checksum { stored, computed });
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(CliError::Version {
                found: version,
                expected: VERSION,
            });
        }
        Ok(r)
    }

    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(len)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| CliError::Format("unexpected end of file".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let len = self.u32()? as usize;
        let name = std::str::from_utf8(self.take(len)?)
            .map_err(|_| CliError::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = self.u32()? as usize;
        let shape = (0..rank).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let count = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&c| c.checked_mul(8).is_some_and(|b| b <= self.buf.len()))
            .ok_or_else(|| CliError::Format(format!("tensor `{name}` has impossible shape {shape:?}")))?;
        let data = self
            .take(count * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Tensor { name, shape, data })
    }

    fn expect_tensor(&mut self, name: &str) -> Result<Tensor> {
        let t = self.tensor()?;
        if t.name != name {
            return Err(CliError::Format(format!("expected tensor `{name}`, found `{}`", t.name)));
        }
        Ok(t)
    }

    fn done(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(CliError::Format(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn header(magic: &[u8; 4]) -> Writer {
    let mut w = Writer::default();
    w.buf.extend_from_slice(magic);
    w.u32(VERSION);
    w
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| CliError::io(path, e))
}

pub fn encode_checkpoint(model: &ReconModel) -> Vec<u8> {
    let mut w = header(CHECKPOINT_MAGIC);
    let blob = toml::to_string(&StoredArch::new(model.spec(), model.seed())).expect("arch serializes");
    w.u64(blob.len() as u64);
    w.buf.extend_from_slice(blob.as_bytes());
    w.u32(model.params().len() as u32);
    for t in model.params() {
        w.tensor(&t.name, &t.shape, &t.data);
    }
    w.finish()
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ReconModel> {
    let mut r = Reader::open(bytes, CHECKPOINT_MAGIC)?;
    let len = r.u64()? as usize;
    let blob = std::str::from_utf8(r.take(len)?).map_err(|_| CliError::Format("config blob is not UTF-8".into()))?;
    let stored: StoredArch = toml::from_str(blob).map_err(|e| CliError::Format(format!("config blob: {e}")))?;
    let count = r.u32()? as usize;
    let params = (0..count).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
    r.done()?;
    Ok(ReconModel::from_parts(stored.spec()?, params, stored.model_seed)?)
}

pub fn save_checkpoint(path: &Path, model: &ReconModel) -> Result<()> {
    write_file(path, &encode_checkpoint(model))
}

pub fn load_checkpoint(path: &Path) -> Result<ReconModel> {
    decode_checkpoint(&read_file(path)?)
}

/// One stored sample together with its split label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub label: Label,
    pub pair: SamplePair,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub task: Task,
    pub n: usize,
    pub samples: Vec<LabeledSample>,
}

fn label_code(l: Label) -> u32 {
    match l {
        Label::Id => 0,
        Label::Ood => 1,
    }
}

pub fn encode_dataset(ds: &Dataset) -> Vec<u8> {
    let mut w = header(DATASET_MAGIC);
    w.u32(ds.task.code());
    w.u32(ds.n as u32);
    w.u64(ds.samples.len() as u64);
    for s in &ds.samples {
        let p = &s.pair;
        w.u32(label_code(s.label));
        w.u64(p.meta.phantom_seed);
        w.u64(p.meta.noise_seed);
        w.u32(p.meta.augment_seed.is_some() as u32);
        w.u64(p.meta.augment_seed.unwrap_or(0));
        w.tensor("input", &[p.input.values.len()], &p.input.values);
        w.tensor("target", &[ds.n, ds.n], p.target.pixels());
        w.tensor("source", &[ds.n, ds.n], p.source.pixels());
    }
    w.finish()
}

fn image_of(t: Tensor, n: usize) -> Result<Image> {
    if t.shape != [n, n] {
        return Err(CliError::Format(format!("tensor `{}` has shape {:?}, expected [{n}, {n}]", t.name, t.shape)));
    }
    Ok(Image::from_vec(n, t.data)?)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader::open(bytes, DATASET_MAGIC)?;
    let code = r.u32()?;
    let task = Task::from_code(code).ok_or_else(|| CliError::Format(format!("unknown task code {code}")))?;
    let n = r.u32()? as usize;
    let count = r.u64()?;
    let mut samples = Vec::new();
    for _ in 0..count {
        let label = match r.u32()? {
            0 => Label::Id,
            1 => Label::Ood,
            c => return Err(CliError::Format(format!("unknown label code {c}"))),
        };
        let phantom_seed = r.u64()?;
        let noise_seed = r.u64()?;
        let augmented = r.u32()?;
        let augment_seed = r.u64()?;
        let augment_seed = match augmented {
            0 => None,
            1 => Some(augment_seed),
            f => return Err(CliError::Format(format!("bad augment flag {f}"))),
        };
        let input = r.expect_tensor("input")?;
        let target = image_of(r.expect_tensor("target")?, n)?;
        let source = image_of(r.expect_tensor("source")?, n)?;
        samples.push(LabeledSample {
            label,
            pair: SamplePair {
                input: SensorInput {
                    values: input.data,
                    encoding: task.encoding(),
                    n,
                },
                target,
                source,
                meta: SampleMeta {
                    phantom_seed,
                    noise_seed,
                    augment_seed,
                    task,
                },
            },
        });
    }
    r.done()?;
    Ok(Dataset { task, n, samples })
}

pub fn save_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    write_file(path, &encode_dataset(ds))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    decode_dataset(&read_file(path)?)
}

pub fn encode_tensors(tensors: &[Tensor]) -> Vec<u8> {
    let mut w = header(TENSOR_MAGIC);
    w.u32(tensors.len() as u32);
    for t in tensors {
        w.tensor(&t.name, &t.shape, &t.data);
    }
    w.finish()
}

pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<Tensor>> {
    let mut r = Reader::open(bytes, TENSOR_MAGIC)?;
    let count = r.u32()? as usize;
    let out = (0..count).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
    r.done()?;
    Ok(out)
}

pub fn save_tensors(path: &Path, tensors: &[Tensor]) -> Result<()> {
    write_file(path, &encode_tensors(tensors))
}

pub fn load_tensors(path: &Path) -> Result<Vec<Tensor>> {
    decode_tensors(&read_file(path)?)
}

pub fn image_tensor(name: &str, img: &Image) -> Tensor {
    Tensor {
        name: name.into(),
        shape: vec![img.n(), img.n()],
        data: img.pixels().to_vec(),
    }
}

/// Sensor input stored as a single `input` tensor.
pub fn sensor_tensor(input: &SensorInput) -> Tensor {
    Tensor {
        name: "input".into(),
        shape: vec![input.values.len()],
        data: input.values.clone(),
    }
}

pub fn encoding_name(e: Encoding) -> &'static str {
    match e {
        Encoding::KspaceConcat => "kspace-concat",
        Encoding::ImageNoisy => "image-noisy",
        Encoding::ImageSparseCt => "image-sparse-ct",
    }
}
