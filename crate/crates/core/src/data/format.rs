//! Versioned little-endian binary formats for checkpoints and datasets.
//!
//! Checkpoint (`DFNC`): magic, `u32` version, `u32` tensor count, then per
//! tensor a `u16` name length, UTF-8 name, `u8` dtype code, `u8` rank, `u32`
//! dims and the payload. Dtype 0 is `f32`; dtype 1 is raw bytes and carries
//! the `__meta__` record (architecture and training metadata as `key=value`
//! lines).
//!
//! Dataset (`DFDS`): magic, `u32` version, `u32` N, `u32` classes, `u8` label
//! kind (0 hard, 1 soft), `u32` channels/height/width, the `f32` images, the
//! labels (`u32` ids or `f32` rows), then a trailer of `u8` provenance, `u8`
//! split and `u64` generator seed.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use super::{LabeledDataset, Labels, Provenance, Split};
use crate::error::{Error, Result};
use crate::model::{Architecture, Block, BnStats, LayerSpec, Model};
use crate::tensor::Tensor;
use crate::train::{EpochRecord, ModelCheckpoint, TrainingMeta};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DFNC";
pub const DATASET_MAGIC: &[u8; 4] = b"DFDS";
pub const FORMAT_VERSION: u32 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_BYTES: u8 = 1;
const META_NAME: &str = "__meta__";

/// Writes to a sibling temporary file and renames it into place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::config(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    result.map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub fn layer_to_string(spec: &LayerSpec) -> String {
    match *spec {
        LayerSpec::ConvBnRelu { out_channels, kernel, stride } => format!("conv-bn-relu({out_channels},{kernel},{stride})"),
        LayerSpec::SepConvBnRelu { out_channels, kernel, stride } => {
            format!("sep-conv-bn-relu({out_channels},{kernel},{stride})")
        }
        LayerSpec::Zero { out_channels, stride } => format!("zero({out_channels},{stride})"),
        LayerSpec::MaxPool => "pool".into(),
        LayerSpec::GlobalPool => "global-pool".into(),
        LayerSpec::Dense { units } => format!("dense({units})"),
        LayerSpec::Classifier { classes } => format!("classifier({classes})"),
    }
}

pub fn parse_layer(s: &str) -> Option<LayerSpec> {
    let (kind, args) = match s.find('(') {
        Some(i) => (&s[..i], s[i + 1..].strip_suffix(')')?),
        None => (s, ""),
    };
    let nums: Vec<usize> = if args.is_empty() {
        Vec::new()
    } else {
        args.split(',').map(|a| a.trim().parse().ok()).collect::<Option<_>>()?
    };
    Some(match (kind, nums.as_slice()) {
        ("conv-bn-relu", &[o, k, st]) => LayerSpec::ConvBnRelu { out_channels: o, kernel: k, stride: st },
        ("sep-conv-bn-relu", &[o, k, st]) => LayerSpec::SepConvBnRelu { out_channels: o, kernel: k, stride: st },
        ("zero", &[o, st]) => LayerSpec::Zero { out_channels: o, stride: st },
        ("pool", &[]) => LayerSpec::MaxPool,
        ("global-pool", &[]) => LayerSpec::GlobalPool,
        ("dense", &[u]) => LayerSpec::Dense { units: u },
        ("classifier", &[c]) => LayerSpec::Classifier { classes: c },
        _ => return None,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "none".into(), |v| format!("{v:?}"))
}

fn meta_text(ck: &ModelCheckpoint) -> String {
    let arch = &ck.model.arch;
    let m = &ck.meta;
    let mut s = String::new();
    s.push_str(&format!("arch_id={}\n", arch.id));
    s.push_str(&format!("input={}x{}x{}\n", arch.input.0, arch.input.1, arch.input.2));
    let layers: Vec<String> = arch.layers.iter().map(layer_to_string).collect();
    s.push_str(&format!("layers={}\n", layers.join(";")));
    s.push_str(&format!("dataset_id={}\n", m.dataset_id));
    s.push_str(&format!("epochs={}\n", m.epochs));
    s.push_str(&format!("final_train_accuracy={:?}\n", m.final_train_accuracy));
    s.push_str(&format!("final_val_accuracy={}\n", fmt_opt(m.final_val_accuracy)));
    s.push_str(&format!("seed={}\n", m.seed));
    for r in &m.history {
        s.push_str(&format!(
            "epoch={},{:?},{:?},{}\n",
            r.epoch,
            r.loss,
            r.train_accuracy,
            fmt_opt(r.val_accuracy)
        ));
    }
    s
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend(v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend(v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend(v.to_le_bytes());
    }
    fn f32s(&mut self, v: &[f32]) {
        self.0.reserve(v.len() * 4);
        for x in v {
            self.0.extend(x.to_le_bytes());
        }
    }
    fn entry(&mut self, name: &str, dtype: u8, dims: &[usize], payload: impl FnOnce(&mut Self)) {
        self.u16(name.len() as u16);
        self.0.extend(name.as_bytes());
        self.u8(dtype);
        self.u8(dims.len() as u8);
        for &d in dims {
            self.u32(d as u32);
        }
        payload(self);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::format(
                self.path,
                format!(
                    "truncated: needed {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ),
            )
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| self.err("size overflow"))?)?;
        Ok(raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect())
    }
    fn err(&self, detail: impl Into<String>) -> Error {
        Error::format(self.path, detail)
    }
    fn header(&mut self, magic: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != magic {
            return Err(self.err(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(magic)
            )));
        }
        let version = self.u32()?;
        if version > FORMAT_VERSION || version == 0 {
            return Err(self.err(format!(
                "unsupported format version {version} (this reader handles up to {FORMAT_VERSION})"
            )));
        }
        Ok(())
    }
}

pub fn encode_checkpoint(ck: &ModelCheckpoint) -> Vec<u8> {
    let model = &ck.model;
    let mut w = Writer(Vec::new());
    w.0.extend(CHECKPOINT_MAGIC);
    w.u32(FORMAT_VERSION);
    let bn_count = model.bn_layers().count();
    let count = 1 + model.params().count() + 2 * bn_count;
    w.u32(count as u32);
    let meta = meta_text(ck);
    w.entry(META_NAME, DTYPE_BYTES, &[meta.len()], |w| w.0.extend(meta.as_bytes()));
    for (i, block) in model.blocks.iter().enumerate() {
        for p in &block.params {
            w.entry(&p.name, DTYPE_F32, p.value.shape(), |w| w.f32s(p.value.data()));
        }
        if let Some(bn) = &block.bn {
            w.entry(&format!("layer{i}.bn.running_mean"), DTYPE_F32, &[bn.mean.len()], |w| w.f32s(&bn.mean));
            w.entry(&format!("layer{i}.bn.running_var"), DTYPE_F32, &[bn.var.len()], |w| w.f32s(&bn.var));
        }
    }
    w.0
}

fn parse_meta(text: &str, r: &Reader) -> Result<(Architecture, TrainingMeta)> {
    let mut kv = std::collections::HashMap::new();
    let mut history = Vec::new();
    for line in text.lines() {
        let (k, v) = line.split_once('=').ok_or_else(|| r.err(format!("bad metadata line '{line}'")))?;
        if k == "epoch" {
            let f: Vec<&str> = v.split(',').collect();
            let bad = || r.err(format!("bad epoch record '{v}'"));
            if f.len() != 4 {
                return Err(bad());
            }
            history.push(EpochRecord {
                epoch: f[0].parse().map_err(|_| bad())?,
                loss: f[1].parse().map_err(|_| bad())?,
                train_accuracy: f[2].parse().map_err(|_| bad())?,
                val_accuracy: if f[3] == "none" { None } else { Some(f[3].parse().map_err(|_| bad())?) },
            });
        } else {
            kv.insert(k.to_string(), v.to_string());
        }
    }
    let get = |k: &str| kv.get(k).ok_or_else(|| r.err(format!("metadata is missing '{k}'")));
    let input: Vec<usize> = get("input")?
        .split('x')
        .map(|d| d.parse().map_err(|_| r.err("bad input dims")))
        .collect::<Result<_>>()?;
    if input.len() != 3 {
        return Err(r.err("input must have three dims"));
    }
    let layers = get("layers")?
        .split(';')
        .map(|l| parse_layer(l).ok_or_else(|| r.err(format!("unknown layer '{l}'"))))
        .collect::<Result<Vec<_>>>()?;
    let arch = Architecture {
        id: get("arch_id")?.clone(),
        input: (input[0], input[1], input[2]),
        layers,
    };
    let num = |k: &str| -> Result<String> { get(k).cloned() };
    let val = num("final_val_accuracy")?;
    let meta = TrainingMeta {
        dataset_id: num("dataset_id")?,
        epochs: num("epochs")?.parse().map_err(|_| r.err("bad epochs"))?,
        final_train_accuracy: num("final_train_accuracy")?.parse().map_err(|_| r.err("bad accuracy"))?,
        final_val_accuracy: if val == "none" { None } else { Some(val.parse().map_err(|_| r.err("bad accuracy"))?) },
        seed: num("seed")?.parse().map_err(|_| r.err("bad seed"))?,
        history,
    };
    Ok((arch, meta))
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<ModelCheckpoint> {
    let mut r = Reader { bytes, pos: 0, path };
    r.header(CHECKPOINT_MAGIC)?;
    let count = r.u32()? as usize;
    let mut entries: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::with_capacity(count);
    let mut meta_text = None;
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| r.err("tensor name is not UTF-8"))?;
        let dtype = r.u8()?;
        let ndim = r.u8()? as usize;
        let dims: Vec<usize> = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
        let n: usize = dims.iter().product();
        match dtype {
            DTYPE_F32 => entries.push((name, dims, r.f32s(n)?)),
            DTYPE_BYTES if name == META_NAME => {
                meta_text = Some(String::from_utf8(r.take(n)?.to_vec()).map_err(|_| r.err("metadata is not UTF-8"))?)
            }
            other => return Err(r.err(format!("unsupported dtype code {other} for '{name}'"))),
        }
    }
    if r.pos != bytes.len() {
        return Err(r.err(format!("{} trailing bytes after last tensor", bytes.len() - r.pos)));
    }
    let meta_text = meta_text.ok_or_else(|| r.err("missing __meta__ record"))?;
    let (arch, meta) = parse_meta(&meta_text, &r)?;
    let mut model = Model::build(&arch, 0).map_err(|e| r.err(format!("stored architecture is invalid: {e}")))?;
    let mut lookup: std::collections::HashMap<String, (Vec<usize>, Vec<f32>)> =
        entries.into_iter().map(|(n, d, v)| (n, (d, v))).collect();
    let mut take = |name: &str, shape: &[usize]| -> Result<Vec<f32>> {
        let (dims, data) = lookup.remove(name).ok_or_else(|| r.err(format!("missing tensor '{name}'")))?;
        if dims != shape {
            return Err(r.err(format!("tensor '{name}' has shape {dims:?}, expected {shape:?}")));
        }
        Ok(data)
    };
    for (i, block) in model.blocks.iter_mut().enumerate() {
        let Block { params, bn, .. } = block;
        for p in params.iter_mut() {
            let shape = p.value.shape().to_vec();
            p.value = Tensor::from_parts(shape.clone(), take(&p.name, &shape)?);
        }
        if let Some(bn) = bn.as_mut() {
            let c = bn.mean.len();
            *bn = BnStats {
                mean: take(&format!("layer{i}.bn.running_mean"), &[c])?,
                var: take(&format!("layer{i}.bn.running_var"), &[c])?,
            };
            if bn.var.iter().any(|&v| !(v >= 0.0)) {
                return Err(r.err(format!("layer{i} has a negative running variance")));
            }
        }
    }
    if let Some(extra) = lookup.keys().next() {
        return Err(r.err(format!("unexpected tensor '{extra}'")));
    }
    Ok(ModelCheckpoint { model, meta })
}

pub fn save_checkpoint(ck: &ModelCheckpoint, path: &Path) -> Result<()> {
    atomic_write(path, &encode_checkpoint(ck))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelCheckpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

pub fn encode_dataset(ds: &LabeledDataset) -> Vec<u8> {
    let (n, c, h, w) = ds.images.nchw().expect("dataset images are NCHW");
    let mut wr = Writer(Vec::with_capacity(32 + ds.images.len() * 4));
    wr.0.extend(DATASET_MAGIC);
    wr.u32(FORMAT_VERSION);
    wr.u32(n as u32);
    wr.u32(ds.num_classes as u32);
    wr.u8(match ds.labels {
        Labels::Hard(_) => 0,
        Labels::Soft(_) => 1,
    });
    for d in [c, h, w] {
        wr.u32(d as u32);
    }
    wr.f32s(ds.images.data());
    match &ds.labels {
        Labels::Hard(ids) => ids.iter().for_each(|&id| wr.u32(id)),
        Labels::Soft(p) => wr.f32s(p.data()),
    }
    wr.u8(ds.provenance.code());
    wr.u8(ds.split.code());
    wr.u64(ds.seed);
    wr.0
}

pub fn decode_dataset(bytes: &[u8], path: &Path) -> Result<LabeledDataset> {
    let mut r = Reader { bytes, pos: 0, path };
    r.header(DATASET_MAGIC)?;
    let n = r.u32()? as usize;
    let classes = r.u32()? as usize;
    let kind = r.u8()?;
    let (c, h, w) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    if n == 0 || c == 0 || h == 0 || w == 0 || classes == 0 {
        return Err(r.err(format!("degenerate dimensions n={n} classes={classes} image={c}x{h}x{w}")));
    }
    let images = Tensor::from_parts(vec![n, c, h, w], r.f32s(n * c * h * w)?);
    let labels = match kind {
        0 => Labels::Hard((0..n).map(|_| r.u32()).collect::<Result<_>>()?),
        1 => Labels::Soft(Tensor::from_parts(vec![n, classes], r.f32s(n * classes)?)),
        k => return Err(r.err(format!("unknown label kind {k}"))),
    };
    let provenance = Provenance::from_code(r.u8()?).ok_or_else(|| r.err("unknown provenance code"))?;
    let split = Split::from_code(r.u8()?).ok_or_else(|| r.err("unknown split code"))?;
    let seed = r.u64()?;
    if r.pos != bytes.len() {
        return Err(r.err(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    LabeledDataset::new(images, labels, classes, split, provenance, seed).map_err(|e| r.err(e.to_string()))
}

pub fn save_dataset(ds: &LabeledDataset, path: &Path) -> Result<()> {
    atomic_write(path, &encode_dataset(ds))
}

pub fn load_dataset(path: &Path) -> Result<LabeledDataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dataset(&bytes, path)
}
