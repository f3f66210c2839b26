//! Binary checkpoints.
//!
//! Layout (little-endian): `ATNF`, u32 version, manifest (family, scale,
//! u32 num_classes, u64 seed, plan text; strings are u32 length + UTF-8),
//! u32 entry count, then entries sorted by name. Each entry is u32 name
//! length, name bytes, u32 dim count, dims as u64, f32 data. Batch-norm
//! running statistics are stored as `<buffer>.mean` and `<buffer>.var`.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{Family, ModelGraph, Scale};
use crate::error::{Error, Result};
use crate::plan::parse_plan;
use crate::tensor::{Float, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ATNF";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Model identity stored ahead of the weights.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub family: Family,
    pub scale: Scale,
    pub num_classes: usize,
    pub seed: u64,
    pub plan_text: String,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn entries<T: Float>(model: &ModelGraph<T>) -> Vec<(String, Vec<usize>, Vec<f32>)> {
    let to32 = |v: &[T]| v.iter().map(|x| x.as_f64() as f32).collect::<Vec<f32>>();
    let mut out: Vec<_> = model
        .store()
        .iter()
        .map(|p| (p.name.clone(), p.value.shape().to_vec(), to32(p.value.data())))
        .collect();
    for (name, stats) in model.store().buffers() {
        out.push((format!("{name}.mean"), vec![stats.mean.len()], to32(&stats.mean)));
        out.push((format!("{name}.var"), vec![stats.var.len()], to32(&stats.var)));
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

/// Serialize a model.
pub fn to_bytes<T: Float>(model: &ModelGraph<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_str(&mut out, model.family().id());
    put_str(&mut out, &model.scale().to_string());
    out.extend_from_slice(&(model.num_classes() as u32).to_le_bytes());
    out.extend_from_slice(&model.seed().to_le_bytes());
    put_str(&mut out, &model.plan().serialize());
    let items = entries(model);
    out.extend_from_slice(&(items.len() as u32).to_le_bytes());
    for (name, dims, data) in items {
        put_str(&mut out, &name);
        out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for d in dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(Error::Format(format!("checkpoint truncated at byte {}", self.pos)));
        };
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("checkpoint string is not UTF-8".into()))
    }
}

fn read_manifest(r: &mut Reader<'_>) -> Result<Manifest> {
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let family = r.string()?.parse::<Family>().map_err(Error::Format)?;
    let scale = r.string()?.parse::<Scale>().map_err(Error::Format)?;
    let num_classes = r.u32()? as usize;
    let seed = r.u64()?;
    let plan_text = r.string()?;
    Ok(Manifest { family, scale, num_classes, seed, plan_text })
}

/// Read only the manifest.
pub fn read_manifest_bytes(bytes: &[u8]) -> Result<Manifest> {
    read_manifest(&mut Reader { buf: bytes, pos: 0 })
}

/// Rebuild a model from its checkpoint bytes.
pub fn from_bytes<T: Float>(bytes: &[u8]) -> Result<ModelGraph<T>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let m = read_manifest(&mut r)?;
    let plan = parse_plan(&m.plan_text)?;
    let mut model = ModelGraph::<T>::build(m.family, m.scale, m.num_classes, m.seed)?.attach_attention(&plan)?;
    let expected = entries(&model);
    let count = r.u32()? as usize;
    if count != expected.len() {
        return Err(Error::Format(format!("checkpoint has {count} entries, model needs {}", expected.len())));
    }
    for (want_name, want_dims, _) in &expected {
        let name = r.string()?;
        if name != *want_name {
            return Err(Error::Format(format!("expected entry `{want_name}`, found `{name}`")));
        }
        let nd = r.u32()? as usize;
        let mut dims = Vec::with_capacity(nd);
        for _ in 0..nd {
            dims.push(r.u64()? as usize);
        }
        if dims != *want_dims {
            return Err(Error::Format(format!("entry `{name}` has dims {dims:?}, expected {want_dims:?}")));
        }
        let len: usize = dims.iter().product();
        let raw = r.take(len * 4)?;
        let values: Vec<T> = raw
            .chunks_exact(4)
            .map(|c| T::lit(f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes")))))
            .collect();
        assign(&mut model, &name, values)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Ok(model)
}

fn assign<T: Float>(model: &mut ModelGraph<T>, name: &str, values: Vec<T>) -> Result<()> {
    let store = model.store_mut();
    if let Some(id) = store.id_of(name) {
        let p = store.get_mut(id);
        p.value = Tensor::new(p.value.shape().to_vec(), values)?;
        return Ok(());
    }
    for (buf, stats) in store.buffers_mut() {
        if name.strip_suffix(".mean") == Some(buf) {
            stats.mean = values;
            return Ok(());
        }
        if name.strip_suffix(".var") == Some(buf) {
            stats.var = values;
            return Ok(());
        }
    }
    Err(Error::Format(format!("unknown checkpoint entry `{name}`")))
}

pub fn save<T: Float>(model: &ModelGraph<T>, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&to_bytes(model))?;
    f.sync_all()?;
    Ok(())
}

pub fn load<T: Float>(path: &Path) -> Result<ModelGraph<T>> {
    from_bytes(&fs::read(path)?)
}
