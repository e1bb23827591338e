//! Binary checkpoint container.
//!
//! All integers are little-endian. The file is
//!
//! ```text
//! magic    8 bytes  "GHACKPT\0"
//! version  u32      currently 1
//! dtype    u8       0 = f32, 1 = f64
//! sections repeated until the END tag:
//!   tag    u8
//!   length u64      payload byte count
//!   payload
//! ```
//!
//! Section tags and payloads:
//!
//! | tag | name      | payload |
//! |-----|-----------|---------|
//! | 0   | END       | empty |
//! | 1   | MODEL     | UTF-8 TOML of the model config |
//! | 2   | PARAMS    | u32 count, then per tensor: u32 name length, name, u32 rank, u64 extent × rank, raw values |
//! | 3   | HEADS     | u32 sites, then per site: u32 n, u32 original head id × n |
//! | 4   | MASK      | u32 sites, then per site: u32 n, u8 keep-bit × n |
//! | 5   | OPTIMIZER | u64 step, f64 β1, β2, ε, weight decay, u8 clip flag, f64 clip, u32 count, then per tensor: name as above, first-moment values, second-moment values |
//! | 6   | RUNSTATE  | UTF-8 text owned by the training harness |
//! | 7   | RUNCONFIG | UTF-8 text owned by the training harness |
//!
//! Optional sections (4–7) are omitted when absent. Loading is bit-exact.

use std::fs;
use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;

use super::config::ModelConfig;
use super::transformer::{HeadMask, TransformerModel};
use crate::error::{Error, Result};
use crate::numerics::{AdamConfig, DType, OptimizerState, ParamStore, Real, Tensor};

pub const MAGIC: &[u8; 8] = b"GHACKPT\0";
pub const VERSION: u32 = 1;

const END: u8 = 0;
const MODEL: u8 = 1;
const PARAMS: u8 = 2;
const HEADS: u8 = 3;
const MASK: u8 = 4;
const OPTIMIZER: u8 = 5;
const RUNSTATE: u8 = 6;
const RUNCONFIG: u8 = 7;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub model: TransformerModel<T>,
    pub optimizer: Option<OptimizerState<T>>,
    pub run_state: Option<String>,
    pub run_config: Option<String>,
}

impl<T: Real> Checkpoint<T> {
    pub fn new(model: TransformerModel<T>) -> Self {
        Self { model, optimizer: None, run_state: None, run_config: None }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(T::DTYPE.code());

        let model_toml = toml::to_string(&self.model.config)
            .map_err(|e| Error::contract(format!("model config serialization: {e}")))?;
        section(&mut out, MODEL, model_toml.as_bytes());

        let mut p = Vec::new();
        put_u32(&mut p, self.model.params.len() as u32);
        for (name, t) in self.model.params.iter() {
            put_tensor(&mut p, name, t);
        }
        section(&mut out, PARAMS, &p);

        let mut h = Vec::new();
        put_u32(&mut h, self.model.head_ids().len() as u32);
        for ids in self.model.head_ids() {
            put_u32(&mut h, ids.len() as u32);
            for &i in ids {
                put_u32(&mut h, i as u32);
            }
        }
        section(&mut out, HEADS, &h);

        if let Some(mask) = self.model.mask() {
            let mut m = Vec::new();
            put_u32(&mut m, mask.layers.len() as u32);
            for layer in &mask.layers {
                put_u32(&mut m, layer.len() as u32);
                m.extend(layer.iter().map(|&b| b as u8));
            }
            section(&mut out, MASK, &m);
        }

        if let Some(opt) = &self.optimizer {
            let mut o = Vec::new();
            o.extend_from_slice(&opt.step.to_le_bytes());
            let cfg = opt.config;
            for v in [cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay] {
                o.extend_from_slice(&v.to_le_bytes());
            }
            o.push(cfg.clip_norm.is_some() as u8);
            o.extend_from_slice(&cfg.clip_norm.unwrap_or(0.0).to_le_bytes());
            put_u32(&mut o, opt.first.len() as u32);
            for (name, m) in &opt.first {
                let v = opt
                    .second
                    .get(name)
                    .ok_or_else(|| Error::contract(format!("optimizer second moment missing for `{name}`")))?;
                put_tensor(&mut o, name, m);
                put_values(&mut o, v);
            }
            section(&mut out, OPTIMIZER, &o);
        }
        if let Some(s) = &self.run_state {
            section(&mut out, RUNSTATE, s.as_bytes());
        }
        if let Some(s) = &self.run_config {
            section(&mut out, RUNCONFIG, s.as_bytes());
        }
        section(&mut out, END, &[]);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |why: &str| Error::malformed(origin, why);
        let mut r = Reader { bytes, pos: 0, origin };
        if r.take(8)? != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let dtype = DType::from_code(r.u8()?).ok_or_else(|| bad("unknown dtype"))?;
        if dtype != T::DTYPE {
            return Err(bad(&format!("stored dtype {dtype:?}, requested {:?}", T::DTYPE)));
        }

        let mut config: Option<ModelConfig> = None;
        let mut params = ParamStore::new();
        let mut head_ids: Option<Vec<Vec<usize>>> = None;
        let mut mask: Option<HeadMask> = None;
        let mut optimizer = None;
        let mut run_state = None;
        let mut run_config = None;
        loop {
            let tag = r.u8()?;
            let len = r.u64()? as usize;
            let payload = r.take(len)?;
            let mut s = Reader { bytes: payload, pos: 0, origin };
            match tag {
                END => break,
                MODEL => {
                    let text = std::str::from_utf8(payload).map_err(|_| bad("model config not utf-8"))?;
                    config = Some(toml::from_str(text).map_err(|e| bad(&format!("model config: {e}")))?);
                }
                PARAMS => {
                    for _ in 0..s.u32()? {
                        let (name, t) = s.tensor::<T>()?;
                        params.insert(name, t);
                    }
                }
                HEADS => {
                    let sites = s.u32()? as usize;
                    let mut all = Vec::with_capacity(sites);
                    for _ in 0..sites {
                        let n = s.u32()? as usize;
                        all.push((0..n).map(|_| s.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?);
                    }
                    head_ids = Some(all);
                }
                MASK => {
                    let sites = s.u32()? as usize;
                    let mut layers = Vec::with_capacity(sites);
                    for _ in 0..sites {
                        let n = s.u32()? as usize;
                        layers.push(s.take(n)?.iter().map(|&b| b != 0).collect());
                    }
                    mask = Some(HeadMask { layers });
                }
                OPTIMIZER => {
                    let step = s.u64()?;
                    let beta1 = s.f64()?;
                    let beta2 = s.f64()?;
                    let eps = s.f64()?;
                    let weight_decay = s.f64()?;
                    let has_clip = s.u8()? != 0;
                    let clip = s.f64()?;
                    let mut st = OptimizerState::new(AdamConfig {
                        beta1,
                        beta2,
                        eps,
                        weight_decay,
                        clip_norm: has_clip.then_some(clip),
                    });
                    st.step = step;
                    let mut first = IndexMap::new();
                    let mut second = IndexMap::new();
                    for _ in 0..s.u32()? {
                        let (name, m) = s.tensor::<T>()?;
                        let v = s.values::<T>(m.shape())?;
                        first.insert(name.clone(), m);
                        second.insert(name, v);
                    }
                    st.first = first;
                    st.second = second;
                    optimizer = Some(st);
                }
                RUNSTATE => {
                    run_state = Some(String::from_utf8(payload.to_vec()).map_err(|_| bad("run state not utf-8"))?)
                }
                RUNCONFIG => {
                    run_config = Some(String::from_utf8(payload.to_vec()).map_err(|_| bad("run config not utf-8"))?)
                }
                other => return Err(bad(&format!("unknown section tag {other}"))),
            }
        }
        let config = config.ok_or_else(|| bad("missing MODEL section"))?;
        let head_ids = head_ids.ok_or_else(|| bad("missing HEADS section"))?;
        let model = TransformerModel::from_parts(config, params, head_ids, mask)?;
        Ok(Self { model, optimizer, run_state, run_config })
    }

    /// Writes to a sibling temp file, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn section(out: &mut Vec<u8>, tag: u8, payload: &[u8]) {
    out.push(tag);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_values<T: Real>(out: &mut Vec<u8>, t: &Tensor<T>) {
    for &v in t.data() {
        v.write_le(out);
    }
}

fn put_tensor<T: Real>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.rank() as u32);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    put_values(out, t);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::malformed(self.origin, "truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn values<T: Real>(&mut self, shape: &[usize]) -> Result<Tensor<T>> {
        let n: usize = shape.iter().product();
        let w = T::DTYPE.width();
        let raw = self.take(n * w)?;
        let data = raw.chunks_exact(w).map(T::read_le).collect();
        Tensor::new(shape.to_vec(), data)
    }

    fn tensor<T: Real>(&mut self) -> Result<(String, Tensor<T>)> {
        let n = self.u32()? as usize;
        let name = std::str::from_utf8(self.take(n)?)
            .map_err(|_| Error::malformed(self.origin, "tensor name not utf-8"))?
            .to_string();
        let rank = self.u32()? as usize;
        let shape = (0..rank).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        Ok((name, self.values(&shape)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig { d_model: 8, d_ff: 16, heads: 2, layers: 1, ..ModelConfig::tiny(9) }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let model = TransformerModel::<f32>::init(cfg(), 3).unwrap();
        let mut mask = HeadMask::all_ones(model.sites().len(), 2);
        mask.layers[1][0] = false;
        let mut model = model;
        model.apply_head_mask(mask).unwrap();
        let mut opt = OptimizerState::new(AdamConfig::default());
        opt.step = 17;
        for (name, t) in model.params.iter() {
            opt.first.insert(name.to_string(), t.map(|v| v * 0.5));
            opt.second.insert(name.to_string(), t.map(|v| v * v));
        }
        let ck = Checkpoint {
            model,
            optimizer: Some(opt),
            run_state: Some("stage = \"voting\"".into()),
            run_config: Some("seed = 1".into()),
        };
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::<f32>::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn pruned_model_round_trips() {
        let model = TransformerModel::<f64>::init(cfg(), 3).unwrap();
        let mut mask = HeadMask::all_ones(model.sites().len(), 2);
        for l in &mut mask.layers {
            l[1] = false;
        }
        let pruned = model.structural_prune(&mask, 1).unwrap();
        let ck = Checkpoint::new(pruned);
        let back = Checkpoint::<f64>::from_bytes(&ck.to_bytes().unwrap(), Path::new("mem")).unwrap();
        assert_eq!(back.model, ck.model);
    }

    #[test]
    fn corrupt_input_is_malformed() {
        let ck = Checkpoint::new(TransformerModel::<f32>::init(cfg(), 3).unwrap());
        let bytes = ck.to_bytes().unwrap();
        for cut in [4, 20, bytes.len() - 3] {
            assert!(matches!(
                Checkpoint::<f32>::from_bytes(&bytes[..cut], Path::new("x")),
                Err(Error::Malformed { .. })
            ));
        }
        assert!(Checkpoint::<f64>::from_bytes(&bytes, Path::new("x")).is_err());
    }

    #[test]
    fn save_and_load_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ck = Checkpoint::new(TransformerModel::<f32>::init(cfg(), 4).unwrap());
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::<f32>::load(&path).unwrap(), ck);
        assert!(!path.with_extension("partial").exists());
    }
}
