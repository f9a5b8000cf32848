//! Binary checkpoint: magic `LAWC`, u32 version, u32-length-prefixed
//! canonical JSON config, u32 tensor count, then per tensor a u16-prefixed
//! name, u8 rank, u32 dims and little-endian f64 values.
//!
//! Parameters come first under their own names, then the optimizer moments
//! as `@adam.m:<name>`, `@adam.v:<name>`, `@adam.t:<name>` and finally the
//! step counter as the scalar `@step`.

use std::path::Path;

use super::config::ExperimentConfig;
use super::model::LawModel;
use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::tensor::{AdamW, MomentState, ParameterStore, Tensor};

/// First moment, second moment and step of one parameter while loading.
type Moments = (Option<Tensor>, Option<Tensor>, Option<u64>);

pub const MAGIC: &[u8; 4] = b"LAWC";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub params: ParameterStore,
    pub optimizer: AdamW,
    pub step: u64,
}

fn write_tensor(w: &mut Writer, name: &str, t: &Tensor) {
    w.u16(name.len() as u16);
    w.bytes(name.as_bytes());
    w.u8(t.rank() as u8);
    for &d in t.shape() {
        w.u32(d as u32);
    }
    for &v in t.data() {
        w.f64(v);
    }
}

fn read_tensor(r: &mut Reader) -> Result<(String, Tensor)> {
    let n = r.u16("tensor name length")? as usize;
    let name = r.utf8(n, "tensor name")?.to_string();
    let rank = r.u8("tensor rank")? as usize;
    let shape = (0..rank)
        .map(|_| r.u32("tensor dimension").map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let count: usize = shape.iter().product();
    if r.remaining() < count * 8 {
        return Err(r.error(
            format!("{count} values of tensor '{name}'"),
            format!("{} bytes", r.remaining()),
        ));
    }
    let data = (0..count)
        .map(|_| r.f64("tensor value"))
        .collect::<Result<Vec<_>>>()?;
    Ok((name, Tensor::new(shape, data)?))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.text32(&self.config.to_canonical_json());

        let mut tensors: Vec<(String, Tensor)> = self
            .params
            .iter()
            .map(|(n, p)| (n.to_string(), p.value.clone()))
            .collect();
        for (name, st) in self.optimizer.states() {
            tensors.push((format!("@adam.m:{name}"), st.m.clone()));
            tensors.push((format!("@adam.v:{name}"), st.v.clone()));
            tensors.push((format!("@adam.t:{name}"), Tensor::scalar(st.t as f64)));
        }
        tensors.push(("@step".into(), Tensor::scalar(self.step as f64)));

        w.u32(tensors.len() as u32);
        for (n, t) in &tensors {
            write_tensor(&mut w, n, t);
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(MAGIC)?;
        r.version(VERSION)?;
        let at = r.offset();
        let json = r.text32("config")?;
        let config = ExperimentConfig::from_json(json).map_err(|e| Error::Format {
            offset: at,
            expected: "experiment config".into(),
            found: e.to_string(),
        })?;
        let count = r.u32("tensor count")?;

        let mut params = ParameterStore::new();
        let mut optimizer = AdamW::new(config.optimizer.adamw());
        let mut partial: std::collections::BTreeMap<String, Moments> = Default::default();
        let mut step = None;
        for _ in 0..count {
            let at = r.offset();
            let (name, t) = read_tensor(&mut r)?;
            let shape = t.shape().to_vec();
            let bad = |what: &str| Error::Format {
                offset: at,
                expected: what.into(),
                found: format!("tensor '{name}' of shape {shape:?}"),
            };
            if name == "@step" {
                if t.rank() != 0 {
                    return Err(bad("scalar step counter"));
                }
                step = Some(t.item() as u64);
            } else if let Some(p) = name.strip_prefix("@adam.m:") {
                partial.entry(p.to_string()).or_default().0 = Some(t);
            } else if let Some(p) = name.strip_prefix("@adam.v:") {
                partial.entry(p.to_string()).or_default().1 = Some(t);
            } else if let Some(p) = name.strip_prefix("@adam.t:") {
                if t.rank() != 0 {
                    return Err(bad("scalar moment step"));
                }
                partial.entry(p.to_string()).or_default().2 = Some(t.item() as u64);
            } else if name.starts_with('@') {
                return Err(bad("parameter or optimizer tensor"));
            } else {
                params
                    .insert(name.clone(), t)
                    .map_err(|_| bad("unique tensor name"))?;
            }
        }
        r.finish()?;
        for (name, st) in partial {
            match st {
                (Some(m), Some(v), Some(t)) => optimizer.set_state(name, MomentState { m, v, t }),
                _ => {
                    return Err(Error::Format {
                        offset: r.offset(),
                        expected: format!("complete optimizer state for '{name}'"),
                        found: "partial state".into(),
                    })
                }
            }
        }
        let step = step.ok_or_else(|| r.error("@step tensor", "none"))?;
        Ok(Checkpoint {
            config,
            params,
            optimizer,
            step,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Errors unless the stored parameters have exactly the names and shapes
    /// `config` would create.
    pub fn check_fits(&self, config: &ExperimentConfig) -> Result<()> {
        let expected = LawModel::new(config)?.init_params()?;
        let mut diff = Vec::new();
        for (name, p) in expected.iter() {
            match self.params.value(name) {
                None => diff.push(format!("missing {name} {:?}", p.value.shape())),
                Some(t) if t.shape() != p.value.shape() => diff.push(format!(
                    "{name}: checkpoint {:?} vs config {:?}",
                    t.shape(),
                    p.value.shape()
                )),
                _ => {}
            }
        }
        for (name, p) in self.params.iter() {
            if !expected.contains(name) {
                diff.push(format!("unexpected {name} {:?}", p.value.shape()));
            }
        }
        if diff.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "checkpoint does not match the configuration: {}",
                diff.join("; ")
            )))
        }
    }

    /// Loads `path` and checks it against `config`.
    pub fn load_for(path: &Path, config: &ExperimentConfig) -> Result<Self> {
        let c = Self::load(path)?;
        c.check_fits(config)?;
        Ok(c)
    }
}
