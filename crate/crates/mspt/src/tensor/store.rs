use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Initialization rule for a freshly created parameter.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// uniform(-1/sqrt(fan_in), +1/sqrt(fan_in))
    Uniform { fan_in: usize },
    Const(f64),
}

#[derive(Debug, Clone)]
pub(crate) struct Parameter {
    pub value: Tensor,
    pub grad: Tensor,
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
    pub adam_step: u64,
}

/// Named trainable tensors plus per-parameter optimizer state.
///
/// Parameter initialization is derived from `(seed, name)` so it does not
/// depend on creation order, and iteration is name-ordered, which keeps
/// every downstream consumer deterministic.
#[derive(Debug, Clone)]
pub struct ParameterStore {
    seed: u64,
    params: BTreeMap<String, Parameter>,
    grads_pending: bool,
}

impl ParameterStore {
    pub fn new(seed: u64) -> Self {
        ParameterStore {
            seed,
            params: BTreeMap::new(),
            grads_pending: false,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| &p.value)
    }

    /// Overwrite a parameter's values, creating it if absent.
    pub fn set(&mut self, name: &str, value: Tensor) {
        let numel = value.numel();
        self.params.insert(
            name.to_string(),
            Parameter {
                grad: Tensor::zeros(value.shape()),
                adam_m: vec![0.0; numel],
                adam_v: vec![0.0; numel],
                adam_step: 0,
                value,
            },
        );
    }

    /// Fetch a parameter, creating and initializing it on first use.
    pub fn get_or_init(&mut self, name: &str, shape: &[usize], init: Init) -> Result<&Tensor> {
        if let Some(p) = self.params.get(name) {
            if p.value.shape() != shape {
                return Err(Error::ShapeMismatch {
                    op: "get_or_init",
                    lhs: p.value.shape().to_vec(),
                    rhs: shape.to_vec(),
                });
            }
        } else {
            let numel: usize = shape.iter().product();
            let data = match init {
                Init::Uniform { fan_in } => {
                    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                    let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(name.as_bytes()));
                    (0..numel).map(|_| rng.gen_range(-bound..bound)).collect()
                }
                Init::Const(c) => vec![c; numel],
            };
            self.set(name, Tensor::new(shape.to_vec(), data)?);
        }
        Ok(&self.params[name].value)
    }

    /// Add `grad` into the parameter's gradient buffer.
    pub fn accumulate_grad(&mut self, name: &str, grad: &Tensor) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))?;
        if p.value.shape() != grad.shape() {
            return Err(Error::ShapeMismatch {
                op: "accumulate_grad",
                lhs: p.value.shape().to_vec(),
                rhs: grad.shape().to_vec(),
            });
        }
        for (g, d) in p.grad.data_mut().iter_mut().zip(grad.data()) {
            *g += d;
        }
        self.grads_pending = true;
        Ok(())
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| &p.grad)
    }

    pub fn grads_pending(&self) -> bool {
        self.grads_pending
    }

    pub(crate) fn params_mut(&mut self) -> impl Iterator<Item = (&String, &mut Parameter)> {
        self.params.iter_mut()
    }

    pub(crate) fn clear_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad.data_mut().fill(0.0);
        }
        self.grads_pending = false;
    }

    /// Shift one scalar component of a parameter; the knob the
    /// finite-difference oracle turns.
    pub fn nudge(&mut self, name: &str, index: usize, delta: f64) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))?;
        p.value.data_mut()[index] += delta;
        Ok(())
    }

    /// Total number of scalar components across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    // ── checkpoint file ─────────────────────────────────────────────
    //
    // JSON with version tag; every f64 is serialized as its 16-hex-digit
    // IEEE-754 bit pattern, so save→load round-trips are bit-exact.

    pub fn save(&self, path: &Path, meta: &BTreeMap<String, String>) -> Result<()> {
        let mut params = BTreeMap::new();
        for (name, p) in &self.params {
            params.insert(
                name.clone(),
                ParamEntry {
                    shape: p.value.shape().to_vec(),
                    values: encode_f64s(p.value.data()),
                    adam_m: encode_f64s(&p.adam_m),
                    adam_v: encode_f64s(&p.adam_v),
                    adam_step: p.adam_step,
                },
            );
        }
        let file = CheckpointFile {
            version: 1,
            seed: self.seed,
            meta: meta.clone(),
            params,
        };
        let w = BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(w, &file)
            .map_err(|e| Error::Parse { line: 0, msg: e.to_string() })?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, BTreeMap<String, String>)> {
        let r = BufReader::new(std::fs::File::open(path)?);
        let file: CheckpointFile = serde_json::from_reader(r)
            .map_err(|e| Error::Parse { line: 0, msg: e.to_string() })?;
        if file.version != 1 {
            return Err(Error::Incompatible(format!(
                "unsupported checkpoint version {}",
                file.version
            )));
        }
        let mut store = ParameterStore::new(file.seed);
        for (name, entry) in file.params {
            let values = decode_f64s(&entry.values)?;
            let numel: usize = entry.shape.iter().product();
            if values.len() != numel {
                return Err(Error::Incompatible(format!(
                    "parameter {name}: {} values for shape {:?}",
                    values.len(),
                    entry.shape
                )));
            }
            store.params.insert(
                name,
                Parameter {
                    value: Tensor::new(entry.shape.clone(), values)?,
                    grad: Tensor::zeros(&entry.shape),
                    adam_m: decode_f64s(&entry.adam_m)?,
                    adam_v: decode_f64s(&entry.adam_v)?,
                    adam_step: entry.adam_step,
                },
            );
        }
        Ok((store, file.meta))
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    seed: u64,
    meta: BTreeMap<String, String>,
    params: BTreeMap<String, ParamEntry>,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    shape: Vec<usize>,
    values: String,
    adam_m: String,
    adam_v: String,
    adam_step: u64,
}

fn encode_f64s(vals: &[f64]) -> String {
    let mut s = String::with_capacity(vals.len() * 16);
    for v in vals {
        s.push_str(&format!("{:016x}", v.to_bits()));
    }
    s
}

fn decode_f64s(s: &str) -> Result<Vec<f64>> {
    if s.len() % 16 != 0 {
        return Err(Error::Parse {
            line: 0,
            msg: "hex f64 block length not a multiple of 16".into(),
        });
    }
    s.as_bytes()
        .chunks(16)
        .map(|chunk| {
            let hex = std::str::from_utf8(chunk).map_err(|e| Error::Parse {
                line: 0,
                msg: e.to_string(),
            })?;
            let bits = u64::from_str_radix(hex, 16).map_err(|e| Error::Parse {
                line: 0,
                msg: e.to_string(),
            })?;
            Ok(f64::from_bits(bits))
        })
        .collect()
}

/// FNV-1a, used to derive a per-parameter init stream from `(seed, name)`.
pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_order_independent() {
        let mut s1 = ParameterStore::new(7);
        s1.get_or_init("a", &[2, 2], Init::Uniform { fan_in: 2 }).unwrap();
        s1.get_or_init("b", &[3], Init::Uniform { fan_in: 3 }).unwrap();

        let mut s2 = ParameterStore::new(7);
        s2.get_or_init("b", &[3], Init::Uniform { fan_in: 3 }).unwrap();
        s2.get_or_init("a", &[2, 2], Init::Uniform { fan_in: 2 }).unwrap();

        assert_eq!(s1.get("a"), s2.get("a"));
        assert_eq!(s1.get("b"), s2.get("b"));
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let mut s = ParameterStore::new(1);
        let t = s
            .get_or_init("w", &[100, 4], Init::Uniform { fan_in: 100 })
            .unwrap();
        let bound = 1.0 / 10.0;
        assert!(t.data().iter().all(|v| v.abs() < bound));
    }

    #[test]
    fn shape_conflict_rejected() {
        let mut s = ParameterStore::new(1);
        s.get_or_init("w", &[2, 2], Init::Const(0.0)).unwrap();
        assert!(s.get_or_init("w", &[3, 2], Init::Const(0.0)).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");

        let mut store = ParameterStore::new(99);
        store
            .get_or_init("layer.w", &[3, 4], Init::Uniform { fan_in: 3 })
            .unwrap();
        store
            .get_or_init("layer.b", &[4], Init::Const(0.25))
            .unwrap();
        // touch optimizer state so it round-trips too
        store.params.get_mut("layer.w").unwrap().adam_m[0] = 0.125;
        store.params.get_mut("layer.w").unwrap().adam_step = 3;

        let mut meta = BTreeMap::new();
        meta.insert("config_hash".to_string(), "abcd".to_string());
        store.save(&path, &meta).unwrap();

        let (loaded, meta2) = ParameterStore::load(&path).unwrap();
        assert_eq!(meta2["config_hash"], "abcd");
        assert_eq!(loaded.seed(), 99);
        for name in store.names() {
            let a = store.get(name).unwrap();
            let b = loaded.get(name).unwrap();
            assert_eq!(a.shape(), b.shape());
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        assert_eq!(loaded.params["layer.w"].adam_m[0], 0.125);
        assert_eq!(loaded.params["layer.w"].adam_step, 3);
    }
}
