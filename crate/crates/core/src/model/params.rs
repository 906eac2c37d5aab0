//! Named parameter store, initialisation and the binary checkpoint format.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ModelConfig, ModelError, Variant, SCALE_NAMES};
use crate::autodiff::{Tape, Tensor, Var};

const MAGIC: &[u8; 8] = b"CNETCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `±1/sqrt(fan_in)`, the default for linear layers.
    Kaiming { fan_in: usize },
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

pub const LGRU_GATES: [&str; 4] = ["re", "z", "o", "lm"];
pub const GRU_GATES: [&str; 3] = ["r", "u", "c"];
pub const DIRECTIONS: [&str; 2] = ["fwd", "bwd"];
pub const OMEGA_NAMES: [&str; 6] = ["in", "year", "month", "week", "day", "geo"];

/// Every parameter the configured model owns, in a fixed order.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let f = cfg.input_dim + cfg.hidden_dim;
    let (n, e, w) = (cfg.n_airports, cfg.embed_dim, cfg.hidden_dim);
    let mut specs = Vec::new();
    let mut add = |name: String, shape: Vec<usize>, init: Init| specs.push(ParamSpec { name, shape, init });
    for s in SCALE_NAMES {
        add(format!("corr.theta.{s}"), vec![f, f], Init::Kaiming { fan_in: f });
    }
    add("corr.fc.w".into(), vec![f, e], Init::Kaiming { fan_in: f });
    add("corr.fc.b".into(), vec![e], Init::Kaiming { fan_in: f });
    add("corr.e1".into(), vec![n, e], Init::Kaiming { fan_in: e });
    add("corr.e2".into(), vec![n, e], Init::Kaiming { fan_in: e });
    add("cell.fit1".into(), vec![n, f], Init::Ones);
    add("cell.fit2".into(), vec![n, f], Init::Ones);
    let gates: &[&str] = if cfg.variant == Variant::Gru { &GRU_GATES } else { &LGRU_GATES };
    for g in gates {
        for d in DIRECTIONS {
            let p = format!("cell.{g}.{d}");
            for s in SCALE_NAMES {
                add(format!("{p}.theta.{s}"), vec![f, f], Init::Kaiming { fan_in: f });
            }
            add(format!("{p}.theta.geo"), vec![f, f], Init::Kaiming { fan_in: f });
            for o in OMEGA_NAMES {
                add(format!("{p}.omega.{o}"), vec![1], Init::Ones);
            }
            for k in 1..=cfg.hops {
                add(format!("{p}.w{k}"), vec![f, w], Init::Kaiming { fan_in: f });
            }
        }
        add(format!("cell.{g}.bias"), vec![w], Init::Kaiming { fan_in: f });
    }
    add("out.w".into(), vec![w, 1], Init::Kaiming { fan_in: w });
    add("out.b".into(), vec![1], Init::Kaiming { fan_in: w });
    specs
}

/// 64-bit FNV-1a, used to give each parameter its own random stream.
fn fnv1a(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

/// All model tensors by name, plus the config that fixes their shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    /// Draws every parameter from its own stream keyed by `(seed, name)`, so
    /// variants that share a parameter name start from the same values.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let tensors = param_specs(config)
            .into_iter()
            .map(|spec| {
                let len = spec.shape.iter().product();
                let data = match spec.init {
                    Init::Ones => vec![1.0; len],
                    Init::Kaiming { fan_in } => {
                        let mut rng = ChaCha8Rng::seed_from_u64(seed);
                        rng.set_stream(fnv1a(&spec.name));
                        let bound = 1.0 / (fan_in as f64).sqrt();
                        (0..len).map(|_| rng.random_range(-bound..bound)).collect()
                    }
                };
                let t = Tensor::new(spec.shape, data).expect("spec shape matches data");
                (spec.name, t)
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            tensors,
        })
    }

    /// Every tensor set to `value`; handy for hand-checkable forwards.
    pub fn filled(config: &ModelConfig, value: f64) -> Result<Self, ModelError> {
        let mut p = Self::init(config, 0)?;
        p.tensors.values_mut().for_each(|t| t.data_mut().iter_mut().for_each(|v| *v = value));
        Ok(p)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Replaces a tensor, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<(), ModelError> {
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| ModelError::UnknownParam(name.to_string()))?;
        if slot.shape() != value.shape() {
            return Err(ModelError::ParamShape {
                name: name.to_string(),
                expected: slot.shape().to_vec(),
                got: value.shape().to_vec(),
            });
        }
        *slot = value;
        Ok(())
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    /// Whether the optimiser may update `name` under this variant.
    pub fn is_trainable(&self, name: &str) -> bool {
        !(self.config.variant == Variant::Nf && name.starts_with("cell.fit"))
    }

    /// Records every tensor on `tape`; frozen ones become constants.
    pub fn bind(&self, tape: &Tape) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let v = if self.is_trainable(name) {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect();
        BoundParams { vars }
    }

    /// Tensors in name order, matching [`ModelParams::bind_vars`].
    pub fn tensors(&self) -> Vec<Tensor> {
        self.tensors.values().cloned().collect()
    }

    /// Pairs externally recorded variables with parameter names, in name order.
    pub fn bind_vars(&self, vars: &[Var]) -> BoundParams {
        assert_eq!(vars.len(), self.tensors.len(), "one variable per parameter");
        BoundParams {
            vars: self.tensors.keys().cloned().zip(vars.iter().copied()).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    pub fn save<W: Write>(&self, mut w: W) -> Result<(), ModelError> {
        let cfg = serde_json::to_vec(&self.config).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(cfg.len() as u64).to_le_bytes())?;
        w.write_all(&cfg)?;
        w.write_all(&(self.tensors.len() as u64).to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.rank() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Reads a checkpoint and checks every tensor against the stored config.
    pub fn load<R: Read>(mut r: R) -> Result<Self, ModelError> {
        let bad = |m: &str| ModelError::Checkpoint(m.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(ModelError::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let cfg_len = read_u64(&mut r)? as usize;
        let mut cfg = vec![0u8; cfg_len];
        r.read_exact(&mut cfg)?;
        let config: ModelConfig = serde_json::from_slice(&cfg).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let mut params = Self::init(&config, 0)?;
        let count = read_u64(&mut r)? as usize;
        if count != params.len() {
            return Err(ModelError::Checkpoint(format!(
                "checkpoint holds {count} tensors, config expects {}",
                params.len()
            )));
        }
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| bad("tensor name is not UTF-8"))?;
            let rank = read_u32(&mut r)? as usize;
            let shape = (0..rank).map(|_| read_u64(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let len: usize = shape.iter().product();
            let mut data = Vec::with_capacity(len);
            let mut buf = [0u8; 8];
            for _ in 0..len {
                r.read_exact(&mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            params.set(&name, Tensor::new(shape, data)?)?;
        }
        if !params.is_finite() {
            return Err(bad("checkpoint contains non-finite values"));
        }
        Ok(params)
    }
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Parameters recorded on one tape.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    /// Panics on unknown names: every name used by the layers comes from
    /// [`param_specs`].
    pub fn var(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}
