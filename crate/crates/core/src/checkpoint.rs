//! Binary checkpoints of a full training state.
//!
//! Layout (little endian): magic `VFMCKPT\0`, `u32` version, `u8` objective
//! tag, `u64` step, the generator, its optimizer and EMA shadow, an optional
//! adapter with its optimizer, the training config as JSON, and the ChaCha
//! rng position. Floats are stored as raw bits so a round trip is exact.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::nets::{EmaState, Layer, MeanFlowNet, MlpParams, NoiseAdapter};
use crate::training::{AdamW, Objective, TrainConfig, TrainState};

pub const MAGIC: &[u8; 8] = b"VFMCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: Objective,
    pub state: TrainState,
    pub config: TrainConfig,
    pub rng: ChaCha8Rng,
}

fn kind_tag(k: Objective) -> u8 {
    match k {
        Objective::FlowMatching => 0,
        Objective::MeanFlow => 1,
        Objective::Vfm => 2,
        Objective::FrozenTheta => 3,
        Objective::Reward => 4,
    }
}

fn kind_from_tag(t: u8) -> Option<Objective> {
    Some(match t {
        0 => Objective::FlowMatching,
        1 => Objective::MeanFlow,
        2 => Objective::Vfm,
        3 => Objective::FrozenTheta,
        4 => Objective::Reward,
        _ => return None,
    })
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.u64(v.to_bits());
    }
    fn len(&mut self, v: usize) {
        self.u64(v as u64);
    }
    fn tensor(&mut self, t: &Tensor) {
        self.len(t.nrows());
        self.len(t.ncols());
        for v in t.iter() {
            self.f64(*v);
        }
    }
    fn tensors(&mut self, ts: &[Tensor]) {
        self.len(ts.len());
        for t in ts {
            self.tensor(t);
        }
    }
    fn mlp(&mut self, p: &MlpParams) {
        self.len(p.layers.len());
        for l in &p.layers {
            self.tensor(&l.weight);
            self.tensor(&l.bias);
        }
    }
    fn adam(&mut self, o: &AdamW) {
        self.f64(o.beta1);
        self.f64(o.beta2);
        self.f64(o.eps);
        self.f64(o.weight_decay);
        self.u64(o.step);
        self.tensors(&o.m);
        self.tensors(&o.v);
    }
    fn adapter(&mut self, a: &NoiseAdapter) {
        self.mlp(&a.params);
        self.tensor(&a.embeddings);
        self.f64(a.logvar_bounds.0);
        self.f64(a.logvar_bounds.1);
        self.len(a.obs_dim);
        self.len(a.state_dim);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail<T>(&self, reason: impl Into<String>) -> Result<T> {
        Err(Error::Checkpoint {
            offset: self.pos,
            reason: reason.into(),
        })
    }
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return self.fail(format!("truncated while reading {what} ({n} bytes needed, {} left)", self.buf.len() - self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_bits(self.u64(what)?))
    }
    fn len(&mut self, what: &str) -> Result<usize> {
        let at = self.pos;
        let v = self.u64(what)?;
        // No length can exceed the remaining bytes; guards against huge allocations.
        if v > self.buf.len() as u64 {
            return Err(Error::Checkpoint {
                offset: at,
                reason: format!("implausible {what} {v}"),
            });
        }
        Ok(v as usize)
    }
    fn tensor(&mut self, what: &str) -> Result<Tensor> {
        let r = self.len(what)?;
        let c = self.len(what)?;
        let n = r.checked_mul(c).filter(|&n| n <= self.buf.len());
        let Some(n) = n else {
            return self.fail(format!("implausible {what} shape {r}x{c}"));
        };
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(self.f64(what)?);
        }
        Ok(Array2::from_shape_vec((r, c), data).expect("shape matches length"))
    }
    fn tensors(&mut self, what: &str) -> Result<Vec<Tensor>> {
        let n = self.len(what)?;
        (0..n).map(|_| self.tensor(what)).collect()
    }
    fn mlp(&mut self, what: &str) -> Result<MlpParams> {
        let n = self.len(what)?;
        let mut layers = Vec::with_capacity(n);
        for _ in 0..n {
            let weight = self.tensor(what)?;
            let bias = self.tensor(what)?;
            layers.push(Layer { weight, bias });
        }
        Ok(MlpParams { layers })
    }
    fn adam(&mut self, what: &str) -> Result<AdamW> {
        Ok(AdamW {
            beta1: self.f64(what)?,
            beta2: self.f64(what)?,
            eps: self.f64(what)?,
            weight_decay: self.f64(what)?,
            step: self.u64(what)?,
            m: self.tensors(what)?,
            v: self.tensors(what)?,
        })
    }
    fn adapter(&mut self) -> Result<NoiseAdapter> {
        Ok(NoiseAdapter {
            params: self.mlp("adapter")?,
            embeddings: self.tensor("adapter embeddings")?,
            logvar_bounds: (self.f64("adapter bounds")?, self.f64("adapter bounds")?),
            obs_dim: self.len("adapter obs_dim")?,
            state_dim: self.len("adapter state_dim")?,
        })
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.u8(kind_tag(self.kind));
        w.u64(self.state.step);
        w.len(self.state.theta.dim);
        w.mlp(&self.state.theta.params);
        w.adam(&self.state.opt_theta);
        w.mlp(&self.state.ema.shadow);
        w.f64(self.state.ema.rate);
        match (&self.state.phi, &self.state.opt_phi) {
            (Some(a), Some(o)) => {
                w.u8(1);
                w.adapter(a);
                w.adam(o);
            }
            (None, None) => w.u8(0),
            _ => return Err(Error::invalid("adapter and its optimizer must be saved together")),
        }
        let cfg = serde_json::to_vec(&self.config)?;
        w.len(cfg.len());
        w.bytes(&cfg);
        w.bytes(&self.rng.get_seed());
        w.u64(self.rng.get_stream());
        w.bytes(&self.rng.get_word_pos().to_le_bytes());
        Ok(w.buf)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(MAGIC.len(), "magic")? != MAGIC {
            return Err(Error::Checkpoint {
                offset: 0,
                reason: "bad magic; not a checkpoint file".into(),
            });
        }
        let at = r.pos;
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Checkpoint {
                offset: at,
                reason: format!("unsupported version {version}, expected {VERSION}"),
            });
        }
        let at = r.pos;
        let tag = r.u8("kind tag")?;
        let Some(kind) = kind_from_tag(tag) else {
            return Err(Error::Checkpoint {
                offset: at,
                reason: format!("unknown kind tag {tag}"),
            });
        };
        let step = r.u64("step")?;
        let dim = r.len("dim")?;
        let at = r.pos;
        let theta = MeanFlowNet::from_params(r.mlp("generator")?).map_err(|e| Error::Checkpoint {
            offset: at,
            reason: e.to_string(),
        })?;
        if theta.dim != dim {
            return r.fail("generator dimension mismatch");
        }
        let opt_theta = r.adam("generator optimizer")?;
        let shadow = r.mlp("ema shadow")?;
        let rate = r.f64("ema rate")?;
        let at = r.pos;
        let (phi, opt_phi) = match r.u8("adapter flag")? {
            0 => (None, None),
            1 => {
                let a = r.adapter()?;
                let o = r.adam("adapter optimizer")?;
                (Some(a), Some(o))
            }
            f => {
                return Err(Error::Checkpoint {
                    offset: at,
                    reason: format!("bad adapter flag {f}"),
                })
            }
        };
        let n = r.len("config length")?;
        let at = r.pos;
        let config: TrainConfig = serde_json::from_slice(r.take(n, "config")?).map_err(|e| Error::Checkpoint {
            offset: at,
            reason: format!("config: {e}"),
        })?;
        let seed: [u8; 32] = r.take(32, "rng seed")?.try_into().expect("32 bytes");
        let stream = r.u64("rng stream")?;
        let word_pos = u128::from_le_bytes(r.take(16, "rng position")?.try_into().expect("16 bytes"));
        if r.pos != buf.len() {
            return r.fail(format!("{} trailing bytes", buf.len() - r.pos));
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);
        Ok(Self {
            kind,
            state: TrainState {
                theta,
                opt_theta,
                ema: EmaState { shadow, rate },
                phi,
                opt_phi,
                step,
            },
            config,
            rng,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;
    use rand::Rng;

    fn sample() -> Checkpoint {
        let cfg = TrainConfig::default();
        let theta = MeanFlowNet::new(2, &[8, 8], 1).unwrap();
        let phi = NoiseAdapter::new(1, 2, 2, 4, &[8], 2).unwrap();
        let mut state = TrainState::new(theta, Some(phi), &cfg).unwrap();
        state.step = 17;
        state.opt_theta.m[0].fill(0.1 + 1e-17);
        let mut rng = seeded_rng(9);
        let _: f64 = rng.random();
        Checkpoint {
            kind: Objective::Vfm,
            state,
            config: cfg,
            rng,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn truncated_and_corrupt() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [0, 5, 12, 100, bytes.len() - 1] {
            match Checkpoint::from_bytes(&bytes[..cut]) {
                Err(Error::Checkpoint { offset, .. }) => assert!(offset <= cut),
                other => panic!("expected checkpoint error, got {other:?}"),
            }
        }
        let mut bad = bytes.clone();
        bad[8] = 99;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint { offset: 8, .. })));
        bad = bytes;
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint { offset: 0, .. })));
    }
}
