//! `"S4CK"` checkpoints (little-endian).
//!
//! After the magic and a `u32` version come six sections, each a `u64` byte
//! length followed by its payload:
//!
//! 1. config: the run's TOML, UTF-8
//! 2. params: `u64` count, then `f32` values in parameter order
//! 3. optimizer: `u64` step, `f64` lr, beta1, beta2, eps, `u64` count, then
//!    first and second moments as `f32`
//! 4. whitening: a `"ZCAW"` record, or empty
//! 5. rng: 32-byte ChaCha8 seed, `u64` stream, `u128` word position
//! 6. meta: JSON `{epoch, history}`

use std::io::{Cursor, Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::{AdamConfig, EpochLog, OptimizerState, TrainConfig};
use crate::dsp::WhiteningStats;
use crate::error::{Error, Result};
use crate::nn::Model;

pub const MAGIC: &[u8; 4] = b"S4CK";
pub const VERSION: u32 = 1;

/// Serializable position of a ChaCha8 stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    /// Completed epochs.
    pub epoch: u64,
    pub history: Vec<EpochLog>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: Model,
    pub optimizer: OptimizerState,
    pub whitening: Option<WhiteningStats>,
    pub rng: RngState,
    pub meta: Meta,
}

fn corrupt(what: &str) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::CorruptHeader(format!("checkpoint {what}: {e}"))
}

fn f32_exact(x: f64) -> Result<f32> {
    let y = x as f32;
    if y as f64 != x && x.is_finite() {
        return Err(Error::NumericalInstability(format!("{x} is not representable as f32")));
    }
    Ok(y)
}

fn put_f32s(out: &mut Vec<u8>, xs: impl Iterator<Item = f64>) -> Result<()> {
    for x in xs {
        out.extend_from_slice(&f32_exact(x)?.to_le_bytes());
    }
    Ok(())
}

struct Reader<'a>(Cursor<&'a [u8]>, &'static str);

impl Reader<'_> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.0.read_exact(&mut b).map_err(corrupt(self.1))?;
        Ok(b)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| Ok(f32::from_le_bytes(self.bytes()?) as f64)).collect()
    }
    fn done(&self) -> Result<()> {
        if self.0.position() as usize != self.0.get_ref().len() {
            return Err(Error::CorruptHeader(format!("checkpoint {}: trailing bytes", self.1)));
        }
        Ok(())
    }
}

fn split(flat: &[f64], lens: impl Iterator<Item = usize>) -> Vec<Vec<f64>> {
    let mut off = 0;
    lens.map(|n| {
        off += n;
        flat[off - n..off].to_vec()
    })
    .collect()
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut sections: Vec<Vec<u8>> = Vec::with_capacity(6);
        sections.push(self.config.to_toml().into_bytes());

        let mut p = Vec::new();
        p.extend_from_slice(&(self.model.count_params() as u64).to_le_bytes());
        put_f32s(&mut p, self.model.params.values().iter().flat_map(|t| t.data().iter().copied()))?;
        sections.push(p);

        let o = &self.optimizer;
        let mut b = Vec::new();
        b.extend_from_slice(&o.step.to_le_bytes());
        for x in [o.config.lr, o.config.beta1, o.config.beta2, o.config.eps] {
            b.extend_from_slice(&x.to_le_bytes());
        }
        b.extend_from_slice(&(o.count() as u64).to_le_bytes());
        put_f32s(&mut b, o.m.iter().flatten().copied())?;
        put_f32s(&mut b, o.v.iter().flatten().copied())?;
        sections.push(b);

        let mut w = Vec::new();
        if let Some(s) = &self.whitening {
            s.write(&mut w)?;
        }
        sections.push(w);

        let mut r = self.rng.seed.to_vec();
        r.extend_from_slice(&self.rng.stream.to_le_bytes());
        r.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        sections.push(r);

        sections.push(serde_json::to_vec(&self.meta)?);

        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&VERSION.to_le_bytes());
        for s in sections {
            out.extend_from_slice(&(s.len() as u64).to_le_bytes());
            out.extend_from_slice(&s);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut top = Reader(Cursor::new(bytes), "header");
        if &top.bytes::<4>()? != MAGIC {
            return Err(Error::CorruptHeader("not an S4CK checkpoint".into()));
        }
        let version = u32::from_le_bytes(top.bytes()?);
        if version != VERSION {
            return Err(Error::ConfigMismatch(format!("checkpoint version {version}, this build reads {VERSION}")));
        }
        let mut sections = Vec::with_capacity(6);
        for name in ["config", "params", "optimizer", "whitening", "rng", "meta"] {
            let len = top.u64()? as usize;
            let start = top.0.position() as usize;
            let body = bytes.get(start..start.saturating_add(len)).ok_or_else(|| Error::CorruptHeader(format!("checkpoint {name}: truncated")))?;
            top.0.set_position((start + len) as u64);
            sections.push((name, body));
        }
        top.done()?;

        let text = std::str::from_utf8(sections[0].1).map_err(|e| Error::CorruptHeader(format!("checkpoint config: {e}")))?;
        let config = TrainConfig::from_toml(text)?;
        let mut model = Model::new(config.model.clone(), 0)?;

        let mut r = Reader(Cursor::new(sections[1].1), "params");
        let n = r.u64()? as usize;
        if n != model.count_params() {
            return Err(Error::ConfigMismatch(format!("{n} stored parameters, configuration has {}", model.count_params())));
        }
        model.params.load_flat(&r.f32s(n)?)?;
        r.done()?;

        let mut r = Reader(Cursor::new(sections[2].1), "optimizer");
        let step = r.u64()?;
        let config_adam = AdamConfig { lr: r.f64()?, beta1: r.f64()?, beta2: r.f64()?, eps: r.f64()? };
        let count = r.u64()? as usize;
        if count != n {
            return Err(Error::CorruptHeader(format!("optimizer holds {count} moments for {n} parameters")));
        }
        let lens: Vec<usize> = model.params.values().iter().map(|t| t.len()).collect();
        let m = split(&r.f32s(n)?, lens.iter().copied());
        let v = split(&r.f32s(n)?, lens.iter().copied());
        r.done()?;
        let optimizer = OptimizerState { m, v, step, config: config_adam };

        let w = sections[3].1;
        let whitening = if w.is_empty() { None } else { Some(WhiteningStats::read(&mut Cursor::new(w))?) };

        let mut r = Reader(Cursor::new(sections[4].1), "rng");
        let rng = RngState { seed: r.bytes()?, stream: r.u64()?, word_pos: u128::from_le_bytes(r.bytes()?) };
        r.done()?;

        let meta: Meta = serde_json::from_slice(sections[5].1).map_err(|e| Error::CorruptHeader(format!("checkpoint meta: {e}")))?;
        Ok(Self { config, model, optimizer, whitening, rng, meta })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.to_bytes()?;
        // write then rename so a crash never leaves a truncated file
        let path = path.as_ref();
        let tmp = path.with_extension("s4ck.tmp");
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}
