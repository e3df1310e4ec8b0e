//! Binary checkpoint files. The layout is documented in `docs/checkpoint-format.md`.

use std::io::Write;
use std::path::Path;

use dpgan_core::dp::{AdamParams, AdamState};
use dpgan_core::engine::{Checkpoint, Ema, ScheduleState};
use dpgan_core::nn::{Activation, ModelState, NetworkSpec, OutputActivation};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 8] = *b"DPGANCKP";
pub const VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn opt_f64(&mut self, v: Option<f64>) {
        match v {
            Some(x) => {
                self.u8(1);
                self.f64(x);
            }
            None => self.u8(0),
        }
    }
    fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        v.iter().for_each(|&x| self.f64(x));
    }

    fn spec(&mut self, s: &NetworkSpec) {
        self.u64(s.layer_sizes.len() as u64);
        s.layer_sizes.iter().for_each(|&n| self.u64(n as u64));
        match s.activation {
            Activation::Relu => self.u8(0),
            Activation::LeakyRelu(a) => {
                self.u8(1);
                self.f64(a);
            }
            Activation::Tanh => self.u8(2),
            Activation::Sigmoid => self.u8(3),
        }
        self.u64(s.num_classes as u64);
        self.u64(s.label_embed_dim as u64);
        self.u8(match s.output_activation {
            OutputActivation::Sigmoid => 0,
            OutputActivation::Tanh => 1,
            OutputActivation::Identity => 2,
        });
    }

    fn model(&mut self, m: &ModelState) {
        self.spec(m.spec());
        self.f64s(m.params());
    }

    fn adam(&mut self, a: &AdamState) {
        self.u64(a.step_count);
        self.f64(a.params.alpha);
        self.f64(a.params.beta1);
        self.f64(a.params.beta2);
        self.f64(a.params.eps_hat);
        self.f64s(&a.first_moment);
        self.f64s(&a.second_moment);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn err(&self, at: usize, msg: impl Into<String>) -> Error {
        Error::format(self.path, at as u64, msg)
    }
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let s = self.buf.get(self.pos..self.pos + n).ok_or_else(|| self.err(self.pos, "unexpected end of file"))?;
        self.pos += n;
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
    fn usize(&mut self) -> Result<usize> {
        let at = self.pos;
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| self.err(at, format!("count {v} does not fit in memory")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn flag(&mut self) -> Result<bool> {
        let at = self.pos;
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            t => Err(self.err(at, format!("invalid flag byte {t}"))),
        }
    }
    fn opt_f64(&mut self) -> Result<Option<f64>> {
        Ok(if self.flag()? { Some(self.f64()?) } else { None })
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let at = self.pos;
        let n = self.usize()?;
        if n > (self.buf.len() - self.pos) / 8 {
            return Err(self.err(at, format!("vector of {n} values overruns the file")));
        }
        (0..n).map(|_| self.f64()).collect()
    }

    fn spec(&mut self) -> Result<NetworkSpec> {
        let at = self.pos;
        let n = self.usize()?;
        if n > 64 {
            return Err(self.err(at, format!("implausible layer count {n}")));
        }
        let layer_sizes = (0..n).map(|_| self.usize()).collect::<Result<Vec<_>>>()?;
        let at = self.pos;
        let activation = match self.u8()? {
            0 => Activation::Relu,
            1 => Activation::LeakyRelu(self.f64()?),
            2 => Activation::Tanh,
            3 => Activation::Sigmoid,
            t => return Err(self.err(at, format!("unknown activation tag {t}"))),
        };
        let num_classes = self.usize()?;
        let label_embed_dim = self.usize()?;
        let at = self.pos;
        let output_activation = match self.u8()? {
            0 => OutputActivation::Sigmoid,
            1 => OutputActivation::Tanh,
            2 => OutputActivation::Identity,
            t => return Err(self.err(at, format!("unknown output activation tag {t}"))),
        };
        Ok(NetworkSpec { layer_sizes, activation, num_classes, label_embed_dim, output_activation })
    }

    fn model(&mut self) -> Result<ModelState> {
        let at = self.pos;
        let spec = self.spec()?;
        let params = self.f64s()?;
        ModelState::from_params(spec, params).map_err(|e| self.err(at, e.to_string()))
    }

    fn adam(&mut self) -> Result<AdamState> {
        let step_count = self.u64()?;
        let params = AdamParams { alpha: self.f64()?, beta1: self.f64()?, beta2: self.f64()?, eps_hat: self.f64()? };
        let first_moment = self.f64s()?;
        let second_moment = self.f64s()?;
        Ok(AdamState { step_count, first_moment, second_moment, params })
    }
}

/// Serializes a checkpoint to bytes.
pub fn encode(ck: &Checkpoint) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(&MAGIC);
    w.u32(VERSION);
    w.model(&ck.discriminator);
    w.model(&ck.generator);
    w.adam(&ck.d_opt);
    w.adam(&ck.g_opt);
    match &ck.schedule {
        None => w.u8(0),
        Some(s) => {
            w.u8(1);
            w.f64(s.beta);
            w.f64(s.floor);
            w.u64(s.ladder.len() as u64);
            s.ladder.iter().for_each(|&r| w.u32(r));
            w.u64(s.rung_index as u64);
            w.opt_f64(s.ema);
            w.u64(s.steps_since_change);
            w.u64(s.grace);
            w.u8(s.exhausted_warned as u8);
        }
    }
    w.0.extend_from_slice(&ck.rng.get_seed());
    w.u64(ck.rng.get_stream());
    w.0.extend_from_slice(&ck.rng.get_word_pos().to_le_bytes());
    w.u64(ck.t);
    w.u64(ck.k);
    w.u64(ck.accountant_steps);
    w.u64(ck.d_steps_since_g);
    w.f64(ck.fake_acc_ema.beta);
    w.opt_f64(ck.fake_acc_ema.value);
    w.f64(ck.last_g_loss);
    w.f64(ck.last_d_loss);
    let crc = crc32fast::hash(&w.0);
    w.u32(crc);
    w.0
}

/// Parses bytes produced by [`encode`]. `path` is used in error messages.
pub fn decode(buf: &[u8], path: &Path) -> Result<Checkpoint> {
    let mut r = Reader { buf, pos: 0, path };
    if r.take(8)? != MAGIC {
        return Err(r.err(0, "not a checkpoint file (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.err(8, format!("unsupported checkpoint version {version}, expected {VERSION}")));
    }
    if buf.len() < 16 {
        return Err(r.err(buf.len(), "unexpected end of file"));
    }
    let body = buf.len() - 4;
    let stored = u32::from_le_bytes(buf[body..].try_into().unwrap());
    if crc32fast::hash(&buf[..body]) != stored {
        return Err(r.err(body, "checksum mismatch; the file is corrupt"));
    }
    r.buf = &buf[..body];
    let discriminator = r.model()?;
    let generator = r.model()?;
    let d_opt = r.adam()?;
    let g_opt = r.adam()?;
    let schedule = if r.flag()? {
        let beta = r.f64()?;
        let floor = r.f64()?;
        let at = r.pos;
        let n = r.usize()?;
        if n > (r.buf.len() - r.pos) / 4 {
            return Err(r.err(at, "ladder overruns the file"));
        }
        let ladder = (0..n).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let at = r.pos;
        let rung_index = r.usize()?;
        if rung_index >= ladder.len() {
            return Err(r.err(at, format!("rung {rung_index} outside a ladder of {}", ladder.len())));
        }
        let ema = r.opt_f64()?;
        let steps_since_change = r.u64()?;
        let grace = r.u64()?;
        let exhausted_warned = r.flag()?;
        Some(ScheduleState { beta, floor, ladder, rung_index, ema, steps_since_change, grace, exhausted_warned })
    } else {
        None
    };
    let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
    let stream = r.u64()?;
    let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    let ck = Checkpoint {
        discriminator,
        generator,
        d_opt,
        g_opt,
        schedule,
        rng,
        t: r.u64()?,
        k: r.u64()?,
        accountant_steps: r.u64()?,
        d_steps_since_g: r.u64()?,
        fake_acc_ema: Ema { beta: r.f64()?, value: r.opt_f64()? },
        last_g_loss: r.f64()?,
        last_d_loss: r.f64()?,
    };
    if r.pos != body {
        return Err(r.err(r.pos, format!("{} trailing bytes", body - r.pos)));
    }
    for (name, opt, model) in [("discriminator", &ck.d_opt, &ck.discriminator), ("generator", &ck.g_opt, &ck.generator)] {
        if opt.first_moment.len() != model.param_count() || opt.second_moment.len() != model.param_count() {
            return Err(Error::format(path, 12, format!("{name} optimizer does not match its parameter count")));
        }
    }
    Ok(ck)
}

/// Writes atomically: a temporary file in the same directory, then a rename.
pub fn save(ck: &Checkpoint, path: &Path) -> Result<()> {
    write_atomic(path, &encode(ck))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&buf, path)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
