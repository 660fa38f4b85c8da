//! `FINN1` checkpoint files.
//!
//! Layout: the line `FINN1\n`, the payload length as a little-endian `u64`,
//! the payload, and the SHA-256 digest of the payload. The payload holds, in
//! order and little-endian throughout:
//!
//! * the canonical run configuration text (`u64` length + UTF-8),
//! * the image resolution the model was trained at (`u64` H, `u64` W; 0 when unknown),
//! * counters: completed epochs, optimizer steps, Adam step (`u64` each),
//! * the schedule: current lr (`f64`), best loss (`u8` flag + `f64`), flat epochs (`u64`),
//! * permutations (`u32` count, then `u32` length + `u32` entries each),
//! * named tensors (`u32` count, then `u16` name length, name, `u32` rank,
//!   `u64` dims, `f64` values): parameters, then `adam.m.*`, then `adam.v.*`.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use fusioninn::flow::FlowModel;
use fusioninn::trainer::Trainer;
use fusioninn::Tensor;

use crate::config::RunConfig;
use crate::CliError;

pub const MAGIC: &[u8] = b"FINN1\n";

/// A training run frozen to disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub resolution: Option<(usize, usize)>,
    pub trainer: Trainer<f64>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
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
    fn tensor(&mut self, name: &str, t: &Tensor<f64>) {
        self.u16(name.len() as u16);
        self.0.extend_from_slice(name.as_bytes());
        self.u32(t.shape().len() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for &v in t.data() {
            self.f64(v);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| format!("payload truncated at byte {}", self.pos))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, String> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, String> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self) -> Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn tensor(&mut self) -> Result<(String, Tensor<f64>), String> {
        let n = self.u16()? as usize;
        let name = String::from_utf8(self.take(n)?.to_vec()).map_err(|_| "tensor name is not UTF-8")?;
        let rank = self.u32()? as usize;
        let shape = (0..rank)
            .map(|_| self.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let count = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&c| c.saturating_mul(8) <= self.buf.len())
            .ok_or_else(|| format!("tensor {name} has an impossible shape {shape:?}"))?;
        let data = (0..count).map(|_| self.f64()).collect::<Result<Vec<_>, _>>()?;
        let t = Tensor::new(shape, data).map_err(|e| e.to_string())?;
        Ok((name, t))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let t = &self.trainer;
        let mut w = Writer(Vec::new());
        let text = self.config.to_text();
        w.u64(text.len() as u64);
        w.0.extend_from_slice(text.as_bytes());
        let (h, wd) = self.resolution.unwrap_or((0, 0));
        w.u64(h as u64);
        w.u64(wd as u64);
        w.u64(t.epoch as u64);
        w.u64(t.step);
        w.u64(t.adam.step);
        w.f64(t.plateau.lr);
        match t.plateau.best {
            Some(b) => {
                w.u8(1);
                w.f64(b);
            }
            None => {
                w.u8(0);
                w.f64(0.0);
            }
        }
        w.u64(t.plateau.flat_epochs as u64);
        w.u32(t.model.permutations.len() as u32);
        for p in &t.model.permutations {
            w.u32(p.len() as u32);
            for &v in p {
                w.u32(v as u32);
            }
        }
        let names = t.model.param_names();
        let params = t.model.params();
        w.u32((3 * names.len()) as u32);
        for (n, p) in names.iter().zip(&params) {
            w.tensor(n, p);
        }
        for (n, m) in names.iter().zip(&t.adam.m) {
            w.tensor(&format!("adam.m.{n}"), m);
        }
        for (n, v) in names.iter().zip(&t.adam.v) {
            w.tensor(&format!("adam.v.{n}"), v);
        }
        let payload = w.0;
        let mut out = Vec::with_capacity(payload.len() + 46);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&payload);
        out.extend_from_slice(&Sha256::digest(&payload));
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self, CliError> {
        let bad = |m: String| CliError::Input(format!("{origin}: {m}"));
        if !bytes.starts_with(MAGIC) {
            return Err(bad("not a FINN1 checkpoint".into()));
        }
        let rest = &bytes[MAGIC.len()..];
        if rest.len() < 8 {
            return Err(bad("truncated header".into()));
        }
        let len = u64::from_le_bytes(rest[..8].try_into().expect("8 bytes")) as usize;
        let body = &rest[8..];
        if body.len() != len.saturating_add(32) {
            return Err(bad(format!(
                "expected {} payload bytes plus checksum, found {}",
                len,
                body.len()
            )));
        }
        let (payload, digest) = body.split_at(len);
        if Sha256::digest(payload).as_slice() != digest {
            return Err(bad("checksum mismatch; the file is corrupted".into()));
        }
        Self::parse_payload(payload, origin).map_err(bad)
    }

    fn parse_payload(payload: &[u8], origin: &str) -> Result<Self, String> {
        let mut r = Reader { buf: payload, pos: 0 };
        let n = r.u64()? as usize;
        let text = std::str::from_utf8(r.take(n)?).map_err(|_| "configuration is not UTF-8")?;
        let config = RunConfig::parse_text(text, &format!("{origin} (embedded config)"))
            .map_err(|e| e.to_string())?;
        let (h, w) = (r.u64()? as usize, r.u64()? as usize);
        let resolution = (h > 0 && w > 0).then_some((h, w));
        let epoch = r.u64()? as usize;
        let step = r.u64()?;
        let adam_step = r.u64()?;
        let lr = r.f64()?;
        let has_best = r.u8()? == 1;
        let best = r.f64()?;
        let flat_epochs = r.u64()? as usize;

        let mut model: FlowModel<f64> = FlowModel::new(config.model_config()).map_err(|e| e.to_string())?;
        let n_perm = r.u32()? as usize;
        let mut perms = Vec::with_capacity(n_perm.min(64));
        for _ in 0..n_perm {
            let len = r.u32()? as usize;
            let p = (0..len)
                .map(|_| r.u32().map(|v| v as usize))
                .collect::<Result<Vec<_>, _>>()?;
            perms.push(p);
        }
        model.permutations = perms;

        let names = model.param_names();
        let n_tensors = r.u32()? as usize;
        if n_tensors != 3 * names.len() {
            return Err(format!(
                "expected {} tensors for this configuration, found {n_tensors}",
                3 * names.len()
            ));
        }
        let mut read_group = |prefix: &str| -> Result<Vec<Tensor<f64>>, String> {
            names
                .iter()
                .map(|n| {
                    let (name, t) = r.tensor()?;
                    let want = format!("{prefix}{n}");
                    if name != want {
                        return Err(format!("expected tensor {want}, found {name}"));
                    }
                    Ok(t)
                })
                .collect()
        };
        let params = read_group("")?;
        let m = read_group("adam.m.")?;
        let v = read_group("adam.v.")?;
        if r.pos != payload.len() {
            return Err(format!("{} trailing payload bytes", payload.len() - r.pos));
        }
        for (dst, src) in model.params_mut().into_iter().zip(params) {
            if dst.shape() != src.shape() {
                return Err(format!(
                    "parameter shape {:?} does not match the configuration ({:?})",
                    src.shape(),
                    dst.shape()
                ));
            }
            *dst = src;
        }
        model.validate().map_err(|e| e.to_string())?;
        let mut trainer = Trainer::new(model, config.train_config()).map_err(|e| e.to_string())?;
        for (i, (mi, vi)) in m.into_iter().zip(v).enumerate() {
            if mi.shape() != trainer.adam.m[i].shape() || vi.shape() != trainer.adam.v[i].shape() {
                return Err(format!("optimizer moment {i} has the wrong shape"));
            }
            trainer.adam.m[i] = mi;
            trainer.adam.v[i] = vi;
        }
        trainer.adam.step = adam_step;
        trainer.epoch = epoch;
        trainer.step = step;
        trainer.plateau.lr = lr;
        trainer.plateau.best = has_best.then_some(best);
        trainer.plateau.flat_epochs = flat_epochs;
        Ok(Checkpoint {
            config,
            resolution,
            trainer,
        })
    }

    /// Writes atomically: a sibling temporary file is renamed over `path`.
    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        let tmp = path.with_extension("finn-tmp");
        let io = |e: std::io::Error| CliError::Input(format!("{}: {e}", path.display()));
        fs::write(&tmp, self.to_bytes()).map_err(io)?;
        fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let bytes = fs::read(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}
