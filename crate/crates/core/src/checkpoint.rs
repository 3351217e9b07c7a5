//! Versioned binary archive of a [`TrainState`].
//!
//! Layout: the 8-byte magic `JTOKCKPT`, a little-endian `u32` format version,
//! a little-endian `u64` header length, a JSON header, then the raw
//! little-endian tensor data. The header carries the config snapshot, step
//! counter, LeCam anchors, optimizer step counts, a tensor table and an
//! FNV-1a checksum of the data section.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use jointok_autograd::{Adam, DType, ParamStore, Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::objectives::LecamAnchors;
use crate::trainer::TrainState;

pub const MAGIC: &[u8; 8] = b"JTOKCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub dtype: String,
    pub step: usize,
    pub config: String,
    pub lecam: LecamAnchors,
    pub optimizer_steps: BTreeMap<String, u64>,
    tensors: Vec<TensorEntry>,
    data_len: u64,
    checksum: u64,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Fields that fix parameter shapes; a mismatch in any of them makes a checkpoint unusable.
fn architecture(cfg: &TrainConfig) -> Vec<(&'static str, String)> {
    vec![
        ("precision", format!("{:?}", cfg.precision)),
        ("image_size", cfg.image_size.to_string()),
        ("channels", cfg.channels.to_string()),
        ("num_classes", cfg.num_classes.to_string()),
        ("patch_size", cfg.patch_size.to_string()),
        ("width", cfg.width.to_string()),
        ("heads", cfg.heads.to_string()),
        ("enc_layers", cfg.enc_layers.to_string()),
        ("dec_layers", cfg.dec_layers.to_string()),
        ("mlp_ratio", cfg.mlp_ratio.to_string()),
        ("latent_dim", cfg.latent_dim.to_string()),
        ("num_tokens", cfg.num_tokens.to_string()),
        ("codebook_size", cfg.codebook_size.to_string()),
        ("ar_layers", cfg.ar_layers.to_string()),
        ("ar_width", cfg.ar_width.to_string()),
        ("ar_heads", cfg.ar_heads.to_string()),
        ("aux_ar", cfg.aux_ar.to_string()),
        ("aux_layers", cfg.aux_layers.to_string()),
        ("disc_channels", cfg.disc_channels.to_string()),
        ("align_mode", format!("{:?}", cfg.align_mode)),
        ("decoder_align", cfg.decoder_align.to_string()),
        ("provider", cfg.provider.clone()),
        ("provider_patch", cfg.provider_patch.to_string()),
        ("provider_dim", cfg.provider_dim.to_string()),
    ]
}

/// Reports the first architecture field in which `stored` differs from `expected`.
pub fn check_compatible(stored: &TrainConfig, expected: &TrainConfig) -> Result<()> {
    for ((field, s), (_, e)) in architecture(stored).into_iter().zip(architecture(expected)) {
        if s != e {
            return Err(Error::CheckpointMismatch { field: field.to_string(), stored: s, expected: e });
        }
    }
    Ok(())
}

struct Writer<T> {
    entries: Vec<TensorEntry>,
    data: Vec<u8>,
    _t: std::marker::PhantomData<T>,
}

impl<T: Scalar> Writer<T> {
    fn tensor(&mut self, name: String, t: &Tensor<T>) {
        self.entries.push(TensorEntry { name, shape: t.shape().to_vec(), offset: self.data.len() as u64 });
        self.data.extend_from_slice(&T::to_le_bytes_vec(t.data()));
    }

    fn store(&mut self, prefix: &str, store: &ParamStore<T>) {
        for (_, name, t) in store.iter() {
            self.tensor(format!("{prefix}/{name}"), t);
        }
    }

    fn adam(&mut self, prefix: &str, store: &ParamStore<T>, opt: &Adam<T>) {
        for (((_, name, _), m), v) in store.iter().zip(opt.first_moments()).zip(opt.second_moments()) {
            self.tensor(format!("{prefix}/m/{name}"), m);
            self.tensor(format!("{prefix}/v/{name}"), v);
        }
    }
}

/// Writes the full training state atomically (temporary file, then rename).
pub fn save_checkpoint<T: Scalar>(state: &TrainState<T>, path: &Path) -> Result<()> {
    let mut w = Writer::<T> { entries: Vec::new(), data: Vec::new(), _t: std::marker::PhantomData };
    let mut optimizer_steps = BTreeMap::new();
    w.store("tok", &state.tok);
    w.store("ar", &state.ar);
    w.store("proj", &state.proj);
    w.store("disc", &state.disc);
    w.store("ema_tok", &state.ema_tok);
    w.store("ema_ar", &state.ema_ar);
    w.adam("opt_tok", &state.tok, &state.opt_tok);
    w.adam("opt_ar", &state.ar, &state.opt_ar);
    w.adam("opt_proj", &state.proj, &state.opt_proj);
    w.adam("opt_disc", &state.disc, &state.opt_disc);
    optimizer_steps.insert("tok".to_string(), state.opt_tok.steps());
    optimizer_steps.insert("ar".to_string(), state.opt_ar.steps());
    optimizer_steps.insert("proj".to_string(), state.opt_proj.steps());
    optimizer_steps.insert("disc".to_string(), state.opt_disc.steps());
    if let (Some(aux), Some(ema), Some(opt)) = (&state.aux, &state.ema_aux, &state.opt_aux) {
        w.store("aux", aux);
        w.store("ema_aux", ema);
        w.adam("opt_aux", aux, opt);
        optimizer_steps.insert("aux".to_string(), opt.steps());
    }
    let header = CheckpointHeader {
        dtype: T::DTYPE.name().to_string(),
        step: state.step,
        config: state.cfg.to_toml(),
        lecam: state.lecam,
        optimizer_steps,
        tensors: w.entries,
        data_len: w.data.len() as u64,
        checksum: fnv1a(&w.data),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let tmp = path.with_extension("tmp");
    let write = |f: &mut std::fs::File| -> std::io::Result<()> {
        f.write_all(MAGIC)?;
        f.write_all(&FORMAT_VERSION.to_le_bytes())?;
        f.write_all(&(json.len() as u64).to_le_bytes())?;
        f.write_all(&json)?;
        f.write_all(&w.data)?;
        f.sync_all()
    };
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    write(&mut f).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// A parsed but not yet materialized archive.
pub struct RawCheckpoint {
    pub header: CheckpointHeader,
    data: Vec<u8>,
}

impl RawCheckpoint {
    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let corrupt = |what: &str| Error::Checkpoint(format!("{}: {what}", path.display()));
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(corrupt("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch { found: version, expected: FORMAT_VERSION });
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if body.len() < hlen {
            return Err(corrupt("truncated header"));
        }
        let header: CheckpointHeader = serde_json::from_slice(&body[..hlen]).map_err(|e| corrupt(&format!("header: {e}")))?;
        let data = body[hlen..].to_vec();
        if data.len() as u64 != header.data_len {
            return Err(corrupt(&format!("data section has {} bytes, expected {}", data.len(), header.data_len)));
        }
        if fnv1a(&data) != header.checksum {
            return Err(corrupt("checksum mismatch"));
        }
        Ok(Self { header, data })
    }

    pub fn config(&self) -> Result<TrainConfig> {
        TrainConfig::from_toml(&self.header.config)
    }

    pub fn dtype(&self) -> Result<DType> {
        match self.header.dtype.as_str() {
            "f32" => Ok(DType::F32),
            "f64" => Ok(DType::F64),
            other => Err(Error::Checkpoint(format!("unknown dtype {other}"))),
        }
    }

    fn tensors<T: Scalar>(&self) -> Result<BTreeMap<&str, Tensor<T>>> {
        let size = T::DTYPE.size_in_bytes();
        let mut out = BTreeMap::new();
        for e in &self.header.tensors {
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + n * size;
            if end > self.data.len() {
                return Err(Error::Checkpoint(format!("tensor {} extends past the data section", e.name)));
            }
            out.insert(e.name.as_str(), Tensor::from_vec(e.shape.clone(), T::from_le_bytes_slice(&self.data[start..end])));
        }
        Ok(out)
    }

    /// Rebuilds the state; `expected`, if given, must agree on every architecture field.
    pub fn into_state<T: Scalar>(self, expected: Option<&TrainConfig>) -> Result<TrainState<T>> {
        let cfg = self.config()?;
        if let Some(e) = expected {
            check_compatible(&cfg, e)?;
        }
        if self.dtype()? != T::DTYPE {
            return Err(Error::CheckpointMismatch {
                field: "precision".into(),
                stored: self.header.dtype.clone(),
                expected: T::DTYPE.name().into(),
            });
        }
        let mut tensors = self.tensors::<T>()?;
        let mut state = TrainState::<T>::new(cfg)?;
        let mut take = |name: String, like: &Tensor<T>| -> Result<Tensor<T>> {
            let t = tensors.remove(name.as_str()).ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if t.shape() != like.shape() {
                return Err(Error::CheckpointMismatch {
                    field: name,
                    stored: format!("{:?}", t.shape()),
                    expected: format!("{:?}", like.shape()),
                });
            }
            Ok(t)
        };
        let fill = |prefix: &str, store: &mut ParamStore<T>, take: &mut dyn FnMut(String, &Tensor<T>) -> Result<Tensor<T>>| {
            let ids: Vec<_> = store.ids().collect();
            for id in ids {
                let t = take(format!("{prefix}/{}", store.name(id)), store.get(id))?;
                store.set(id, t);
            }
            Ok::<_, Error>(())
        };
        let restore = |prefix: &str,
                       store: &ParamStore<T>,
                       opt: &mut Adam<T>,
                       steps: u64,
                       take: &mut dyn FnMut(String, &Tensor<T>) -> Result<Tensor<T>>| {
            let mut m = Vec::new();
            let mut v = Vec::new();
            for (_, name, t) in store.iter() {
                m.push(take(format!("{prefix}/m/{name}"), t)?);
                v.push(take(format!("{prefix}/v/{name}"), t)?);
            }
            opt.restore(steps, m, v);
            Ok::<_, Error>(())
        };
        let steps = |k: &str| self.header.optimizer_steps.get(k).copied().unwrap_or(0);
        fill("tok", &mut state.tok, &mut take)?;
        fill("ar", &mut state.ar, &mut take)?;
        fill("proj", &mut state.proj, &mut take)?;
        fill("disc", &mut state.disc, &mut take)?;
        fill("ema_tok", &mut state.ema_tok, &mut take)?;
        fill("ema_ar", &mut state.ema_ar, &mut take)?;
        restore("opt_tok", &state.tok, &mut state.opt_tok, steps("tok"), &mut take)?;
        restore("opt_ar", &state.ar, &mut state.opt_ar, steps("ar"), &mut take)?;
        restore("opt_proj", &state.proj, &mut state.opt_proj, steps("proj"), &mut take)?;
        restore("opt_disc", &state.disc, &mut state.opt_disc, steps("disc"), &mut take)?;
        if let (Some(aux), Some(ema), Some(opt)) = (&mut state.aux, &mut state.ema_aux, &mut state.opt_aux) {
            fill("aux", aux, &mut take)?;
            fill("ema_aux", ema, &mut take)?;
            restore("opt_aux", aux, opt, steps("aux"), &mut take)?;
        }
        state.step = self.header.step;
        state.lecam = self.header.lecam;
        Ok(state)
    }
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<TrainState<T>> {
    RawCheckpoint::read(path)?.into_state(None)
}

/// Loads a checkpoint that must match `expected` on every architecture field.
pub fn load_checkpoint_expecting<T: Scalar>(path: &Path, expected: &TrainConfig) -> Result<TrainState<T>> {
    RawCheckpoint::read(path)?.into_state(Some(expected))
}
