//! Model checkpoints.
//!
//! Layout (little-endian): magic `"PFCK"`, u32 version, then length-prefixed
//! UTF-8 strings for the architecture, variant and δ choice, u32 class
//! count, three u32 input extents, u64 step counter, the config snapshot as
//! a length-prefixed string, a u32 record count and the records. A record is
//! a name, a trainable flag byte, a u32 payload length, the CVT1 payload and
//! a CRC-32 of the payload.
//!
//! Only architecture and parameters are stored; per-inference secrets never
//! reach a model and so cannot reach a checkpoint.

use std::path::Path;

use crate::config::DeltaChoice;
use crate::error::{Error, Result};
use crate::network::{build, build_baseline, build_with_delta, Arch, Model, Variant};
use crate::tensor::{dump, Scalar};

pub const MAGIC: &[u8; 4] = b"PFCK";
pub const VERSION: u32 = 1;

#[derive(Debug)]
pub struct Checkpoint<T> {
    pub model: Model<T>,
    pub delta: DeltaChoice,
    pub step: u64,
    /// TOML text of the effective config, empty when unknown.
    pub config: String,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

/// Serializes a checkpoint; identical inputs give identical bytes.
pub fn to_bytes<T: Scalar>(ck: &Checkpoint<T>) -> Vec<u8> {
    let net = &ck.model.net;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_str(&mut out, &net.arch.to_string());
    put_str(&mut out, &net.variant.tag());
    put_str(&mut out, &ck.delta.to_string());
    out.extend_from_slice(&(net.classes as u32).to_le_bytes());
    for d in net.input_shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&ck.step.to_le_bytes());
    put_str(&mut out, &ck.config);
    let store = &ck.model.store;
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, p) in store.iter() {
        put_str(&mut out, &p.name);
        out.push(u8::from(p.trainable));
        let payload = dump::encode(&p.value);
        out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&payload);
        out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format(format!("checkpoint truncated at offset {} reading {what}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let at = self.pos;
        String::from_utf8(self.take(n, what)?.to_vec()).map_err(|_| Error::Format(format!("{what} at offset {at} is not UTF-8")))
    }
}

pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Version { found: version, expected: VERSION });
    }
    let arch: Arch = r.string("architecture")?.parse()?;
    let variant: Variant = r.string("variant")?.parse()?;
    let delta: DeltaChoice = r.string("delta choice")?.parse()?;
    let classes = r.u32("class count")? as usize;
    let input_shape = [r.u32("input shape")? as usize, r.u32("input shape")? as usize, r.u32("input shape")? as usize];
    let step = r.u64("step")?;
    let config = r.string("config snapshot")?;
    let net = match (variant, delta.mode()) {
        (Variant::Complex, None) => build(arch, classes, input_shape)?,
        (Variant::Complex, Some(mode)) => build_with_delta(arch, classes, input_shape, mode)?,
        (v, _) => build_baseline(arch, v, classes, input_shape)?,
    };
    let mut store = net.init_params::<T>(0)?;
    let count = r.u32("record count")? as usize;
    let mut seen = vec![false; store.len()];
    for _ in 0..count {
        let name = r.string("parameter name")?;
        let trainable = r.take(1, "trainable flag")?[0] != 0;
        let len = r.u32("payload length")? as usize;
        let at = r.pos;
        let payload = r.take(len, "payload")?;
        let crc = r.u32("checksum")?;
        if crc32fast::hash(payload) != crc {
            return Err(Error::Format(format!("checksum mismatch in record {name:?} at offset {at}")));
        }
        let (value, used) = dump::decode::<T>(payload)?;
        if used != len {
            return Err(Error::Format(format!("record {name:?} length {len} disagrees with its tensor ({used} bytes)")));
        }
        let id = store.find(&name).ok_or_else(|| Error::Format(format!("unexpected parameter {name:?} for {arch}")))?;
        if store.value(id).shape() != value.shape() {
            return Err(Error::Format(format!(
                "parameter {name:?} has shape {:?}, architecture expects {:?}",
                value.shape(),
                store.value(id).shape()
            )));
        }
        *store.value_mut(id) = value;
        store.set_trainable(id, trainable);
        seen[id.0] = true;
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after the last record", bytes.len() - r.pos)));
    }
    if let Some((id, _)) = store.iter().find(|(id, _)| !seen[id.0]) {
        return Err(Error::MissingParameter(store.get(id).name.clone()));
    }
    Ok(Checkpoint { model: Model { net, store }, delta, step, config })
}

pub fn save_checkpoint<T: Scalar>(ck: &Checkpoint<T>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, to_bytes(ck))?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::Format(format!("cannot read checkpoint {}: {e}", path.display())))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::DeltaMode;
    use crate::network::build_baseline;

    fn sample(variant: Variant) -> Checkpoint<f32> {
        let net = match variant {
            Variant::Complex => build(Arch::LeNet, 4, [3, 16, 16]).unwrap(),
            v => build_baseline(Arch::LeNet, v, 4, [3, 16, 16]).unwrap(),
        };
        Checkpoint { model: Model::new(net, 11).unwrap(), delta: DeltaChoice::Default, step: 42, config: "arch = \"lenet\"\n".into() }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for v in [Variant::Complex, Variant::Original, Variant::Noisy { gamma: 0.5 }] {
            let ck = sample(v);
            let bytes = to_bytes(&ck);
            let back: Checkpoint<f32> = from_bytes(&bytes).unwrap();
            assert_eq!(back.step, 42);
            assert_eq!(back.config, ck.config);
            assert_eq!(back.model.net, ck.model.net);
            for ((_, a), (_, b)) in ck.model.store.iter().zip(back.model.store.iter()) {
                assert_eq!(a.name, b.name);
                assert_eq!(a.trainable, b.trainable);
                let bits = |t: &crate::tensor::Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                assert_eq!(bits(&a.value), bits(&b.value));
            }
            assert_eq!(to_bytes(&back), bytes);
        }
    }

    #[test]
    fn delta_override_survives() {
        let net = build_with_delta(Arch::LeNet, 4, [3, 16, 16], DeltaMode::Fixed(2.0)).unwrap();
        let ck = Checkpoint { model: Model::<f64>::new(net, 1).unwrap(), delta: DeltaChoice::Fixed(2.0), step: 0, config: String::new() };
        let back: Checkpoint<f64> = from_bytes(&to_bytes(&ck)).unwrap();
        assert_eq!(back.model.net, ck.model.net);
        assert_eq!(back.delta, DeltaChoice::Fixed(2.0));
    }

    #[test]
    fn tampering_is_detected() {
        let bytes = to_bytes(&sample(Variant::Complex));
        let mut bad = bytes.clone();
        let last = bad.len() - 10;
        bad[last] ^= 0x40;
        assert!(from_bytes::<f32>(&bad).unwrap_err().to_string().contains("checksum"));

        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(from_bytes::<f32>(&magic).is_err());

        let mut version = bytes.clone();
        version[4] = 9;
        assert!(matches!(from_bytes::<f32>(&version), Err(Error::Version { found: 9, .. })));

        assert!(from_bytes::<f32>(&bytes[..bytes.len() - 3]).is_err());
        assert!(from_bytes::<f64>(&bytes).is_err());
    }

    #[test]
    fn missing_record_is_named() {
        let mut ck = sample(Variant::Original);
        let full = ck.model.store.clone();
        let mut partial = crate::autodiff::ParamStore::new();
        for (i, (_, p)) in full.iter().enumerate() {
            if i != 1 {
                partial.add(p.name.clone(), p.value.clone(), p.trainable).unwrap();
            }
        }
        let missing = full.iter().nth(1).unwrap().1.name.clone();
        ck.model.store = partial;
        match from_bytes::<f32>(&to_bytes(&ck)) {
            Err(Error::MissingParameter(n)) => assert_eq!(n, missing),
            other => panic!("expected a missing parameter, got {other:?}"),
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("nested/model.ckpt");
        let ck = sample(Variant::Complex);
        save_checkpoint(&ck, &p).unwrap();
        let back: Checkpoint<f32> = load_checkpoint(&p).unwrap();
        assert_eq!(to_bytes(&back), to_bytes(&ck));
        assert!(load_checkpoint::<f32>(&dir.path().join("absent")).is_err());
    }
}
