use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::network::{DualLabelNetwork, Standardizer};
use super::train::EpochLoss;
use super::NetworkConfig;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"DRVN";
const VERSION: u32 = 1;

/// A trained network with its loss history and training seed.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub network: DualLabelNetwork,
    pub history: Vec<EpochLoss>,
    pub seed: u64,
}

type Tensor = (Vec<usize>, Vec<f64>);

fn vector(v: &[f64]) -> Tensor {
    (vec![v.len()], v.to_vec())
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::invalid("value exceeds u32 in checkpoint"))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::format("truncated checkpoint"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format("checkpoint string is not UTF-8"))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::format("tensor too large"))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

impl Checkpoint {
    fn tensors(&self) -> Vec<(String, Tensor)> {
        let net = &self.network;
        let mut out: Vec<(String, Tensor)> = net
            .param_slices()
            .into_iter()
            .map(|(name, s)| (name, vector(s)))
            .collect();
        for (i, layer) in net.layers.iter().enumerate() {
            out.push((format!("layer{i}.bn.running_mean"), vector(&layer.bn.running_mean)));
            out.push((format!("layer{i}.bn.running_var"), vector(&layer.bn.running_var)));
            out.push((format!("layer{i}.bn.updates"), vector(&[layer.bn.updates as f64])));
        }
        let mut norm = |name: &str, s: &Standardizer| {
            out.push((format!("{name}.mean"), vector(&s.mean)));
            out.push((format!("{name}.std"), vector(&s.std)));
        };
        norm("norm.input", &net.input_norm);
        norm("norm.target1", &net.target1_norm);
        if let Some(s) = &net.target2_norm {
            norm("norm.target2", s);
        }
        let mut hist = Vec::with_capacity(self.history.len() * 3);
        for h in &self.history {
            hist.extend([h.epoch as f64, h.train_loss, h.val_loss.unwrap_or(f64::NAN)]);
        }
        out.push(("history".into(), (vec![self.history.len(), 3], hist)));
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        let cfg = self.network.config.to_text();
        put_u32(&mut out, cfg.len())?;
        out.extend_from_slice(cfg.as_bytes());
        let tensors = self.tensors();
        put_u32(&mut out, tensors.len())?;
        for (name, (dims, data)) in tensors {
            put_u32(&mut out, name.len())?;
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, dims.len())?;
            for d in dims {
                put_u32(&mut out, d)?;
            }
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::format("not a network checkpoint"));
        }
        let version = r.u32()?;
        if version != VERSION as usize {
            return Err(Error::format(format!("unsupported checkpoint version {version}")));
        }
        let seed = r.u64()?;
        let config = NetworkConfig::from_text(&r.string()?)?;
        let count = r.u32()?;
        let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
        for _ in 0..count {
            let name = r.string()?;
            let ndim = r.u32()?;
            let dims = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let data = r.f64s(n.ok_or_else(|| Error::format("tensor too large"))?)?;
            tensors.insert(name, (dims, data));
        }
        if r.pos != buf.len() {
            return Err(Error::format("trailing bytes after checkpoint"));
        }

        let mut take = |name: &str, len: Option<usize>| -> Result<Vec<f64>> {
            let (_, data) = tensors
                .remove(name)
                .ok_or_else(|| Error::format(format!("checkpoint lacks tensor {name}")))?;
            if let Some(len) = len {
                if data.len() != len {
                    return Err(Error::format(format!(
                        "tensor {name} has {} values, expected {len}",
                        data.len()
                    )));
                }
            }
            Ok(data)
        };

        let mut network = DualLabelNetwork::new(config, &mut ChaCha8Rng::seed_from_u64(0))?;
        let shapes: Vec<(String, usize)> = network
            .param_slices()
            .into_iter()
            .map(|(n, s)| (n, s.len()))
            .collect();
        for ((name, len), slot) in shapes.into_iter().zip(network.param_slices_mut()) {
            slot.copy_from_slice(&take(&name, Some(len))?);
        }
        for (i, layer) in network.layers.iter_mut().enumerate() {
            let d = layer.bn.gamma.len();
            layer.bn.running_mean = take(&format!("layer{i}.bn.running_mean"), Some(d))?;
            layer.bn.running_var = take(&format!("layer{i}.bn.running_var"), Some(d))?;
            layer.bn.updates = take(&format!("layer{i}.bn.updates"), Some(1))?[0] as u64;
        }
        let mut norm = |name: &str, dim: usize| -> Result<Standardizer> {
            Ok(Standardizer {
                mean: take(&format!("{name}.mean"), Some(dim))?,
                std: take(&format!("{name}.std"), Some(dim))?,
            })
        };
        network.input_norm = norm("norm.input", network.config.input_dim)?;
        network.target1_norm = norm("norm.target1", 31)?;
        network.target2_norm = match network.config.secondary.kind() {
            Some(k) => Some(norm("norm.target2", k.dim())?),
            None => None,
        };
        let hist = take("history", None)?;
        if hist.len() % 3 != 0 {
            return Err(Error::format("malformed loss history"));
        }
        let history = hist
            .chunks_exact(3)
            .map(|c| EpochLoss {
                epoch: c[0] as usize,
                train_loss: c[1],
                val_loss: if c[2].is_nan() { None } else { Some(c[2]) },
            })
            .collect();
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::format(format!("unexpected tensor {extra} in checkpoint")));
        }
        Ok(Checkpoint { network, history, seed })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        Checkpoint::from_bytes(&fs::read(path)?)
    }

    /// Loss history as CSV with columns `epoch,train_loss,val_loss`.
    pub fn write_history_csv(&self, out: &mut impl Write) -> Result<()> {
        writeln!(out, "epoch,train_loss,val_loss")?;
        for h in &self.history {
            let val = h.val_loss.map_or(String::new(), |v| format!("{v}"));
            writeln!(out, "{},{},{}", h.epoch, h.train_loss, val)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::SecondaryTarget;
    use rand::Rng;

    fn sample(secondary: SecondaryTarget) -> Checkpoint {
        let mut cfg = NetworkConfig::tiny(secondary);
        cfg.cells = 3;
        if secondary == SecondaryTarget::Spec100 {
            cfg.secondary_hidden_dims = vec![5];
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut network = DualLabelNetwork::new(cfg, &mut rng).unwrap();
        for layer in &mut network.layers {
            layer.bn.running_mean.iter_mut().for_each(|v| *v = rng.gen());
            layer.bn.updates = 7;
        }
        network.input_norm.mean[3] = 2.5;
        Checkpoint {
            network,
            history: vec![
                EpochLoss { epoch: 0, train_loss: 1.5, val_loss: Some(1.6) },
                EpochLoss { epoch: 1, train_loss: 1.2, val_loss: None },
            ],
            seed: 99,
        }
    }

    #[test]
    fn round_trip_all_variants() {
        for s in [SecondaryTarget::None, SecondaryTarget::Pitch1, SecondaryTarget::Spec100, SecondaryTarget::Mfb31] {
            let ck = sample(s);
            let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
            assert_eq!(back, ck, "{s}");
        }
    }

    #[test]
    fn file_round_trip_and_csv() {
        let ck = sample(SecondaryTarget::Pitch1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.bin");
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
        let mut csv = Vec::new();
        ck.write_history_csv(&mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap(), "epoch,train_loss,val_loss\n0,1.5,1.6\n1,1.2,\n");
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample(SecondaryTarget::None).to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
    }
}
