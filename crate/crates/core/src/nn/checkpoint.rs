// Checkpoint layout:
//   u64 LE  header length in bytes
//   header  UTF-8 text, one item per line:
//             kdml-network 1
//             role <teacher|student>
//             tag <capacity tag>
//             input <d0> [d1 ...]
//             <layer spec>...
//   f64 LE  parameters, layer by layer, weight then bias

use std::fs;
use std::path::Path;

use super::{Architecture, LayerSpec, Network, NnError, Role};
use crate::autodiff::Tensor;

const MAGIC: &str = "kdml-network 1";

impl Network {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = format!("{MAGIC}\nrole {}\ntag {}\ninput", self.role, self.capacity_tag);
        for d in &self.arch.input {
            header.push_str(&format!(" {d}"));
        }
        header.push('\n');
        for layer in &self.arch.layers {
            header.push_str(&format!("{layer}\n"));
        }
        let mut out = Vec::with_capacity(8 + header.len() + 8 * self.param_count());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for p in &self.params {
            for v in p.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NnError> {
        let fmt = |m: &str| NnError::Format(m.to_string());
        let len_bytes: [u8; 8] = bytes.get(..8).ok_or_else(|| fmt("truncated length prefix"))?.try_into().unwrap();
        let header_len = usize::try_from(u64::from_le_bytes(len_bytes)).map_err(|_| fmt("header too long"))?;
        let header = bytes.get(8..8 + header_len).ok_or_else(|| fmt("truncated header"))?;
        let header = std::str::from_utf8(header).map_err(|_| fmt("header is not UTF-8"))?;

        let mut lines = header.lines();
        if lines.next() != Some(MAGIC) {
            return Err(fmt("missing kdml-network magic line"));
        }
        let role: Role = lines
            .next()
            .and_then(|l| l.strip_prefix("role "))
            .ok_or_else(|| fmt("missing role line"))?
            .parse()?;
        let tag = lines
            .next()
            .and_then(|l| l.strip_prefix("tag "))
            .ok_or_else(|| fmt("missing tag line"))?
            .to_string();
        let input = lines
            .next()
            .and_then(|l| l.strip_prefix("input"))
            .ok_or_else(|| fmt("missing input line"))?
            .split_whitespace()
            .map(|d| d.parse::<usize>().map_err(|_| fmt("bad input dimension")))
            .collect::<Result<Vec<_>, _>>()?;
        let layers = lines.map(str::parse).collect::<Result<Vec<LayerSpec>, _>>()?;
        let arch = Architecture::new(input, layers)?;

        let mut net = Network::init(arch, role, tag, 0);
        let body = &bytes[8 + header_len..];
        if body.len() != 8 * net.param_count() {
            return Err(NnError::Format(format!(
                "expected {} parameter bytes, found {}",
                8 * net.param_count(),
                body.len()
            )));
        }
        let mut values = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        for p in net.params_mut() {
            let shape = p.tensor.shape().to_vec();
            let data: Vec<f64> = values.by_ref().take(shape.iter().product()).collect();
            p.tensor = Tensor::new(shape, data)?.with_requires_grad(true);
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NnError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_logits() {
        let arch = Architecture::new(
            vec![1, 5, 5],
            vec![
                LayerSpec::Conv2d { in_channels: 1, out_channels: 2, kernel: 2 },
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::Dense { inputs: 32, outputs: 3 },
            ],
        )
        .unwrap();
        let net = Network::init(arch, Role::Teacher, "V1", 17);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("teacher.ckpt");
        net.save(&path).unwrap();
        let back = Network::load(&path).unwrap();
        assert_eq!(back, net);
        let probe = Tensor::new(vec![2, 1, 5, 5], (0..50).map(|i| (i as f64).cos()).collect()).unwrap();
        assert_eq!(back.logits(&probe).unwrap(), net.logits(&probe).unwrap());
    }

    #[test]
    fn header_is_length_prefixed_text() {
        let net = Network::init(Architecture::mlp(2, &[3], 2).unwrap(), Role::Student, "V2", 1);
        let bytes = net.to_bytes();
        let len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&bytes[8..8 + len]).unwrap();
        assert_eq!(header, "kdml-network 1\nrole student\ntag V2\ninput 2\ndense 2 3\nrelu\ndense 3 2\n");
        assert_eq!(bytes.len(), 8 + len + 8 * net.param_count());
        let first = f64::from_le_bytes(bytes[8 + len..16 + len].try_into().unwrap());
        assert_eq!(first, net.params()[0].tensor.data()[0]);
    }

    #[test]
    fn corrupt_and_missing_files() {
        let net = Network::init(Architecture::mlp(2, &[3], 2).unwrap(), Role::Student, "V2", 1);
        let bytes = net.to_bytes();
        assert!(matches!(Network::from_bytes(&bytes[..bytes.len() - 8]), Err(NnError::Format(_))));
        assert!(matches!(Network::from_bytes(&bytes[..4]), Err(NnError::Format(_))));
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(Network::load(&dir.path().join("absent.ckpt")), Err(NnError::Io(_))));
    }
}
