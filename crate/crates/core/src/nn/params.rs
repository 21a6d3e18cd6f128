use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::io_util::{read_name, read_u32, read_u64, write_name};
use crate::mask::Mask;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"LTPC";
const VERSION: u32 = 1;

/// Weight and bias of one prunable layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub name: String,
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LayerParams {
    pub fn is_conv(&self) -> bool {
        self.weight.rank() == 4
    }
}

/// Parameters of every prunable layer, in network order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    pub layers: Vec<LayerParams>,
}

impl ParamSet {
    pub fn new(layers: Vec<LayerParams>) -> Self {
        Self { layers }
    }

    pub fn get(&self, name: &str) -> Option<&LayerParams> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut LayerParams> {
        self.layers.iter_mut().find(|l| l.name == name)
    }

    pub fn weight_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len()).sum()
    }

    pub fn all_ones_mask(&self) -> Mask {
        Mask::ones(self.layers.iter().map(|l| (l.name.as_str(), l.weight.shape())))
    }

    /// Errors unless `mask` has one congruent layer per weight tensor.
    pub fn check_mask(&self, mask: &Mask) -> Result<()> {
        mask.check_congruent(&self.all_ones_mask())
    }

    pub fn check_same_shapes(&self, other: &ParamSet) -> Result<()> {
        let same = self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.name == b.name
                    && a.weight.shape() == b.weight.shape()
                    && a.bias.shape() == b.bias.shape()
            });
        if same {
            Ok(())
        } else {
            Err(Error::Shape("parameter sets differ in names or shapes".into()))
        }
    }

    /// Checkpoint layout: magic `LTPC`, version, tensor count, then per
    /// tensor its name, rank, u64 dims and raw f32 values, all little-endian.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&((self.layers.len() * 2) as u32).to_le_bytes())?;
        for l in &self.layers {
            for (suffix, t) in [("weight", &l.weight), ("bias", &l.bias)] {
                write_name(&mut w, &format!("{}.{suffix}", l.name))?;
                w.write_all(&(t.rank() as u32).to_le_bytes())?;
                for &d in t.shape() {
                    w.write_all(&(d as u64).to_le_bytes())?;
                }
                let mut raw = Vec::with_capacity(t.len() * 4);
                for v in t.data() {
                    raw.extend_from_slice(&v.to_le_bytes());
                }
                w.write_all(&raw)?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<ParamSet> {
        const WHAT: &str = "checkpoint";
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::format(WHAT, "truncated header"))?;
        if &magic != MAGIC {
            return Err(Error::format(WHAT, format!("bad magic {magic:?}")));
        }
        let version = read_u32(&mut r, WHAT)?;
        if version != VERSION {
            return Err(Error::format(WHAT, format!("unsupported version {version}")));
        }
        let count = read_u32(&mut r, WHAT)? as usize;
        if !count.is_multiple_of(2) {
            return Err(Error::format(WHAT, "tensor count must pair weights with biases"));
        }
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name = read_name(&mut r, WHAT)?;
            let rank = read_u32(&mut r, WHAT)? as usize;
            if rank > 8 {
                return Err(Error::format(WHAT, format!("rank {rank} too large")));
            }
            let shape = (0..rank)
                .map(|_| read_u64(&mut r, WHAT).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let mut raw = vec![0u8; len * 4];
            r.read_exact(&mut raw)
                .map_err(|_| Error::format(WHAT, format!("truncated data for `{name}`")))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::format(WHAT, e.to_string()))?;
            tensors.push((name, t));
        }
        let mut layers = Vec::with_capacity(count / 2);
        let mut it = tensors.into_iter();
        while let (Some((wn, weight)), Some((bn, bias))) = (it.next(), it.next()) {
            let (Some(layer), Some(layer_b)) = (wn.strip_suffix(".weight"), bn.strip_suffix(".bias"))
            else {
                return Err(Error::format(WHAT, format!("unexpected tensor pair `{wn}`, `{bn}`")));
            };
            if layer != layer_b || bias.rank() != 1 || bias.len() != weight.shape()[0] {
                return Err(Error::format(WHAT, format!("bias does not match weight `{wn}`")));
            }
            layers.push(LayerParams {
                name: layer.to_string(),
                weight,
                bias,
            });
        }
        Ok(ParamSet { layers })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ParamSet> {
        let bytes = std::fs::read(path)?;
        ParamSet::read_from(bytes.as_slice())
    }
}

/// Copy of all parameters at some point in training (`epoch_tag` 0 = init).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSnapshot {
    pub params: ParamSet,
    pub epoch_tag: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_set(values: Vec<f32>) -> ParamSet {
        let w: Vec<f32> = values.iter().take(6).copied().collect();
        ParamSet::new(vec![
            LayerParams {
                name: "conv1".into(),
                weight: Tensor::new(vec![2, 1, 1, 3], w).unwrap(),
                bias: Tensor::new(vec![2], vec![values[6], values[7]]).unwrap(),
            },
            LayerParams {
                name: "fc1".into(),
                weight: Tensor::new(vec![1, 2], vec![values[8], values[9]]).unwrap(),
                bias: Tensor::new(vec![1], vec![values[10]]).unwrap(),
            },
        ])
    }

    proptest! {
        #[test]
        fn checkpoint_round_trip_is_bit_exact(values in prop::collection::vec(any::<f32>(), 11)) {
            let set = small_set(values);
            let mut buf = Vec::new();
            set.write_to(&mut buf).unwrap();
            let back = ParamSet::read_from(buf.as_slice()).unwrap();
            for (a, b) in set.layers.iter().zip(&back.layers) {
                let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                prop_assert_eq!(bits(&a.weight), bits(&b.weight));
                prop_assert_eq!(bits(&a.bias), bits(&b.bias));
                prop_assert_eq!(&a.name, &b.name);
            }
        }
    }

    #[test]
    fn header_layout() {
        let set = small_set((0..11).map(|v| v as f32).collect());
        let mut buf = Vec::new();
        set.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"LTPC");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 4);
        // first tensor name "conv1.weight"
        assert_eq!(u32::from_le_bytes(buf[12..16].try_into().unwrap()), 12);
        assert_eq!(&buf[16..28], b"conv1.weight");
        assert_eq!(u32::from_le_bytes(buf[28..32].try_into().unwrap()), 4);
    }

    #[test]
    fn rejects_corrupt_checkpoints() {
        assert!(ParamSet::read_from(&b"LTMK"[..]).is_err());
        let set = small_set((0..11).map(|v| v as f32).collect());
        let mut buf = Vec::new();
        set.write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(ParamSet::read_from(buf.as_slice()).is_err());
    }
}
