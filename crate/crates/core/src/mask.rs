//! Bit-packed pruning masks.
//!
//! A [`Mask`] holds one [`LayerMask`] per prunable layer, congruent to that
//! layer's weight tensor; bit `1` marks an unpruned weight. Biases are
//! never masked.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io_util::{read_name, read_u32, read_u64, write_name};

const MAGIC: &[u8; 4] = b"LTMK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerMask {
    name: String,
    shape: Vec<usize>,
    len: usize,
    words: Vec<u64>,
}

impl LayerMask {
    pub fn filled(name: impl Into<String>, shape: Vec<usize>, value: bool) -> Self {
        let len: usize = shape.iter().product();
        let mut words = vec![if value { u64::MAX } else { 0 }; len.div_ceil(64)];
        if value {
            clear_tail(&mut words, len);
        }
        Self {
            name: name.into(),
            shape,
            len,
            words,
        }
    }

    pub fn from_bools(name: impl Into<String>, shape: Vec<usize>, bits: &[bool]) -> Result<Self> {
        let mut m = Self::filled(name, shape, false);
        if bits.len() != m.len {
            return Err(Error::Shape(format!(
                "mask `{}` of shape {:?} needs {} bits, got {}",
                m.name,
                m.shape,
                m.len,
                bits.len()
            )));
        }
        for (i, &b) in bits.iter().enumerate() {
            if b {
                m.set(i, true);
            }
        }
        Ok(m)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        debug_assert!(i < self.len);
        (self.words[i / 64] >> (i % 64)) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, i: usize, value: bool) {
        assert!(i < self.len, "bit {i} out of range for mask of {}", self.len);
        let bit = 1u64 << (i % 64);
        if value {
            self.words[i / 64] |= bit;
        } else {
            self.words[i / 64] &= !bit;
        }
    }

    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn count_zeros(&self) -> usize {
        self.len - self.count_ones()
    }

    pub fn iter(&self) -> impl Iterator<Item = bool> + '_ {
        (0..self.len).map(move |i| self.get(i))
    }

    pub fn iter_ones(&self) -> impl Iterator<Item = usize> + '_ {
        self.words.iter().enumerate().flat_map(|(wi, &w)| {
            let mut w = w;
            std::iter::from_fn(move || {
                if w == 0 {
                    return None;
                }
                let b = w.trailing_zeros() as usize;
                w &= w - 1;
                Some(wi * 64 + b)
            })
        })
    }

    pub fn to_bools(&self) -> Vec<bool> {
        self.iter().collect()
    }

    pub fn is_congruent(&self, other: &LayerMask) -> bool {
        self.name == other.name && self.shape == other.shape
    }

    /// Combines two congruent layer masks word by word.
    pub fn zip_words(&self, other: &LayerMask, f: impl Fn(u64, u64) -> u64) -> LayerMask {
        let mut words: Vec<u64> = self
            .words
            .iter()
            .zip(&other.words)
            .map(|(&a, &b)| f(a, b))
            .collect();
        clear_tail(&mut words, self.len);
        LayerMask {
            name: self.name.clone(),
            shape: self.shape.clone(),
            len: self.len,
            words,
        }
    }

    /// Popcount of `f(a, b)` over all words.
    pub fn count_combined(&self, other: &LayerMask, f: impl Fn(u64, u64) -> u64) -> usize {
        let full = self.len / 64;
        let mut n: usize = self.words[..full]
            .iter()
            .zip(&other.words[..full])
            .map(|(&a, &b)| f(a, b).count_ones() as usize)
            .sum();
        if full < self.words.len() {
            let tail = (1u64 << (self.len % 64)) - 1;
            n += (f(self.words[full], other.words[full]) & tail).count_ones() as usize;
        }
        n
    }

    fn packed_bytes(&self) -> Vec<u8> {
        let nbytes = self.len.div_ceil(8);
        self.words
            .iter()
            .flat_map(|w| w.to_le_bytes())
            .take(nbytes)
            .collect()
    }

    fn from_packed(name: String, shape: Vec<usize>, bytes: &[u8]) -> Self {
        let mut m = Self::filled(name, shape, false);
        for (i, chunk) in bytes.chunks(8).enumerate() {
            let mut word = [0u8; 8];
            word[..chunk.len()].copy_from_slice(chunk);
            m.words[i] = u64::from_le_bytes(word);
        }
        clear_tail(&mut m.words, m.len);
        m
    }
}

fn clear_tail(words: &mut [u64], len: usize) {
    if !len.is_multiple_of(64) {
        if let Some(last) = words.last_mut() {
            *last &= (1u64 << (len % 64)) - 1;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    layers: Vec<LayerMask>,
}

impl Mask {
    pub fn new(layers: Vec<LayerMask>) -> Result<Self> {
        for (i, l) in layers.iter().enumerate() {
            if layers[..i].iter().any(|o| o.name == l.name) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate mask layer `{}`",
                    l.name
                )));
            }
        }
        Ok(Self { layers })
    }

    /// All-ones mask over the given `(name, weight shape)` pairs.
    pub fn ones<'a>(shapes: impl IntoIterator<Item = (&'a str, &'a [usize])>) -> Self {
        Self {
            layers: shapes
                .into_iter()
                .map(|(n, s)| LayerMask::filled(n, s.to_vec(), true))
                .collect(),
        }
    }

    pub fn layers(&self) -> &[LayerMask] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LayerMask] {
        &mut self.layers
    }

    pub fn layer(&self, name: &str) -> Option<&LayerMask> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn layer_mut(&mut self, name: &str) -> Option<&mut LayerMask> {
        self.layers.iter_mut().find(|l| l.name == name)
    }

    /// Total weight count D.
    pub fn len(&self) -> usize {
        self.layers.iter().map(|l| l.len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn count_ones(&self) -> usize {
        self.layers.iter().map(LayerMask::count_ones).sum()
    }

    pub fn count_zeros(&self) -> usize {
        self.len() - self.count_ones()
    }

    pub fn check_congruent(&self, other: &Mask) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::Incongruent(format!(
                "{} vs {} layers",
                self.layers.len(),
                other.layers.len()
            )));
        }
        for (a, b) in self.layers.iter().zip(&other.layers) {
            if !a.is_congruent(b) {
                return Err(Error::Incongruent(format!(
                    "layer `{}` {:?} vs `{}` {:?}",
                    a.name, a.shape, b.name, b.shape
                )));
            }
        }
        Ok(())
    }

    fn zip(&self, other: &Mask, f: impl Fn(u64, u64) -> u64 + Copy) -> Result<Mask> {
        self.check_congruent(other)?;
        Ok(Mask {
            layers: self
                .layers
                .iter()
                .zip(&other.layers)
                .map(|(a, b)| a.zip_words(b, f))
                .collect(),
        })
    }

    pub fn and(&self, other: &Mask) -> Result<Mask> {
        self.zip(other, |a, b| a & b)
    }

    pub fn or(&self, other: &Mask) -> Result<Mask> {
        self.zip(other, |a, b| a | b)
    }

    /// `true` when every unpruned bit of `self` is also unpruned in `other`.
    pub fn is_subset_of(&self, other: &Mask) -> Result<bool> {
        self.check_congruent(other)?;
        Ok(self
            .layers
            .iter()
            .zip(&other.layers)
            .all(|(a, b)| a.count_combined(b, |x, y| x & !y) == 0))
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.layers.len() as u32).to_le_bytes())?;
        for l in &self.layers {
            write_name(&mut w, &l.name)?;
            w.write_all(&(l.shape.len() as u32).to_le_bytes())?;
            for &d in &l.shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            w.write_all(&l.packed_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Mask> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::format("mask file", "truncated header"))?;
        if &magic != MAGIC {
            return Err(Error::format("mask file", format!("bad magic {magic:?}")));
        }
        let version = read_u32(&mut r, "mask file")?;
        if version != VERSION {
            return Err(Error::format("mask file", format!("unsupported version {version}")));
        }
        let count = read_u32(&mut r, "mask file")? as usize;
        let mut layers = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name = read_name(&mut r, "mask file")?;
            let rank = read_u32(&mut r, "mask file")? as usize;
            if rank > 8 {
                return Err(Error::format("mask file", format!("rank {rank} too large")));
            }
            let shape = (0..rank)
                .map(|_| read_u64(&mut r, "mask file").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let mut bytes = vec![0u8; len.div_ceil(8)];
            r.read_exact(&mut bytes)
                .map_err(|_| Error::format("mask file", format!("truncated bits for `{name}`")))?;
            layers.push(LayerMask::from_packed(name, shape, &bytes));
        }
        Mask::new(layers)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Mask> {
        let bytes = std::fs::read(path)?;
        Mask::read_from(bytes.as_slice())
    }
}

/// JSON sidecar stored next to a mask file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskMeta {
    pub method: String,
    pub rate: f64,
    pub iteration: usize,
    pub seed: u64,
    pub source: Vec<String>,
}
