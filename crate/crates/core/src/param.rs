//! Flat parameter vectors, their layer layout, and deterministic randomness.
//!
//! Every model in the simulator is a single `ParamVector`: a contiguous
//! `f64` buffer plus a shared [`LayerLayout`] describing which slice belongs
//! to which layer and which slice forms the classification head. Merging,
//! aggregation and gradient arithmetic all operate on this flat form.

use std::io::{Read, Write};
use std::ops::Range;
use std::sync::Arc;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One named, contiguous block of parameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layer {
    pub name: String,
    pub offset: usize,
    pub length: usize,
    /// Fan-in/fan-out used by the initializer; zero when unknown.
    #[serde(default)]
    pub fan_in: usize,
    #[serde(default)]
    pub fan_out: usize,
}

/// Ordered, gap-free description of a parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerLayout {
    layers: Vec<Layer>,
    head_offset: usize,
    head_length: usize,
}

impl LayerLayout {
    /// Builds a layout from `(name, length, fan_in, fan_out)` blocks laid out
    /// back to back. The head covers the last `head_layers` blocks.
    pub fn sequential(blocks: &[(&str, usize, usize, usize)], head_layers: usize) -> Result<Self> {
        let mut layers = Vec::with_capacity(blocks.len());
        let mut offset = 0;
        for &(name, length, fan_in, fan_out) in blocks {
            layers.push(Layer {
                name: name.to_string(),
                offset,
                length,
                fan_in,
                fan_out,
            });
            offset += length;
        }
        let head_layers = head_layers.min(layers.len());
        let head_offset = layers
            .len()
            .checked_sub(head_layers)
            .and_then(|i| layers.get(i))
            .map_or(offset, |l| l.offset);
        Self::new(layers, head_offset..offset)
    }

    pub fn new(layers: Vec<Layer>, head: Range<usize>) -> Result<Self> {
        let mut expected = 0;
        for layer in &layers {
            if layer.offset != expected {
                return Err(Error::LayoutMismatch(format!(
                    "layer `{}` starts at {} but previous layers end at {}",
                    layer.name, layer.offset, expected
                )));
            }
            expected += layer.length;
        }
        if head.start > head.end || head.end > expected {
            return Err(Error::LayoutMismatch(format!(
                "head range {head:?} outside [0, {expected})"
            )));
        }
        Ok(Self {
            layers,
            head_offset: head.start,
            head_length: head.end - head.start,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Total parameter count.
    pub fn len(&self) -> usize {
        self.layers.last().map_or(0, |l| l.offset + l.length)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn head_range(&self) -> Range<usize> {
        self.head_offset..self.head_offset + self.head_length
    }

    pub fn layer(&self, name: &str) -> Option<&Layer> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let raw: LayerLayout = serde_json::from_str(s)?;
        Self::new(raw.layers, raw.head_offset..raw.head_offset + raw.head_length)
    }
}

/// A flat model parameter vector bound to a layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Arc<LayerLayout>,
}

impl ParamVector {
    pub fn zeros(layout: Arc<LayerLayout>) -> Self {
        Self {
            values: vec![0.0; layout.len()],
            layout,
        }
    }

    pub fn from_values(layout: Arc<LayerLayout>, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::LayoutMismatch(format!(
                "vector has {} entries, layout expects {}",
                values.len(),
                layout.len()
            )));
        }
        check_finite(&values)?;
        Ok(Self { values, layout })
    }

    pub fn layout(&self) -> &Arc<LayerLayout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn head(&self) -> &[f64] {
        &self.values[self.layout.head_range()]
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.layout.clone())
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        Arc::ptr_eq(&self.layout, &other.layout) || *self.layout == *other.layout
    }

    fn ensure_same_layout(&self, other: &ParamVector) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::LayoutMismatch(format!(
                "layouts differ ({} vs {} parameters)",
                self.len(),
                other.len()
            )))
        }
    }

    /// `self += alpha * x`
    pub fn add_scaled(&mut self, alpha: f64, x: &ParamVector) -> Result<()> {
        self.ensure_same_layout(x)?;
        for (y, &xv) in self.values.iter_mut().zip(&x.values) {
            *y += alpha * xv;
        }
        check_finite(&self.values)
    }

    pub fn scale(&mut self, alpha: f64) {
        for v in &mut self.values {
            *v *= alpha;
        }
    }

    /// `self - other`
    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector> {
        axpy(-1.0, other, self)
    }

    pub fn norm_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn max_abs_diff(&self, other: &ParamVector) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Writes the binary form: little-endian `u64` length, then `f64` values.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&(self.values.len() as u64).to_le_bytes())?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R, layout: Arc<LayerLayout>) -> Result<Self> {
        let mut buf = [0u8; 8];
        r.read_exact(&mut buf)?;
        let len = u64::from_le_bytes(buf) as usize;
        if len != layout.len() {
            return Err(Error::LayoutMismatch(format!(
                "stored vector has {len} entries, layout expects {}",
                layout.len()
            )));
        }
        let mut values = Vec::with_capacity(len);
        for _ in 0..len {
            r.read_exact(&mut buf)?;
            values.push(f64::from_le_bytes(buf));
        }
        Self::from_values(layout, values)
    }
}

fn check_finite(values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { index }),
        None => Ok(()),
    }
}

/// Returns `alpha * x + y`.
pub fn axpy(alpha: f64, x: &ParamVector, y: &ParamVector) -> Result<ParamVector> {
    let mut out = y.clone();
    out.add_scaled(alpha, x)?;
    Ok(out)
}

/// Inner product, optionally restricted to the head slice.
///
/// Summation runs sequentially in ascending index order so results are
/// bit-reproducible.
pub fn dot(x: &ParamVector, y: &ParamVector, restrict_to_head: bool) -> Result<f64> {
    x.ensure_same_layout(y)?;
    let (a, b) = if restrict_to_head {
        (x.head(), y.head())
    } else {
        (x.as_slice(), y.as_slice())
    };
    Ok(dot_slices(a, b))
}

pub(crate) fn dot_slices(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Correctly rounded sum of `values`, independent of their order.
///
/// Shewchuk's algorithm keeps non-overlapping partial sums; the final
/// rounding step follows the same half-way correction as Python's
/// `math.fsum`. Inputs are assumed finite.
pub fn exact_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut partials: Vec<f64> = Vec::new();
    exact_sum_with(&mut partials, values)
}

/// Like [`exact_sum`] but reuses a caller-provided scratch buffer.
pub fn exact_sum_with<I: IntoIterator<Item = f64>>(partials: &mut Vec<f64>, values: I) -> f64 {
    partials.clear();
    for mut x in values {
        let mut i = 0;
        for j in 0..partials.len() {
            let mut y = partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        partials.truncate(i);
        partials.push(x);
    }

    let mut n = partials.len();
    if n == 0 {
        return 0.0;
    }
    n -= 1;
    let mut hi = partials[n];
    let mut lo = 0.0;
    while n > 0 {
        let x = hi;
        n -= 1;
        let y = partials[n];
        hi = x + y;
        let yr = hi - x;
        lo = y - yr;
        if lo != 0.0 {
            break;
        }
    }
    if n > 0 && ((lo < 0.0 && partials[n - 1] < 0.0) || (lo > 0.0 && partials[n - 1] > 0.0)) {
        let y = lo * 2.0;
        let x = hi + y;
        let yr = x - hi;
        if y == yr {
            hi = x;
        }
    }
    hi
}

/// Deterministic random stream keyed by `(seed, stream)`.
///
/// Backed by ChaCha8 with the stream id mapped onto ChaCha's native stream
/// selector, so distinct streams never overlap.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            seed,
            stream,
            inner,
        }
    }

    /// Stream id derived from a tuple of tags (purpose, round, client, ...).
    pub fn derived(seed: u64, tags: &[u64]) -> Self {
        Self::new(seed, stream_id(tags))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(self)
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn stream_id(tags: &[u64]) -> u64 {
    tags.iter()
        .fold(0x5EED_u64, |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

/// Parameter initialization scheme.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum InitScheme {
    /// Per-layer uniform in `±sqrt(6 / (fan_in + fan_out))`.
    #[default]
    GlorotUniform,
    Normal {
        std: f64,
    },
    Zeros,
}

pub fn random_init(layout: &Arc<LayerLayout>, rng: &mut SeededRng, scheme: InitScheme) -> ParamVector {
    let mut values = Vec::with_capacity(layout.len());
    for layer in layout.layers() {
        match scheme {
            InitScheme::GlorotUniform => {
                let fans = (layer.fan_in + layer.fan_out).max(1) as f64;
                let limit = (6.0 / fans).sqrt();
                values.extend((0..layer.length).map(|_| rng.random_range(-limit..=limit)));
            }
            InitScheme::Normal { std } => {
                values.extend((0..layer.length).map(|_| std * rng.standard_normal()));
            }
            InitScheme::Zeros => values.extend(std::iter::repeat_n(0.0, layer.length)),
        }
    }
    ParamVector {
        values,
        layout: layout.clone(),
    }
}
