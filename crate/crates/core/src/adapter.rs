//! Score-correction MLP over concatenated user and item embeddings.
//!
//! `layers` counts linear layers: 1 is a plain linear map `2d -> 1`,
//! 2 is `2d -> h -> 1`, 3 is `2d -> h -> h -> 1`. ReLU follows every
//! layer except the last.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{io_err, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    /// `inputs x outputs`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend_from_slice(&self.bias);
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let row = &self.weight[i * self.outputs..(i + 1) * self.outputs];
            for (o, w) in out.iter_mut().zip(row) {
                *o += xi * w;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterParams {
    pub embed_dim: usize,
    pub hidden: usize,
    pub seed: u64,
    pub layers: Vec<Dense>,
}

/// How initial weights are drawn.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InitScale {
    /// `uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))` per layer.
    FanIn,
    /// `uniform(-s, s)` for every layer; `Fixed(0.0)` gives the zero map.
    Fixed(f64),
}

/// Exact parameter count of an adapter with the given shape.
pub fn param_count(embed_dim: usize, hidden: usize, layers: usize) -> usize {
    layer_shapes(embed_dim, hidden, layers)
        .iter()
        .map(|&(i, o)| i * o + o)
        .sum()
}

fn layer_shapes(embed_dim: usize, hidden: usize, layers: usize) -> Vec<(usize, usize)> {
    let mut shapes = Vec::with_capacity(layers);
    let mut inputs = 2 * embed_dim;
    for l in 0..layers {
        let outputs = if l + 1 == layers { 1 } else { hidden };
        shapes.push((inputs, outputs));
        inputs = outputs;
    }
    shapes
}

/// Seeded initialization; biases start at zero.
pub fn init_adapter(embed_dim: usize, hidden: usize, layers: usize, seed: u64, scale: InitScale) -> Result<AdapterParams> {
    if embed_dim == 0 || hidden == 0 || !(1..=3).contains(&layers) {
        return Err(Error::InvalidArgument(format!(
            "adapter needs d >= 1, h >= 1 and 1..=3 layers (got d={embed_dim}, h={hidden}, layers={layers})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = layer_shapes(embed_dim, hidden, layers)
        .into_iter()
        .map(|(i, o)| {
            let mut dense = Dense::zeros(i, o);
            let s = match scale {
                InitScale::FanIn => 1.0 / (i as f64).sqrt(),
                InitScale::Fixed(s) => s,
            };
            if s > 0.0 {
                for w in &mut dense.weight {
                    *w = rng.gen_range(-s..s);
                }
            }
            dense
        })
        .collect();
    Ok(AdapterParams {
        embed_dim,
        hidden,
        seed,
        layers,
    })
}

/// Activations kept for the backward pass of one user's candidates.
#[derive(Clone, Debug)]
pub struct AdapterCache {
    /// `inputs[c][l]` is the input of layer `l` for candidate `c`.
    inputs: Vec<Vec<Vec<f64>>>,
}

impl AdapterParams {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Dense::num_params).sum()
    }

    /// Weights then bias, layer by layer.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(&l.weight);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params(), "flat parameter length");
        let mut at = 0;
        for l in &mut self.layers {
            let nw = l.weight.len();
            l.weight.copy_from_slice(&flat[at..at + nw]);
            at += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[at..at + nb]);
            at += nb;
        }
    }

    fn run(&self, user: &[f64], item: &[f64], keep: Option<&mut Vec<Vec<f64>>>) -> f64 {
        let mut x = Vec::with_capacity(2 * self.embed_dim);
        x.extend_from_slice(user);
        x.extend_from_slice(item);
        let mut out = Vec::new();
        let mut kept = Vec::new();
        let last = self.layers.len() - 1;
        for (li, layer) in self.layers.iter().enumerate() {
            layer.apply(&x, &mut out);
            if li != last {
                for o in out.iter_mut() {
                    *o = o.max(0.0);
                }
            }
            kept.push(std::mem::replace(&mut x, out.clone()));
        }
        if let Some(k) = keep {
            *k = kept;
        }
        x[0]
    }

    /// Smallest |pre-activation| of any hidden unit over `items`. Central
    /// differences are only meaningful when this exceeds the step size.
    pub fn kink_margin(&self, user: &[f64], items: &[&[f64]]) -> f64 {
        let mut margin = f64::INFINITY;
        let last = self.layers.len() - 1;
        let mut out = Vec::new();
        for item in items {
            let mut x: Vec<f64> = user.iter().chain(item.iter()).copied().collect();
            for layer in &self.layers[..last] {
                layer.apply(&x, &mut out);
                margin = out.iter().fold(margin, |m, o| m.min(o.abs()));
                x = out.iter().map(|o| o.max(0.0)).collect();
            }
        }
        margin
    }

    /// Corrections `Δ` for one user over `items` (item embeddings).
    pub fn forward(&self, user: &[f64], items: &[&[f64]]) -> Vec<f64> {
        items.iter().map(|item| self.run(user, item, None)).collect()
    }

    pub fn forward_cached(&self, user: &[f64], items: &[&[f64]]) -> (Vec<f64>, AdapterCache) {
        let mut inputs = Vec::with_capacity(items.len());
        let out = items
            .iter()
            .map(|item| {
                let mut kept = Vec::new();
                let y = self.run(user, item, Some(&mut kept));
                inputs.push(kept);
                y
            })
            .collect();
        (out, AdapterCache { inputs })
    }

    /// Adds `sum_c grad_out[c] * dΔ_c/dθ` into `grad` (flattened layout).
    pub fn backward(&self, cache: &AdapterCache, grad_out: &[f64], grad: &mut [f64]) {
        assert_eq!(grad.len(), self.num_params());
        assert_eq!(grad_out.len(), cache.inputs.len());
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut at = 0;
        for l in &self.layers {
            offsets.push(at);
            at += l.num_params();
        }
        for (inputs, &g0) in cache.inputs.iter().zip(grad_out) {
            if g0 == 0.0 {
                continue;
            }
            let mut upstream = vec![g0];
            for li in (0..self.layers.len()).rev() {
                let layer = &self.layers[li];
                let x = &inputs[li];
                let off = offsets[li];
                // ReLU gate: layer li's output feeds layer li+1 as its input
                if li + 1 < self.layers.len() {
                    let post = &inputs[li + 1];
                    for (u, &a) in upstream.iter_mut().zip(post) {
                        if a <= 0.0 {
                            *u = 0.0;
                        }
                    }
                }
                let (gw, gb) = grad[off..off + layer.num_params()].split_at_mut(layer.weight.len());
                for (b, &u) in gb.iter_mut().zip(&upstream) {
                    *b += u;
                }
                let mut down = vec![0.0; layer.inputs];
                for (i, &xi) in x.iter().enumerate() {
                    let row = i * layer.outputs;
                    let mut acc = 0.0;
                    for (o, &u) in upstream.iter().enumerate() {
                        gw[row + o] += xi * u;
                        acc += layer.weight[row + o] * u;
                    }
                    down[i] = acc;
                }
                upstream = down;
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(ADAPTER_MAGIC);
        for v in [self.embed_dim, self.hidden, self.layers.len()] {
            buf.extend_from_slice(&(v as u64).to_le_bytes());
        }
        buf.extend_from_slice(&self.seed.to_le_bytes());
        for l in &self.layers {
            buf.extend_from_slice(&(l.inputs as u64).to_le_bytes());
            buf.extend_from_slice(&(l.outputs as u64).to_le_bytes());
            for x in l.weight.iter().chain(&l.bias) {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path).map_err(io_err(path))?;
        f.write_all(&buf).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(io_err(path))?;
        let mut r = ByteReader::new(&bytes);
        if r.take(4)? != ADAPTER_MAGIC {
            return Err(Error::Checkpoint("not an adapter checkpoint".into()));
        }
        let embed_dim = r.u64()? as usize;
        let hidden = r.u64()? as usize;
        let n_layers = r.u64()? as usize;
        let seed = r.u64()?;
        let expected = layer_shapes(embed_dim, hidden, n_layers);
        let mut layers = Vec::with_capacity(n_layers);
        for (i, o) in expected {
            let (fi, fo) = (r.u64()? as usize, r.u64()? as usize);
            if (fi, fo) != (i, o) {
                return Err(Error::Checkpoint(format!("layer shape {fi}x{fo}, expected {i}x{o}")));
            }
            let weight = r.f64s(i * o)?;
            let bias = r.f64s(o)?;
            layers.push(Dense {
                inputs: i,
                outputs: o,
                weight,
                bias,
            });
        }
        r.finish()?;
        Ok(AdapterParams {
            embed_dim,
            hidden,
            seed,
            layers,
        })
    }
}

const ADAPTER_MAGIC: &[u8; 4] = b"FADP";

/// `ỹ = ŷ + Δ`.
pub fn adjust_scores(base: &[f64], delta: &[f64]) -> Result<Vec<f64>> {
    if base.len() != delta.len() {
        return Err(Error::Shape(format!(
            "{} base scores but {} corrections",
            base.len(),
            delta.len()
        )));
    }
    Ok(base.iter().zip(delta).map(|(b, d)| b + d).collect())
}

pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        ByteReader { bytes, at: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.at != self.bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(())
    }
}
