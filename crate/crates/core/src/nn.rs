//! Small tanh multilayer perceptrons over a flat parameter vector.
//!
//! Layer `l` is stored as its `out x in` weight matrix (row-major) followed by
//! its bias vector. Keeping everything in one `Vec<f64>` lets the trust-region
//! code treat parameters, gradients and search directions as plain vectors.

use std::io::{Read, Write};

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::macdec::{Observation, Policy};
use crate::rng::SimRng;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkShape {
    pub input_dim: usize,
    pub hidden_sizes: Vec<usize>,
    pub output_dim: usize,
}

impl NetworkShape {
    pub fn new(input_dim: usize, hidden_sizes: Vec<usize>, output_dim: usize) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 || hidden_sizes.contains(&0) {
            return Err(Error::Contract("network dimensions must be >= 1".into()));
        }
        Ok(NetworkShape {
            input_dim,
            hidden_sizes,
            output_dim,
        })
    }

    /// One hidden layer of 32 units.
    pub fn single_hidden(input_dim: usize, output_dim: usize) -> Self {
        NetworkShape {
            input_dim,
            hidden_sizes: vec![32],
            output_dim,
        }
    }

    /// `(fan_in, fan_out)` of every affine layer.
    pub fn layers(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_sizes.len() + 2);
        dims.push(self.input_dim);
        dims.extend(&self.hidden_sizes);
        dims.push(self.output_dim);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn n_params(&self) -> usize {
        self.layers().iter().map(|&(i, o)| i * o + o).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    shape: NetworkShape,
    flat: Vec<f64>,
}

impl MlpParams {
    pub fn zeros(shape: NetworkShape) -> Self {
        let n = shape.n_params();
        MlpParams {
            shape,
            flat: vec![0.0; n],
        }
    }

    /// Weights uniform in `±1/sqrt(fan_in)`, zero biases.
    pub fn init(shape: NetworkShape, rng: &mut SimRng) -> Self {
        let mut p = Self::zeros(shape);
        let mut offset = 0;
        for (fan_in, fan_out) in p.shape.layers() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for w in &mut p.flat[offset..offset + fan_in * fan_out] {
                *w = rng.random_range(-bound..bound);
            }
            offset += fan_in * fan_out + fan_out;
        }
        p
    }

    pub fn from_flat(shape: NetworkShape, flat: Vec<f64>) -> Result<Self> {
        if flat.len() != shape.n_params() {
            return Err(Error::Contract(format!(
                "shape needs {} parameters, got {}",
                shape.n_params(),
                flat.len()
            )));
        }
        Ok(MlpParams { shape, flat })
    }

    pub fn shape(&self) -> &NetworkShape {
        &self.shape
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.flat
    }

    pub fn as_flat_mut(&mut self) -> &mut [f64] {
        &mut self.flat
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.flat
    }

    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    /// Weights (`out x in`, row-major) and bias of layer `l`.
    pub fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let layers = self.shape.layers();
        let offset: usize = layers[..l].iter().map(|&(i, o)| i * o + o).sum();
        let (i, o) = layers[l];
        (
            &self.flat[offset..offset + i * o],
            &self.flat[offset + i * o..offset + i * o + o],
        )
    }

    /// A copy with `scale * direction` added.
    pub fn offset(&self, direction: &[f64], scale: f64) -> Self {
        debug_assert_eq!(direction.len(), self.flat.len());
        let flat = self
            .flat
            .iter()
            .zip(direction)
            .map(|(p, d)| p + scale * d)
            .collect();
        MlpParams {
            shape: self.shape.clone(),
            flat,
        }
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.shape.input_dim {
            return Err(Error::Contract(format!(
                "network expects {} inputs, got {}",
                self.shape.input_dim,
                x.len()
            )));
        }
        Ok(())
    }

    /// Activations of every layer; the last entry holds the linear outputs.
    fn activations(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let layers = self.shape.layers();
        let mut acts = Vec::with_capacity(layers.len() + 1);
        acts.push(x.to_vec());
        let mut offset = 0;
        for (l, &(fan_in, fan_out)) in layers.iter().enumerate() {
            let w = &self.flat[offset..offset + fan_in * fan_out];
            let b = &self.flat[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
            let input = &acts[l];
            let hidden = l + 1 < layers.len();
            let out: Vec<f64> = (0..fan_out)
                .map(|o| {
                    let row = &w[o * fan_in..(o + 1) * fan_in];
                    let z = b[o] + row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>();
                    if hidden {
                        z.tanh()
                    } else {
                        z
                    }
                })
                .collect();
            acts.push(out);
            offset += fan_in * fan_out + fan_out;
        }
        acts
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.activations(x).pop().unwrap_or_default())
    }

    /// Accumulates `J(x)^T g` into `grad`.
    fn backward_into(&self, x: &[f64], g_out: &[f64], grad: &mut [f64]) {
        let layers = self.shape.layers();
        let acts = self.activations(x);
        let offsets: Vec<usize> = layers
            .iter()
            .scan(0, |acc, &(i, o)| {
                let here = *acc;
                *acc += i * o + o;
                Some(here)
            })
            .collect();
        let mut g = g_out.to_vec();
        for l in (0..layers.len()).rev() {
            let (fan_in, fan_out) = layers[l];
            let off = offsets[l];
            let input = &acts[l];
            for o in 0..fan_out {
                let go = g[o];
                if go == 0.0 {
                    continue;
                }
                let row = &mut grad[off + o * fan_in..off + (o + 1) * fan_in];
                for (r, a) in row.iter_mut().zip(input) {
                    *r += go * a;
                }
                grad[off + fan_in * fan_out + o] += go;
            }
            if l == 0 {
                break;
            }
            let w = &self.flat[off..off + fan_in * fan_out];
            let mut prev = vec![0.0; fan_in];
            for o in 0..fan_out {
                let go = g[o];
                if go == 0.0 {
                    continue;
                }
                for (p, wv) in prev.iter_mut().zip(&w[o * fan_in..(o + 1) * fan_in]) {
                    *p += go * wv;
                }
            }
            for (p, a) in prev.iter_mut().zip(input) {
                *p *= 1.0 - a * a;
            }
            g = prev;
        }
    }

    /// Directional derivative of the outputs along parameter direction `v`.
    pub fn jvp(&self, x: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        if v.len() != self.flat.len() {
            return Err(Error::Contract("tangent length mismatch".into()));
        }
        let layers = self.shape.layers();
        let acts = self.activations(x);
        let mut da = vec![0.0; self.shape.input_dim];
        let mut offset = 0;
        for (l, &(fan_in, fan_out)) in layers.iter().enumerate() {
            let w = &self.flat[offset..offset + fan_in * fan_out];
            let dw = &v[offset..offset + fan_in * fan_out];
            let db = &v[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
            let input = &acts[l];
            let hidden = l + 1 < layers.len();
            let out: Vec<f64> = (0..fan_out)
                .map(|o| {
                    let r = o * fan_in..(o + 1) * fan_in;
                    let mut dz = db[o];
                    for ((dwi, wi), (ai, dai)) in
                        dw[r.clone()].iter().zip(&w[r]).zip(input.iter().zip(&da))
                    {
                        dz += dwi * ai + wi * dai;
                    }
                    if hidden {
                        let a = acts[l + 1][o];
                        dz * (1.0 - a * a)
                    } else {
                        dz
                    }
                })
                .collect();
            da = out;
            offset += fan_in * fan_out + fan_out;
        }
        Ok(da)
    }
}

const CHUNK: usize = 256;

/// Mean over the batch of `J(x_n)^T g_n`: the exact gradient of
/// `mean_n L_n` when `g_n = dL_n / d outputs`.
///
/// Chunks are reduced in a fixed order so the result does not depend on the
/// number of worker threads.
pub fn backprop<X, G>(params: &MlpParams, inputs: &[X], output_grads: &[G]) -> Result<Vec<f64>>
where
    X: AsRef<[f64]> + Sync,
    G: AsRef<[f64]> + Sync,
{
    if inputs.len() != output_grads.len() {
        return Err(Error::Contract(format!(
            "{} inputs but {} output gradients",
            inputs.len(),
            output_grads.len()
        )));
    }
    for (x, g) in inputs.iter().zip(output_grads) {
        params.check_input(x.as_ref())?;
        if g.as_ref().len() != params.shape.output_dim {
            return Err(Error::Contract("output gradient length mismatch".into()));
        }
    }
    let n = params.len();
    let partials: Vec<Vec<f64>> = inputs
        .par_chunks(CHUNK)
        .zip(output_grads.par_chunks(CHUNK))
        .map(|(xs, gs)| {
            let mut grad = vec![0.0; n];
            for (x, g) in xs.iter().zip(gs) {
                params.backward_into(x.as_ref(), g.as_ref(), &mut grad);
            }
            grad
        })
        .collect();
    let mut total = vec![0.0; n];
    for p in partials {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    let scale = if inputs.is_empty() {
        0.0
    } else {
        1.0 / inputs.len() as f64
    };
    total.iter_mut().for_each(|t| *t *= scale);
    Ok(total)
}

/// Distribution over discrete macro-actions, stored as log-probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalDist {
    log_probs: Vec<f64>,
}

impl CategoricalDist {
    pub fn from_logits(logits: &[f64]) -> Self {
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        CategoricalDist {
            log_probs: logits.iter().map(|l| l - lse).collect(),
        }
    }

    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    pub fn log_prob(&self, action: usize) -> f64 {
        self.log_probs[action]
    }

    pub fn probs(&self) -> Vec<f64> {
        self.log_probs.iter().map(|l| l.exp()).collect()
    }

    pub fn len(&self) -> usize {
        self.log_probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_probs.is_empty()
    }

    /// Inverse-CDF draw.
    pub fn sample(&self, rng: &mut SimRng) -> usize {
        let u: f64 = rng.random();
        let mut cum = 0.0;
        for (i, lp) in self.log_probs.iter().enumerate() {
            cum += lp.exp();
            if u < cum {
                return i;
            }
        }
        // rounding left u above the total mass; fall back to the last supported action
        self.log_probs
            .iter()
            .rposition(|lp| lp.is_finite())
            .unwrap_or(0)
    }

    pub fn argmax(&self) -> usize {
        self.log_probs
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &l)| {
                if l > best.1 {
                    (i, l)
                } else {
                    best
                }
            })
            .0
    }

    /// `KL(self || other)`.
    pub fn kl(&self, other: &CategoricalDist) -> f64 {
        self.log_probs
            .iter()
            .zip(&other.log_probs)
            .map(|(p, q)| {
                let pe = p.exp();
                if pe == 0.0 {
                    0.0
                } else {
                    pe * (p - q)
                }
            })
            .sum()
    }
}

pub fn forward_policy(params: &MlpParams, obs: &Observation) -> Result<CategoricalDist> {
    Ok(CategoricalDist::from_logits(&params.forward(obs.as_slice())?))
}

pub fn forward_value(params: &MlpParams, obs: &Observation) -> Result<f64> {
    if params.shape.output_dim != 1 {
        return Err(Error::Contract("value network must have one output".into()));
    }
    Ok(params.forward(obs.as_slice())?[0])
}

/// A stochastic policy sampling from a categorical MLP head.
#[derive(Debug, Clone)]
pub struct MlpPolicy {
    pub params: MlpParams,
    pub greedy: bool,
}

impl MlpPolicy {
    pub fn new(params: MlpParams) -> Self {
        MlpPolicy {
            params,
            greedy: false,
        }
    }
}

impl Policy for MlpPolicy {
    fn act(&self, _agent: usize, observation: &Observation, rng: &mut SimRng) -> usize {
        // The episode runner only hands over observations of the environment's own
        // dimension; a mismatch is a wiring bug.
        let dist = forward_policy(&self.params, observation)
            .expect("observation dimension does not match the policy network");
        if self.greedy {
            dist.argmax()
        } else {
            dist.sample(rng)
        }
    }
}

const MAGIC: &[u8; 8] = b"EVRLCKPT";
const VERSION: u32 = 1;

/// A parameter vector with the metadata needed to rebuild and reproduce it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    pub epoch: u64,
    pub params: MlpParams,
}

impl Checkpoint {
    /// Little-endian layout: magic, version, seed, epoch, input dim, output dim,
    /// hidden layer count and sizes, parameter count, then the raw `f64`s.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let shape = self.params.shape();
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&self.epoch.to_le_bytes())?;
        w.write_all(&(shape.input_dim as u32).to_le_bytes())?;
        w.write_all(&(shape.output_dim as u32).to_le_bytes())?;
        w.write_all(&(shape.hidden_sizes.len() as u32).to_le_bytes())?;
        for &h in &shape.hidden_sizes {
            w.write_all(&(h as u32).to_le_bytes())?;
        }
        w.write_all(&(self.params.len() as u64).to_le_bytes())?;
        for v in self.params.as_flat() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        fn u32_of<R: Read>(r: &mut R) -> Result<u32> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            Ok(u32::from_le_bytes(b))
        }
        fn u64_of<R: Read>(r: &mut R) -> Result<u64> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            Ok(u64::from_le_bytes(b))
        }
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = u32_of(&mut r)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let seed = u64_of(&mut r)?;
        let epoch = u64_of(&mut r)?;
        let input_dim = u32_of(&mut r)? as usize;
        let output_dim = u32_of(&mut r)? as usize;
        let n_hidden = u32_of(&mut r)? as usize;
        if n_hidden > 64 {
            return Err(Error::Checkpoint(format!("implausible layer count {n_hidden}")));
        }
        let hidden = (0..n_hidden)
            .map(|_| u32_of(&mut r).map(|h| h as usize))
            .collect::<Result<Vec<_>>>()?;
        let shape = NetworkShape::new(input_dim, hidden, output_dim)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let n = u64_of(&mut r)? as usize;
        if n != shape.n_params() {
            return Err(Error::Checkpoint(format!(
                "header declares {n} parameters, shape needs {}",
                shape.n_params()
            )));
        }
        let mut flat = Vec::with_capacity(n);
        for _ in 0..n {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            flat.push(f64::from_le_bytes(b));
        }
        Ok(Checkpoint {
            seed,
            epoch,
            params: MlpParams::from_flat(shape, flat)?,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(file))
    }
}
