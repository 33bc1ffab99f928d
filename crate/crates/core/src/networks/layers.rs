use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::diffnum::{Array, Result, Scalar, Tape, Var};

/// Ordered, named parameter arrays of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<F> {
    names: Vec<String>,
    values: Vec<Array<F>>,
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }
}

impl<F: Scalar> ParamStore<F> {
    pub fn push(&mut self, name: impl Into<String>, value: Array<F>) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Array<F>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Array<F>] {
        &mut self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array<F>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn get(&self, name: &str) -> Option<&Array<F>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.values[i])
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.values.iter().map(Array::len).sum()
    }

    /// Records every parameter on `tape`; `trainable` selects leaves
    /// (gradients wanted) or constants (frozen).
    pub fn bind<'t>(&self, tape: &'t Tape<F>, trainable: bool) -> Vec<Var<'t, F>> {
        self.values
            .iter()
            .map(|v| {
                if trainable {
                    tape.leaf(v.clone())
                } else {
                    tape.constant(v.clone())
                }
            })
            .collect()
    }
}

/// Registers freshly initialized parameters.
pub(crate) struct Init<'a, F> {
    pub store: &'a mut ParamStore<F>,
    pub rng: &'a mut ChaCha8Rng,
}

impl<F: Scalar> Init<'_, F> {
    fn uniform(&mut self, shape: &[usize], bound: f64) -> Array<F> {
        let rng = &mut *self.rng;
        Array::from_fn(shape, |_| F::from_f64(rng.random_range(-bound..=bound)))
    }

    pub fn conv(
        &mut self,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        zero: bool,
    ) -> Conv {
        let bound = 1.0 / ((c_in * k * k) as f64).sqrt();
        let (w, b) = if zero {
            (Array::zeros(&[c_out, c_in, k, k]), Array::zeros(&[c_out]))
        } else {
            (
                self.uniform(&[c_out, c_in, k, k], bound),
                self.uniform(&[c_out], bound),
            )
        };
        Conv {
            w: self.store.push(format!("{name}.weight"), w),
            b: self.store.push(format!("{name}.bias"), b),
            stride,
            pad: k / 2,
        }
    }

    pub fn linear(&mut self, name: &str, d_in: usize, d_out: usize, zero: bool) -> Linear {
        let bound = 1.0 / (d_in as f64).sqrt();
        let (w, b) = if zero {
            (Array::zeros(&[d_in, d_out]), Array::zeros(&[d_out]))
        } else {
            (
                self.uniform(&[d_in, d_out], bound),
                self.uniform(&[d_out], bound),
            )
        };
        Linear {
            w: self.store.push(format!("{name}.weight"), w),
            b: self.store.push(format!("{name}.bias"), b),
        }
    }

    pub fn norm(&mut self, name: &str, channels: usize, groups: usize) -> Norm {
        Norm {
            gamma: self
                .store
                .push(format!("{name}.gamma"), Array::ones(&[channels])),
            beta: self
                .store
                .push(format!("{name}.beta"), Array::zeros(&[channels])),
            groups,
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Conv {
    w: usize,
    b: usize,
    stride: usize,
    pad: usize,
}

impl Conv {
    pub fn forward<'t, F: Scalar>(&self, p: &[Var<'t, F>], x: Var<'t, F>) -> Result<Var<'t, F>> {
        x.conv2d(p[self.w], Some(p[self.b]), self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Linear {
    w: usize,
    b: usize,
}

impl Linear {
    pub fn forward<'t, F: Scalar>(&self, p: &[Var<'t, F>], x: Var<'t, F>) -> Result<Var<'t, F>> {
        x.matmul(p[self.w])?.add_bias(p[self.b])
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Norm {
    gamma: usize,
    beta: usize,
    groups: usize,
}

impl Norm {
    pub fn forward<'t, F: Scalar>(&self, p: &[Var<'t, F>], x: Var<'t, F>) -> Result<Var<'t, F>> {
        x.group_norm(self.groups, p[self.gamma], p[self.beta])
    }
}

/// Sinusoidal features of integer timesteps, `[t.len(), dim]`.
pub fn sinusoidal_features<F: Scalar>(t: &[usize], dim: usize) -> Array<F> {
    let half = dim / 2;
    Array::from_fn(&[t.len(), dim], |i| {
        let (row, col) = (i / dim, i % dim);
        let k = col % half.max(1);
        let freq = (-(10000f64).ln() * k as f64 / half.max(1) as f64).exp();
        let arg = t[row] as f64 * freq;
        F::from_f64(if col < half { arg.sin() } else { arg.cos() })
    })
}

/// Sinusoidal features followed by a two-layer projection.
#[derive(Debug, Clone)]
pub(crate) struct TimeEmbedding {
    dim: usize,
    l1: Linear,
    l2: Linear,
}

impl TimeEmbedding {
    pub fn new<F: Scalar>(init: &mut Init<'_, F>, dim: usize, out: usize) -> Self {
        Self {
            dim,
            l1: init.linear("time.l1", dim, out, false),
            l2: init.linear("time.l2", out, out, false),
        }
    }

    pub fn forward<'t, F: Scalar>(
        &self,
        p: &[Var<'t, F>],
        tape: &'t Tape<F>,
        t: &[usize],
    ) -> Result<Var<'t, F>> {
        let feats = tape.constant(sinusoidal_features(t, self.dim));
        self.l2.forward(p, self.l1.forward(p, feats)?.silu()?)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct ResBlock {
    n1: Norm,
    c1: Conv,
    temb: Linear,
    n2: Norm,
    c2: Conv,
    skip: Option<Conv>,
}

impl ResBlock {
    pub fn new<F: Scalar>(
        init: &mut Init<'_, F>,
        name: &str,
        c_in: usize,
        c_out: usize,
        tdim: usize,
        groups: usize,
    ) -> Self {
        Self {
            n1: init.norm(&format!("{name}.norm1"), c_in, groups),
            c1: init.conv(&format!("{name}.conv1"), c_in, c_out, 3, 1, false),
            temb: init.linear(&format!("{name}.temb"), tdim, c_out, false),
            n2: init.norm(&format!("{name}.norm2"), c_out, groups),
            c2: init.conv(&format!("{name}.conv2"), c_out, c_out, 3, 1, false),
            skip: (c_in != c_out)
                .then(|| init.conv(&format!("{name}.skip"), c_in, c_out, 1, 1, false)),
        }
    }

    /// `temb` is the already-activated time embedding.
    pub fn forward<'t, F: Scalar>(
        &self,
        p: &[Var<'t, F>],
        x: Var<'t, F>,
        temb: Var<'t, F>,
    ) -> Result<Var<'t, F>> {
        let h = self.c1.forward(p, self.n1.forward(p, x)?.silu()?)?;
        let h = h.add_per_item_channel(self.temb.forward(p, temb)?)?;
        let h = self.c2.forward(p, self.n2.forward(p, h)?.silu()?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(p, x)?,
            None => x,
        };
        h.add(skip)
    }
}

/// Single-head self-attention over spatial positions.
#[derive(Debug, Clone)]
pub(crate) struct AttnBlock {
    norm: Norm,
    qkv: Conv,
    proj: Conv,
    channels: usize,
}

impl AttnBlock {
    pub fn new<F: Scalar>(
        init: &mut Init<'_, F>,
        name: &str,
        channels: usize,
        groups: usize,
    ) -> Self {
        Self {
            norm: init.norm(&format!("{name}.norm"), channels, groups),
            qkv: init.conv(&format!("{name}.qkv"), channels, 3 * channels, 1, 1, false),
            proj: init.conv(&format!("{name}.proj"), channels, channels, 1, 1, true),
            channels,
        }
    }

    pub fn forward<'t, F: Scalar>(&self, p: &[Var<'t, F>], x: Var<'t, F>) -> Result<Var<'t, F>> {
        let shape = x.shape();
        let (n, c, hw) = (shape[0], self.channels, shape[2] * shape[3]);
        let qkv = self.qkv.forward(p, self.norm.forward(p, x)?)?;
        let q = qkv.slice_channels(0, c)?.reshape(&[n, c, hw])?;
        let k = qkv.slice_channels(c, c)?.reshape(&[n, c, hw])?;
        let v = qkv.slice_channels(2 * c, c)?.reshape(&[n, c, hw])?;
        let weights = q
            .batch_matmul(k, true, false)?
            .scale(F::from_f64(1.0 / (c as f64).sqrt()))?
            .softmax()?;
        let out = v.batch_matmul(weights, false, true)?.reshape(&shape)?;
        x.add(self.proj.forward(p, out)?)
    }
}
