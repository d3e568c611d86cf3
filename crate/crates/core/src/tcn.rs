//! Causal (local) and dilated (global) temporal convolution stacks.
//!
//! Each layer is `dropout(leaky_relu(conv1d(x, weight_norm(v, g), b)))`
//! with zeros prepended so the output keeps the input length and position
//! `t` only sees inputs at positions `<= t`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{invalid, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TcnKind {
    Local,
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TcnConfig {
    pub kind: TcnKind,
    pub kernel_size: usize,
    /// Growth factor of the dilation between layers (global stacks only).
    pub dilation_base: usize,
    pub num_layers: usize,
    pub channels: usize,
    pub dropout: f64,
    pub leak: f64,
}

impl TcnConfig {
    /// Two causal layers with kernel 3.
    pub fn local(channels: usize) -> Self {
        Self {
            kind: TcnKind::Local,
            kernel_size: 3,
            dilation_base: 1,
            num_layers: 2,
            channels,
            dropout: 0.2,
            leak: 0.01,
        }
    }

    /// Dilated stack with kernel 4 and base 2, just deep enough to cover `window`.
    pub fn global(channels: usize, window: usize) -> Self {
        let (k, b) = (4, 2);
        Self {
            kind: TcnKind::Global,
            kernel_size: k,
            dilation_base: b,
            num_layers: min_layers_dilated(window, k, b).max(1),
            channels,
            dropout: 0.2,
            leak: 0.01,
        }
    }

    pub fn validate(&self, window: usize) -> Result<()> {
        if self.kernel_size < 2 {
            return Err(invalid("TCN kernel size must be at least 2"));
        }
        if self.num_layers == 0 {
            return Err(invalid("TCN needs at least one layer"));
        }
        if self.channels == 0 {
            return Err(invalid("TCN needs at least one channel"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(invalid("TCN dropout must lie in [0, 1)"));
        }
        if self.kind == TcnKind::Global {
            if self.dilation_base < 2 {
                return Err(invalid("global TCN dilation base must be at least 2"));
            }
            let w = receptive_width(self.kernel_size, self.dilation_base, self.num_layers);
            if w < window {
                return Err(invalid(format!(
                    "global TCN receptive width {w} does not cover window {window}"
                )));
            }
        }
        Ok(())
    }

    /// Dilation of layer `i` (0-based).
    pub fn dilation(&self, i: usize) -> usize {
        match self.kind {
            TcnKind::Local => 1,
            TcnKind::Global => self.dilation_base.pow(i as u32),
        }
    }

    /// Number of input positions one output position depends on.
    pub fn receptive_width(&self) -> usize {
        match self.kind {
            TcnKind::Local => 1 + self.num_layers * (self.kernel_size - 1),
            TcnKind::Global => receptive_width(self.kernel_size, self.dilation_base, self.num_layers),
        }
    }
}

/// Fewest causal (dilation 1) layers of kernel `k` reaching back `l - 1` steps.
pub fn min_layers_causal(l: usize, k: usize) -> usize {
    assert!(k >= 2, "kernel size must be at least 2");
    l.saturating_sub(1).div_ceil(k - 1)
}

/// `1 + (k - 1)(b^n - 1)/(b - 1)`: span of `n` layers with dilations `1, b, .., b^(n-1)`.
pub fn receptive_width(k: usize, b: usize, n: usize) -> usize {
    assert!(b >= 2, "dilation base must be at least 2");
    let geometric = (b.pow(n as u32) - 1) / (b - 1);
    1 + (k - 1) * geometric
}

/// `ceil(log_b((l - 1)(b - 1)/(k - 1) + 1))`: fewest dilated layers whose
/// receptive width covers `l` positions.
pub fn min_layers_dilated(l: usize, k: usize, b: usize) -> usize {
    assert!(k >= 2 && b >= 2, "need k >= 2 and b >= 2");
    if k < b {
        log::warn!("kernel size {k} is smaller than dilation base {b}; dilated taps leave gaps");
    }
    let arg = (l.saturating_sub(1) as f64) * (b as f64 - 1.0) / (k as f64 - 1.0) + 1.0;
    let mut n = arg.log(b as f64).ceil().max(0.0) as usize;
    // guard against the float log landing one off an exact power
    while receptive_width(k, b, n) < l {
        n += 1;
    }
    while n > 0 && receptive_width(k, b, n - 1) >= l {
        n -= 1;
    }
    n
}

#[derive(Debug, Clone, PartialEq)]
pub struct TcnLayer {
    pub direction: ParamId,
    pub gain: ParamId,
    pub bias: ParamId,
    pub dilation: usize,
    pub left_pad: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TcnStack {
    pub config: TcnConfig,
    pub layers: Vec<TcnLayer>,
}

/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub(crate) fn fan_in_uniform<T: Real, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::lit(rng.random_range(-bound..bound)))
}

impl TcnStack {
    /// Registers the stack's parameters in `store`. Gains start at the
    /// per-channel norm of the direction tensor; biases start at zero.
    pub fn init<T: Real, R: Rng + ?Sized>(
        config: TcnConfig,
        store: &mut ParamStore<T>,
        prefix: &str,
        rng: &mut R,
    ) -> Self {
        let (c, k) = (config.channels, config.kernel_size);
        let layers = (0..config.num_layers)
            .map(|i| {
                let v: Tensor<T> = fan_in_uniform(&[c, c, k], c * k, rng);
                let norms: Vec<T> = v
                    .data()
                    .chunks(c * k)
                    .map(|row| row.iter().map(|&x| x * x).sum::<T>().sqrt())
                    .collect();
                let dilation = config.dilation(i);
                TcnLayer {
                    direction: store.add(format!("{prefix}.{i}.v"), v),
                    gain: store.add(format!("{prefix}.{i}.g"), Tensor::vector(&norms)),
                    bias: store.add(format!("{prefix}.{i}.bias"), Tensor::zeros(&[c])),
                    dilation,
                    left_pad: dilation * (k - 1),
                }
            })
            .collect();
        Self { config, layers }
    }

    /// Applies the stack to `x: [B, K, m]`, returning `[B, K, m]`.
    pub fn forward<'t, T: Real, R: Rng + ?Sized>(
        &self,
        x: Var<'t, T>,
        params: &Bound<'t, T>,
        training: bool,
        rng: &mut R,
    ) -> Result<Var<'t, T>> {
        let shape = x.shape();
        if shape.len() != 3 || shape[2] != self.config.channels {
            return Err(invalid(format!(
                "TCN expects [batch, window, {}] input, got {shape:?}",
                self.config.channels
            )));
        }
        let leak = T::lit(self.config.leak);
        let mut h = x.permute(&[0, 2, 1])?;
        for layer in &self.layers {
            let w = params[layer.direction].weight_norm(params[layer.gain])?;
            h = h
                .conv1d(w, params[layer.bias], layer.dilation, layer.left_pad)?
                .leaky_relu(leak)
                .dropout(self.config.dropout, training, rng)?;
        }
        h.permute(&[0, 2, 1])
    }
}

/// Forward pass of a causal stack.
pub fn local_tcn_forward<'t, T: Real, R: Rng + ?Sized>(
    stack: &TcnStack,
    window: Var<'t, T>,
    params: &Bound<'t, T>,
    training: bool,
    rng: &mut R,
) -> Result<Var<'t, T>> {
    if stack.config.kind != TcnKind::Local {
        return Err(invalid("local_tcn_forward called with a global stack"));
    }
    stack.forward(window, params, training, rng)
}

/// Forward pass of a dilated stack.
pub fn global_tcn_forward<'t, T: Real, R: Rng + ?Sized>(
    stack: &TcnStack,
    window: Var<'t, T>,
    params: &Bound<'t, T>,
    training: bool,
    rng: &mut R,
) -> Result<Var<'t, T>> {
    if stack.config.kind != TcnKind::Global {
        return Err(invalid("global_tcn_forward called with a local stack"));
    }
    stack.forward(window, params, training, rng)
}
