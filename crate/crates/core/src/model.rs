//! The dual-path detector.
//!
//! The local path (causal TCN, encoder 2, decoder 2) produces `O2`. Its
//! prediction is added to the input window and fed through the global path
//! (dilated TCN, encoder 1, decoder 1) to produce `Ô1`. Training minimizes
//! `λ·MSE(Ô1, X) + (1-λ)·MSE(O2, X)`; the anomaly score of a window is the
//! squared error of `Ô1` at its last position.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{
    decoder_head, encoder_layer, positional_encoding, DecoderHeadParams, EncoderLayerParams,
};
use crate::autodiff::{Tape, Var};
use crate::data::WindowedDataset;
use crate::error::{invalid, shape, Result};
use crate::params::{Bound, ParamStore};
use crate::tcn::{TcnConfig, TcnStack};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DtaadConfig {
    pub window: usize,
    pub dims: usize,
    /// Weight of the global-path loss.
    pub lambda: f64,
    pub local: TcnConfig,
    pub global: TcnConfig,
    pub encoder_layers: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub dropout: f64,
    pub leak: f64,
    pub feedback_at_inference: bool,
    /// Ablation switches: a disabled stack passes its input through unchanged.
    pub use_local_tcn: bool,
    pub use_global_tcn: bool,
}

impl DtaadConfig {
    pub fn new(window: usize, dims: usize) -> Self {
        Self {
            window,
            dims,
            lambda: 0.8,
            local: TcnConfig::local(dims),
            global: TcnConfig::global(dims, window),
            encoder_layers: 1,
            heads: dims,
            ffn_hidden: 16,
            dropout: 0.2,
            leak: 0.01,
            feedback_at_inference: true,
            use_local_tcn: true,
            use_global_tcn: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(invalid("window must be at least 1"));
        }
        if self.dims == 0 {
            return Err(invalid("series needs at least one dimension"));
        }
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            return Err(invalid(format!("lambda {} outside (0, 1)", self.lambda)));
        }
        if self.encoder_layers == 0 {
            return Err(invalid("need at least one encoder layer"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(invalid("dropout must lie in [0, 1)"));
        }
        if self.local.channels != self.dims || self.global.channels != self.dims {
            return Err(invalid("TCN channels must equal the series dimension count"));
        }
        self.local.validate(self.window)?;
        self.global.validate(self.window)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DtaadParams<T> {
    pub config: DtaadConfig,
    pub store: ParamStore<T>,
    pub global_tcn: TcnStack,
    pub local_tcn: TcnStack,
    pub encoder1: Vec<EncoderLayerParams>,
    pub encoder2: Vec<EncoderLayerParams>,
    pub decoder1: DecoderHeadParams,
    pub decoder2: DecoderHeadParams,
}

/// Uniform fan-in initialization, deterministic in `seed`.
pub fn init_params<T: Real>(cfg: &DtaadConfig, seed: u64) -> Result<DtaadParams<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let d = cfg.dims;
    let global_tcn = TcnStack::init(cfg.global.clone(), &mut store, "tcn_global", &mut rng);
    let local_tcn = TcnStack::init(cfg.local.clone(), &mut store, "tcn_local", &mut rng);
    let encoder = |name: &str, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng| {
        (0..cfg.encoder_layers)
            .map(|i| {
                EncoderLayerParams::init(
                    store,
                    &format!("{name}.{i}"),
                    d,
                    cfg.heads,
                    cfg.ffn_hidden,
                    cfg.dropout,
                    cfg.leak,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()
    };
    let encoder1 = encoder("encoder1", &mut store, &mut rng)?;
    let encoder2 = encoder("encoder2", &mut store, &mut rng)?;
    let decoder1 = DecoderHeadParams::init(&mut store, "decoder1", d, cfg.ffn_hidden, cfg.leak, &mut rng);
    let decoder2 = DecoderHeadParams::init(&mut store, "decoder2", d, cfg.ffn_hidden, cfg.leak, &mut rng);
    Ok(DtaadParams {
        config: cfg.clone(),
        store,
        global_tcn,
        local_tcn,
        encoder1,
        encoder2,
        decoder1,
        decoder2,
    })
}

impl<T: Real> DtaadParams<T> {
    pub fn cast<U: Real>(&self) -> DtaadParams<U> {
        DtaadParams {
            config: self.config.clone(),
            store: self.store.cast(),
            global_tcn: self.global_tcn.clone(),
            local_tcn: self.local_tcn.clone(),
            encoder1: self.encoder1.clone(),
            encoder2: self.encoder2.clone(),
            decoder1: self.decoder1.clone(),
            decoder2: self.decoder2.clone(),
        }
    }

    /// Rebuilds the layout for `cfg` and adopts `store`, which must contain
    /// the same parameter names and shapes in the same order.
    pub fn from_store(cfg: &DtaadConfig, store: ParamStore<T>) -> Result<Self> {
        let mut params = init_params::<T>(cfg, 0)?;
        if params.store.len() != store.len() {
            return Err(shape(format!(
                "configuration expects {} parameters, found {}",
                params.store.len(),
                store.len()
            )));
        }
        for ((name, want), (got_name, got)) in params.store.iter().zip(store.iter()) {
            if name != got_name || want.shape() != got.shape() {
                return Err(shape(format!(
                    "parameter {name} {:?} does not match stored {got_name} {:?}",
                    want.shape(),
                    got.shape()
                )));
            }
        }
        params.store = store;
        Ok(params)
    }

    fn encode<'t, R: Rng + ?Sized>(
        &self,
        path_input: Var<'t, T>,
        stack: &TcnStack,
        use_stack: bool,
        encoders: &[EncoderLayerParams],
        decoder: &DecoderHeadParams,
        p: &Bound<'t, T>,
        pe: Var<'t, T>,
        training: bool,
        rng: &mut R,
    ) -> Result<Var<'t, T>> {
        let conv = if use_stack {
            stack.forward(path_input, p, training, rng)?
        } else {
            path_input
        };
        let mut h = conv.add_suffix(pe)?;
        for enc in encoders {
            h = encoder_layer(h, enc, p, training, rng)?;
        }
        decoder_head(h, decoder, p)
    }

    /// `O2` from the local path.
    pub fn local_path<'t, R: Rng + ?Sized>(
        &self,
        x: Var<'t, T>,
        p: &Bound<'t, T>,
        pe: Var<'t, T>,
        training: bool,
        rng: &mut R,
    ) -> Result<Var<'t, T>> {
        self.encode(x, &self.local_tcn, self.config.use_local_tcn, &self.encoder2, &self.decoder2, p, pe, training, rng)
    }

    /// Global-path prediction of `x` overlaid with `feedback` (when given).
    pub fn global_path<'t, R: Rng + ?Sized>(
        &self,
        x: Var<'t, T>,
        feedback: Option<Var<'t, T>>,
        p: &Bound<'t, T>,
        pe: Var<'t, T>,
        training: bool,
        rng: &mut R,
    ) -> Result<Var<'t, T>> {
        let input = match feedback {
            Some(o2) => x.add(o2)?,
            None => x,
        };
        self.encode(input, &self.global_tcn, self.config.use_global_tcn, &self.encoder1, &self.decoder1, p, pe, training, rng)
    }

    fn check_windows(&self, windows: &Tensor<T>) -> Result<()> {
        let s = windows.shape();
        if s.len() != 3 || s[1] != self.config.window || s[2] != self.config.dims {
            return Err(invalid(format!(
                "expected windows [B, {}, {}], got {s:?}",
                self.config.window, self.config.dims
            )));
        }
        Ok(())
    }
}

/// Nodes of one training forward pass.
pub struct ForwardOutputs<'t, T> {
    /// `O2`, local-path prediction.
    pub local_prediction: Var<'t, T>,
    /// `Ô1`, global-path prediction with feedback.
    pub global_prediction: Var<'t, T>,
    /// `L1 = MSE(Ô1, X)`.
    pub global_loss: Var<'t, T>,
    /// `L2 = MSE(O2, X)`.
    pub local_loss: Var<'t, T>,
    /// `λ·L1 + (1-λ)·L2`.
    pub loss: Var<'t, T>,
}

/// Records the training forward pass of `windows: [B, K, m]` on `tape`.
/// Dropout is active when `training` is set.
pub fn forward_training<'t, T: Real, R: Rng + ?Sized>(
    params: &DtaadParams<T>,
    bound: &Bound<'t, T>,
    tape: &'t Tape<T>,
    windows: &Tensor<T>,
    training: bool,
    rng: &mut R,
) -> Result<ForwardOutputs<'t, T>> {
    params.check_windows(windows)?;
    let cfg = &params.config;
    let x = tape.constant(windows);
    let pe = tape.constant(&positional_encoding(cfg.window, cfg.dims));
    let o2 = params.local_path(x, bound, pe, training, rng)?;
    let o1_hat = params.global_path(x, Some(o2), bound, pe, training, rng)?;
    let l1 = o1_hat.mse(x)?;
    let l2 = o2.mse(x)?;
    let lambda = T::lit(cfg.lambda);
    let loss = l1.scale(lambda).add(l2.scale(T::one() - lambda))?;
    Ok(ForwardOutputs {
        local_prediction: o2,
        global_prediction: o1_hat,
        global_loss: l1,
        local_loss: l2,
        loss,
    })
}

/// Prediction `Ô1: [B, K, m]` and per-dimension scores `[B, m]` with dropout off.
pub fn forward_inference<T: Real>(params: &DtaadParams<T>, windows: &Tensor<T>) -> Result<(Tensor<T>, Vec<T>)> {
    params.check_windows(windows)?;
    let cfg = &params.config;
    let tape = Tape::new();
    let p = params.store.bind(&tape);
    // dropout is disabled, so the generator is never drawn from
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = tape.constant(windows);
    let pe = tape.constant(&positional_encoding(cfg.window, cfg.dims));
    let feedback = if cfg.feedback_at_inference {
        Some(params.local_path(x, &p, pe, false, &mut rng)?)
    } else {
        None
    };
    let prediction = params.global_path(x, feedback, &p, pe, false, &mut rng)?.value();
    let scores = last_step_scores(&prediction, windows);
    Ok((prediction, scores))
}

/// `(pred[K-1, j] - x[K-1, j])^2` for every window and dimension.
pub fn last_step_scores<T: Real>(prediction: &Tensor<T>, windows: &Tensor<T>) -> Vec<T> {
    let s = windows.shape();
    let (b, k, m) = (s[0], s[1], s[2]);
    let mut out = Vec::with_capacity(b * m);
    for i in 0..b {
        let off = (i * k + k - 1) * m;
        for j in 0..m {
            let e = prediction.data()[off + j] - windows.data()[off + j];
            out.push(e * e);
        }
    }
    out
}

/// Scores every window of `ds`, returning an `N x m` matrix. Chunks are
/// evaluated in parallel and reassembled in order.
pub fn score_dataset<T: Real>(params: &DtaadParams<T>, ds: &WindowedDataset, chunk: usize) -> Result<Array2<f64>> {
    let (n, k, m) = (ds.len(), ds.window_size, ds.dims());
    let chunk = chunk.max(1);
    let starts: Vec<usize> = (0..n).step_by(chunk).collect();
    let parts = starts
        .par_iter()
        .map(|&lo| {
            let hi = (lo + chunk).min(n);
            let idx: Vec<usize> = (lo..hi).collect();
            let data = ds.gather(&idx).into_iter().map(T::lit).collect();
            let windows = Tensor::new(vec![hi - lo, k, m], data)?;
            forward_inference(params, &windows).map(|(_, s)| s)
        })
        .collect::<Result<Vec<_>>>()?;
    let flat: Vec<f64> = parts.into_iter().flatten().map(Real::as_f64).collect();
    Array2::from_shape_vec((n, m), flat).map_err(|e| shape(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn windows(b: usize, k: usize, m: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[b, k, m], |_| rng.random::<f64>())
    }

    #[test]
    fn default_config_matches_hyperparameters() {
        let cfg = DtaadConfig::new(10, 5);
        assert_eq!(cfg.lambda, 0.8);
        assert_eq!((cfg.local.kernel_size, cfg.global.kernel_size), (3, 4));
        assert_eq!(cfg.global.num_layers, 2);
        assert_eq!(cfg.heads, 5);
        cfg.validate().unwrap();
        let mut bad = cfg.clone();
        bad.lambda = 1.0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn combined_loss_is_convex_mix() {
        let cfg = DtaadConfig::new(10, 2);
        let params = init_params::<f64>(&cfg, 3).unwrap();
        let tape = Tape::new();
        let p = params.store.bind(&tape);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = forward_training(&params, &p, &tape, &windows(4, 10, 2, 0), true, &mut rng).unwrap();
        let (l1, l2) = (out.global_loss.item(), out.local_loss.item());
        assert_eq!(out.loss.item(), 0.8 * l1 + (1.0 - 0.8) * l2);
        assert_eq!(out.global_prediction.shape(), vec![4, 10, 2]);
        assert_eq!(out.local_prediction.shape(), vec![4, 10, 2]);
    }

    #[test]
    fn inference_is_deterministic_and_nonnegative() {
        let cfg = DtaadConfig::new(10, 3);
        let params = init_params::<f32>(&cfg, 8).unwrap();
        let w = windows(6, 10, 3, 2).cast::<f32>();
        let (_, a) = forward_inference(&params, &w).unwrap();
        let (_, b) = forward_inference(&params, &w).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|&s| s >= 0.0));
    }

    #[test]
    fn perfect_reconstruction_scores_zero() {
        let w = windows(2, 10, 3, 4);
        assert!(last_step_scores(&w, &w).iter().all(|&s| s == 0.0));
    }

    #[test]
    fn same_seed_same_params() {
        let cfg = DtaadConfig::new(10, 2);
        let a = init_params::<f32>(&cfg, 5).unwrap();
        let b = init_params::<f32>(&cfg, 5).unwrap();
        assert_eq!(a.store, b.store);
        let c = init_params::<f32>(&cfg, 6).unwrap();
        assert_ne!(a.store, c.store);
    }

    #[test]
    fn weight_norm_gain_equals_norm_at_init() {
        let params = init_params::<f64>(&DtaadConfig::new(10, 3), 1).unwrap();
        for stack in [&params.local_tcn, &params.global_tcn] {
            for layer in &stack.layers {
                let v = params.store.get(layer.direction);
                let g = params.store.get(layer.gain);
                for (row, &gain) in v.data().chunks(v.numel() / g.numel()).zip(g.data()) {
                    let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                    assert!((norm - gain).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn wrong_window_shape_rejected() {
        let params = init_params::<f64>(&DtaadConfig::new(10, 2), 1).unwrap();
        assert!(forward_inference(&params, &windows(1, 9, 2, 0)).is_err());
        assert!(forward_inference(&params, &windows(1, 10, 3, 0)).is_err());
    }

    #[test]
    fn global_path_alone_stays_in_unit_interval() {
        let mut cfg = DtaadConfig::new(10, 2);
        cfg.feedback_at_inference = false;
        let mut params = init_params::<f64>(&cfg, 2).unwrap();
        let local_names: Vec<_> = params
            .store
            .ids()
            .filter(|&id| {
                let n = params.store.name(id);
                n.starts_with("decoder2") || n.starts_with("encoder2")
            })
            .collect();
        for id in local_names {
            params.store.get_mut(id).data_mut().fill(0.0);
        }
        let (pred, _) = forward_inference(&params, &windows(3, 10, 2, 9)).unwrap();
        assert!(pred.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}
