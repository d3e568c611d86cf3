//! AdamW training loop with a step schedule, early stopping and optional
//! first-order meta-learning rounds.

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::WindowedDataset;
use crate::error::{invalid, DtaadError, Result};
use crate::model::{forward_training, init_params, DtaadConfig, DtaadParams};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MamlConfig {
    pub enabled: bool,
    /// Inner step size α.
    pub inner_lr: f64,
    /// Meta step size β.
    pub meta_lr: f64,
    pub tasks: usize,
}

impl Default for MamlConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            inner_lr: 0.01,
            meta_lr: 0.01,
            tasks: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerConfig {
    pub lr: f64,
    pub step_size: usize,
    pub decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Fraction of windows, taken from the end, held out for early stopping.
    pub validation_fraction: f64,
    pub maml: MamlConfig,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            step_size: 5,
            decay: 0.5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            batch_size: 128,
            max_epochs: 5,
            patience: 1,
            validation_fraction: 0.1,
            maml: MamlConfig::default(),
            seed: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(invalid(format!("decay {} outside (0, 1]", self.decay)));
        }
        if self.step_size == 0 || self.batch_size == 0 {
            return Err(invalid("step size and batch size must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(invalid("AdamW betas must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(invalid("validation fraction must lie in [0, 1)"));
        }
        if self.maml.enabled {
            if !(self.maml.inner_lr > 0.0 && self.maml.meta_lr > 0.0) {
                return Err(invalid("meta-learning step sizes must be positive"));
            }
            if self.maml.tasks == 0 {
                return Err(invalid("meta-learning needs at least one task batch"));
            }
        }
        Ok(())
    }
}

/// `lr · decay^⌊epoch / step⌋`.
pub fn lr_at_epoch(cfg: &TrainerConfig, epoch: usize) -> f64 {
    let steps = (epoch / cfg.step_size.max(1)) as i32;
    cfg.lr * cfg.decay.powi(steps)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros: Vec<Vec<T>> = store.iter().map(|(_, t)| vec![T::zero(); t.numel()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One decoupled-weight-decay Adam update using the gradients held by `store`.
pub fn adamw_step<T: Real>(
    store: &mut ParamStore<T>,
    state: &mut OptimizerState<T>,
    lr: f64,
    cfg: &TrainerConfig,
) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(DtaadError::State("optimizer state does not match parameters".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let c1 = T::one() - T::lit(cfg.beta1.powi(t));
    let c2 = T::one() - T::lit(cfg.beta2.powi(t));
    let (lr_t, decay, eps) = (T::lit(lr), T::lit(lr * cfg.weight_decay), T::lit(cfg.eps));
    for (i, (tensor, (m, v))) in store
        .tensors_mut()
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
        .enumerate()
    {
        let grad = tensor
            .grad()
            .ok_or_else(|| DtaadError::State(format!("parameter {i} has no gradient")))?
            .to_vec();
        if m.len() != grad.len() {
            return Err(DtaadError::State(format!("moment buffer {i} has the wrong size")));
        }
        for (((w, g), mi), vi) in tensor.data_mut().iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (T::one() - b1) * g;
            *vi = b2 * *vi + (T::one() - b2) * g * g;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *w = *w - lr_t * m_hat / (v_hat.sqrt() + eps) - decay * *w;
        }
    }
    Ok(())
}

/// First-order meta-learning round. For each task, `grad_fn(store, task)`
/// returns flattened gradients; the meta-gradient sums the task gradients
/// taken after one inner step of size `alpha`.
pub fn maml_round<T: Real, F>(store: &mut ParamStore<T>, tasks: usize, alpha: f64, beta: f64, mut grad_fn: F) -> Result<()>
where
    F: FnMut(&ParamStore<T>, usize) -> Result<Vec<Vec<T>>>,
{
    if tasks == 0 {
        return Err(invalid("meta-learning needs at least one task batch"));
    }
    if !(alpha >= 0.0 && beta >= 0.0 && alpha.is_finite() && beta.is_finite()) {
        return Err(invalid(format!("meta-learning step sizes must be non-negative, got α={alpha}, β={beta}")));
    }
    let (a, b) = (T::lit(alpha), T::lit(beta));
    let mut meta: Vec<Vec<T>> = store.iter().map(|(_, t)| vec![T::zero(); t.numel()]).collect();
    for task in 0..tasks {
        let grads = grad_fn(store, task)?;
        let mut adapted = store.clone();
        for (tensor, g) in adapted.tensors_mut().zip(&grads) {
            tensor.data_mut().iter_mut().zip(g).for_each(|(w, &gi)| *w = *w - a * gi);
        }
        let adapted_grads = grad_fn(&adapted, task)?;
        for (acc, g) in meta.iter_mut().zip(adapted_grads) {
            acc.iter_mut().zip(g).for_each(|(s, gi)| *s = *s + gi);
        }
    }
    for (tensor, g) in store.tensors_mut().zip(meta) {
        tensor.data_mut().iter_mut().zip(g).for_each(|(w, gi)| *w = *w - b * gi);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Global-path reconstruction error on the validation windows.
    pub val_global_loss: f64,
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingState<T> {
    pub params: DtaadParams<T>,
    pub optimizer: OptimizerState<T>,
    pub next_epoch: usize,
    pub history: Vec<EpochRecord>,
}

impl<T: Real> TrainingState<T> {
    pub fn fresh(model: &DtaadConfig, cfg: &TrainerConfig) -> Result<Self> {
        let params = init_params(model, cfg.seed)?;
        let optimizer = OptimizerState::new(&params.store);
        Ok(Self {
            params,
            optimizer,
            next_epoch: 0,
            history: Vec::new(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    /// Parameters of the epoch with the lowest validation loss.
    pub params: DtaadParams<T>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
    /// State after the last completed epoch.
    pub last: TrainingState<T>,
}

/// Generator for one epoch; a pure function of the seed and epoch so that a
/// resumed run replays the same stream.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Splits off the temporal tail used for early stopping.
pub fn split_validation(ds: &WindowedDataset, fraction: f64) -> (WindowedDataset, Option<WindowedDataset>) {
    let n = ds.len();
    let n_val = (n as f64 * fraction).floor() as usize;
    if n_val == 0 || n_val >= n {
        return (ds.clone(), None);
    }
    (ds.slice(0, n - n_val), Some(ds.slice(n - n_val, n)))
}

fn batch_tensor<T: Real>(ds: &WindowedDataset, idx: &[usize]) -> Result<Tensor<T>> {
    let data = ds.gather(idx).into_iter().map(T::lit).collect();
    Tensor::new(vec![idx.len(), ds.window_size, ds.dims()], data)
}

fn batch_gradients<T: Real, R: Rng + ?Sized>(
    params: &DtaadParams<T>,
    store: &ParamStore<T>,
    windows: &Tensor<T>,
    rng: &mut R,
) -> Result<(f64, Vec<Vec<T>>)> {
    let tape = Tape::new();
    let bound = store.bind(&tape);
    let out = forward_training(params, &bound, &tape, windows, true, rng)?;
    let loss = out.loss.item().as_f64();
    let grads = tape.backward(out.loss)?;
    let flat = store
        .ids()
        .map(|id| grads.get(bound.var(id)).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); store.get(id).numel()]))
        .collect();
    Ok((loss, flat))
}

/// Mean combined and global-path losses with dropout disabled.
pub fn evaluate_loss<T: Real>(params: &DtaadParams<T>, ds: &WindowedDataset, batch: usize) -> Result<(f64, f64)> {
    let n = ds.len();
    if n == 0 {
        return Err(invalid("cannot evaluate on an empty dataset"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (mut total, mut global) = (0.0, 0.0);
    for lo in (0..n).step_by(batch.max(1)) {
        let idx: Vec<usize> = (lo..(lo + batch).min(n)).collect();
        let windows = batch_tensor::<T>(ds, &idx)?;
        let tape = Tape::new();
        let bound = params.store.bind(&tape);
        let out = forward_training(params, &bound, &tape, &windows, false, &mut rng)?;
        total += out.loss.item().as_f64() * idx.len() as f64;
        global += out.global_loss.item().as_f64() * idx.len() as f64;
    }
    Ok((total / n as f64, global / n as f64))
}

/// Runs one epoch of shuffled mini-batches (plus the meta-learning round
/// when enabled) and returns the mean training loss.
pub fn train_epoch<T: Real>(state: &mut TrainingState<T>, train: &WindowedDataset, cfg: &TrainerConfig) -> Result<f64> {
    if train.is_empty() {
        return Err(invalid("training set holds no windows"));
    }
    let epoch = state.next_epoch;
    let lr = lr_at_epoch(cfg, epoch);
    let mut rng = epoch_rng(cfg.seed, epoch);
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut rng);
    let mut weighted = 0.0;
    for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
        let windows = batch_tensor::<T>(train, idx)?;
        let tape = Tape::new();
        let bound = state.params.store.bind(&tape);
        let out = forward_training(&state.params, &bound, &tape, &windows, true, &mut rng)?;
        let loss = out.loss.item().as_f64();
        if !loss.is_finite() {
            return Err(DtaadError::Diverged { epoch, batch: b });
        }
        let grads = tape.backward(out.loss)?;
        state.params.store.store_grads(&grads, &bound)?;
        adamw_step(&mut state.params.store, &mut state.optimizer, lr, cfg)?;
        weighted += loss * idx.len() as f64;
    }
    if cfg.maml.enabled {
        let tasks: Vec<Vec<usize>> = (0..cfg.maml.tasks)
            .map(|_| {
                let mut idx = order.clone();
                idx.shuffle(&mut rng);
                idx.truncate(cfg.batch_size);
                idx
            })
            .collect();
        let batches = tasks.iter().map(|idx| batch_tensor::<T>(train, idx)).collect::<Result<Vec<_>>>()?;
        let params = state.params.clone();
        maml_round(&mut state.params.store, tasks.len(), cfg.maml.inner_lr, cfg.maml.meta_lr, |store, task| {
            batch_gradients(&params, store, &batches[task], &mut rng).map(|(_, g)| g)
        })?;
    }
    for t in state.params.store.tensors_mut() {
        t.clear_grad();
        if !t.is_finite() {
            return Err(DtaadError::Diverged { epoch, batch: order.len().div_ceil(cfg.batch_size) });
        }
    }
    state.next_epoch += 1;
    Ok(weighted / train.len() as f64)
}

/// Trains from `state` until `max_epochs` or early stopping.
pub fn train_from<T: Real>(mut state: TrainingState<T>, ds: &WindowedDataset, cfg: &TrainerConfig) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(invalid("dataset holds no windows"));
    }
    let (train, val) = split_validation(ds, cfg.validation_fraction);
    let mut best: Option<(f64, usize, DtaadParams<T>)> = None;
    let mut worse_epochs = 0;
    let mut stopped_early = false;
    let mut previous = state.history.last().map(|r| r.val_loss);
    while state.next_epoch < cfg.max_epochs {
        let epoch = state.next_epoch;
        let lr = lr_at_epoch(cfg, epoch);
        let train_loss = train_epoch(&mut state, &train, cfg)?;
        let (val_loss, val_global_loss) = match &val {
            Some(v) => evaluate_loss(&state.params, v, cfg.batch_size)?,
            None => (train_loss, train_loss),
        };
        info!("epoch {epoch}: lr {lr:.5} train {train_loss:.6} val {val_loss:.6}");
        state.history.push(EpochRecord {
            epoch,
            lr,
            train_loss,
            val_loss,
            val_global_loss,
        });
        if best.as_ref().is_none_or(|(b, _, _)| val_loss < *b) {
            best = Some((val_loss, epoch, state.params.clone()));
        }
        if previous.is_some_and(|p| val_loss > p) {
            worse_epochs += 1;
            if worse_epochs >= cfg.patience.max(1) {
                debug!("validation loss rose at epoch {epoch}, stopping");
                stopped_early = true;
                break;
            }
        } else {
            worse_epochs = 0;
        }
        previous = Some(val_loss);
    }
    let (params, best_epoch) = match best {
        Some((_, e, p)) => (p, e),
        None => (state.params.clone(), state.next_epoch.saturating_sub(1)),
    };
    Ok(TrainOutcome {
        params,
        history: state.history.clone(),
        best_epoch,
        stopped_early,
        last: state,
    })
}

pub fn train<T: Real>(model: &DtaadConfig, ds: &WindowedDataset, cfg: &TrainerConfig) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(invalid("dataset holds no windows"));
    }
    if ds.dims() != model.dims || ds.window_size != model.window {
        return Err(invalid(format!(
            "dataset windows are {}x{}, model expects {}x{}",
            ds.window_size,
            ds.dims(),
            model.window,
            model.dims
        )));
    }
    train_from(TrainingState::fresh(model, cfg)?, ds, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_windows;
    use ndarray::Array2;

    fn single_param(value: f64, grad: f64) -> ParamStore<f64> {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(value));
        store.get_mut(id).set_grad(vec![grad]).unwrap();
        store
    }

    #[test]
    fn adamw_worked_example() {
        let mut store = single_param(1.0, 1.0);
        let mut state = OptimizerState::new(&store);
        adamw_step(&mut store, &mut state, 0.01, &TrainerConfig::default()).unwrap();
        let w = store.get(store.find("w").unwrap()).data()[0];
        assert!((w - 0.9899).abs() < 1e-6, "{w}");
        assert_eq!(state.step, 1);
    }

    #[test]
    fn adamw_identity_without_gradient_or_decay() {
        let mut store = single_param(0.37, 0.0);
        let mut state = OptimizerState::new(&store);
        let cfg = TrainerConfig {
            weight_decay: 0.0,
            ..TrainerConfig::default()
        };
        adamw_step(&mut store, &mut state, 0.01, &cfg).unwrap();
        assert_eq!(store.get(store.find("w").unwrap()).data()[0], 0.37);
    }

    #[test]
    fn adamw_requires_gradients() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", Tensor::scalar(1.0));
        let mut state = OptimizerState::new(&store);
        assert!(matches!(
            adamw_step(&mut store, &mut state, 0.01, &TrainerConfig::default()),
            Err(DtaadError::State(_))
        ));
    }

    #[test]
    fn adamw_symmetric_parameters_stay_equal() {
        let mut store = ParamStore::<f64>::new();
        for name in ["a", "b"] {
            let id = store.add(name, Tensor::vector(&[0.5, -0.2]));
            store.get_mut(id).set_grad(vec![0.3, 0.1]).unwrap();
        }
        let mut state = OptimizerState::new(&store);
        adamw_step(&mut store, &mut state, 0.01, &TrainerConfig::default()).unwrap();
        let ids: Vec<_> = store.ids().collect();
        assert_eq!(store.get(ids[0]).data(), store.get(ids[1]).data());
    }

    #[test]
    fn step_schedule() {
        let cfg = TrainerConfig::default();
        for e in 0..5 {
            assert_eq!(lr_at_epoch(&cfg, e), 0.01);
        }
        assert_eq!(lr_at_epoch(&cfg, 5), 0.005);
        assert_eq!(lr_at_epoch(&cfg, 10), 0.0025);
        let flat = TrainerConfig { decay: 1.0, ..cfg };
        assert_eq!(lr_at_epoch(&flat, 17), 0.01);
    }

    fn square_grad(store: &ParamStore<f64>, _task: usize) -> Result<Vec<Vec<f64>>> {
        Ok(store.iter().map(|(_, t)| t.data().iter().map(|w| 2.0 * w).collect()).collect())
    }

    #[test]
    fn maml_scalar_example() {
        let mut store = single_param(1.0, 0.0);
        maml_round(&mut store, 1, 0.1, 0.1, square_grad).unwrap();
        let w = store.get(store.find("w").unwrap()).data()[0];
        assert!((w - 0.84).abs() < 1e-12);
    }

    #[test]
    fn maml_degenerate_steps() {
        let mut store = single_param(1.0, 0.0);
        maml_round(&mut store, 1, 0.1, 0.0, square_grad).unwrap();
        assert_eq!(store.get(store.find("w").unwrap()).data()[0], 1.0);

        let mut store = single_param(1.0, 0.0);
        maml_round(&mut store, 1, 0.0, 0.1, square_grad).unwrap();
        assert!((store.get(store.find("w").unwrap()).data()[0] - 0.8).abs() < 1e-12);

        assert!(maml_round(&mut store, 1, -0.1, 0.1, square_grad).is_err());
        assert!(maml_round(&mut store, 0, 0.1, 0.1, square_grad).is_err());
    }

    #[test]
    fn config_rejects_bad_values() {
        assert!(TrainerConfig { lr: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainerConfig { decay: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainerConfig { decay: 1.5, ..Default::default() }.validate().is_err());
        let maml = MamlConfig {
            enabled: true,
            inner_lr: 0.0,
            ..Default::default()
        };
        assert!(TrainerConfig { maml, ..Default::default() }.validate().is_err());
    }

    fn sine_windows(t: usize, m: usize) -> WindowedDataset {
        let x = Array2::from_shape_fn((t, m), |(i, j)| 0.5 + 0.4 * ((i as f64) * 0.07 * (j + 1) as f64).sin());
        make_windows(x.view(), 10).unwrap()
    }

    #[test]
    fn repeated_window_descends() {
        let ds = sine_windows(10, 2).slice(9, 10);
        let model = DtaadConfig::new(10, 2);
        let cfg = TrainerConfig {
            lr: 1e-3,
            batch_size: 1,
            max_epochs: 50,
            validation_fraction: 0.0,
            patience: usize::MAX,
            ..Default::default()
        };
        let mut state = TrainingState::<f64>::fresh(&model, &cfg).unwrap();
        let initial = evaluate_loss(&state.params, &ds, 1).unwrap().0;
        for _ in 0..50 {
            train_epoch(&mut state, &ds, &cfg).unwrap();
        }
        let last = evaluate_loss(&state.params, &ds, 1).unwrap().0;
        assert!(last < initial, "{last} >= {initial}");
    }

    #[test]
    fn fixed_seed_reproduces_history() {
        let ds = sine_windows(300, 2);
        let model = DtaadConfig::new(10, 2);
        let cfg = TrainerConfig {
            max_epochs: 2,
            batch_size: 32,
            seed: 11,
            ..Default::default()
        };
        let a = train::<f32>(&model, &ds, &cfg).unwrap();
        let b = train::<f32>(&model, &ds, &cfg).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.params.store, b.params.store);
    }

    #[test]
    fn empty_dataset_rejected() {
        let ds = sine_windows(20, 2).slice(0, 0);
        assert!(matches!(
            train::<f32>(&DtaadConfig::new(10, 2), &ds, &TrainerConfig::default()),
            Err(DtaadError::InvalidArgument(_))
        ));
    }

    #[test]
    fn nan_input_reports_divergence() {
        let mut ds = sine_windows(40, 2);
        ds.windows[[3, 9, 0]] = f64::NAN;
        let cfg = TrainerConfig {
            batch_size: 8,
            validation_fraction: 0.0,
            ..Default::default()
        };
        let err = train::<f32>(&DtaadConfig::new(10, 2), &ds, &cfg).unwrap_err();
        assert!(matches!(err, DtaadError::Diverged { epoch: 0, .. }), "{err:?}");
    }

    #[test]
    fn maml_epoch_runs() {
        let ds = sine_windows(120, 2);
        let cfg = TrainerConfig {
            max_epochs: 1,
            batch_size: 32,
            maml: MamlConfig {
                enabled: true,
                ..Default::default()
            },
            ..Default::default()
        };
        let out = train::<f32>(&DtaadConfig::new(10, 2), &ds, &cfg).unwrap();
        assert_eq!(out.history.len(), 1);
        assert!(out.history[0].val_loss.is_finite());
    }
}
