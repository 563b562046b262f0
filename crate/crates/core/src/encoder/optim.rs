//! AdamW with decoupled weight decay, global-norm clipping and a linear
//! warmup/decay schedule.

use super::{EncoderError, EncoderParams, EncoderState, TrainConfig};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Linear ramp `0 → η` over the first `round(warmup_fraction · total)` steps,
/// then linear decay to 0 at `total`.
pub fn lr_at(t: usize, total: usize, cfg: &TrainConfig) -> Result<f64, EncoderError> {
    if t == 0 || t > total {
        return Err(EncoderError::StepOutOfRange { t, total });
    }
    let eta = cfg.learning_rate;
    let warmup = (cfg.warmup_fraction * total as f64).round() as usize;
    if t <= warmup {
        return Ok(eta * t as f64 / warmup as f64);
    }
    if warmup == total {
        return Ok(eta);
    }
    Ok(eta * (total - t) as f64 / (total - warmup) as f64)
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    m: EncoderParams,
    v: EncoderParams,
}

impl AdamW {
    pub fn new(params: &EncoderParams) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }
}

/// Bias-corrected Adam step on one slice, followed by decoupled decay `θ -= lr·λ·θ`.
#[allow(clippy::too_many_arguments)]
pub fn adamw_kernel(
    theta: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    lr: f64,
    decay: f64,
    t: usize,
    grad_scale: f64,
) {
    let c1 = 1.0 - ADAM_BETA1.powi(t as i32);
    let c2 = 1.0 - ADAM_BETA2.powi(t as i32);
    for i in 0..theta.len() {
        let g = grad[i] * grad_scale;
        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        theta[i] -= lr * (m_hat / (v_hat.sqrt() + ADAM_EPS) + decay * theta[i]);
    }
}

/// One optimizer step at `t` (1-based) of `total`. Frozen parameters are skipped
/// entirely, including their moments. The global norm of the trainable gradients
/// is clipped to `grad_clip`. Returns the learning rate used.
pub fn adamw_update(
    state: &mut EncoderState,
    grads: &EncoderParams,
    opt: &mut AdamW,
    cfg: &TrainConfig,
    t: usize,
    total: usize,
) -> Result<f64, EncoderError> {
    let lr = lr_at(t, total, cfg)?;
    let infos = state.params.infos();
    let mut sq = 0.0;
    let mut bad = None;
    grads.for_each(|info, g| {
        if bad.is_none() && g.data().iter().any(|x| !x.is_finite()) {
            bad = Some(info.name.clone());
        }
        if state.is_trainable(info) {
            sq += g.sum_sq();
        }
    });
    if let Some(name) = bad {
        return Err(EncoderError::NonFiniteGradient(name));
    }
    let norm = sq.sqrt();
    let scale = if norm > cfg.grad_clip {
        cfg.grad_clip / norm
    } else {
        1.0
    };
    let decayed = cfg.decayed_set(state.config.n_layers);
    let trainable: Vec<bool> = infos.iter().map(|i| state.is_trainable(i)).collect();

    let params = state.params.flat_mut();
    let moments = opt.m.flat_mut().into_iter().zip(opt.v.flat_mut());
    for ((((info, train), p), g), (m, v)) in infos
        .iter()
        .zip(trainable)
        .zip(params)
        .zip(grads.flat())
        .zip(moments)
    {
        if !train {
            continue;
        }
        let decay = match info.layer {
            Some(l) if decayed.contains(&l) => cfg.weight_decay,
            _ => 0.0,
        };
        adamw_kernel(
            p.data_mut(),
            g.data(),
            m.data_mut(),
            v.data_mut(),
            lr,
            decay,
            t,
            scale,
        );
    }
    Ok(lr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{EncoderConfig, LayerSelection};

    fn state() -> EncoderState {
        EncoderState::init(EncoderConfig {
            n_layers: 3,
            n_heads: 1,
            d_model: 4,
            d_ff: 4,
            max_len: 4,
            vocab_size: 6,
            mask_prob: 0.15,
            seed: 2,
        })
        .unwrap()
    }

    #[test]
    fn schedule_points() {
        let cfg = TrainConfig {
            learning_rate: 1.0,
            warmup_fraction: 0.1,
            ..Default::default()
        };
        assert_eq!(lr_at(10, 100, &cfg).unwrap(), 1.0);
        assert_eq!(lr_at(5, 100, &cfg).unwrap(), 0.5);
        assert_eq!(lr_at(100, 100, &cfg).unwrap(), 0.0);
        assert_eq!(lr_at(55, 100, &cfg).unwrap(), 0.5);
        assert!(matches!(
            lr_at(0, 100, &cfg),
            Err(EncoderError::StepOutOfRange { .. })
        ));
        assert!(lr_at(101, 100, &cfg).is_err());
        let none = TrainConfig {
            learning_rate: 2.0,
            warmup_fraction: 0.0,
            ..Default::default()
        };
        assert_eq!(lr_at(1, 4, &none).unwrap(), 1.5);
    }

    #[test]
    fn scalar_adam_step_by_hand() {
        let (mut th, mut m, mut v) = ([0.5], [0.0], [0.0]);
        adamw_kernel(&mut th, &[1.0], &mut m, &mut v, 0.01, 0.0, 1, 1.0);
        // m = 0.1, v = 0.001, m_hat = 1, v_hat = 1
        assert!((m[0] - 0.1).abs() < 1e-15 && (v[0] - 0.001).abs() < 1e-15);
        assert!((th[0] - (0.5 - 0.01 / (1.0 + ADAM_EPS))).abs() < 1e-15);
        adamw_kernel(&mut th, &[1.0], &mut m, &mut v, 0.01, 0.0, 2, 1.0);
        let m2: f64 = 0.9 * 0.1 + 0.1;
        let v2: f64 = 0.999 * 0.001 + 0.001;
        let step = (m2 / (1.0 - 0.81)) / ((v2 / (1.0 - 0.999f64.powi(2))).sqrt() + ADAM_EPS);
        assert!((th[0] - (0.5 - 0.01 / (1.0 + ADAM_EPS) - 0.01 * step)).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_and_decay() {
        let cfg = TrainConfig {
            learning_rate: 0.1,
            warmup_fraction: 0.0,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut s = state();
        let before = s.clone();
        let zeros = s.params.zeros_like();
        let mut opt = AdamW::new(&s.params);
        adamw_update(&mut s, &zeros, &mut opt, &cfg, 1, 10).unwrap();
        assert_eq!(s, before);

        let cfg = TrainConfig {
            weight_decay: 0.02,
            decayed_layers: Some([3].into_iter().collect()),
            ..cfg
        };
        adamw_update(&mut s, &zeros, &mut opt, &cfg, 1, 10).unwrap();
        let lr = lr_at(1, 10, &cfg).unwrap();
        for (a, b) in s.params.layers[2]
            .w_q
            .data()
            .iter()
            .zip(before.params.layers[2].w_q.data())
        {
            assert!((a - (b - lr * 0.02 * b)).abs() < 1e-15);
        }
        assert_eq!(s.params.layers[0], before.params.layers[0]);
        assert_eq!(s.params.token_embedding, before.params.token_embedding);
    }

    #[test]
    fn frozen_layers_untouched_and_nan_reported() {
        let cfg = TrainConfig::default();
        let mut s = state();
        s.set_layer_selection(&LayerSelection::parse("3").unwrap(), Default::default())
            .unwrap();
        let before = s.clone();
        let mut g = s.params.zeros_like();
        g.for_each_mut(|_, t| t.fill(0.3));
        let mut opt = AdamW::new(&s.params);
        adamw_update(&mut s, &g, &mut opt, &cfg, 2, 10).unwrap();
        assert_eq!(s.params.layers[0], before.params.layers[0]);
        assert_eq!(s.params.layers[1], before.params.layers[1]);
        assert_ne!(s.params.layers[2], before.params.layers[2]);
        assert_ne!(s.params.reg_weight, before.params.reg_weight);
        g.layers[1].w_k.data_mut()[0] = f64::NAN;
        match adamw_update(&mut s, &g, &mut opt, &cfg, 3, 10) {
            Err(EncoderError::NonFiniteGradient(name)) => assert_eq!(name, "layers.2.w_k"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
