use std::collections::BTreeMap;

use crate::encoder::Parameters;
use crate::error::{Error, Result};
use crate::tensorcore::Tensor;

/// Linear warmup to `peak` at `warmup`, then inverse square-root decay.
pub fn lr_schedule(step: usize, peak: f64, warmup: usize) -> f64 {
    let (s, w) = (step as f64, warmup as f64);
    peak * (s / w).min((w / s).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

/// First and second moments per parameter plus the number of updates taken.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

/// One bias-corrected Adam update. Every parameter needs a gradient of the
/// same shape and no gradient may name an unknown parameter.
pub fn adam_step(
    params: &mut Parameters,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    lr: f64,
    hyper: &AdamHyper,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::shape(
            "adam_step",
            format!("{} gradients for {} parameters", grads.len(), params.len()),
        ));
    }
    for (name, p) in params.iter() {
        match grads.get(name) {
            Some(g) if g.shape() == p.shape() => {}
            Some(g) => {
                return Err(Error::shape(
                    "adam_step",
                    format!("{name}: gradient {:?} vs parameter {:?}", g.shape(), p.shape()),
                ))
            }
            None => return Err(Error::shape("adam_step", format!("no gradient for {name}"))),
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hyper.beta1.powi(t);
    let c2 = 1.0 - hyper.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let g = grads[name].data();
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = hyper.beta1 * *mi + (1.0 - hyper.beta1) * gi;
            *vi = hyper.beta2 * *vi + (1.0 - hyper.beta2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + hyper.eps);
        }
    }
    Ok(())
}

pub fn global_norm(grads: &BTreeMap<String, Tensor>) -> f64 {
    grads
        .values()
        .flat_map(|g| g.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{ModelConfig, System};

    #[test]
    fn schedule_examples() {
        assert_eq!(lr_schedule(500, 1e-3, 500), 1e-3);
        assert_eq!(lr_schedule(250, 1e-3, 500), 5e-4);
        assert_eq!(lr_schedule(2000, 1e-3, 500), 5e-4);
        assert_eq!(lr_schedule(1, 2.0, 1), 2.0);
    }

    #[test]
    fn schedule_shape() {
        let w = 50;
        let lr: Vec<f64> = (1..=200).map(|s| lr_schedule(s, 1.0, w)).collect();
        assert!(lr[..w].windows(2).all(|p| p[0] < p[1]));
        assert!(lr[w - 1..].windows(2).all(|p| p[0] > p[1]));
        // both branches meet at the peak
        let eps = 1e-9;
        let left = 1.0 * ((w as f64 - eps) / w as f64);
        assert!((left - lr[w - 1]).abs() < 1e-9);
    }

    fn toy() -> (Parameters, ModelConfig) {
        let cfg = ModelConfig {
            feature_dim: 2,
            d_model: 2,
            ff_dim: 2,
            n_heads: 1,
            n_shared_blocks: 1,
            n_specific_blocks: 1,
            vocab_size: 3,
            system: System::BaselineSingle,
            disentangle: false,
        };
        (Parameters::init(&cfg, 3).unwrap(), cfg)
    }

    fn grads_like(p: &Parameters, f: impl Fn(&str, usize) -> f64) -> BTreeMap<String, Tensor> {
        p.iter()
            .map(|(n, t)| {
                let data = (0..t.numel()).map(|i| f(n, i)).collect();
                (n.clone(), Tensor::new(t.shape().to_vec(), data).unwrap())
            })
            .collect()
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let (mut p, _) = toy();
        let before = p.clone();
        let mut st = AdamState::default();
        adam_step(&mut p, &grads_like(&before, |_, _| 0.0), &mut st, 0.1, &AdamHyper::default()).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr_against_the_sign() {
        let (mut p, _) = toy();
        let before = p.clone();
        let h = AdamHyper::default();
        let g = grads_like(&before, |_, i| if i % 2 == 0 { 3.0 } else { -0.25 });
        adam_step(&mut p, &g, &mut AdamState::default(), 0.01, &h).unwrap();
        for (name, t) in p.iter() {
            for (i, (&a, &b)) in t.data().iter().zip(before.get(name).unwrap().data()).enumerate() {
                let gi: f64 = if i % 2 == 0 { 3.0 } else { -0.25 };
                // m_hat = g, v_hat = g^2, so the step is lr * |g| / (|g| + eps)
                let expect = -0.01 * gi.signum() * gi.abs() / (gi.abs() + h.eps);
                assert!((a - b - expect).abs() < 1e-15, "{name}[{i}]");
            }
        }
    }

    #[test]
    fn two_steps_descend_a_quadratic() {
        let (mut p, _) = toy();
        let loss = |p: &Parameters| p.iter().flat_map(|(_, t)| t.data()).map(|x| (x - 1.0).powi(2)).sum::<f64>();
        let mut st = AdamState::default();
        let mut last = loss(&p);
        for _ in 0..2 {
            let snapshot = p.clone();
            let g = grads_like(&snapshot, |n, i| 2.0 * (snapshot.get(n).unwrap().data()[i] - 1.0));
            adam_step(&mut p, &g, &mut st, 0.05, &AdamHyper::default()).unwrap();
            let now = loss(&p);
            assert!(now < last);
            last = now;
        }
    }

    #[test]
    fn misaligned_gradients_are_rejected() {
        let (mut p, _) = toy();
        let mut g = grads_like(&p, |_, _| 1.0);
        g.insert("input.w".into(), Tensor::zeros(&[1]));
        let r = adam_step(&mut p, &g, &mut AdamState::default(), 0.1, &AdamHyper::default());
        assert!(matches!(r, Err(Error::ShapeMismatch { .. })));
        let mut g = grads_like(&p, |_, _| 1.0);
        g.remove("input.w");
        assert!(adam_step(&mut p, &g, &mut AdamState::default(), 0.1, &AdamHyper::default()).is_err());
    }

    #[test]
    fn clipping_caps_the_joint_norm() {
        let (p, _) = toy();
        let mut g = grads_like(&p, |_, _| 2.0);
        let before = clip_global_norm(&mut g, 1.0);
        assert!(before > 1.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-12);
        let mut small = grads_like(&p, |_, _| 1e-4);
        let copy = small.clone();
        clip_global_norm(&mut small, 5.0);
        assert_eq!(small, copy);
    }
}
