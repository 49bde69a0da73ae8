//! Cache models: an exponential moving average of a sequence of parameter
//! snapshots (momentum mode), or simply the latest snapshot (copy mode).

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, Discriminator};
use crate::error::{CksError, Result};
use crate::types::{Image, ParamVector, ProbMap};

pub const DEFAULT_ALPHA: f64 = 0.99;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SwitchMode {
    Momentum,
    Copy,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CacheModel {
    theta_mu: ParamVector,
    alpha: f64,
    update_count: u64,
    mode: SwitchMode,
}

impl CacheModel {
    /// Starts the cache as a copy of `theta`.
    pub fn new(theta: &ParamVector, alpha: f64, mode: SwitchMode) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(CksError::AlphaOutOfRange(alpha));
        }
        Ok(CacheModel {
            theta_mu: theta.clone(),
            alpha,
            update_count: 0,
            mode,
        })
    }

    /// Rebuilds a cache from persisted state.
    pub fn restore(theta_mu: ParamVector, alpha: f64, update_count: u64, mode: SwitchMode) -> Result<Self> {
        let mut c = CacheModel::new(&theta_mu, alpha, mode)?;
        c.update_count = update_count;
        Ok(c)
    }

    /// `theta_mu <- alpha * theta_mu + (1 - alpha) * theta` in momentum mode,
    /// `theta_mu <- theta` in copy mode.
    pub fn update(&mut self, theta: &ParamVector) -> Result<()> {
        theta.check_layout(self.theta_mu.layout())?;
        if theta.len() != self.theta_mu.len() {
            return Err(CksError::CountMismatch {
                expected: self.theta_mu.len() as u64,
                found: theta.len() as u64,
            });
        }
        let a = self.alpha;
        // The endpoints are handled exactly (no -0.0 / rounding artefacts).
        if self.mode == SwitchMode::Copy || a == 0.0 {
            self.theta_mu = theta.clone();
        } else if a < 1.0 {
            let mixed: Vec<f32> = self
                .theta_mu
                .values()
                .iter()
                .zip(theta.values())
                .map(|(&mu, &th)| (a * f64::from(mu) + (1.0 - a) * f64::from(th)) as f32)
                .collect();
            self.theta_mu = ParamVector::new(mixed, self.theta_mu.layout().clone())?;
        }
        self.update_count += 1;
        Ok(())
    }

    pub fn forward<B: Backbone + ?Sized>(&self, backbone: &B, x: &Image) -> Result<ProbMap> {
        backbone.forward(&self.theta_mu, x)
    }

    /// Binds the cache to a backbone so it can act as a discriminator.
    pub fn view<'a, B: Backbone + ?Sized>(&'a self, backbone: &'a B) -> Result<Bound<'a, B>> {
        Bound::new(backbone, &self.theta_mu)
    }

    pub fn theta_mu(&self) -> &ParamVector {
        &self.theta_mu
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn update_count(&self) -> u64 {
        self.update_count
    }

    pub fn mode(&self) -> SwitchMode {
        self.mode
    }
}

/// A backbone with fixed parameters.
pub struct Bound<'a, B: Backbone + ?Sized> {
    backbone: &'a B,
    params: Vec<f64>,
}

impl<'a, B: Backbone + ?Sized> Bound<'a, B> {
    pub fn new(backbone: &'a B, theta: &ParamVector) -> Result<Self> {
        theta.check_layout(&backbone.layout_id())?;
        Ok(Bound {
            backbone,
            params: theta.to_f64(),
        })
    }
}

impl<B: Backbone + ?Sized> Discriminator for Bound<'_, B> {
    fn predict(&self, x: &Image) -> Result<ProbMap> {
        self.backbone.forward_f64(&self.params, x)
    }

    fn input_align(&self) -> usize {
        self.backbone.input_align()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneSpec;
    use crate::rng::Rng64;
    use crate::types::LayoutId;
    use proptest::prelude::*;

    fn layout() -> LayoutId {
        LayoutId("test".into())
    }

    fn pv(values: Vec<f32>) -> ParamVector {
        ParamVector::new(values, layout()).unwrap()
    }

    #[test]
    fn init_copies_theta() {
        let theta = pv(vec![0.25, -1.5, 3.0]);
        for mode in [SwitchMode::Momentum, SwitchMode::Copy] {
            let c = CacheModel::new(&theta, 0.9, mode).unwrap();
            assert!(c.theta_mu().bit_eq(&theta));
            assert_eq!(c.update_count(), 0);
        }
        assert!(matches!(
            CacheModel::new(&theta, 1.2, SwitchMode::Momentum),
            Err(CksError::AlphaOutOfRange(_))
        ));
    }

    #[test]
    fn momentum_update_by_hand() {
        let mut c = CacheModel::new(&pv(vec![0.0; 4]), 0.9, SwitchMode::Momentum).unwrap();
        c.update(&pv(vec![1.0; 4])).unwrap();
        for &v in c.theta_mu().values() {
            assert!((f64::from(v) - 0.1).abs() < 1e-7);
        }
        assert_eq!(c.update_count(), 1);
    }

    #[test]
    fn degenerate_alphas_are_exact() {
        let init = pv(vec![-0.0, 2.0, -3.5]);
        let next = pv(vec![0.0, -7.25, 1e-30]);
        let mut frozen = CacheModel::new(&init, 1.0, SwitchMode::Momentum).unwrap();
        frozen.update(&next).unwrap();
        assert!(frozen.theta_mu().bit_eq(&init));
        let mut follow = CacheModel::new(&init, 0.0, SwitchMode::Momentum).unwrap();
        follow.update(&next).unwrap();
        assert!(follow.theta_mu().bit_eq(&next));
        let mut copy = CacheModel::new(&init, 0.7, SwitchMode::Copy).unwrap();
        copy.update(&next).unwrap();
        assert!(copy.theta_mu().bit_eq(&next));
    }

    #[test]
    fn update_rejects_foreign_layout() {
        let mut c = CacheModel::new(&pv(vec![1.0]), 0.5, SwitchMode::Momentum).unwrap();
        let other = ParamVector::new(vec![1.0], LayoutId("other".into())).unwrap();
        assert!(matches!(c.update(&other), Err(CksError::LayoutMismatch { .. })));
    }

    #[test]
    fn cache_forward_after_init_equals_backbone_forward() {
        let spec = BackboneSpec::new(1, 2).unwrap();
        let theta = spec.init_params(4);
        let c = CacheModel::new(&theta, 0.99, SwitchMode::Momentum).unwrap();
        let x = Image::from_fn(8, 8, |(r, c)| ((r * 3 + c) % 7) as f64 / 7.0).unwrap();
        assert_eq!(c.forward(&spec, &x).unwrap(), spec.forward(&theta, &x).unwrap());
        assert_eq!(
            c.view(&spec).unwrap().predict(&x).unwrap(),
            spec.forward(&theta, &x).unwrap()
        );
    }

    #[test]
    fn constant_inputs_are_a_fixed_point() {
        let spec = BackboneSpec::new(1, 2).unwrap();
        let theta = spec.init_params(9);
        let mut c = CacheModel::new(&theta, 0.9, SwitchMode::Momentum).unwrap();
        for _ in 0..10 {
            c.update(&theta).unwrap();
        }
        assert!(c.theta_mu().bit_eq(&theta));
    }

    /// Weights of the closed form `alpha^k theta0 + (1-alpha) sum alpha^(k-i) theta_i`.
    fn closed_form_weights(alpha: f64, k: usize) -> Vec<f64> {
        let mut w = vec![alpha.powi(k as i32)];
        w.extend((1..=k).map(|i| (1.0 - alpha) * alpha.powi((k - i) as i32)));
        w
    }

    proptest! {
        #[test]
        fn matches_closed_form(seed in any::<u64>(), k in 0usize..50, alpha in 0.0f64..=1.0) {
            let mut rng = Rng64::new(seed);
            let n = 8;
            let snaps: Vec<Vec<f32>> = (0..=k).map(|_| (0..n).map(|_| rng.range(0.5, 1.5) as f32).collect()).collect();
            let mut c = CacheModel::new(&pv(snaps[0].clone()), alpha, SwitchMode::Momentum).unwrap();
            for s in &snaps[1..] {
                c.update(&pv(s.clone())).unwrap();
            }
            let w = closed_form_weights(alpha, k);
            let total: f64 = w.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!(w.iter().all(|&x| x >= 0.0));
            for j in 0..n {
                let want: f64 = w.iter().zip(&snaps).map(|(wi, s)| wi * f64::from(s[j])).sum();
                let got = f64::from(c.theta_mu().values()[j]);
                prop_assert!((got - want).abs() <= 1e-6 * want.abs(), "{} vs {}", got, want);
            }
        }

        #[test]
        fn copy_mode_tracks_last(seed in any::<u64>(), k in 1usize..20) {
            let mut rng = Rng64::new(seed);
            let snaps: Vec<ParamVector> = (0..=k).map(|_| pv((0..5).map(|_| rng.range(-2.0, 2.0) as f32).collect())).collect();
            let mut c = CacheModel::new(&snaps[0], 0.5, SwitchMode::Copy).unwrap();
            for s in &snaps[1..] {
                c.update(s).unwrap();
            }
            prop_assert!(c.theta_mu().bit_eq(&snaps[k]));
        }
    }
}
