//! Low-rank adaptation of frozen linear maps: `h = W₀x + s·B(dropout(Ax))`
//! with `s = α / r`, where only `A` and `B` are trainable.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::{Mode, Rng};

/// Standard deviation of the Gaussian initialization of `A`.
pub const A_INIT_STD: f64 = 0.02;

/// Which projection matrices of a transformer block receive adapters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum LoraTarget {
    Query,
    Key,
    Value,
    Output,
    MlpIn,
    MlpOut,
}

impl LoraTarget {
    pub const ATTENTION: [LoraTarget; 4] = [Self::Query, Self::Key, Self::Value, Self::Output];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Query => "query",
            Self::Key => "key",
            Self::Value => "value",
            Self::Output => "output",
            Self::MlpIn => "mlp_in",
            Self::MlpOut => "mlp_out",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub targets: Vec<LoraTarget>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 8,
            alpha: 4.0,
            dropout: 0.05,
            targets: LoraTarget::ATTENTION.to_vec(),
        }
    }
}

impl LoraConfig {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("lora dropout {} outside [0, 1)", self.dropout)));
        }
        if self.alpha.is_nan() || self.alpha <= 0.0 {
            return Err(Error::Config(format!("lora alpha {} must be positive", self.alpha)));
        }
        if self.rank == 0 {
            return Err(Error::Rank { rank: 0, max: 0 });
        }
        Ok(())
    }
}

/// The trainable pair `A: r×k`, `B: d×r` of one adapted matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoraAdapter {
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl LoraAdapter {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn trainable_count(&self, store: &ParamStore) -> usize {
        store.get(self.a).value.numel() + store.get(self.b).value.numel()
    }
}

/// A frozen base matrix `W₀: d×k` with an attached adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedLinear {
    pub base: ParamId,
    pub adapter: LoraAdapter,
    saved_base: Option<Tensor>,
}

impl AdaptedLinear {
    /// Freezes `base` and attaches an adapter with `A ~ N(0, 0.02²)` and
    /// `B = 0`, so the adapted map initially equals the base map exactly.
    pub fn attach(store: &mut ParamStore, base: ParamId, config: &LoraConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (d, k) = store.get(base).value.dims2("lora attach")?;
        let max = d.min(k);
        if config.rank == 0 || config.rank > max {
            return Err(Error::Rank { rank: config.rank, max });
        }
        let r = config.rank;
        let normal = Normal::new(0.0, A_INIT_STD).expect("valid std");
        let a_data = (0..r * k).map(|_| normal.sample(rng)).collect();
        let name = store.get(base).name.clone();
        {
            let p = store.get_mut(base);
            p.requires_grad = false;
            p.grad = None;
        }
        let a = store.push(format!("{name}.lora_a"), Tensor::new(alloc::vec![r, k], a_data)?, true);
        let b = store.push(format!("{name}.lora_b"), Tensor::zeros(&[d, r]), true);
        Ok(Self {
            base,
            adapter: LoraAdapter {
                a,
                b,
                rank: r,
                alpha: config.alpha,
                dropout: config.dropout,
            },
            saved_base: None,
        })
    }

    /// Re-binds previously stored adapter parameters (used when loading).
    pub fn from_parts(base: ParamId, adapter: LoraAdapter) -> Self {
        Self {
            base,
            adapter,
            saved_base: None,
        }
    }

    pub fn is_merged(&self) -> bool {
        self.saved_base.is_some()
    }

    /// `x·W₀ᵀ + s·dropout(x·Aᵀ)·Bᵀ` for a batch of row vectors `x: n×k`.
    ///
    /// Dropout (inverted, scaled by `1/(1−p)`) is applied to `Ax` and only in
    /// training mode.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, mode: &mut Mode<'_>) -> Result<Var> {
        let w0 = tape.param(store, self.base);
        let base_out = tape.matmul_nt(x, w0)?;
        if self.is_merged() {
            return Ok(base_out);
        }
        let a = tape.param(store, self.adapter.a);
        let b = tape.param(store, self.adapter.b);
        let mut ax = tape.matmul_nt(x, a)?;
        let p = self.adapter.dropout;
        if let Mode::Train(rng) = mode {
            if p > 0.0 {
                let shape = tape.value(ax).shape().to_vec();
                let keep = 1.0 / (1.0 - p);
                let n: usize = shape.iter().product();
                let mask = (0..n)
                    .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
                    .collect();
                let mask = tape.constant(Tensor::new(shape, mask)?);
                ax = tape.mul(ax, mask)?;
            }
        }
        let bax = tape.matmul_nt(ax, b)?;
        let delta = tape.scale(bax, self.adapter.scale());
        tape.add(base_out, delta)
    }

    /// `W' = W₀ + s·B·A`, leaving the layer untouched.
    pub fn merged_weight(&self, store: &ParamStore) -> Result<Tensor> {
        let base = self.saved_base.as_ref().unwrap_or(&store.get(self.base).value);
        let ba = store
            .get(self.adapter.b)
            .value
            .matmul(&store.get(self.adapter.a).value)?;
        let s = self.adapter.scale();
        let data = base.data().iter().zip(ba.data()).map(|(w, d)| w + s * d).collect();
        Tensor::new(base.shape().to_vec(), data)
    }

    /// Writes `W'` into the base parameter. A second merge without
    /// [`AdaptedLinear::unmerge`] is rejected.
    pub fn merge_into(&mut self, store: &mut ParamStore) -> Result<()> {
        if self.is_merged() {
            return Err(Error::AlreadyMerged);
        }
        let merged = self.merged_weight(store)?;
        let p = store.get_mut(self.base);
        self.saved_base = Some(core::mem::replace(&mut p.value, merged));
        Ok(())
    }

    /// Restores the exact pre-merge base weight.
    pub fn unmerge(&mut self, store: &mut ParamStore) {
        if let Some(w) = self.saved_base.take() {
            store.get_mut(self.base).value = w;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use rand::SeedableRng;

    fn random_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
        Tensor::new(
            vec![rows, cols],
            (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn eval(layer: &AdaptedLinear, store: &ParamStore, x: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = layer.forward(&mut tape, store, xv, &mut Mode::Eval).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn fresh_adapter_is_exactly_the_base_map() {
        let mut rng = Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let w0 = random_matrix(6, 5, &mut rng);
        let base = store.push("w", w0.clone(), true);
        let layer = AdaptedLinear::attach(&mut store, base, &LoraConfig::default_rank(2), &mut rng).unwrap();
        assert!(!store.get(base).requires_grad);
        let x = random_matrix(3, 5, &mut rng);
        assert_eq!(eval(&layer, &store, &x), x.matmul(&w0.transpose().unwrap()).unwrap());
        assert_eq!(layer.merged_weight(&store).unwrap(), w0);
    }

    #[test]
    fn default_rank_and_alpha_give_half_scale() {
        let cfg = LoraConfig::default();
        assert_eq!((cfg.rank, cfg.alpha, cfg.dropout), (8, 4.0, 0.05));
        assert_eq!(cfg.scale(), 0.5);
        let mut rng = Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let base = store.push("w", Tensor::zeros(&[64, 64]), true);
        let layer = AdaptedLinear::attach(&mut store, base, &cfg, &mut rng).unwrap();
        assert_eq!(layer.adapter.trainable_count(&store), 1024);
        assert_eq!(store.trainable_count(), 1024);
        assert_eq!(store.frozen_count(), 4096);
    }

    #[test]
    fn rank_bounds() {
        let mut rng = Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let base = store.push("w", Tensor::zeros(&[4, 3]), true);
        for rank in [0, 4] {
            let cfg = LoraConfig::default_rank(rank);
            assert!(matches!(
                AdaptedLinear::attach(&mut store, base, &cfg, &mut rng),
                Err(Error::Rank { .. })
            ));
        }
        assert!(AdaptedLinear::attach(&mut store, base, &LoraConfig::default_rank(3), &mut rng).is_ok());
    }

    #[test]
    fn rank_one_hand_case() {
        let mut store = ParamStore::new();
        let base = store.push("w", Tensor::zeros(&[2, 2]), false);
        let a = store.push("a", Tensor::from_rows(&[&[1.0, 1.0]]).unwrap(), true);
        let b = store.push("b", Tensor::from_rows(&[&[1.0], &[0.0]]).unwrap(), true);
        let layer = AdaptedLinear::from_parts(
            base,
            LoraAdapter {
                a,
                b,
                rank: 1,
                alpha: 1.0,
                dropout: 0.0,
            },
        );
        let h = eval(&layer, &store, &Tensor::from_rows(&[&[2.0, 3.0]]).unwrap());
        assert_eq!(h.data(), &[5.0, 0.0]);
    }

    fn trained_layer(rng: &mut Rng) -> (ParamStore, AdaptedLinear) {
        let mut store = ParamStore::new();
        let base = store.push("w", random_matrix(7, 5, rng), true);
        let layer = AdaptedLinear::attach(&mut store, base, &LoraConfig::default_rank(3), rng).unwrap();
        store.get_mut(layer.adapter.b).value = random_matrix(7, 3, rng);
        store.get_mut(layer.adapter.a).value = random_matrix(3, 5, rng);
        (store, layer)
    }

    #[test]
    fn merge_matches_adapter_forward() {
        let mut rng = Rng::seed_from_u64(3);
        let (store, layer) = trained_layer(&mut rng);
        let wm = layer.merged_weight(&store).unwrap();
        for _ in 0..20 {
            let x = random_matrix(1, 5, &mut rng);
            let merged = x.matmul(&wm.transpose().unwrap()).unwrap();
            assert!(merged.max_abs_diff(&eval(&layer, &store, &x)) < 1e-9);
        }
    }

    #[test]
    fn merge_guard_and_unmerge() {
        let mut rng = Rng::seed_from_u64(4);
        let (mut store, mut layer) = trained_layer(&mut rng);
        let original = store.get(layer.base).value.clone();
        let x = random_matrix(2, 5, &mut rng);
        let before = eval(&layer, &store, &x);
        layer.merge_into(&mut store).unwrap();
        assert_eq!(layer.merge_into(&mut store), Err(Error::AlreadyMerged));
        assert!(eval(&layer, &store, &x).max_abs_diff(&before) < 1e-9);
        layer.unmerge(&mut store);
        assert_eq!(store.get(layer.base).value, original);
        assert_eq!(eval(&layer, &store, &x), before);
    }

    #[test]
    fn eval_mode_ignores_dropout_seed() {
        let mut rng = Rng::seed_from_u64(5);
        let (store, layer) = trained_layer(&mut rng);
        let x = random_matrix(4, 5, &mut rng);
        let a = eval(&layer, &store, &x);
        let b = eval(&layer, &store, &x);
        assert_eq!(a, b);
    }

    #[test]
    fn dropout_only_in_training_mode() {
        let mut rng = Rng::seed_from_u64(6);
        let (store, mut layer) = trained_layer(&mut rng);
        layer.adapter.dropout = 0.05;
        let x = random_matrix(4, 5, &mut rng);
        let run = |seed| {
            let mut r = Rng::seed_from_u64(seed);
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let y = layer.forward(&mut tape, &store, xv, &mut Mode::Train(&mut r)).unwrap();
            tape.value(y).clone()
        };
        // p = 0.05 over 12 activations: some seed drops at least one unit.
        assert!((0..10).any(|s| run(s) != run(s + 100)));
        assert_eq!(run(7), run(7));
    }

    #[test]
    fn zero_dropout_is_linear() {
        let mut rng = Rng::seed_from_u64(7);
        let (mut store, layer) = trained_layer(&mut rng);
        let _ = &mut store;
        let x1 = random_matrix(1, 5, &mut rng);
        let x2 = random_matrix(1, 5, &mut rng);
        let sum = Tensor::new(
            vec![1, 5],
            x1.data().iter().zip(x2.data()).map(|(a, b)| 2.0 * a + b).collect(),
        )
        .unwrap();
        let lhs = eval(&layer, &store, &sum);
        let (y1, y2) = (eval(&layer, &store, &x1), eval(&layer, &store, &x2));
        let rhs: Vec<f64> = y1.data().iter().zip(y2.data()).map(|(a, b)| 2.0 * a + b).collect();
        assert!(lhs.data().iter().zip(&rhs).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    impl LoraConfig {
        fn default_rank(rank: usize) -> Self {
            Self {
                rank,
                dropout: 0.0,
                ..Self::default()
            }
        }
    }
}
