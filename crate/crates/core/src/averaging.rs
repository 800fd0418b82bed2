//! Outside-the-loop parameter averaging: uniform (MA), exponential (EMA)
//! and parameterized online averaging (POA).
//!
//! Iteration indices are global: `x_0` is the initial point and the first
//! iterate produced by training has `global_t = 1`.

use std::fmt;

use crate::error::{Error, Result};
use crate::params::ParamVector;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AveragerKind {
    /// Uniform average of the iterates with `global_t > start_iter`.
    Ma {
        start_iter: u64,
    },
    Ema {
        beta: f64,
    },
    /// `v ← ((t−α)/t)·v + (α/t)·x_t` for `t ≥ α`.
    Poa {
        alpha: f64,
    },
}

impl AveragerKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            AveragerKind::Ma { .. } => Ok(()),
            AveragerKind::Ema { beta } if beta > 0.0 && beta < 1.0 => Ok(()),
            AveragerKind::Ema { beta } => Err(Error::Domain(format!(
                "EMA beta must lie in (0, 1), got {beta}"
            ))),
            AveragerKind::Poa { alpha } if alpha >= 1.0 && alpha.is_finite() => Ok(()),
            AveragerKind::Poa { alpha } => Err(Error::Domain(format!(
                "POA alpha must be >= 1, got {alpha}"
            ))),
        }
    }
}

impl fmt::Display for AveragerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AveragerKind::Ma { start_iter } => write!(f, "MA({start_iter})"),
            AveragerKind::Ema { beta } => write!(f, "EMA({beta})"),
            AveragerKind::Poa { alpha } => write!(f, "POA({alpha})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AveragerState {
    pub kind: AveragerKind,
    pub value: ParamVector,
    /// Updates applied so far.
    pub t: u64,
}

impl AveragerState {
    /// Starts at `x0`, which EMA keeps as its initial value.
    pub fn new(kind: AveragerKind, x0: &ParamVector) -> Result<Self> {
        kind.validate()?;
        Ok(Self {
            kind,
            value: x0.clone(),
            t: 0,
        })
    }

    pub fn label(&self) -> String {
        self.kind.to_string()
    }

    /// Whether this averager has absorbed any iterate (EMA always has a value).
    pub fn is_active(&self) -> bool {
        matches!(self.kind, AveragerKind::Ema { .. }) || self.t > 0
    }

    pub fn update(&mut self, x: &ParamVector, global_t: u64) -> Result<()> {
        match self.kind {
            AveragerKind::Ma { .. } => ma_update(self, x, global_t),
            AveragerKind::Ema { .. } => ema_update(self, x),
            AveragerKind::Poa { .. } => poa_update(self, x, global_t),
        }
    }
}

/// `value ← a·value + b·x`, shared by MA and POA so that POA(1) and MA(0)
/// round identically.
fn blend(value: &mut ParamVector, x: &ParamVector, a: f64, b: f64) -> Result<()> {
    value.check_same_partition(x)?;
    for (v, xi) in value.as_mut_slice().iter_mut().zip(x.as_slice()) {
        *v = a * *v + b * xi;
    }
    Ok(())
}

/// No-op while `global_t <= start_iter`.
pub fn ma_update(state: &mut AveragerState, x: &ParamVector, global_t: u64) -> Result<()> {
    let AveragerKind::Ma { start_iter } = state.kind else {
        return Err(Error::Domain(format!("ma_update on {}", state.kind)));
    };
    if global_t <= start_iter {
        return Ok(());
    }
    state.t += 1;
    let t = state.t as f64;
    blend(&mut state.value, x, (t - 1.0) / t, 1.0 / t)
}

pub fn ema_update(state: &mut AveragerState, x: &ParamVector) -> Result<()> {
    let AveragerKind::Ema { beta } = state.kind else {
        return Err(Error::Domain(format!("ema_update on {}", state.kind)));
    };
    state.value.check_same_partition(x)?;
    state.t += 1;
    for (v, xi) in state.value.as_mut_slice().iter_mut().zip(x.as_slice()) {
        *v = beta * *v + (1.0 - beta) * xi;
    }
    Ok(())
}

/// No-op while `global_t < alpha`.
pub fn poa_update(state: &mut AveragerState, x: &ParamVector, global_t: u64) -> Result<()> {
    let AveragerKind::Poa { alpha } = state.kind else {
        return Err(Error::Domain(format!("poa_update on {}", state.kind)));
    };
    let t = global_t as f64;
    if t < alpha {
        return Ok(());
    }
    state.t += 1;
    blend(&mut state.value, x, (t - alpha) / t, alpha / t)
}

/// Many averagers fed from one training run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AveragerBank {
    pub trackers: Vec<AveragerState>,
}

impl AveragerBank {
    pub fn new(kinds: &[AveragerKind], x0: &ParamVector) -> Result<Self> {
        let trackers = kinds
            .iter()
            .map(|k| AveragerState::new(*k, x0))
            .collect::<Result<_>>()?;
        Ok(Self { trackers })
    }

    pub fn len(&self) -> usize {
        self.trackers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trackers.is_empty()
    }

    pub fn labels(&self) -> Vec<String> {
        self.trackers.iter().map(AveragerState::label).collect()
    }

    pub fn get(&self, label: &str) -> Option<&AveragerState> {
        self.trackers.iter().find(|s| s.label() == label)
    }
}

pub fn bank_update(bank: &mut AveragerBank, x: &ParamVector, global_t: u64) -> Result<()> {
    for s in &mut bank.trackers {
        s.update(x, global_t)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::sgd_step;
    use crate::games::{BilinearGame, Game};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn scalar(v: f64) -> ParamVector {
        ParamVector::new(vec![v], 1).unwrap()
    }

    fn feed(kind: AveragerKind, x0: f64, stream: &[f64]) -> AveragerState {
        let mut s = AveragerState::new(kind, &scalar(x0)).unwrap();
        for (i, v) in stream.iter().enumerate() {
            s.update(&scalar(*v), i as u64 + 1).unwrap();
        }
        s
    }

    #[test]
    fn ma_examples() {
        let s = feed(AveragerKind::Ma { start_iter: 0 }, 0.0, &[1.0, 2.0, 3.0]);
        assert_eq!(s.value.as_slice(), &[2.0]);
        assert_eq!(s.t, 3);
        let c = feed(AveragerKind::Ma { start_iter: 0 }, 9.0, &[0.3; 17]);
        assert!((c.value.as_slice()[0] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn ma_start_gating() {
        let s = feed(
            AveragerKind::Ma { start_iter: 2 },
            0.0,
            &[5.0, 7.0, 1.0, 3.0],
        );
        assert_eq!(s.value.as_slice(), &[2.0]);
        assert_eq!(s.t, 2);
        let idle = feed(AveragerKind::Ma { start_iter: 10 }, 4.0, &[1.0, 2.0]);
        assert!(!idle.is_active());
    }

    #[test]
    fn ema_examples() {
        let mut s = AveragerState::new(AveragerKind::Ema { beta: 0.9 }, &scalar(0.0)).unwrap();
        ema_update(&mut s, &scalar(1.0)).unwrap();
        assert!((s.value.as_slice()[0] - 0.1).abs() < 1e-16);

        let c = feed(AveragerKind::Ema { beta: 0.99 }, 2.5, &[2.5; 50]);
        assert_eq!(c.value.as_slice(), &[2.5]);
    }

    #[test]
    fn ema_two_cycle() {
        // fixed points of v ← ½v + ½x over one period: a = ½b + ½, b = ½a
        let stream: Vec<f64> = (0..20)
            .map(|i| if i % 2 == 0 { 1.0 } else { 0.0 })
            .collect();
        let mut s = AveragerState::new(AveragerKind::Ema { beta: 0.5 }, &scalar(1.0)).unwrap();
        let mut values = Vec::new();
        for (i, x) in stream.iter().enumerate() {
            s.update(&scalar(*x), i as u64 + 1).unwrap();
            values.push(s.value.as_slice()[0]);
        }
        // step 19 saw a 1, step 20 a 0
        assert!((values[18] - 2.0 / 3.0).abs() < 1e-5);
        assert!((values[19] - 1.0 / 3.0).abs() < 1e-5);
    }

    #[test]
    fn poa_examples() {
        let p = feed(AveragerKind::Poa { alpha: 1.0 }, 0.0, &[1.0, 2.0, 3.0]);
        assert_eq!(p.value.as_slice(), &[2.0]);
        let mut s = AveragerState::new(AveragerKind::Poa { alpha: 4.0 }, &scalar(0.0)).unwrap();
        for t in 1..4 {
            poa_update(&mut s, &scalar(100.0), t).unwrap();
        }
        assert_eq!(s.t, 0);
        poa_update(&mut s, &scalar(7.5), 4).unwrap();
        assert_eq!(s.value.as_slice(), &[7.5]);
    }

    #[test]
    fn poa_alpha_one_is_bitwise_ma() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let x0 = ParamVector::new((0..6).map(|_| rng.random()).collect(), 3).unwrap();
        let mut ma = AveragerState::new(AveragerKind::Ma { start_iter: 0 }, &x0).unwrap();
        let mut poa = AveragerState::new(AveragerKind::Poa { alpha: 1.0 }, &x0).unwrap();
        for t in 1..=500 {
            let x =
                ParamVector::new((0..6).map(|_| rng.random_range(-3.0..3.0)).collect(), 3).unwrap();
            ma.update(&x, t).unwrap();
            poa.update(&x, t).unwrap();
            let a: Vec<u64> = ma.value.as_slice().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = poa.value.as_slice().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn invalid_kinds_are_rejected() {
        let x0 = scalar(0.0);
        for kind in [
            AveragerKind::Ema { beta: 1.0 },
            AveragerKind::Ema { beta: 0.0 },
            AveragerKind::Poa { alpha: 0.5 },
        ] {
            assert!(AveragerState::new(kind, &x0).is_err());
        }
        let mut s = AveragerState::new(AveragerKind::Ema { beta: 0.5 }, &x0).unwrap();
        assert!(ema_update(&mut s, &ParamVector::zeros(1, 1)).is_err());
        assert!(ma_update(&mut s, &x0, 1).is_err());
    }

    fn sim_gd(eta: f64, steps: usize, x0: ParamVector) -> Vec<ParamVector> {
        let game = BilinearGame::default();
        let mut out = Vec::with_capacity(steps);
        let mut x = x0;
        for _ in 0..steps {
            let v = game.vector_field(&x, None).unwrap();
            x = sgd_step(&x, &v, eta).unwrap();
            out.push(x.clone());
        }
        out
    }

    #[test]
    fn ma_of_diverging_rotation_decays() {
        let x0 = ParamVector::new(vec![1.0, 0.0], 1).unwrap();
        let iterates = sim_gd(0.02, 1000, x0.clone());
        let mut s = AveragerState::new(AveragerKind::Ma { start_iter: 0 }, &x0).unwrap();
        let mut at100 = 0.0;
        for (i, x) in iterates.iter().enumerate() {
            s.update(x, i as u64 + 1).unwrap();
            if i + 1 == 100 {
                at100 = s.value.norm2();
            }
        }
        assert!(
            s.value.norm2() <= at100 / 5.0,
            "{} vs {}",
            s.value.norm2(),
            at100
        );
    }

    #[test]
    fn poa_beats_raw_iterate_on_sim_gd() {
        for seed in 0..5 {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let x0 = ParamVector::new(
                vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
                1,
            )
            .unwrap();
            let iterates = sim_gd(0.05, 1000, x0.clone());
            let mut s = AveragerState::new(AveragerKind::Poa { alpha: 10.0 }, &x0).unwrap();
            for (i, x) in iterates.iter().enumerate() {
                s.update(x, i as u64 + 1).unwrap();
            }
            assert!(s.value.norm2() < iterates.last().unwrap().norm2());
        }
    }

    #[test]
    fn bank_examples() {
        let kinds = [
            AveragerKind::Ema { beta: 0.9 },
            AveragerKind::Ema { beta: 0.99 },
        ];
        let mut bank = AveragerBank::new(&kinds, &scalar(4.0)).unwrap();
        for t in 1..=30 {
            bank_update(&mut bank, &scalar(4.0), t).unwrap();
        }
        assert!(bank.trackers.iter().all(|s| s.value.as_slice() == [4.0]));
        assert_eq!(bank.labels(), vec!["EMA(0.9)", "EMA(0.99)"]);

        let mut bank =
            AveragerBank::new(&[AveragerKind::Ma { start_iter: 2 }], &scalar(0.0)).unwrap();
        for (i, v) in [5.0, 7.0, 1.0, 3.0].iter().enumerate() {
            bank_update(&mut bank, &scalar(*v), i as u64 + 1).unwrap();
        }
        assert_eq!(bank.get("MA(2)").unwrap().value.as_slice(), &[2.0]);
    }

    proptest! {
        #[test]
        fn ema_contracts_toward_input(v in -1e3f64..1e3, x in -1e3f64..1e3, beta in 0.01f64..0.99) {
            let mut s = AveragerState::new(AveragerKind::Ema { beta }, &scalar(v)).unwrap();
            ema_update(&mut s, &scalar(x)).unwrap();
            let lhs = (s.value.as_slice()[0] - x).abs();
            let rhs = beta * (v - x).abs();
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + v.abs() + x.abs()));
        }

        #[test]
        fn ema_stays_in_box(stream in proptest::collection::vec(-2.0f64..5.0, 1..200), beta in 0.01f64..0.999) {
            let s = feed(AveragerKind::Ema { beta }, stream[0], &stream);
            let lo = stream.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = stream.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let v = s.value.as_slice()[0];
            prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }

        #[test]
        fn ma_is_the_mean(stream in proptest::collection::vec(-1e3f64..1e3, 1..500)) {
            let s = feed(AveragerKind::Ma { start_iter: 0 }, 0.0, &stream);
            let mean = stream.iter().sum::<f64>() / stream.len() as f64;
            let scale = stream.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-300);
            prop_assert!((s.value.as_slice()[0] - mean).abs() <= 1e-10 * scale);
        }
    }
}
