//! One-step training operators `x_t = F(x_{t-1})` and the continuous flow
//! of the bilinear game.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Slots};
use crate::error::{Error, Result};
use crate::games::{Batch, BilinearGame, Game, MogGanGame};
use crate::params::{ParamVector, Player};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OptimizerKind {
    Sgd,
    Adam,
    OptimisticAdam,
    RmsProp,
}

/// Per-player optimizer state.
///
/// For RMSProp, `beta2` is the accumulator decay and `eps` is added inside
/// the square root; for the Adam variants `eps` is added outside it.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    prev_dir: Vec<f64>,
    t: u64,
}

impl OptimizerState {
    fn with(kind: OptimizerKind, lr: f64, beta1: f64, beta2: f64, eps: f64, n: usize) -> Self {
        let moments = !matches!(kind, OptimizerKind::Sgd);
        Self {
            kind,
            lr,
            beta1,
            beta2,
            eps,
            m: if moments { vec![0.0; n] } else { Vec::new() },
            v: if moments { vec![0.0; n] } else { Vec::new() },
            prev_dir: if kind == OptimizerKind::OptimisticAdam {
                vec![0.0; n]
            } else {
                Vec::new()
            },
            t: 0,
        }
    }

    pub fn sgd(lr: f64, n: usize) -> Self {
        Self::with(OptimizerKind::Sgd, lr, 0.0, 0.0, 0.0, n)
    }

    pub fn adam(lr: f64, beta1: f64, beta2: f64, eps: f64, n: usize) -> Self {
        Self::with(OptimizerKind::Adam, lr, beta1, beta2, eps, n)
    }

    pub fn optimistic_adam(lr: f64, beta1: f64, beta2: f64, eps: f64, n: usize) -> Self {
        Self::with(OptimizerKind::OptimisticAdam, lr, beta1, beta2, eps, n)
    }

    pub fn rmsprop(lr: f64, rho: f64, eps: f64, n: usize) -> Self {
        Self::with(OptimizerKind::RmsProp, lr, 0.0, rho, eps, n)
    }

    /// Number of steps taken so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.v
    }

    /// Consumes one gradient and returns the update to add to the parameters.
    pub fn step(&mut self, g: &[f64]) -> Vec<f64> {
        match self.kind {
            OptimizerKind::Sgd => {
                self.t += 1;
                g.iter().map(|gi| -self.lr * gi).collect()
            }
            OptimizerKind::Adam => {
                let d = self.normalized_direction(g);
                d.into_iter().map(|di| -self.lr * di).collect()
            }
            OptimizerKind::OptimisticAdam => {
                let d = self.normalized_direction(g);
                let update = d
                    .iter()
                    .zip(&self.prev_dir)
                    .map(|(cur, prev)| -self.lr * (2.0 * cur - prev))
                    .collect();
                self.prev_dir = d;
                update
            }
            OptimizerKind::RmsProp => {
                self.t += 1;
                let (rho, eps, lr) = (self.beta2, self.eps, self.lr);
                self.v
                    .iter_mut()
                    .zip(g)
                    .map(|(v, gi)| {
                        *v = rho * *v + (1.0 - rho) * gi * gi;
                        -lr * gi / (*v + eps).sqrt()
                    })
                    .collect()
            }
        }
    }

    /// Bias-corrected `m̂ / (√v̂ + ε)`; advances the moments and the counter.
    fn normalized_direction(&mut self, g: &[f64]) -> Vec<f64> {
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        self.m
            .iter_mut()
            .zip(self.v.iter_mut())
            .zip(g)
            .map(|((m, v), gi)| {
                *m = b1 * *m + (1.0 - b1) * gi;
                *v = b2 * *v + (1.0 - b2) * gi * gi;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                m_hat / (v_hat.sqrt() + eps)
            })
            .collect()
    }
}

fn expect_kind(state: &OptimizerState, kind: OptimizerKind) -> Result<()> {
    if state.kind != kind {
        return Err(Error::Domain(format!(
            "optimizer is {:?}, expected {kind:?}",
            state.kind
        )));
    }
    Ok(())
}

/// Bias-corrected Adam update `−η·m̂/(√v̂ + ε)`.
pub fn adam_step(g: &[f64], state: &mut OptimizerState) -> Result<Vec<f64>> {
    expect_kind(state, OptimizerKind::Adam)?;
    Ok(state.step(g))
}

/// `−η·(2·d_t − d_{t−1})` with `d_t` the Adam direction and `d_{−1} = 0`.
pub fn optimistic_adam_step(g: &[f64], state: &mut OptimizerState) -> Result<Vec<f64>> {
    expect_kind(state, OptimizerKind::OptimisticAdam)?;
    Ok(state.step(g))
}

pub fn rmsprop_step(g: &[f64], state: &mut OptimizerState) -> Result<Vec<f64>> {
    expect_kind(state, OptimizerKind::RmsProp)?;
    Ok(state.step(g))
}

/// `F_η(x) = x − η·V(x)`.
pub fn sgd_step(x: &ParamVector, field: &ParamVector, eta: f64) -> Result<ParamVector> {
    if !(eta > 0.0) {
        return Err(Error::Domain(format!(
            "learning rate must be > 0, got {eta}"
        )));
    }
    ParamVector::lincomb(1.0, x, -eta, field)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateMode {
    Simultaneous,
    Alternating,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepPlan {
    pub mode: UpdateMode,
    /// Discriminator updates per generator update (alternating mode).
    pub n_dis: usize,
    /// Weight of `∇(½‖V‖²)` added to the field; 0 disables consensus.
    pub consensus_gamma: f64,
}

impl Default for StepPlan {
    fn default() -> Self {
        Self {
            mode: UpdateMode::Alternating,
            n_dis: 1,
            consensus_gamma: 0.0,
        }
    }
}

impl StepPlan {
    pub fn validate(&self) -> Result<()> {
        if self.n_dis == 0 {
            return Err(Error::Config("n_dis must be >= 1".into()));
        }
        if !(self.consensus_gamma >= 0.0) {
            return Err(Error::Config("consensus_gamma must be >= 0".into()));
        }
        Ok(())
    }
}

/// Supplies a batch per gradient evaluation.
pub trait BatchSource {
    fn next_batch(&mut self) -> Option<Batch>;
}

/// For deterministic games.
pub struct NoBatches;

impl BatchSource for NoBatches {
    fn next_batch(&mut self) -> Option<Batch> {
        None
    }
}

/// Repeats one batch forever, which turns a stochastic operator into a
/// deterministic map of `x`.
pub struct FrozenBatch(pub Batch);

impl BatchSource for FrozenBatch {
    fn next_batch(&mut self) -> Option<Batch> {
        Some(self.0.clone())
    }
}

/// Fresh mixture batches from three independent streams.
pub struct MixtureBatches<'a> {
    pub game: &'a MogGanGame,
    pub data: ChaCha8Rng,
    pub prior: ChaCha8Rng,
    pub interp: ChaCha8Rng,
}

impl BatchSource for MixtureBatches<'_> {
    fn next_batch(&mut self) -> Option<Batch> {
        Some(
            self.game
                .sample_batch(&mut self.data, &mut self.prior, &mut self.interp),
        )
    }
}

/// `V(x) + γ·∇_x(½‖V(x)‖²)`, differentiating through `V` with the autodiff tape.
pub fn consensus_gradient<G: Game + ?Sized>(
    game: &G,
    x: &ParamVector,
    batch: Option<&Batch>,
    gamma: f64,
) -> Result<ParamVector> {
    if !(gamma >= 0.0) {
        return Err(Error::Domain(format!(
            "consensus gamma must be >= 0, got {gamma}"
        )));
    }
    game.check(x, batch)?;
    let mut g = Graph::new();
    let slots = Slots {
        theta: g.row(x.theta()),
        phi: g.row(x.phi()),
        data: None,
    };
    let (l_theta, l_phi) = game.build_losses(&mut g, slots, batch)?;
    let v_theta = g.grad(l_theta, &[slots.theta])?.remove(0);
    let v_phi = g.grad(l_phi, &[slots.phi])?.remove(0);
    let field = ParamVector::join(
        &crate::autodiff::flatten(g.value(v_theta)),
        &crate::autodiff::flatten(g.value(v_phi)),
    );
    if gamma == 0.0 {
        return Ok(field);
    }
    let nt = g.squared_norm(v_theta);
    let np = g.squared_norm(v_phi);
    let total = g.add(nt, np);
    let half = g.scale(total, 0.5);
    let reg = g.grad_values(half, &[slots.theta, slots.phi])?;
    let reg = ParamVector::join(&reg[0], &reg[1]);
    ParamVector::lincomb(1.0, &field, gamma, &reg)
}

/// One block of the (possibly consensus-regularised) field.
fn player_field<G: Game + ?Sized>(
    game: &G,
    x: &ParamVector,
    batch: Option<&Batch>,
    player: Player,
    gamma: f64,
) -> Result<Vec<f64>> {
    if gamma > 0.0 {
        Ok(consensus_gradient(game, x, batch, gamma)?
            .block(player)
            .to_vec())
    } else {
        game.player_gradient(x, batch, player)
    }
}

fn apply(block: &mut [f64], update: &[f64]) {
    for (p, u) in block.iter_mut().zip(update) {
        *p += u;
    }
}

/// `n_dis` discriminator updates (a fresh batch each), then one generator
/// update against the updated discriminator.
pub fn alternating_step<G: Game + ?Sized, B: BatchSource + ?Sized>(
    x: &ParamVector,
    game: &G,
    batches: &mut B,
    plan: &StepPlan,
    opt_d: &mut OptimizerState,
    opt_g: &mut OptimizerState,
) -> Result<ParamVector> {
    plan.validate()?;
    let mut next = x.clone();
    for _ in 0..plan.n_dis {
        let batch = batches.next_batch();
        let g = player_field(
            game,
            &next,
            batch.as_ref(),
            Player::Phi,
            plan.consensus_gamma,
        )?;
        let update = opt_d.step(&g);
        apply(next.phi_mut(), &update);
    }
    let batch = batches.next_batch();
    let g = player_field(
        game,
        &next,
        batch.as_ref(),
        Player::Theta,
        plan.consensus_gamma,
    )?;
    let update = opt_g.step(&g);
    apply(next.theta_mut(), &update);
    Ok(next)
}

/// Both players step from the same iterate with one shared batch.
pub fn simultaneous_step<G: Game + ?Sized, B: BatchSource + ?Sized>(
    x: &ParamVector,
    game: &G,
    batches: &mut B,
    plan: &StepPlan,
    opt_d: &mut OptimizerState,
    opt_g: &mut OptimizerState,
) -> Result<ParamVector> {
    plan.validate()?;
    let batch = batches.next_batch();
    let field = if plan.consensus_gamma > 0.0 {
        consensus_gradient(game, x, batch.as_ref(), plan.consensus_gamma)?
    } else {
        game.vector_field(x, batch.as_ref())?
    };
    let mut next = x.clone();
    let ud = opt_d.step(field.phi());
    let ug = opt_g.step(field.theta());
    apply(next.phi_mut(), &ud);
    apply(next.theta_mut(), &ug);
    Ok(next)
}

/// Dispatches on `plan.mode`.
pub fn train_step<G: Game + ?Sized, B: BatchSource + ?Sized>(
    x: &ParamVector,
    game: &G,
    batches: &mut B,
    plan: &StepPlan,
    opt_d: &mut OptimizerState,
    opt_g: &mut OptimizerState,
) -> Result<ParamVector> {
    match plan.mode {
        UpdateMode::Alternating => alternating_step(x, game, batches, plan, opt_d, opt_g),
        UpdateMode::Simultaneous => simultaneous_step(x, game, batches, plan, opt_d, opt_g),
    }
}

/// Time-stamped iterates of the continuous flow.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<ParamVector>,
}

fn flow_steps(t_end: f64, h: f64) -> Result<(usize, f64)> {
    if !(h > 0.0) || !(t_end >= h) || !t_end.is_finite() {
        return Err(Error::Domain(format!(
            "flow needs h > 0 and T >= h, got h={h}, T={t_end}"
        )));
    }
    // Round to a whole number of steps so the last sample lands exactly on T.
    let n = (t_end / h).round().max(1.0) as usize;
    Ok((n, t_end / n as f64))
}

/// Classical RK4 on `ẋ = −V(x)`, calling `visit(step, t, x)` for the initial
/// state and after every step. Returns the final state.
pub fn flow_rk4_visit<F>(
    game: &BilinearGame,
    x0: &ParamVector,
    t_end: f64,
    h: f64,
    mut visit: F,
) -> Result<ParamVector>
where
    F: FnMut(usize, f64, &[f64]),
{
    game.check(x0, None)?;
    let (n, h) = flow_steps(t_end, h)?;
    let dim = x0.len();
    let mut x = x0.as_slice().to_vec();
    let (mut k1, mut k2, mut k3, mut k4) = (
        vec![0.0; dim],
        vec![0.0; dim],
        vec![0.0; dim],
        vec![0.0; dim],
    );
    let mut tmp = vec![0.0; dim];
    // ẋ = −V(x)
    let rhs = |x: &[f64], out: &mut [f64]| {
        game.field_into(x, out);
        out.iter_mut().for_each(|v| *v = -*v);
    };
    visit(0, 0.0, &x);
    for step in 1..=n {
        rhs(&x, &mut k1);
        for i in 0..dim {
            tmp[i] = x[i] + 0.5 * h * k1[i];
        }
        rhs(&tmp, &mut k2);
        for i in 0..dim {
            tmp[i] = x[i] + 0.5 * h * k2[i];
        }
        rhs(&tmp, &mut k3);
        for i in 0..dim {
            tmp[i] = x[i] + h * k3[i];
        }
        rhs(&tmp, &mut k4);
        for i in 0..dim {
            x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        visit(step, step as f64 * h, &x);
    }
    x0.with_data(x)
}

/// RK4 trajectory sampled at every step (including `t = 0`).
pub fn flow_rk4(game: &BilinearGame, x0: &ParamVector, t_end: f64, h: f64) -> Result<Trajectory> {
    let mut times = Vec::new();
    let mut states = Vec::new();
    flow_rk4_visit(game, x0, t_end, h, |_, t, x| {
        times.push(t);
        states.push(ParamVector::new(x.to_vec(), x0.p()).expect("partition preserved"));
    })?;
    Ok(Trajectory { times, states })
}

/// `H = ½‖x‖²`, conserved by the bilinear flow.
pub fn energy(x: &[f64]) -> f64 {
    0.5 * x.iter().map(|v| v * v).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::games::{MixtureSpec, Penalty};
    use rand::{Rng, SeedableRng};

    fn pv(v: &[f64], p: usize) -> ParamVector {
        ParamVector::new(v.to_vec(), p).unwrap()
    }

    #[test]
    fn sgd_step_examples() {
        let game = BilinearGame::default();
        let x = pv(&[1.0, 0.0], 1);
        let v = game.vector_field(&x, None).unwrap();
        let next = sgd_step(&x, &v, 0.1).unwrap();
        assert_eq!(next.as_slice(), &[1.0, 0.1]);

        let zero = ParamVector::zeros(1, 1);
        assert_eq!(sgd_step(&x, &zero, 0.1).unwrap(), x);
        assert!(sgd_step(&x, &zero, 0.0).is_err());
    }

    #[test]
    fn simultaneous_gd_grows_norm() {
        let game = BilinearGame::default();
        let eta = 0.1;
        let mut x = pv(&[0.6, -0.8], 1);
        for _ in 0..20 {
            let v = game.vector_field(&x, None).unwrap();
            let next = sgd_step(&x, &v, eta).unwrap();
            let ratio = next.norm2().powi(2) / x.norm2().powi(2);
            assert!((ratio - (1.0 + eta * eta)).abs() < 1e-14);
            x = next;
        }
    }

    #[test]
    fn alternating_sgd_on_bilinear_matches_definition() {
        let game = BilinearGame::default();
        let eta = 0.3;
        let x = pv(&[0.7, -0.2], 1);
        let mut od = OptimizerState::sgd(eta, 1);
        let mut og = OptimizerState::sgd(eta, 1);
        let plan = StepPlan::default();
        let next = alternating_step(&x, &game, &mut NoBatches, &plan, &mut od, &mut og).unwrap();
        // φ update at (θ_t, φ_t): φ' = φ − η·(−θ)
        let phi1 = -0.2 + eta * 0.7;
        // θ update at (θ_t, φ_{t+1}): θ' = θ − η·φ'
        let theta1 = 0.7 - eta * phi1;
        assert!((next.phi()[0] - phi1).abs() < 1e-15);
        assert!((next.theta()[0] - theta1).abs() < 1e-15);
        assert_eq!((od.steps(), og.steps()), (1, 1));
    }

    struct ZeroGame;
    impl Game for ZeroGame {
        fn partition(&self) -> (usize, usize) {
            (2, 1)
        }
        fn needs_batch(&self) -> bool {
            false
        }
        fn vector_field(&self, x: &ParamVector, _: Option<&Batch>) -> Result<ParamVector> {
            Ok(ParamVector::zeros(x.p(), x.q()))
        }
        fn build_losses(
            &self,
            g: &mut Graph,
            slots: Slots,
            _: Option<&Batch>,
        ) -> Result<(crate::autodiff::Var, crate::autodiff::Var)> {
            let a = g.scale(slots.theta, 0.0);
            let a = g.sum(a);
            Ok((a, a))
        }
    }

    #[test]
    fn zero_field_leaves_parameters_but_advances_counters() {
        let x = pv(&[1.0, 2.0, 3.0], 2);
        let mut od = OptimizerState::adam(0.1, 0.0, 0.9, 1e-8, 1);
        let mut og = OptimizerState::adam(0.1, 0.0, 0.9, 1e-8, 2);
        let plan = StepPlan {
            n_dis: 3,
            ..StepPlan::default()
        };
        let next =
            alternating_step(&x, &ZeroGame, &mut NoBatches, &plan, &mut od, &mut og).unwrap();
        assert_eq!(next, x);
        assert_eq!((od.steps(), og.steps()), (3, 1));
    }

    #[test]
    fn adam_first_step_is_sign_like() {
        let mut s = OptimizerState::adam(0.01, 0.0, 0.9, 1e-8, 1);
        let u = adam_step(&[4.0], &mut s).unwrap();
        assert!((u[0] - (-0.01 * 4.0 / (4.0 + 1e-8))).abs() < 1e-18);
        assert!((u[0] + 0.01).abs() < 1e-10);
    }

    #[test]
    fn adam_zero_gradient_stream() {
        let mut s = OptimizerState::adam(0.01, 0.0, 0.9, 1e-8, 3);
        for _ in 0..10 {
            assert_eq!(adam_step(&[0.0; 3], &mut s).unwrap(), vec![0.0; 3]);
        }
    }

    #[test]
    fn adam_update_bound_when_beta1_is_zero() {
        let lr = 2e-4;
        let beta2: f64 = 0.9;
        let mut s = OptimizerState::adam(lr, 0.0, beta2, 1e-8, 8);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut worst: f64 = 0.0;
        for t in 1..=100 {
            let g: Vec<f64> = (0..8).map(|_| rng.random_range(-5.0..5.0)).collect();
            let u = adam_step(&g, &mut s).unwrap();
            assert!(s.second_moment().iter().all(|v| *v >= 0.0));
            // |ĝ_t|/√v̂_t ≤ √((1−β₂ᵗ)/(1−β₂)), which is 1 only at t = 1
            let bound = ((1.0 - beta2.powi(t)) / (1.0 - beta2)).sqrt();
            for ui in &u {
                assert!(ui.abs() <= lr * bound * (1.0 + 1e-6));
                if t == 1 {
                    assert!(ui.abs() <= lr * (1.0 + 1e-6));
                }
                worst = worst.max(ui.abs() / lr);
            }
        }
        assert!(worst > 1.0, "unit bound holds on this stream: {worst}");
    }

    #[test]
    fn wrong_kind_is_rejected() {
        let mut s = OptimizerState::sgd(0.1, 1);
        assert!(adam_step(&[1.0], &mut s).is_err());
        assert!(optimistic_adam_step(&[1.0], &mut s).is_err());
    }

    #[test]
    fn optimistic_first_step_doubles_direction() {
        let mut omd = OptimizerState::optimistic_adam(0.1, 0.0, 0.9, 1e-8, 1);
        let mut adam = OptimizerState::adam(0.1, 0.0, 0.9, 1e-8, 1);
        let u = optimistic_adam_step(&[3.0], &mut omd).unwrap();
        let a = adam_step(&[3.0], &mut adam).unwrap();
        assert!((u[0] - 2.0 * a[0]).abs() < 1e-15);
    }

    #[test]
    fn optimistic_constant_stream_converges_to_adam_direction() {
        let mut omd = OptimizerState::optimistic_adam(0.1, 0.5, 0.9, 1e-8, 2);
        let mut last = vec![];
        for _ in 0..400 {
            last = optimistic_adam_step(&[2.0, -0.5], &mut omd).unwrap();
        }
        // d = m̂/(√v̂+ε) → sign(g) for a constant stream
        assert!(
            (last[0] + 0.1).abs() < 1e-6 && (last[1] - 0.1).abs() < 1e-6,
            "{last:?}"
        );
    }

    #[test]
    fn optimistic_adam_stays_bounded_where_simultaneous_gd_diverges() {
        let game = BilinearGame::default();
        let eta = 0.1;
        let x0 = pv(&[1.0, 0.0], 1);
        let plan = StepPlan {
            mode: UpdateMode::Simultaneous,
            ..StepPlan::default()
        };
        let mut od = OptimizerState::optimistic_adam(eta, 0.0, 0.9, 1e-8, 1);
        let mut og = OptimizerState::optimistic_adam(eta, 0.0, 0.9, 1e-8, 1);
        let mut x = x0.clone();
        let mut max_norm: f64 = 0.0;
        for _ in 0..500 {
            x = simultaneous_step(&x, &game, &mut NoBatches, &plan, &mut od, &mut og).unwrap();
            max_norm = max_norm.max(x.norm2());
        }
        let mut y = x0.clone();
        for _ in 0..500 {
            let v = game.vector_field(&y, None).unwrap();
            y = sgd_step(&y, &v, eta).unwrap();
        }
        let gd_growth = (1.0 + eta * eta).powf(250.0);
        assert!((y.norm2() - gd_growth).abs() / gd_growth < 1e-10);
        assert!(
            max_norm < 2.0,
            "optimistic trajectory norm reached {max_norm}"
        );
        assert!(x.norm2() < gd_growth / 10.0);
    }

    #[test]
    fn consensus_on_bilinear() {
        let game = BilinearGame::default();
        let x = pv(&[1.0, 2.0], 1);
        let c = consensus_gradient(&game, &x, None, 1.0).unwrap();
        assert!((c.as_slice()[0] - 3.0).abs() < 1e-14 && (c.as_slice()[1] - 1.0).abs() < 1e-14);
        let plain = consensus_gradient(&game, &x, None, 0.0).unwrap();
        assert_eq!(plain, game.vector_field(&x, None).unwrap());
        assert!(consensus_gradient(&game, &x, None, -1.0).is_err());
    }

    #[test]
    fn consensus_matches_finite_differences_on_mog() {
        let game = MogGanGame::new(5, 2, 3, Penalty::None, 4, MixtureSpec::default());
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut x = game.init(&mut r);
        // zero biases put pre-activations exactly on ReLU kinks
        for v in x.as_mut_slice() {
            *v += r.random_range(-0.1..0.1);
        }
        let mut src = MixtureBatches {
            game: &game,
            data: rand_chacha::ChaCha8Rng::seed_from_u64(4),
            prior: rand_chacha::ChaCha8Rng::seed_from_u64(5),
            interp: rand_chacha::ChaCha8Rng::seed_from_u64(6),
        };
        let batch = src.next_batch().unwrap();
        let gamma = 1.0;
        let c = consensus_gradient(&game, &x, Some(&batch), gamma).unwrap();
        let v = game.vector_field(&x, Some(&batch)).unwrap();
        let reg = ParamVector::lincomb(1.0 / gamma, &c, -1.0 / gamma, &v).unwrap();
        let fd = crate::autodiff::finite_diff_grad(
            |y| 0.5 * game.vector_field(y, Some(&batch)).unwrap().norm2().powi(2),
            &x,
            1e-5,
        );
        let num: f64 = reg
            .as_slice()
            .iter()
            .zip(&fd)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let den: f64 = fd.iter().map(|b| b * b).sum::<f64>().sqrt();
        assert!(num / den <= 1e-3, "relative error {}", num / den);
    }

    #[test]
    fn alternating_inner_updates_move_only_the_discriminator() {
        let game = MogGanGame::new(6, 2, 3, Penalty::WganGp(1.0), 8, MixtureSpec::default());
        let x = game.init(&mut rand_chacha::ChaCha8Rng::seed_from_u64(10));
        let plan = StepPlan {
            n_dis: 5,
            ..StepPlan::default()
        };
        let (p, q) = game.partition();
        let mut src = MixtureBatches {
            game: &game,
            data: rand_chacha::ChaCha8Rng::seed_from_u64(11),
            prior: rand_chacha::ChaCha8Rng::seed_from_u64(12),
            interp: rand_chacha::ChaCha8Rng::seed_from_u64(13),
        };
        // Replay the inner loop by hand to trace the discriminator.
        let mut od = OptimizerState::adam(1e-2, 0.0, 0.9, 1e-8, q);
        let mut trace = vec![x.clone()];
        let mut cur = x.clone();
        for _ in 0..5 {
            let b = src.next_batch().unwrap();
            let g = game.player_gradient(&cur, Some(&b), Player::Phi).unwrap();
            let u = od.step(&g);
            apply(cur.phi_mut(), &u);
            trace.push(cur.clone());
        }
        for w in trace.windows(2) {
            assert_eq!(w[0].theta(), w[1].theta());
            assert_ne!(w[0].phi(), w[1].phi());
        }

        let mut src = MixtureBatches {
            game: &game,
            data: rand_chacha::ChaCha8Rng::seed_from_u64(11),
            prior: rand_chacha::ChaCha8Rng::seed_from_u64(12),
            interp: rand_chacha::ChaCha8Rng::seed_from_u64(13),
        };
        let mut od = OptimizerState::adam(1e-2, 0.0, 0.9, 1e-8, q);
        let mut og = OptimizerState::adam(1e-2, 0.0, 0.9, 1e-8, p);
        let next = alternating_step(&x, &game, &mut src, &plan, &mut od, &mut og).unwrap();
        assert_eq!(next.phi(), trace[5].phi());
        assert_ne!(next.theta(), x.theta());
    }

    #[test]
    fn flow_returns_after_one_period() {
        let game = BilinearGame::default();
        let x0 = pv(&[1.0, 0.0], 1);
        let traj = flow_rk4(&game, &x0, 2.0 * std::f64::consts::PI, 1e-3).unwrap();
        let last = traj.states.last().unwrap();
        assert!((last.as_slice()[0] - 1.0).abs() < 1e-8);
        assert!(last.as_slice()[1].abs() < 1e-8);
        assert_eq!(traj.times.len(), traj.states.len());
        // quarter period: (cos t, sin t)
        let quarter = traj.states.len() / 4;
        let t = traj.times[quarter];
        assert!((traj.states[quarter].as_slice()[1] - t.sin()).abs() < 1e-10);
    }

    #[test]
    fn flow_at_origin_stays() {
        let game = BilinearGame::default();
        let traj = flow_rk4(&game, &ParamVector::zeros(1, 1), 5.0, 1e-2).unwrap();
        assert!(traj.states.iter().all(|s| s.as_slice() == [0.0, 0.0]));
    }

    #[test]
    fn flow_conserves_energy() {
        let game = BilinearGame::default();
        let x0 = pv(&[1.0, 0.0], 1);
        let h0 = energy(x0.as_slice());
        let last = flow_rk4_visit(&game, &x0, 100.0, 1e-3, |_, _, _| {}).unwrap();
        assert!((energy(last.as_slice()) - h0).abs() / h0 <= 1e-9);
    }

    #[test]
    fn flow_rejects_bad_steps() {
        let game = BilinearGame::default();
        let x0 = pv(&[1.0, 0.0], 1);
        assert!(flow_rk4(&game, &x0, 1.0, 0.0).is_err());
        assert!(flow_rk4(&game, &x0, 1e-4, 1e-3).is_err());
    }
}
