//! Two-player games: the bilinear saddle game and a mixture-of-Gaussians GAN.
//!
//! Both expose the stacked vector field `V(θ, φ) = (∇_θ L_θ, ∇_φ L_φ)` and
//! can emit their losses into an autodiff [`Graph`], which the consensus
//! operator uses to differentiate through `V`.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Graph, Slots, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{ParamVector, Player};

/// Everything the stochastic game needs for one evaluation of its losses.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `k x 2` samples from the data distribution.
    pub real_points: Tensor,
    /// `k x prior_dim` generator inputs.
    pub prior_draws: Tensor,
    /// One interpolation weight in `[0, 1)` per row, for the gradient penalty.
    pub interp: Vec<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.real_points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub trait Game: Sync {
    /// `(p, q)`: lengths of θ and φ.
    fn partition(&self) -> (usize, usize);

    fn needs_batch(&self) -> bool;

    fn vector_field(&self, x: &ParamVector, batch: Option<&Batch>) -> Result<ParamVector>;

    /// One block of the vector field. Games override this when a single
    /// block is cheaper than the whole field.
    fn player_gradient(
        &self,
        x: &ParamVector,
        batch: Option<&Batch>,
        player: Player,
    ) -> Result<Vec<f64>> {
        Ok(self.vector_field(x, batch)?.block(player).to_vec())
    }

    /// Emits `(L_θ, L_φ)` into `g`, with both losses differentiable w.r.t.
    /// both parameter rows in `slots`.
    fn build_losses(
        &self,
        g: &mut Graph,
        slots: Slots,
        batch: Option<&Batch>,
    ) -> Result<(Var, Var)>;

    fn check(&self, x: &ParamVector, batch: Option<&Batch>) -> Result<()> {
        if x.partition() != self.partition() {
            return Err(Error::DimensionMismatch(format!(
                "game expects partition {:?}, got {:?}",
                self.partition(),
                x.partition()
            )));
        }
        if self.needs_batch() && batch.is_none() {
            return Err(Error::MissingBatch);
        }
        Ok(())
    }
}

/// `V(x)` for any game.
pub fn vector_field<G: Game + ?Sized>(
    game: &G,
    x: &ParamVector,
    batch: Option<&Batch>,
) -> Result<ParamVector> {
    game.vector_field(x, batch)
}

/// `min_θ max_φ θᵀ M φ`.
#[derive(Debug, Clone, PartialEq)]
pub struct BilinearGame {
    pub coupling: Array2<f64>,
}

impl Default for BilinearGame {
    fn default() -> Self {
        Self {
            coupling: Array2::from_elem((1, 1), 1.0),
        }
    }
}

impl BilinearGame {
    pub fn new(coupling: Array2<f64>) -> Self {
        Self { coupling }
    }

    /// Writes `V(x)` into `out` without allocating. Both slices have length `p + q`.
    pub fn field_into(&self, x: &[f64], out: &mut [f64]) {
        let (p, q) = self.coupling.dim();
        let (theta, phi) = x.split_at(p);
        let (out_theta, out_phi) = out.split_at_mut(p);
        for i in 0..p {
            out_theta[i] = (0..q).map(|j| self.coupling[[i, j]] * phi[j]).sum();
        }
        for j in 0..q {
            out_phi[j] = -(0..p)
                .map(|i| self.coupling[[i, j]] * theta[i])
                .sum::<f64>();
        }
    }
}

impl Game for BilinearGame {
    fn partition(&self) -> (usize, usize) {
        self.coupling.dim()
    }

    fn needs_batch(&self) -> bool {
        false
    }

    fn vector_field(&self, x: &ParamVector, batch: Option<&Batch>) -> Result<ParamVector> {
        self.check(x, batch)?;
        let mut out = vec![0.0; x.len()];
        self.field_into(x.as_slice(), &mut out);
        x.with_data(out)
    }

    fn build_losses(
        &self,
        g: &mut Graph,
        slots: Slots,
        _batch: Option<&Batch>,
    ) -> Result<(Var, Var)> {
        let m = g.leaf(self.coupling.clone());
        let tm = g.matmul(slots.theta, m);
        let phi_t = g.transpose(slots.phi);
        let l = g.matmul(tm, phi_t);
        let neg = g.neg(l);
        Ok((l, neg))
    }
}

/// Isotropic Gaussians centred on a 4x4 grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixtureSpec {
    /// Distance between neighbouring grid means.
    pub spacing: f64,
    pub sigma: f64,
}

impl Default for MixtureSpec {
    fn default() -> Self {
        Self {
            spacing: 1.0,
            sigma: 0.2,
        }
    }
}

pub const GRID_SIDE: usize = 4;
pub const NUM_MODES: usize = GRID_SIDE * GRID_SIDE;

impl MixtureSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Domain(format!(
                "mixture sigma must be > 0, got {}",
                self.sigma
            )));
        }
        if !(self.spacing > 0.0 && self.spacing.is_finite()) {
            return Err(Error::Domain(format!(
                "mixture spacing must be > 0, got {}",
                self.spacing
            )));
        }
        Ok(())
    }

    /// Grid means, centred on the origin, row-major over `(x, y)`.
    pub fn means(&self) -> [[f64; 2]; NUM_MODES] {
        let offset = (GRID_SIDE as f64 - 1.0) / 2.0;
        let mut out = [[0.0; 2]; NUM_MODES];
        for (k, m) in out.iter_mut().enumerate() {
            let (i, j) = (k / GRID_SIDE, k % GRID_SIDE);
            *m = [
                (i as f64 - offset) * self.spacing,
                (j as f64 - offset) * self.spacing,
            ];
        }
        out
    }

    pub fn weights(&self) -> [f64; NUM_MODES] {
        [1.0 / NUM_MODES as f64; NUM_MODES]
    }
}

/// `k` points from the mixture, as a `k x 2` array.
pub fn sample_mixture<R: Rng + ?Sized>(spec: &MixtureSpec, k: usize, rng: &mut R) -> Tensor {
    let means = spec.means();
    let mut out = Array2::zeros((k, 2));
    for mut row in out.rows_mut() {
        let m = means[rng.random_range(0..NUM_MODES)];
        let nx: f64 = StandardNormal.sample(rng);
        let ny: f64 = StandardNormal.sample(rng);
        row[0] = m[0] + spec.sigma * nx;
        row[1] = m[1] + spec.sigma * ny;
    }
    out
}

/// Fully connected ReLU network; the last layer is affine with no activation.
///
/// Parameters are laid out layer by layer as `W` (`in x out`, row-major)
/// followed by `b` (`out`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mlp {
    pub sizes: Vec<usize>,
}

impl Mlp {
    pub fn new(input: usize, hidden_units: usize, hidden_layers: usize, output: usize) -> Self {
        let mut sizes = vec![input];
        sizes.extend(std::iter::repeat_n(hidden_units, hidden_layers));
        sizes.push(output);
        Self { sizes }
    }

    pub fn layers(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.sizes.windows(2).map(|w| (w[0], w[1]))
    }

    pub fn param_count(&self) -> usize {
        self.layers().map(|(i, o)| i * o + o).sum()
    }

    /// He initialisation: `W ~ N(0, 2 / fan_in)`, `b = 0`.
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (fan_in, fan_out) in self.layers() {
            let std = (2.0 / fan_in as f64).sqrt();
            for _ in 0..fan_in * fan_out {
                let z: f64 = StandardNormal.sample(rng);
                out.push(std * z);
            }
            out.extend(std::iter::repeat_n(0.0, fan_out));
        }
        out
    }

    /// Forward pass inside a graph. `params` is a `1 x N` row; the network's
    /// parameters start at `offset`.
    pub fn forward(&self, g: &mut Graph, params: Var, offset: usize, input: Var) -> Var {
        let mut h = input;
        let mut off = offset;
        let n_layers = self.sizes.len() - 1;
        for (l, (fan_in, fan_out)) in self.layers().enumerate() {
            let w = g.slice(params, off, fan_in, fan_out);
            off += fan_in * fan_out;
            let b = g.slice(params, off, 1, fan_out);
            off += fan_out;
            h = g.affine(h, w, b);
            if l + 1 < n_layers {
                h = g.relu(h);
            }
        }
        h
    }

    /// Forward pass on plain arrays, for evaluation.
    pub fn forward_plain(&self, params: &[f64], input: &Tensor) -> Tensor {
        let mut h = input.clone();
        let mut off = 0;
        let n_layers = self.sizes.len() - 1;
        for (l, (fan_in, fan_out)) in self.layers().enumerate() {
            let w = ArrayView2::from_shape((fan_in, fan_out), &params[off..off + fan_in * fan_out])
                .expect("layer shape");
            off += fan_in * fan_out;
            let b = ArrayView2::from_shape((1, fan_out), &params[off..off + fan_out])
                .expect("bias shape");
            off += fan_out;
            h = h.dot(&w) + b;
            if l + 1 < n_layers {
                h.mapv_inplace(|z| z.max(0.0));
            }
        }
        h
    }
}

/// Regulariser added to the discriminator loss. Both penalise the gradient
/// of the discriminator logit with respect to its input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Penalty {
    None,
    /// `λ·E[(‖∇D(x̂)‖ − 1)²]` on interpolates between real and fake points.
    WganGp(f64),
    /// `λ·E[‖∇D(x)‖²]` on real points.
    ZeroGp(f64),
}

impl Penalty {
    pub fn lambda(&self) -> f64 {
        match *self {
            Penalty::None => 0.0,
            Penalty::WganGp(l) | Penalty::ZeroGp(l) => l,
        }
    }
}

/// Floor inside the square root of the penalty norm so its derivative stays finite.
const NORM_EPS: f64 = 1e-12;

/// Non-saturating GAN on the 16-Gaussians mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct MogGanGame {
    pub generator: Mlp,
    pub discriminator: Mlp,
    pub prior_dim: usize,
    pub penalty: Penalty,
    pub batch_size: usize,
    pub mixture: MixtureSpec,
}

/// Per-loss breakdown returned by [`MogGanGame::losses`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GanLosses {
    pub theta: f64,
    pub phi: f64,
    /// Unweighted penalty value (0 when no penalty is configured).
    pub penalty: f64,
}

impl MogGanGame {
    pub fn new(
        hidden_units: usize,
        hidden_layers: usize,
        prior_dim: usize,
        penalty: Penalty,
        batch_size: usize,
        mixture: MixtureSpec,
    ) -> Self {
        Self {
            generator: Mlp::new(prior_dim, hidden_units, hidden_layers, 2),
            discriminator: Mlp::new(2, hidden_units, hidden_layers, 1),
            prior_dim,
            penalty,
            batch_size,
            mixture,
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamVector {
        let theta = self.generator.init(rng);
        let phi = self.discriminator.init(rng);
        ParamVector::join(&theta, &phi)
    }

    /// Draws a batch from three independent streams.
    pub fn sample_batch<R: Rng + ?Sized>(
        &self,
        data_rng: &mut R,
        prior_rng: &mut R,
        interp_rng: &mut R,
    ) -> Batch {
        let k = self.batch_size;
        let real_points = sample_mixture(&self.mixture, k, data_rng);
        let prior_draws = sample_prior(k, self.prior_dim, prior_rng);
        let interp = (0..k).map(|_| interp_rng.random::<f64>()).collect();
        Batch {
            real_points,
            prior_draws,
            interp,
        }
    }

    /// Generator samples for the given θ block.
    pub fn generate(&self, theta: &[f64], prior_draws: &Tensor) -> Tensor {
        self.generator.forward_plain(theta, prior_draws)
    }

    fn interpolate(&self, real: &Tensor, fake: &Tensor, u: &[f64]) -> Tensor {
        let mut out = real.clone();
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            for j in 0..row.len() {
                row[j] = u[i] * real[[i, j]] + (1.0 - u[i]) * fake[[i, j]];
            }
        }
        out
    }

    fn logits(&self, g: &mut Graph, phi: Var, points: Var) -> Var {
        self.discriminator.forward(g, phi, 0, points)
    }

    /// Unweighted penalty evaluated at `points` (a node, so it can depend on θ).
    fn penalty_term(&self, g: &mut Graph, phi: Var, points: Var) -> Result<Option<Var>> {
        if matches!(self.penalty, Penalty::None) {
            return Ok(None);
        }
        let d = self.logits(g, phi, points);
        // Rows are independent, so the gradient of the sum gives every row's input gradient.
        let s = g.sum(d);
        let gx = g.grad(s, &[points])?.remove(0);
        let sq = g.square(gx);
        let sq_norm = g.sum_rows(sq);
        let term = match self.penalty {
            Penalty::WganGp(_) => {
                let padded = g.add_scalar(sq_norm, NORM_EPS);
                let norm = g.sqrt(padded);
                let dev = g.add_scalar(norm, -1.0);
                let dev2 = g.square(dev);
                g.mean(dev2)
            }
            Penalty::ZeroGp(_) => g.mean(sq_norm),
            Penalty::None => unreachable!(),
        };
        Ok(Some(term))
    }

    /// `-E[log σ(D(real))] - E[log σ(-D(fake))] + λ·penalty`, given the fake
    /// and penalty points as nodes.
    fn phi_loss(
        &self,
        g: &mut Graph,
        phi: Var,
        real: Var,
        fake: Var,
        penalty_points: Var,
    ) -> Result<(Var, Option<Var>)> {
        let d_real = self.logits(g, phi, real);
        let ls_real = g.log_sigmoid(d_real);
        let m_real = g.mean(ls_real);
        let d_fake = self.logits(g, phi, fake);
        let neg_fake = g.neg(d_fake);
        let ls_fake = g.log_sigmoid(neg_fake);
        let m_fake = g.mean(ls_fake);
        let sum = g.add(m_real, m_fake);
        let mut loss = g.neg(sum);
        let pen = self.penalty_term(g, phi, penalty_points)?;
        if let Some(p) = pen {
            let weighted = g.scale(p, self.penalty.lambda());
            loss = g.add(loss, weighted);
        }
        Ok((loss, pen))
    }

    /// `-E[log σ(D(G(z)))]`.
    fn theta_loss(&self, g: &mut Graph, phi: Var, fake: Var) -> Var {
        let d_fake = self.logits(g, phi, fake);
        let ls = g.log_sigmoid(d_fake);
        let m = g.mean(ls);
        g.neg(m)
    }

    fn build_all(
        &self,
        g: &mut Graph,
        slots: Slots,
        batch: &Batch,
    ) -> Result<(Var, Var, Option<Var>)> {
        let real = g.leaf(batch.real_points.clone());
        let z = g.leaf(batch.prior_draws.clone());
        let fake = self.generator.forward(g, slots.theta, 0, z);
        let penalty_points = match self.penalty {
            Penalty::ZeroGp(_) => real,
            _ => {
                // x̂ = u·real + (1 - u)·fake, kept attached to θ
                let k = batch.len();
                let u = Array2::from_shape_vec((k, 1), batch.interp.clone())
                    .expect("interp length matches batch");
                let u = g.leaf(u);
                let u2 = g.broadcast_cols(u, 2);
                let one_minus = {
                    let n = g.neg(u2);
                    g.add_scalar(n, 1.0)
                };
                let a = g.mul(u2, real);
                let b = g.mul(one_minus, fake);
                g.add(a, b)
            }
        };
        let (l_phi, pen) = self.phi_loss(g, slots.phi, real, fake, penalty_points)?;
        let l_theta = self.theta_loss(g, slots.phi, fake);
        Ok((l_theta, l_phi, pen))
    }

    pub fn losses(&self, x: &ParamVector, batch: &Batch) -> Result<GanLosses> {
        self.check(x, Some(batch))?;
        let mut g = Graph::new();
        let slots = Slots {
            theta: g.row(x.theta()),
            phi: g.row(x.phi()),
            data: None,
        };
        let (lt, lp, pen) = self.build_all(&mut g, slots, batch)?;
        Ok(GanLosses {
            theta: g.scalar(lt)?,
            phi: g.scalar(lp)?,
            penalty: match pen {
                Some(p) => g.scalar(p)?,
                None => 0.0,
            },
        })
    }

    /// `∇_φ L_φ` with the generator output treated as data.
    fn phi_gradient(&self, x: &ParamVector, batch: &Batch) -> Result<Vec<f64>> {
        let fake_v = self.generate(x.theta(), &batch.prior_draws);
        let mut g = Graph::new();
        let phi = g.row(x.phi());
        let real = g.leaf(batch.real_points.clone());
        let penalty_points = match self.penalty {
            Penalty::ZeroGp(_) => real,
            Penalty::None => real,
            Penalty::WganGp(_) => {
                let x_hat = self.interpolate(&batch.real_points, &fake_v, &batch.interp);
                g.leaf(x_hat)
            }
        };
        let fake = g.leaf(fake_v);
        let (loss, _) = self.phi_loss(&mut g, phi, real, fake, penalty_points)?;
        Ok(g.grad_values(loss, &[phi])?.remove(0))
    }

    fn theta_gradient(&self, x: &ParamVector, batch: &Batch) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let theta = g.row(x.theta());
        let phi = g.row(x.phi());
        let z = g.leaf(batch.prior_draws.clone());
        let fake = self.generator.forward(&mut g, theta, 0, z);
        let loss = self.theta_loss(&mut g, phi, fake);
        Ok(g.grad_values(loss, &[theta])?.remove(0))
    }
}

/// Standard Gaussian prior draws, `k x dim`.
pub fn sample_prior<R: Rng + ?Sized>(k: usize, dim: usize, rng: &mut R) -> Tensor {
    Array2::from_shape_simple_fn((k, dim), || StandardNormal.sample(rng))
}

impl Game for MogGanGame {
    fn partition(&self) -> (usize, usize) {
        (
            self.generator.param_count(),
            self.discriminator.param_count(),
        )
    }

    fn needs_batch(&self) -> bool {
        true
    }

    fn vector_field(&self, x: &ParamVector, batch: Option<&Batch>) -> Result<ParamVector> {
        self.check(x, batch)?;
        let batch = batch.ok_or(Error::MissingBatch)?;
        let theta = self.theta_gradient(x, batch)?;
        let phi = self.phi_gradient(x, batch)?;
        Ok(ParamVector::join(&theta, &phi))
    }

    fn player_gradient(
        &self,
        x: &ParamVector,
        batch: Option<&Batch>,
        player: Player,
    ) -> Result<Vec<f64>> {
        self.check(x, batch)?;
        let batch = batch.ok_or(Error::MissingBatch)?;
        match player {
            Player::Theta => self.theta_gradient(x, batch),
            Player::Phi => self.phi_gradient(x, batch),
            Player::All => Ok(self.vector_field(x, Some(batch))?.into_vec()),
        }
    }

    fn build_losses(
        &self,
        g: &mut Graph,
        slots: Slots,
        batch: Option<&Batch>,
    ) -> Result<(Var, Var)> {
        let batch = batch.ok_or(Error::MissingBatch)?;
        let (lt, lp, _) = self.build_all(g, slots, batch)?;
        Ok((lt, lp))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_grad;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_game(penalty: Penalty) -> MogGanGame {
        MogGanGame::new(6, 2, 3, penalty, 5, MixtureSpec::default())
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn batch_for(game: &MogGanGame, seed: u64) -> Batch {
        let (mut a, mut b, mut c) = (rng(seed), rng(seed + 100), rng(seed + 200));
        game.sample_batch(&mut a, &mut b, &mut c)
    }

    #[test]
    fn bilinear_field_examples() {
        let game = BilinearGame::default();
        let x = ParamVector::new(vec![1.0, 2.0], 1).unwrap();
        assert_eq!(
            game.vector_field(&x, None).unwrap().as_slice(),
            &[2.0, -1.0]
        );
        let zero = ParamVector::zeros(1, 1);
        assert_eq!(
            game.vector_field(&zero, None).unwrap().as_slice(),
            &[0.0, 0.0]
        );
    }

    #[test]
    fn bilinear_field_is_linear_and_rotational() {
        let mut r = rng(1);
        let m = Array2::from_shape_simple_fn((3, 2), || r.random_range(-2.0..2.0));
        let game = BilinearGame::new(m);
        for _ in 0..50 {
            let data: Vec<f64> = (0..5).map(|_| r.random_range(-5.0..5.0)).collect();
            let x = ParamVector::new(data, 3).unwrap();
            let v = game.vector_field(&x, None).unwrap();
            assert!(x.dot(&v).unwrap().abs() <= 1e-12);
            let a = r.random_range(-3.0..3.0);
            let va = game.vector_field(&x.scaled(a), None).unwrap();
            for (l, rr) in va.as_slice().iter().zip(v.scaled(a).as_slice()) {
                assert!((l - rr).abs() <= 1e-12 * (1.0 + l.abs()));
            }
        }
    }

    #[test]
    fn bilinear_losses_match_analytic_field() {
        let game = BilinearGame::new(ndarray::array![[1.0, -2.0], [0.5, 3.0]]);
        let x = ParamVector::new(vec![0.3, -0.4, 1.1, 0.7], 2).unwrap();
        let mut g = Graph::new();
        let slots = Slots {
            theta: g.row(x.theta()),
            phi: g.row(x.phi()),
            data: None,
        };
        let (lt, lp) = game.build_losses(&mut g, slots, None).unwrap();
        let gt = g.grad_values(lt, &[slots.theta]).unwrap().remove(0);
        let gp = g.grad_values(lp, &[slots.phi]).unwrap().remove(0);
        let v = game.vector_field(&x, None).unwrap();
        let ad = ParamVector::join(&gt, &gp);
        for (a, b) in ad.as_slice().iter().zip(v.as_slice()) {
            assert!((a - b).abs() < 1e-14, "{a} vs {b}");
        }
    }

    #[test]
    fn wrong_partition_is_rejected() {
        let game = BilinearGame::default();
        let x = ParamVector::new(vec![1.0, 2.0, 3.0], 1).unwrap();
        assert!(game.vector_field(&x, None).is_err());
    }

    #[test]
    fn mog_requires_batch() {
        let game = small_game(Penalty::None);
        let x = game.init(&mut rng(0));
        assert_eq!(game.vector_field(&x, None), Err(Error::MissingBatch));
    }

    #[test]
    fn mixture_means_are_centred_grid() {
        let means = MixtureSpec::default().means();
        let xs: Vec<f64> = means.iter().map(|m| m[0]).collect();
        assert!(xs.contains(&-1.5) && xs.contains(&1.5) && xs.contains(&0.5));
        let mean: f64 = means.iter().map(|m| m[0] + m[1]).sum();
        assert_eq!(mean, 0.0);
        assert!((MixtureSpec::default().weights().iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn mixture_sample_mean_and_balance() {
        let spec = MixtureSpec::default();
        let k = 100_000;
        let pts = sample_mixture(&spec, k, &mut rng(3));
        let mean = pts.mean_axis(ndarray::Axis(0)).unwrap();
        assert!(mean[0].abs() < 0.02 && mean[1].abs() < 0.02, "{mean}");

        let means = spec.means();
        let mut counts = [0usize; NUM_MODES];
        for row in pts.rows() {
            let nearest = (0..NUM_MODES)
                .min_by(|&a, &b| {
                    let da = (row[0] - means[a][0]).powi(2) + (row[1] - means[a][1]).powi(2);
                    let db = (row[0] - means[b][0]).powi(2) + (row[1] - means[b][1]).powi(2);
                    da.total_cmp(&db)
                })
                .unwrap();
            counts[nearest] += 1;
        }
        // Nearest-mean assignment is exact up to a ~6e-3 tail at 2.5σ; p = 1/16 ± 5σ_binomial.
        for c in counts {
            let frac = c as f64 / k as f64;
            assert!((0.055..=0.070).contains(&frac), "{frac}");
        }
    }

    #[test]
    fn vanishing_noise_hits_grid_means() {
        let spec = MixtureSpec {
            spacing: 1.0,
            sigma: 1e-300,
        };
        let means = spec.means();
        let pts = sample_mixture(&spec, 500, &mut rng(4));
        for row in pts.rows() {
            assert!(means.iter().any(|m| m[0] == row[0] && m[1] == row[1]));
        }
    }

    #[test]
    fn sampler_is_reproducible() {
        let spec = MixtureSpec::default();
        let a = sample_mixture(&spec, 64, &mut rng(5));
        let b = sample_mixture(&spec, 64, &mut rng(5));
        assert_eq!(a, b);
    }

    #[test]
    fn mlp_param_count_and_plain_forward_agree_with_graph() {
        let mlp = Mlp::new(3, 5, 2, 2);
        assert_eq!(mlp.param_count(), 3 * 5 + 5 + 5 * 5 + 5 + 5 * 2 + 2);
        let params = mlp.init(&mut rng(6));
        let input = sample_prior(4, 3, &mut rng(7));
        let plain = mlp.forward_plain(&params, &input);
        let mut g = Graph::new();
        let p = g.row(&params);
        let x = g.leaf(input);
        let out = mlp.forward(&mut g, p, 0, x);
        for (a, b) in plain.iter().zip(g.value(out).iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    /// A discriminator whose last layer is all zeros outputs logit 0 (D = ½).
    fn constant_discriminator(game: &MogGanGame, seed: u64) -> ParamVector {
        let mut x = game.init(&mut rng(seed));
        let last = game.discriminator.sizes[game.discriminator.sizes.len() - 2] + 1;
        let q = x.q();
        for v in &mut x.phi_mut()[q - last..] {
            *v = 0.0;
        }
        x
    }

    #[test]
    fn constant_discriminator_losses() {
        let ln2 = std::f64::consts::LN_2;
        for penalty in [Penalty::WganGp(1.0), Penalty::ZeroGp(1.0), Penalty::None] {
            let game = small_game(penalty);
            let x = constant_discriminator(&game, 11);
            let batch = batch_for(&game, 12);
            let l = game.losses(&x, &batch).unwrap();
            assert!((l.theta - ln2).abs() < 1e-12);
            let expected = 2.0 * ln2 + penalty.lambda() * l.penalty;
            assert!((l.phi - expected).abs() < 1e-12);
            match penalty {
                // ∇D ≡ 0 so (‖∇D‖ − 1)² is 1 up to the norm floor
                Penalty::WganGp(_) => assert!((l.penalty - 1.0).abs() < 1e-5),
                _ => assert_eq!(l.penalty, 0.0),
            }
        }
    }

    #[test]
    fn equilibrium_value_without_penalty() {
        // Generator output replaced by real data; D ≡ ½ gives 2 log 2.
        let game = small_game(Penalty::None);
        let x = constant_discriminator(&game, 13);
        let batch = batch_for(&game, 14);
        let mut g = Graph::new();
        let phi = g.row(x.phi());
        let real = g.leaf(batch.real_points.clone());
        let fake = g.leaf(batch.real_points.clone());
        let (loss, _) = game.phi_loss(&mut g, phi, real, fake, real).unwrap();
        assert!((g.scalar(loss).unwrap() - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn losses_finite_and_penalty_nonnegative_over_seeds() {
        for penalty in [Penalty::WganGp(1.0), Penalty::ZeroGp(1.0)] {
            let game = small_game(penalty);
            for seed in 0..100 {
                let x = game.init(&mut rng(seed));
                let batch = batch_for(&game, 1000 + seed);
                let l = game.losses(&x, &batch).unwrap();
                assert!(l.theta.is_finite() && l.phi.is_finite());
                assert!(l.penalty >= 0.0);
            }
        }
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt();
        let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-12);
        num / den
    }

    #[test]
    fn mog_field_matches_finite_differences() {
        for penalty in [Penalty::WganGp(1.0), Penalty::ZeroGp(1.0), Penalty::None] {
            let game = small_game(penalty);
            let x = game.init(&mut rng(21));
            let batch = batch_for(&game, 22);
            let v = game.vector_field(&x, Some(&batch)).unwrap();
            let fd_theta = finite_diff_grad(|y| game.losses(y, &batch).unwrap().theta, &x, 1e-5);
            let fd_phi = finite_diff_grad(|y| game.losses(y, &batch).unwrap().phi, &x, 1e-5);
            let p = x.p();
            assert!(rel_err(v.theta(), &fd_theta[..p]) <= 1e-3);
            assert!(rel_err(v.phi(), &fd_phi[p..]) <= 1e-3);
        }
    }
}
