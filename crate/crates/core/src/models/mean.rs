//! Convex mean estimation: each user holds points in ℝ^d and the per-point
//! loss is the squared distance to the parameter.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Model;
use crate::error::{Error, Result};
use crate::mechanisms::{GradientVector, UserPool};

#[derive(Debug, Clone, PartialEq)]
pub struct MeanEstimationProblem {
    dim: usize,
    users: Vec<Vec<Vec<f64>>>,
}

impl MeanEstimationProblem {
    pub fn new(users: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let dim = users
            .first()
            .and_then(|u| u.first())
            .map(Vec::len)
            .ok_or(Error::EmptyCorpus)?;
        if dim == 0 {
            return Err(Error::Domain("points must have at least one coordinate".into()));
        }
        for (i, points) in users.iter().enumerate() {
            if points.is_empty() {
                return Err(Error::Domain(format!("user {i} holds no points")));
            }
            if points.iter().any(|p| p.len() != dim || p.iter().any(|x| !x.is_finite())) {
                return Err(Error::Domain(format!("user {i} has a malformed point")));
            }
        }
        Ok(Self { dim, users })
    }

    /// Users centred at standard-normal locations, each holding
    /// `points_per_user` draws with standard deviation `spread` around its
    /// centre.
    pub fn synthetic(n_users: usize, points_per_user: usize, dim: usize, spread: f64, seed: u64) -> Result<Self> {
        if n_users == 0 || points_per_user == 0 {
            return Err(Error::EmptyCorpus);
        }
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let users = (0..n_users)
            .map(|_| {
                let centre: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                (0..points_per_user)
                    .map(|_| {
                        centre
                            .iter()
                            .map(|c| {
                                let z: f64 = StandardNormal.sample(&mut rng);
                                c + spread * z
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        Self::new(users)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn user_points(&self, user: usize) -> &[Vec<f64>] {
        &self.users[user]
    }

    /// Average of the per-user means, the minimiser of the user-averaged
    /// objective.
    pub fn optimum(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for points in &self.users {
            let w = 1.0 / (points.len() * self.users.len()) as f64;
            for p in points {
                for (o, x) in out.iter_mut().zip(p) {
                    *o += w * x;
                }
            }
        }
        out
    }
}

impl UserPool for MeanEstimationProblem {
    type Example = Vec<f64>;

    fn n_users(&self) -> usize {
        self.users.len()
    }

    fn sample_user(&self, user: usize, k: usize, rng: &mut dyn rand::RngCore) -> Result<Vec<Vec<f64>>> {
        let points = self
            .users
            .get(user)
            .ok_or_else(|| Error::UnknownUser(user.to_string()))?;
        if k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        let n = points.len();
        let mut out: Vec<Vec<f64>> = index::sample(rng, n, k.min(n)).iter().map(|i| points[i].clone()).collect();
        while out.len() < k {
            out.push(points[rng.random_range(0..n)].clone());
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeanModel {
    theta: Vec<f64>,
}

impl MeanModel {
    pub fn zeros(dim: usize) -> Self {
        Self { theta: vec![0.0; dim] }
    }

    pub fn from_params(theta: Vec<f64>) -> Self {
        Self { theta }
    }
}

impl Model for MeanModel {
    type Example = Vec<f64>;

    fn params(&self) -> &[f64] {
        &self.theta
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    fn loss(&self, x: &Vec<f64>) -> Result<f64> {
        check_dim(&self.theta, x)?;
        Ok(self.theta.iter().zip(x).map(|(t, x)| (t - x) * (t - x)).sum())
    }

    fn loss_and_grad(&self, x: &Vec<f64>) -> Result<(f64, GradientVector)> {
        let loss = self.loss(x)?;
        let grad: Vec<f64> = self.theta.iter().zip(x).map(|(t, x)| 2.0 * (t - x)).collect();
        Ok((loss, GradientVector::from(grad)))
    }
}

fn check_dim(theta: &[f64], x: &[f64]) -> Result<()> {
    if theta.len() != x.len() {
        return Err(Error::Domain(format!("point has {} coordinates, model has {}", x.len(), theta.len())));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_vanishes_at_the_mean() {
        let p = MeanEstimationProblem::new(vec![vec![vec![1.0, 2.0], vec![3.0, 6.0]]]).unwrap();
        let m = MeanModel::from_params(p.optimum());
        assert_eq!(m.params(), &[2.0, 4.0]);
        let mut total = [0.0; 2];
        for x in p.user_points(0) {
            let g = m.loss_and_grad(x).unwrap().1;
            total[0] += g.as_slice()[0];
            total[1] += g.as_slice()[1];
        }
        assert_eq!(total, [0.0, 0.0]);
    }

    #[test]
    fn optimum_weights_users_equally() {
        let p = MeanEstimationProblem::new(vec![vec![vec![0.0]], vec![vec![2.0], vec![2.0], vec![2.0]]]).unwrap();
        assert_eq!(p.optimum(), vec![1.0]);
    }

    #[test]
    fn rejects_ragged_points() {
        assert!(MeanEstimationProblem::new(vec![vec![vec![0.0], vec![1.0, 2.0]]]).is_err());
        assert!(MeanEstimationProblem::new(vec![]).is_err());
        assert!(MeanEstimationProblem::new(vec![vec![vec![0.0]], vec![]]).is_err());
    }

    #[test]
    fn sampling_takes_every_point_when_k_matches() {
        let p = MeanEstimationProblem::synthetic(3, 4, 2, 1.0, 0).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let mut got = p.sample_user(1, 4, &mut rng).unwrap();
        let mut want = p.user_points(1).to_vec();
        got.sort_by(|a, b| a[0].total_cmp(&b[0]));
        want.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert_eq!(got, want);
        assert_eq!(p.sample_user(1, 9, &mut rng).unwrap().len(), 9);
    }
}
