//! Desk-scale gradient descent on the rank-alignment loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::copr::{copr_loss_with_grad, logistic, Relevance};

/// A differentiable scalar function of a flat parameter vector.
pub trait Objective {
    fn dim(&self) -> usize;
    fn loss(&self, params: &[f64]) -> f64;
    fn gradient(&self, params: &[f64]) -> Vec<f64>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Loss before the first step, then after every step.
    pub losses: Vec<f64>,
    pub params: Vec<f64>,
    /// Some loss exceeded ten times the initial loss.
    pub diverged: bool,
    /// Fraction of steps whose loss did not increase.
    pub non_increasing_fraction: f64,
}

/// Plain gradient descent.
pub fn toy_train(obj: &dyn Objective, init: &[f64], steps: usize, lr: f64) -> TrainReport {
    let mut params = init.to_vec();
    let mut losses = Vec::with_capacity(steps + 1);
    losses.push(obj.loss(&params));
    for _ in 0..steps {
        let g = obj.gradient(&params);
        for (p, g) in params.iter_mut().zip(g) {
            *p -= lr * g;
        }
        losses.push(obj.loss(&params));
    }
    let first = losses[0];
    let diverged = losses.iter().any(|l| !l.is_finite() || *l > 10.0 * first);
    let down = losses.windows(2).filter(|w| w[1] <= w[0]).count();
    TrainReport {
        non_increasing_fraction: if steps == 0 { 1.0 } else { down as f64 / steps as f64 },
        losses,
        params,
        diverged,
    }
}

/// Central differences with step `h`.
pub fn finite_difference_gradient(obj: &dyn Objective, params: &[f64], h: f64) -> Vec<f64> {
    let mut p = params.to_vec();
    (0..params.len())
        .map(|k| {
            p[k] = params[k] + h;
            let up = obj.loss(&p);
            p[k] = params[k] - h;
            let down = obj.loss(&p);
            p[k] = params[k];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `½ Σ a_k (x_k − c_k)²`, minimised at `x = c`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticObjective {
    pub curvature: Vec<f64>,
    pub center: Vec<f64>,
}

impl Objective for QuadraticObjective {
    fn dim(&self) -> usize {
        self.center.len()
    }

    fn loss(&self, x: &[f64]) -> f64 {
        x.iter()
            .zip(&self.center)
            .zip(&self.curvature)
            .map(|((x, c), a)| 0.5 * a * (x - c) * (x - c))
            .sum()
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.center).zip(&self.curvature).map(|((x, c), a)| a * (x - c)).collect()
    }
}

type Mat = Vec<Vec<f64>>;

fn matmul_t(a: &Mat, b: &Mat) -> Mat {
    // a · bᵀ
    a.iter().map(|r| b.iter().map(|s| r.iter().zip(s).map(|(x, y)| x * y).sum()).collect()).collect()
}

fn matmul(a: &Mat, b: &Mat) -> Mat {
    let cols = b.first().map_or(0, Vec::len);
    a.iter()
        .map(|r| (0..cols).map(|c| r.iter().zip(b).map(|(x, row)| x * row[c]).sum()).collect())
        .collect()
}

fn transpose(a: &Mat) -> Mat {
    let cols = a.first().map_or(0, Vec::len);
    (0..cols).map(|c| a.iter().map(|r| r[c]).collect()).collect()
}

fn softmax_rows(z: &Mat) -> Mat {
    z.iter()
        .map(|r| {
            let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = r.iter().map(|x| (x - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|x| x / s).collect()
        })
        .collect()
}

/// Backward pass through a row softmax.
fn softmax_back(p: &Mat, dp: &Mat) -> Mat {
    p.iter()
        .zip(dp)
        .map(|(p, dp)| {
            let dot: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
            p.iter().zip(dp).map(|(p, d)| p * (d - dot)).collect()
        })
        .collect()
}

fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Mat {
    (0..rows).map(|_| (0..cols).map(|_| rng.random_range(-scale..scale)).collect()).collect()
}

/// A small pre-ranking model trained on the rank-alignment loss over one
/// fixed batch. Trainable: bridge embeddings `B`, item-feature weights `a`,
/// head weights on the BEA output `c`, and a bias `β`:
///
/// ```text
/// W = softmax(B·Uᵀ/√d)   A = W·U   V = A·Θᵀ
/// S = softmax(I·Bᵀ/√d)   v̂ = S·V
/// y = σ(X·a + v̂·c + β)
/// ```
#[derive(Debug, Clone)]
pub struct CoprToyModel {
    user_seq: Mat,
    theta: Mat,
    items: Mat,
    features: Mat,
    bids: Vec<f64>,
    relevance: Relevance,
    bridges: usize,
    dim: usize,
}

struct Forward {
    w: Mat,
    v: Mat,
    s: Mat,
    v_hat: Mat,
    y: Vec<f64>,
}

impl CoprToyModel {
    /// Random batch of `candidates` items; relevance is the top 10 under a
    /// fixed linear teacher.
    pub fn synthetic(candidates: usize, bridges: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let seq_len = 12;
        let feat = 6;
        let user_seq = random_mat(&mut rng, seq_len, dim, 1.0);
        let theta = random_mat(&mut rng, dim, dim, 1.0 / (dim as f64).sqrt());
        let items = random_mat(&mut rng, candidates, dim, 1.0);
        let features = random_mat(&mut rng, candidates, feat, 1.0);
        let bids = (0..candidates).map(|_| rng.random_range(0.5..2.5)).collect();
        let teacher: Vec<f64> = (0..feat).map(|_| rng.random_range(-1.0..1.0)).collect();
        let t: Vec<f64> = features.iter().map(|r| r.iter().zip(&teacher).map(|(x, w)| x * w).sum()).collect();
        Self {
            user_seq,
            theta,
            items,
            features,
            bids,
            relevance: Relevance::top_k(&t, 10),
            bridges,
            dim,
        }
    }

    /// Small random starting point.
    pub fn init_params(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..self.dim()).map(|_| rng.random_range(-0.1..0.1)).collect()
    }

    pub fn relevance(&self) -> &Relevance {
        &self.relevance
    }

    fn feat_dim(&self) -> usize {
        self.features[0].len()
    }

    fn split<'a>(&self, p: &'a [f64]) -> (Mat, &'a [f64], &'a [f64], f64) {
        let nb = self.bridges * self.dim;
        let b = p[..nb].chunks(self.dim).map(<[f64]>::to_vec).collect();
        let a = &p[nb..nb + self.feat_dim()];
        let c = &p[nb + self.feat_dim()..nb + self.feat_dim() + self.dim];
        (b, a, c, p[p.len() - 1])
    }

    fn forward(&self, p: &[f64]) -> Forward {
        let (b, a, c, beta) = self.split(p);
        let scale = 1.0 / (self.dim as f64).sqrt();
        let scaled = |m: Mat| -> Mat { m.into_iter().map(|r| r.into_iter().map(|x| x * scale).collect()).collect() };
        let w = softmax_rows(&scaled(matmul_t(&b, &self.user_seq)));
        let att = matmul(&w, &self.user_seq);
        let v = matmul_t(&att, &self.theta);
        let s = softmax_rows(&scaled(matmul_t(&self.items, &b)));
        let v_hat = matmul(&s, &v);
        let y = self
            .features
            .iter()
            .zip(&v_hat)
            .map(|(x, vh)| {
                let h: f64 = x.iter().zip(a).map(|(x, a)| x * a).sum::<f64>()
                    + vh.iter().zip(c).map(|(v, c)| v * c).sum::<f64>()
                    + beta;
                logistic(h)
            })
            .collect();
        Forward { w, v, s, v_hat, y }
    }

    /// Model scores for the batch.
    pub fn scores(&self, p: &[f64]) -> Vec<f64> {
        self.forward(p).y
    }
}

impl Objective for CoprToyModel {
    fn dim(&self) -> usize {
        self.bridges * self.dim + self.feat_dim() + self.dim + 1
    }

    fn loss(&self, p: &[f64]) -> f64 {
        let y = self.forward(p).y;
        copr_loss_with_grad(&y, &self.bids, &self.relevance).map_or(f64::INFINITY, |(l, _)| l)
    }

    fn gradient(&self, p: &[f64]) -> Vec<f64> {
        let f = self.forward(p);
        let (b, _, c, _) = self.split(p);
        let scale = 1.0 / (self.dim as f64).sqrt();
        let Ok((_, dy)) = copr_loss_with_grad(&f.y, &self.bids, &self.relevance) else {
            return vec![f64::NAN; self.dim()];
        };
        let dh: Vec<f64> = dy.iter().zip(&f.y).map(|(g, y)| g * y * (1.0 - y)).collect();

        let da: Vec<f64> = (0..self.feat_dim())
            .map(|k| self.features.iter().zip(&dh).map(|(x, d)| x[k] * d).sum())
            .collect();
        let dc: Vec<f64> = (0..self.dim).map(|k| f.v_hat.iter().zip(&dh).map(|(v, d)| v[k] * d).sum()).collect();
        let dbeta: f64 = dh.iter().sum();

        let dv_hat: Mat = dh.iter().map(|d| c.iter().map(|c| d * c).collect()).collect();
        let ds = matmul_t(&dv_hat, &f.v);
        let dv = matmul(&transpose(&f.s), &dv_hat);
        let datt = matmul(&dv, &self.theta);
        let dw = matmul_t(&datt, &self.user_seq);

        let dz1 = softmax_back(&f.w, &dw);
        let dz2 = softmax_back(&f.s, &ds);
        let mut db = matmul(&dz1, &self.user_seq);
        let db2 = matmul(&transpose(&dz2), &self.items);
        for (r, r2) in db.iter_mut().zip(&db2) {
            for (x, y) in r.iter_mut().zip(r2) {
                *x = (*x + y) * scale;
            }
        }
        debug_assert_eq!(db.len(), b.len());

        let mut g: Vec<f64> = db.into_iter().flatten().collect();
        g.extend(da);
        g.extend(dc);
        g.push(dbeta);
        g
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_learning_rate_is_flat() {
        let m = CoprToyModel::synthetic(24, 4, 8, 1);
        let r = toy_train(&m, &m.init_params(2), 10, 0.0);
        assert!(r.losses.windows(2).all(|w| w[0] == w[1]));
        assert_eq!(r.non_increasing_fraction, 1.0);
        assert!(!r.diverged);
    }

    #[test]
    fn quadratic_reaches_its_minimum() {
        let q = QuadraticObjective {
            curvature: vec![1.0, 2.0, 0.5, 4.0],
            center: vec![3.0, -1.0, 0.25, 2.0],
        };
        let r = toy_train(&q, &[0.0; 4], 400, 0.2);
        for (x, c) in r.params.iter().zip(&q.center) {
            assert!((x - c).abs() <= 1e-3);
        }
        assert_eq!(r.non_increasing_fraction, 1.0);
    }

    #[test]
    fn divergence_is_flagged() {
        let q = QuadraticObjective {
            curvature: vec![1.0],
            center: vec![1.0],
        };
        assert!(toy_train(&q, &[0.0], 20, 3.0).diverged);
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let m = CoprToyModel::synthetic(24, 4, 8, 5);
        let p = m.init_params(6);
        let g = m.gradient(&p);
        let fd = finite_difference_gradient(&m, &p, 1e-6);
        for k in 0..m.dim() {
            let denom = g[k].abs().max(fd[k].abs()).max(1e-8);
            assert!((g[k] - fd[k]).abs() / denom <= 1e-3, "param {k}: {} vs {}", g[k], fd[k]);
        }
    }

    #[test]
    fn training_lowers_the_loss() {
        let m = CoprToyModel::synthetic(32, 4, 8, 11);
        let r = toy_train(&m, &m.init_params(12), 200, 0.05);
        assert!(!r.diverged);
        assert!(r.non_increasing_fraction >= 0.8);
        assert!(r.losses.last().unwrap() < &r.losses[0]);
    }
}
