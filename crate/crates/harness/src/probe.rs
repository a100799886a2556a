//! State-regression probe: ridge regression from frozen 50-d latents to the
//! true environment state.

use anyhow::{anyhow, bail, ensure, Result};
use curl_core::augment::{center_crop_stack, FrameStack};
use curl_core::contrastive::ContrastivePair;
use curl_core::envs::{ActionSpace, Env};
use curl_core::replay::Action;
use curl_core::rng::{stream, Rng, Stream};
use nalgebra::DMatrix;
use rand::Rng as _;

use crate::config::ExperimentConfig;
use crate::train::load_agent;

pub const MIN_SAMPLES: usize = 10;
pub const DEFAULT_LAMBDA: f64 = 1e-3;

/// Center-cropped stacks and the states they were rendered from.
pub struct ProbeData {
    pub stacks: Vec<FrameStack>,
    pub states: Vec<Vec<f64>>,
}

/// Rolls out a uniform random policy and records `n` (observation, state) pairs.
pub fn collect(config: &ExperimentConfig, n: usize, rng: &mut Rng) -> Result<ProbeData> {
    ensure!(n >= MIN_SAMPLES, "probe needs at least {MIN_SAMPLES} samples, got {n}");
    let mut env = Env::new(config.env_config(), rng).map_err(|e| anyhow!("{e}"))?;
    let crop = config.train.crop_size;
    let mut data = ProbeData { stacks: Vec::with_capacity(n), states: Vec::with_capacity(n) };
    while data.stacks.len() < n {
        data.stacks.push(center_crop_stack(env.observation(), crop, crop).map_err(|e| anyhow!("{e}"))?);
        data.states.push(env.true_state());
        let action = match config.env.id.action_space() {
            ActionSpace::Continuous { dim } => Action::Continuous((0..dim).map(|_| rng.random_range(-1.0f32..=1.0)).collect()),
            ActionSpace::Discrete { n } => Action::Discrete(rng.random_range(0..n)),
        };
        if env.step(&action).map_err(|e| anyhow!("{e}"))?.done() {
            env.reset(rng);
        }
    }
    Ok(data)
}

/// Fitted affine map `y = x W + b`.
#[derive(Debug, Clone)]
pub struct Ridge {
    pub weights: DMatrix<f64>,
    pub bias: Vec<f64>,
}

/// Ridge regression on centered data; the intercept is not penalized.
pub fn ridge_fit(x: &DMatrix<f64>, y: &DMatrix<f64>, lambda: f64) -> Result<Ridge> {
    ensure!(x.nrows() == y.nrows() && x.nrows() > 0, "ridge needs matching, non-empty rows");
    ensure!(lambda >= 0.0, "ridge penalty must be non-negative");
    let xm = x.row_mean();
    let ym = y.row_mean();
    let xc = DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] - xm[j]);
    let yc = DMatrix::from_fn(y.nrows(), y.ncols(), |i, j| y[(i, j)] - ym[j]);
    let p = x.ncols();
    let gram = xc.transpose() * &xc + DMatrix::identity(p, p) * lambda;
    let rhs = xc.transpose() * &yc;
    let weights = match gram.clone().cholesky() {
        Some(c) => c.solve(&rhs),
        // Singular Gram matrix (e.g. constant features with lambda = 0).
        None => gram.pseudo_inverse(1e-12).map_err(|e| anyhow!("{e}"))? * rhs,
    };
    let bias = (0..y.ncols()).map(|j| ym[j] - (0..p).map(|i| xm[i] * weights[(i, j)]).sum::<f64>()).collect();
    Ok(Ridge { weights, bias })
}

impl Ridge {
    pub fn predict(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = x * &self.weights;
        for mut row in out.row_iter_mut() {
            for (v, b) in row.iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        out
    }
}

/// Mean over all entries of the squared error.
pub fn mse(pred: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
    (pred - y).iter().map(|e| e * e).sum::<f64>() / y.len() as f64
}

/// Fits on the first 80% of rows, reports MSE on the rest.
pub fn holdout_mse(x: &DMatrix<f64>, y: &DMatrix<f64>, lambda: f64) -> Result<f64> {
    let n = x.nrows();
    ensure!(n >= MIN_SAMPLES, "probe needs at least {MIN_SAMPLES} samples, got {n}");
    let split = n * 4 / 5;
    let fit = ridge_fit(&x.rows(0, split).into_owned(), &y.rows(0, split).into_owned(), lambda)?;
    let (xt, yt) = (x.rows(split, n - split).into_owned(), y.rows(split, n - split).into_owned());
    Ok(mse(&fit.predict(&xt), &yt))
}

pub fn latents(pair: &ContrastivePair<f32>, stacks: &[FrameStack]) -> Result<DMatrix<f64>> {
    let mut rows = Vec::new();
    for chunk in stacks.chunks(256) {
        let refs: Vec<&FrameStack> = chunk.iter().collect();
        rows.extend(pair.encode_queries(&refs).map_err(|e| anyhow!("{e}"))?.into_iter().map(f64::from));
    }
    let dim = rows.len() / stacks.len();
    Ok(DMatrix::from_row_slice(stacks.len(), dim, &rows))
}

pub fn states_matrix(states: &[Vec<f64>]) -> DMatrix<f64> {
    let dim = states.first().map_or(0, Vec::len);
    DMatrix::from_fn(states.len(), dim, |i, j| states[i][j])
}

#[derive(Debug, Clone, Copy)]
pub struct ProbeResult {
    pub trained_mse: f64,
    pub random_mse: f64,
}

/// Held-out MSE for a trained encoder and for a freshly initialized one with
/// the same architecture. Rollouts are drawn from the probe stream of `seed`.
pub fn probe_pair(config: &ExperimentConfig, trained: &ContrastivePair<f32>, n: usize, seed: u64) -> Result<ProbeResult> {
    let mut rng = stream(seed, Stream::Probe);
    let data = collect(config, n, &mut rng)?;
    let mut init = stream(seed ^ 0x5EED, Stream::Init);
    let fresh = ContrastivePair::<f32>::new(config.encoder_config(), trained.momentum(), &mut init).map_err(|e| anyhow!("{e}"))?;
    let y = states_matrix(&data.states);
    Ok(ProbeResult {
        trained_mse: holdout_mse(&latents(trained, &data.stacks)?, &y, DEFAULT_LAMBDA)?,
        random_mse: holdout_mse(&latents(&fresh, &data.stacks)?, &y, DEFAULT_LAMBDA)?,
    })
}

pub fn probe_checkpoint(dir: &std::path::Path, n: usize, seed: u64) -> Result<ProbeResult> {
    let (config, agent) = load_agent(dir)?;
    let Some(pair) = agent.pair() else {
        bail!("checkpoint has no pixel encoder to probe");
    };
    probe_pair(&config, pair, n, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn variance(y: &DMatrix<f64>) -> f64 {
        let m = y.row_mean();
        DMatrix::from_fn(y.nrows(), y.ncols(), |i, j| (y[(i, j)] - m[j]).powi(2)).sum() / y.len() as f64
    }

    #[test]
    fn constant_features_predict_the_mean() {
        let x = DMatrix::from_element(20, 3, 0.7);
        let y = DMatrix::from_fn(20, 2, |i, j| (i * (j + 1)) as f64);
        let fit = ridge_fit(&x, &y, 0.0).unwrap();
        assert!((mse(&fit.predict(&x), &y) - variance(&y)).abs() < 1e-9);
    }

    #[test]
    fn huge_penalty_gives_target_variance() {
        let x = DMatrix::from_fn(30, 4, |i, j| ((i * 7 + j * 3) % 11) as f64);
        let y = DMatrix::from_fn(30, 1, |i, _| (i as f64).sin());
        let fit = ridge_fit(&x, &y, 1e15).unwrap();
        assert!((mse(&fit.predict(&x), &y) - variance(&y)).abs() < 1e-6);
    }

    #[test]
    fn exact_linear_map_is_recovered() {
        let x = DMatrix::from_fn(40, 2, |i, j| ((i * 13 + j * 5) % 17) as f64);
        let y = DMatrix::from_fn(40, 1, |i, _| 2.0 * x[(i, 0)] - x[(i, 1)] + 3.0);
        let fit = ridge_fit(&x, &y, 0.0).unwrap();
        assert!((fit.weights[(0, 0)] - 2.0).abs() < 1e-9 && (fit.bias[0] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn too_few_samples() {
        let c = ExperimentConfig::profile(crate::config::Profile::Quick, curl_core::envs::EnvId::PointMass, crate::config::AgentKind::Sac);
        assert!(collect(&c, 9, &mut stream(0, Stream::Probe)).is_err());
    }
}
