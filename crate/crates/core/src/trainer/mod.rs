//! Teacher-student training of ReLU students.
//!
//! Random streams (see [`crate::rng`]):
//! - teacher and datasets come from `data_seed`, shared by every scheme in a comparison;
//! - student initialization and minibatch order come from `seed`.
//!
//! Minibatch linear algebra runs on one thread, so a run is bit-reproducible for a
//! fixed configuration. Independent runs are distributed over the rayon pool.

pub mod data;
pub mod mlp;
pub mod optim;

use std::time::Instant;

use ndarray::Axis;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use data::{make_dataset, Dataset, TeacherSpec};
pub use mlp::{Activation, ForwardPass, Gradients, Mlp};
pub use optim::{Optimizer, OptimizerConfig};

use crate::error::{Error, Result};
use crate::initkit::InitScheme;
use crate::report::sha256_hex;
use crate::rng::{self, tag};

fn default_input_dim() -> usize {
    64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub teacher: TeacherSpec,
    pub student_init: InitScheme,
    pub optimizer: OptimizerConfig,
    /// Hidden layers of the student (and of the standard and complex teachers).
    pub depth: usize,
    pub width: usize,
    #[serde(default = "default_input_dim")]
    pub input_dim: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Seed of the teacher and the data; defaults to `seed`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_seed: Option<u64>,
}

impl TrainConfig {
    /// L = 10, N = 64, 10^4 training samples, Adam, 200 epochs.
    pub fn desk() -> Self {
        Self {
            teacher: TeacherSpec::Standard,
            student_init: InitScheme::he(),
            optimizer: OptimizerConfig::adam(),
            depth: 10,
            width: 64,
            input_dim: 64,
            n_train: 10_000,
            n_val: 1_000,
            batch_size: 1_000,
            epochs: 200,
            seed: 0,
            data_seed: None,
        }
    }

    /// L = 10, N = 100, 10^5 training samples, 10^3 epochs (Adam) or 10^4 (SGD).
    pub fn paper(optimizer: OptimizerConfig) -> Self {
        let epochs = match optimizer {
            OptimizerConfig::Sgd { .. } => 10_000,
            OptimizerConfig::Adam { .. } => 1_000,
        };
        Self { optimizer, width: 100, input_dim: 100, n_train: 100_000, epochs, ..Self::desk() }
    }

    pub fn data_seed(&self) -> u64 {
        self.data_seed.unwrap_or(self.seed)
    }

    pub fn validate(&self) -> Result<()> {
        self.student_init.validate()?;
        self.optimizer.validate()?;
        for (name, v) in [
            ("depth", self.depth),
            ("width", self.width),
            ("input_dim", self.input_dim),
            ("n_train", self.n_train),
            ("n_val", self.n_val),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                return Err(Error::invalid(name, "must be at least 1"));
            }
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    pub config: TrainConfig,
    pub config_digest: String,
    pub initial_train_loss: f64,
    pub initial_val_loss: f64,
    /// Mean minibatch loss of each epoch.
    pub train_loss: Vec<f64>,
    /// Validation loss after each epoch.
    pub val_loss: Vec<f64>,
    /// Epoch (1-based) at which a loss or parameter became non-finite.
    pub diverged_at: Option<usize>,
    pub final_params_digest: String,
    /// Not serialized, so that run files are reproducible byte for byte.
    #[serde(skip)]
    pub wall_time_secs: f64,
}

impl TrainRun {
    pub fn diverged(&self) -> bool {
        self.diverged_at.is_some()
    }

    pub fn final_val_loss(&self) -> f64 {
        self.val_loss.last().copied().unwrap_or(self.initial_val_loss)
    }

    /// Mean validation loss over the last `fraction` of the recorded epochs.
    pub fn trailing_val_loss(&self, fraction: f64) -> f64 {
        let n = self.val_loss.len();
        if n == 0 {
            return self.initial_val_loss;
        }
        let w = ((n as f64 * fraction).ceil() as usize).clamp(1, n);
        self.val_loss[n - w..].iter().sum::<f64>() / w as f64
    }
}

/// Everything a run needs besides its configuration.
pub struct Experiment {
    pub teacher: Mlp,
    pub train: Dataset,
    pub val: Dataset,
    pub student: Mlp,
}

impl Experiment {
    pub fn prepare(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let ds = cfg.data_seed();
        let teacher = cfg.teacher.build(cfg.input_dim, cfg.width, cfg.depth, &mut rng::stream(ds, &[tag::TEACHER]))?;
        let train = make_dataset(&teacher, cfg.n_train, &mut rng::stream(ds, &[tag::DATA_TRAIN]))?;
        let val = make_dataset(&teacher, cfg.n_val, &mut rng::stream(ds, &[tag::DATA_VAL]))?;
        let student = Mlp::init(
            &cfg.student_init,
            cfg.input_dim,
            cfg.width,
            cfg.depth,
            Activation::Relu,
            &mut rng::stream(cfg.seed, &[tag::STUDENT]),
        )?;
        Ok(Self { teacher, train, val, student })
    }
}

/// Trains `student` on `train` with minibatches in a per-epoch shuffled order.
pub fn train_student(cfg: &TrainConfig, mut student: Mlp, train: &Dataset, val: &Dataset) -> Result<TrainRun> {
    cfg.validate()?;
    let start = Instant::now();
    let mut opt = Optimizer::new(cfg.optimizer, &student)?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle = rng::stream(cfg.seed, &[tag::SHUFFLE]);
    let mut run = TrainRun {
        config: *cfg,
        config_digest: cfg.digest(),
        initial_train_loss: student.mse(&train.inputs, &train.targets)?,
        initial_val_loss: student.mse(&val.inputs, &val.targets)?,
        train_loss: Vec::with_capacity(cfg.epochs),
        val_loss: Vec::with_capacity(cfg.epochs),
        diverged_at: None,
        final_params_digest: String::new(),
        wall_time_secs: 0.0,
    };
    'epochs: for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let x = train.inputs.select(Axis(0), chunk);
            let y = train.targets.select(Axis(0), chunk);
            let pass = student.forward(&x)?;
            let loss = mlp::mse(pass.output(), &y);
            let grads = student.backward(&pass, &y)?;
            if !loss.is_finite() || !grads.is_finite() || !opt.step(&mut student, &grads) {
                run.diverged_at = Some(epoch);
                break 'epochs;
            }
            total += loss * chunk.len() as f64;
        }
        let val_loss = student.mse(&val.inputs, &val.targets)?;
        run.train_loss.push(total / train.len() as f64);
        run.val_loss.push(val_loss);
        if !val_loss.is_finite() {
            run.diverged_at = Some(epoch);
            break;
        }
    }
    run.final_params_digest = sha256_hex(&student.param_bytes());
    run.wall_time_secs = start.elapsed().as_secs_f64();
    Ok(run)
}

pub fn run_experiment(cfg: &TrainConfig) -> Result<TrainRun> {
    let exp = Experiment::prepare(cfg)?;
    train_student(cfg, exp.student, &exp.train, &exp.val)
}

/// Per-scheme statistics over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchemeSummary {
    pub label: String,
    pub scheme: InitScheme,
    pub seeds: Vec<u64>,
    /// Per-epoch mean and standard deviation of the validation loss over
    /// non-diverged seeds; index 0 is before training.
    pub mean_val: Vec<f64>,
    pub std_val: Vec<f64>,
    /// Final validation loss of each non-diverged seed.
    pub final_val: Vec<f64>,
    pub final_mean: f64,
    pub final_std: f64,
    pub diverged_seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingRow {
    pub epoch: usize,
    /// Scheme labels ordered from lowest to highest mean validation loss.
    pub order: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub template: TrainConfig,
    pub n_seeds: usize,
    pub schemes: Vec<SchemeSummary>,
    pub ranking: Vec<RankingRow>,
    #[serde(skip)]
    pub runs: Vec<Vec<TrainRun>>,
}

/// Seed pair of replicate `i`: student seed `template.seed + i`, data seed
/// `template.data_seed() + i`. Every scheme sees the same teachers and data.
pub fn replicate_config(template: &TrainConfig, scheme: &InitScheme, i: usize) -> TrainConfig {
    TrainConfig {
        student_init: *scheme,
        seed: template.seed.wrapping_add(i as u64),
        data_seed: Some(template.data_seed().wrapping_add(i as u64)),
        ..*template
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64;
    (m, v.sqrt())
}

/// Trains every scheme on `n_seeds` replicates and summarizes the curves.
pub fn compare_schemes(schemes: &[InitScheme], template: &TrainConfig, n_seeds: usize) -> Result<ComparisonReport> {
    if schemes.is_empty() || n_seeds == 0 {
        return Err(Error::invalid("compare", "need at least one scheme and one seed"));
    }
    let jobs: Vec<(usize, usize)> = (0..schemes.len()).flat_map(|s| (0..n_seeds).map(move |i| (s, i))).collect();
    let flat = jobs
        .par_iter()
        .map(|&(s, i)| run_experiment(&replicate_config(template, &schemes[s], i)))
        .collect::<Result<Vec<_>>>()?;
    let mut runs: Vec<Vec<TrainRun>> = vec![Vec::new(); schemes.len()];
    for ((s, _), run) in jobs.iter().zip(flat) {
        runs[*s].push(run);
    }

    let summaries: Vec<SchemeSummary> = schemes
        .iter()
        .zip(&runs)
        .map(|(scheme, rs)| {
            let ok: Vec<&TrainRun> = rs.iter().filter(|r| !r.diverged()).collect();
            let curves: Vec<Vec<f64>> = ok
                .iter()
                .map(|r| std::iter::once(r.initial_val_loss).chain(r.val_loss.iter().copied()).collect())
                .collect();
            let (mut mean_val, mut std_val) = (Vec::new(), Vec::new());
            for e in 0..=template.epochs {
                let (m, s) = mean_std(&curves.iter().map(|c| c[e]).collect::<Vec<_>>());
                mean_val.push(m);
                std_val.push(s);
            }
            let final_val: Vec<f64> = ok.iter().map(|r| r.final_val_loss()).collect();
            let (final_mean, final_std) = mean_std(&final_val);
            SchemeSummary {
                label: scheme.label(),
                scheme: *scheme,
                seeds: rs.iter().map(|r| r.config.seed).collect(),
                mean_val,
                std_val,
                final_val,
                final_mean,
                final_std,
                diverged_seeds: rs.iter().filter(|r| r.diverged()).map(|r| r.config.seed).collect(),
            }
        })
        .collect();

    let mut epochs: Vec<usize> =
        [template.epochs / 4, template.epochs / 2, template.epochs].into_iter().filter(|&e| e > 0).collect();
    epochs.dedup();
    let ranking = epochs
        .into_iter()
        .map(|epoch| {
            let mut order: Vec<(f64, String)> =
                summaries.iter().map(|s| (s.mean_val[epoch], s.label.clone())).collect();
            order.sort_by(|a, b| a.0.total_cmp(&b.0));
            RankingRow { epoch, order: order.into_iter().map(|(_, l)| l).collect() }
        })
        .collect();

    Ok(ComparisonReport { template: *template, n_seeds, schemes: summaries, ranking, runs })
}

/// Exact one-sided Mann-Whitney p-value for "values in `a` tend to be smaller than
/// values in `b`": `P(U >= u_obs)` under exchangeability, `U` counting pairs with
/// `a_i < b_j` (ties count one half, rounded down).
pub fn rank_test_less(a: &[f64], b: &[f64]) -> f64 {
    let (n, m) = (a.len(), b.len());
    if n == 0 || m == 0 {
        return 1.0;
    }
    let mut u2 = 0usize;
    for x in a {
        for y in b {
            if x < y {
                u2 += 2;
            } else if x == y {
                u2 += 1;
            }
        }
    }
    let u_obs = u2 / 2;
    // counts[i][j][u]: arrangements of i a's and j b's with statistic u.
    let max_u = n * m;
    let mut prev: Vec<Vec<f64>> = vec![vec![0.0; max_u + 1]; m + 1];
    for row in prev.iter_mut() {
        row[0] = 1.0;
    }
    for i in 1..=n {
        let mut cur: Vec<Vec<f64>> = vec![vec![0.0; max_u + 1]; m + 1];
        cur[0][0] = 1.0;
        for j in 1..=m {
            for u in 0..=max_u {
                // The largest element is either an a (adds no pairs) or a b
                // (exceeds all i a's).
                let from_a = prev[j][u];
                let from_b = if u >= i { cur[j - 1][u - i] } else { 0.0 };
                cur[j][u] = from_a + from_b;
            }
        }
        prev = cur;
    }
    let dist = &prev[m];
    let total: f64 = dist.iter().sum();
    dist[u_obs..].iter().sum::<f64>() / total
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TrainConfig {
        TrainConfig {
            depth: 3,
            width: 8,
            input_dim: 8,
            n_train: 64,
            n_val: 32,
            batch_size: 16,
            epochs: 5,
            ..TrainConfig::desk()
        }
    }

    #[test]
    fn identical_config_identical_run() {
        let a = run_experiment(&tiny()).unwrap();
        let b = run_experiment(&tiny()).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert_eq!(a.val_loss.len(), 5);
        assert_eq!(a.train_loss.len(), 5);
    }

    #[test]
    fn student_copying_teacher_is_exact() {
        let cfg = tiny();
        let exp = Experiment::prepare(&cfg).unwrap();
        let pass = exp.teacher.forward(&exp.train.inputs).unwrap();
        let grads = exp.teacher.backward(&pass, &exp.train.targets).unwrap();
        assert!(grads.norm() < 1e-12);
        let run = train_student(&cfg, exp.teacher.clone(), &exp.train, &exp.val).unwrap();
        assert!(run.initial_val_loss < 1e-20);
    }

    #[test]
    fn training_reduces_loss() {
        let cfg = TrainConfig { epochs: 40, ..tiny() };
        let run = run_experiment(&cfg).unwrap();
        assert!(!run.diverged());
        assert!(run.trailing_val_loss(0.1) < run.initial_val_loss);
    }

    #[test]
    fn divergence_is_flagged() {
        let cfg = TrainConfig { optimizer: OptimizerConfig::Sgd { lr: 1e6 }, epochs: 20, ..tiny() };
        let run = run_experiment(&cfg).unwrap();
        assert!(run.diverged());
        assert!(run.val_loss.len() < 20);
    }

    #[test]
    fn duplicate_scheme_gives_identical_curves() {
        let cfg = TrainConfig { epochs: 3, ..tiny() };
        let rep = compare_schemes(&[InitScheme::raai(), InitScheme::raai()], &cfg, 2).unwrap();
        assert_eq!(rep.schemes[0].mean_val, rep.schemes[1].mean_val);
        assert_eq!(rep.schemes[0].mean_val.len(), 4);
    }

    #[test]
    fn single_scheme_single_seed_is_one_run() {
        let cfg = TrainConfig { epochs: 3, ..tiny() };
        let rep = compare_schemes(&[InitScheme::he()], &cfg, 1).unwrap();
        let run = run_experiment(&replicate_config(&cfg, &InitScheme::he(), 0)).unwrap();
        assert_eq!(rep.schemes[0].final_val, vec![run.final_val_loss()]);
        assert_eq!(rep.schemes[0].std_val.iter().copied().fold(0.0, f64::max), 0.0);
    }

    #[test]
    fn rank_test_exact_values() {
        // Complete separation with 5 vs 5: p = 1 / C(10, 5).
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let b = [6.0, 7.0, 8.0, 9.0, 10.0];
        assert!((rank_test_less(&a, &b) - 1.0 / 252.0).abs() < 1e-15);
        assert!((rank_test_less(&b, &a) - 1.0).abs() < 1e-15);
        // 2 vs 2 with one inversion: U = 3; P(U >= 3) = 2/6.
        assert!((rank_test_less(&[1.0, 3.0], &[2.0, 4.0]) - 2.0 / 6.0).abs() < 1e-15);
    }
}
