//! Ablation matrix: variants × seeds, aggregated into one CSV.

use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{anyhow, bail, Result};
use curl_core::agents::UpdateFlags;

use crate::config::{AgentKind, ExperimentConfig};
use crate::metrics::{mean_std, MetricsRow};
use crate::train::Trainer;

/// A named change to the base config.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Joint CURL + RL, the base config as given.
    Curl,
    /// SAC from pixels without contrastive loss or augmentation.
    PixelSac,
    NoCurl,
    DetachEncoder,
    FirstFrame,
    NoAugRl,
    /// SAC on the true state.
    StateSac,
}

impl Variant {
    pub const ALL: [Variant; 7] =
        [Variant::Curl, Variant::PixelSac, Variant::NoCurl, Variant::DetachEncoder, Variant::FirstFrame, Variant::NoAugRl, Variant::StateSac];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Curl => "curl",
            Variant::PixelSac => "pixel_sac",
            Variant::NoCurl => "no_curl",
            Variant::DetachEncoder => "detach_encoder",
            Variant::FirstFrame => "first_frame",
            Variant::NoAugRl => "no_aug_rl",
            Variant::StateSac => "state_sac",
        }
    }

    pub fn apply(self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut c = base.clone();
        let f = &mut c.ablation;
        match self {
            Variant::Curl => {}
            Variant::PixelSac => {
                *f = UpdateFlags { no_curl: true, no_aug_rl: true, ..UpdateFlags::default() };
            }
            Variant::NoCurl => f.no_curl = true,
            Variant::DetachEncoder => f.detach_encoder = true,
            Variant::FirstFrame => f.first_frame_contrastive = true,
            Variant::NoAugRl => f.no_aug_rl = true,
            Variant::StateSac => {
                c.agent = AgentKind::StateSacOracle;
                c.ablation = UpdateFlags::default();
            }
        }
        c
    }
}

impl FromStr for Variant {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL.into_iter().find(|v| v.as_str() == s).ok_or_else(|| {
            let names: Vec<_> = Variant::ALL.iter().map(|v| v.as_str()).collect();
            anyhow!("unknown variant `{s}` (expected one of {})", names.join(", "))
        })
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub variant: Variant,
    pub seed: u64,
    pub last: MetricsRow,
    pub rows: Vec<MetricsRow>,
}

impl RunResult {
    pub fn final_eval(&self) -> f64 {
        self.last.eval_mean.unwrap_or(f64::NAN)
    }
}

/// One full training run of `variant` at `seed`.
pub fn run_one(base: &ExperimentConfig, variant: Variant, seed: u64) -> Result<RunResult> {
    let mut config = variant.apply(base);
    config.seed = seed;
    let mut t = Trainer::new(config)?;
    t.run()?;
    let rows = t.rows().to_vec();
    let last = *rows.last().ok_or_else(|| anyhow!("run produced no rows"))?;
    Ok(RunResult { variant, seed, last, rows })
}

/// Runs the cross product on at most `workers` threads. Results come back in
/// (variant, seed) order regardless of scheduling. Every variant sees the same
/// seeds, so env and eval streams are paired across variants.
pub fn run_matrix(base: &ExperimentConfig, variants: &[Variant], seeds: &[u64], workers: usize) -> Result<Vec<RunResult>> {
    if variants.is_empty() || seeds.is_empty() {
        bail!("ablation needs at least one variant and one seed");
    }
    for v in variants {
        v.apply(base).validate()?;
    }
    let jobs: Vec<(Variant, u64)> = variants.iter().flat_map(|&v| seeds.iter().map(move |&s| (v, s))).collect();
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<RunResult>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers.clamp(1, jobs.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(v, s)) = jobs.get(i) else { break };
                log::info!("ablation run {}/{}: {} seed {s}", i + 1, jobs.len(), v.as_str());
                let r = run_one(base, v, s);
                results.lock().expect("result slot poisoned")[i] = Some(r);
            });
        }
    });
    results.into_inner().expect("result slot poisoned").into_iter().map(|r| r.expect("every job ran")).collect()
}

pub const SUMMARY_HEADER: &str = "variant,seeds,mean_return,std_return,per_seed";

/// Per-variant mean ± population std of the final evaluation return.
pub fn summary_csv(results: &[RunResult]) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    let mut order: Vec<Variant> = Vec::new();
    for r in results {
        if !order.contains(&r.variant) {
            order.push(r.variant);
        }
    }
    for v in order {
        let runs: Vec<&RunResult> = results.iter().filter(|r| r.variant == v).collect();
        let finals: Vec<f64> = runs.iter().map(|r| r.final_eval()).collect();
        let (m, s) = mean_std(&finals);
        let per: Vec<String> = runs.iter().map(|r| format!("{}:{:.6}", r.seed, r.final_eval())).collect();
        out.push_str(&format!("{},{},{m:.6},{s:.6},{}\n", v.as_str(), runs.len(), per.join(";")));
    }
    out
}

/// Mean final return of one variant.
pub fn variant_mean(results: &[RunResult], v: Variant) -> Option<f64> {
    let finals: Vec<f64> = results.iter().filter(|r| r.variant == v).map(RunResult::final_eval).collect();
    (!finals.is_empty()).then(|| mean_std(&finals).0)
}

/// Writes the summary plus each run's metrics under `out`.
pub fn write_results(out: &Path, results: &[RunResult]) -> Result<()> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("ablation.csv"), summary_csv(results))?;
    for r in results {
        let name = format!("{}_seed{}.csv", r.variant.as_str(), r.seed);
        std::fs::write(out.join(name), crate::metrics::to_csv(&r.rows))?;
    }
    Ok(())
}
