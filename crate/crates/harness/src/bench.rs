//! Parameter counts and scan timings. Every timed pair of routes is also
//! compared, so a fast but wrong route shows up in the same table.

use std::collections::BTreeMap;
use std::time::Instant;

use hmr_core::autodiff::Graph;
use hmr_core::blocks::{dual_scan_block, init_dual_scan, Init, ParamStore, ScanLayout};
use hmr_core::kinematics::ScanOrder;
use hmr_core::ssm::{build_conv_kernel, discretize_zoh, scan_convolutional, scan_recurrent, Segments, SsmParams};
use hmr_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{HarnessError, Result};

pub const DEFAULT_SIZES: [usize; 4] = [16, 64, 256, 1024];
/// State size of the benchmarked LTI scans.
const BENCH_STATE: usize = 16;
/// Outputs of the two routes must agree to this while being timed.
pub const BENCH_TOL: f64 = 1e-10;

/// Recurrent vs convolutional LTI scan at one length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanRow {
    #[serde(rename = "L")]
    pub len: usize,
    pub repeats: usize,
    pub recurrent_s: f64,
    pub conv_s: f64,
    pub recurrent_tokens_per_s: f64,
    pub conv_tokens_per_s: f64,
    pub max_abs_diff: f64,
}

/// Forward time of one dual-scan block at one length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockRow {
    #[serde(rename = "L")]
    pub len: usize,
    pub dim: usize,
    pub block_s: f64,
    pub block_tokens_per_s: f64,
    /// Difference between two forward passes on fresh graphs.
    pub max_abs_diff: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub parameters: usize,
    /// Parameter count per top-level weight group.
    pub parameter_groups: BTreeMap<String, usize>,
    pub n_state: usize,
    pub scans: Vec<ScanRow>,
    pub blocks: Vec<BlockRow>,
    /// All timed routes agreed within tolerance.
    pub outputs_agree: bool,
}

impl BenchReport {
    /// CSV with one row per `(kind, L)`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["kind", "L", "seconds", "tokens_per_s", "max_abs_diff"])?;
        for r in &self.scans {
            let (l, d) = (r.len.to_string(), format!("{:e}", r.max_abs_diff));
            w.write_record(["recurrent", &l, &r.recurrent_s.to_string(), &r.recurrent_tokens_per_s.to_string(), &d])?;
            w.write_record(["convolutional", &l, &r.conv_s.to_string(), &r.conv_tokens_per_s.to_string(), &d])?;
        }
        for r in &self.blocks {
            let d = format!("{:e}", r.max_abs_diff);
            w.write_record(["dual_scan_block", &r.len.to_string(), &r.block_s.to_string(), &r.block_tokens_per_s.to_string(), &d])?;
        }
        Ok(String::from_utf8(w.into_inner().map_err(|e| e.into_error())?).expect("csv is utf-8"))
    }
}

/// Weight count per name prefix up to the first dot.
pub fn parameter_groups(store: &ParamStore) -> BTreeMap<String, usize> {
    let mut groups = BTreeMap::new();
    for (name, t) in store.iter() {
        let key = name.split('.').next().unwrap_or(name).to_string();
        *groups.entry(key).or_insert(0) += t.numel();
    }
    groups
}

/// Repeat `f` until about `budget` seconds have passed; mean seconds per call.
fn time<T>(budget: f64, mut f: impl FnMut() -> T) -> (f64, usize, T) {
    let start = Instant::now();
    let mut out = f();
    let mut n = 1;
    while start.elapsed().as_secs_f64() < budget {
        out = f();
        n += 1;
    }
    (start.elapsed().as_secs_f64() / n as f64, n, out)
}

pub fn bench(cfg: &RunConfig, sizes: &[usize]) -> Result<BenchReport> {
    if sizes.is_empty() || sizes.contains(&0) {
        return Err(HarnessError::Usage(format!("bench sizes must be non-empty and >= 1, got {sizes:?}")));
    }
    let params = cfg.model_config().init(cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let lti = SsmParams {
        a: (0..BENCH_STATE).map(|_| -rng.random_range(0.01..2.0)).collect(),
        b: (0..BENCH_STATE).map(|_| rng.random_range(-1.0..1.0)).collect(),
        c: (0..BENCH_STATE).map(|_| rng.random_range(-1.0..1.0)).collect(),
        delta: 0.1,
    };
    let disc = discretize_zoh(&lti)?;

    let mut scans = Vec::new();
    for &len in sizes {
        let x: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (rec_s, repeats, rec) = time(0.05, || scan_recurrent(&disc, &lti.c, &x));
        let (conv_s, _, conv) = time(0.05, || build_conv_kernel(&disc, &lti.c, len).and_then(|k| scan_convolutional(&k, &x)));
        let max_abs_diff = rec?.iter().zip(conv?).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        scans.push(ScanRow {
            len,
            repeats,
            recurrent_s: rec_s,
            conv_s,
            recurrent_tokens_per_s: len as f64 / rec_s,
            conv_tokens_per_s: len as f64 / conv_s,
            max_abs_diff,
        });
    }

    let scan_cfg = cfg.model_config().scan();
    let mut store = ParamStore::new();
    init_dual_scan(&mut Init { rng: &mut rng, store: &mut store }, "bench", &scan_cfg);
    let mut blocks = Vec::new();
    for &len in sizes {
        let layout = ScanLayout {
            global: ScanOrder::identity(Segments::single(len)),
            local: ScanOrder::identity(Segments::single(len)).reversed(),
        };
        let x = Tensor::new(&[len, scan_cfg.dim], (0..len * scan_cfg.dim).map(|_| rng.random_range(-1.0..1.0)).collect())?;
        let forward = || -> hmr_core::Result<Tensor> {
            let mut g = Graph::new();
            let p = store.bind(&mut g);
            let xv = g.constant(x.clone());
            let y = dual_scan_block(&mut g, &p, "bench", &scan_cfg, xv, &layout)?;
            Ok(g.value(y).clone())
        };
        let first = forward()?;
        let (block_s, _, again) = time(0.05, forward);
        blocks.push(BlockRow {
            len,
            dim: scan_cfg.dim,
            block_s,
            block_tokens_per_s: len as f64 / block_s,
            max_abs_diff: first.max_abs_diff(&again?).unwrap_or(f64::INFINITY),
        });
    }
    let outputs_agree =
        scans.iter().map(|r| r.max_abs_diff).chain(blocks.iter().map(|r| r.max_abs_diff)).all(|d| d < BENCH_TOL);
    Ok(BenchReport {
        parameters: params.num_scalars(),
        parameter_groups: parameter_groups(&params),
        n_state: BENCH_STATE,
        scans,
        blocks,
        outputs_agree,
    })
}
