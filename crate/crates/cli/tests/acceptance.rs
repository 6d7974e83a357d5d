//! Acceptance suite. Runs every criterion, prints one line each, and exits
//! nonzero if any fails.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use carvecache::backbone::{frobenius_diff, relative_error, Backbone, TokenMatrix};
use carvecache::carve::{run_slat_stage, CarveConfig, SlatStage};
use carvecache::cvxg::read_voxel_grid;
use carvecache::numerics::{fft_1d, fft_nd, naive_dft, unflatten, ComplexGrid, Direction, RealGrid};
use carvecache::pipeline::{run_end_to_end, MeshSettings};
use carvecache::sim::{compare_runs, run_oracle, spearman, RefinementBackbone, SimConfig, StructureBackbone};
use carvecache::spectralagg::{
    aggregate, analyze_and_aggregate, hfer, select_scale, AggSchedule, Mask2D, TokenSet, VoxelGrid,
    DEFAULT_CUTOFF, DEFAULT_WEIGHT,
};
use carvecache::stepcache::{run_ss_stage, StepCacheConfig};
use carvecache::trajectory::StepDecision;
use carvecache::Result;
use carvecache_cli::runner::fixture_files;
use ndarray::{Array2, Axis};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = std::result::Result<String, String>;
type Check = (&'static str, fn() -> Outcome);

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rand_complex(rng: &mut ChaCha8Rng, n: usize) -> Vec<Complex64> {
    (0..n)
        .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
        .collect()
}

/// Direct sum over every bin of an N-d grid.
fn direct_dft_nd(dims: &[usize], values: &[Complex64], sign: f64) -> Vec<Complex64> {
    let total = values.len();
    (0..total)
        .map(|k| {
            let kk = unflatten(dims, k);
            let mut acc = Complex64::new(0.0, 0.0);
            for (n, v) in values.iter().enumerate() {
                let nn = unflatten(dims, n);
                let phase: f64 = (0..dims.len())
                    .map(|a| (kk[a] * nn[a] % dims[a]) as f64 / dims[a] as f64)
                    .sum();
                acc += v * Complex64::from_polar(1.0, sign * std::f64::consts::TAU * phase);
            }
            acc
        })
        .collect()
}

fn max_abs(a: &[Complex64], b: &[Complex64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
}

fn energy(v: &[Complex64]) -> f64 {
    v.iter().map(|c| c.norm_sqr()).sum()
}

fn c1_fft() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_fwd = 0.0f64;
    let mut worst_rt = 0.0f64;
    let mut worst_parseval = 0.0f64;
    let primes = [2usize, 3, 5, 7, 11, 13, 17, 31, 61, 97, 127];
    for case in 0..200 {
        let (dims, signal) = if case % 2 == 0 {
            let n = if case % 4 == 0 {
                primes[(case / 4) % primes.len()]
            } else {
                rng.random_range(1..=128)
            };
            (vec![n], rand_complex(&mut rng, n))
        } else {
            let rank = rng.random_range(2..=3);
            let dims: Vec<usize> = (0..rank).map(|_| rng.random_range(1..=8)).collect();
            let n = dims.iter().product();
            (dims, rand_complex(&mut rng, n))
        };
        let n = signal.len() as f64;
        let forward = if dims.len() == 1 {
            let f = fft_1d(&signal, Direction::Forward).map_err(|e| e.to_string())?;
            let naive = naive_dft(&signal, Direction::Forward).map_err(|e| e.to_string())?;
            worst_fwd = worst_fwd.max(max_abs(&f, &naive));
            let back = fft_1d(&f, Direction::Inverse).map_err(|e| e.to_string())?;
            worst_rt = worst_rt.max(max_abs(&back, &signal));
            f
        } else {
            let grid = ComplexGrid::new(dims.clone(), signal.clone()).map_err(|e| e.to_string())?;
            let f = fft_nd(&grid, Direction::Forward).map_err(|e| e.to_string())?;
            let direct = direct_dft_nd(&dims, &signal, -1.0);
            worst_fwd = worst_fwd.max(max_abs(f.values(), &direct));
            let back = fft_nd(&f, Direction::Inverse).map_err(|e| e.to_string())?;
            worst_rt = worst_rt.max(max_abs(back.values(), &signal));
            f.into_values()
        };
        let e = energy(&signal);
        if e > 0.0 {
            worst_parseval = worst_parseval.max((energy(&forward) / n - e).abs() / e);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(worst_fwd < 1e-8, || format!("forward max-abs error {worst_fwd:e}"))?;
    ensure(worst_rt < 1e-9, || format!("round-trip error {worst_rt:e}"))?;
    ensure(worst_parseval < 1e-9, || format!("Parseval error {worst_parseval:e}"))?;
    ensure(secs < 10.0, || format!("took {secs:.2}s"))?;
    Ok(format!(
        "200 cases, max err {worst_fwd:.1e}, round trip {worst_rt:.1e}, Parseval {worst_parseval:.1e}, {secs:.2}s"
    ))
}

fn affine_config(seed: u64) -> SimConfig {
    SimConfig {
        seed,
        token_count: 256,
        shape_smoothness: 1,
        noise_sigma: 0.0,
        layout_oscillation_amp: 0.0,
        ..SimConfig::default()
    }
}

fn c2_linear_exactness() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..50 {
        let sim = affine_config(seed);
        let b = StructureBackbone::new(&sim).map_err(|e| e.to_string())?;
        let oracle = run_oracle(&b, sim.total_steps).map_err(|e| e.to_string())?;
        for k in [2usize, 3, 5] {
            // pure linear extrapolation on every stream
            let cfg = StepCacheConfig {
                stride_k: k,
                momentum_beta: 1.0,
                ..StepCacheConfig::default()
            };
            let (rec, metrics) = run_ss_stage(&b, b.partition().unwrap(), &cfg).map_err(|e| e.to_string())?;
            let err = relative_error(&rec.final_latent, &oracle.final_latent);
            worst = worst.max(err);
            let expected = cfg.warmup_steps + (cfg.total_steps - cfg.warmup_steps).div_ceil(k);
            ensure(metrics.full_eval_count == expected, || {
                format!("seed {seed} k={k}: {} full evals, expected {expected}", metrics.full_eval_count)
            })?;
            ensure(err < 1e-9, || format!("seed {seed} k={k}: final error {err:e}"))?;
        }
    }
    let count = StepCacheConfig::default().full_eval_count();
    ensure(count == 10, || format!("N=25 warmup=2 k=3 gives {count}"))?;
    Ok(format!("150 runs, worst final error {worst:.1e}, N=25/k=3 count {count} (2.5x fewer evals)"))
}

fn c3_momentum() -> Outcome {
    let start = Instant::now();
    let seeds = 20;
    let mut drift = [0.0f64; 2];
    for seed in 0..seeds {
        let sim = SimConfig {
            seed,
            ..SimConfig::default()
        };
        ensure(sim.layout_oscillation_amp > 0.0, || "default family is not volatile".into())?;
        let b = StructureBackbone::new(&sim).map_err(|e| e.to_string())?;
        let oracle = run_oracle(&b, sim.total_steps).map_err(|e| e.to_string())?;
        for (slot, beta) in [0.5, 1.0].into_iter().enumerate() {
            let cfg = StepCacheConfig {
                momentum_beta: beta,
                ..StepCacheConfig::default()
            };
            let (rec, _) = run_ss_stage(&b, b.partition().unwrap(), &cfg).map_err(|e| e.to_string())?;
            drift[slot] += compare_runs(&rec, &oracle).map_err(|e| e.to_string())?.layout_drift;
        }
    }
    let [d05, d10] = drift.map(|d| d / seeds as f64);
    let secs = start.elapsed().as_secs_f64();
    ensure(d05 < d10, || format!("drift(0.5)={d05:.4} not below drift(1.0)={d10:.4}"))?;
    ensure(secs < 30.0, || format!("took {secs:.2}s"))?;
    Ok(format!("{seeds} seeds, drift(0.5)={d05:.4} < drift(1.0)={d10:.4}, {secs:.2}s"))
}

fn max_deviation(a: &carvecache::TrajectoryRecord, b: &carvecache::TrajectoryRecord) -> f64 {
    a.outputs
        .iter()
        .zip(&b.outputs)
        .map(|(x, y)| frobenius_diff(x, y))
        .chain(std::iter::once(frobenius_diff(&a.final_latent, &b.final_latent)))
        .fold(0.0, f64::max)
}

fn c4_degenerate() -> Outcome {
    let mut worst_ss = 0.0f64;
    let mut worst_slat = 0.0f64;
    for seed in 0..10 {
        let sim = SimConfig {
            seed,
            ..SimConfig::default()
        };
        let s = StructureBackbone::new(&sim).map_err(|e| e.to_string())?;
        let cfg = StepCacheConfig {
            stride_k: 1,
            ..StepCacheConfig::default()
        };
        let (rec, _) = run_ss_stage(&s, s.partition().unwrap(), &cfg).map_err(|e| e.to_string())?;
        worst_ss = worst_ss.max(max_deviation(&rec, &run_oracle(&s, 25).map_err(|e| e.to_string())?));

        let r = RefinementBackbone::new(&sim).map_err(|e| e.to_string())?;
        let carve = CarveConfig {
            keep_ratio: 1.0,
            error_threshold: 0.0,
            ..CarveConfig::default()
        };
        let (rec, _) = run_slat_stage(&r, &carve, 25).map_err(|e| e.to_string())?;
        worst_slat = worst_slat.max(max_deviation(&rec, &run_oracle(&r, 25).map_err(|e| e.to_string())?));
    }
    ensure(worst_ss <= 1e-12, || format!("k=1 deviates by {worst_ss:e}"))?;
    ensure(worst_slat <= 1e-12, || format!("keep=1, E=0 deviates by {worst_slat:e}"))?;
    Ok(format!("10 seeds, max deviation ss {worst_ss:.1e}, slat {worst_slat:.1e}"))
}

fn c5_saliency() -> Outcome {
    let mut rhos = Vec::new();
    let mut hits = Vec::new();
    for seed in 0..5 {
        let sim = SimConfig {
            seed,
            active_fraction: 0.1,
            ..SimConfig::default()
        };
        let r = RefinementBackbone::new(&sim).map_err(|e| e.to_string())?;
        let oracle = run_oracle(&r, sim.total_steps).map_err(|e| e.to_string())?;
        // carve on every post-warmup step so every step yields a saliency map
        let carve = CarveConfig {
            error_threshold: 0.0,
            ..CarveConfig::default()
        };
        let (rec, _) = run_slat_stage(&r, &carve, sim.total_steps).map_err(|e| e.to_string())?;
        let active: Vec<usize> = (0..sim.token_count).filter(|&i| r.active_mask()[i]).collect();
        for event in &rec.carve_events {
            let t = event.step;
            let change: Vec<f64> = (0..sim.token_count)
                .map(|i| {
                    let d = &oracle.outputs[t].row(i) - &oracle.outputs[t - 1].row(i);
                    d.dot(&d).sqrt()
                })
                .collect();
            rhos.push(spearman(&event.importance, &change).map_err(|e| e.to_string())?);
            let kept: BTreeSet<usize> = event.active.iter().copied().collect();
            let inside = active.iter().filter(|i| kept.contains(i)).count();
            hits.push(inside as f64 / active.len() as f64);
        }
    }
    ensure(!rhos.is_empty(), || "no carve events".into())?;
    let rho = rhos.iter().sum::<f64>() / rhos.len() as f64;
    let hit = hits.iter().sum::<f64>() / hits.len() as f64;
    ensure(rho > 0.5, || format!("mean Spearman {rho:.4}"))?;
    ensure(hit >= 0.8, || format!("active tokens inside top-10% mask {hit:.4}"))?;
    Ok(format!("{} carved steps, mean Spearman {rho:.4}, active inside mask {:.1}%", rhos.len(), hit * 100.0))
}

/// `v = x + c` held exactly by tangent reuse; Euler with `h` keeps `ε = h`.
struct ConstantOffset {
    x0: TokenMatrix,
    c: TokenMatrix,
    h: f64,
}

impl Backbone for ConstantOffset {
    fn token_count(&self) -> usize {
        self.x0.nrows()
    }
    fn feature_dim(&self) -> usize {
        self.x0.ncols()
    }
    fn initial_latent(&self) -> TokenMatrix {
        self.x0.clone()
    }
    fn eval_rows(&self, x: &TokenMatrix, _step: usize, rows: &[usize]) -> Result<TokenMatrix> {
        Ok(&x.select(Axis(0), rows) + &self.c.select(Axis(0), rows))
    }
    fn step_size(&self) -> f64 {
        self.h
    }
}

fn c6_error_budget() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let backbone = ConstantOffset {
        x0: Array2::from_shape_simple_fn((20, 3), || rng.random_range(-1.0..1.0)),
        c: Array2::from_shape_simple_fn((20, 3), || rng.random_range(-1.0..1.0)),
        h: 0.6,
    };
    let mut checked = 0;
    let mut headline = Vec::new();
    for threshold in [0.5, 1.0, 1.5, 2.0, 2.5, 3.1] {
        for warmup in 0..=4usize {
            let cfg = CarveConfig {
                error_threshold: threshold,
                warmup_steps: warmup,
                ..CarveConfig::default()
            };
            // independent enumeration of the budget arithmetic
            // an anchor with no earlier backbone output has no curvature and
            // saturates the budget on the next step
            let mut expected = Vec::new();
            let mut e = 0.0;
            for t in 0..25usize {
                if t < warmup || expected.is_empty() {
                    expected.push(t);
                    continue;
                }
                e += if expected.len() == 1 { f64::INFINITY } else { 0.6 };
                if e >= threshold {
                    expected.push(t);
                    e = 0.0;
                }
            }
            let mut stage = SlatStage::new(&backbone, cfg).map_err(|e| e.to_string())?;
            let mut x = backbone.initial_latent();
            let mut fired = Vec::new();
            for t in 0..25 {
                let out = stage.step(t, &x).map_err(|e| e.to_string())?;
                let budget = stage.cache().map(|c| c.accumulated_error).unwrap_or(0.0);
                if out.decision.runs_backbone() {
                    fired.push(t);
                    ensure(budget == 0.0, || format!("E={budget} after refresh at {t}"))?;
                } else {
                    ensure(out.decision == StepDecision::TangentReuse, || format!("step {t}: {:?}", out.decision))?;
                    ensure(budget > 0.0 && budget < threshold, || {
                        format!("E={budget} on reuse step {t} with threshold {threshold}")
                    })?;
                }
                x = backbone.advance(&x, &out.output, t);
            }
            ensure(fired == expected, || {
                format!("threshold {threshold} warmup {warmup}: fired {fired:?}, expected {expected:?}")
            })?;
            if threshold == 1.5 && warmup == 2 {
                headline = fired;
            }
            checked += 1;
        }
    }
    ensure(headline == vec![0, 1, 4, 7, 10, 13, 16, 19, 22], || format!("E=1.5 refreshes {headline:?}"))?;
    Ok(format!("{checked} schedules exact; threshold 1.5 refreshes at {headline:?}"))
}

fn c7_end_to_end() -> Outcome {
    let mut ratios = Vec::new();
    let mut errors = Vec::new();
    for seed in 0..5 {
        let sim = SimConfig {
            seed,
            ..SimConfig::default()
        };
        let run = run_end_to_end(
            &sim,
            &StepCacheConfig::default(),
            &CarveConfig::default(),
            &MeshSettings::default(),
        )
        .map_err(|e| e.to_string())?;
        ensure(run.flops_ratio <= 0.5, || format!("seed {seed}: flops ratio {:.3}", run.flops_ratio))?;
        ensure(run.final_error < 0.05, || format!("seed {seed}: final error {:.4}", run.final_error))?;
        ratios.push(run.flops_ratio);
        errors.push(run.final_error);
    }
    let worst_ratio = ratios.iter().copied().fold(0.0, f64::max);
    let worst_err = errors.iter().copied().fold(0.0, f64::max);
    Ok(format!("5 seeds, flops ratio <= {worst_ratio:.3}, final error <= {worst_err:.4}"))
}

/// Separable direct DFT power, independent of the FFT kernels.
fn direct_power(dims: &[usize], values: &[f64]) -> Vec<f64> {
    let mut data: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    let total = data.len();
    for axis in 0..dims.len() {
        let n = dims[axis];
        let stride: usize = dims[axis + 1..].iter().product();
        let mut out = vec![Complex64::new(0.0, 0.0); total];
        for (idx, slot) in out.iter_mut().enumerate() {
            let k = (idx / stride) % n;
            let base = idx - k * stride;
            for j in 0..n {
                let w = Complex64::from_polar(1.0, -std::f64::consts::TAU * ((k * j) % n) as f64 / n as f64);
                *slot += data[base + j * stride] * w;
            }
        }
        data = out;
    }
    data.iter().map(|c| c.norm_sqr()).collect()
}

/// Ratio of power in bins past the radial cutoff, counted bin by bin.
fn bin_count_hfer(dims: &[usize], values: &[f64], cutoff: f64) -> f64 {
    let power = direct_power(dims, values);
    let max_r: f64 = dims
        .iter()
        .map(|&n| ((n / 2) as f64 / n as f64).powi(2))
        .sum::<f64>()
        .sqrt();
    let mut high = 0.0;
    let mut total = 0.0;
    for (flat, p) in power.iter().enumerate() {
        let idx = unflatten(dims, flat);
        let r: f64 = dims
            .iter()
            .zip(&idx)
            .map(|(&n, &k)| (k.min(n - k) as f64 / n as f64).powi(2))
            .sum::<f64>()
            .sqrt();
        total += p;
        if r > cutoff * max_r && r > 0.0 {
            high += p;
        }
    }
    if total == 0.0 {
        0.0
    } else {
        high / total
    }
}

fn c8_spectral_schedule() -> Outcome {
    let s = AggSchedule::default();
    let eps = 1e-9;
    let cases = [
        (s.tau_low, 1.5),
        (s.tau_high, 1.5),
        (s.tau_low - eps, 2.0),
        (s.tau_high + eps, 1.25),
        (0.75, 1.25),
        (0.6, 1.5),
        (0.2, 2.0),
    ];
    for (h, want) in cases {
        let got = select_scale(h, &s);
        ensure(got == want, || format!("select_scale({h}) = {got}, expected {want}"))?;
    }
    let zero = AggSchedule {
        tau_low: 0.0,
        tau_high: 0.0,
        ..s
    };
    ensure(select_scale(0.3, &zero) == 1.25, || "tau = {0, 0} does not select 1.25".into())?;

    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let mut details = Vec::new();
    for (name, want) in [("smooth-ellipsoid", 2.0), ("checkerboard", 1.25)] {
        let (mask_file, voxel_file) = fixture_files(name);
        let mask_grid = read_voxel_grid(dir.join(&mask_file)).map_err(|e| format!("{mask_file}: {e}"))?;
        let voxel_grid = read_voxel_grid(dir.join(&voxel_file)).map_err(|e| format!("{voxel_file}: {e}"))?;
        let mask = Mask2D::from_grid(&mask_grid).map_err(|e| e.to_string())?;
        let voxels = VoxelGrid::from_grid(&voxel_grid).map_err(|e| e.to_string())?;
        let tokens = carvecache::fixtures::tokens_from_voxels(&voxels);
        let out = analyze_and_aggregate(&mask, &voxels, &tokens, &s, DEFAULT_CUTOFF, DEFAULT_WEIGHT)
            .map_err(|e| e.to_string())?;
        let h2 = bin_count_hfer(&[64, 64], mask.values(), DEFAULT_CUTOFF);
        let h3 = bin_count_hfer(&[32, 32, 32], voxels.values(), DEFAULT_CUTOFF);
        ensure((out.profile.hfer_2d - h2).abs() < 1e-9, || format!("{name}: 2D HFER {} vs oracle {h2}", out.profile.hfer_2d))?;
        ensure((out.profile.hfer_3d - h3).abs() < 1e-9, || format!("{name}: 3D HFER {} vs oracle {h3}", out.profile.hfer_3d))?;
        let joint = DEFAULT_WEIGHT * h2 + (1.0 - DEFAULT_WEIGHT) * h3;
        ensure(select_scale(joint, &s) == want, || format!("{name}: oracle joint {joint} misses {want}"))?;
        ensure(out.factor == want, || format!("{name}: factor {} expected {want}", out.factor))?;
        details.push(format!("{name} joint {:.4} -> {:.2}", out.profile.joint, out.factor));
    }
    let impulse = RealGrid::from_fn(vec![16, 16, 16], |i| if i == [8, 8, 8] { 1.0 } else { 0.0 })
        .map_err(|e| e.to_string())?;
    let h = hfer(&impulse, DEFAULT_CUTOFF).map_err(|e| e.to_string())?;
    let oracle = bin_count_hfer(&[16, 16, 16], impulse.values(), DEFAULT_CUTOFF);
    ensure((h - oracle).abs() < 1e-12, || format!("impulse HFER {h} vs {oracle}"))?;
    Ok(format!("boundaries exact; {}", details.join(", ")))
}

fn c9_aggregation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for case in 0..100 {
        let n = rng.random_range(1..=600);
        let width = rng.random_range(1..=4);
        let mut cells = BTreeSet::new();
        while cells.len() < n {
            cells.insert([rng.random_range(0..16i64), rng.random_range(0..16i64), rng.random_range(0..16i64)]);
        }
        let positions: Vec<[i64; 3]> = cells.into_iter().collect();
        let features = Array2::from_shape_simple_fn((n, width), || rng.random_range(-5.0..5.0));
        let tokens = TokenSet::new(positions, features).map_err(|e| e.to_string())?;
        let scale = [1.0, 1.25, 1.5, 2.0, 3.0][case % 5];
        let got = aggregate(&tokens, scale).map_err(|e| e.to_string())?;

        let mut oracle: BTreeMap<[i64; 3], Vec<f64>> = BTreeMap::new();
        for (p, row) in tokens.positions().iter().zip(tokens.features().rows()) {
            let bin = p.map(|c| (c as f64 / scale).floor() as i64);
            let slot = oracle.entry(bin).or_insert_with(|| vec![f64::NEG_INFINITY; width]);
            for (s, &v) in slot.iter_mut().zip(row.iter()) {
                if v > *s {
                    *s = v;
                }
            }
        }
        let got_map: BTreeMap<[i64; 3], Vec<f64>> = got
            .positions()
            .iter()
            .copied()
            .zip(got.features().rows().into_iter().map(|r| r.to_vec()))
            .collect();
        ensure(got.len() == got_map.len(), || format!("case {case}: duplicate output bins"))?;
        ensure(got_map == oracle, || format!("case {case}: bins differ from brute force"))?;
    }
    let dense: Vec<[i64; 3]> = (0..32)
        .flat_map(|x| (0..32).flat_map(move |y| (0..32).map(move |z| [x, y, z])))
        .collect();
    let tokens = TokenSet::new(dense, Array2::ones((32768, 2))).map_err(|e| e.to_string())?;
    let out = aggregate(&tokens, 2.0).map_err(|e| e.to_string())?;
    ensure(out.len() == 4096, || format!("dense 32^3 at S=2 gives {}", out.len()))?;
    Ok(format!("100 random sets match brute force; 32768 -> {} tokens ({}x)", out.len(), 32768 / out.len()))
}

fn c10_reproducibility() -> Outcome {
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let (mask, voxels) = fixture_files("checkerboard");
    let mask = fixtures.join(mask).to_string_lossy().into_owned();
    let voxels = fixtures.join(voxels).to_string_lossy().into_owned();
    let invocations: Vec<Vec<&str>> = vec![
        vec!["ss-cache", "--seeds", "3,1"],
        vec!["slat-carve", "--seeds", "5"],
        vec!["end2end", "--seeds", "7", "--format", "json"],
        vec!["mesh-agg", "--mask", &mask, "--voxels", &voxels],
        vec!["mesh-agg", "--seeds", "2"],
        vec!["sweep", "--sweep-stage", "ss-cache", "--sweep-parameter", "momentum_beta", "--sweep-values", "1.0,0.5", "--seeds", "0,1"],
    ];
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    for (i, args) in invocations.iter().enumerate() {
        let mut outputs = Vec::new();
        for run in 0..2 {
            let path = dir.path().join(format!("{i}-{run}.out"));
            let status = Command::new(env!("CARGO_BIN_EXE_carvecache"))
                .args(args)
                .arg("--output")
                .arg(&path)
                .env_remove("CARVECACHE_OUTPUT_DIR")
                .output()
                .map_err(|e| e.to_string())?;
            ensure(status.status.success(), || {
                format!("{args:?}: {}", String::from_utf8_lossy(&status.stderr))
            })?;
            outputs.push(std::fs::read(&path).map_err(|e| e.to_string())?);
        }
        ensure(outputs[0] == outputs[1], || format!("{args:?} produced different bytes"))?;
    }
    Ok(format!("{} invocations byte-identical across two runs", invocations.len()))
}

fn main() {
    let criteria: [Check; 10] = [
        ("FFT correctness", c1_fft),
        ("linear exactness of step caching", c2_linear_exactness),
        ("momentum anchoring benefit", c3_momentum),
        ("degenerate equivalence", c4_degenerate),
        ("saliency fidelity", c5_saliency),
        ("error-budget mechanics", c6_error_budget),
        ("end-to-end compute and fidelity", c7_end_to_end),
        ("spectral schedule", c8_spectral_schedule),
        ("aggregation correctness", c9_aggregation),
        ("reproducibility", c10_reproducibility),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".to_string()))
        });
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
