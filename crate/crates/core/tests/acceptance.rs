//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero when any criterion fails.

use std::collections::HashSet;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, Matrix3, SymmetricEigen, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use splat_embed::ablation::{run_ablation, Variant};
use splat_embed::engine::{fit, FitResult, InitStrategy};
use splat_embed::export::{
    fit_metrics, ply_header, prepare_export, read_ply, relative_stress_delta, render_report,
    write_ply, PLY_RECORD_BYTES,
};
use splat_embed::geometry::{build_targets, procrustes_target};
use splat_embed::graph::build_graph;
use splat_embed::ingest::{generate_swiss_roll, generate_trajectory};
use splat_embed::losses::total_loss;
use splat_embed::metrics::{continuity, stress1, trustworthiness};
use splat_embed::quat::{build_covariance, Quat};
use splat_embed::{Dataset, FitConfig, GaussianSet, KernelSigma, Regime, RowMatrix};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn pool(threads: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .expect("thread pool")
}

fn swiss_roll() -> Dataset {
    generate_swiss_roll(2000, 0.05, 7).expect("swiss roll")
}

fn helix() -> Dataset {
    generate_trajectory(1000, 10, 3.0, 0.002, 7).expect("helix")
}

// ---------------------------------------------------------------------------
// 1. Gradients against central differences

const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;
const FD_FLOOR: f64 = 1e-8;

fn random_fd_instance(rng: &mut ChaCha8Rng, regime: Regime) -> (GaussianSet, Dataset, FitConfig) {
    let (n, dim) = (30, 6);
    let data: Vec<f64> = (0..n * dim).map(|_| rng.sample(StandardNormal)).collect();
    let d = Dataset::new("fd", RowMatrix::new(n, dim, data).unwrap()).unwrap();
    let v3 = |rng: &mut ChaCha8Rng, s: f64| Vector3::from_fn(|_, _| s * rng.sample::<f64, _>(StandardNormal));
    let state = GaussianSet {
        means: (0..n).map(|_| v3(rng, 1.0)).collect(),
        log_scales: (0..n).map(|_| v3(rng, 0.4) - Vector3::repeat(0.7)).collect(),
        // deliberately non-unit to exercise the normalization path
        quaternions: (0..n)
            .map(|_| Quat(std::array::from_fn(|_| rng.sample::<f64, _>(StandardNormal) * 1.3)))
            .collect(),
        opacities: None,
    };
    let cfg = FitConfig {
        regime,
        k: 8,
        ..FitConfig::default()
    };
    (state, d, cfg)
}

/// Worst relative error over coordinates whose analytic or numeric value
/// exceeds the magnitude floor; also returns the number of checked entries.
fn fd_check(
    state: &GaussianSet,
    cfg: &FitConfig,
    cache: &splat_embed::geometry::TargetCache,
    g: &splat_embed::graph::NeighborGraph,
) -> (f64, usize) {
    let (_, grad) = total_loss(cfg, state, cache, g);
    let loss = |s: &GaussianSet| total_loss(cfg, s, cache, g).0.l_total;
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut compare = |analytic: f64, numeric: f64| {
        let mag = analytic.abs().max(numeric.abs());
        if mag > FD_FLOOR {
            worst = worst.max((analytic - numeric).abs() / mag);
            checked += 1;
        }
    };
    for i in 0..state.len() {
        for a in 0..3 {
            let mut p = state.clone();
            p.means[i][a] += FD_STEP;
            let mut m = state.clone();
            m.means[i][a] -= FD_STEP;
            compare(grad.means[i][a], (loss(&p) - loss(&m)) / (2.0 * FD_STEP));

            let mut p = state.clone();
            p.log_scales[i][a] += FD_STEP;
            let mut m = state.clone();
            m.log_scales[i][a] -= FD_STEP;
            compare(grad.log_scales[i][a], (loss(&p) - loss(&m)) / (2.0 * FD_STEP));
        }
        for c in 0..4 {
            let mut p = state.clone();
            p.quaternions[i].0[c] += FD_STEP;
            let mut m = state.clone();
            m.quaternions[i].0[c] -= FD_STEP;
            compare(grad.quaternions[i][c], (loss(&p) - loss(&m)) / (2.0 * FD_STEP));
        }
    }
    (worst, checked)
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut details = Vec::new();
    let mut pass = true;
    let terms: [(&str, Regime, [f64; 3]); 4] = [
        ("rigidity/surface", Regime::Surface, [1.0, 0.0, 0.0]),
        ("rigidity/trajectory", Regime::Trajectory, [1.0, 0.0, 0.0]),
        ("covariance", Regime::Surface, [0.0, 1.0, 0.0]),
        ("orientation", Regime::Surface, [0.0, 0.0, 1.0]),
    ];
    for (name, regime, [lr, lc, lo]) in terms {
        let (state, d, base) = random_fd_instance(&mut rng, regime);
        let cfg = FitConfig {
            lambda_r: lr,
            lambda_c: lc,
            lambda_o: lo,
            ..base
        };
        let g = build_graph(&d, cfg.k, KernelSigma::Adaptive).unwrap();
        // targets from a perturbed copy so every residual is nonzero
        let other: Vec<Vector3<f64>> = state
            .means
            .iter()
            .map(|m| m + Vector3::from_fn(|_, _| 0.3 * rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let cache = build_targets(&other, &d.points, &g, regime, false, 1).unwrap();
        let (worst, checked) = fd_check(&state, &cfg, &cache, &g);
        pass &= worst < FD_TOL && checked > 0;
        details.push(format!("{name} max rel err {worst:.2e} over {checked}"));
    }
    let elapsed = start.elapsed();
    pass &= elapsed < Duration::from_secs(10);
    details.push(format!("{:.2}s", elapsed.as_secs_f64()));
    outcome(pass, details.join("; "))
}

// ---------------------------------------------------------------------------
// 2. Procrustes recovery under an orthonormal lift

fn orthonormal_columns(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    loop {
        let a = DMatrix::<f64>::from_fn(n, 3, |_, _| rng.sample(StandardNormal));
        let q = a.clone().qr().q();
        if a.rank(1e-9) == 3 {
            return q.columns(0, 3).into_owned();
        }
    }
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let k = 15;
    let mut worst = 0.0f64;
    for case in 0..200 {
        let n = [3usize, 5, 10][case % 3];
        let v: Vec<Vector3<f64>> = (0..k)
            .map(|_| Vector3::from_fn(|_, _| rng.sample(StandardNormal)))
            .collect();
        let m = orthonormal_columns(&mut rng, n);
        // E = V Mᵀ, row-major k x n
        let e: Vec<f64> = v
            .iter()
            .flat_map(|row| {
                let m = &m;
                (0..n).map(move |c| (0..3).map(|a| row[a] * m[(c, a)]).sum::<f64>())
            })
            .collect();
        let sol = procrustes_target(&v, &e, n, false).unwrap();
        let err: f64 = sol
            .v_ideal
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - b).norm_squared())
            .sum::<f64>()
            .sqrt();
        worst = worst.max(err);
    }
    let elapsed = start.elapsed();
    outcome(
        worst < 1e-8 && elapsed < Duration::from_secs(5),
        format!("max ||V_ideal - V||_F {worst:.2e} over 200 cases; {:.2}s", elapsed.as_secs_f64()),
    )
}

// ---------------------------------------------------------------------------
// 3. Metrics against a brute-force oracle

fn dist(m: &RowMatrix, i: usize, j: usize) -> f64 {
    m.row(i)
        .iter()
        .zip(m.row(j))
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

/// Full rank table: `rank[i][j]` = 1-based position of j among all others
/// sorted by (distance, index).
fn rank_table(m: &RowMatrix) -> Vec<Vec<usize>> {
    let n = m.rows();
    (0..n)
        .map(|i| {
            let mut order: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            order.sort_by(|&a, &b| dist(m, i, a).total_cmp(&dist(m, i, b)).then(a.cmp(&b)));
            let mut rank = vec![0; n];
            for (pos, &j) in order.iter().enumerate() {
                rank[j] = pos + 1;
            }
            rank
        })
        .collect()
}

fn oracle_rank_metric(reference: &RowMatrix, probe: &RowMatrix, k: usize) -> f64 {
    let n = reference.rows();
    let rr = rank_table(reference);
    let rp = rank_table(probe);
    let mut penalty: u64 = 0;
    for i in 0..n {
        let ref_nn: HashSet<usize> = (0..n).filter(|&j| j != i && rr[i][j] <= k).collect();
        for j in (0..n).filter(|&j| j != i && rp[i][j] <= k) {
            if !ref_nn.contains(&j) {
                penalty += (rr[i][j] - k) as u64;
            }
        }
    }
    let (nf, kf) = (n as f64, k as f64);
    1.0 - 2.0 / (nf * kf * (2.0 * nf - 3.0 * kf - 1.0)) * penalty as f64
}

fn oracle_stress(high: &RowMatrix, low: &RowMatrix) -> f64 {
    let n = high.rows();
    let mut pairs = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            pairs.push((dist(low, i, j), dist(high, i, j)));
        }
    }
    let num: f64 = pairs.iter().map(|(d, h)| d * h).sum();
    let den: f64 = pairs.iter().map(|(d, _)| d * d).sum();
    let alpha = num / den;
    let resid: f64 = pairs.iter().map(|(d, h)| (alpha * d - h).powi(2)).sum();
    let norm: f64 = pairs.iter().map(|(_, h)| h * h).sum();
    (resid / norm).sqrt()
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut mismatches = 0;
    let mut worst_stress = 0.0f64;
    for _ in 0..50 {
        let n = rng.random_range(8..=30);
        let dim = rng.random_range(2..=8);
        let k = rng.random_range(1..=(n - 1) / 2);
        let high = RowMatrix::new(n, dim, (0..n * dim).map(|_| rng.sample(StandardNormal)).collect()).unwrap();
        let low = RowMatrix::new(n, 3, (0..n * 3).map(|_| rng.sample(StandardNormal)).collect()).unwrap();
        let t = trustworthiness(&high, &low, k).unwrap();
        let c = continuity(&high, &low, k).unwrap();
        if t.to_bits() != oracle_rank_metric(&high, &low, k).to_bits() {
            mismatches += 1;
        }
        if c.to_bits() != oracle_rank_metric(&low, &high, k).to_bits() {
            mismatches += 1;
        }
        let s = stress1(&high, &low).unwrap();
        worst_stress = worst_stress.max((s - oracle_stress(&high, &low)).abs());
    }
    outcome(
        mismatches == 0 && worst_stress < 1e-12,
        format!("rank mismatches {mismatches}/100; max stress diff {worst_stress:.2e}"),
    )
}

// ---------------------------------------------------------------------------
// Shared benchmark fits

struct SwissRun {
    data: Dataset,
    result: FitResult,
    seconds: f64,
}

fn run_swiss_single_thread() -> SwissRun {
    let data = swiss_roll();
    let start = Instant::now();
    let result = pool(1).install(|| fit(&data, &FitConfig::default())).expect("swiss fit");
    SwissRun {
        data,
        result,
        seconds: start.elapsed().as_secs_f64(),
    }
}

struct HelixRun {
    result: FitResult,
    data: Dataset,
}

fn run_helix() -> HelixRun {
    let data = helix();
    let result = fit(&data, &FitConfig::for_regime(Regime::Trajectory)).expect("helix fit");
    HelixRun { result, data }
}

// ---------------------------------------------------------------------------
// 4. Swiss roll end to end

fn criterion_4(run: &SwissRun) -> Outcome {
    let (init, fin) = pool(1)
        .install(|| fit_metrics(&run.data, &run.result, true))
        .expect("metrics");
    let delta = relative_stress_delta(&init, &fin);
    let pass = fin.trustworthiness >= 0.99
        && fin.continuity >= 0.99
        && delta <= 0.02
        && run.seconds < 300.0;
    outcome(
        pass,
        format!(
            "trust {:.6}; continuity {:.6}; stress init {:.3e} final {:.3e} relative change {:.3e} (limit 2e-2); fit {:.2}s",
            fin.trustworthiness, fin.continuity, init.stress1, fin.stress1, delta, run.seconds
        ),
    )
}

// ---------------------------------------------------------------------------
// 5. Lazy schedule and freeze

fn criterion_5(run: &SwissRun) -> Outcome {
    let h = &run.result.history;
    if h.len() != 200 {
        return outcome(false, format!("history has {} epochs", h.len()));
    }
    let early: HashSet<u64> = h[..100].iter().map(|r| r.v_ideal_checksum).collect();
    let frozen = h[100].v_ideal_checksum;
    let constant = h[100..].iter().all(|r| r.v_ideal_checksum == frozen);
    let updates: Vec<usize> = h.iter().filter(|r| r.targets_updated).map(|r| r.step).collect();
    outcome(
        constant && early.len() > 1,
        format!(
            "distinct checksums in 1..100: {}; constant over 101..200: {constant}; update steps {updates:?}",
            early.len()
        ),
    )
}

// ---------------------------------------------------------------------------
// 6. Clamp compliance

fn criterion_6(swiss: &SwissRun, helix: &HelixRun) -> Outcome {
    let max_of = |r: &FitResult| r.history.iter().map(|h| h.max_log_scale).fold(f64::NEG_INFINITY, f64::max);
    let s = max_of(&swiss.result);
    let t = max_of(&helix.result);
    outcome(
        s <= -0.5 && t <= 1.0,
        format!("surface max log-scale {s:.4} (<= -0.5); trajectory max {t:.4} (<= 1.0)"),
    )
}

// ---------------------------------------------------------------------------
// 7. Ablation directionality

const ANISOTROPY_FACTOR: f64 = 2.0;

fn criterion_7() -> Outcome {
    let data = swiss_roll();
    let runs = run_ablation(&data, &FitConfig::default(), &InitStrategy::Pca3).expect("ablation");
    let get = |v: Variant| runs.iter().find(|(s, _)| s.variant == v).unwrap().0;
    let full = get(Variant::Full);
    let no_c = get(Variant::NoCovariance);
    let no_o = get(Variant::NoOrientation);
    let pass = full.median_anisotropy >= ANISOTROPY_FACTOR * no_c.median_anisotropy
        && full.mean_alignment > no_o.mean_alignment;
    outcome(
        pass,
        format!(
            "median anisotropy full {:.3} vs no-covariance {:.3}; alignment full {:.4} vs no-orientation {:.4}",
            full.median_anisotropy, no_c.median_anisotropy, full.mean_alignment, no_o.mean_alignment
        ),
    )
}

// ---------------------------------------------------------------------------
// 8. Trajectory regime

fn dominant_axis(m: &Matrix3<f64>) -> Vector3<f64> {
    let e = SymmetricEigen::new(*m);
    let top = (0..3)
        .max_by(|&a, &b| e.eigenvalues[a].total_cmp(&e.eigenvalues[b]))
        .unwrap();
    e.eigenvectors.column(top).into_owned()
}

fn criterion_8(run: &HelixRun) -> Outcome {
    let r = &run.result;
    let low = RowMatrix::from_vec3(&r.gaussians.means);
    let cont = continuity(&run.data.points, &low, 15).unwrap();
    let cache = r.targets.as_ref().expect("targets");
    let n = r.gaussians.len();
    let k = r.config.k;
    let interior: Vec<usize> = (k..n - k).collect();
    let aligned = interior
        .iter()
        .filter(|&&i| {
            let sigma = build_covariance(r.gaussians.quaternions[i], &r.gaussians.log_scales[i]).unwrap();
            dominant_axis(&sigma).dot(&dominant_axis(&cache.c_target[i])).abs() >= 0.8
        })
        .count();
    let frac = aligned as f64 / interior.len() as f64;
    outcome(
        cont >= 0.995 && frac >= 0.9,
        format!("continuity {cont:.6}; aligned axes {aligned}/{} ({:.1}%)", interior.len(), 100.0 * frac),
    )
}

// ---------------------------------------------------------------------------
// 9. PLY round trip

fn criterion_9(run: &SwissRun) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("rt.ply");
    let (visual, colors) = prepare_export(&run.result.gaussians, &run.data, Regime::Surface).unwrap();
    write_ply(&visual, &colors, &path).unwrap();
    let n = visual.len();
    let size = std::fs::metadata(&path).unwrap().len() as usize;
    let expected = ply_header(n).len() + n * PLY_RECORD_BYTES;
    let recs = read_ply(&path).unwrap();
    let f = |v: f64| v as f32;
    let mut bad = 0;
    for (i, rec) in recs.iter().enumerate() {
        let m = visual.means[i];
        let s = visual.log_scales[i];
        let q = visual.quaternions[i].0;
        let alpha = visual.opacities.as_ref().unwrap()[i];
        let ok = rec.position == [f(m.x), f(m.y), f(m.z)]
            && rec.log_scales == [f(s.x), f(s.y), f(s.z)]
            && rec.quaternion == q.map(f)
            && rec.normal == [0.0; 3]
            && (rec.alpha() - alpha).abs() < 1e-6
            && rec
                .color_dc
                .iter()
                .zip(colors[i])
                .all(|(c, want)| *c == f((want - 0.5) / splat_embed::export::SH_C0));
        bad += usize::from(!ok);
    }
    outcome(
        bad == 0 && size == expected && recs.len() == n,
        format!("{n} records, {bad} mismatched; file {size} bytes, expected {expected}"),
    )
}

// ---------------------------------------------------------------------------
// 10. Determinism across runs and thread counts

fn artifacts(threads: usize) -> (Vec<u8>, String) {
    pool(threads).install(|| {
        let data = swiss_roll();
        let result = fit(&data, &FitConfig::default()).unwrap();
        let (init, fin) = fit_metrics(&data, &result, true).unwrap();
        let report = render_report(&result, &init, &fin).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.ply");
        let (visual, colors) = prepare_export(&result.gaussians, &data, Regime::Surface).unwrap();
        write_ply(&visual, &colors, &path).unwrap();
        (std::fs::read(&path).unwrap(), report)
    })
}

fn criterion_10() -> Outcome {
    let runs: Vec<(usize, (Vec<u8>, String))> =
        [1, 1, 8, 8].into_iter().map(|t| (t, artifacts(t))).collect();
    let (ply0, rep0) = &runs[0].1;
    let same = runs.iter().all(|(_, (p, r))| p == ply0 && r == rep0);
    outcome(
        same,
        format!(
            "4 runs (1,1,8,8 threads): PLY {} bytes, report {} bytes, all identical: {same}",
            ply0.len(),
            rep0.len()
        ),
    )
}

fn report(id: usize, name: &str, o: &Outcome) {
    println!(
        "criterion {id:>2} [{name}]: {} ({})",
        if o.pass { "PASS" } else { "FAIL" },
        o.detail
    );
}

fn main() {
    // `cargo test -- --list` and filters are harness flags; this target has no filters.
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let mut all = true;
    let mut record = |id: usize, name: &str, o: Outcome| {
        report(id, name, &o);
        all &= o.pass;
    };
    record(1, "gradient check", criterion_1());
    record(2, "procrustes recovery", criterion_2());
    record(3, "metric oracles", criterion_3());
    let swiss = run_swiss_single_thread();
    record(4, "swiss roll end to end", criterion_4(&swiss));
    record(5, "schedule and freeze", criterion_5(&swiss));
    let helix = run_helix();
    record(6, "clamp compliance", criterion_6(&swiss, &helix));
    record(7, "ablation directionality", criterion_7());
    record(8, "trajectory regime", criterion_8(&helix));
    record(9, "ply round trip", criterion_9(&swiss));
    record(10, "determinism", criterion_10());
    if !all {
        println!("acceptance: at least one criterion failed");
        std::process::exit(1);
    }
    println!("acceptance: all criteria passed");
}
