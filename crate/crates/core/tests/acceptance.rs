//! End-to-end acceptance suite. Runs every criterion in order, prints one
//! `PASS`/`FAIL` line each and exits non-zero if any failed. CSV artefacts go
//! to `target/tmp/acceptance/`.

use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ulsnn_core::cluster::{
    build_bunyip, cost_of, execute_reduce, plan, reduce_speedup_curve, write_speedup_csv, CostModel, PlanKind,
    SpeedupCfg,
};
use ulsnn_core::datagen::{build_dataset, DatasetCfg};
use ulsnn_core::gemm::{
    bench_gemm, sgemm_naive, write_bench_csv, BenchOptions, BlockConfig, Kernel, KernelKind, Op,
};
use ulsnn_core::matcore::Mat32;
use ulsnn_core::nn::{self, classification_error, Batch, MlpParams, NetShape};
use ulsnn_core::optim::{cg_train_with, write_history_csv, CgConfig, EpochRecord};
use ulsnn_core::trainer::{partition, scaling_study, Backend, PassKind, ScalingMode, Trainer, TrainerCfg};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn out_dir() -> PathBuf {
    let d = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&d).expect("artefact directory");
    d
}

fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize, stride: usize) -> Mat32 {
    let mut m = Mat32::zeros_with_stride(rows, cols, stride).unwrap();
    for i in 0..rows {
        for v in m.row_mut(i) {
            *v = rng.gen_range(-1.0..1.0);
        }
    }
    m
}

/// Largest `|got − want|` over `|α|·Σ|a·b| + |β|·|c|`, the natural scale of
/// each output element.
#[allow(clippy::too_many_arguments)]
fn scaled_error(got: &Mat32, want: &Mat32, ta: Op, a: &Mat32, tb: Op, b: &Mat32, c0: &Mat32, alpha: f32, beta: f32) -> f64 {
    let at = |i: usize, p: usize| if ta == Op::N { a.get(i, p) } else { a.get(p, i) };
    let bt = |p: usize, j: usize| if tb == Op::N { b.get(p, j) } else { b.get(j, p) };
    let k = if ta == Op::N { a.cols() } else { a.rows() };
    let mut worst = 0.0f64;
    for i in 0..got.rows() {
        for j in 0..got.cols() {
            let mag: f64 = (0..k).map(|p| (at(i, p) as f64 * bt(p, j) as f64).abs()).sum();
            let scale = alpha.abs() as f64 * mag + beta.abs() as f64 * (c0.get(i, j) as f64).abs();
            let d = (got.get(i, j) as f64 - want.get(i, j) as f64).abs();
            if scale > 0.0 {
                worst = worst.max(d / scale);
            } else if d > 0.0 {
                return f64::INFINITY;
            }
        }
    }
    worst
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xc1);
    let kernel = Kernel::Blocked(BlockConfig::default());
    let shapes = 220;
    let mut worst = 0.0f64;
    for s in 0..shapes {
        // Half the shapes stay small to exercise every edge-tile path.
        let hi = if s % 2 == 0 { 40 } else { 700 };
        let (m, n, k) = (rng.gen_range(1..=hi), rng.gen_range(1..=hi), rng.gen_range(1..=hi));
        let ta = if rng.gen_bool(0.2) { Op::T } else { Op::N };
        let tb = if rng.gen_bool(0.2) { Op::T } else { Op::N };
        let (ar, ac) = if ta == Op::N { (m, k) } else { (k, m) };
        let (br, bc) = if tb == Op::N { (k, n) } else { (n, k) };
        let pads: [usize; 3] = [rng.gen_range(0..9), rng.gen_range(0..9), rng.gen_range(0..9)];
        let a = random_mat(&mut rng, ar, ac, ac + pads[0]);
        let b = random_mat(&mut rng, br, bc, bc + pads[1]);
        let c0 = random_mat(&mut rng, m, n, n + pads[2]);
        let alpha = rng.gen_range(-2.0..2.0f32);
        let beta = if rng.gen_bool(0.3) { 0.0 } else { rng.gen_range(-2.0..2.0f32) };
        let mut want = c0.clone();
        sgemm_naive(ta, tb, alpha, &a, &b, beta, &mut want).unwrap();
        let mut got = c0.clone();
        kernel.sgemm(ta, tb, alpha, &a, &b, beta, &mut got).unwrap();
        worst = worst.max(scaled_error(&got, &want, ta, &a, tb, &b, &c0, alpha, beta));
    }
    outcome(worst <= 1e-5, format!("{shapes} shapes, worst relative error {worst:.2e} (limit 1e-5)"))
}

fn criterion_2() -> Outcome {
    let mut sizes: Vec<usize> = (1..=21).map(|i| 32 * i).collect();
    sizes.push(700);
    let opts = BenchOptions::default();
    let cfg = BlockConfig::default();
    let mut records = bench_gemm(&sizes, KernelKind::Naive, &cfg, &opts).unwrap();
    records.extend(bench_gemm(&sizes, KernelKind::Blocked, &cfg, &opts).unwrap());
    let path = out_dir().join("gemm_bench.csv");
    write_bench_csv(BufWriter::new(File::create(&path).unwrap()), &records).unwrap();
    let rate = |kind| {
        records
            .iter()
            .find(|r| r.kernel == kind && r.m == 672)
            .map(|r| r.mflops)
            .unwrap()
    };
    let (naive, blocked) = (rate(KernelKind::Naive), rate(KernelKind::Blocked));
    let ratio = blocked / naive;
    outcome(
        ratio >= 2.0,
        format!(
            "672 at stride 700: blocked {blocked:.0} MFlop/s, naive {naive:.0} MFlop/s, ratio {ratio:.2} (limit 2); CSV {}",
            path.display()
        ),
    )
}

/// `E = Σ (tanh(W_ho·tanh(W_ih·x)) − t)²` in double precision.
fn error_f64(w_ih: &[f64], w_ho: &[f64], shape: NetShape, x: &Mat32, t: &Mat32) -> f64 {
    let NetShape { n_i, n_h, n_o } = shape;
    let mut e = 0.0;
    for p in 0..x.rows() {
        let h: Vec<f64> = (0..n_h)
            .map(|j| (0..n_i).map(|i| w_ih[j * n_i + i] * x.get(p, i) as f64).sum::<f64>().tanh())
            .collect();
        for o in 0..n_o {
            let y = (0..n_h).map(|j| w_ho[o * n_h + j] * h[j]).sum::<f64>().tanh();
            e += (y - t.get(p, o) as f64).powi(2);
        }
    }
    e
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xc3);
    let h = 1e-4;
    let mut worst = (0.0f64, 0.0f64);
    let mut failures = 0usize;
    for net in 0..20u64 {
        let shape = NetShape::new(rng.gen_range(1..=8), rng.gen_range(1..=8), rng.gen_range(1..=8));
        let n_p = rng.gen_range(1..=10);
        let x = Mat32::from_fn(n_p, shape.n_i, |_, _| rng.gen_range(-1.0..1.0));
        let t = Mat32::from_fn(n_p, shape.n_o, |_, _| if rng.gen_bool(0.5) { 1.0 } else { -1.0 });
        let p = MlpParams::random(shape, 100 + net);
        let batch = Batch::new(x.clone(), t.clone()).unwrap();
        let g = nn::gradient(&p, &batch, &Kernel::default()).unwrap().to_flat();

        let flat: Vec<f64> = p.to_flat().iter().map(|&v| v as f64).collect();
        let split = shape.n_h * shape.n_i;
        let e_at = |w: &[f64]| error_f64(&w[..split], &w[split..], shape, &x, &t);
        for (idx, &gi) in g.iter().enumerate() {
            let mut plus = flat.clone();
            let mut minus = flat.clone();
            plus[idx] += h;
            minus[idx] -= h;
            let fd = -0.5 * (e_at(&plus) - e_at(&minus)) / (2.0 * h);
            let abs = (gi as f64 - fd).abs();
            let rel = abs / fd.abs().max(f64::MIN_POSITIVE);
            if abs > 1e-4 && rel > 1e-2 {
                failures += 1;
            }
            worst.0 = worst.0.max(abs);
            if abs > 1e-4 {
                worst.1 = worst.1.max(rel);
            }
        }
    }
    outcome(
        failures == 0,
        format!(
            "20 nets, {failures} entries outside abs 1e-4 / rel 1e-2; worst abs {:.1e}, worst rel among abs misses {:.1e}",
            worst.0, worst.1
        ),
    )
}

fn criterion_4() -> Outcome {
    let shape = NetShape::jocr();
    let n_p = 9_264_000;
    let e = shape.error_flops(n_p).unwrap();
    let g = shape.gradient_flops(n_p).unwrap();
    let params = shape.param_count();
    let bytes = shape.vector_bytes();
    let tera = |v: f64| v / 1e12;
    let checks = [
        (tera(e as f64).floor() == 32.0, "error 32 TFlop"),
        (tera(g as f64).floor() == 92.0, "gradient 92 TFlop"),
        (tera(0.8 * e as f64).round() == 26.0, "error at 80% 26 TFlop"),
        (tera(0.8 * g as f64).round() == 74.0, "gradient at 80% 74 TFlop"),
        (params == 1_729_440, "1,729,440 parameters"),
        ((bytes as f64 / (1u64 << 20) as f64 * 10.0).round() == 66.0, "6.6 MB message"),
    ];
    let missed: Vec<&str> = checks.iter().filter(|c| !c.0).map(|c| c.1).collect();
    outcome(
        missed.is_empty(),
        format!(
            "error {e}, gradient {g}, params {params}, message {bytes} B{}",
            if missed.is_empty() {
                String::new()
            } else {
                format!("; missed: {}", missed.join(", "))
            }
        ),
    )
}

const REDUCE_LEN: usize = 10_000;

/// Results of every plan on integer and float payloads, for the determinism
/// check.
struct ReduceRun {
    ints: Vec<Vec<i64>>,
    floats: Vec<Vec<f32>>,
}

fn run_reduces() -> (ReduceRun, Outcome, Duration) {
    let t0 = Instant::now();
    let topo = build_bunyip();
    let procs = topo.total_procs();
    let mut rng = ChaCha8Rng::seed_from_u64(0xc5);
    let ints: Vec<Vec<i64>> = (0..procs)
        .map(|_| (0..REDUCE_LEN).map(|_| rng.gen_range(-1_000_000..1_000_000)).collect())
        .collect();
    let floats: Vec<Vec<f32>> = (0..procs)
        .map(|_| (0..REDUCE_LEN).map(|_| rng.gen_range(-1.0..1.0f32)).collect())
        .collect();
    let int_sum: Vec<i64> = (0..REDUCE_LEN).map(|j| ints.iter().map(|v| v[j]).sum()).collect();
    let f64_sum: Vec<f64> = (0..REDUCE_LEN).map(|j| floats.iter().map(|v| v[j] as f64).sum()).collect();
    let f64_mag: Vec<f64> = (0..REDUCE_LEN).map(|j| floats.iter().map(|v| (v[j] as f64).abs()).sum()).collect();

    let mut run = ReduceRun {
        ints: Vec::new(),
        floats: Vec::new(),
    };
    let mut ok = true;
    let mut worst = 0.0f64;
    for kind in [PlanKind::Naive, PlanKind::Logn, PlanKind::Bunyip] {
        let p = plan(kind, &topo).unwrap();
        let got_i = execute_reduce(&p, ints.clone()).unwrap();
        ok &= got_i == int_sum;
        let got_f = execute_reduce(&p, floats.clone()).unwrap();
        for j in 0..REDUCE_LEN {
            // Relative to the summed magnitudes: the inputs have mixed signs.
            worst = worst.max((got_f[j] as f64 - f64_sum[j]).abs() / f64_mag[j]);
        }
        run.ints.push(got_i);
        run.floats.push(got_f);
    }
    let elapsed = t0.elapsed();
    ok &= worst <= 1e-4 && elapsed < Duration::from_secs(60);
    let detail = format!(
        "{procs} processes, length {REDUCE_LEN}: integer sums exact {}, worst float relative error {worst:.1e} (limit 1e-4), {:.1} s",
        run.ints.iter().all(|v| *v == int_sum),
        elapsed.as_secs_f64()
    );
    (run, outcome(ok, detail), elapsed)
}

fn criterion_5() -> (ReduceRun, Outcome) {
    let (run, o, _) = run_reduces();
    (run, o)
}

fn cost_table() -> Vec<(PlanKind, Vec<f64>, f64)> {
    let topo = build_bunyip();
    let bytes = NetShape::jocr().vector_bytes();
    let model = CostModel::default();
    [PlanKind::Naive, PlanKind::Logn, PlanKind::Bunyip]
        .into_iter()
        .map(|k| {
            let r = cost_of(&plan(k, &topo).unwrap(), &topo, bytes, &model).unwrap();
            (k, r.stages.iter().map(|s| s.seconds).collect(), r.total_seconds)
        })
        .collect()
}

fn within(got: f64, want: f64, rel: f64) -> bool {
    (got - want).abs() <= rel * want
}

fn criterion_6() -> (Vec<(PlanKind, Vec<f64>, f64)>, Outcome) {
    let table = cost_table();
    let get = |k: PlanKind| table.iter().find(|r| r.0 == k).unwrap();
    let (_, bun_stages, bun) = get(PlanKind::Bunyip);
    let (_, logn_stages, logn) = get(PlanKind::Logn);
    let (_, _, naive) = get(PlanKind::Naive);
    let want = [0.18, 0.66, 0.9, 3.16];
    let mut ok = bun_stages.len() == 4 && bun_stages.iter().zip(want).all(|(&g, w)| within(g, w, 0.10));
    ok &= within(*bun, 4.9, 0.05) && within(*naive, 10.1, 0.05);
    ok &= within(*logn, 8.5, 0.05) && logn_stages.len() == 8;
    let saved = logn - bun;
    ok &= (saved - 3.6).abs() <= 0.3;

    let sizes: Vec<usize> = [1e5, 2e5, 5e5, 1e6, 2e6, 5e6, 9.264e6, 2e7, 5e7, 1e8]
        .iter()
        .map(|&v| v as usize)
        .collect();
    let curve = reduce_speedup_curve(&sizes, &SpeedupCfg::default(), &CostModel::default()).unwrap();
    let path = out_dir().join("speedup.csv");
    write_speedup_csv(BufWriter::new(File::create(&path).unwrap()), &curve).unwrap();
    let jocr = curve.iter().find(|p| p.n_patterns == 9_264_000).unwrap();
    ok &= (jocr.grad_seconds - 446.0).abs() < 1.0 && (jocr.speedup - 1.008).abs() <= 0.002;

    let cost_path = out_dir().join("reduce_cost.csv");
    let topo = build_bunyip();
    let mut w = BufWriter::new(File::create(&cost_path).unwrap());
    for (i, k) in [PlanKind::Naive, PlanKind::Logn, PlanKind::Bunyip].into_iter().enumerate() {
        let r = cost_of(&plan(k, &topo).unwrap(), &topo, NetShape::jocr().vector_bytes(), &CostModel::default()).unwrap();
        r.write_csv(&mut w, i == 0).unwrap();
    }
    drop(w);

    let detail = format!(
        "bunyip stages {:?} total {bun:.3} s; naive {naive:.3} s; logn {logn:.3} s in {} stages; saved {saved:.3} s; speedup at {:.0} s compute {:.4}; CSV {}",
        bun_stages.iter().map(|s| (s * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
        logn_stages.len(),
        jocr.grad_seconds,
        jocr.speedup,
        path.display()
    );
    (table, outcome(ok, detail))
}

fn desk_data(n: usize, shape: NetShape, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Mat32::from_fn(n, shape.n_i, |_, _| rng.gen_range(-1.0..1.0));
    let t = Mat32::from_fn(n, shape.n_o, |_, _| if rng.gen_bool(0.5) { 1.0 } else { -1.0 });
    Batch::new(x, t).unwrap()
}

/// Bits of a 4-worker full-data gradient, for the determinism check.
fn four_worker_gradient(backend: Backend) -> Vec<u32> {
    let shape = NetShape::new(20, 12, 6);
    let batch = desk_data(5_000, shape, 71);
    let p = MlpParams::random(shape, 72);
    let cfg = TrainerCfg {
        workers: 4,
        halt_fraction: 1.0,
        backend,
        ..TrainerCfg::default()
    };
    let mut t = Trainer::new(p, batch, Kernel::default(), cfg).unwrap();
    let g = t.run_pass(PassKind::Gradient, 0.0, 1).unwrap().grad.unwrap();
    g.to_flat().iter().map(|v| v.to_bits()).collect()
}

fn criterion_7() -> (Vec<u32>, Outcome) {
    let mut notes = Vec::new();
    let mut ok = true;

    // Aggregated gradient against the single-process oracle.
    let shape = NetShape::new(20, 12, 6);
    let batch = desk_data(5_000, shape, 71);
    let p = MlpParams::random(shape, 72);
    let want = nn::gradient(&p, &batch, &Kernel::default()).unwrap().to_flat();
    let bits = four_worker_gradient(Backend::Simulated);
    let got: Vec<f32> = bits.iter().map(|&b| f32::from_bits(b)).collect();
    let scale = want.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    let rel = got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max) / scale;
    ok &= rel <= 1e-5;
    notes.push(format!("4-worker gradient relative error {rel:.1e}"));

    // Consumed-count and idle-spread bounds over randomized runs.
    let mut rng = ChaCha8Rng::seed_from_u64(0xc7);
    let mut bound_ok = 0;
    let runs = 100;
    let small = NetShape::new(4, 3, 2);
    for run in 0..runs {
        let n = rng.gen_range(1..4_000);
        let workers = rng.gen_range(1..=16);
        let chunk = rng.gen_range(1..=400);
        let hf = rng.gen_range(0.05..=1.0f32);
        // Half the runs use uneven worker speeds.
        let uneven = run % 2 == 1;
        let speed: Vec<f64> = (0..workers).map(|_| if uneven { rng.gen_range(0.5..3.0) } else { 1.0 }).collect();
        let cfg = TrainerCfg {
            workers,
            chunk_size: chunk,
            halt_fraction: hf,
            speed_factors: speed,
            ..TrainerCfg::default()
        };
        let mut t = Trainer::new(MlpParams::random(small, run), desk_data(n, small, run), Kernel::default(), cfg).unwrap();
        let r = t.run_pass(PassKind::Gradient, 0.0, 1).unwrap();
        let target = f64::from(hf) * n as f64;
        let consumed = r.n_patterns as f64;
        if consumed >= target && consumed <= (target + (workers * chunk) as f64).min(n as f64) {
            bound_ok += 1;
        }
    }
    ok &= bound_ok == runs;

    // Idle spread where the halt comes first: shards of several chunks and
    // at most 80% consumed. A worker whose shard runs dry stops early by
    // construction, so those runs are counted but not bounded.
    let (mut spread_ok, mut spread_runs) = (0, 0);
    for run in 0..runs {
        let workers = rng.gen_range(1..=16);
        let chunk = rng.gen_range(1..=400);
        let n = workers * chunk * rng.gen_range(5..20);
        let uneven = run % 2 == 1;
        let cfg = TrainerCfg {
            workers,
            chunk_size: chunk,
            halt_fraction: rng.gen_range(0.05..=0.8f32),
            speed_factors: (0..workers).map(|_| if uneven { rng.gen_range(0.5..3.0) } else { 1.0 }).collect(),
            ..TrainerCfg::default()
        };
        let mut t = Trainer::new(MlpParams::random(small, run), desk_data(n, small, run), Kernel::default(), cfg).unwrap();
        let s = t.run_pass(PassKind::Error, 0.0, 1).unwrap().schedule;
        let sizes: Vec<usize> = t.shards().iter().map(|r| r.len()).collect();
        if s.consumed.iter().zip(&sizes).any(|(c, z)| c == z) {
            continue;
        }
        spread_runs += 1;
        if s.idle_spread() <= s.chunk_seconds * (1.0 + 1e-12) {
            spread_ok += 1;
        }
    }
    ok &= spread_ok == spread_runs && spread_runs >= runs / 2;
    notes.push(format!(
        "consumed bound {bound_ok}/{runs}, idle spread within one chunk {spread_ok}/{spread_runs} (runs with no shard run dry)"
    ));

    // Weak scaling at the full network size, one 48,000-pattern shard per
    // worker at the calibrated per-process rate.
    let points = scaling_study(
        NetShape::jocr(),
        &[1, 2, 4, 8, 16],
        ScalingMode::Weak {
            patterns_per_worker: 48_000,
        },
        &TrainerCfg {
            model_flops_per_sec: SpeedupCfg::default().flops_per_proc,
            ..TrainerCfg::default()
        },
        &CostModel::default(),
    )
    .unwrap();
    let e16 = points.last().unwrap().efficiency;
    ok &= e16 >= 0.9;
    notes.push(format!("weak-scaling efficiency at 16 workers {e16:.3}"));

    // Shards are balanced to within one row.
    let sizes: Vec<usize> = partition(9_264_000, 193).iter().map(|r| r.len()).collect();
    ok &= sizes.iter().all(|&s| s == 48_000 || s == 48_001 || s == 47_999);

    (bits, outcome(ok, notes.join("; ")))
}

const DESK_EPOCHS: usize = 30;

fn desk_trainer(epochs: usize) -> (Vec<EpochRecord>, f64, usize) {
    let cfg = DatasetCfg::default();
    let train = build_dataset(&cfg).unwrap();
    let held = build_dataset(&DatasetCfg {
        first_index: 20_000,
        per_class: 40,
        ..cfg
    })
    .unwrap();
    let shape = NetShape::new(400, 64, 50);
    let mut t = Trainer::new(
        MlpParams::random(shape, 1),
        train.to_batch().unwrap(),
        Kernel::default(),
        TrainerCfg::default(),
    )
    .unwrap();
    let cg = CgConfig {
        epochs,
        ..CgConfig::default()
    };
    let report = cg_train_with(&mut t, &cg, |_| {}).unwrap();
    let hb = held.to_batch().unwrap();
    let err = classification_error(t.params(), &hb.x, &held.labels(), &Kernel::default()).unwrap();
    let dec = report.decreasing_epochs();
    (report.history, err, dec)
}

fn criterion_8() -> (Vec<EpochRecord>, Outcome) {
    let t0 = Instant::now();
    let (history, err, dec) = desk_trainer(DESK_EPOCHS);
    let elapsed = t0.elapsed();
    let path = out_dir().join("desk_history.csv");
    write_history_csv(BufWriter::new(File::create(&path).unwrap()), &history).unwrap();
    let ok = dec >= 25 && err < 0.20 && elapsed < Duration::from_secs(600);
    let detail = format!(
        "{dec}/{DESK_EPOCHS} epochs decreased (need 25), held-out error {:.2}% on 2000 patterns (limit 20%), E {:.0} -> {:.0}, {:.0} s; CSV {}",
        100.0 * err,
        history[0].start_error,
        history.last().unwrap().error,
        elapsed.as_secs_f64(),
        path.display()
    );
    (history, outcome(ok, detail))
}

fn criterion_9(reduce: &ReduceRun, costs: &[(PlanKind, Vec<f64>, f64)], grad: &[u32], desk: &[EpochRecord]) -> Outcome {
    let mut notes = Vec::new();
    let (again, _, _) = run_reduces();
    let reduce_same = again.ints == reduce.ints
        && again
            .floats
            .iter()
            .zip(&reduce.floats)
            .all(|(a, b)| a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
    notes.push(format!("reduce {reduce_same}"));

    let costs_same = cost_table()
        .iter()
        .zip(costs)
        .all(|(a, b)| a.0 == b.0 && a.1.iter().zip(&b.1).all(|(x, y)| x.to_bits() == y.to_bits()));
    notes.push(format!("cost {costs_same}"));

    let grad_same = four_worker_gradient(Backend::Simulated) == grad && four_worker_gradient(Backend::Threads) == grad;
    notes.push(format!("trainer gradient, both backends {grad_same}"));

    let prefix = 5;
    let (rerun, _, _) = desk_trainer(prefix);
    let desk_same = rerun.iter().zip(&desk[..prefix]).all(|(a, b)| {
        a.error.to_bits() == b.error.to_bits() && a.step.to_bits() == b.step.to_bits() && a.seconds.to_bits() == b.seconds.to_bits()
    });
    notes.push(format!("desk training first {prefix} epochs {desk_same}"));

    outcome(reduce_same && costs_same && grad_same && desk_same, notes.join(", "))
}

fn main() {
    // Optional criterion numbers select a subset; 9 needs 5 to 8.
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: usize| only.is_empty() || only.contains(&n) || ((5..=8).contains(&n) && only.contains(&9));

    let mut results: Vec<(usize, Outcome)> = Vec::new();
    let mut report = |n: usize, name: &str, o: Outcome| {
        println!("criterion {n} {name}: {} ({})", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, o));
    };
    if wanted(1) {
        report(1, "gemm correctness", criterion_1());
    }
    if wanted(2) {
        report(2, "gemm performance", criterion_2());
    }
    if wanted(3) {
        report(3, "gradient correctness", criterion_3());
    }
    if wanted(4) {
        report(4, "flop formulas", criterion_4());
    }
    let reduce = wanted(5).then(|| {
        let (run, o) = criterion_5();
        report(5, "reduce correctness", o);
        run
    });
    let costs = wanted(6).then(|| {
        let (table, o) = criterion_6();
        report(6, "cost model", o);
        table
    });
    let grad = wanted(7).then(|| {
        let (bits, o) = criterion_7();
        report(7, "trainer properties", o);
        bits
    });
    let desk = wanted(8).then(|| {
        let (history, o) = criterion_8();
        report(8, "desk training", o);
        history
    });
    if wanted(9) {
        let o = criterion_9(
            reduce.as_ref().expect("criterion 5 ran"),
            costs.as_deref().expect("criterion 6 ran"),
            grad.as_deref().expect("criterion 7 ran"),
            desk.as_deref().expect("criterion 8 ran"),
        );
        report(9, "determinism", o);
    }

    let failed: Vec<usize> = results.iter().filter(|r| !r.1.pass).map(|r| r.0).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria run passed", results.len());
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
