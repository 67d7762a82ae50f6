//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Trains five desk-profile models on synthetic scenes, so the whole target
//! takes several minutes on one core. Exits non-zero if any criterion fails.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxelrf::dataset::{split_indices, synthesize, SynthDataset, SynthOptions};
use voxelrf::scene::{fine_step_for, oracle_composite, SyntheticScene};
use voxelrf_core::field::ParamGroup;
use voxelrf_core::metrics::{percentile, ssim, SsimConfig};
use voxelrf_core::objectives::{entropy_term, DEFAULT_BG_WEIGHT};
use voxelrf_core::renderer::{
    aggregate_rssi, composite, render_ray, render_spectrum, render_spectrum_with_stats, trace_ray,
};
use voxelrf_core::trainer::{
    batch_gradient, calibration_offset, dataset_spectrum_loss, evaluate_rays, sample_rays, LogEntry,
    TrainConfig, Trainer, TrainingRecord, TrainingSet,
};
use voxelrf_core::{Aabb, FieldModel, ModelConfig, SceneGeometry, SpatialSpectrum, Vec3, VoxelGrid};

const TAU: f64 = 1e-4;

#[derive(Default)]
struct Ledger {
    failed: Vec<String>,
}

impl Ledger {
    fn report(&mut self, id: &str, pass: bool, detail: String) {
        println!("criterion {id}: {} {detail}", if pass { "PASS" } else { "FAIL" });
        if !pass {
            self.failed.push(id.to_string());
        }
    }
}

/// A synthetic scene with its 128 / 32 split.
struct World {
    synth: SynthDataset,
    train: TrainingSet,
    test: TrainingSet,
    train_idx: Vec<usize>,
    test_idx: Vec<usize>,
}

impl World {
    fn new(tx_modulation: f64) -> Self {
        let scene = SyntheticScene::demo(tx_modulation);
        let opts = SynthOptions {
            n_tx: 160,
            seed: 7,
            azimuths: 36,
            elevations: 9,
            fine_step: fine_step_for([32; 3], scene.bbox()),
            rssi_offset_db: -50.0,
            rssi_noise_db: 1.0,
        };
        let synth = synthesize(&scene, &opts).unwrap();
        let all = synth.training_set();
        let (train_idx, test_idx) = split_indices(all.len(), 0);
        World {
            train: all.subset(&train_idx),
            test: all.subset(&test_idx),
            synth,
            train_idx,
            test_idx,
        }
    }
}

struct UpsampleEvent {
    from: [usize; 3],
    to: [usize; 3],
    loss_before: f64,
    loss_after: f64,
    coinciding_nodes: usize,
    coinciding_exact: bool,
}

struct Run {
    model: FieldModel,
    step: f64,
    train_secs: f64,
    initial_loss: f64,
    final_loss: f64,
    history: Vec<LogEntry>,
    upsamples: Vec<UpsampleEvent>,
}

/// Node pairs `(old, new)` along one axis that sit at the same position.
fn coinciding(old: usize, new: usize) -> Vec<(usize, usize)> {
    (0..new)
        .filter(|n| (n * (old - 1)) % (new - 1) == 0)
        .map(|n| (n * (old - 1) / (new - 1), n))
        .collect()
}

fn grids_coincide(before: &VoxelGrid, after: &VoxelGrid) -> (usize, bool) {
    let (b, a) = (before.dims(), after.dims());
    let axes: Vec<Vec<(usize, usize)>> = (0..3).map(|i| coinciding(b[i], a[i])).collect();
    let mut count = 0;
    let mut exact = true;
    for &(i0, i1) in &axes[0] {
        for &(j0, j1) in &axes[1] {
            for &(k0, k1) in &axes[2] {
                count += 1;
                let (x, y) = (before.node_values([i0, j0, k0]), after.node_values([i1, j1, k1]));
                exact &= x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits());
            }
        }
    }
    (count, exact)
}

fn train_run(world: &World, deformation: bool, bg_weight: f64, instrument: bool) -> Run {
    let mut cfg = TrainConfig::desk();
    cfg.model.deformation = deformation;
    cfg.bg_weight = bg_weight;
    let mut trainer = Trainer::new(&world.train, cfg.clone()).unwrap();
    let step = trainer.step_size();
    let initial_loss = dataset_spectrum_loss(trainer.model(), &world.train, step, TAU).unwrap();
    let probe = sample_rays(&world.test, 1024, &mut ChaCha8Rng::seed_from_u64(99));
    let mut upsamples = Vec::new();
    let mut instrumentation = Duration::ZERO;
    let started = Instant::now();
    while !trainer.is_done() {
        let stage = trainer.stage();
        if instrument && stage < cfg.stages && cfg.upsample_iters[stage] == trainer.iteration() {
            let t = Instant::now();
            let before = trainer.model().clone();
            let loss = |m: &FieldModel| evaluate_rays(m, &world.test, &probe, step, TAU, bg_weight).unwrap().total;
            let loss_before = loss(&before);
            trainer.apply_pending_upsample().unwrap();
            let after = trainer.model();
            let (n_density, exact_density) = grids_coincide(&before.density, &after.density);
            let (_, exact_features) = grids_coincide(&before.features, &after.features);
            upsamples.push(UpsampleEvent {
                from: before.dims(),
                to: after.dims(),
                loss_before,
                loss_after: loss(after),
                coinciding_nodes: n_density,
                coinciding_exact: exact_density && exact_features,
            });
            instrumentation += t.elapsed();
        }
        trainer.step().unwrap();
    }
    let train_secs = (started.elapsed() - instrumentation).as_secs_f64();
    let history = trainer.history().to_vec();
    let model = trainer.into_model();
    let final_loss = dataset_spectrum_loss(&model, &world.train, step, TAU).unwrap();
    println!(
        "  trained (deformation {deformation}, bg_weight {bg_weight}) in {train_secs:.1}s, train loss {initial_loss:.3e} -> {final_loss:.3e}"
    );
    Run {
        model,
        step,
        train_secs,
        initial_loss,
        final_loss,
        history,
        upsamples,
    }
}

fn heldout_ssim(run: &Run, world: &World) -> Vec<f64> {
    let cfg = SsimConfig::default();
    let mut scores: Vec<f64> = world
        .test
        .records
        .iter()
        .map(|r| {
            let p = render_spectrum(&run.model, &world.test.geometry, r.tx, run.step, TAU).unwrap();
            ssim(&p, &r.spectrum, &cfg).unwrap()
        })
        .collect();
    scores.sort_by(f64::total_cmp);
    scores
}

fn median(sorted: &[f64]) -> f64 {
    percentile(sorted, 0.5)
}

fn criterion_1(l: &mut Ledger) {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let k = rng.random_range(1..=512usize);
        let sigma: Vec<f64> = (0..k)
            .map(|_| if rng.random::<f64>() < 0.3 { 0.0 } else { rng.random_range(0.0..20.0) })
            .collect();
        let signal: Vec<f64> = (0..k).map(|_| rng.random_range(1e-6..1.0)).collect();
        let delta: Vec<f64> = (0..k).map(|_| rng.random_range(1e-3..0.1)).collect();
        let fast = composite(&sigma, &signal, &delta).unwrap();
        let slow = oracle_composite(&sigma, &signal, &delta);
        worst = worst
            .max((fast.radiance - slow.radiance).abs())
            .max((fast.final_transmittance - slow.final_transmittance).abs());
        for (a, b) in fast.weights.iter().zip(&slow.weights) {
            worst = worst.max((a - b).abs());
        }
    }
    let secs = started.elapsed().as_secs_f64();
    l.report(
        "1",
        worst < 1e-10 && secs < 5.0,
        format!("(1000 rays, K <= 512: max |difference| {worst:.2e} < 1e-10, {secs:.2}s < 5s)"),
    );
}

/// Randomized tiny model and data for the gradient check.
fn tiny_problem() -> (FieldModel, TrainingSet) {
    let bbox = Aabb::new(Vec3::ZERO, Vec3::splat(1.0)).unwrap();
    let cfg = ModelConfig {
        dims: [4, 4, 4],
        feature_dim: 2,
        hidden_width: 8,
        ..ModelConfig::desk()
    };
    let mut model = FieldModel::new(&cfg, bbox, 13).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for t in model.tensors_mut() {
        let grid = t.group == ParamGroup::Grid;
        for v in t.values.iter_mut() {
            *v += if grid { rng.random_range(-1.0..3.0) } else { rng.random_range(-0.2..0.2) };
        }
    }
    let geometry = SceneGeometry::new(Vec3::new(0.5, 0.45, 0.3), bbox, 8, 4).unwrap();
    let records = (0..3)
        .map(|_| TrainingRecord {
            tx: Vec3::new(rng.random(), rng.random(), rng.random()),
            spectrum: SpatialSpectrum::from_values(8, 4, (0..32).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap(),
        })
        .collect();
    (model, TrainingSet::new(geometry, records).unwrap())
}

fn criterion_3(l: &mut Ledger) {
    let started = Instant::now();
    let (mut model, data) = tiny_problem();
    let rays = sample_rays(&data, 16, &mut ChaCha8Rng::seed_from_u64(15));
    let step = 0.07;
    let (_, grads) = batch_gradient(&model, &data, &rays, step, TAU, DEFAULT_BG_WEIGHT).unwrap();
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.to_vec()).collect();
    let loss = |m: &FieldModel| evaluate_rays(m, &data, &rays, step, TAU, DEFAULT_BG_WEIGHT).unwrap().total;

    let h = 1e-5;
    let (mut checked, mut nonzero, mut worst) = (0usize, 0usize, 0.0f64);
    let mut worst_at = String::new();
    for (ti, a_t) in analytic.iter().enumerate() {
        for (vi, &a) in a_t.iter().enumerate() {
            let orig = model.tensors_mut()[ti].values[vi];
            model.tensors_mut()[ti].values[vi] = orig + h;
            let p = loss(&model);
            model.tensors_mut()[ti].values[vi] = orig - h;
            let q = loss(&model);
            model.tensors_mut()[ti].values[vi] = orig;
            let fd = (p - q) / (2.0 * h);
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
            if rel > worst {
                worst = rel;
                worst_at = format!("{}[{vi}]", model.tensors_mut()[ti].name);
            }
            checked += 1;
            nonzero += usize::from(a != 0.0);
        }
    }
    let secs = started.elapsed().as_secs_f64();
    l.report(
        "3",
        worst < 1e-4 && secs < 60.0,
        format!(
            "({checked} parameters, {nonzero} with nonzero gradient: worst relative error {worst:.2e} at {worst_at} < 1e-4, {secs:.1}s < 60s)"
        ),
    );
}

fn criterion_4(l: &mut Ledger) {
    let bbox = Aabb::new(Vec3::new(-1.0, 0.5, 2.0), Vec3::new(2.5, 3.0, 4.0)).unwrap();
    let dims = [8, 7, 6];
    let affine = |p: Vec3, c: usize| 0.3 + c as f64 * 0.7 + (1.5 - c as f64) * p.x - 2.0 * p.y + (0.25 + c as f64) * p.z;
    let grid = VoxelGrid::from_fn(dims, 3, bbox, |p, out| {
        for (c, v) in out.iter_mut().enumerate() {
            *v = affine(p, c);
        }
    })
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (lo, hi) = (bbox.min(), bbox.max());
    let point = |rng: &mut ChaCha8Rng| {
        Vec3::new(rng.random_range(lo.x..=hi.x), rng.random_range(lo.y..=hi.y), rng.random_range(lo.z..=hi.z))
    };
    let mut affine_err: f64 = 0.0;
    for _ in 0..10_000 {
        let p = point(&mut rng);
        for (c, v) in grid.interpolate(p).unwrap().iter().enumerate() {
            affine_err = affine_err.max((v - affine(p, c)).abs());
        }
    }

    let random = VoxelGrid::from_fn(dims, 3, bbox, |_, out| {
        for v in out.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
    })
    .unwrap();
    let mut lhs = 0.0;
    let mut adjoint = vec![0.0; random.values().len()];
    for _ in 0..2000 {
        let p = point(&mut rng);
        let u: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        lhs += random.interpolate(p).unwrap().iter().zip(&u).map(|(a, b)| a * b).sum::<f64>();
        random.interpolate_backward(p, &u, &mut adjoint).unwrap();
    }
    let rhs: f64 = random.values().iter().zip(&adjoint).map(|(a, b)| a * b).sum();
    let adjoint_err = (lhs - rhs).abs() / lhs.abs().max(rhs.abs());
    l.report(
        "4",
        affine_err < 1e-6 && adjoint_err < 1e-5,
        format!("(affine max error {affine_err:.2e} < 1e-6, adjoint relative error {adjoint_err:.2e} < 1e-5)"),
    );
}

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn criterion_10(l: &mut Ledger) {
    let pipeline = |root: &Path| {
        let run = |args: &[&str]| {
            let status = Command::new(env!("CARGO_BIN_EXE_voxelrf"))
                .args(args)
                .current_dir(root)
                .stderr(std::process::Stdio::null())
                .status()
                .unwrap();
            assert!(status.success(), "voxelrf {args:?} failed");
        };
        run(&["synth", "--n-tx", "20", "--seed", "5", "--out", "data"]);
        run(&["train", "--data", "data", "--out", "model.vxck", "--iters", "60", "--train.batch_rays", "32", "--train.log_interval", "5"]);
        run(&["eval", "--checkpoint", "model.vxck", "--data", "data", "--out", "metrics", "--rssi"]);
        tree_bytes(root)
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ta, tb) = (pipeline(a.path()), pipeline(b.path()));
    let names: Vec<&str> = ta.iter().map(|(n, _)| n.as_str()).collect();
    let has = |n: &str| names.contains(&n);
    let complete = has("model.vxck.loss.csv") && has("metrics/ssim.csv") && has("metrics/rssi_error.csv") && has("data/manifest.json");
    l.report(
        "10",
        complete && ta == tb,
        format!("(two synth+train+eval runs, {} files incl. dataset, loss log, metric CSVs: byte-identical = {})", ta.len(), ta == tb),
    );
}

fn entropy_units() -> (bool, String) {
    let (half, _) = entropy_term(0.5);
    let (lo, _) = entropy_term(0.0);
    let (hi, _) = entropy_term(1.0);
    let pass = (half - std::f64::consts::LN_2).abs() < 1e-9 && lo < 2e-5 && hi < 2e-5;
    (pass, format!("loss(0.5) - ln 2 = {:.1e}, loss(0) = {lo:.2e}, loss(1) = {hi:.2e}", half - std::f64::consts::LN_2))
}

/// Fraction of held-out rays whose final transmittance lies in (0.1, 0.9).
fn ambiguous_fraction(run: &Run, world: &World) -> f64 {
    let g = &world.test.geometry;
    let (az, el) = g.resolution();
    let mut total = 0usize;
    let mut ambiguous = 0usize;
    for r in &world.test.records {
        for m in 0..az {
            for n in 0..el {
                let (_, t) = render_ray(&run.model, g, r.tx, g.direction(m, n).unwrap(), run.step, TAU).unwrap();
                total += 1;
                ambiguous += usize::from(t > 0.1 && t < 0.9);
            }
        }
    }
    ambiguous as f64 / total as f64
}

fn main() {
    let started = Instant::now();
    let mut l = Ledger::default();

    criterion_1(&mut l);
    criterion_3(&mut l);
    criterion_4(&mut l);
    criterion_10(&mut l);
    let (units_pass, units_detail) = entropy_units();

    println!("  synthesizing scene (tx_modulation 0.5)");
    let world = World::new(0.5);
    let full = train_run(&world, true, DEFAULT_BG_WEIGHT, true);

    // 2: conservation on every ray of a full spectrum.
    {
        let g = &world.test.geometry;
        let (az, el) = g.resolution();
        let mut worst: f64 = 0.0;
        for m in 0..az {
            for n in 0..el {
                let tr = trace_ray(&full.model, g, world.test.records[0].tx, g.direction(m, n).unwrap(), full.step, TAU).unwrap();
                let total: f64 = tr.weights.iter().sum::<f64>() + tr.final_transmittance;
                worst = worst.max((total - 1.0).abs());
            }
        }
        l.report("2", worst <= 1e-6, format!("({az}x{el} rays: max |sum w + T_K - 1| = {worst:.2e} <= 1e-6)"));
    }

    // 1 (model path): traced rays of the trained model against the oracle compositor.
    {
        let g = &world.test.geometry;
        let mut worst: f64 = 0.0;
        for (m, n) in [(0, 0), (5, 4), (17, 8), (30, 2)] {
            let tr = trace_ray(&full.model, g, world.test.records[1].tx, g.direction(m, n).unwrap(), full.step, 0.0).unwrap();
            let delta = vec![full.step; tr.sigma.len()];
            let o = oracle_composite(&tr.sigma, &tr.signal, &delta);
            worst = worst.max((o.radiance - tr.radiance).abs()).max((o.final_transmittance - tr.final_transmittance).abs());
        }
        l.report("1b", worst < 1e-10, format!("(trained-model rays vs oracle compositor: max |difference| {worst:.2e} < 1e-10)"));
    }

    // 5: empty-space skipping soundness.
    {
        let g = &world.test.geometry;
        let mut max_diff: f64 = 0.0;
        let (mut kept, mut skipped) = (0usize, 0usize);
        for r in &world.test.records {
            let (a, stats) = render_spectrum_with_stats(&full.model, g, r.tx, full.step, TAU).unwrap();
            let b = render_spectrum(&full.model, g, r.tx, full.step, 0.0).unwrap();
            for (x, y) in a.values().iter().zip(b.values()) {
                max_diff = max_diff.max((x - y).abs());
            }
            kept += stats.kept;
            skipped += stats.skipped;
        }
        let frac = skipped as f64 / (kept + skipped) as f64;
        l.report(
            "5",
            max_diff < 1e-3 && frac >= 0.3,
            format!("(max |R(tau=1e-4) - R(tau=0)| = {max_diff:.2e} < 1e-3, skipped {:.1}% >= 30%)", 100.0 * frac),
        );
    }

    // 6: progressive upsampling.
    {
        let mut pass = full.upsamples.len() == 3;
        let mut parts = Vec::new();
        for e in &full.upsamples {
            let change = (e.loss_after - e.loss_before).abs() / e.loss_before;
            pass &= e.coinciding_exact && change < 0.2;
            parts.push(format!(
                "{:?}->{:?}: {} coinciding nodes exact={}, held-out loss change {:.2}%",
                e.from[0],
                e.to[0],
                e.coinciding_nodes,
                e.coinciding_exact,
                100.0 * change
            ));
        }
        l.report("6", pass, format!("({}; change < 20%)", parts.join("; ")));
    }

    // 7: end-to-end desk training.
    let ssim_full = heldout_ssim(&full, &world);
    {
        let med = median(&ssim_full);
        let ratio = full.final_loss / full.initial_loss;
        let monotone = full.history.first().unwrap().report.spectrum_loss > full.history.last().unwrap().report.spectrum_loss;
        l.report(
            "7",
            med >= 0.85 && ratio < 0.1 && full.train_secs <= 600.0 && monotone,
            format!(
                "(held-out median SSIM {med:.4} >= 0.85, final/initial loss {:.2}% < 10%, training {:.0}s <= 600s)",
                100.0 * ratio,
                full.train_secs
            ),
        );
    }

    // 9: RSSI after calibration on the training split.
    {
        let g = &world.test.geometry;
        let pairs: Vec<(f64, f64)> = world
            .train_idx
            .iter()
            .map(|&i| {
                let r = &world.synth.records[i];
                (render_spectrum(&full.model, g, r.tx, full.step, TAU).unwrap().sum(), r.rssi_dbm.unwrap())
            })
            .collect();
        let c = calibration_offset(&pairs).unwrap();
        let mut errors: Vec<f64> = world
            .test_idx
            .iter()
            .map(|&i| {
                let r = &world.synth.records[i];
                let pred = aggregate_rssi(&render_spectrum(&full.model, g, r.tx, full.step, TAU).unwrap(), c).unwrap();
                (pred - r.rssi_dbm.unwrap()).abs()
            })
            .collect();
        errors.sort_by(f64::total_cmp);
        let med = median(&errors);
        l.report("9", med <= 3.0, format!("(held-out median |RSSI error| {med:.3} dB <= 3 dB, calibration {c:.2} dB)"));
    }

    // 11: inference time and skipping speedup.
    {
        let g = &world.test.geometry;
        let tx = world.test.records[2].tx;
        let time = |tau: f64| {
            (0..7)
                .map(|_| {
                    let t = Instant::now();
                    render_spectrum(&full.model, g, tx, full.step, tau).unwrap();
                    t.elapsed().as_secs_f64()
                })
                .fold(f64::INFINITY, f64::min)
        };
        let (with_skip, without) = (time(TAU), time(0.0));
        l.report(
            "11",
            with_skip < 0.1 && with_skip <= without,
            format!(
                "(36x9 inference {:.1} ms < 100 ms single-threaded; skipping {:.1} ms <= no skipping {:.1} ms)",
                1e3 * with_skip,
                1e3 * with_skip,
                1e3 * without
            ),
        );
    }

    // 8: deformation ablation on both scenes.
    {
        let no_deform = train_run(&world, false, DEFAULT_BG_WEIGHT, false);
        let gap_mod = median(&ssim_full) - median(&heldout_ssim(&no_deform, &world));
        println!("  synthesizing scene (tx_modulation 0)");
        let flat = World::new(0.0);
        let flat_full = train_run(&flat, true, DEFAULT_BG_WEIGHT, false);
        let flat_plain = train_run(&flat, false, DEFAULT_BG_WEIGHT, false);
        let gap_flat = median(&heldout_ssim(&flat_full, &flat)) - median(&heldout_ssim(&flat_plain, &flat));
        l.report(
            "8",
            gap_mod >= 0.02 && gap_flat.abs() < 0.02,
            format!("(median SSIM gain from deformation: {gap_mod:.4} >= 0.02 at tx_modulation 0.5, |{gap_flat:.4}| < 0.02 at 0)"),
        );
    }

    // 12: background entropy.
    {
        let no_bg = train_run(&world, true, 0.0, false);
        let (with_bg, without_bg) = (ambiguous_fraction(&full, &world), ambiguous_fraction(&no_bg, &world));
        l.report(
            "12",
            units_pass && with_bg <= without_bg,
            format!(
                "({units_detail}; held-out rays with T_K in (0.1, 0.9): {:.2}% with bg weight 1e-4 <= {:.2}% without)",
                100.0 * with_bg,
                100.0 * without_bg
            ),
        );
    }

    println!("acceptance finished in {:.0}s", started.elapsed().as_secs_f64());
    if !l.failed.is_empty() {
        println!("failed criteria: {}", l.failed.join(", "));
        std::process::exit(1);
    }
}
