//! Acceptance suite. Each criterion prints one `PASS` or `FAIL` line with
//! its measured values; the process exits nonzero if any criterion fails.
//!
//! Run with `cargo test -p subpop-cli --test acceptance`.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use ndarray::{Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

use subpop_core::adapter::{encode_checkpoint, grad_check, AdapterSpec, Mlp};
use subpop_core::dro::{chi2_risk, cvar_dual_value, cvar_risk, train_dro, DroConfig, DroMethod};
use subpop_core::embed_store::{read_embeddings, write_embeddings};
use subpop_core::eval::prepare_inputs;
use subpop_core::ldro::{stack_on, train_ldro};
use subpop_core::losses::{
    cosine_with_grad, cross_entropy_per_sample, entropy_loss, entropy_with_grad, ldro_objective,
};
use subpop_core::synth::{dataset_probe, generate, SynthConfig, SynthData};
use subpop_core::{
    AdapterMLP, Classifier, EmbeddingMatrix, GroupedDataset, LdroConfig, LdroRun, Monitor,
    TrainOptions, TrainOutcome,
};

const SEEDS: u64 = 10;
/// Learning rate of every synthetic training run below, identical across methods.
const SYNTH_LR: f64 = 3e-3;

type Verdict = std::result::Result<String, String>;

fn require(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

struct Suite {
    failures: usize,
}

impl Suite {
    fn run(&mut self, name: &str, limit: Option<Duration>, check: impl FnOnce() -> Verdict) {
        let start = Instant::now();
        let verdict = check();
        let elapsed = start.elapsed();
        let (mut pass, mut detail) = match verdict {
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        detail = format!("{detail}; {:.2}s", elapsed.as_secs_f64());
        if let Some(limit) = limit {
            detail = format!("{detail} (limit {}s)", limit.as_secs());
            pass &= elapsed < limit;
        }
        if !pass {
            self.failures += 1;
        }
        println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    }
}

fn synth_options(seed: u64) -> TrainOptions {
    TrainOptions {
        lr: SYNTH_LR,
        seed,
        ..Default::default()
    }
}

fn synth_data(seed: u64) -> SynthData {
    generate(&SynthConfig {
        seed,
        ..Default::default()
    })
    .expect("default synthetic config is valid")
}

fn population_std(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

// ---------------------------------------------------------------- gradients

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

fn unit_rows(mut m: Array2<f64>) -> Array2<f64> {
    for mut row in m.rows_mut() {
        let n = row.dot(&row).sqrt();
        row /= n;
    }
    m
}

fn gradient_soundness() -> Verdict {
    const E: usize = 6;
    const B: usize = 3;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: Vec<(String, f64)> = Vec::new();
    for trial in 0..4u64 {
        let spec = AdapterSpec {
            dim: E,
            depth: 2,
            hidden: E,
            blend: if trial % 2 == 0 { 1.0 } else { 0.7 },
        };
        let model: Mlp<f64> = AdapterMLP::init(spec, trial).unwrap().to_f64();
        let x = unit_rows(random(B, E, &mut rng));
        let texts = unit_rows(random(3, E, &mut rng));
        let debias = [unit_rows(random(2, E, &mut rng)), unit_rows(random(2, E, &mut rng))];
        let labels = [0, 2, 1];

        let entropy = |out: ArrayView2<f64>| {
            let mut g = Array2::zeros(out.raw_dim());
            let mut v = 0.0;
            for (i, row) in out.rows().into_iter().enumerate() {
                let (h, gr) = entropy_with_grad(&row.to_vec());
                v += h;
                g.row_mut(i).assign(&Array1::from(gr));
            }
            Ok((v, g))
        };
        let cosine = |out: ArrayView2<f64>| {
            let mut g = Array2::zeros(out.raw_dim());
            let mut v = 0.0;
            for i in 0..out.nrows() {
                let (c, gr) = cosine_with_grad(x.row(i), out.row(i))?;
                v += c;
                g.row_mut(i).assign(&gr);
            }
            Ok((v, g))
        };
        let ce = |out: ArrayView2<f64>| {
            let r = cross_entropy_per_sample(out, texts.view(), &labels, 5.0)?;
            Ok((r.mean(), r.grad_rows / out.nrows() as f64))
        };
        let ldro = |scale: Option<f64>| {
            let debias = &debias;
            let x = &x;
            move |out: ArrayView2<f64>| {
                let views: Vec<ArrayView2<f64>> = debias.iter().map(|g| g.view()).collect();
                let cfg = LdroConfig {
                    debias_scale: scale,
                    ..Default::default()
                };
                let l = ldro_objective(x.view(), out, &views, &cfg)?;
                Ok((l.value, l.grad))
            }
        };
        let scaled = ldro(Some(3.0));
        let bare = ldro(None);
        let checks: [(&str, &subpop_core::adapter::OutputLoss<'_>); 5] = [
            ("entropy", &entropy),
            ("cosine", &cosine),
            ("cross-entropy", &ce),
            ("objective(scaled)", &scaled),
            ("objective(bare)", &bare),
        ];
        for (name, loss) in checks {
            let r = grad_check(&model, loss, x.view(), 1e-5, 1e-5).map_err(|e| e.to_string())?;
            match worst.iter_mut().find(|(n, _)| n == name) {
                Some(w) => w.1 = w.1.max(r.max_rel_error),
                None => worst.push((name.to_string(), r.max_rel_error)),
            }
        }
    }
    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    let detail = worst
        .iter()
        .map(|(n, e)| format!("{n} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    require(max <= 1e-5, format!("max relative error {max:.2e} <= 1e-5 [{detail}]"))
}

// ------------------------------------------------------------------ entropy

fn entropy_law() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut bound_violations, mut max_uniform, mut max_shift) = (0, 0.0f64, 0.0f64);
    for _ in 0..1000 {
        let s = rng.random_range(2..=8usize);
        let spread = [0.1, 1.0, 10.0, 100.0][rng.random_range(0..4)];
        let logits: Vec<f64> = (0..s).map(|_| rng.random_range(-spread..spread)).collect();
        let h = entropy_loss(&logits);
        let ln_s = (s as f64).ln();
        if !(h >= 0.0 && h <= ln_s + 1e-12) {
            bound_violations += 1;
        }
        let c: f64 = rng.random_range(-50.0..50.0);
        let shifted: Vec<f64> = logits.iter().map(|a| a + c).collect();
        max_shift = max_shift.max((entropy_loss(&shifted) - h).abs());
        max_uniform = max_uniform.max((entropy_loss(&vec![c; s]) - ln_s).abs());
    }
    require(
        bound_violations == 0 && max_uniform <= 1e-9 && max_shift <= 1e-9,
        format!(
            "1000 vectors: {bound_violations} bound violations, uniform |H - ln s| {max_uniform:.1e}, shift {max_shift:.1e}"
        ),
    )
}

// --------------------------------------------------------------------- cvar

fn bytes(a: &AdapterMLP) -> Vec<u8> {
    encode_checkpoint(std::slice::from_ref(a))
}

fn cvar_dual_primal() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut max_gap = 0.0f64;
    let mut max_sorted_gap = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(1..=64usize);
        let losses: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..5.0)).collect();
        let mut sorted = losses.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        for alpha in [0.1, 0.25, 0.5, 1.0] {
            let primal = cvar_risk(&losses, alpha).map_err(|e| e.to_string())?.value;
            max_gap = max_gap.max((primal - cvar_dual_value(&losses, alpha)).abs());
            // independent tail mean: whole losses then the fractional remainder
            let k = alpha * n as f64;
            let mut acc = 0.0;
            let mut left = k;
            for &l in &sorted {
                let take = left.min(1.0);
                if take <= 0.0 {
                    break;
                }
                acc += take * l;
                left -= take;
            }
            max_sorted_gap = max_sorted_gap.max((primal - acc / k).abs());
        }
    }

    let d = generate(&SynthConfig {
        n: 1000,
        ..Default::default()
    })
    .unwrap();
    let opts = TrainOptions {
        epochs: 5,
        batch_size: 64,
        seed: 3,
        ..synth_options(3)
    };
    let erm = train_dro(&d.train, &d.prompts, &DroConfig::with_method(DroMethod::Erm), &opts, Monitor::default())
        .map_err(|e| e.to_string())?;
    let cvar_cfg = DroConfig {
        alpha: 1.0,
        ..DroConfig::with_method(DroMethod::Cvar)
    };
    let cvar = train_dro(&d.train, &d.prompts, &cvar_cfg, &opts, Monitor::default()).map_err(|e| e.to_string())?;
    let identical = erm.checkpoints.len() == cvar.checkpoints.len()
        && erm.checkpoints.iter().zip(&cvar.checkpoints).all(|(a, b)| bytes(a) == bytes(b));
    require(
        max_gap <= 1e-6 && max_sorted_gap <= 1e-6 && identical,
        format!(
            "dual-primal gap {max_gap:.1e}, sorted-tail gap {max_sorted_gap:.1e} over 100x4 cases; alpha=1 vs erm per-epoch parameters identical: {identical}"
        ),
    )
}

// ---------------------------------------------------------------- chi-square

/// Exact maximum of `q . l` over the simplex intersected with the ball
/// `(1/2n) sum (n q_i - 1)^2 <= rho`, by enumerating supports: on a fixed
/// support the problem is a linear objective over a sphere cap.
fn chi2_active_set(losses: &[f64], rho: f64) -> f64 {
    let n = losses.len();
    let nf = n as f64;
    let radius2 = 2.0 * rho / nf;
    let mut best = f64::NEG_INFINITY;
    for mask in 1u32..(1 << n) {
        let support: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        let k = support.len() as f64;
        // distance from the uniform point to the centre of this face
        let outside = (nf - k) / (nf * nf);
        let shift = (1.0 - k / nf) / k;
        let r2 = radius2 - outside - k * shift * shift;
        if r2 < -1e-15 {
            continue;
        }
        let r = r2.max(0.0).sqrt();
        let l: Vec<f64> = support.iter().map(|&i| losses[i]).collect();
        let lm = l.iter().sum::<f64>() / k;
        let dev: Vec<f64> = l.iter().map(|v| v - lm).collect();
        let norm = dev.iter().map(|v| v * v).sum::<f64>().sqrt();
        let q: Vec<f64> = dev
            .iter()
            .map(|d| 1.0 / nf + shift + if norm > 0.0 { r * d / norm } else { 0.0 })
            .collect();
        if q.iter().any(|&v| v < -1e-12) {
            continue;
        }
        best = best.max(q.iter().zip(&l).map(|(a, b)| a * b).sum());
    }
    best
}

/// Grid search over the simplex with step `1/steps` (small n only).
fn chi2_grid(losses: &[f64], rho: f64, steps: usize) -> f64 {
    let n = losses.len();
    let nf = n as f64;
    let mut best = f64::NEG_INFINITY;
    let mut counts = vec![0usize; n];
    fn rec(i: usize, left: usize, counts: &mut Vec<usize>, visit: &mut dyn FnMut(&[usize])) {
        if i + 1 == counts.len() {
            counts[i] = left;
            visit(counts);
            return;
        }
        for c in 0..=left {
            counts[i] = c;
            rec(i + 1, left - c, counts, visit);
        }
    }
    rec(0, steps, &mut counts, &mut |c| {
        let q: Vec<f64> = c.iter().map(|&v| v as f64 / steps as f64).collect();
        let div = q.iter().map(|v| (nf * v - 1.0).powi(2)).sum::<f64>() / (2.0 * nf);
        if div <= rho {
            best = best.max(q.iter().zip(losses).map(|(a, b)| a * b).sum());
        }
    });
    best
}

fn chi2_brute_force() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (mut max_exact, mut max_grid, mut monotone_breaks) = (0.0f64, 0.0f64, 0);
    let mut cases = 0;
    for n in 1..=6usize {
        for _ in 0..20 {
            let losses: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            let mut last = f64::NEG_INFINITY;
            for rho in [0.1, 1.0] {
                let dual = chi2_risk(&losses, rho).map_err(|e| e.to_string())?.value;
                max_exact = max_exact.max((dual - chi2_active_set(&losses, rho)).abs());
                if n <= 3 {
                    max_grid = max_grid.max((dual - chi2_grid(&losses, rho, 2000)).abs());
                }
                cases += 1;
                if dual < last - 1e-12 {
                    monotone_breaks += 1;
                }
                last = dual;
            }
            let ladder: Vec<f64> = (1..=40)
                .map(|k| chi2_risk(&losses, 0.05 * k as f64).unwrap().value)
                .collect();
            monotone_breaks += ladder.windows(2).filter(|w| w[1] < w[0] - 1e-12).count();
        }
    }
    require(
        max_exact <= 1e-3 && max_grid <= 1e-3 && monotone_breaks == 0,
        format!(
            "{cases} cases n<=6: |dual - active-set max| {max_exact:.1e}, |dual - grid max| {max_grid:.1e} (n<=3, step 1/2000); monotonicity breaks {monotone_breaks}"
        ),
    )
}

// ---------------------------------------------------------------- debiasing

fn adapted(data: &GroupedDataset, adapter: &AdapterMLP) -> Array2<f32> {
    adapter.apply(prepare_inputs(data.embeddings(), true).view()).unwrap()
}

fn synthetic_debiasing() -> Verdict {
    let d = synth_data(0);
    let zs = Classifier::zero_shot(&d.prompts.classification().embeddings)
        .unwrap()
        .evaluate(&d.test)
        .map_err(|e| e.to_string())?;
    let raw_probe = dataset_probe(&d.test, &d.test.embeddings().to_array(), &d.v_group).map_err(|e| e.to_string())?;
    let run = LdroRun {
        cfg: LdroConfig {
            eta: 0.2,
            ..Default::default()
        },
        options: synth_options(0),
        ..Default::default()
    };
    let out = train_ldro(&d.train, &d.prompts, &run, Monitor::default()).map_err(|e| e.to_string())?;
    let clf = Classifier::new(&d.prompts.classification().embeddings, vec![out.adapter.clone()], true).unwrap();
    let ld = clf.evaluate(&d.test).map_err(|e| e.to_string())?;
    let probe = dataset_probe(&d.test, &adapted(&d.test, &out.adapter), &d.v_group).map_err(|e| e.to_string())?;
    let gain = ld.worst_group_acc - zs.worst_group_acc;
    let avg_change = (ld.average_acc - zs.average_acc).abs();
    require(
        zs.average_acc >= 0.85
            && zs.worst_group_acc <= 0.75
            && raw_probe >= 0.90
            && gain >= 0.10
            && avg_change <= 0.03
            && probe <= 0.60,
        format!(
            "zero-shot avg {:.3} worst {:.3}; 50 epochs eta 0.2: avg {:.3} worst {:.3} (gain {:+.1} pts, avg change {:.1} pts); probe raw {raw_probe:.3} -> adapted {probe:.3}",
            zs.average_acc,
            zs.worst_group_acc,
            ld.average_acc,
            ld.worst_group_acc,
            100.0 * gain,
            100.0 * avg_change
        ),
    )
}

// ----------------------------------------------------- multi-seed synthetic

struct SeedRuns {
    ldro: TrainOutcome,
    chi2: TrainOutcome,
    cvar: TrainOutcome,
    stacked: TrainOutcome,
}

fn seed_runs(seed: u64) -> SeedRuns {
    let d = synth_data(seed);
    let splits = [("val", &d.val), ("test", &d.test)];
    let monitor = Monitor::new(&splits);
    let opts = synth_options(seed);
    let run = LdroRun {
        options: opts.clone(),
        ..Default::default()
    };
    let ldro = train_ldro(&d.train, &d.prompts, &run, monitor).unwrap();
    let chi2 = train_dro(&d.train, &d.prompts, &DroConfig::with_method(DroMethod::Chi2), &opts, monitor).unwrap();
    let cvar_cfg = DroConfig::with_method(DroMethod::Cvar);
    let cvar = train_dro(&d.train, &d.prompts, &cvar_cfg, &opts, monitor).unwrap();
    let deep = TrainOptions { depth: 3, ..opts };
    let stacked = stack_on(
        ldro.adapter.clone(),
        ldro.report.clone(),
        &d.train,
        &d.prompts,
        true,
        &cvar_cfg,
        &deep,
        monitor,
    )
    .unwrap()
    .second;
    SeedRuns {
        ldro,
        chi2,
        cvar,
        stacked,
    }
}

fn tail_std(o: &TrainOutcome) -> (f64, Vec<f64>) {
    let series = o.report.worst_series("test");
    let tail = series[series.len() - 20..].to_vec();
    (population_std(&tail), tail)
}

fn stability(runs: &[SeedRuns]) -> Verdict {
    let (mut l_std, mut c_std, mut l_all, mut c_all) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for r in runs {
        let (s, t) = tail_std(&r.ldro);
        l_std.push(s);
        l_all.extend(t);
        let (s, t) = tail_std(&r.chi2);
        c_std.push(s);
        c_all.extend(t);
    }
    let (l, c) = (mean(&l_std), mean(&c_std));
    let (lp, cp) = (population_std(&l_all), population_std(&c_all));
    require(
        l <= c && lp <= cp,
        format!(
            "{SEEDS} seeds, last 20 of 50 epochs, test worst-group: mean per-seed std ldro {l:.4} vs chi2 {c:.4}; pooled std ldro {lp:.4} vs chi2 {cp:.4}"
        ),
    )
}

fn selected_test_worst(o: &TrainOutcome) -> f64 {
    let epoch = o.report.selected_epoch.expect("validation monitored");
    o.report.report(epoch, "test").unwrap().worst_group_acc
}

fn stacked_dispersion(runs: &[SeedRuns]) -> Verdict {
    let cvar: Vec<f64> = runs.iter().map(|r| selected_test_worst(&r.cvar)).collect();
    let stacked: Vec<f64> = runs.iter().map(|r| selected_test_worst(&r.stacked)).collect();
    let (sc, ss) = (population_std(&cvar), population_std(&stacked));
    require(
        ss <= sc,
        format!(
            "{SEEDS} seeds, validation-selected test worst-group: ldro+cvar {:.3}±{ss:.4} vs cvar {:.3}±{sc:.4}",
            mean(&stacked),
            mean(&cvar)
        ),
    )
}

// ------------------------------------------------------------ label blindness

fn label_blindness() -> Verdict {
    use rand::seq::SliceRandom;
    let d = synth_data(0);
    let run = LdroRun {
        options: synth_options(0),
        ..Default::default()
    };
    let fingerprint = |data: &GroupedDataset| -> std::result::Result<Vec<Vec<u8>>, String> {
        let o = train_ldro(data, &d.prompts, &run, Monitor::default()).map_err(|e| e.to_string())?;
        let mut all = vec![bytes(&o.adapter)];
        all.extend(o.checkpoints.iter().map(bytes));
        Ok(all)
    };
    let base = fingerprint(&d.train)?;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut labels = d.train.labels().unwrap().to_vec();
    let mut groups = d.train.groups().unwrap().to_vec();
    labels.shuffle(&mut rng);
    groups.shuffle(&mut rng);
    let shuffled = GroupedDataset::new(d.train.embeddings().clone(), Some(labels), Some(groups), 2, 4).unwrap();
    let shuffled_same = fingerprint(&shuffled)? == base;
    let removed_same = fingerprint(&d.train.without_annotations())? == base;
    require(
        shuffled_same && removed_same,
        format!(
            "final adapter and {} epoch checkpoints byte-identical: shuffled {shuffled_same}, removed {removed_same}",
            base.len() - 1
        ),
    )
}

// --------------------------------------------------- formats and manifests

fn ldeb_round_trip(dir: &Path) -> std::result::Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for i in 0..200 {
        let dim = rng.random_range(1..=48usize);
        let count = rng.random_range(0..=40usize);
        let data: Vec<f32> = (0..dim * count)
            .map(|_| loop {
                let v = f32::from_bits(rng.random());
                if v.is_finite() {
                    break v;
                }
            })
            .collect();
        let m = EmbeddingMatrix::new(dim, data).map_err(|e| e.to_string())?;
        let path = dir.join(format!("m{i}.ldeb"));
        write_embeddings(&m, &path).map_err(|e| e.to_string())?;
        let back = read_embeddings(&path).map_err(|e| e.to_string())?;
        let same = back.dim() == dim
            && back.count() == count
            && back.data().iter().zip(m.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            return Err(format!("matrix {i} ({count}x{dim}) did not round-trip"));
        }
    }
    Ok(200)
}

fn subpop(args: &[String]) -> std::result::Result<(), String> {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_subpop"));
    for (k, _) in std::env::vars().filter(|(k, _)| k.starts_with("SUBPOP_")) {
        cmd.env_remove(k);
    }
    let out = cmd.args(args).output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("subpop {args:?}: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap().flatten() {
            let p = entry.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n != "manifest.txt") {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

/// Reruns a recorded command into `replay` and compares every output file
/// (manifests aside, which name the output location) byte for byte.
fn replay_matches(manifest: &Path, original: &Path, replay: &Path) -> std::result::Result<usize, String> {
    subpop(&["--manifest".into(), s(manifest), "--out".into(), s(replay)])?;
    let (a, b) = (files_under(original), files_under(replay));
    if a != b {
        return Err(format!("{} produced {a:?} vs {b:?}", manifest.display()));
    }
    for f in &a {
        if fs::read(original.join(f)).unwrap() != fs::read(replay.join(f)).unwrap() {
            return Err(format!("{} differs after replaying {}", f.display(), manifest.display()));
        }
    }
    Ok(a.len())
}

fn s(p: &Path) -> String {
    p.to_str().unwrap().to_string()
}

fn strs(v: &[&str]) -> Vec<String> {
    v.iter().map(|x| x.to_string()).collect()
}

fn format_and_determinism() -> Verdict {
    let tmp = TempDir::new().map_err(|e| e.to_string())?;
    let root = tmp.path();
    let ldeb_dir = root.join("ldeb");
    fs::create_dir_all(&ldeb_dir).unwrap();
    let matrices = ldeb_round_trip(&ldeb_dir)?;

    let data = root.join("data");
    subpop(&strs(&["synth", "--out", &s(&data), "--n", "1200"]))?;
    let mut compared = Vec::new();
    let mut record = |name: &str, n: usize| compared.push(format!("{name} {n}"));
    record("synth", replay_matches(&data.join("manifest.txt"), &data, &root.join("data_replay"))?);

    let train_common = ["--data", &s(&data), "--epochs", "6", "--repeats", "2", "--lr", "3e-3"];
    let mut runs = Vec::new();
    for method in ["ldro", "cvar-two-phase", "ldro+chi2"] {
        let out = root.join(method);
        let mut args = strs(&["train", "--method", method, "--out", &s(&out)]);
        args.extend(strs(&train_common));
        subpop(&args)?;
        record(method, replay_matches(&out.join("manifest.txt"), &out, &root.join(format!("{method}_replay")))?);
        runs.push(out);
    }
    let run_list = runs.iter().map(|p| s(p)).collect::<Vec<_>>().join(",");

    let eval_dir = root.join("eval");
    let ckpt = runs[0].join("rep0").join("adapter.ckpt");
    subpop(&strs(&["eval", "--data", &s(&data), "--ckpt", &s(&ckpt), "--out", &s(&eval_dir.join("report.txt"))]))?;
    let eval_replay = root.join("eval_replay");
    subpop(&strs(&[
        "--manifest",
        &s(&eval_dir.join("report.txt.manifest")),
        "--out",
        &s(&eval_replay.join("report.txt")),
    ]))?;
    let same_eval = fs::read(eval_dir.join("report.txt")).unwrap() == fs::read(eval_replay.join("report.txt")).unwrap();
    if !same_eval {
        return Err("eval report differs after replay".into());
    }
    record("eval", 1);

    for (flag, values) in [("--etas", "0.1,0.5"), ("--sizes", "100,400")] {
        let name = format!("sweep{flag}");
        let sweep = root.join(&name);
        subpop(&strs(&["sweep", "--data", &s(&data), "--epochs", "4", flag, values, "--out", &s(&sweep)]))?;
        record(&name, replay_matches(&sweep.join("manifest.txt"), &sweep, &root.join(format!("{name}_replay")))?);
    }

    for cmd in ["select", "report"] {
        let out = root.join(cmd);
        subpop(&strs(&[cmd, "--runs", &run_list, "--out", &s(&out)]))?;
        record(cmd, replay_matches(&out.join("manifest.txt"), &out, &root.join(format!("{cmd}_replay")))?);
    }
    Ok(format!(
        "{matrices} random LDEB matrices bitwise identical; manifest replays byte-identical (files compared: {})",
        compared.join(", ")
    ))
}

fn main() -> ExitCode {
    let mut suite = Suite { failures: 0 };
    suite.run("gradient soundness", Some(Duration::from_secs(5)), gradient_soundness);
    suite.run("entropy law", None, entropy_law);
    suite.run("cvar dual equals primal", None, cvar_dual_primal);
    suite.run("chi-square dual vs brute force", None, chi2_brute_force);
    suite.run("synthetic debiasing", Some(Duration::from_secs(60)), synthetic_debiasing);
    suite.run("label blindness", None, label_blindness);
    let start = Instant::now();
    let runs: Vec<SeedRuns> = (0..SEEDS).map(seed_runs).collect();
    println!("     ({SEEDS}-seed synthetic runs trained in {:.1}s)", start.elapsed().as_secs_f64());
    suite.run("stability over epochs", None, || stability(&runs));
    suite.run("stacked-adapter dispersion", None, || stacked_dispersion(&runs));
    suite.run("format round-trip and manifest determinism", None, format_and_determinism);
    if suite.failures == 0 {
        println!("all acceptance criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("{} acceptance criteria failed", suite.failures);
        ExitCode::FAILURE
    }
}
