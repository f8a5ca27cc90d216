//! One PASS/FAIL line per acceptance criterion. Exits nonzero if any fails.
//!
//! Set `MNIST_DIR` to a directory holding the real `train-images-idx3-ubyte`
//! etc. to include the real-file loader check and to train on real digits.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DVector;
use nnopt::data::{
    encode_cifar10, encode_idx_images, encode_idx_labels, load_cifar10_bin, load_mnist_idx, parse_cifar10,
    parse_idx_images, parse_idx_labels, synth::write_synthetic_mnist,
};
use nnopt::linalg::Tensor;
use nnopt::losses::mse_loss;
use nnopt::nn::{NetworkSpec, NetworkState};
use nnopt::optimizers::{BetaRule, LbfgsState};
use nnopt::rl::{dqn_targets, q_target, CartPoleEnv, Environment, Transition};
use nnopt_bench::{emit_report, parse_config, run_experiment, MetricsRecord, ReportRow};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// MNIST network used for the optimizer comparison: same layer sequence as the
/// default, narrowed so that the dense Jacobian stays tractable for LM.
const MNIST_ARCH: &str =
    "1x28x28 | conv(2,5x5,s2) relu conv(4,5x5,s1) relu pool(2,s2) flatten dense(6) relu dense(10)";
const MNIST_SUBSET: usize = 2000;
const MNIST_ITERS: usize = 200;
const CARTPOLE_LR: f64 = 5e-3;
const CARTPOLE_GAMMA: f64 = 0.95;

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

fn gradients() -> Outcome {
    let s = common::gradient_sweep(60, 2024);
    outcome(
        s.max_rel <= 1e-5,
        format!("max rel err {:.2e} over {} coords ({} kink skips), 60 nets x 2 losses", s.max_rel, s.checked, s.skipped),
    )
}

fn cg_termination() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for n in 2..=10 {
        for _ in 0..5 {
            let a = common::random_spd(n, &mut rng);
            let b = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
            for rule in BetaRule::ALL {
                worst = worst.max(*common::cg_exact_quadratic(&a, &b, rule, n).last().unwrap());
            }
        }
    }
    outcome(worst <= 1e-8, format!("worst |g| after n steps {worst:.2e} (n=2..10, 4 rules)"))
}

fn lm_linear() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    let mut all_accepted = true;
    for _ in 0..50 {
        let (err, accepted) = common::lm_linear_oracle(&mut rng);
        worst = worst.max(err);
        all_accepted &= accepted;
    }
    outcome(worst <= 1e-6 && all_accepted, format!("worst distance {worst:.2e}, all accepted: {all_accepted}"))
}

fn lm_damping() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for (start, lambda0) in [([-1.2, 1.0], 1e-3), ([-2.0, 2.0], 1e-6), ([2.0, -1.0], 1.0)] {
        let a = common::lm_damping_audit(start, lambda0, 100);
        pass &= a.rejected > 0 && a.bad_rejections == 0 && a.bad_acceptances == 0;
        parts.push(format!("{} rejections/{} bad", a.rejected, a.bad_rejections + a.bad_acceptances));
    }
    outcome(pass, format!("Rosenbrock from 3 starts: {}", parts.join(", ")))
}

fn bfgs_secant() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst = 0.0f64;
    let mut descent = 0;
    for _ in 0..100 {
        let n = rng.random_range(2..15);
        let mut st = LbfgsState::new(rng.random_range(1..8)).unwrap();
        for _ in 0..rng.random_range(1..12) {
            let s: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            if st.update(s.clone(), y.clone()).unwrap() && st.len() == 1 {
                let hy = st.apply_inverse_hessian(&y);
                worst = hy.iter().zip(&s).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
            }
        }
        let g: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let d = st.direction(&g);
        if d.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>() < 0.0 {
            descent += 1;
        }
    }
    outcome(worst <= 1e-10 && descent == 100, format!("secant err {worst:.2e}, descent {descent}/100"))
}

fn mnist_files(root: &Path) -> (PathBuf, PathBuf, &'static str) {
    if let Ok(dir) = std::env::var("MNIST_DIR") {
        let d = PathBuf::from(dir);
        return (d.join("train-images-idx3-ubyte"), d.join("train-labels-idx1-ubyte"), "real MNIST");
    }
    let (i, l) = write_synthetic_mnist(&root.join("data"), "train", MNIST_SUBSET, 7).unwrap();
    (i, l, "synthetic digits")
}

struct MnistRuns {
    dirs: Vec<PathBuf>,
    rows: Vec<ReportRow>,
    source: &'static str,
    error: Option<String>,
}

fn mnist_runs(root: &Path) -> MnistRuns {
    let (images, labels, source) = mnist_files(root);
    let mut dirs = Vec::new();
    for opt in ["sgd", "cg", "lbfgs", "lm"] {
        let out = root.join(format!("mnist-{opt}"));
        let text = format!(
            "task = mnist\noptimizer = {opt}\nsubset_n = {MNIST_SUBSET}\niterations = {MNIST_ITERS}\nseed = 42\n\
             arch = {MNIST_ARCH}\nimages = {}\nlabels = {}\nout = {}\n",
            images.display(),
            labels.display(),
            out.display()
        );
        let t = Instant::now();
        let res = parse_config(&text).map_err(|e| e.to_string()).and_then(|c| run_experiment(&c, &text).map_err(|e| e.to_string()));
        eprintln!("  mnist/{opt}: {:.1}s", t.elapsed().as_secs_f64());
        if let Err(e) = res {
            return MnistRuns {
                dirs,
                rows: Vec::new(),
                source,
                error: Some(format!("{opt}: {e}")),
            };
        }
        dirs.push(out);
    }
    match emit_report(&dirs, &root.join("report")) {
        Ok(rows) => MnistRuns {
            dirs,
            rows,
            source,
            error: None,
        },
        Err(e) => MnistRuns {
            dirs,
            rows: Vec::new(),
            source,
            error: Some(e.to_string()),
        },
    }
}

fn row<'a>(rows: &'a [ReportRow], opt: &str) -> &'a ReportRow {
    rows.iter().find(|r| r.optimizer == opt).expect("all four optimizers reported")
}

fn final_loss_order(runs: &MnistRuns) -> Outcome {
    if let Some(e) = &runs.error {
        return outcome(false, e.clone());
    }
    let (sgd, cg, lm) = (row(&runs.rows, "sgd"), row(&runs.rows, "cg-pr"), row(&runs.rows, "lm"));
    let initial = |dir: &PathBuf| nnopt_bench::read_metrics(dir).unwrap()[0].loss_before.unwrap();
    let ratio = |r: &ReportRow, i: usize| r.final_loss / initial(&runs.dirs[i]);
    outcome(
        lm.final_loss <= sgd.final_loss && lm.final_loss <= cg.final_loss,
        format!(
            "{}: final loss lm {:.4} (mse) vs sgd {:.4}, cg {:.4} (cross-entropy); final/initial lm {:.3}, sgd {:.3}, cg {:.3}",
            runs.source,
            lm.final_loss,
            sgd.final_loss,
            cg.final_loss,
            ratio(lm, 3),
            ratio(sgd, 0),
            ratio(cg, 1)
        ),
    )
}

fn time_order(runs: &MnistRuns) -> Outcome {
    if let Some(e) = &runs.error {
        return outcome(false, e.clone());
    }
    let t = |o: &str| row(&runs.rows, o).mean_wall_time_ms;
    let (sgd, cg, lbfgs, lm) = (t("sgd"), t("cg-pr"), t("lbfgs"), t("lm"));
    outcome(
        lm > lbfgs && lbfgs > sgd.max(cg),
        format!("mean ms/iter lm {lm:.2} > lbfgs {lbfgs:.2} > max(sgd {sgd:.3}, cg {cg:.3})"),
    )
}

fn sample_transitions(n: usize) -> Vec<Transition> {
    let mut env = CartPoleEnv::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut s = std::sync::Arc::new(env.reset(1));
    let mut out = Vec::new();
    while out.len() < n {
        let a = rng.random_range(0..2);
        let step = env.step(a).unwrap();
        let next = std::sync::Arc::new(step.observation);
        out.push(Transition {
            s: s.clone(),
            a,
            r: step.reward,
            s_next: next.clone(),
            done: step.done,
        });
        s = if step.done { std::sync::Arc::new(env.reset(out.len() as u64)) } else { next };
    }
    out
}

fn dqn(root: &Path) -> Outcome {
    let table = [
        (1.0, false, vec![0.5, 2.0], 0.99, 1.0 + 0.99 * 2.0),
        (1.0, true, vec![0.5, 2.0], 0.99, 1.0),
        (-1.0, false, vec![3.0, -4.0], 0.0, -1.0),
        (0.5, false, vec![-2.0, -1.0], 1.0, -0.5),
        (0.0, true, vec![1e9, 1e9], 1.0, 0.0),
    ];
    let truth = table.iter().all(|(r, d, q, g, want)| q_target(*r, *d, q, *g) == *want);

    let spec: NetworkSpec = "4 | dense(16) relu dense(2)".parse().unwrap();
    let model = NetworkState::init(spec, 5).unwrap();
    let batch = sample_transitions(64);
    let (inputs, targets) = dqn_targets(model.network(), model.params(), &batch, 0.99).unwrap();
    let (pred, _) = model.forward(&Tensor::new(vec![batch.len(), 4], inputs).unwrap()).unwrap();
    let (_, grad) = mse_loss(&pred, &Tensor::new(vec![batch.len(), 2], targets).unwrap()).unwrap();
    let masked = batch
        .iter()
        .zip(grad.data().chunks(2))
        .all(|(t, g)| g[1 - t.a] == 0.0 && g[t.a] != 0.0);

    let out = root.join("cartpole-sgd");
    let text = format!(
        "task = cartpole\noptimizer = sgd\nepisodes = 200\nlr = {CARTPOLE_LR}\ngamma = {CARTPOLE_GAMMA}\nseed = 42\nout = {}\n",
        out.display()
    );
    let t = Instant::now();
    let run = parse_config(&text).map_err(|e| e.to_string()).and_then(|c| run_experiment(&c, &text).map_err(|e| e.to_string()));
    let secs = t.elapsed().as_secs_f64();
    match run {
        Err(e) => outcome(false, format!("truth table {truth}, masked {masked}, cartpole run failed: {e}")),
        Ok(o) => {
            let ret: Vec<f64> = o.records.iter().filter_map(|r| r.episode_return).collect();
            let finite = o.records.iter().all(|r| r.loss_after.is_none_or(f64::is_finite));
            let first = ret[..50].iter().sum::<f64>() / 50.0;
            let last = ret[ret.len() - 50..].iter().sum::<f64>() / 50.0;
            outcome(
                truth && masked && finite && ret.len() == 200 && last > first && secs <= 600.0,
                format!(
                    "truth table {truth}, masked gradient {masked}; cartpole 200 eps (lr {CARTPOLE_LR}, gamma {CARTPOLE_GAMMA}) \
                     mean return first 50 {first:.1} -> last 50 {last:.1}, {secs:.1}s"
                ),
            )
        }
    }
}

fn loaders(root: &Path) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (n, rows, cols) = (7, 5, 4);
    let px: Vec<u8> = (0..n * rows * cols).map(|_| rng.random()).collect();
    let lb: Vec<u8> = (0..n).map(|_| rng.random_range(0..10)).collect();
    let (img_bytes, lbl_bytes) = (encode_idx_images(n, rows, cols, &px), encode_idx_labels(&lb));
    let (pn, pr, pc, pixels) = parse_idx_images(&img_bytes).unwrap();
    let idx_ok = (pn, pr, pc) == (n, rows, cols)
        && pixels.iter().zip(&px).all(|(a, &b)| *a == b as f64 / 255.0)
        && parse_idx_labels(&lbl_bytes).unwrap() == lb.iter().map(|&l| l as usize).collect::<Vec<_>>();
    std::fs::write(root.join("i.idx"), &img_bytes).unwrap();
    std::fs::write(root.join("l.idx"), &lbl_bytes).unwrap();
    let file_ok = load_mnist_idx(root.join("i.idx"), root.join("l.idx")).unwrap().images().data() == pixels.as_slice();

    let recs: Vec<(u8, Vec<u8>)> = (0..3).map(|i| (i * 3, (0..3072).map(|_| rng.random()).collect())).collect();
    let bytes = encode_cifar10(&recs);
    let (cpx, clb) = parse_cifar10(&bytes).unwrap();
    std::fs::write(root.join("c.bin"), &bytes).unwrap();
    let cifar_ok = clb == vec![0, 3, 6]
        && cpx.iter().zip(recs.iter().flat_map(|r| r.1.iter())).all(|(a, &b)| *a == b as f64 / 255.0)
        && load_cifar10_bin(root.join("c.bin")).unwrap().images().data() == cpx.as_slice();

    let mut detail = format!("idx {idx_ok}, idx file {file_ok}, cifar {cifar_ok}");
    let mut real_ok = true;
    if let Ok(dir) = std::env::var("MNIST_DIR") {
        let d = PathBuf::from(dir);
        let check = |img: &str, lbl: &str, want: usize| match load_mnist_idx(d.join(img), d.join(lbl)) {
            Ok(ds) => ds.len() == want && ds.images().data().iter().all(|p| (0.0..=1.0).contains(p)),
            Err(_) => false,
        };
        real_ok = check("train-images-idx3-ubyte", "train-labels-idx1-ubyte", 60000)
            && check("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte", 10000);
        detail += &format!(", real MNIST 60000/10000 {real_ok}");
    } else {
        detail += ", real MNIST skipped (MNIST_DIR unset)";
    }
    outcome(idx_ok && file_ok && cifar_ok && real_ok, detail)
}

fn loss_columns(records: &[MetricsRecord]) -> Vec<(Option<u64>, Option<u64>, Option<u64>)> {
    records
        .iter()
        .map(|r| (r.loss_before.map(f64::to_bits), r.loss_after.map(f64::to_bits), r.episode_return.map(f64::to_bits)))
        .collect()
}

fn determinism(root: &Path) -> Outcome {
    let (images, labels) = write_synthetic_mnist(&root.join("det-data"), "train", 300, 3).unwrap();
    let mut configs: Vec<String> = ["sgd", "cg", "lbfgs", "lm"]
        .iter()
        .map(|opt| {
            format!(
                "task = mnist\noptimizer = {opt}\nsubset_n = 300\niterations = 6\narch = {MNIST_ARCH}\nimages = {}\nlabels = {}\n",
                images.display(),
                labels.display()
            )
        })
        .collect();
    configs.push("task = cartpole\noptimizer = sgd\nepisodes = 15\nlr = 1e-3\n".into());
    configs.push("task = cartpole\noptimizer = lm\nepisodes = 3\nwarmup = 32\n".into());
    let mut mismatched = Vec::new();
    for (i, base) in configs.iter().enumerate() {
        let mut cols = Vec::new();
        for threads in [1, 3, 1] {
            let text = format!("{base}out = {}\n", root.join(format!("det-{i}-{threads}-{}", cols.len())).display());
            let cfg = parse_config(&text).unwrap();
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            let rec = pool.install(|| run_experiment(&cfg, &text)).map(|o| loss_columns(&o.records));
            cols.push(rec.map_err(|e| e.to_string()));
        }
        if cols.iter().any(|c| c.is_err() || c != &cols[0]) {
            mismatched.push(i);
        }
    }
    outcome(
        mismatched.is_empty(),
        format!("{} configs x (1, 3, 1 threads), mismatching: {mismatched:?}", configs.len()),
    )
}

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let root = tmp.path();
    let mut results: Vec<(u32, &str, Outcome, f64)> = Vec::new();
    let mut record = |id: u32, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let o = f();
        let secs = t.elapsed().as_secs_f64();
        println!("{} [{id:>2}] {name}: {} ({secs:.1}s)", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((id, name, o, secs));
    };
    record(1, "gradient correctness", &mut gradients);
    record(2, "CG n-step termination", &mut cg_termination);
    record(3, "LM linear least squares", &mut lm_linear);
    record(4, "LM damping schedule", &mut lm_damping);
    record(5, "BFGS secant and descent", &mut bfgs_secant);
    let mut runs = None;
    record(6, "MNIST final loss: LM <= SGD, CG", &mut || {
        let r = mnist_runs(root);
        let o = final_loss_order(&r);
        runs = Some(r);
        o
    });
    let runs = runs.expect("criterion 6 ran");
    record(7, "MNIST time ordering: LM > LBFGS > SGD, CG", &mut || time_order(&runs));
    record(8, "DQN plumbing and CartPole learning", &mut || dqn(root));
    record(9, "loader bit-exactness", &mut || loaders(root));
    record(10, "determinism under parallelism", &mut || determinism(root));

    let failed: Vec<u32> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!("{}/{} criteria passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        println!("failed: {failed:?}");
        std::process::exit(1);
    }
}
