//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run all with `cargo test --test acceptance`, or a subset with
//! `cargo test --test acceptance -- 2 5`.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use drkf::cli::RunConfig;
use drkf::dataio::{emodality_shuffle, gen_synthetic, write_fixture, Dataset, FeatureRecord, SyntheticSpec};
use drkf::kf::{bce_loss, ce_loss, total_loss, FusionConfig, FusionEncoder, LossWeights};
use drkf::numcore::{Graph, ParamStore, RngStream, Tensor};
use drkf::orl::{inter_modality_infonce, intra_modality_infonce, kld_loss};
use drkf::train::{
    encode_checkpoint, evaluate, gradcheck, DrkfModel, Evaluation, GradcheckOptions, MetricsReport, Trainer,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// Results of the synthetic benchmark runs, shared by criteria 7 and 8.
#[derive(Default)]
struct Ctx {
    runs: Vec<((u64, bool), (Evaluation, Duration))>,
}

impl Ctx {
    fn benchmark(&mut self, seed: u64, ed_on: bool) -> (Evaluation, Duration) {
        if let Some((_, r)) = self.runs.iter().find(|(k, _)| *k == (seed, ed_on)) {
            return r.clone();
        }
        let r = run_benchmark(seed, ed_on);
        self.runs.push(((seed, ed_on), r.clone()));
        r
    }
}

const BENCH_STEPS: u64 = 2000;

fn bench_data(seed: u64) -> (Dataset, Dataset) {
    let all = gen_synthetic(&SyntheticSpec {
        classes: 4,
        d_z: 32,
        records: 1000,
        inconsistency_rate: 0.3,
        seed,
        ..SyntheticSpec::default()
    })
    .unwrap()
    .dataset;
    let mut train = all.clone();
    let test_records = train.records.split_off(800);
    let test = Dataset {
        meta: all.meta,
        records: test_records,
    };
    (train, test)
}

fn bench_config(seed: u64, ed_on: bool) -> RunConfig {
    RunConfig {
        seed,
        d_z: 32,
        classes: 4,
        batch_size: 4,
        lr: 1e-3,
        delta: if ed_on { LossWeights::default().delta } else { 0.0 },
        ..RunConfig::default()
    }
}

fn run_benchmark(seed: u64, ed_on: bool) -> (Evaluation, Duration) {
    let start = Instant::now();
    let (train, test) = bench_data(seed);
    let cfg = bench_config(seed, ed_on);
    let model = DrkfModel::new(cfg.model(), seed).unwrap();
    let mut t = Trainer::new(model, cfg.optimizer(), cfg.weights(), cfg.batch_size, seed).unwrap();
    for _ in 0..BENCH_STEPS {
        t.step(&train).unwrap();
    }
    let e = evaluate(&t.model, &test, cfg.batch_size, 1).unwrap();
    (e, start.elapsed())
}

fn c1_gradients(_: &mut Ctx) -> Outcome {
    let start = Instant::now();
    let mut worst = (0.0f64, String::new());
    let mut all_pass = true;
    for seed in 0..5 {
        let cfg = RunConfig {
            seed,
            ..RunConfig::gradcheck_defaults()
        };
        assert_eq!((cfg.d_z, cfg.batch_size, cfg.classes), (8, 2, 4));
        let data = gen_synthetic(&SyntheticSpec {
            classes: 4,
            d_z: 8,
            records: 2,
            m: 3,
            n: 2,
            seed,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let refs: Vec<&FeatureRecord> = data.dataset.records.iter().collect();
        let model = DrkfModel::new(cfg.model(), seed).unwrap();
        let report = gradcheck(&model, &refs, &cfg.weights(), &GradcheckOptions::default()).unwrap();
        assert_eq!(report.components.len(), 10);
        all_pass &= report.passed();
        for c in &report.components {
            if c.max_rel_error > worst.0 || c.max_rel_error.is_nan() {
                worst = (c.max_rel_error, format!("{} (seed {seed})", c.name));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        all_pass && secs < 60.0,
        format!("9 components + total, seeds 0-4, worst rel err {:.2e} at {}, {secs:.1} s", worst.0, worst.1),
    )
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn brute_intra(z: &[Vec<f64>], za: &[Vec<f64>], tau: f64) -> f64 {
    let m = z.len();
    let bank: Vec<&Vec<f64>> = z.iter().chain(za).collect();
    let mut total = 0.0;
    for i in 0..m {
        let num = (cosine(&z[i], &za[i]) / tau).exp();
        let mut den = 0.0;
        for (k, b) in bank.iter().enumerate() {
            if k != i {
                den += (cosine(&z[i], b) / tau).exp();
            }
        }
        total -= (num / den).ln();
    }
    total / m as f64
}

fn brute_inter(zs: &[Vec<f64>], zt: &[Vec<f64>], tau: f64) -> f64 {
    let m = zs.len();
    let mut total = 0.0;
    for i in 0..m {
        let num = (cosine(&zs[i], &zt[i]) / tau).exp();
        let den: f64 = zt.iter().map(|t| (cosine(&zs[i], t) / tau).exp()).sum();
        total -= (num / den).ln();
    }
    total / m as f64
}

fn c2_infonce(_: &mut Ctx) -> Outcome {
    let tau = LossWeights::default().tau;
    let mut worst = 0.0f64;
    let mut m1_exact = true;
    let mut cases = 0;
    for m in [1usize, 2, 4, 8] {
        for d_p in [4usize, 16] {
            for seed in 0..20 {
                let mut rng = RngStream::new(1000 * m as u64 + 100 * d_p as u64 + seed);
                let mut draw = || (0..m).map(|_| rng.normals(d_p, 1.0)).collect::<Vec<_>>();
                let (z, za, zt) = (draw(), draw(), draw());
                let mut g = Graph::new();
                let vz = g.constant(Tensor::from_rows(&z).unwrap());
                let vza = g.constant(Tensor::from_rows(&za).unwrap());
                let vzt = g.constant(Tensor::from_rows(&zt).unwrap());
                let intra = intra_modality_infonce(&mut g, vz, vza, tau).unwrap();
                let inter = inter_modality_infonce(&mut g, vz, vzt, tau).unwrap();
                let (a, b) = (g.item(intra), g.item(inter));
                worst = worst
                    .max((a - brute_intra(&z, &za, tau)).abs())
                    .max((b - brute_inter(&z, &zt, tau)).abs());
                if m == 1 {
                    m1_exact &= a == 0.0 && b == 0.0;
                }
                cases += 1;
            }
        }
    }
    outcome(
        worst <= 1e-6 && m1_exact,
        format!("{cases} cases, max |impl - brute force| {worst:.2e}, M=1 exactly 0: {m1_exact}"),
    )
}

fn c3_analytic(_: &mut Ctx) -> Outcome {
    let mut g = Graph::new();
    let mut worst = 0.0f64;
    for c in [2usize, 4, 7] {
        let mut onehot = vec![0.0; 3 * c];
        for i in 0..3 {
            onehot[i * c + (i * 5) % c] = 1.0;
        }
        let y = Tensor::matrix(3, c, onehot).unwrap();
        let uniform = g.constant(Tensor::matrix(3, c, vec![1.0 / c as f64; 3 * c]).unwrap());
        let kl = kld_loss(&mut g, &y, uniform).unwrap();
        let ce = ce_loss(&mut g, uniform, &[0, 1 % c, c - 1]).unwrap();
        let lnc = (c as f64).ln();
        worst = worst.max((g.item(kl) - lnc).abs()).max((g.item(ce) - lnc).abs());
    }
    let half = g.constant(Tensor::vector(vec![0.5; 8]));
    let bce = bce_loss(&mut g, half, &[true, false, false, true, true, true, false, false]).unwrap();
    worst = worst.max((g.item(bce) - 2f64.ln()).abs());
    let one = g.constant(Tensor::scalar(1.0));
    let total = total_loss(&mut g, one, one, one, one, &LossWeights::default()).unwrap();
    let exact = g.item(total) == 2.4;
    outcome(
        worst <= 1e-9 && exact,
        format!("KL/CE/BCE max deviation {worst:.1e}, total_loss = {:?}", g.item(total)),
    )
}

fn c4_identity(_: &mut Ctx) -> Outcome {
    let (train, _) = bench_data(0);
    let cfg = RunConfig {
        ae_init_scale: 0.0,
        ..bench_config(0, true)
    };
    let model = DrkfModel::new(cfg.model(), 0).unwrap();
    let mut t = Trainer::new(model, cfg.optimizer(), cfg.weights(), cfg.batch_size, 0).unwrap();
    let l = t.step(&train).unwrap();
    outcome(l.l_mse == 0.0, format!("step-0 L_MSE = {:?}", l.l_mse))
}

fn c5_shuffle(_: &mut Ctx) -> Outcome {
    let mut rng = RngStream::new(5);
    let mut bad = 0;
    let mut batches = 0;
    for classes in [2usize, 4, 7] {
        for _ in 0..1000 {
            let records: Vec<FeatureRecord> = (0..4)
                .map(|i| FeatureRecord {
                    id: format!("r{i}"),
                    speech_seq: Tensor::matrix(1, 1, vec![0.0]).unwrap(),
                    text_seq: Tensor::matrix(1, 1, vec![0.0]).unwrap(),
                    label: rng.below(classes),
                })
                .collect();
            let refs: Vec<&FeatureRecord> = records.iter().collect();
            let batch = emodality_shuffle(&refs);
            let mut counts = vec![0usize; classes];
            for r in &records {
                counts[r.label] += 1;
            }
            let expected: usize = counts.iter().map(|c| c * c).sum();
            let diag_ok = (0..4).all(|i| batch.pairs[batch.pair_index(i, i)].consistent);
            if batch.pairs.len() != 16 || batch.consistent_count() != expected || !diag_ok {
                bad += 1;
            }
            batches += 1;
        }
    }
    outcome(bad == 0, format!("{batches} batches, {bad} violations"))
}

fn c6_fusion(_: &mut Ctx) -> Outcome {
    let defaults = RunConfig::default();
    let cfg = FusionConfig {
        d_z: defaults.d_z,
        layers: defaults.fe_layers,
        heads: defaults.fe_heads,
        pos_emb: false,
        max_len: defaults.max_seq_len,
    };
    let mut worst = 0.0f64;
    for seed in 0..5 {
        let mut rng = RngStream::new(seed);
        let mut store = ParamStore::new();
        let fe = FusionEncoder::new(&mut store, "fe", cfg.clone(), &mut rng).unwrap();
        let (m, n) = (5, 4);
        let speech: Vec<Vec<f64>> = (0..m).map(|_| rng.normals(cfg.d_z, 1.0)).collect();
        let text: Vec<Vec<f64>> = (0..n).map(|_| rng.normals(cfg.d_z, 1.0)).collect();
        let fuse = |s: &[Vec<f64>], t: &[Vec<f64>]| {
            let mut g = Graph::new();
            let pv = store.bind_frozen(&mut g);
            let sv = g.constant(Tensor::from_rows(s).unwrap());
            let tv = g.constant(Tensor::from_rows(t).unwrap());
            let x = fe.fuse(&mut g, &pv, sv, tv).unwrap();
            g.value(x).data().to_vec()
        };
        let base = fuse(&speech, &text);
        for _ in 0..100 {
            let (mut ps, mut pt) = (speech.clone(), text.clone());
            rng.shuffle(&mut ps);
            rng.shuffle(&mut pt);
            let x = fuse(&ps, &pt);
            for (a, b) in base.iter().zip(&x) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    outcome(worst <= 1e-9, format!("5 seeds x 100 permutations, max |dX_fusion| {worst:.2e}"))
}

fn c7_convergence(ctx: &mut Ctx) -> Outcome {
    let (e, took) = ctx.benchmark(0, true);
    let acc = e.metrics.acc_weighted;
    let ed = e.ed_pair_accuracy;
    let secs = took.as_secs_f64();
    let verdict = |ok: bool| if ok { "ok" } else { "below target" };
    outcome(
        acc >= 0.95 && ed >= 0.90 && secs < 600.0,
        format!(
            "held-out EC acc_weighted {acc:.4} (>= 0.95 {}), ED pair accuracy {ed:.4} (>= 0.90 {}), {BENCH_STEPS} steps in {secs:.1} s",
            verdict(acc >= 0.95),
            verdict(ed >= 0.90)
        ),
    )
}

fn c8_ablation(ctx: &mut Ctx) -> Outcome {
    let (mut on, mut off) = (Vec::new(), Vec::new());
    for seed in 0..5 {
        on.push(ctx.benchmark(seed, true).0.metrics.acc_weighted);
        off.push(ctx.benchmark(seed, false).0.metrics.acc_weighted);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (a, b) = (mean(&on), mean(&off));
    outcome(
        a >= b - 0.01,
        format!("mean held-out acc_weighted: ED on {a:.4}, ED off {b:.4} over 5 seeds"),
    )
}

fn drkf(args: &[&str], dir: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_drkf"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("run drkf binary")
}

fn c9_determinism(_: &mut Ctx) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = gen_synthetic(&SyntheticSpec {
        classes: 4,
        d_z: 16,
        records: 60,
        inconsistency_rate: 0.3,
        seed: 3,
        ..SyntheticSpec::default()
    })
    .unwrap();
    write_fixture(&data.dataset, d.join("train.jsonl")).unwrap();
    fs::write(
        d.join("cfg.json"),
        r#"{"train_data": "train.jsonl", "d_z": 16, "d_p": 64, "lr": 0.001, "seed": 4}"#,
    )
    .unwrap();
    let train = |out: &str, steps: &str, resume: Option<&str>| {
        let mut args = vec!["train", "--config", "cfg.json", "--steps", steps, "--out", out];
        if let Some(r) = resume {
            args.extend(["--resume", r]);
        }
        let o = drkf(&args, d);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        fs::read(d.join(out).join("loss_log.csv")).unwrap()
    };
    let a = train("a", "50", None);
    let b = train("b", "50", None);
    let logs_equal = a == b && a.iter().filter(|&&c| c == b'\n').count() == 51;

    let straight = train("full", "100", None);
    let resumed = train("resumed", "50", Some("a/checkpoint.drkf"));
    let tail: Vec<&[u8]> = straight.split(|&c| c == b'\n').skip(51).collect();
    let resumed_rows: Vec<&[u8]> = resumed.split(|&c| c == b'\n').skip(1).collect();
    let ck_full = fs::read(d.join("full/checkpoint.drkf")).unwrap();
    let ck_resumed = fs::read(d.join("resumed/checkpoint.drkf")).unwrap();
    let continued = tail == resumed_rows && ck_full == ck_resumed;

    let cfg: RunConfig = serde_json::from_slice(&fs::read(d.join("a/config.json")).unwrap()).unwrap();
    let mut model = DrkfModel::new(cfg.model(), 0).unwrap();
    let mut optim = drkf::train::AdamW::new(cfg.optimizer(), &model.store);
    let saved = fs::read(d.join("a/checkpoint.drkf")).unwrap();
    drkf::train::decode_checkpoint_into(&saved, &mut model, &mut optim).unwrap();
    let resaved = encode_checkpoint(&model, &optim).unwrap() == saved;

    outcome(
        logs_equal && continued && resaved,
        format!(
            "identical 50-step logs: {logs_equal}; resume matches uninterrupted run: {continued}; save-load-save identical: {resaved}"
        ),
    )
}

fn naive_metrics(classes: usize, truth: &[usize], pred: &[usize]) -> [f64; 6] {
    let n = truth.len();
    let mut tp = vec![0.0; classes];
    let mut fp = vec![0.0; classes];
    let mut fnn = vec![0.0; classes];
    for i in 0..n {
        if truth[i] == pred[i] {
            tp[truth[i]] += 1.0;
        } else {
            fp[pred[i]] += 1.0;
            fnn[truth[i]] += 1.0;
        }
    }
    let div = |a: f64, b: f64| if b == 0.0 { 0.0 } else { a / b };
    let (mut p_sum, mut r_sum, mut wf1, mut active) = (0.0, 0.0, 0.0, 0.0);
    for k in 0..classes {
        let p = div(tp[k], tp[k] + fp[k]);
        let r = div(tp[k], tp[k] + fnn[k]);
        let f1 = div(2.0 * p * r, p + r);
        if tp[k] + fp[k] + fnn[k] > 0.0 {
            p_sum += p;
            r_sum += r;
            active += 1.0;
        }
        wf1 += (tp[k] + fnn[k]) * f1;
    }
    let (tp_all, fp_all, fn_all): (f64, f64, f64) = (tp.iter().sum(), fp.iter().sum(), fnn.iter().sum());
    let micro_p = div(tp_all, tp_all + fp_all);
    let micro_r = div(tp_all, tp_all + fn_all);
    let micro_f1 = div(2.0 * micro_p * micro_r, micro_p + micro_r);
    let correct = truth.iter().zip(pred).filter(|(a, b)| a == b).count() as f64;
    [r_sum / active, correct / n as f64, p_sum / active, r_sum / active, micro_f1, wf1 / n as f64]
}

fn c10_metrics(_: &mut Ctx) -> Outcome {
    let mut rng = RngStream::new(10);
    let mut worst = 0.0f64;
    let mut micro_is_acc = true;
    for _ in 0..1000 {
        let classes = 2 + rng.below(7);
        let n = 1 + rng.below(200);
        let skill = rng.uniform();
        let truth: Vec<usize> = (0..n).map(|_| rng.below(classes)).collect();
        let pred: Vec<usize> = truth
            .iter()
            .map(|&t| if rng.uniform() < skill { t } else { rng.below(classes) })
            .collect();
        let cm = drkf::train::confusion_matrix(classes, &truth, &pred).unwrap();
        let r = MetricsReport::from_confusion(cm).unwrap();
        let got = [r.acc_unweighted, r.acc_weighted, r.precision, r.recall, r.micro_f1, r.weighted_f1];
        for (a, b) in got.iter().zip(naive_metrics(classes, &truth, &pred)) {
            worst = worst.max((a - b).abs());
        }
        micro_is_acc &= (r.micro_f1 - r.acc_weighted).abs() <= 1e-12;
    }
    outcome(
        worst <= 1e-12 && micro_is_acc,
        format!("1000 matrices, max deviation {worst:.1e}, micro-F1 == accuracy: {micro_is_acc}"),
    )
}

type Criterion = fn(&mut Ctx) -> Outcome;

fn main() -> ExitCode {
    let criteria: [(&str, Criterion); 10] = [
        ("gradient correctness", c1_gradients),
        ("InfoNCE oracle equivalence", c2_infonce),
        ("analytic loss values", c3_analytic),
        ("identity at init", c4_identity),
        ("shuffle counting identity", c5_shuffle),
        ("fusion permutation invariance", c6_fusion),
        ("synthetic convergence", c7_convergence),
        ("ablation direction", c8_ablation),
        ("determinism", c9_determinism),
        ("metric oracle", c10_metrics),
    ];
    let only: BTreeSet<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut ctx = Ctx::default();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let id = i + 1;
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let o = check(&mut ctx);
        failed += usize::from(!o.pass);
        println!("{} {id:>2} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    }
}
