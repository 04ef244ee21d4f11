//! Acceptance criteria 1-8. Runs as a plain binary (no libtest harness) so
//! the per-criterion verdict lines always print.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use pagen_core::autodiff::{primitive_suite, GradCheckOptions};
use pagen_core::cli::pipeline::{evaluate, regularizer_gaps, train_model, Arm, Dataset, EvalOptions, EvalReport, MetricSet};
use pagen_core::cli::selfcheck::pagenerator_loss_check;
use pagen_core::corpus::generate_synthetic;
use pagen_core::metrics::{bleu1, distinct_n, embedding_metrics, urank_single, BigramLM, MetricConfig, WordVectors};
use pagen_core::model::{GaussianParams, Variant};
use pagen_core::objective::{gaussian_kl, r1, r2};
use pagen_core::trainer::TrainConfig;

const SEEDS: [u64; 3] = [1, 2, 3];

struct Verdict {
    id: usize,
    name: &'static str,
    passed: bool,
    detail: String,
    secs: f64,
}

fn criterion(id: usize, name: &'static str, f: impl FnOnce() -> (bool, String)) -> Verdict {
    let t = Instant::now();
    let (passed, detail) = f();
    let v = Verdict {
        id,
        name,
        passed,
        detail,
        secs: t.elapsed().as_secs_f64(),
    };
    println!(
        "criterion {} {:<28} {}  ({:.1}s) {}",
        v.id,
        v.name,
        if v.passed { "PASS" } else { "FAIL" },
        v.secs,
        v.detail
    );
    v
}

// ---------------------------------------------------------------- 1

fn gradients() -> (bool, String) {
    let t = Instant::now();
    let opts = GradCheckOptions {
        h: 1e-4,
        tol: 1e-4,
        max_per_leaf: None,
    };
    let suite = primitive_suite(7, &opts).expect("primitive graphs build");
    let mut worst = 0.0f64;
    let mut failed: Vec<&str> = Vec::new();
    for (op, r) in &suite {
        worst = worst.max(r.max_rel_error());
        if !r.passed() {
            failed.push(op);
        }
    }
    let e2e = pagenerator_loss_check(10, &opts).expect("loss builds");
    worst = worst.max(e2e.max_rel_error());
    if !e2e.passed() {
        failed.push("pagenerator_loss");
    }
    let secs = t.elapsed().as_secs_f64();
    (
        failed.is_empty() && secs < 60.0,
        format!("{} primitives + end-to-end loss, max_rel={worst:.2e}, failed={failed:?}", suite.len()),
    )
}

// ---------------------------------------------------------------- 2

/// E_a[log a(x) - log b(x)], sampling each coordinate of a independently.
fn kl_sampled(a: &GaussianParams, b: &GaussianParams, n: usize, rng: &mut ChaCha8Rng) -> f64 {
    let sd: Vec<f64> = a.log_var.iter().map(|lv| (0.5 * lv).exp()).collect();
    let mut sum = 0.0;
    for _ in 0..n {
        for i in 0..a.mu.len() {
            let eps: f64 = StandardNormal.sample(rng);
            let x = a.mu[i] + sd[i] * eps;
            let la = -0.5 * (a.log_var[i] + (x - a.mu[i]).powi(2) / a.log_var[i].exp());
            let lb = -0.5 * (b.log_var[i] + (x - b.mu[i]).powi(2) / b.log_var[i].exp());
            sum += la - lb;
        }
    }
    sum / n as f64
}

fn kl_oracle() -> (bool, String) {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let gauss = |rng: &mut ChaCha8Rng| GaussianParams {
        mu: (0..4).map(|_| rng.random_range(-1.5..1.5)).collect(),
        log_var: (0..4).map(|_| rng.random_range(-1.0..1.0)).collect(),
    };
    let (mut worst, mut self_kl) = (0.0f64, 0.0f64);
    for _ in 0..20 {
        let a = gauss(&mut rng);
        let b = gauss(&mut rng);
        let exact = gaussian_kl(&a, &b).unwrap();
        let mc = kl_sampled(&a, &b, 1_000_000, &mut rng);
        worst = worst.max((exact - mc).abs() / exact);
        self_kl = self_kl.max(gaussian_kl(&a, &a).unwrap().abs());
    }
    let secs = t.elapsed().as_secs_f64();
    (
        worst < 0.01 && self_kl < 1e-9 && secs < 30.0,
        format!("20 pairs x 1e6 samples, max_rel={worst:.2e}, max KL(a,a)={self_kl:.1e}"),
    )
}

// ---------------------------------------------------------------- 3

fn words(rng: &mut ChaCha8Rng, min: usize, vocab: usize) -> Vec<String> {
    let n = rng.random_range(min..=8);
    (0..n).map(|_| format!("w{}", rng.random_range(0..vocab))).collect()
}

fn count_in(xs: &[String], w: &str) -> usize {
    xs.iter().filter(|x| *x == w).count()
}

fn oracle_bleu(c: &[String], r: &[String]) -> f64 {
    if c.is_empty() {
        return 0.0;
    }
    let mut seen: Vec<&String> = Vec::new();
    let mut clipped = 0;
    for w in c {
        if !seen.contains(&w) {
            seen.push(w);
            clipped += count_in(c, w).min(count_in(r, w));
        }
    }
    let ratio = r.len() as f64 / c.len() as f64;
    let bp = if ratio > 1.0 { (1.0 - ratio).exp() } else { 1.0 };
    bp * clipped as f64 / c.len() as f64
}

fn oracle_distinct(group: &[Vec<String>], n: usize) -> Option<f64> {
    let mut all: Vec<String> = Vec::new();
    for r in group {
        if r.len() >= n {
            for i in 0..=r.len() - n {
                all.push(r[i..i + n].join("\u{1}"));
            }
        }
    }
    if all.is_empty() {
        return None;
    }
    let mut uniq = 0;
    for (i, g) in all.iter().enumerate() {
        if !all[..i].contains(g) {
            uniq += 1;
        }
    }
    Some(uniq as f64 / all.len() as f64)
}

fn oracle_perplexity(bg: &[Vec<String>], user: &[Vec<String>], lambda: f64, s: &[String]) -> f64 {
    let mut vocab: BTreeMap<String, ()> = bg.iter().flatten().map(|w| (w.clone(), ())).collect();
    vocab.insert("</s>".into(), ());
    vocab.insert("<unk>".into(), ());
    let map = |w: &String| if vocab.contains_key(w) { w.clone() } else { "<unk>".into() };
    let transitions = |s: &[String]| -> Vec<(String, String)> {
        let mut toks = vec!["<s>".to_string()];
        toks.extend(s.iter().map(map));
        toks.push("</s>".into());
        toks.windows(2).map(|w| (w[0].clone(), w[1].clone())).collect()
    };
    let bg_t: Vec<(String, String)> = bg.iter().flat_map(|s| transitions(s)).collect();
    let us_t: Vec<(String, String)> = user.iter().flat_map(|s| transitions(s)).collect();
    let target = transitions(s);
    let mut nll = 0.0;
    for (v, w) in &target {
        let c_bg = bg_t.iter().filter(|(a, _)| a == v).count();
        let c_bg_w = bg_t.iter().filter(|(a, b)| a == v && b == w).count();
        let c_us = us_t.iter().filter(|(a, _)| a == v).count();
        let c_us_w = us_t.iter().filter(|(a, b)| a == v && b == w).count();
        let p_bg = (c_bg_w as f64 + 1.0) / (c_bg + vocab.len()) as f64;
        let p = if c_us > 0 {
            lambda * c_us_w as f64 / c_us as f64 + (1.0 - lambda) * p_bg
        } else {
            p_bg
        };
        nll -= p.ln();
    }
    (nll / target.len() as f64).exp()
}

fn oracle_urank(mt: f64, md: &[f64], st: f64, sd: &[f64]) -> f64 {
    let mut rank_m = 0;
    for d in md {
        if *d > mt {
            rank_m += 1;
        }
    }
    let mut rank_s = 0;
    for d in sd {
        if *d > st {
            rank_s += 1;
        }
    }
    f64::from(u8::from(rank_m < rank_s))
}

fn oracle_embedding(c: &[String], r: &[String], table: &BTreeMap<String, [f64; 3]>) -> Option<[f64; 3]> {
    let cv: Vec<[f64; 3]> = c.iter().filter_map(|w| table.get(w).copied()).collect();
    let rv: Vec<[f64; 3]> = r.iter().filter_map(|w| table.get(w).copied()).collect();
    if cv.is_empty() || rv.is_empty() {
        return None;
    }
    fn cos(a: [f64; 3], b: [f64; 3]) -> f64 {
        let d = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
        let na = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
        let nb = (b[0] * b[0] + b[1] * b[1] + b[2] * b[2]).sqrt();
        if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            d / (na * nb)
        }
    }
    let mean = |vs: &[[f64; 3]]| {
        let mut m = [0.0; 3];
        for v in vs {
            for k in 0..3 {
                m[k] += v[k] / vs.len() as f64;
            }
        }
        m
    };
    let extreme = |vs: &[[f64; 3]]| {
        let mut e = [0.0; 3];
        for k in 0..3 {
            let hi = vs.iter().map(|v| v[k]).fold(f64::MIN, f64::max);
            let lo = vs.iter().map(|v| v[k]).fold(f64::MAX, f64::min);
            e[k] = if -lo > hi { lo } else { hi };
        }
        e
    };
    let one_way = |a: &[[f64; 3]], b: &[[f64; 3]]| {
        let mut total = 0.0;
        for x in a {
            let mut best = f64::MIN;
            for y in b {
                best = best.max(cos(*x, *y));
            }
            total += best;
        }
        total / a.len() as f64
    };
    Some([
        cos(mean(&cv), mean(&rv)),
        cos(extreme(&cv), extreme(&rv)),
        0.5 * (one_way(&cv, &rv) + one_way(&rv, &cv)),
    ])
}

fn metric_oracles() -> (bool, String) {
    const CASES: usize = 200;
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut note = |k: &'static str, a: f64, b: f64| {
        let e = worst.entry(k).or_insert(0.0);
        let d = (a - b).abs();
        *e = e.max(if d.is_nan() { f64::INFINITY } else { d });
    };
    for _ in 0..CASES {
        let vocab = rng.random_range(2..=20);
        let c = words(&mut rng, 0, vocab);
        let r = words(&mut rng, 1, vocab);
        note("bleu1", bleu1(&c, &r), oracle_bleu(&c, &r));

        let group: Vec<Vec<String>> = (0..rng.random_range(2..6)).map(|_| words(&mut rng, 0, vocab)).collect();
        for n in [1, 2] {
            match (distinct_n(&group, n), oracle_distinct(&group, n)) {
                (Some(a), Some(b)) => note("distinct_n", a, b),
                (None, None) => note("distinct_n", 0.0, 0.0),
                _ => note("distinct_n", 0.0, f64::INFINITY),
            }
        }

        let bg: Vec<Vec<String>> = (0..rng.random_range(1..8)).map(|_| words(&mut rng, 0, vocab)).collect();
        let user: Vec<Vec<String>> = (0..rng.random_range(0..5)).map(|_| words(&mut rng, 0, vocab)).collect();
        let lambda: f64 = rng.random();
        let s = words(&mut rng, 1, 20);
        let lm = BigramLM::new("u", &bg, &user, lambda);
        note("perplexity", lm.perplexity(&s).unwrap(), oracle_perplexity(&bg, &user, lambda, &s));

        let k = rng.random_range(1..=10);
        let mut grid = || f64::from(rng.random_range(-6i32..=0)) * 0.25;
        let (mt, st) = (grid(), grid());
        let md: Vec<f64> = (0..k).map(|_| grid()).collect();
        let sd: Vec<f64> = (0..k).map(|_| grid()).collect();
        note("urank", urank_single(mt, &md, st, &sd), oracle_urank(mt, &md, st, &sd));

        let mut table: BTreeMap<String, [f64; 3]> = BTreeMap::new();
        let mut wv = WordVectors::new(3);
        for w in 0..vocab {
            if rng.random_bool(0.75) {
                let v = [0, 1, 2].map(|_| f64::from(rng.random_range(-3i32..=3)));
                table.insert(format!("w{w}"), v);
                wv.insert(format!("w{w}"), v.to_vec()).unwrap();
            }
        }
        match (embedding_metrics(&c, &r, &wv), oracle_embedding(&c, &r, &table)) {
            (Some(e), Some(o)) => {
                note("embedding", e.average, o[0]);
                note("embedding", e.extrema, o[1]);
                note("embedding", e.greedy, o[2]);
            }
            (None, None) => note("embedding", 0.0, 0.0),
            _ => note("embedding", 0.0, f64::INFINITY),
        }
    }
    let passed = worst.len() == 5 && worst.values().all(|&e| e < 1e-9);
    let detail = worst.iter().map(|(k, v)| format!("{k}={v:.1e}")).collect::<Vec<_>>().join(" ");
    (passed, format!("{CASES} cases each, max_abs: {detail}"))
}

// ---------------------------------------------------------------- 4

fn regularizer_contracts() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut bad = 0;
    let cases = 10_000;
    for _ in 0..cases {
        let g1: f64 = rng.random_range(0.0..1.0);
        let g2: f64 = rng.random_range(0.0..1.0);
        let (ku, kk): (f64, f64) = (rng.random_range(0.0..3.0), rng.random_range(0.0..3.0));
        let v = r1(ku, kk, g1);
        let raw = ku - kk;
        if v < -g1 || (raw > -g1 && (v - raw).abs() > 1e-9) {
            bad += 1;
        }
        let d = rng.random_range(1..6);
        let vu: Vec<f64> = (0..d).map(|_| rng.random_range(0.01..2.0)).collect();
        let vk: Vec<f64> = (0..d).map(|_| rng.random_range(0.01..2.0)).collect();
        let v = r2(&vu, &vk, g2).unwrap();
        let raw = vu.iter().sum::<f64>() / d as f64 - vk.iter().sum::<f64>() / d as f64;
        if v < -g2 || (raw > -g2 && (v - raw).abs() > 1e-9) {
            bad += 1;
        }
    }
    (bad == 0, format!("{cases} random cases per hinge, violations={bad}"))
}

// ---------------------------------------------------------------- 5-7

struct SeedRun {
    seed: u64,
    reports: BTreeMap<&'static str, EvalReport>,
    kl_gap: f64,
    variance_gap: f64,
}

const ARMS: [&str; 4] = ["S2SA", "CVAE", "PAGENERATOR", "w/o UE"];

fn desk_scale_run(seed: u64) -> SeedRun {
    let corpus = generate_synthetic(8, 400, 0.9, seed);
    let data = Dataset::prepare(&corpus.triples, 0.95, seed, 1);
    let base = TrainConfig::toy(Variant::S2sa);
    let opts = EvalOptions {
        metrics: MetricSet {
            embed: false,
            ..MetricSet::ALL
        },
        config: MetricConfig::default(),
        seed,
        ..EvalOptions::default()
    };
    let models: Vec<_> = ARMS
        .iter()
        .map(|label| {
            let arm = Arm::parse(label, &base).unwrap();
            (*label, train_model(&arm.config, &data, seed, None).unwrap())
        })
        .collect();
    let reference = &models[0].1;
    let mut reports = BTreeMap::new();
    for (label, m) in &models {
        reports.insert(*label, evaluate(label, m, reference, &data, None, &opts).unwrap());
    }
    let gaps = regularizer_gaps(&models[2].1, &data.test_enc, 64).unwrap().unwrap();
    SeedRun {
        seed,
        reports,
        kl_gap: gaps.kl_gap,
        variance_gap: gaps.variance_gap,
    }
}

fn urank(r: &EvalReport) -> f64 {
    r.urank.as_ref().unwrap().value
}

fn uppl(r: &EvalReport) -> f64 {
    r.uppl.as_ref().unwrap().value
}

fn udist(r: &EvalReport) -> (f64, f64) {
    let d = r.udistinct.unwrap();
    (d.distinct1, d.distinct2)
}

fn table_ordering(runs: &[SeedRun]) -> (bool, String) {
    let mut held = 0;
    let mut detail = Vec::new();
    for run in runs {
        let (s2s, cvae, pa) = (&run.reports["S2SA"], &run.reports["CVAE"], &run.reports["PAGENERATOR"]);
        let a = urank(pa) > urank(cvae) && urank(cvae) > 0.0 && urank(s2s) == 0.0;
        let b = uppl(pa) < uppl(cvae);
        let (p1, p2) = udist(pa);
        let (c1, c2) = udist(cvae);
        let c = p1 >= c1 && p2 >= c2;
        held += usize::from(a && b && c);
        detail.push(format!(
            "seed {}: uRank {:.3}>{:.3}>0={:.3} {a}, uPPL {:.2}<{:.2} {b}, uDist {:.3}/{:.3}>={:.3}/{:.3} {c}",
            run.seed,
            urank(pa),
            urank(cvae),
            urank(s2s),
            uppl(pa),
            uppl(cvae),
            p1,
            p2,
            c1,
            c2
        ));
    }
    (held >= 2, format!("held for {held}/3 seeds\n    {}", detail.join("\n    ")))
}

fn ablation(runs: &[SeedRun]) -> (bool, String) {
    let mut held = 0;
    let mut detail = Vec::new();
    for run in runs {
        let (pa, ue) = (&run.reports["PAGENERATOR"], &run.reports["w/o UE"]);
        let (p1, p2) = udist(pa);
        let (u1, u2) = udist(ue);
        let ok = urank(ue) < urank(pa) && u1 < p1 && u2 < p2;
        held += usize::from(ok);
        detail.push(format!(
            "seed {}: uRank {:.3}<{:.3}, uDist {:.3}/{:.3}<{:.3}/{:.3} {ok}",
            run.seed,
            urank(ue),
            urank(pa),
            u1,
            u2,
            p1,
            p2
        ));
    }
    (held >= 2, format!("held for {held}/3 seeds\n    {}", detail.join("\n    ")))
}

fn mechanism(runs: &[SeedRun]) -> (bool, String) {
    let ok = runs.iter().all(|r| r.kl_gap <= 0.0 && r.variance_gap <= 0.0);
    let detail: Vec<String> = runs
        .iter()
        .map(|r| format!("seed {}: KL gap {:.4}, variance gap {:.4}", r.seed, r.kl_gap, r.variance_gap))
        .collect();
    (ok, format!("all seeds\n    {}", detail.join("\n    ")))
}

// ---------------------------------------------------------------- 8

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            for (k, v) in snapshot(&p) {
                out.insert(format!("{}/{k}", p.file_name().unwrap().to_string_lossy()), v);
            }
        } else {
            out.insert(p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap());
        }
    }
    out
}

fn reproducibility() -> (bool, String) {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let s = |p: &Path| p.to_string_lossy().into_owned();
    let corpus = root.join("corpus.txt");
    let cfg_pa = root.join("pa.cfg");
    let cfg_s2s = root.join("s2s.cfg");
    fs::write(&cfg_pa, "profile=toy\nvariant=PAGENERATOR\nmax_batches=60\n").unwrap();
    fs::write(&cfg_s2s, "profile=toy\nvariant=S2SA\nmax_batches=60\n").unwrap();
    let runs = root.join("runs");
    let cli = |args: &[String]| {
        let mut sink = Vec::new();
        let code = pagen_core::cli::run(args, &mut sink);
        assert_eq!(code, 0, "{args:?}");
        sink
    };
    let argv = |v: &[&str]| -> Vec<String> { std::iter::once("pagen").chain(v.iter().copied()).map(str::to_owned).collect() };
    let pipeline = || -> (BTreeMap<String, Vec<u8>>, Vec<u8>) {
        if runs.exists() {
            fs::remove_dir_all(&runs).unwrap();
        }
        cli(&argv(&["gen-corpus", "--users", "4", "--per-user", "50", "--seed", "8", "--out", &s(&corpus)]));
        let (pa, s2s, ev) = (runs.join("pa"), runs.join("s2s"), runs.join("eval"));
        cli(&argv(&["train", "--config", &s(&cfg_pa), "--data", &s(&corpus), "--out", &s(&pa), "--seed", "5"]));
        cli(&argv(&["train", "--config", &s(&cfg_s2s), "--data", &s(&corpus), "--out", &s(&s2s), "--seed", "5"]));
        cli(&argv(&[
            "evaluate",
            "--model",
            &s(&pa.join("model.ckpt")),
            "--ref-model",
            &s(&s2s.join("model.ckpt")),
            "--out",
            &s(&ev),
            "--rounds",
            "3",
            "--n",
            "3",
            "--seed",
            "9",
        ]));
        let table = cli(&argv(&["report", "--eval", &s(&ev)]));
        (snapshot(&runs), table)
    };
    let (first, t1) = pipeline();
    let (second, t2) = pipeline();
    let differing: Vec<&String> = first.keys().filter(|k| first.get(*k) != second.get(*k)).collect();
    let ok = first.len() == second.len() && differing.is_empty() && t1 == t2 && first.contains_key("eval/report.txt");
    (ok, format!("{} artifact files compared byte-for-byte, differing={differing:?}", first.len()))
}

fn main() {
    // `cargo test -- --list` and filters: run only when not asked to list
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    println!("running acceptance criteria");
    let mut verdicts = vec![
        criterion(1, "gradient correctness", gradients),
        criterion(2, "KL oracle", kl_oracle),
        criterion(3, "metric oracles", metric_oracles),
        criterion(4, "regularizer contracts", regularizer_contracts),
    ];
    let t = Instant::now();
    let runs: Vec<SeedRun> = SEEDS.iter().map(|&s| desk_scale_run(s)).collect();
    println!("trained and evaluated {} models in {:.0}s", SEEDS.len() * ARMS.len(), t.elapsed().as_secs_f64());
    verdicts.push(criterion(5, "ordering at desk scale", || table_ordering(&runs)));
    verdicts.push(criterion(6, "ablation w/o UE", || ablation(&runs)));
    verdicts.push(criterion(7, "regularizer mechanism", || mechanism(&runs)));
    verdicts.push(criterion(8, "reproducibility", reproducibility));

    let failed: Vec<usize> = verdicts.iter().filter(|v| !v.passed).map(|v| v.id).collect();
    println!(
        "acceptance: {} passed, {} failed{}",
        verdicts.len() - failed.len(),
        failed.len(),
        if failed.is_empty() { String::new() } else { format!(" {failed:?}") }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
