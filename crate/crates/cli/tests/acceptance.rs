//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::net::TcpListener;
use std::panic::{self, AssertUnwindSafe};
use std::process::Command;
use std::time::Instant;

use fedcl::analytics::{theoretical_fn_ratio_fused, theoretical_fn_ratio_remote};
use fedcl::config::ExperimentConfig;
use fedcl::federation::{aggregate_models, run_experiment, ExperimentOutcome, RoundReport, Simulation};
use fedcl::math::{loss_backward, EncoderParams, FeatureVector, Layer, QueryObjective};
use fedcl::objective::{
    build_lj, entropy, matching_distribution, neighborhood_loss, top_n_neighbors, ContrastConfig, NeighborConfig,
    TrainingMode, TrainingObjective,
};
use fedcl::rng::{self, StreamRng};
use fedcl::transport::{client_session, decode_frame, encode_frame, server_loop, Message, ModelPair};
use fedcl_cli::{default_config, run_ablation};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

type Check = Result<String, String>;

fn verdict(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gaussian(n: usize, r: &mut StreamRng) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(r)).collect()
}

fn unit(n: usize, r: &mut StreamRng) -> FeatureVector {
    FeatureVector::normalized(&gaussian(n, r))
}

// 1. Analytic gradients against central differences.

fn loss_at(params: &EncoderParams, batch: &[Vec<f64>], obj: &impl QueryObjective) -> f64 {
    let q: Vec<Vec<f64>> = batch.iter().map(|x| params.encode(x).unwrap()).collect();
    obj.value_and_grad(&q).unwrap().0
}

fn gradient_check() -> Check {
    // Close to the cube root of f64 epsilon, where central differences are
    // most accurate; at 1e-4 truncation error alone reaches ~2e-4 on some
    // instances.
    const H: f64 = 1e-5;
    const TAU: f64 = 0.1;
    let mut worst = 0.0f64;
    let mut instances = 0;
    for seed in 0..20u64 {
        let mut r = rng::stream(seed, &[1001]);
        let params = EncoderParams::init(&[4, 5, 3], &mut r).unwrap();
        let batch: Vec<Vec<f64>> = (0..2).map(|_| gaussian(4, &mut r)).collect();
        let keys: Vec<FeatureVector> = (0..2).map(|_| unit(3, &mut r)).collect();
        let negatives = r.random_range(2..=8);
        let n_local = r.random_range(1..negatives);
        let local: Vec<FeatureVector> = (0..n_local).map(|_| unit(3, &mut r)).collect();
        let remote: Vec<FeatureVector> = (0..negatives - n_local).map(|_| unit(3, &mut r)).collect();
        let candidates: Vec<FeatureVector> = (0..6).map(|_| unit(3, &mut r)).collect();
        for exclude_local in [false, true] {
            for lambda in [0.0, 1.0] {
                let obj = TrainingObjective::new(
                    TrainingMode::ClFfNm,
                    ContrastConfig { tau: TAU, exclude_local },
                    NeighborConfig {
                        neighbors: 2,
                        tau_nm: TAU,
                        candidate_count: 6,
                        lambda,
                    },
                    &keys,
                    &local,
                    &remote,
                    &mut rng::stream(seed, &[]),
                )
                .unwrap()
                .with_candidates(candidates.clone());
                let analytic = loss_backward(&params, &batch, &obj).unwrap().1.flat();
                let base = params.flat();
                let mut p = params.clone();
                let numeric: Vec<f64> = (0..base.len())
                    .map(|i| {
                        let mut v = base.clone();
                        v[i] = base[i] + H;
                        p.set_flat(&v).unwrap();
                        let up = loss_at(&p, &batch, &obj);
                        v[i] = base[i] - H;
                        p.set_flat(&v).unwrap();
                        (up - loss_at(&p, &batch, &obj)) / (2.0 * H)
                    })
                    .collect();
                let scale = analytic.iter().chain(&numeric).fold(0.0f64, |m, v| m.max(v.abs()));
                let floor = (1e-3 * scale).max(1e-12);
                for (a, n) in analytic.iter().zip(&numeric) {
                    worst = worst.max((a - n).abs() / a.abs().max(n.abs()).max(floor));
                }
                instances += 1;
            }
        }
    }
    verdict(worst < 1e-4, format!("{instances} instances, max relative error {worst:.2e} (h {H:e}, tau {TAU})"))
}

// 2. False-negative ratios.

fn fn_ratios() -> Check {
    let mut cfg = ExperimentConfig::new(0, 2, 5, TrainingMode::ClFf);
    cfg.bank.capacity = 200;
    cfg.bank.upload_size = 200;
    cfg.probe.linear_every_round = false;
    let outcome = run_experiment(&cfg).map_err(|e| e.to_string())?;
    let fr = &outcome.reports[1].fn_ratios;
    let fused = fr.empirical_fused.unwrap_or(f64::NAN);
    let local = fr.empirical_local_only.unwrap_or(f64::NAN);
    let remote = fr.empirical_remote_only.unwrap_or(f64::NAN);

    let mut r = rng::stream(2, &[1002]);
    let mut ordered = 0;
    for _ in 0..100 {
        let m = r.random_range(1..=10);
        let sources = r.random_range(1..=9);
        let sizes: Vec<usize> = (0..sources).map(|_| r.random_range(1..=500)).collect();
        let ind: Vec<bool> = (0..sources).map(|_| r.random()).collect();
        let local_size = r.random_range(0..=500);
        let eq4 = theoretical_fn_ratio_fused(m, local_size, &sizes, &ind).unwrap();
        let eq5 = theoretical_fn_ratio_remote(m, &sizes, &ind).unwrap();
        if eq5 <= eq4 {
            ordered += 1;
        }
    }
    verdict(
        (fused - 0.1).abs() <= 0.02 && (local - 0.5).abs() <= 0.02 && remote == 0.0 && ordered == 100,
        format!("fused {fused:.4}, local-only {local:.4}, remote-only {remote}, remote<=fused in {ordered}/100"),
    )
}

// 3 and 4. Ablation on the default non-IID configuration.

fn ablation_checks() -> (Check, Check) {
    let summary = match run_ablation(&default_config(), 3) {
        Ok(s) => s,
        Err(e) => return (Err(e.to_string()), Err(e.to_string())),
    };
    let cl = summary.stats(TrainingMode::Cl).mean_knn;
    let ff = summary.stats(TrainingMode::ClFf).mean_knn;
    let nm = summary.stats(TrainingMode::ClFfNm).mean_knn;
    let s_ff = summary.pooled_std(TrainingMode::Cl, TrainingMode::ClFf);
    let s_nm = summary.pooled_std(TrainingMode::ClFf, TrainingMode::ClFfNm);
    let ordering = verdict(
        ff - cl >= -s_ff && nm - ff >= -s_nm && nm - cl > 0.0,
        format!(
            "cl {cl:.4}, cl_ff {ff:.4} (Δ {:+.4}, pooled std {s_ff:.4}), cl_ff_nm {nm:.4} (Δ {:+.4}, pooled std {s_nm:.4})",
            ff - cl,
            nm - ff
        ),
    );
    let base = summary.baseline_knn;
    let learning = verdict(
        nm >= base + 0.10,
        format!("cl_ff_nm {nm:.4} vs untrained {base:.4} (gain {:+.4})", nm - base),
    );
    (ordering, learning)
}

// 5. Aggregation exactness.

fn aggregation() -> Check {
    let one = |v: f64| EncoderParams::from_layers(vec![Layer {
        weight: vec![v],
        bias: vec![v + 2.0],
        rows: 1,
        cols: 1,
    }])
    .unwrap();
    let a = one(0.0);
    let b = one(2.0);
    let mixed = aggregate_models(&[(&a, 1), (&b, 3)]).map_err(|e| e.to_string())?.flat();
    let enc = EncoderParams::init(&[6, 5, 3], &mut rng::stream(5, &[])).unwrap();
    let same = aggregate_models(&[(&enc, 7), (&enc, 11), (&enc, 1)]).map_err(|e| e.to_string())?;
    verdict(
        mixed == vec![1.5, 3.5] && same == enc,
        format!("[0,2]x1 + [2,4]x3 -> {mixed:?}; identical models unchanged: {}", same == enc),
    )
}

// 6. Neighbourhood-matching invariants.

fn neighbourhood_invariants() -> Check {
    let mut r = rng::stream(6, &[1006]);
    let mut worst_sum = 0.0f64;
    let mut violations = 0;
    let mut argmax_checked = 0;
    for _ in 0..1000 {
        let k = r.random_range(3..=128);
        let n = r.random_range(1..=4.min(k - 1));
        let d = r.random_range(2..=16);
        let tau = r.random_range(0.02..2.0);
        let cands: Vec<FeatureVector> = (0..k).map(|_| unit(d, &mut r)).collect();
        let q = unit(d, &mut r).to_f64();
        let cap = ((k - n + 1) as f64).ln() + 1e-9;
        let neigh = top_n_neighbors(&q, &cands, n).unwrap();
        for &j in &neigh {
            let lj = build_lj(j, k, &neigh).unwrap();
            let p = matching_distribution(&q, lj.iter().map(|&i| &cands[i]), tau).unwrap();
            worst_sum = worst_sum.max((p.iter().sum::<f64>() - 1.0).abs());
            let h = entropy(&p);
            if !(h >= -1e-12 && h <= cap) {
                violations += 1;
            }
            let sj = cands[j].dot(&q);
            if lj[1..].iter().all(|&i| cands[i].dot(&q) < sj) {
                argmax_checked += 1;
                if !p[1..].iter().all(|&v| v < p[0]) {
                    violations += 1;
                }
            }
        }
        let cfg = NeighborConfig {
            neighbors: n,
            tau_nm: tau,
            candidate_count: k,
            lambda: 1.0,
        };
        let loss = neighborhood_loss(&[q], &cands, &cfg).unwrap();
        if !(loss >= -1e-12 && loss <= cap) {
            violations += 1;
        }
    }
    verdict(
        violations == 0 && worst_sum <= 1e-6 && argmax_checked > 0,
        format!("1000 instances, {violations} bound violations, max |Σp − 1| {worst_sum:.1e}, {argmax_checked} argmax cases"),
    )
}

// 7. Wire transport against the in-process simulator.

fn wire_equivalence() -> Check {
    let mut cfg = ExperimentConfig::new(4, 3, 2, TrainingMode::ClFfNm);
    cfg.data.classes_per_client = 5;
    cfg.probe.linear_every_round = false;
    let listener = TcpListener::bind("127.0.0.1:0").map_err(|e| e.to_string())?;
    let addr = listener.local_addr().map_err(|e| e.to_string())?;
    let handles: Vec<_> = (0..2)
        .map(|id| {
            let cfg = cfg.clone();
            std::thread::spawn(move || client_session(addr, &cfg, id, None))
        })
        .collect();
    let wire = server_loop(&listener, &cfg, |_| {}).map_err(|e| e.to_string())?;
    for h in handles {
        h.join().map_err(|_| "client thread panicked".to_string())?.map_err(|e| e.to_string())?;
    }
    let sim = Simulation::new(cfg).and_then(|s| s.run(|_| {})).map_err(|e| e.to_string())?;
    let strip = |o: &ExperimentOutcome| o.reports.iter().map(RoundReport::without_timing).collect::<Vec<_>>();
    let frame = |o: &ExperimentOutcome| {
        encode_frame(&Message::ModelDown(ModelPair {
            q: o.params_q.clone(),
            k: o.params_k.clone(),
        }))
        .unwrap()
    };
    verdict(
        frame(&wire) == frame(&sim) && strip(&wire) == strip(&sim),
        format!(
            "3 rounds, 2 clients: models bit-identical {}, round reports identical {}",
            frame(&wire) == frame(&sim),
            strip(&wire) == strip(&sim)
        ),
    )
}

// 8. Determinism across worker counts.

fn strip_wall_time(csv: &str) -> String {
    csv.lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head))
        .collect::<Vec<_>>()
        .join("\n")
}

fn determinism() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut outputs = Vec::new();
    for (i, threads) in ["1", "4", "1"].into_iter().enumerate() {
        let out = dir.path().join(format!("run{i}"));
        let status = Command::new(env!("CARGO_BIN_EXE_fedcl"))
            .env("FEDCL_THREADS", threads)
            .env("RUST_LOG", "warn")
            .args(["--rounds", "5", "--out", out.to_str().unwrap(), "simulate"])
            .stdout(std::process::Stdio::null())
            .status()
            .map_err(|e| e.to_string())?;
        if !status.success() {
            return Err(format!("simulate exited with {status}"));
        }
        let read = |f: &str| std::fs::read(out.join(f)).map_err(|e| e.to_string());
        let metrics = strip_wall_time(&String::from_utf8_lossy(&read("metrics.csv")?));
        outputs.push((metrics, read("model.bin")?, read("summary.json")?));
    }
    let same = outputs.windows(2).all(|w| w[0] == w[1]);
    verdict(
        same,
        format!("3 runs with FEDCL_THREADS 1/4/1: metrics, model and summary identical {same}"),
    )
}

// 9. Fuzzed frames.

fn fuzz() -> Check {
    let mut r = rng::stream(9, &[1009]);
    let enc = EncoderParams::init(&[4, 5, 3], &mut r).unwrap();
    let seeds: Vec<Vec<u8>> = [
        Message::Hello {
            client_id: 1,
            shard_size: 400,
        },
        Message::ModelUp(ModelPair {
            q: enc.clone(),
            k: enc.clone(),
        }),
        Message::FeaturesUp((0..4).map(|_| unit(3, &mut r)).collect()),
        Message::FeaturesDown((0..2).map(|_| unit(3, &mut r)).collect()),
        Message::RoundBegin {
            round: 3,
            config_digest: 0xfeed,
            flags: 3,
        },
        Message::Bye,
    ]
    .iter()
    .map(|m| encode_frame(m).unwrap())
    .collect();

    let mut codes = std::collections::BTreeMap::new();
    let mut panics = 0;
    let mut accepted = 0;
    let mut partial = 0;
    let mut foreign = 0;
    let hook = panic::take_hook();
    panic::set_hook(Box::new(|_| {}));
    for i in 0..10_000 {
        let mut bytes = seeds[i % seeds.len()].clone();
        for _ in 0..r.random_range(1..=4) {
            match r.random_range(0..6) {
                0 => {
                    let at = r.random_range(0..bytes.len());
                    bytes[at] ^= 1 << r.random_range(0..8);
                }
                1 => bytes[0] = r.random(),
                2 => {
                    let len: u32 = if r.random() { r.random() } else { r.random_range(0..64) };
                    if bytes.len() >= 5 {
                        bytes[1..5].copy_from_slice(&len.to_le_bytes());
                    }
                }
                3 => bytes.truncate(r.random_range(0..=bytes.len())),
                4 => bytes.extend((0..r.random_range(1..16)).map(|_| r.random::<u8>())),
                _ => {
                    if bytes.len() > 5 {
                        let at = r.random_range(5..bytes.len());
                        bytes[at] = r.random();
                    }
                }
            }
            if bytes.is_empty() {
                bytes.push(r.random());
            }
        }
        match panic::catch_unwind(AssertUnwindSafe(|| decode_frame(&bytes))) {
            Err(_) => panics += 1,
            Ok(Ok(fedcl::transport::Decoded::Frame { .. })) => accepted += 1,
            Ok(Ok(fedcl::transport::Decoded::NeedMore { .. })) => partial += 1,
            Ok(Err(e)) => {
                let variant = format!("{e:?}");
                let variant = variant.split([' ', '{', '(']).next().unwrap_or("").to_string();
                let entry = codes.entry(e.code()).or_insert_with(|| variant.clone());
                if *entry != variant || !(1..=5).contains(&e.code()) {
                    foreign += 1;
                }
            }
        }
    }
    panic::set_hook(hook);
    let rejected: Vec<String> = codes.iter().map(|(c, v)| format!("{c}={v}")).collect();
    verdict(
        panics == 0 && foreign == 0 && codes.len() >= 4,
        format!(
            "10000 frames: {panics} panics, {accepted} accepted, {partial} incomplete, rejection codes {}",
            rejected.join(" ")
        ),
    )
}

fn main() {
    let started = Instant::now();
    let mut results: Vec<(u32, &str, Check)> = vec![
        (1, "gradient check", gradient_check()),
        (2, "false-negative ratios", fn_ratios()),
    ];
    let (ordering, learning) = ablation_checks();
    results.push((3, "ablation ordering", ordering));
    results.push((4, "learning over untrained baseline", learning));
    results.push((5, "aggregation exactness", aggregation()));
    results.push((6, "neighbourhood invariants", neighbourhood_invariants()));
    results.push((7, "wire equivalence", wire_equivalence()));
    results.push((8, "determinism", determinism()));
    results.push((9, "frame fuzzing", fuzz()));

    let mut failed = 0;
    for (n, name, result) in &results {
        match result {
            Ok(detail) => println!("PASS {n} {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {n} {name}: {detail}");
            }
        }
    }
    println!("{} of {} criteria passed in {:.1}s", results.len() - failed, results.len(), started.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
