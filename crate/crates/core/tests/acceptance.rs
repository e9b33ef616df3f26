//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any FAIL.

use std::time::{Duration, Instant};

use crcl::autograd::Graph;
use crcl::cic::{correlation_loss, correlation_loss_var, correlation_matrices, correlation_vars, CorrelationTerms};
use crcl::cli::report_csv;
use crcl::config::{SynthConfig, TrainConfig};
use crcl::data::{synth_generate, ClipParams, Dataset, Split, SynthDataset};
use crcl::decomposer::Decomposer;
use crcl::encoders::MotionEncoder;
use crcl::eval::{eer, evaluate, fnorm_gap_report, roc_auc, EvalReport};
use crcl::gradcheck::{check_gradients, check_param_gradients};
use crcl::memory::{memory_losses, memory_read, memory_write, read_weights, MemoryPool};
use crcl::model::Model;
use crcl::nn::ParamStore;
use crcl::sdl::{kl_mutual_loss, scene_ce_loss, triplet_consistency_loss, triplet_hinge};
use crcl::train::{train, Trainer};
use crcl::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn orthonormal_columns(b: usize, n: usize) -> Tensor {
    let mut t = Tensor::zeros(&[b, n]);
    for j in 0..n {
        t.set(&[j, j], 1.0);
    }
    t
}

fn criterion_1() -> Check {
    let eye = orthonormal_columns(6, 4);
    let triple = correlation_matrices(&eye, &eye).map_err(err)?;
    let lc = correlation_loss(&triple, 10.0, CorrelationTerms::ALL);
    ensure(lc.abs() <= 1e-9, format!("L_c(I,I,I) = {lc}"))?;

    let mut g = Graph::new();
    let p = g.input(Tensor::new(&[2, 3], vec![0.2, 0.5, 0.3, 0.6, 0.1, 0.3]).unwrap());
    let kl = kl_mutual_loss(&mut g, p, p).map_err(err)?;
    let kl = g.value(kl).item();
    ensure(kl.abs() <= 1e-9, format!("L_KL(p,p) = {kl}"))?;

    let onehot = g.input(Tensor::new(&[3, 3], vec![0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap());
    let ce = scene_ce_loss(&mut g, onehot, &[1, 0, 2]).map_err(err)?;
    let ce = g.value(ce).item();
    ensure(ce.abs() <= 1e-9, format!("one-hot CE = {ce}"))?;

    for (dm, ds, m) in [(0.0, 1.0, 1.0), (0.5, 3.0, 1.0), (2.0, 2.0, 0.0)] {
        let h = triplet_hinge(dm, ds, m);
        ensure(h.abs() <= 1e-9, format!("hinge({dm},{ds},{m}) = {h}"))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let noisy = random(&[6, 4], &mut rng);
    let rm = g.input(eye.clone());
    let rs = g.input(noisy.clone());
    let tm = correlation_vars(&mut g, rm, rm).map_err(err)?;
    let ts = correlation_vars(&mut g, rs, rm).map_err(err)?;
    let t = triplet_consistency_loss(&mut g, &tm, &ts, 10.0, 1.0);
    let t = g.value(t).item();
    ensure(t.abs() <= 1e-9, format!("graph hinge with consistent motion branch = {t}"))?;
    Ok(format!("L_c {lc:e}, KL {kl:e}, CE {ce:e}, hinge {t:e}"))
}

fn criterion_2() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let mut record = |name: &'static str, e: f64| {
        if let Some(w) = worst.iter_mut().find(|w| w.0 == name) {
            w.1 = w.1.max(e);
        } else {
            worst.push((name, e));
        }
    };
    for (b, n) in [(4, 4), (3, 2), (4, 3), (2, 4)] {
        let inputs = [random(&[b, n], &mut rng), random(&[b, n], &mut rng)];
        record(
            "L_c",
            check_gradients(
                |g, v| {
                    let t = correlation_vars(g, v[0], v[1]).unwrap();
                    correlation_loss_var(g, &t, 10.0, CorrelationTerms::ALL).unwrap()
                },
                &inputs,
            ),
        );
        // Motion branch perturbed from a shared base so the hinge is active.
        let base = random(&[b, n], &mut rng);
        let reps = [random(&[b, n], &mut rng), random(&[b, n], &mut rng), base.clone(), base.map(|v| v + 1e-2)];
        record(
            "L_t",
            check_gradients(
                |g, v| {
                    let tm = correlation_vars(g, v[0], v[1]).unwrap();
                    let ts = correlation_vars(g, v[2], v[3]).unwrap();
                    triplet_consistency_loss(g, &tm, &ts, 10.0, 100.0)
                },
                &reps,
            ),
        );
        let scenes = n.min(3);
        let labels: Vec<usize> = (0..b).map(|i| i % scenes).collect();
        let logits = [random(&[b, scenes], &mut rng), random(&[b, scenes], &mut rng)];
        record(
            "L_cs",
            check_gradients(
                |g, v| {
                    let p = g.softmax(v[0], 1);
                    scene_ce_loss(g, p, &labels).unwrap()
                },
                &logits[..1],
            ),
        );
        record(
            "L_KL",
            check_gradients(
                |g, v| {
                    let ps = g.softmax(v[0], 1);
                    let pm = g.softmax(v[1], 1);
                    kl_mutual_loss(g, ps, pm).unwrap()
                },
                &logits,
            ),
        );
    }
    for (b, c, h) in [(2, 3, 2), (1, 4, 3), (2, 2, 4)] {
        let pool = MemoryPool::random(c, 4, 2, &mut rng).map_err(err)?;
        let feats = [random(&[b, c, h, h], &mut rng)];
        record(
            "L_compact",
            check_gradients(|g, v| memory_losses(g, &pool, v[0], 1.0).unwrap().0, &feats),
        );
        record(
            "L_separate",
            check_gradients(|g, v| memory_losses(g, &pool, v[0], 4.0).unwrap().1, &feats),
        );
    }
    for (b, h) in [(2, 3), (1, 4)] {
        let cfg = TrainConfig { channels: 4, attn_channels: 2, ..TrainConfig::default() };
        let mut store = ParamStore::new();
        let enc = MotionEncoder::new(&mut store, &cfg, &mut rng);
        let probe = random(&[b, h * h], &mut rng);
        let x = random(&[b, 4, h, h], &mut rng);
        record(
            "temporal attention",
            check_param_gradients(&store, &[x], |g, p, v| {
                let maps = enc.temporal_attention(g, p, v[0]).unwrap();
                let w = g.input(probe.clone());
                let y = g.mul(maps.attention, w);
                g.sum_all(y)
            }),
        );
    }
    let summary: Vec<String> = worst.iter().map(|(k, e)| format!("{k} {e:.1e}")).collect();
    let bad: Vec<String> = worst.iter().filter(|w| !(w.1 < 1e-3)).map(|w| w.0.to_string()).collect();
    ensure(bad.is_empty(), format!("relative error >= 1e-3 for {}", bad.join(", ")))?;
    Ok(summary.join(", "))
}

fn read(pool: &MemoryPool, f: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let v = g.input(f.clone());
    let r = memory_read(&mut g, pool, v).unwrap();
    g.value(r).clone()
}

fn criterion_3() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (b, c, n, h) = (2, 5, 7, 3);
    let q = h * h;
    let pool = MemoryPool::random(c, n, n, &mut rng).map_err(err)?;
    let f = random(&[b, c, h, h], &mut rng);
    let got = read(&pool, &f);
    let mut dense_err: f64 = 0.0;
    for bi in 0..b {
        for i in 0..q {
            let logits: Vec<f64> = (0..n)
                .map(|j| (0..c).map(|ch| pool.items().get(&[ch, j]) * f.data()[(bi * c + ch) * q + i]).sum::<f64>() / (c as f64).sqrt())
                .collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
            for ch in 0..c {
                let want: f64 = (0..n).map(|j| (logits[j] - mx).exp() / z * pool.items().get(&[ch, j])).sum();
                dense_err = dense_err.max((got.data()[(bi * c + ch) * q + i] - want).abs());
            }
        }
    }
    ensure(dense_err <= 1e-6, format!("k=N read differs from dense read by {dense_err}"))?;

    let top1 = pool.with_k(1).map_err(err)?;
    let got = read(&top1, &f);
    for bi in 0..b {
        for i in 0..q {
            let score = |j: usize| (0..c).map(|ch| pool.items().get(&[ch, j]) * f.data()[(bi * c + ch) * q + i]).sum::<f64>();
            let best = (0..n).max_by(|&x, &y| score(x).total_cmp(&score(y))).unwrap();
            for ch in 0..c {
                ensure(
                    got.data()[(bi * c + ch) * q + i] == pool.items().get(&[ch, best]),
                    format!("k=1 read is not item {best} at query {i}"),
                )?;
            }
        }
    }

    let mut worst_sum: f64 = 0.0;
    for k in 1..=n {
        let w = read_weights(&pool.with_k(k).map_err(err)?, &f).map_err(err)?;
        for bi in 0..b {
            for i in 0..q {
                let col: Vec<f64> = (0..n).map(|j| w.get(&[bi, j, i])).collect();
                ensure(col.iter().all(|&v| v >= 0.0), "negative read weight")?;
                worst_sum = worst_sum.max((col.iter().sum::<f64>() - 1.0).abs());
            }
        }
    }
    ensure(worst_sum <= 1e-6, format!("weights sum off by {worst_sum}"))?;

    let written = memory_write(&pool, &random(&[4, c, h, h], &mut rng)).map_err(err)?;
    let mut worst_norm: f64 = 0.0;
    for j in 0..n {
        let norm = (0..c).map(|ch| written.items().get(&[ch, j]).powi(2)).sum::<f64>().sqrt();
        worst_norm = worst_norm.max((norm - 1.0).abs());
    }
    ensure(worst_norm <= 1e-5, format!("post-write norm off by {worst_norm}"))?;
    Ok(format!("dense {dense_err:.1e}, weight sum {worst_sum:.1e}, norm {worst_norm:.1e}"))
}

fn criterion_4() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (b, c, h) = (2, 6, 3);
    let mut store = ParamStore::new();
    let d = Decomposer::new(&mut store, c, true, true, &mut rng);
    let f = random(&[b, c, h, h], &mut rng);
    let fp = random(&[b, c, h, h], &mut rng);
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let (fv, fpv) = (g.input(f.clone()), g.input(fp.clone()));
    let out = d.decompose(&mut g, &p, fv, fpv).map_err(err)?;
    let gate = g.value(out.scores.gate).clone();
    for bi in 0..b {
        for ch in 0..c {
            let gp = gate.get(&[bi, ch]);
            ensure(gp + (1.0 - gp) == 1.0, "gates not complementary")?;
            for s in 0..h * h {
                let i = (bi * c + ch) * h * h + s;
                ensure(g.value(out.private).data()[i] == f.data()[i] * gp, "private part is not gate * F")?;
                ensure(g.value(out.shared).data()[i] == fp.data()[i] * (1.0 - gp), "shared part is not (1 - gate) * F'")?;
            }
        }
    }

    d.zero_heads(&mut store);
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let fv = g.input(f.clone());
    let out = d.decompose(&mut g, &p, fv, fv).map_err(err)?;
    let dev = g.value(out.scores.gate).data().iter().map(|v| (v - 0.5).abs()).fold(0.0, f64::max);
    ensure(dev <= 1e-6, format!("symmetric gate deviates from 0.5 by {dev}"))?;
    Ok(format!("complementary per channel, |g - 0.5| = {dev:.1e}"))
}

fn brute_auc(s: &[f64], y: &[u8]) -> f64 {
    // Twice the Mann-Whitney count, so every partial sum is an exact integer.
    let (mut twice, mut pos, mut neg) = (0u64, 0u64, 0u64);
    for &l in y {
        if l == 1 {
            pos += 1;
        } else {
            neg += 1;
        }
    }
    for (i, &yi) in y.iter().enumerate() {
        if yi != 1 {
            continue;
        }
        for (j, &yj) in y.iter().enumerate() {
            if yj == 0 {
                twice += if s[i] > s[j] { 2 } else if s[i] == s[j] { 1 } else { 0 };
            }
        }
    }
    twice as f64 / (2 * pos * neg) as f64
}

fn criterion_5() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut max_auc_diff, mut max_eer_diff, mut largest) = (0.0f64, 0.0f64, 0);
    for case in 0..200 {
        let n = if case == 0 { 10_000 } else { (10f64.powf(rng.random_range(0.5..4.0)) as usize).max(2) };
        largest = largest.max(n);
        let levels = rng.random_range(2..50);
        let s: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
        let mut y: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        y[0] = 0;
        y[1] = 1;
        let got = roc_auc(&s, &y).map_err(err)?;
        let want = brute_auc(&s, &y);
        max_auc_diff = max_auc_diff.max((got - want).abs());
        let fs: Vec<f64> = s.iter().map(|v| 1.0 - v).collect();
        let fy: Vec<u8> = y.iter().map(|v| 1 - v).collect();
        let d = (eer(&s, &y).map_err(err)? - eer(&fs, &fy).map_err(err)?).abs();
        max_eer_diff = max_eer_diff.max(d);
    }
    ensure(max_auc_diff == 0.0, format!("roc_auc differs from brute force by {max_auc_diff}"))?;
    ensure(max_eer_diff <= 1e-9, format!("eer flip asymmetry {max_eer_diff}"))?;
    Ok(format!("200 instances up to {largest} frames, auc exact, eer flip {max_eer_diff:.1e}"))
}

struct Synthetic {
    synth: SynthDataset,
    _dir: tempfile::TempDir,
}

impl Synthetic {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let synth = synth_generate(&SynthConfig::default(), 1, dir.path()).unwrap();
        Self { synth, _dir: dir }
    }

    fn split(&self, cfg: &TrainConfig, split: Split) -> Dataset {
        let clips = ClipParams { clip_len: cfg.clip_len, stride: cfg.clip_stride };
        Dataset::load(&self.synth.root, split, clips, cfg.frame_size).unwrap()
    }

    fn run(&self, sets: &[&str]) -> Result<(Trainer, EvalReport), String> {
        let mut all = vec!["dataset=synth".to_string()];
        all.extend(sets.iter().map(|s| s.to_string()));
        let cfg = TrainConfig::load(None, &all).map_err(err)?;
        let trainer = train(&cfg, &self.split(&cfg, Split::Train)).map_err(err)?;
        let (report, _, _) = evaluate(&trainer.model, &self.split(&cfg, Split::Test)).map_err(err)?;
        Ok((trainer, report))
    }
}

fn criterion_6(data: &Synthetic, full: &EvalReport, train_time: Duration) -> Check {
    let cfg = TrainConfig::load(None, &["dataset=synth".into(), "clustering=false".into()]).map_err(err)?;
    let test = data.split(&cfg, Split::Test);
    let untrained = Model::new(&cfg, test.manifest.num_scenes).map_err(err)?;
    let null = fnorm_gap_report(&untrained, &test).map_err(err)?;
    let windows = test.all_clips().map_err(err)?.len();
    let detail = format!(
        "auc {:.4}, eer {:.4}, gap {:.4}, trained in {train_time:.1?}; untrained gap {:.4} over {windows} windows",
        full.auc, full.eer, full.fnorm.gap, null.gap
    );
    ensure(windows >= 100 && null.gap.abs() < 0.5, format!("null baseline out of range: {detail}"))?;
    ensure(full.auc >= 0.85 && full.fnorm.gap > 0.0, detail.clone())?;
    Ok(detail)
}

fn criterion_7(data: &Synthetic, full: &EvalReport) -> Check {
    let mut auc = vec![("full", full.auc)];
    for (name, set) in [("no C1", "c1_term=false"), ("no C2", "c2_term=false"), ("no C3", "c3_term=false"), ("no clustering", "clustering=false")] {
        auc.push((name, data.run(&[set])?.1.auc));
    }
    let detail = auc.iter().map(|(k, v)| format!("{k} {v:.4}")).collect::<Vec<_>>().join(", ");
    let (c1, c2, c3, nc) = (auc[1].1, auc[2].1, auc[3].1, auc[4].1);
    ensure(c1 < c2 && c1 < c3, format!("no-C1 does not degrade most: {detail}"))?;
    ensure(nc < full.auc, format!("no-clustering not below full: {detail}"))?;
    Ok(detail)
}

fn criterion_8(data: &Synthetic) -> Check {
    let sets = ["dataset=synth", "phase1_epochs=1", "phase2_epochs=1"].map(String::from);
    let cfg = TrainConfig::load(None, &sets).map_err(err)?;
    let train_ds = data.split(&cfg, Split::Train);
    let test_ds = data.split(&cfg, Split::Test);
    let a = train(&cfg, &train_ds).map_err(err)?;
    let b = train(&cfg, &train_ds).map_err(err)?;
    ensure(a.checkpoint() == b.checkpoint(), "same seed gave different checkpoints")?;
    let ra = report_csv(&evaluate(&a.model, &test_ds).map_err(err)?.0);
    let rb = report_csv(&evaluate(&b.model, &test_ds).map_err(err)?.0);
    ensure(ra == rb, "same checkpoint gave different reports")?;

    let clips = train_ds.all_clips().map_err(err)?;
    let mut straight = Trainer::new(&cfg, train_ds.manifest.num_scenes).map_err(err)?;
    straight.train_epoch(&train_ds, &clips).map_err(err)?;
    let saved = straight.checkpoint();
    straight.train_epoch(&train_ds, &clips).map_err(err)?;
    let mut resumed = Trainer::from_checkpoint(&saved).map_err(err)?;
    resumed.train_epoch(&train_ds, &clips).map_err(err)?;
    ensure(resumed.checkpoint() == straight.checkpoint(), "resumed run diverged from uninterrupted run")?;
    Ok(format!("{} checkpoint bytes identical, report identical, resume bit-exact", saved.len()))
}

fn main() {
    let mut failed = 0;
    let mut line = |id: u32, name: &str, limit: Option<Duration>, f: &mut dyn FnMut() -> Check| {
        let t0 = Instant::now();
        let out = f();
        let dt = t0.elapsed();
        let out = match (out, limit) {
            (Ok(d), Some(l)) if dt > l => Err(format!("{d}; took {dt:.1?}, limit {l:?}")),
            (o, _) => o,
        };
        match out {
            Ok(d) => println!("PASS {id} {name}: {d} ({dt:.1?})"),
            Err(d) => {
                failed += 1;
                println!("FAIL {id} {name}: {d} ({dt:.1?})");
            }
        }
    };
    line(1, "loss-zero identities", Some(Duration::from_secs(1)), &mut criterion_1);
    line(2, "gradient suite", Some(Duration::from_secs(60)), &mut criterion_2);
    line(3, "memory oracles", Some(Duration::from_secs(10)), &mut criterion_3);
    line(4, "decomposer gates", None, &mut criterion_4);
    line(5, "AUC/EER oracles", Some(Duration::from_secs(60)), &mut criterion_5);

    let data = Synthetic::new();
    let t0 = Instant::now();
    let full = data.run(&[]);
    let full_time = t0.elapsed();
    match full {
        Ok((_, full)) => {
            let remaining = Duration::from_secs(20 * 60).saturating_sub(full_time);
            line(6, "synthetic end-to-end", Some(remaining), &mut || criterion_6(&data, &full, full_time));
            line(7, "ablation directions", None, &mut || criterion_7(&data, &full));
        }
        Err(e) => {
            line(6, "synthetic end-to-end", None, &mut || Err(e.clone()));
            line(7, "ablation directions", None, &mut || Err(e.clone()));
        }
    }
    line(8, "determinism", None, &mut || criterion_8(&data));
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
