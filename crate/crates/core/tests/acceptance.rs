//! Acceptance checks. Prints one line per criterion and exits non-zero if
//! any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use msla::attention::{efficient_attention_linear, efficient_attention_quadratic};
use msla::bench::{bench_attention, BenchOptions, Mechanism};
use msla::count::{count_flops, count_params};
use msla::data::checkpoint::{decode_entries, encode_store, save_checkpoint};
use msla::data::mten::{decode, encode};
use msla::data::{write_mten, Dataset};
use msla::eval::evaluate;
use msla::gradcheck::{run_suite, CASES, EXTRA_CASES};
use msla::loss::{ce_loss, dice_loss, hybrid_loss, uniform_weights};
use msla::metrics::{hausdorff_masks, region_metrics};
use msla::network::{build_model, Model, ModelConfig, RunConfig, TrainConfig, PATTERNS};
use msla::train::{train, TrainOptions};
use msla::{Error, Graph, LabelMap, Mode, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const ASSOC_TOL: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;
const GRAD_SEEDS: u64 = 20;
const EFFICIENT_MAX_RATIO: f64 = 6.0;
const SOFTMAX_MIN_RATIO: f64 = 10.0;
const PARAM_BAND: f64 = 0.15;
const FLOP_BAND: f64 = 0.25;
const BASE_PARAMS: f64 = 21.90e6;
const SMALL_PARAMS: f64 = 14.39e6;
const BASE_FLOPS: f64 = 5.05e9;
const SMALL_FLOPS: f64 = 3.73e9;
const DESK_DSC: f64 = 0.80;
const DESK_BUDGET: Duration = Duration::from_secs(30 * 60);
const DICE_PERFECT: f64 = 1e-4;
const LN2_TOL: f64 = 1e-9;
const ATTN_SUM_TOL: f64 = 1e-6;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gaussian(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| rng.sample(StandardNormal))
}

fn associativity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for n in [16, 64, 256] {
        for d in [8, 32] {
            for _ in 0..100 {
                let (q, k, v) = (gaussian(&mut rng, &[n, d]), gaussian(&mut rng, &[n, d]), gaussian(&mut rng, &[n, d]));
                let lin = efficient_attention_linear(&q, &k, &v).unwrap();
                let quad = efficient_attention_quadratic(&q, &k, &v).unwrap();
                let scale = quad.data().iter().fold(0f64, |m, &x| m.max((x as f64).abs()));
                let diff =
                    lin.data().iter().zip(quad.data()).fold(0f64, |m, (&a, &b)| m.max((a as f64 - b as f64).abs()));
                worst = worst.max(diff / scale.max(f64::MIN_POSITIVE));
            }
        }
    }
    ensure(worst <= ASSOC_TOL, format!("max relative difference {worst:.3e} over 600 trials (tol {ASSOC_TOL:.0e})"))
}

fn gradients() -> Outcome {
    let mut reports = run_suite("all", GRAD_SEEDS, GRAD_TOL).map_err(|e| e.to_string())?;
    for name in EXTRA_CASES {
        reports.extend(run_suite(name, GRAD_SEEDS, GRAD_TOL).map_err(|e| e.to_string())?);
    }
    let worst = reports.iter().max_by(|a, b| a.worst.total_cmp(&b.worst)).unwrap();
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    for must in ["msla", "lfe", "gfe", "decoder"] {
        if !reports.iter().any(|r| r.name == must) {
            return Err(format!("case {must} missing"));
        }
    }
    ensure(
        failed.is_empty() && reports.len() == CASES.len() + EXTRA_CASES.len(),
        format!(
            "{} cases x {GRAD_SEEDS} seeds, worst {:.3e} ({}), failed: {failed:?}",
            reports.len(),
            worst.worst,
            worst.name
        ),
    )
}

fn shapes() -> Outcome {
    let mut checked = 0;
    for preset in ["base", "small"] {
        for pattern in PATTERNS {
            let cfg = ModelConfig::preset(preset).unwrap().with_pattern(pattern).map_err(|e| e.to_string())?;
            let k = cfg.num_classes;
            let (model, params) = build_model::<f32>(cfg, 0).map_err(|e| e.to_string())?;
            for side in [224, 64] {
                let mut g = Graph::inference(Mode::Eval);
                let x = g.constant(Tensor::from_fn(&[1, 3, side, side], |i| ((i % 13) as f32) / 13.0));
                let y = model.forward(&mut g, &params, x).map_err(|e| format!("{preset}/{pattern}/{side}: {e}"))?;
                if g.shape(y) != [1, k, side, side] {
                    return Err(format!("{preset}/{pattern}/{side}: got {:?}", g.shape(y)));
                }
                checked += 1;
            }
        }
    }
    Ok(format!("{checked} forwards returned B x K x H x W"))
}

fn complexity() -> Outcome {
    let opts = BenchOptions {
        mechanisms: vec![Mechanism::Efficient, Mechanism::Softmax],
        sizes: vec![1024, 4096],
        channels: 64,
        ..Default::default()
    };
    let report = bench_attention(&opts).map_err(|e| e.to_string())?;
    let eff = report.time_ratio(Mechanism::Efficient, 1024, 4096).ok_or("efficient rows missing")?;
    let soft = report.time_ratio(Mechanism::Softmax, 1024, 4096).ok_or("softmax rows missing")?;
    let flops =
        Mechanism::Efficient.flops(4096, 64).unwrap() as f64 / Mechanism::Efficient.flops(1024, 64).unwrap() as f64;
    ensure(
        eff <= EFFICIENT_MAX_RATIO && soft >= SOFTMAX_MIN_RATIO && flops == 4.0,
        format!("time ratio efficient {eff:.2} (<= {EFFICIENT_MAX_RATIO}), softmax {soft:.2} (>= {SOFTMAX_MIN_RATIO}), analytic flops ratio {flops}"),
    )
}

fn totals() -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    for (name, p_ref, f_ref) in [("base", BASE_PARAMS, BASE_FLOPS), ("small", SMALL_PARAMS, SMALL_FLOPS)] {
        let model = Model::new(ModelConfig::preset(name).unwrap()).map_err(|e| e.to_string())?;
        let p = count_params(&model) as f64;
        let f = count_flops(&model, 224, 224).map_err(|e| e.to_string())? as f64;
        let (dp, df) = (p / p_ref - 1.0, f / f_ref - 1.0);
        ok &= dp.abs() <= PARAM_BAND && df.abs() <= FLOP_BAND;
        parts.push(format!("{name} {:.2}M ({:+.1}%) {:.2}G ({:+.1}%)", p / 1e6, dp * 100.0, f / 1e9, df * 100.0));
    }
    ensure(ok, parts.join(", "))
}

fn desk_training() -> Outcome {
    let start = Instant::now();
    let cfg = ModelConfig::desk();
    let data = Dataset::synthetic(7, 0..240, 64, 64, 4).map_err(|e| e.to_string())?;
    let (train_set, held_out) = data.split(200);
    let (model, params) = build_model::<f32>(cfg, 0).map_err(|e| e.to_string())?;
    let recipe = TrainConfig { epochs: 15, lambda: 0.6, ..TrainConfig::acdc() };
    let out = train(&model, params, &recipe, &train_set, TrainOptions { seed: 1, ..Default::default() })
        .map_err(|e| e.to_string())?;
    let report = evaluate(&model, &out.params, &held_out, 100.0, 20).map_err(|e| e.to_string())?;
    let took = start.elapsed();
    ensure(
        report.mean_dsc >= DESK_DSC && took <= DESK_BUDGET && held_out.len() == 40,
        format!(
            "held-out mean DSC {:.4} (>= {DESK_DSC}) on {} scenes in {:.0}s",
            report.mean_dsc,
            held_out.len(),
            took.as_secs_f64()
        ),
    )
}

fn loss_identities() -> Outcome {
    let (b, k, h, w) = (2, 4, 5, 5);
    let labels = LabelMap::new(b, h, w, (0..b * h * w).map(|i| (i % k) as u32).collect()).unwrap();
    let onehot = Tensor::<f64>::from_fn(&[b, k, h, w], |i| {
        let (n, c, p) = (i / (k * h * w), (i / (h * w)) % k, i % (h * w));
        if labels.data()[n * h * w + p] as usize == c {
            1.0
        } else {
            0.0
        }
    });
    let mut g = Graph::new(Mode::Train);
    let p = g.constant(onehot);
    let weights = uniform_weights(k);
    let dice = dice_loss(&mut g, p, &labels, &weights).unwrap();
    let ce = ce_loss(&mut g, p, &labels).unwrap();
    let h0 = hybrid_loss(&mut g, p, &labels, 0.0).unwrap();
    let h1 = hybrid_loss(&mut g, p, &labels, 1.0).unwrap();
    let v = |g: &Graph<f64>, x| g.value(x).data()[0];
    let (dv, cv, h0v, h1v) = (v(&g, dice), v(&g, ce), v(&g, h0), v(&g, h1));

    let mut g2 = Graph::new(Mode::Train);
    let half = g2.constant(Tensor::<f64>::from_fn(&[1, 2, 2, 2], |_| 0.5));
    let bl = LabelMap::new(1, 2, 2, vec![0, 1, 1, 0]).unwrap();
    let ce_var = ce_loss(&mut g2, half, &bl).unwrap();
    let ce_half = g2.value(ce_var).data()[0];
    let ln2_err = (ce_half - std::f64::consts::LN_2).abs();
    ensure(
        dv <= DICE_PERFECT && h0v == cv && h1v == dv && ln2_err <= LN2_TOL,
        format!(
            "perfect dice {dv:.2e}, hybrid(0)==ce {}, hybrid(1)==dice {}, |ce(0.5)-ln2| {ln2_err:.1e}",
            h0v == cv,
            h1v == dv
        ),
    )
}

fn boundary_oracle(m: &[bool], h: usize, w: usize) -> Vec<(i64, i64)> {
    let at = |r: i64, c: i64| r >= 0 && c >= 0 && r < h as i64 && c < w as i64 && m[r as usize * w + c as usize];
    let mut out = Vec::new();
    for r in 0..h as i64 {
        for c in 0..w as i64 {
            if !at(r, c) {
                continue;
            }
            let mut edge = false;
            for dr in -1..=1 {
                for dc in -1..=1 {
                    if !at(r + dr, c + dc) {
                        edge = true;
                    }
                }
            }
            if edge {
                out.push((r, c));
            }
        }
    }
    out
}

fn hd_oracle(a: &[bool], b: &[bool], h: usize, w: usize) -> f64 {
    let (ba, bb) = (boundary_oracle(a, h, w), boundary_oracle(b, h, w));
    let mut worst: f64 = 0.0;
    for (from, to) in [(&ba, &bb), (&bb, &ba)] {
        for &(r, c) in from.iter() {
            let mut best = f64::INFINITY;
            for &(r2, c2) in to.iter() {
                let d = (((r - r2) * (r - r2) + (c - c2) * (c - c2)) as f64).sqrt();
                if d < best {
                    best = d;
                }
            }
            worst = worst.max(best);
        }
    }
    worst
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (h, w) = (16, 16);
    let mut mismatches = 0;
    for _ in 0..50 {
        let mask = |rng: &mut ChaCha8Rng| -> Vec<bool> {
            let p: f64 = rng.gen_range(0.1..0.6);
            let mut m: Vec<bool> = (0..h * w).map(|_| rng.gen_bool(p)).collect();
            m[rng.gen_range(0..h * w)] = true;
            m
        };
        let (a, b) = (mask(&mut rng), mask(&mut rng));
        if hausdorff_masks(&a, &b, h, w, 100.0).distance != hd_oracle(&a, &b, h, w) {
            mismatches += 1;
        }
    }

    let gt = LabelMap::new(1, 3, 4, vec![0, 0, 1, 1, 0, 2, 2, 1, 2, 2, 0, 0]).unwrap();
    let pred = LabelMap::new(1, 3, 4, vec![0, 1, 1, 1, 0, 2, 1, 1, 2, 0, 0, 0]).unwrap();
    let r = region_metrics(&pred, &gt, 3).unwrap();
    // confusion [truth][pred]: [[4,1,0],[0,3,0],[1,1,2]]
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12;
    let fixture1 = close(r.accuracy, 9.0 / 12.0)
        && close(r.per_class_iou[0].unwrap(), 3.0 / 5.0)
        && close(r.per_class_iou[1].unwrap(), 2.0 / 4.0)
        && close(r.miou, (3.0 / 5.0 + 2.0 / 4.0) / 2.0)
        && close(r.precision, 5.0 / 7.0)
        && close(r.recall, 5.0 / 7.0);
    let r2 = region_metrics(
        &LabelMap::new(1, 2, 2, vec![1; 4]).unwrap(),
        &LabelMap::new(1, 2, 2, vec![1, 0, 0, 0]).unwrap(),
        2,
    )
    .unwrap();
    let fixture2 =
        close(r2.accuracy, 0.25) && close(r2.precision, 0.25) && close(r2.recall, 1.0) && close(r2.miou, 0.25);
    ensure(
        mismatches == 0 && fixture1 && fixture2,
        format!(
            "hausdorff mismatches {mismatches}/50, region fixtures {}",
            if fixture1 && fixture2 { "match" } else { "differ" }
        ),
    )
}

fn formats() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let t32 = gaussian(&mut rng, &[3, 5, 7]);
    let t64 = Tensor::<f64>::from_fn(&[4, 6], |i| (i as f64).sin() * 1e300);
    let bytes32 = encode(&t32).unwrap();
    let bytes64 = encode(&t64).unwrap();
    let back32 = decode(&bytes32).unwrap().exact::<f32>().ok_or("dtype changed")?;
    let back64 = decode(&bytes64).unwrap().exact::<f64>().ok_or("dtype changed")?;
    let mten_ok = back32.bitwise_eq(&t32) && back64.bitwise_eq(&t64) && encode(&back32).unwrap() == bytes32;

    let (model, params) = build_model::<f32>(ModelConfig::desk(), 3).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("m.mckp");
    save_checkpoint(&path, &params).map_err(|e| e.to_string())?;
    let mut loaded = model.init_params::<f32>(99);
    msla::data::checkpoint::load_checkpoint(&path, &mut loaded).map_err(|e| e.to_string())?;
    let ckpt_ok = params.iter().zip(loaded.iter()).all(|((a, x), (b, y))| a == b && x.tensor.bitwise_eq(&y.tensor))
        && std::fs::read(&path).unwrap() == encode_store(&loaded).unwrap();

    let mut bad_mten: Vec<(&str, Vec<u8>)> = Vec::new();
    let corrupt = |f: &dyn Fn(&mut Vec<u8>)| {
        let mut b = bytes32.clone();
        f(&mut b);
        b
    };
    bad_mten.push(("magic", corrupt(&|b| b[0] = b'X')));
    bad_mten.push(("version", corrupt(&|b| b[4] = 9)));
    bad_mten.push(("dtype", corrupt(&|b| b[5] = 7)));
    bad_mten.push(("rank", corrupt(&|b| b[6] = 200)));
    bad_mten.push(("reserved", corrupt(&|b| b[7] = 1)));
    bad_mten.push(("zero dim", corrupt(&|b| b[8..12].copy_from_slice(&0u32.to_le_bytes()))));
    bad_mten.push(("truncated header", bytes32[..5].to_vec()));
    bad_mten.push(("truncated payload", bytes32[..bytes32.len() - 1].to_vec()));
    bad_mten.push(("trailing", corrupt(&|b| b.push(0))));
    let mut rejected = 0;
    for (_, b) in &bad_mten {
        rejected += matches!(decode(b), Err(Error::Format { .. })) as usize;
    }
    let mut small = ParamStore::<f32>::new();
    small.insert("a", Tensor::ones(&[2]), msla::params::Kind::Param);
    small.insert("b", Tensor::ones(&[3]), msla::params::Kind::Param);
    let ck = encode_store(&small).unwrap();
    let mut bad_ckpt = vec![ck[..3].to_vec(), ck.clone(), ck.clone(), ck[..ck.len() - 2].to_vec()];
    bad_ckpt[1][0] = b'Z';
    bad_ckpt[2][4] = 2;
    for b in &bad_ckpt {
        rejected += matches!(decode_entries(b), Err(Error::Format { .. })) as usize;
    }
    let total = bad_mten.len() + bad_ckpt.len();
    ensure(
        mten_ok && ckpt_ok && rejected == total,
        format!(
            "mten roundtrip {mten_ok}, checkpoint roundtrip {ckpt_ok}, corrupted fixtures rejected {rejected}/{total}"
        ),
    )
}

fn attention_maps() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = ModelConfig { input_size: (128, 128), ..ModelConfig::desk() };
    let (_, params) = build_model::<f32>(cfg.clone(), 5).map_err(|e| e.to_string())?;
    let ckpt = dir.path().join("best.mckp");
    save_checkpoint(&ckpt, &params).map_err(|e| e.to_string())?;
    let rc = RunConfig { model: cfg, train: TrainConfig::acdc() };
    std::fs::write(dir.path().join("config.txt"), rc.to_text()).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (mut worst_sum, mut min_value) = (0f64, f64::INFINITY);
    for i in 0..20 {
        let input = dir.path().join(format!("in{i}.mten"));
        write_mten(&input, &gaussian(&mut rng, &[3, 128, 128])).map_err(|e| e.to_string())?;
        let stage: usize = rng.gen_range(3..=4);
        let side = 128 >> (stage + 1);
        let query = format!("{},{}", rng.gen_range(0..side), rng.gen_range(0..side));
        let output = dir.path().join(format!("attn{i}.mten"));
        let args = [
            "msla",
            "inspect-attn",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--input",
            input.to_str().unwrap(),
            "--stage",
            &stage.to_string(),
            "--query",
            &query,
            "--output",
            output.to_str().unwrap(),
        ];
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let code = msla::cli::run(args, &mut out, &mut err);
        if code != 0 {
            return Err(format!("inspect-attn exited {code}: {}", String::from_utf8_lossy(&err)));
        }
        let map: Tensor<f32> = msla::data::read_mten(&output).map_err(|e| e.to_string())?;
        if map.shape() != [side, side] {
            return Err(format!("map shape {:?}, expected {side}x{side}", map.shape()));
        }
        let sum: f64 = map.data().iter().map(|&x| x as f64).sum();
        worst_sum = worst_sum.max((sum - 1.0).abs());
        min_value = min_value.min(map.data().iter().fold(f64::INFINITY, |m, &x| m.min(x as f64)));
    }
    ensure(
        worst_sum <= ATTN_SUM_TOL && min_value >= 0.0,
        format!("20 maps, max |sum-1| {worst_sum:.2e}, min weight {min_value:.2e}"),
    )
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("associativity equivalence", associativity),
        ("gradient suite", gradients),
        ("shape contract", shapes),
        ("complexity", complexity),
        ("parameter and flop totals", totals),
        ("desk-scale training", desk_training),
        ("loss identities", loss_identities),
        ("metric oracles", metric_oracles),
        ("format fidelity", formats),
        ("attention-map stochasticity", attention_maps),
    ];
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = Vec::new();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let id = i + 1;
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("criterion {id:>2} {name}: PASS ({d}) [{secs:.1}s]"),
            Err(d) => {
                println!("criterion {id:>2} {name}: FAIL ({d}) [{secs:.1}s]");
                failed.push(id);
            }
        }
    }
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
