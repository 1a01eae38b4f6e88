//! Acceptance criteria. Prints one PASS/FAIL line per criterion and exits non-zero if any fail.
//!
//! Run alone with `cargo test -p weedsense-cli --test acceptance`.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use weedsense::check::{full_model_check, primitive_suite, tiny_config, MODEL_TOLERANCE, PRIMITIVE_TOLERANCE};
use weedsense::metrics::{evaluate_labels, evaluate_regression, evaluate_segmentation};
use weedsense::profile::{count_flops, count_parameters};
use weedsense::tensor::{Mode, Tensor};
use weedsense::train::ScheduleSpec;
use weedsense::{Model, ModelConfig, Network, Size, Task, UibKernels};

type Outcome = Result<String, String>;

fn cli(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_weedsense"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("weedsense {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr).trim()));
    }
    String::from_utf8(out.stdout).map_err(|e| e.to_string())
}

fn cli_json(args: &[&str]) -> Result<Value, String> {
    serde_json::from_str(&cli(args)?).map_err(|e| e.to_string())
}

fn within(value: f64, target: f64, rel: f64) -> bool {
    (value / target - 1.0).abs() <= rel
}

fn require(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn timed_describe(args: &[&str]) -> Result<(Value, f64), String> {
    let t = Instant::now();
    let v = cli_json(args)?;
    Ok((v, t.elapsed().as_secs_f64()))
}

fn params(args: &[&str]) -> Result<(f64, f64), String> {
    let mut full = vec!["describe"];
    full.extend(args);
    let (v, secs) = timed_describe(&full)?;
    Ok((v["total_params"].as_f64().ok_or("no total_params")? / 1e6, secs))
}

fn parameter_accounting() -> Outcome {
    let (total, t0) = params(&[])?;
    let (no_se, t1) = params(&["--no-se"])?;
    let mut rows = Vec::new();
    let mut slowest = t0.max(t1);
    for c in ["64", "128", "256"] {
        for se in ["--no-se", "--se"] {
            let (p, t) = params(&["--channels", c, se])?;
            slowest = slowest.max(t);
            rows.push(p);
        }
    }
    let [c64, c64se, c128, c128se, c256, c256se] = rows[..] else { unreachable!() };
    let delta = total - no_se;
    let ordered = c256se > c128se && c128se > c64se && c256 > c128 && c128 > c64 && c64se > c64 && c128se > c128 && c256se > c256;
    require(
        within(total, 30.50, 0.10) && within(delta, 1.08, 0.30) && ordered && slowest < 1.0,
        format!(
            "total {total:.3}M (30.50M ±10%), SE delta {delta:.3}M (1.08M ±30%), C64/128/256 SE {c64se:.2}/{c128se:.2}/{c256se:.2}M no-SE {c64:.2}/{c128:.2}/{c256:.2}M, slowest describe {slowest:.2}s"
        ),
    )
}

fn flop_accounting() -> Outcome {
    let t = Instant::now();
    let g = |cfg: ModelConfig| count_flops(&cfg, 512, 512).map(|r| r.total_flops as f64 / 1e9).map_err(|e| e.to_string());
    let base = ModelConfig::default();
    let medium = g(base.clone())?;
    let large = g(ModelConfig { size: Size::Large, ..base.clone() })?;
    let small = g(ModelConfig { size: Size::Small, ..base.clone() })?;
    let no_se = g(ModelConfig { use_se: false, ..base })?;
    let se_diff = (medium - no_se).abs() / no_se;
    let secs = t.elapsed().as_secs_f64();
    let (rl, rs) = (large / medium, small / medium);
    require(
        within(medium, 16.73, 0.20) && within(rl, 2.066, 0.15) && within(rs, 0.213, 0.15) && se_diff < 0.005 && secs < 1.0,
        format!(
            "Medium {medium:.3} G (MAC; 16.73 ±20%), Large/Medium {rl:.3} (2.066 ±15%), Small/Medium {rs:.3} (0.213 ±15%), SE difference {:.3}%, {secs:.3}s",
            100.0 * se_diff
        ),
    )
}

fn gradient_correctness() -> Outcome {
    let t = Instant::now();
    let prims = primitive_suite().map_err(|e| e.to_string())?;
    let worst = prims
        .iter()
        .max_by(|a, b| a.report.max_rel_error.total_cmp(&b.report.max_rel_error))
        .ok_or("no primitive checks")?;
    let failed: Vec<&str> = prims.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    let model = full_model_check(&tiny_config(), 64, 4, 2, 0).map_err(|e| e.to_string())?;
    let secs = t.elapsed().as_secs_f64();
    require(
        failed.is_empty() && model.passed() && secs < 300.0,
        format!(
            "{} primitives, worst {} {:.2e} (≤{PRIMITIVE_TOLERANCE:.0e}){}; tiny model {} coordinates, max {:.2e} (≤{MODEL_TOLERANCE:.0e}); {secs:.0}s",
            prims.len(),
            worst.name,
            worst.report.max_rel_error,
            if failed.is_empty() { String::new() } else { format!(", failed: {}", failed.join(",")) },
            model.report.checked,
            model.report.max_rel_error,
        ),
    )
}

fn shape_contract() -> Outcome {
    let t = Instant::now();
    let side = 256;
    let x = Tensor::from_fn([1, 3, side, side], |i| ((i * 31) % 255) as f32 / 255.0);
    // train-mode batch norm on the pooled context needs two samples
    let x2 = Tensor::from_fn([2, 3, side, side], |i| ((i * 37) % 255) as f32 / 255.0);
    let mut checked = 0;
    for size in Size::ALL {
        for kernels in UibKernels::GRID {
            for use_se in [false, true] {
                let cfg = ModelConfig { size, kernels, use_se, ..ModelConfig::default() };
                let label = cfg.label();
                let m = Model::<f32>::build(&cfg, 0).map_err(|e| e.to_string())?;
                let eval = m.forward(&x, Mode::Eval).map_err(|e| e.to_string())?;
                let shape = |v: &Option<weedsense::tensor::Var<f32>>| v.as_ref().map(|v| v.value().shape().to_vec());
                let ok = shape(&eval.seg) == Some(vec![1, 17, side, side])
                    && shape(&eval.height) == Some(vec![1, 1])
                    && shape(&eval.week) == Some(vec![1, 11])
                    && eval.aux.is_empty();
                drop(eval);
                let train = m.forward(&x2, Mode::Train).map_err(|e| e.to_string())?;
                let aux_ok = train.aux.len() == 4 && train.aux.iter().all(|a| a.value().shape() == [2, 17, side, side]);
                if !(ok && aux_ok) {
                    return Err(format!("{label}: wrong output shapes"));
                }
                checked += 1;
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    require(
        secs < 120.0,
        format!("{checked} configurations at {side}x{side}: seg [1,17,H,W], height [1,1], week [1,11], 4 aux maps in train mode; {secs:.0}s (<120s)"),
    )
}

fn aux_invariance() -> Outcome {
    let cfg = ModelConfig { size: Size::Small, ..ModelConfig::default() };
    let with = Model::<f32>::build(&cfg, 11).map_err(|e| e.to_string())?;
    let without = Model::<f32>::build(&ModelConfig { aux: false, ..cfg }, 11).map_err(|e| e.to_string())?;
    let x = Tensor::from_fn([2, 3, 128, 128], |i| ((i * 17) % 101) as f32 / 101.0);
    let a = with.forward(&x, Mode::Eval).map_err(|e| e.to_string())?;
    let b = without.forward(&x, Mode::Eval).map_err(|e| e.to_string())?;
    let same = |p: &Option<weedsense::tensor::Var<f32>>, q: &Option<weedsense::tensor::Var<f32>>| {
        let bits = |v: &weedsense::tensor::Var<f32>| v.value().data().iter().map(|f| f.to_bits()).collect::<Vec<_>>();
        bits(p.as_ref().unwrap()) == bits(q.as_ref().unwrap())
    };
    require(
        same(&a.seg, &b.seg) && same(&a.height, &b.height) && same(&a.week, &b.week),
        format!(
            "seg, height and week outputs bitwise equal with aux on ({} params) and off ({} params)",
            with.num_params(),
            without.num_params()
        ),
    )
}

fn naive_seg(pred: &[usize], gt: &[usize], k: usize) -> [f64; 3] {
    let (mut iou, mut f1, mut n) = (0.0, 0.0, 0.0);
    for c in 0..k {
        let inter = (0..gt.len()).filter(|&i| pred[i] == c && gt[i] == c).count() as f64;
        let p = pred.iter().filter(|&&v| v == c).count() as f64;
        let g = gt.iter().filter(|&&v| v == c).count() as f64;
        if p + g > 0.0 {
            iou += inter / (p + g - inter);
            f1 += 2.0 * inter / (p + g);
            n += 1.0;
        }
    }
    let acc = (0..gt.len()).filter(|&i| pred[i] == gt[i]).count() as f64 / gt.len() as f64;
    [iou / n, f1 / n, acc]
}

fn naive_week(pred: &[usize], gt: &[usize], k: usize) -> [f64; 2] {
    let acc = (0..gt.len()).filter(|&i| pred[i] == gt[i]).count() as f64 / gt.len() as f64;
    let (mut f1, mut n) = (0.0, 0.0);
    for c in (0..k).filter(|c| gt.contains(c)) {
        let tp = (0..gt.len()).filter(|&i| pred[i] == c && gt[i] == c).count() as f64;
        let p = pred.iter().filter(|&&v| v == c).count() as f64;
        let g = gt.iter().filter(|&&v| v == c).count() as f64;
        f1 += 2.0 * tp / (p + g);
        n += 1.0;
    }
    [acc, f1 / n]
}

fn naive_regression(pred: &[f64], gt: &[f64]) -> Vec<f64> {
    let n = gt.len() as f64;
    let err: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| p - g).collect();
    let mean = gt.iter().sum::<f64>() / n;
    let ss_tot: f64 = gt.iter().map(|g| (g - mean) * (g - mean)).sum();
    let sse: f64 = err.iter().map(|e| e * e).sum();
    let frac = |t: f64| err.iter().filter(|e| e.abs() <= t).count() as f64 / n;
    vec![
        err.iter().map(|e| e.abs()).sum::<f64>() / n,
        (sse / n).sqrt(),
        1.0 - sse / ss_tot,
        err.iter().fold(0.0f64, |m, e| m.max(e.abs())),
        frac(1.0),
        frac(2.0),
        frac(5.0),
    ]
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    let tol = 1e-10;
    for _ in 0..200 {
        let n = rng.gen_range(1..80);
        let labels = |rng: &mut ChaCha8Rng, k: usize| (0..n).map(|_| rng.gen_range(0..k)).collect::<Vec<_>>();
        let (p, g) = (labels(&mut rng, 6), labels(&mut rng, 6));
        let m = evaluate_segmentation(&p, &g, 6).map_err(|e| e.to_string())?;
        let o = naive_seg(&p, &g, 6);
        for (a, b) in [m.miou, m.mf1, m.pixel_accuracy].iter().zip(o) {
            worst = worst.max((a - b).abs());
        }
        let (p, g) = (labels(&mut rng, 11), labels(&mut rng, 11));
        let m = evaluate_labels(&p, &g, 11).map_err(|e| e.to_string())?;
        let o = naive_week(&p, &g, 11);
        worst = worst.max((m.accuracy - o[0]).abs()).max((m.macro_f1 - o[1]).abs());
        let gt: Vec<f64> = (0..n.max(2)).map(|_| rng.gen_range(0.0..150.0)).collect();
        let pred: Vec<f64> = gt.iter().map(|g| g + (rng.gen_range(-24i32..=24) as f64) / 4.0).collect();
        let m = evaluate_regression(&pred, &gt).map_err(|e| e.to_string())?;
        let o = naive_regression(&pred, &gt);
        let got = [m.mae_cm, m.rmse_cm, m.r2.unwrap_or(f64::NAN), m.max_error_cm, m.within_1cm, m.within_2cm, m.within_5cm];
        for (a, b) in got.iter().zip(&o) {
            worst = worst.max((a - b).abs());
        }
    }
    // hand-worked examples
    let seg = evaluate_segmentation(&[0, 1, 1, 1], &[0, 0, 1, 1], 2).map_err(|e| e.to_string())?;
    let reg = evaluate_regression(&[12.0, 22.0, 32.0], &[10.0, 20.0, 30.0]).map_err(|e| e.to_string())?;
    let r2 = evaluate_regression(&[5.0, 5.0], &[0.0, 10.0]).map_err(|e| e.to_string())?;
    let wk = evaluate_labels(&[0, 1, 1], &[0, 0, 1], 11).map_err(|e| e.to_string())?;
    let hand = (seg.miou - 7.0 / 12.0).abs() < 1e-15
        && (reg.mae_cm, reg.rmse_cm, reg.within_1cm, reg.within_2cm) == (2.0, 2.0, 0.0, 1.0)
        && r2.r2 == Some(0.0)
        && (wk.accuracy - 2.0 / 3.0).abs() < 1e-15
        && (wk.macro_f1 - 2.0 / 3.0).abs() < 1e-15;
    require(
        worst <= tol && hand,
        format!("200 random instances per metric family, max deviation {worst:.1e} (≤1e-10); hand-worked examples {}", if hand { "exact" } else { "WRONG" }),
    )
}

fn schedule_endpoints() -> Outcome {
    let s = ScheduleSpec { total_iters: 30_000, ..ScheduleSpec::default() };
    let monotone = (1500..s.total_iters).all(|i| s.lr_at(i + 1) <= s.lr_at(i));
    let step = s.base_lr * (1.0 - s.warmup_start_factor) / s.warmup_iters as f64;
    // the warmup line extended to the junction must land on the cosine start
    let jump = (s.lr_at(1499) + step - s.lr_at(1500)).abs();
    let ok = (s.lr_at(0) - 2e-5).abs() < 1e-15
        && (s.lr_at(1500) - 2e-4).abs() < 1e-15
        && monotone
        && s.lr_at(s.total_iters) == s.min_lr
        && jump < 1e-12;
    require(
        ok,
        format!(
            "lr(0) {:.3e}, lr(1500) {:.3e}, lr({}) {:.1e} = min, non-increasing after warmup: {monotone}, junction gap {jump:.1e}",
            s.lr_at(0),
            s.lr_at(1500),
            s.total_iters,
            s.lr_at(s.total_iters)
        ),
    )
}

fn train_log(path: &Path) -> Result<Vec<f64>, String> {
    let mut r = csv::Reader::from_path(path).map_err(|e| e.to_string())?;
    r.records()
        .map(|rec| {
            let rec = rec.map_err(|e| e.to_string())?;
            rec[2].parse::<f64>().map_err(|e| e.to_string())
        })
        .collect()
}

fn overfit_smoke(work: &Path) -> Outcome {
    let t = Instant::now();
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let data = s(&work.join("smoke_data"));
    cli(&["synth", "--n", "8", "--out", &data])?;
    let manifest = s(&work.join("smoke_data/manifest.json"));
    let run = s(&work.join("smoke_run"));
    cli(&[
        "train", "--manifest", &manifest, "--size", "small", "--height-scale", "50", "--epochs", "150", "--batch", "4", "--lr", "2e-3", "--warmup",
        "20", "--bn-freeze", "75", "--out", &run,
    ])?;
    let losses = train_log(&work.join("smoke_run/train_log.csv"))?;
    let window = 10;
    let initial = losses[0];
    let last: f64 = losses[losses.len() - window..].iter().sum::<f64>() / window as f64;
    let ckpt = s(&work.join("smoke_run/checkpoint.bin"));
    let v = cli_json(&["eval", "--checkpoint", &ckpt, "--manifest", &manifest, "--json"])?;
    let m = &v[0]["metrics"];
    let acc = m["seg"]["pixel_accuracy"].as_f64().ok_or("no pixel accuracy")?;
    let mae = m["height"]["mae_cm"].as_f64().ok_or("no MAE")?;
    let week = m["week"]["accuracy"].as_f64().ok_or("no week accuracy")?;
    let secs = t.elapsed().as_secs_f64();
    require(
        losses.len() == 300 && last < 0.3 * initial && acc >= 0.95 && mae <= 1.0 && week == 1.0,
        format!(
            "{} iterations, loss {initial:.2} -> {last:.3} (moving average of {window}, need <0.3x), pixel accuracy {:.2}% (≥95), height MAE {mae:.3} cm (≤1.0), week accuracy {:.1}% (=100); {secs:.0}s",
            losses.len(),
            100.0 * acc,
            100.0 * week
        ),
    )
}

fn multitask_efficiency() -> Outcome {
    let cfg = ModelConfig::default();
    let multi = count_parameters(&cfg).map_err(|e| e.to_string())?.total_params as f64;
    let mut singles = 0.0;
    for task in [Task::Seg, Task::Height, Task::Week] {
        let net = Network::new(&cfg.single_task(task)).map_err(|e| e.to_string())?;
        singles += net.specs().total() as f64;
    }
    let reduction = 1.0 - multi / singles;
    let v = cli_json(&["bench", "--input-size", "256", "--warmup", "2", "--repeats", "15"])?;
    let ratio = v["ratio"].as_f64().ok_or("no ratio")?;
    let mt = v["multi_task"]["median_ms"].as_f64().unwrap_or(f64::NAN);
    let st = v["single_task_sum_ms"].as_f64().unwrap_or(f64::NAN);
    require(
        reduction >= 0.25 && ratio <= 0.6,
        format!(
            "parameters {:.2}M vs {:.2}M for three single-task builds ({:.1}% fewer, need ≥25%); latency {mt:.1} ms vs {st:.1} ms (ratio {ratio:.3}, need ≤0.6)",
            multi / 1e6,
            singles / 1e6,
            100.0 * reduction
        ),
    )
}

fn determinism(work: &Path) -> Outcome {
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let manifest = s(&work.join("smoke_data/manifest.json"));
    let mut logs = Vec::new();
    for run in ["det_a", "det_b"] {
        let out = s(&work.join(run));
        cli(&["train", "--manifest", &manifest, "--width-divisor", "8", "--epochs", "26", "--batch", "4", "--seed", "5", "--out", &out])?;
        logs.push(std::fs::read(work.join(run).join("train_log.csv")).map_err(|e| e.to_string())?);
    }
    let rows = String::from_utf8_lossy(&logs[0]).lines().count() - 1;
    require(
        rows >= 50 && logs[0] == logs[1],
        format!("two runs with seed 5: {rows} iterations, loss CSVs {}", if logs[0] == logs[1] { "byte-identical" } else { "DIFFER" }),
    )
}

fn gradcam_sanity(work: &Path) -> Outcome {
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let ckpt = s(&work.join("smoke_run/checkpoint.bin"));
    let out = s(&work.join("cam"));
    let v = cli_json(&["gradcam", "--checkpoint", &ckpt, "--out", &out])?;
    let tasks = v["tasks"].as_array().ok_or("no tasks")?;
    let mut share = f64::NAN;
    let mut ranges_ok = tasks.len() == 3;
    for t in tasks {
        let (lo, hi) = (t["min"].as_f64().unwrap_or(-1.0), t["max"].as_f64().unwrap_or(2.0));
        let shape: Vec<u64> = t["shape"].as_array().map(|a| a.iter().filter_map(Value::as_u64).collect()).unwrap_or_default();
        ranges_ok &= lo >= 0.0 && hi <= 1.0 && shape == [1, 1, 16, 16];
        if t["task"] == "height" {
            share = t["top_half_share"].as_f64().unwrap_or(f64::NAN);
        }
    }
    require(
        share > 0.5 && ranges_ok,
        format!(
            "trained smoke model on sample {}: height heatmap top-half share {share:.3} (>0.5), all maps in [0,1] at 16x16: {ranges_ok}",
            v["sample"].as_str().unwrap_or("?")
        ),
    )
}

fn main() {
    let work = tempfile::tempdir().expect("temp dir");
    let w = work.path();
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("parameter accounting", Box::new(parameter_accounting)),
        ("FLOP accounting", Box::new(flop_accounting)),
        ("gradient correctness", Box::new(gradient_correctness)),
        ("shape contract", Box::new(shape_contract)),
        ("aux invariance", Box::new(aux_invariance)),
        ("metric oracles", Box::new(metric_oracles)),
        ("schedule endpoints", Box::new(schedule_endpoints)),
        ("overfit smoke", Box::new(|| overfit_smoke(w))),
        ("multitask efficiency", Box::new(multitask_efficiency)),
        ("determinism", Box::new(|| determinism(w))),
        ("Grad-CAM sanity", Box::new(|| gradcam_sanity(w))),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let (tag, detail) = match f() {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("{tag} {:>2} {name}: {detail}", i + 1);
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
