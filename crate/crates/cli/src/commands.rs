use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use weedsense::bench::{bench, BenchOptions};
use weedsense::check::{full_model_check, primitive_suite, tiny_config, CheckResult};
use weedsense::data::{load_manifest, split_dataset, synthesize_n, tall_plant, write_dataset, Manifest, Normalization, Sample, Split, SynthSpec};
use weedsense::gradcam::{grad_cam, top_half_share};
use weedsense::metrics::MetricsReport;
use weedsense::profile::{count_flops, ProfileReport};
use weedsense::train::{evaluate, Checkpoint, ClassWeighting, LogWriter, TrainConfig, Trainer};
use weedsense::tensor::Tensor;
use weedsense::{Error, Model, ModelConfig, Result, Size, Task, UibKernels};

use crate::args::{BenchArgs, Common, DescribeArgs, EvalArgs, GradcamArgs, GradcheckArgs, SynthArgs, TrainArgs};

/// Optional sections of a `--config` file.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub model: Option<ModelConfig>,
    pub train: Option<TrainConfig>,
    pub synth: Option<SynthSpec>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<FileConfig> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }
}

/// Resolved inputs of a run, written as `provenance.json` beside its outputs.
#[derive(Debug, Serialize)]
struct Provenance<'a> {
    command: &'a str,
    version: &'a str,
    argv: Vec<String>,
    seed: u64,
    model: Option<&'a ModelConfig>,
    train: Option<&'a TrainConfig>,
    extra: Value,
}

struct Run<'a> {
    common: &'a Common,
    file: FileConfig,
}

impl Run<'_> {
    fn out_dir(&self, default: Option<&str>) -> Result<Option<PathBuf>> {
        let dir = self.common.out.clone().or_else(|| default.map(PathBuf::from));
        if let Some(d) = &dir {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        Ok(dir)
    }

    fn provenance(&self, dir: &Path, command: &str, model: Option<&ModelConfig>, train: Option<&TrainConfig>, extra: Value) -> Result<()> {
        let p = Provenance {
            command,
            version: env!("CARGO_PKG_VERSION"),
            argv: std::env::args().skip(1).collect(),
            seed: self.common.seed,
            model,
            train,
            extra,
        };
        write_json(&dir.join("provenance.json"), &p)
    }

    fn model_config(&self, args: &crate::args::ModelArgs) -> ModelConfig {
        args.apply(self.file.model.clone().unwrap_or_default())
    }
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn print_json<T: Serialize + ?Sized>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?);
    Ok(())
}

pub fn dispatch(common: &Common, command: &crate::args::Command) -> Result<()> {
    use crate::args::Command::*;
    let run = Run {
        common,
        file: FileConfig::load(common.config.as_deref())?,
    };
    match command {
        Describe(a) => describe(&run, a),
        Synth(a) => synth(&run, a),
        Train(a) => train(&run, a),
        Eval(a) => eval(&run, a),
        Gradcheck(a) => gradcheck(&run, a),
        Bench(a) => bench_cmd(&run, a),
        Gradcam(a) => gradcam(&run, a),
    }
}

#[derive(Debug, Serialize)]
struct SweepRow {
    group: &'static str,
    label: String,
    params_m: f64,
    gflops: f64,
    report: ProfileReport,
}

/// Rows of the ablation table: kernels (no SE), SE, aggregation widths, aux heads, sizes.
fn sweep_grid(base: &ModelConfig) -> Vec<(&'static str, String, ModelConfig)> {
    let headline = ModelConfig {
        size: Size::Medium,
        kernels: UibKernels::default(),
        use_se: true,
        agg_channels: None,
        aux: true,
        ..base.clone()
    };
    let no_se = ModelConfig {
        use_se: false,
        ..headline.clone()
    };
    let mut rows = Vec::new();
    for k in UibKernels::GRID {
        rows.push(("kernel", k.to_string(), ModelConfig { kernels: k, ..no_se.clone() }));
    }
    rows.push(("se", "no-se".into(), no_se.clone()));
    rows.push(("se", "se".into(), headline.clone()));
    for c in [64, 128, 256] {
        for se in [false, true] {
            let label = format!("c{c}-{}", if se { "se" } else { "no-se" });
            rows.push((
                "channels",
                label,
                ModelConfig {
                    agg_channels: Some(c),
                    use_se: se,
                    ..headline.clone()
                },
            ));
        }
    }
    rows.push(("aux", "no-aux".into(), ModelConfig { aux: false, ..headline.clone() }));
    rows.push(("aux", "aux".into(), headline.clone()));
    for s in Size::ALL {
        rows.push(("size", s.to_string(), ModelConfig { size: s, ..headline.clone() }));
    }
    rows
}

fn describe(run: &Run, a: &DescribeArgs) -> Result<()> {
    let cfg = run.model_config(&a.model);
    let n = a.input_size;
    let value = if a.sweep {
        let rows = sweep_grid(&cfg)
            .into_iter()
            .map(|(group, label, c)| {
                let report = count_flops(&c, n, n)?;
                Ok(SweepRow {
                    group,
                    label,
                    params_m: report.params_millions(),
                    gflops: report.gflops(),
                    report,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        serde_json::to_value(rows)
    } else {
        serde_json::to_value(count_flops(&cfg, n, n)?)
    }
    .map_err(|e| Error::Format(e.to_string()))?;
    print_json(&value)?;
    if let Some(dir) = run.out_dir(None)? {
        write_json(&dir.join("profile.json"), &value)?;
        run.provenance(&dir, "describe", Some(&cfg), None, json!({"input_size": n, "sweep": a.sweep}))?;
    }
    Ok(())
}

fn synth(run: &Run, a: &SynthArgs) -> Result<()> {
    let dir = run.out_dir(None)?.ok_or_else(|| Error::config("synth needs --out"))?;
    let mut spec = run.file.synth.clone().unwrap_or_default();
    if let Some(s) = a.input_size {
        spec.px_per_cm *= s as f64 / spec.image_size.0 as f64;
        spec.image_size = (s, s);
    }
    if let Some(p) = a.px_per_cm {
        spec.px_per_cm = p;
    }
    spec.seed = run.common.seed;
    let samples = synthesize_n(&spec, a.n)?;
    let all_train = vec![Split::Train; samples.len()];
    let manifest = write_dataset(&dir, &samples, &all_train)?;
    let fractions = a.split;
    let manifest = split_dataset(&manifest, fractions, run.common.seed)?;
    manifest.save(&dir.join("manifest.json"))?;
    let counts: Vec<_> = manifest.counts().into_iter().map(|(s, n)| format!("{}={n}", s.name())).collect();
    println!("wrote {} samples to {} ({})", samples.len(), dir.display(), counts.join(" "));
    run.provenance(&dir, "synth", None, None, json!({"synth": spec, "split": fractions}))
}

fn train(run: &Run, a: &TrainArgs) -> Result<()> {
    let dir = run.out_dir(Some("runs/train"))?.expect("default out dir");
    let manifest = load_manifest(&a.manifest)?;
    let data = manifest.load_split(Split::Train)?;
    if data.is_empty() {
        return Err(Error::config(format!("{} has no train split entries", a.manifest.display())));
    }
    let mut trainer = match &a.resume {
        Some(path) => {
            if a.model.apply(ModelConfig::default()) != ModelConfig::default() {
                return Err(Error::config("--resume takes the model from the checkpoint; drop the model flags"));
            }
            Trainer::from_checkpoint(Checkpoint::load(path)?)?
        }
        None => {
            let model_cfg = run.model_config(&a.model);
            let mut tc = run.file.train.clone().unwrap_or_default();
            tc.seed = run.common.seed;
            if let Some(e) = a.epochs {
                tc.epochs = e;
            }
            if let Some(b) = a.batch {
                tc.batch_size = b;
            }
            if let Some(lr) = a.lr {
                tc.base_lr = lr;
            }
            if let Some(w) = a.warmup {
                tc.warmup_iters = w;
            }
            if a.uniform_weights {
                tc.class_weighting = ClassWeighting::Uniform;
            }
            if let Some(k) = a.bn_freeze {
                tc.bn_freeze_iters = k;
            }
            if a.augment {
                let mut aug = tc.augment.clone().unwrap_or_default();
                if let Some(s) = a.input_size {
                    aug.target_size = (s, s);
                }
                tc.augment = Some(aug);
            }
            Trainer::new(Model::build(&model_cfg, run.common.seed)?, tc)?
        }
    };
    let total = trainer.config.total_iters(data.len());
    let end = a.max_iters.map_or(total, |m| m.min(total));
    eprintln!(
        "training {} on {} samples: iterations {}..{end} of {total}",
        trainer.model.config().label(),
        data.len(),
        trainer.iter
    );
    let mut log = LogWriter::create(&dir.join("train_log.csv"))?;
    let records = trainer.run(&data, Some(end), |r| log.write(r))?;
    let ckpt_path = dir.join("checkpoint.bin");
    trainer.checkpoint().save(&ckpt_path)?;
    if let (Some(first), Some(last)) = (records.first(), records.last()) {
        println!(
            "iterations {}..{}: loss {:.4} -> {:.4}; checkpoint {}",
            first.iter,
            last.iter + 1,
            first.loss.total,
            last.loss.total,
            ckpt_path.display()
        );
    } else {
        println!("nothing to do: checkpoint already at iteration {}", trainer.iter);
    }
    let extra = json!({"manifest": a.manifest, "resume": a.resume, "max_iters": a.max_iters});
    run.provenance(&dir, "train", Some(trainer.model.config()), Some(&trainer.config), extra)
}

#[derive(Debug, Serialize)]
struct SplitReport {
    split: String,
    metrics: MetricsReport,
}

fn pct(v: Option<f64>) -> String {
    v.map_or("-".into(), |v| format!("{:.2}", 100.0 * v))
}

fn num(v: Option<f64>) -> String {
    v.map_or("-".into(), |v| format!("{v:.3}"))
}

fn table(rows: &[SplitReport]) -> String {
    let mut s = format!(
        "{:<6} {:>7} | {:>8} {:>8} {:>8} | {:>8} {:>8} {:>7} | {:>8} {:>8}\n",
        "split", "samples", "mIoU%", "mF1%", "pixAcc%", "MAE cm", "RMSE cm", "R2", "week%", "weekF1%"
    );
    for r in rows {
        let m = &r.metrics;
        s += &format!(
            "{:<6} {:>7} | {:>8} {:>8} {:>8} | {:>8} {:>8} {:>7} | {:>8} {:>8}\n",
            r.split,
            m.samples,
            pct(m.seg.as_ref().map(|x| x.miou)),
            pct(m.seg.as_ref().map(|x| x.mf1)),
            pct(m.seg.as_ref().map(|x| x.pixel_accuracy)),
            num(m.height.as_ref().map(|x| x.mae_cm)),
            num(m.height.as_ref().map(|x| x.rmse_cm)),
            num(m.height.as_ref().and_then(|x| x.r2)),
            pct(m.week.as_ref().map(|x| x.accuracy)),
            pct(m.week.as_ref().map(|x| x.macro_f1)),
        );
    }
    s
}

fn eval(run: &Run, a: &EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let norm = ckpt.train.as_ref().map_or(Normalization::IMAGENET, |t| t.normalization);
    let model = ckpt.into_model()?;
    let manifest = load_manifest(&a.manifest)?;
    let splits: Vec<Split> = match a.split {
        Some(s) => vec![s],
        None => [Split::Train, Split::Val, Split::Test]
            .into_iter()
            .filter(|s| manifest.entries_in(*s).next().is_some())
            .collect(),
    };
    let mut rows = Vec::new();
    for s in splits {
        let samples = manifest.load_split(s)?;
        if samples.is_empty() {
            return Err(Error::config(format!("split {} is empty", s.name())));
        }
        rows.push(SplitReport {
            split: s.name().to_string(),
            metrics: evaluate(&model, &samples, &norm)?,
        });
    }
    if a.json {
        print_json(&rows)?;
    } else {
        print!("{}", table(&rows));
    }
    if let Some(dir) = run.out_dir(None)? {
        write_json(&dir.join("metrics.json"), &rows)?;
        let extra = json!({"checkpoint": a.checkpoint, "manifest": a.manifest});
        run.provenance(&dir, "eval", Some(model.config()), None, extra)?;
    }
    Ok(())
}

fn gradcheck(run: &Run, a: &GradcheckArgs) -> Result<()> {
    let mut results = primitive_suite()?;
    if a.tiny {
        results.push(full_model_check(&tiny_config(), 64, a.batch, a.coords, run.common.seed)?);
    }
    for r in &results {
        println!(
            "{} {:<28} checked {:>4}  max rel error {:.2e}  (tolerance {:.0e})",
            if r.passed() { "ok  " } else { "FAIL" },
            r.name,
            r.report.checked,
            r.report.max_rel_error,
            r.tolerance
        );
    }
    if let Some(dir) = run.out_dir(None)? {
        let rows: Vec<Value> = results.iter().map(check_json).collect();
        write_json(&dir.join("gradcheck.json"), &rows)?;
        run.provenance(&dir, "gradcheck", None, None, json!({"tiny": a.tiny, "coords": a.coords, "batch": a.batch}))?;
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            what: "gradient mismatch".into(),
            detail: failed.join(", "),
        })
    }
}

fn check_json(r: &CheckResult) -> Value {
    json!({
        "name": r.name,
        "passed": r.passed(),
        "checked": r.report.checked,
        "max_rel_error": r.report.max_rel_error,
        "tolerance": r.tolerance,
    })
}

fn bench_cmd(run: &Run, a: &BenchArgs) -> Result<()> {
    let cfg = run.model_config(&a.model);
    let opts = BenchOptions {
        input: (a.input_size, a.input_size),
        batch: a.batch,
        warmup: a.warmup,
        repeats: a.repeats,
        seed: run.common.seed,
    };
    let report = bench(&cfg, &opts)?;
    print_json(&report)?;
    if let Some(dir) = run.out_dir(None)? {
        write_json(&dir.join("bench.json"), &report)?;
        run.provenance(&dir, "bench", Some(&cfg), None, json!({"options": opts}))?;
    }
    Ok(())
}

fn gradcam_input(run: &Run, a: &GradcamArgs, norm: &Normalization) -> Result<(Sample, Tensor<f32>)> {
    let sample = match (&a.manifest, &a.sample) {
        (Some(m), Some(id)) => {
            let manifest: Manifest = load_manifest(m)?;
            let e = manifest
                .entries
                .iter()
                .find(|e| &e.id == id)
                .ok_or_else(|| Error::config(format!("sample {id} not in {}", m.display())))?;
            manifest.load_sample(e)?
        }
        _ => {
            let n = a.input_size;
            let spec = SynthSpec {
                image_size: (n, n),
                px_per_cm: SynthSpec::default().px_per_cm * n as f64 / 128.0,
                seed: run.common.seed,
                ..SynthSpec::default()
            };
            tall_plant(&spec, a.species, 0.9)?
        }
    };
    let (h, w) = sample.hw();
    let x = norm.normalize(&sample.image)?.reshape([1, 3, h, w])?;
    Ok((sample, x))
}

fn gradcam(run: &Run, a: &GradcamArgs) -> Result<()> {
    let dir = run.out_dir(None)?.ok_or_else(|| Error::config("gradcam needs --out"))?;
    let (model, norm) = match &a.checkpoint {
        Some(p) => {
            let ckpt = Checkpoint::load(p)?;
            let norm = ckpt.train.as_ref().map_or(Normalization::IMAGENET, |t| t.normalization);
            (ckpt.into_model()?, norm)
        }
        None => (Model::build(&run.model_config(&a.model), run.common.seed)?, Normalization::IMAGENET),
    };
    let (sample, x) = gradcam_input(run, a, &norm)?;
    let mut tasks = Vec::new();
    for task in Task::ALL.into_iter().filter(|t| model.config().tasks.has(*t)) {
        let heat = grad_cam(&model, &x, task)?;
        let file = format!("heatmap_{task}.png");
        heat.save_png(&dir.join(&file))?;
        tasks.push(json!({
            "task": task.name(),
            "file": file,
            "shape": heat.map.shape(),
            "target": heat.target,
            "degenerate": heat.degenerate,
            "top_half_share": top_half_share(&heat.map),
            "min": heat.map.data().iter().copied().fold(f32::INFINITY, f32::min),
            "max": heat.map.data().iter().copied().fold(f32::NEG_INFINITY, f32::max),
        }));
    }
    let summary = json!({"sample": sample.id, "height_cm": sample.height_cm, "tasks": tasks});
    print_json(&summary)?;
    write_json(&dir.join("gradcam.json"), &summary)?;
    run.provenance(&dir, "gradcam", Some(model.config()), None, json!({"checkpoint": a.checkpoint, "manifest": a.manifest, "sample": a.sample}))
}
