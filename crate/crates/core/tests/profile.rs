//! The closed-form profile against the materialized network and the runtime MAC counter.

use weedsense::profile::{count_flops, count_parameters};
use weedsense::tensor::{count_macs, Mode, Tensor};
use weedsense::{Model, ModelConfig, Network, Size, Tasks, UibKernels};

fn grid() -> Vec<ModelConfig> {
    let mut out = Vec::new();
    for size in Size::ALL {
        for kernels in UibKernels::GRID {
            for use_se in [false, true] {
                out.push(ModelConfig {
                    size,
                    kernels,
                    use_se,
                    ..ModelConfig::default()
                });
            }
        }
    }
    out
}

#[test]
fn closed_form_parameters_equal_layer_specs_on_the_whole_grid() {
    let mut configs = grid();
    for c in [64, 256] {
        configs.push(ModelConfig {
            agg_channels: Some(c),
            ..ModelConfig::default()
        });
    }
    configs.push(ModelConfig {
        aux: false,
        ..ModelConfig::default()
    });
    for t in ["seg", "height", "week", "height,week"] {
        configs.push(ModelConfig {
            tasks: t.parse::<Tasks>().unwrap(),
            ..ModelConfig::default()
        });
    }
    for cfg in configs {
        let closed = count_parameters(&cfg).unwrap().total_params;
        let built = Network::new(&cfg).unwrap().specs().total();
        assert_eq!(closed, built, "{}", cfg.label());
    }
}

#[test]
fn materialized_headline_model_matches() {
    let cfg = ModelConfig::default();
    let m = Model::<f32>::build(&cfg, 0).unwrap();
    assert_eq!(m.num_params(), count_parameters(&cfg).unwrap().total_params);
}

#[test]
fn runtime_macs_equal_closed_form() {
    let x = Tensor::from_fn([1, 3, 64, 64], |i| (i % 11) as f32 / 11.0);
    let x2 = Tensor::from_fn([2, 3, 64, 64], |i| (i % 13) as f32 / 13.0);
    let mut configs: Vec<ModelConfig> = Size::ALL
        .into_iter()
        .map(|size| ModelConfig {
            size,
            ..ModelConfig::default()
        })
        .collect();
    configs.push(ModelConfig {
        kernels: "s5m3e5".parse().unwrap(),
        use_se: false,
        agg_channels: Some(256),
        ..ModelConfig::default()
    });
    for cfg in configs {
        let m = Model::<f32>::build(&cfg, 0).unwrap();
        let (out, macs) = count_macs(|| m.forward(&x, Mode::Eval).unwrap());
        drop(out);
        let r = count_flops(&cfg, 64, 64).unwrap();
        assert_eq!(macs, r.total_flops, "{}", cfg.label());
        // train-mode batch norm needs more than one value per channel
        let (_, train_macs) = count_macs(|| m.forward(&x2, Mode::Train).unwrap());
        assert_eq!(train_macs, 2 * (r.total_flops + r.aux_train_flops), "{}", cfg.label());
    }
}

#[test]
fn se_adds_parameters_but_almost_no_flops() {
    let on = count_flops(&ModelConfig::default(), 512, 512).unwrap();
    let off = count_flops(
        &ModelConfig {
            use_se: false,
            ..ModelConfig::default()
        },
        512,
        512,
    )
    .unwrap();
    assert!(on.total_params > off.total_params);
    let rel = (on.total_flops - off.total_flops) as f64 / off.total_flops as f64;
    assert!(rel < 0.005, "{rel}");
}

#[test]
fn flops_grow_with_input_area() {
    let cfg = ModelConfig::default();
    let a = count_flops(&cfg, 256, 256).unwrap().total_flops as f64;
    let b = count_flops(&cfg, 512, 512).unwrap().total_flops as f64;
    // all convolutions scale with area; only the pooled decoder does not
    assert!((b / a - 4.0).abs() < 0.01, "{}", b / a);
}

#[test]
fn report_keys_are_stable() {
    let v = serde_json::to_value(count_parameters(&ModelConfig::default()).unwrap()).unwrap();
    for k in ["total_params", "total_flops", "convention", "per_module"] {
        assert!(v.get(k).is_some(), "missing {k}");
    }
}
