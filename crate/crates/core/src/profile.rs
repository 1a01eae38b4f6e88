//! Closed-form parameter and multiply-accumulate counts.
//!
//! These formulas are written from the architecture description alone and do not look
//! at built layers, so they can be checked against a materialized model and against
//! the runtime MAC counter.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::{Dims, ModelConfig, AUX_FACTORS, SEG_UPSCALE};
use crate::error::{Error, Result};

/// Counting convention of `total_flops`: one multiply-accumulate of a convolution,
/// linear map or matrix product counts as one operation.
pub const CONVENTION: &str = "MAC";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleCost {
    pub params: usize,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileReport {
    pub config: String,
    pub input_hw: [usize; 2],
    pub total_params: usize,
    /// Inference cost; auxiliary heads are excluded.
    pub total_flops: u64,
    pub convention: String,
    pub per_module: BTreeMap<String, ModuleCost>,
    /// Parameters of the training-only auxiliary heads (included in `total_params`).
    pub aux_params: usize,
    /// Training-time cost of the auxiliary heads (not included in `total_flops`).
    pub aux_train_flops: u64,
    pub notes: Vec<String>,
}

impl ProfileReport {
    pub fn params_millions(&self) -> f64 {
        self.total_params as f64 / 1e6
    }

    pub fn gflops(&self) -> f64 {
        self.total_flops as f64 / 1e9
    }
}

fn conv(cin: usize, cout: usize, k: usize, groups: usize, bias: bool) -> usize {
    cout * (cin / groups) * k * k + if bias { cout } else { 0 }
}

fn bn(c: usize) -> usize {
    2 * c
}

fn cbn(cin: usize, cout: usize, k: usize) -> usize {
    conv(cin, cout, k, 1, false) + bn(cout)
}

fn dwbn(c: usize, k: usize) -> usize {
    conv(c, c, k, c, false) + bn(c)
}

fn linear(din: usize, dout: usize, bias: bool) -> usize {
    din * dout + if bias { dout } else { 0 }
}

fn conv_macs(cin: usize, cout: usize, k: usize, groups: usize, hw: usize) -> u64 {
    (cout * (cin / groups) * k * k * hw) as u64
}

struct Acc {
    modules: BTreeMap<String, ModuleCost>,
}

impl Acc {
    fn add(&mut self, module: &str, params: usize, flops: u64) {
        let m = self.modules.entry(module.to_string()).or_default();
        m.params += params;
        m.flops += flops;
    }
}

fn uib(acc: &mut Acc, module: &str, cfg: &ModelConfig, cin: usize, cout: usize, e: usize, stride: usize, hw_in: usize) {
    let k = cfg.kernels;
    let hw_out = hw_in / (stride * stride);
    if k.start > 0 {
        acc.add(module, dwbn(cin, k.start), conv_macs(cin, cin, k.start, cin, hw_in));
    }
    acc.add(module, cbn(cin, e, 1), conv_macs(cin, e, 1, 1, hw_in));
    if k.mid > 0 {
        acc.add(module, dwbn(e, k.mid), conv_macs(e, e, k.mid, e, hw_out));
    }
    if cfg.use_se {
        let r = e / 4;
        acc.add(module, 2 * e * r, 2 * (e * r) as u64);
    }
    acc.add(module, cbn(e, cout, 1), conv_macs(e, cout, 1, 1, hw_out));
    if k.end > 0 {
        acc.add(module, dwbn(cout, k.end), conv_macs(cout, cout, k.end, cout, hw_out));
    }
    acc.add(module, cout, 0);
}

fn tally(cfg: &ModelConfig, dims: &Dims, h: usize, w: usize) -> Acc {
    let mut acc = Acc { modules: BTreeMap::new() };
    let res = |f: usize| (h / f) * (w / f);

    let [d1, d2, d3] = dims.detail;
    let mut detail = |cin: usize, cout: usize, f: usize| acc.add("detail", cbn(cin, cout, 3), conv_macs(cin, cout, 3, 1, res(f)));
    detail(3, d1, 2);
    detail(d1, d1, 2);
    detail(d1, d2, 4);
    detail(d2, d2, 4);
    detail(d2, d2, 4);
    detail(d2, d3, 8);
    detail(d3, d3, 8);
    detail(d3, d3, 8);

    let c = dims.semantic[0];
    acc.add("stem", cbn(3, c, 3), conv_macs(3, c, 3, 1, res(2)));
    acc.add("stem", cbn(c, c / 2, 1), conv_macs(c, c / 2, 1, 1, res(2)));
    acc.add("stem", cbn(c / 2, c, 3), conv_macs(c / 2, c, 3, 1, res(4)));
    acc.add("stem", cbn(2 * c, c, 3), conv_macs(2 * c, c, 3, 1, res(4)));

    let mut cin = c;
    for stage in 0..3 {
        let cout = dims.semantic[stage + 1];
        let module = format!("semantic_s{}", stage + 3);
        let f_in = 4 << stage;
        for b in 0..dims.blocks[stage] {
            let (ci, stride, hw) = if b == 0 { (cin, 2, res(f_in)) } else { (cout, 1, res(2 * f_in)) };
            uib(&mut acc, &module, cfg, ci, cout, ci * dims.expansion, stride, hw);
        }
        cin = cout;
    }

    let s5 = dims.semantic[3];
    acc.add("context", bn(s5) + cbn(s5, s5, 1) + cbn(s5, s5, 3), (s5 * s5) as u64 + conv_macs(s5, s5, 3, 1, res(32)));

    let (cc, a) = (d3, dims.agg);
    let (hd, hs) = (res(8), res(32));
    acc.add("aggregation", dwbn(cc, 3) + conv(cc, a, 1, 1, false), conv_macs(cc, cc, 3, cc, hd) + conv_macs(cc, a, 1, 1, hd));
    acc.add("aggregation", cbn(cc, a, 3), conv_macs(cc, a, 3, 1, res(16)));
    acc.add("aggregation", cbn(cc, a, 3), conv_macs(cc, a, 3, 1, hs));
    acc.add("aggregation", dwbn(cc, 3) + conv(cc, a, 1, 1, false), conv_macs(cc, cc, 3, cc, hs) + conv_macs(cc, a, 1, 1, hs));
    acc.add("aggregation", cbn(a, a, 3), conv_macs(a, a, 3, 1, hd));

    let k = cfg.num_classes;
    if cfg.tasks.seg {
        let m = dims.seg_mid;
        let out = k * SEG_UPSCALE * SEG_UPSCALE;
        acc.add("seg_head", cbn(a, m, 3) + conv(m, out, 1, 1, true), conv_macs(a, m, 3, 1, hd) + conv_macs(m, out, 1, 1, hd));
    }
    if cfg.aux_active() {
        for (i, &f) in AUX_FACTORS.iter().enumerate() {
            let (ci, hid) = (dims.semantic[i], dims.aux_hidden[i]);
            let out = k * f * f;
            acc.add("aux", cbn(ci, hid, 3) + conv(hid, out, 1, 1, true), conv_macs(ci, hid, 3, 1, res(f)) + conv_macs(hid, out, 1, 1, res(f)));
        }
    }
    if cfg.tasks.growth() {
        let (d, f) = (dims.embed, dims.ffn);
        let [t1, t2] = dims.trunk;
        let mut p = linear(a, d, true) + 4 * linear(d, d, false) + 2 * d + linear(d, f, true) + linear(f, d, true) + 2 * d;
        p += linear(d, t1, true) + linear(t1, t2, true) + 2 * t2;
        let mut macs = a * d + 4 * d * d + 2 * d + 2 * d * f + d * t1 + t1 * t2;
        if cfg.tasks.height {
            p += linear(t2, 1, true);
            macs += t2;
        }
        if cfg.tasks.week {
            p += linear(t2, cfg.num_weeks, true);
            macs += t2 * cfg.num_weeks;
        }
        acc.add("tgd", p, macs as u64);
    }
    acc
}

/// Parameters and inference MACs of `cfg` for one `h x w` image.
pub fn profile(cfg: &ModelConfig, h: usize, w: usize) -> Result<ProfileReport> {
    let dims = cfg.validate()?;
    if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
        return Err(Error::config(format!("input {h}x{w} must be a positive multiple of 32")));
    }
    let acc = tally(cfg, &dims, h, w);
    let aux = acc.modules.get("aux").copied().unwrap_or_default();
    let total_params = acc.modules.values().map(|m| m.params).sum();
    let total_flops = acc.modules.iter().filter(|(k, _)| *k != "aux").map(|(_, m)| m.flops).sum();
    let mut notes = vec!["flops exclude the auxiliary heads, which only run during training".to_string()];
    if cfg.aux_active() {
        notes.push(format!(
            "auxiliary heads hold {:.2}M of the {:.2}M parameters",
            aux.params as f64 / 1e6,
            total_params as f64 / 1e6
        ));
    }
    Ok(ProfileReport {
        config: cfg.label(),
        input_hw: [h, w],
        total_params,
        total_flops,
        convention: CONVENTION.to_string(),
        per_module: acc.modules,
        aux_params: aux.params,
        aux_train_flops: aux.flops,
        notes,
    })
}

/// Exact parameter count of `cfg`.
pub fn count_parameters(cfg: &ModelConfig) -> Result<ProfileReport> {
    profile(cfg, 512, 512)
}

pub fn count_flops(cfg: &ModelConfig, h: usize, w: usize) -> Result<ProfileReport> {
    profile(cfg, h, w)
}
