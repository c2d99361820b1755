//! Central finite-difference checks of every graph op and both models.

use super::rng;
use attnscope::models::{
    build_expertisenet, build_prostattformer, ExpertiseNetConfig, ExpertiseTensors, MapStack, ModelParams,
    ProstAttFormerConfig,
};
use attnscope::tensor::{mhsa, Graph, MhsaParams, Tensor, Var};
use attnscope::{FeatureGrid, GridSpec, Heatmap, Norm};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

const H: f64 = 1e-4;

type Build<'a> = &'a dyn Fn(&mut Graph, &[Var]) -> Var;

fn random_tensor(r: &mut ChaCha8Rng, dims: &[usize]) -> Tensor {
    let n = dims.iter().product();
    Tensor::param(dims.to_vec(), (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

fn eval(build: Build, inputs: &[Tensor]) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t)).collect();
    let out = build(&mut g, &vars);
    g.value(out)[0]
}

/// ‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖).
fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / na.max(nn).max(1e-12)
}

fn op_error(build: Build, inputs: &[Tensor]) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t)).collect();
    let out = build(&mut g, &vars);
    let grads = g.backward(out).unwrap();
    let analytic: Vec<f64> = vars.iter().flat_map(|v| grads.get(*v).unwrap().to_vec()).collect();
    let mut numeric = Vec::with_capacity(analytic.len());
    for (ti, t) in inputs.iter().enumerate() {
        for i in 0..t.len() {
            let mut p = inputs.to_vec();
            p[ti].data_mut()[i] += H;
            let up = eval(build, &p);
            p[ti].data_mut()[i] -= 2.0 * H;
            let down = eval(build, &p);
            numeric.push((up - down) / (2.0 * H));
        }
    }
    relative_error(&analytic, &numeric)
}

/// Reduces any output to a scalar with fixed random coefficients.
fn project(g: &mut Graph, out: Var, salt: u64) -> Var {
    let mut r = rng(0x5eed ^ salt);
    let c: Vec<f64> = (0..g.value(out).len()).map(|_| r.random_range(-1.0..1.0)).collect();
    g.dot_const(out, &c).unwrap()
}

struct Case {
    name: &'static str,
    elementwise: bool,
    shapes: Vec<Vec<usize>>,
    build: Box<dyn Fn(&mut Graph, &[Var]) -> Var>,
}

fn case(
    name: &'static str,
    elementwise: bool,
    shapes: &[&[usize]],
    build: impl Fn(&mut Graph, &[Var]) -> Var + 'static,
) -> Case {
    Case {
        name,
        elementwise,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        build: Box::new(build),
    }
}

fn op_cases() -> Vec<Case> {
    vec![
        case("gelu", true, &[&[3, 5]], |g, v| {
            let y = g.gelu(v[0]);
            project(g, y, 1)
        }),
        case("relu", true, &[&[3, 5]], |g, v| {
            let y = g.relu(v[0]);
            project(g, y, 2)
        }),
        case("add", true, &[&[4, 2], &[4, 2]], |g, v| {
            let y = g.add(v[0], v[1]).unwrap();
            project(g, y, 3)
        }),
        case("scale", true, &[&[4, 2]], |g, v| {
            let y = g.scale(v[0], -1.7);
            project(g, y, 4)
        }),
        case("linear", false, &[&[4, 3], &[3, 5], &[5]], |g, v| {
            let y = g.linear(v[0], v[1], v[2]).unwrap();
            project(g, y, 5)
        }),
        case("matmul", false, &[&[3, 4], &[4, 2]], |g, v| {
            let y = g.matmul(v[0], v[1]).unwrap();
            project(g, y, 6)
        }),
        case("matmul_bt", false, &[&[3, 4], &[5, 4]], |g, v| {
            let y = g.matmul_bt(v[0], v[1]).unwrap();
            project(g, y, 7)
        }),
        case("layer_norm", false, &[&[3, 6], &[6], &[6]], |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2]).unwrap();
            project(g, y, 8)
        }),
        case("softmax", false, &[&[3, 5]], |g, v| {
            let y = g.softmax(v[0]);
            project(g, y, 9)
        }),
        case("slice_cols+concat_cols", false, &[&[3, 6]], |g, v| {
            let a = g.slice_cols(v[0], 0, 2).unwrap();
            let b = g.slice_cols(v[0], 3, 3).unwrap();
            let y = g.concat_cols(&[b, a]).unwrap();
            project(g, y, 10)
        }),
        case("concat_rows+reshape", false, &[&[1, 2, 3], &[2, 2, 3]], |g, v| {
            let y = g.concat_rows(&[v[0], v[1]]).unwrap();
            let y = g.reshape(y, &[18]).unwrap();
            project(g, y, 11)
        }),
        case(
            "mhsa",
            false,
            &[&[4, 8], &[8, 8], &[8], &[8, 8], &[8], &[8, 8], &[8], &[8, 8], &[8]],
            |g, v| {
                let p = MhsaParams {
                    wq: v[1],
                    bq: v[2],
                    wk: v[3],
                    bk: v[4],
                    wv: v[5],
                    bv: v[6],
                    wo: v[7],
                    bo: v[8],
                };
                let y = mhsa(g, v[0], &p, 2).unwrap();
                project(g, y, 12)
            },
        ),
        case("conv1x1", false, &[&[3, 4, 5], &[3, 2], &[2]], |g, v| {
            let y = g.conv1x1(v[0], v[1], v[2]).unwrap();
            project(g, y, 13)
        }),
        case("avg_pool2d", false, &[&[2, 7, 6]], |g, v| {
            let y = g.avg_pool2d(v[0], 3, 2).unwrap();
            project(g, y, 14)
        }),
        case("adaptive_avg_pool", false, &[&[2, 7, 5]], |g, v| {
            let y = g.adaptive_avg_pool(v[0], 3, 4).unwrap();
            project(g, y, 15)
        }),
        case("weighted_ce_loss", false, &[&[4, 3]], |g, v| {
            g.weighted_ce_loss(v[0], &[0, 2, 1, 2], &[0.5, 1.0, 2.0]).unwrap()
        }),
        case("cc_loss", false, &[&[5, 5]], |g, v| {
            let gt: Vec<f64> = (0..25).map(|i| ((i * 7) % 11) as f64 / 10.0).collect();
            g.cc_loss(v[0], &gt).unwrap()
        }),
        case("dot_const", false, &[&[2, 3]], |g, v| {
            g.dot_const(v[0], &[1.0, -2.0, 0.5, 3.0, 0.0, -1.0]).unwrap()
        }),
    ]
}

fn model_error(params: &ModelParams, loss: &dyn Fn(&ModelParams) -> (f64, BTreeMap<String, Vec<f64>>)) -> f64 {
    let (_, grads) = loss(params);
    let mut p = params.clone();
    let names: Vec<String> = params.names().map(String::from).collect();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for name in names {
        for i in 0..p.get(&name).unwrap().len() {
            let orig = p.get(&name).unwrap().data()[i];
            p.get_mut(&name).unwrap().data_mut()[i] = orig + H;
            let up = loss(&p).0;
            p.get_mut(&name).unwrap().data_mut()[i] = orig - H;
            let down = loss(&p).0;
            p.get_mut(&name).unwrap().data_mut()[i] = orig;
            analytic.push(grads[&name][i]);
            numeric.push((up - down) / (2.0 * H));
        }
    }
    relative_error(&analytic, &numeric)
}

fn jitter(params: &mut ModelParams, r: &mut ChaCha8Rng) {
    // moves biases and norm parameters off their constant init
    for (_, t) in params.iter_mut() {
        for v in t.data_mut() {
            *v += 0.3 * r.random_range(-1.0..1.0);
        }
    }
}

fn random_features(r: &mut ChaCha8Rng, h: usize, w: usize, d: usize) -> FeatureGrid {
    FeatureGrid::new(h, w, d, (0..h * w * d).map(|_| r.random_range(-1.0f32..1.0)).collect()).unwrap()
}

pub fn prostattformer_error(seed: u64) -> f64 {
    let mut r = rng(1000 + seed);
    let config = ProstAttFormerConfig {
        grid: GridSpec::new(4, 4),
        dim: 8,
        layers: 2,
        heads: 2,
        mlp_ratio: 4,
    };
    let mut params = config.init_params(seed).unwrap();
    jitter(&mut params, &mut r);
    let feats = random_features(&mut r, 4, 4, 8);
    let gt: Vec<f64> = (0..16).map(|_| r.random_range(0.0..1.0)).collect();
    model_error(&params, &|p| {
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let out = build_prostattformer(&mut g, &b, &config, &feats).unwrap();
        let loss = g.cc_loss(out, &gt).unwrap();
        let grads = g.backward(loss).unwrap();
        let map = b
            .iter()
            .map(|(n, v)| (n.to_string(), grads.get(v).unwrap().to_vec()))
            .collect();
        (g.value(loss)[0], map)
    })
}

pub fn expertisenet_error(seed: u64) -> f64 {
    let mut r = rng(2000 + seed);
    let config = ExpertiseNetConfig {
        grid: GridSpec::new(5, 5),
        channels: 3,
        ..ExpertiseNetConfig::new(6, 3)
    };
    let mut params = config.init_params(seed).unwrap();
    jitter(&mut params, &mut r);
    let mut stack = || {
        let maps: Vec<Heatmap> = (0..4)
            .map(|_| {
                Heatmap::new(
                    GridSpec::new(5, 5),
                    (0..25).map(|_| r.random_range(0.0..2.0)).collect(),
                    Norm::Raw,
                )
                .unwrap()
            })
            .collect();
        MapStack::new(&maps).unwrap()
    };
    let (t, m) = (stack(), stack());
    let x = ExpertiseTensors::new(&random_features(&mut r, 5, 5, 6), t, m);
    let label = (seed % 3) as usize;
    model_error(&params, &|p| {
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let logits = build_expertisenet(&mut g, &b, &config, &x).unwrap();
        let loss = g.weighted_ce_loss(logits, &[label], &[1.0, 1.5, 0.5]).unwrap();
        let grads = g.backward(loss).unwrap();
        let map = b
            .iter()
            .map(|(n, v)| (n.to_string(), grads.get(v).unwrap().to_vec()))
            .collect();
        (g.value(loss)[0], map)
    })
}

/// Runs every op and both models over `seeds` seeds; `Ok` carries the worst
/// error seen, `Err` the first case over tolerance.
pub fn gradient_suite(seeds: u64) -> Result<String, String> {
    let mut worst_elem = 0.0f64;
    let mut worst_other = 0.0f64;
    for c in op_cases() {
        let tol = if c.elementwise { 1e-6 } else { 1e-4 };
        for seed in 0..seeds {
            let mut r = rng(seed * 31 + c.shapes.len() as u64);
            let inputs: Vec<Tensor> = c.shapes.iter().map(|s| random_tensor(&mut r, s)).collect();
            let err = op_error(&*c.build, &inputs);
            if !(err < tol) {
                return Err(format!("{} seed {seed}: relative error {err:e} ≥ {tol:e}", c.name));
            }
            if c.elementwise {
                worst_elem = worst_elem.max(err);
            } else {
                worst_other = worst_other.max(err);
            }
        }
    }
    let mut worst_model = 0.0f64;
    for seed in 0..seeds {
        for (name, err) in [
            ("prostattformer", prostattformer_error(seed)),
            ("expertisenet", expertisenet_error(seed)),
        ] {
            if !(err < 1e-4) {
                return Err(format!("{name} seed {seed}: relative error {err:e} ≥ 1e-4"));
            }
            worst_model = worst_model.max(err);
        }
    }
    Ok(format!(
        "{} ops + 2 models x {seeds} seeds; worst elementwise {worst_elem:.1e}, other ops {worst_other:.1e}, models {worst_model:.1e}",
        op_cases().len()
    ))
}
