//! Central finite-difference verification of reverse-mode gradients.
//!
//! Every case builds a small randomised graph in 64-bit precision, reduces
//! its output to a scalar through a fixed random projection, and compares the
//! analytic gradient of every input and parameter against central
//! differences. ReLU masks from the unperturbed pass are replayed in the
//! perturbed passes so kinks cannot bias the estimate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::attention::{efficient_attention, softmax_attention, Msla, MslaConfig};
use crate::autodiff::{Activation, Graph, Mode, Var};
use crate::blocks::{GfeBlock, LfeBlock, PatchEmbed};
use crate::error::{Error, Result};
use crate::kernels::Layout;
use crate::labels::LabelMap;
use crate::layers::{BatchNorm2d, LayerNorm};
use crate::network::{Decoder, EncoderOutputs};
use crate::params::{Init, Kind, ParamStore};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-4;
pub const DEFAULT_SEEDS: u64 = 20;

/// Graph builder under test: receives the input variables and returns the
/// output to be checked.
pub type Forward<'a> = dyn Fn(&mut Graph<f64>, &ParamStore<f64>, &[Var]) -> Result<Var> + 'a;

/// Worst relative error over all checked tensors, with the tensor it came from.
#[derive(Clone, Debug)]
pub struct Check {
    pub worst: f64,
    pub worst_tensor: String,
    pub tensors: usize,
}

/// Relative error `|a - n| / max(|a|, |n|)` in the Euclidean norm; zero when
/// both are numerically zero.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied()).max(norm(&mut numeric.iter().copied()));
    if scale < 1e-10 {
        diff
    } else {
        diff / scale
    }
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

fn projected(g: &mut Graph<f64>, y: Var, weights: &Tensor<f64>) -> Result<Var> {
    if g.shape(y).iter().product::<usize>() == 1 {
        return Ok(y);
    }
    let r = g.constant(weights.clone());
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

/// Checks `forward` on `inputs` and every trainable parameter it reads.
pub fn check(inputs: &[Tensor<f64>], store: &mut ParamStore<f64>, seed: u64, forward: &Forward<'_>) -> Result<Check> {
    let run = |store: &ParamStore<f64>,
               inputs: &[Tensor<f64>],
               replay: Option<Vec<Vec<bool>>>|
     -> Result<(Graph<f64>, Vec<Var>, Var)> {
        let mut g = Graph::new(Mode::Train);
        match replay {
            Some(m) => g.replay_relu_masks(m),
            None => g.record_relu_masks(),
        }
        let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
        let y = forward(&mut g, store, &vars)?;
        Ok((g, vars, y))
    };

    let (mut g0, vars, y0) = run(store, inputs, None)?;
    let masks = g0.take_relu_masks();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let weights = normal(&mut rng, g0.shape(y0), 1.0);
    let root = projected(&mut g0, y0, &weights)?;
    let value = |store: &ParamStore<f64>, inputs: &[Tensor<f64>]| -> Result<f64> {
        let (mut g, _, y) = run(store, inputs, Some(masks.clone()))?;
        let r = projected(&mut g, y, &weights)?;
        Ok(g.value(r).data()[0])
    };

    let grads = g0.backward(root)?;
    let mut result = Check { worst: 0.0, worst_tensor: String::new(), tensors: 0 };
    let mut record = |name: String, err: f64| {
        result.tensors += 1;
        if err > result.worst || result.worst_tensor.is_empty() {
            result.worst = err;
            result.worst_tensor = name;
        }
    };

    let mut inputs = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(&g0, v);
        let mut numeric = Vec::with_capacity(analytic.numel());
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            inputs[i].data_mut()[j] = orig + STEP;
            let fp = value(store, &inputs)?;
            inputs[i].data_mut()[j] = orig - STEP;
            let fm = value(store, &inputs)?;
            inputs[i].data_mut()[j] = orig;
            numeric.push((fp - fm) / (2.0 * STEP));
        }
        record(format!("input{i}"), rel_err(analytic.data(), &numeric));
    }

    for (name, analytic) in grads.named(&g0) {
        if store.kind(&name) != Some(Kind::Param) {
            continue;
        }
        let n = store.get(&name)?.numel();
        let mut numeric = Vec::with_capacity(n);
        for j in 0..n {
            let orig = store.get(&name)?.data()[j];
            store.get_mut(&name)?.data_mut()[j] = orig + STEP;
            let fp = value(store, &inputs)?;
            store.get_mut(&name)?.data_mut()[j] = orig - STEP;
            let fm = value(store, &inputs)?;
            store.get_mut(&name)?.data_mut()[j] = orig;
            numeric.push((fp - fm) / (2.0 * STEP));
        }
        record(name, rel_err(analytic.data(), &numeric));
    }
    Ok(result)
}

/// Names accepted by [`run_case`], operations first, then composite blocks.
pub const CASES: [&str; 30] = [
    "add",
    "mul",
    "mul_const",
    "scale",
    "add_bias",
    "sum",
    "mean",
    "matmul",
    "bmm",
    "reshape",
    "permute",
    "narrow",
    "concat",
    "conv2d",
    "conv2d_depthwise",
    "conv2d_strided",
    "upsample2x",
    "softmax",
    "relu",
    "gelu",
    "batchnorm2d",
    "layernorm",
    "dice_loss",
    "ce_loss",
    "efficient_attention",
    "softmax_attention",
    "msla",
    "lfe",
    "gfe",
    "decoder",
];

/// Also runnable by name, not part of [`CASES`] to keep the suite lean.
pub const EXTRA_CASES: [&str; 1] = ["patch_embed"];

fn dims(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.gen_range(lo..=hi)
}

/// Runs one named case for one seed.
pub fn run_case(name: &str, seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let mut init = Init::new(seed.wrapping_add(1));
    let (m, n) = (dims(&mut rng, 2, 4), dims(&mut rng, 2, 5));
    let mut r = |shape: &[usize]| normal(&mut rng, shape, 1.0);

    macro_rules! go {
        ($inputs:expr, $f:expr) => {{
            let inputs: Vec<Tensor<f64>> = $inputs;
            check(&inputs, &mut store, seed, &$f)
        }};
    }

    match name {
        "add" => go!(vec![r(&[m, n]), r(&[m, n])], |g, _, v| g.add(v[0], v[1])),
        "mul" => go!(vec![r(&[m, n]), r(&[m, n])], |g, _, v| g.mul(v[0], v[1])),
        "mul_const" => go!(vec![r(&[m, n])], |g, _, v| Ok(g.mul_const(v[0], -1.7))),
        "scale" => go!(vec![r(&[2, m, n]), r(&[1])], |g, _, v| g.scale(v[0], v[1])),
        "add_bias" => go!(vec![r(&[2, m, n]), r(&[m])], |g, _, v| g.add_bias(v[0], v[1], 1)),
        "sum" => go!(vec![r(&[m, n])], |g, _, v| Ok(g.sum(v[0]))),
        "mean" => go!(vec![r(&[m, n])], |g, _, v| Ok(g.mean(v[0]))),
        "matmul" => go!(vec![r(&[2, m, 4]), r(&[4, n])], |g, _, v| g.matmul(v[0], v[1])),
        "bmm" => {
            let k = 3;
            let mut worst: Option<Check> = None;
            for (la, lb) in
                [(Layout::N, Layout::N), (Layout::T, Layout::N), (Layout::N, Layout::T), (Layout::T, Layout::T)]
            {
                let sa = if la == Layout::N { [2, m, k] } else { [2, k, m] };
                let sb = if lb == Layout::N { [2, k, n] } else { [2, n, k] };
                let c = go!(vec![r(&sa), r(&sb)], move |g: &mut Graph<f64>, _: &ParamStore<f64>, v: &[Var]| g
                    .bmm(v[0], la, v[1], lb))?;
                if worst.as_ref().is_none_or(|w| c.worst > w.worst) {
                    worst = Some(c);
                }
            }
            Ok(worst.unwrap())
        }
        "reshape" => go!(vec![r(&[m, n, 2])], |g, _, v| g.reshape(v[0], &[2 * n, m])),
        "permute" => go!(vec![r(&[m, n, 3])], |g, _, v| g.permute(v[0], &[2, 0, 1])),
        "narrow" => go!(vec![r(&[m, n + 2, 2])], |g, _, v| g.narrow(v[0], 1, 1, n)),
        "concat" => go!(vec![r(&[m, 2, 3]), r(&[m, n, 3])], |g, _, v| g.concat(&[v[0], v[1]], 1)),
        "conv2d" => {
            go!(vec![r(&[2, 4, 6, 5]), r(&[6, 2, 3, 3]), r(&[6])], |g, _, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 1, 2))
        }
        "conv2d_depthwise" => {
            go!(vec![r(&[1, 4, 8, 8]), r(&[4, 1, 5, 5]), r(&[4])], |g, _, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 2, 4))
        }
        "conv2d_strided" => {
            go!(vec![r(&[2, 3, 8, 8]), r(&[4, 3, 2, 2])], |g, _, v| g.conv2d(v[0], v[1], None, 2, 0, 1))
        }
        "upsample2x" => go!(vec![r(&[2, 2, m, n])], |g, _, v| g.upsample2x(v[0])),
        "softmax" => {
            let axis = dims(&mut rng, 0, 2);
            let mut r = |shape: &[usize]| normal(&mut rng, shape, 1.0);
            go!(vec![r(&[m, n, 3])], move |g: &mut Graph<f64>, _: &ParamStore<f64>, v: &[Var]| g.softmax(v[0], axis))
        }
        "relu" => go!(vec![r(&[m, n])], |g, _, v| Ok(g.activation(v[0], Activation::Relu))),
        "gelu" => go!(vec![r(&[m, n])], |g, _, v| Ok(g.activation(v[0], Activation::Gelu))),
        "batchnorm2d" => {
            let bn = BatchNorm2d::new("bn".into(), 3);
            bn.init(&mut store);
            let mut init_affine = |s: &mut ParamStore<f64>, name: &str| -> Result<()> {
                let t = normal(&mut rng, &[3], 0.5).map(|x| x + 1.0);
                s.set(name, t)
            };
            init_affine(&mut store, "bn.weight")?;
            init_affine(&mut store, "bn.bias")?;
            let x = normal(&mut rng, &[2, 3, 4, 4], 1.0);
            go!(vec![x], move |g: &mut Graph<f64>, s: &ParamStore<f64>, v: &[Var]| bn.forward(g, s, v[0]))
        }
        "layernorm" => {
            let ln = LayerNorm::new("ln".into(), 16);
            ln.init(&mut store);
            store.set("ln.weight", normal(&mut rng, &[16], 0.5).map(|x| x + 1.0))?;
            store.set("ln.bias", normal(&mut rng, &[16], 0.5))?;
            let x = normal(&mut rng, &[7, 16], 1.0);
            go!(vec![x], move |g: &mut Graph<f64>, s: &ParamStore<f64>, v: &[Var]| ln.forward(g, s, v[0], 1))
        }
        "dice_loss" | "ce_loss" => {
            let (b, k, h, w) = (2, 3, 4, 4);
            let labels: Vec<u32> = (0..b * h * w).map(|_| rng.gen_range(0..k as u32)).collect();
            let labels = LabelMap::new(b, h, w, labels)?;
            let logits = normal(&mut rng, &[b, k, h, w], 1.0);
            let dice = name == "dice_loss";
            let weights: Vec<f64> = if dice {
                let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.2..1.0)).collect();
                let s: f64 = raw.iter().sum();
                raw.iter().map(|x| x / s).collect()
            } else {
                Vec::new()
            };
            go!(vec![logits], move |g: &mut Graph<f64>, _: &ParamStore<f64>, v: &[Var]| {
                let p = g.softmax(v[0], 1)?;
                if dice {
                    g.dice_loss(p, &labels, &weights, 1e-5)
                } else {
                    g.ce_loss(p, &labels)
                }
            })
        }
        "efficient_attention" | "softmax_attention" => {
            let (tokens, d) = (dims(&mut rng, 3, 9), dims(&mut rng, 2, 4));
            let eff = name == "efficient_attention";
            let mut r = |shape: &[usize]| normal(&mut rng, shape, 1.0);
            go!(
                vec![r(&[2, tokens, d]), r(&[2, tokens, d]), r(&[2, tokens, d])],
                move |g: &mut Graph<f64>, _: &ParamStore<f64>, v: &[Var]| {
                    if eff {
                        efficient_attention(g, v[0], v[1], v[2])
                    } else {
                        softmax_attention(g, v[0], v[1], v[2])
                    }
                }
            )
        }
        "msla" => {
            let msla = Msla::new("msla".into(), MslaConfig::with_default_kernels(8, 1)?)?;
            msla.init(&mut store, &mut init);
            randomise(&mut store, &mut rng);
            let x = normal(&mut rng, &[1, 16, 8], 1.0);
            go!(vec![x], move |g: &mut Graph<f64>, s: &ParamStore<f64>, v: &[Var]| msla.forward(g, s, v[0]))
        }
        "lfe" => {
            let block = LfeBlock::new("lfe", 4);
            block.init(&mut store, &mut init);
            randomise(&mut store, &mut rng);
            let x = normal(&mut rng, &[2, 4, 4, 4], 1.0);
            go!(vec![x], move |g: &mut Graph<f64>, s: &ParamStore<f64>, v: &[Var]| block.forward(g, s, v[0]))
        }
        "gfe" => {
            let block = GfeBlock::new("gfe", MslaConfig::with_default_kernels(8, 2)?)?;
            block.init(&mut store, &mut init);
            randomise(&mut store, &mut rng);
            let x = normal(&mut rng, &[1, 12, 8], 1.0);
            go!(vec![x], move |g: &mut Graph<f64>, s: &ParamStore<f64>, v: &[Var]| block.forward_grid(g, s, v[0], 3, 4))
        }
        "patch_embed" => {
            let pe = PatchEmbed::new("embed", 3, 4, 1);
            pe.init(&mut store, &mut init);
            randomise(&mut store, &mut rng);
            let x = normal(&mut rng, &[1, 3, 8, 8], 1.0);
            go!(vec![x], move |g: &mut Graph<f64>, s: &ParamStore<f64>, v: &[Var]| pe.forward(g, s, v[0]))
        }
        "decoder" => {
            // Features of a 32 x 32 image with widths [4, 8, 16, 32].
            let dec = Decoder::new([4, 8, 16, 32], 2)?;
            dec.init(&mut store, &mut init);
            randomise(&mut store, &mut rng);
            let feats: Vec<Tensor<f64>> = (0..4).map(|i| normal(&mut rng, &[1, 4 << i, 8 >> i, 8 >> i], 1.0)).collect();
            go!(feats, move |g: &mut Graph<f64>, s: &ParamStore<f64>, v: &[Var]| {
                dec.forward(g, s, &EncoderOutputs { stages: [v[0], v[1], v[2], v[3]] })
            })
        }
        _ => Err(Error::Config(format!(
            "unknown gradcheck module {name:?} (expected all or one of {})",
            CASES.iter().chain(&EXTRA_CASES).copied().collect::<Vec<_>>().join(", ")
        ))),
    }
}

/// Gives every trainable parameter an O(1) random value so that no gradient
/// path is suppressed by the small default initialisation.
fn randomise(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    let names: Vec<String> = store.trainable().map(|(n, _)| n.clone()).collect();
    for name in names {
        let shape = store.get(&name).unwrap().shape().to_vec();
        let mut t = normal(rng, &shape, 0.5);
        if name.ends_with("norm1.weight")
            || name.ends_with("norm2.weight")
            || name.ends_with("norm.weight")
            || name.contains("fuse_scale")
        {
            t = t.map(|x| x + 1.0);
        }
        store.set(&name, t).unwrap();
    }
}

#[derive(Clone, Debug)]
pub struct CaseReport {
    pub name: String,
    pub seeds: u64,
    pub worst: f64,
    pub worst_seed: u64,
    pub worst_tensor: String,
    pub passed: bool,
}

impl CaseReport {
    pub fn line(&self) -> String {
        format!(
            "gradcheck case={} seeds={} worst_rel_err={:.3e} seed={} tensor={} status={}",
            self.name,
            self.seeds,
            self.worst,
            self.worst_seed,
            self.worst_tensor,
            if self.passed { "pass" } else { "FAIL" }
        )
    }
}

/// Runs `module` (`"all"` or one case name) over seeds `0..seeds`.
pub fn run_suite(module: &str, seeds: u64, tol: f64) -> Result<Vec<CaseReport>> {
    let names: Vec<&str> = if module == "all" { CASES.to_vec() } else { vec![module] };
    let mut reports = Vec::with_capacity(names.len());
    for name in names {
        let mut rep = CaseReport {
            name: name.to_string(),
            seeds,
            worst: 0.0,
            worst_seed: 0,
            worst_tensor: String::new(),
            passed: true,
        };
        for seed in 0..seeds {
            let c = run_case(name, seed)?;
            if c.worst > rep.worst || rep.worst_tensor.is_empty() {
                rep.worst = c.worst;
                rep.worst_seed = seed;
                rep.worst_tensor = c.worst_tensor;
            }
        }
        rep.passed = rep.worst <= tol;
        reports.push(rep);
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_err_basics() {
        assert_eq!(rel_err(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert!((rel_err(&[1.0, 0.0], &[0.0, 0.0]) - 1.0).abs() < 1e-12);
        assert_eq!(rel_err(&[0.0], &[1e-12]), 1e-12);
    }

    #[test]
    fn square_gradient_agrees() {
        let inputs = vec![Tensor::from_f64(&[2], &[0.5, -1.5]).unwrap()];
        let mut store = ParamStore::new();
        let ok = check(&inputs, &mut store, 0, &|g, _, v| g.mul(v[0], v[0])).unwrap();
        assert!(ok.worst < 1e-8, "{ok:?}");
    }

    #[test]
    fn every_case_runs_one_seed() {
        for name in CASES.iter().chain(&EXTRA_CASES) {
            let c = run_case(name, 3).unwrap();
            assert!(c.worst <= TOLERANCE, "{name}: {c:?}");
            assert!(c.tensors > 0);
        }
    }

    #[test]
    fn unknown_case_is_config_error() {
        assert!(matches!(run_case("nope", 0), Err(Error::Config(_))));
    }
}
