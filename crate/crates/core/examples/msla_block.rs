// Multi-scale linear attention and the two encoder block types on a token grid.

use msla::attention::{Msla, MslaConfig};
use msla::blocks::{GfeBlock, LfeBlock};
use msla::params::{Init, ParamStore};
use msla::{Graph, Mode, Tensor};

fn main() {
    let (c, side) = (32, 8);
    let cfg = MslaConfig::with_default_kernels(c, 8).unwrap();
    println!(
        "branches {}, channels per branch {}, heads per branch {}",
        cfg.branches(),
        cfg.branch_channels(),
        cfg.heads()
    );

    let msla = Msla::new("msla".into(), cfg.clone()).unwrap();
    let gfe = GfeBlock::new("gfe", cfg).unwrap();
    let lfe = LfeBlock::new("lfe", c);
    let mut store = ParamStore::<f32>::new();
    let mut init = Init::new(0);
    msla.init(&mut store, &mut init);
    gfe.init(&mut store, &mut init);
    lfe.init(&mut store, &mut init);

    let mut g = Graph::new(Mode::Eval);
    let tokens = g.constant(Tensor::from_fn(&[2, side * side, c], |i| (i as f32 * 0.01).cos()));
    let y = msla.forward(&mut g, &store, tokens).unwrap();
    println!("msla: {:?} -> {:?}, {} MACs", [2, side * side, c], g.shape(y), msla.macs(side, side));

    let z = gfe.forward(&mut g, &store, tokens).unwrap();
    println!("gfe on tokens: {:?}", g.shape(z));

    let map = g.constant(Tensor::from_fn(&[2, c, side, side], |i| (i as f32 * 0.02).sin()));
    let z = lfe.forward(&mut g, &store, map).unwrap();
    println!("lfe on a map: {:?}", g.shape(z));
}
