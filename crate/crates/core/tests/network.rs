use msla::count::{count_flops, count_params};
use msla::network::{build_model, BlockKind, Model, ModelConfig, RunConfig, PATTERNS, PRESETS};
use msla::{Error, Graph, Mode, Tensor};

fn forward_shape(cfg: ModelConfig, b: usize, side: usize) -> Vec<usize> {
    let (model, params) = build_model::<f32>(cfg, 0).unwrap();
    let mut g = Graph::inference(Mode::Eval);
    let x = g.constant(Tensor::from_fn(&[b, 3, side, side], |i| (i % 7) as f32 * 0.1));
    let y = model.forward(&mut g, &params, x).unwrap();
    g.shape(y).to_vec()
}

#[test]
fn every_pattern_of_the_desk_model_keeps_resolution() {
    for p in PATTERNS {
        let cfg = ModelConfig::desk().with_pattern(p).unwrap();
        assert_eq!(forward_shape(cfg, 2, 64), vec![2, 4, 64, 64], "{p}");
    }
}

#[test]
fn non_square_inputs() {
    let cfg = ModelConfig { input_size: (64, 96), ..ModelConfig::desk() };
    let (model, params) = build_model::<f32>(cfg, 0).unwrap();
    let mut g = Graph::inference(Mode::Eval);
    let x = g.constant(Tensor::zeros(&[1, 3, 64, 96]));
    let y = model.forward(&mut g, &params, x).unwrap();
    assert_eq!(g.shape(y), &[1, 4, 64, 96]);
}

#[test]
fn binary_model_has_one_output_channel() {
    let cfg = ModelConfig { num_classes: 1, ..ModelConfig::desk() };
    assert_eq!(forward_shape(cfg, 1, 32), vec![1, 1, 32, 32]);
}

#[test]
fn wrong_channel_count_is_rejected() {
    let (model, params) = build_model::<f32>(ModelConfig::desk(), 0).unwrap();
    let mut g = Graph::inference(Mode::Eval);
    let x = g.constant(Tensor::zeros(&[1, 1, 64, 64]));
    assert!(matches!(model.forward(&mut g, &params, x), Err(Error::Dimension(_))));
}

#[test]
fn presets_are_valid_and_ordered_by_size() {
    let sizes: Vec<usize> =
        PRESETS.iter().map(|p| count_params(&Model::new(ModelConfig::preset(p).unwrap()).unwrap())).collect();
    assert!(sizes[0] > sizes[1] && sizes[1] > sizes[2], "{sizes:?}");
    assert!(ModelConfig::preset("huge").is_err());
}

#[test]
fn global_stages_cap_head_width_at_branch_width() {
    let cfg = ModelConfig::base().with_pattern("GGGG").unwrap();
    assert!(cfg.validate().is_ok());
    assert_eq!(cfg.stage_head_width(0), 16);
    assert_eq!(cfg.stage_head_width(3), 32);
    assert_eq!(cfg.msla_config(2).unwrap().heads(), 2);
}

#[test]
fn validation_messages() {
    let widths = ModelConfig { stage_widths: [64, 128, 250, 512], ..ModelConfig::base() };
    assert!(matches!(widths.validate(), Err(Error::Config(m)) if m.contains("double")));
    let size = ModelConfig { input_size: (100, 100), ..ModelConfig::base() };
    assert!(size.validate().is_err());
    let heads = ModelConfig { head_width: 24, ..ModelConfig::base() };
    assert!(matches!(heads.validate(), Err(Error::Config(m)) if m.contains("stage 3")));
    assert!(Model::new(ModelConfig { stage_depths: [1, 0, 1, 1], ..ModelConfig::base() }).is_err());
}

#[test]
fn config_file_roundtrip() {
    let text = "preset=small\npattern=LGGG\nkernel_set=1,3,5,7\nnum_classes=9\n# comment\nrecipe=synapse\nepochs=3\n";
    let cfg = RunConfig::parse(text).unwrap();
    assert_eq!(cfg.model.pattern[1], BlockKind::Global);
    assert_eq!(cfg.model.kernel_set, vec![1, 3, 5, 7]);
    assert_eq!(cfg.train.epochs, 3);
    assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
}

#[test]
fn every_pattern_costs_over_a_gigaflop_at_224() {
    let at = |p: &str| {
        let m = Model::new(ModelConfig::base().with_pattern(p).unwrap()).unwrap();
        count_flops(&m, 224, 224).unwrap()
    };
    let all: Vec<u64> = PATTERNS.iter().map(|p| at(p)).collect();
    assert!(all.iter().all(|&f| f > 1_000_000_000), "{all:?}");
}

#[test]
fn parameter_names_are_hierarchical() {
    let model = Model::new(ModelConfig::desk()).unwrap();
    let params = model.init_params::<f32>(0);
    let names: Vec<&String> = params.names().collect();
    for prefix in [
        "enc.stage1.embed.",
        "enc.stage3.block0.msla.",
        "dec.align2.0.",
        "dec.align4.2.",
        "dec.refine1.conv1.",
        "dec.head.",
    ] {
        assert!(names.iter().any(|n| n.starts_with(prefix)), "{prefix}");
    }
    assert_eq!(model.init_params::<f32>(0).count_params(), params.count_params());
}
