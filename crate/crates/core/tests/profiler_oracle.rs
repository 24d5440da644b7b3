//! Parameter and MAC accounting checked against hand-derived per-block formulas.

use std::fs::File;
use std::io::BufReader;

use fsmc_core::config::{ModelConfig, StageKind, Toggle};
use fsmc_core::model::PoseModel;
use fsmc_core::profiler::{count_macs, count_params, LayerKind};
use fsmc_core::tensor::checkpoint::read_checkpoint;

fn conv_bn(cin: usize, cout: usize, k: usize, groups: usize) -> usize {
    cout * (cin / groups) * k * k + 2 * cout
}

fn inverted_residual(cin: usize, cout: usize, e: usize) -> usize {
    let hidden = cin * e;
    let expand = if e > 1 { conv_bn(cin, hidden, 1, 1) } else { 0 };
    expand + conv_bn(hidden, hidden, 3, hidden) + conv_bn(hidden, cout, 1, 1)
}

fn sfe(c: usize) -> usize {
    // Four 3×3 depthwise subband kernels, 1×1 fuse and 3×3 refine (both biased).
    4 * c * 9 + (c * c + c) + (9 * c * c + c)
}

fn ra(c: usize) -> usize {
    // Channel bias, three biased depthwise branches, layer-norm affine.
    c + 3 * (9 * c + c) + 2 * c
}

fn sc2head(c: usize, r: usize) -> usize {
    let cr = c / r;
    let sab = 2 * 9 + 1;
    let cab_mix = (2 * c) * (2 * c) + 2 * (2 * c);
    let gate = c * cr + 2 * cr + cr * c + c;
    let scb = 9 * c;
    let fuse = 2 * c * c + c;
    sab + cab_mix + 2 * gate + scb + fuse
}

fn simcc(cfg: &ModelConfig, c: usize) -> usize {
    let k = cfg.head.keypoints;
    let spatial = (cfg.input_height / cfg.output_stride) * (cfg.input_width / cfg.output_stride);
    let (xb, yb) = (cfg.x_bins(), cfg.y_bins());
    (c * k + k) + (spatial * xb + xb) + (spatial * yb + yb)
}

/// Total parameters from the formulas above, independent of the model code.
fn oracle_params(cfg: &ModelConfig) -> usize {
    let mut total = conv_bn(cfg.image_channels, cfg.stem_channels, 3, 1);
    let mut channels = cfg.stem_channels;
    for st in &cfg.stages {
        match st.kind {
            StageKind::InvertedResidual => {
                total += inverted_residual(st.in_channels, st.out_channels, st.expansion);
                channels = st.out_channels;
            }
            StageKind::Sfe if cfg.use_sfe => total += sfe(st.in_channels),
            StageKind::Ra if cfg.use_ra => total += ra(st.in_channels),
            _ => {}
        }
    }
    if cfg.use_sc2head {
        total += sc2head(channels, cfg.head.reduction);
    }
    total + simcc(cfg, channels)
}

fn config_matrix() -> Vec<(String, ModelConfig)> {
    let desk = ModelConfig::desk();
    let mut reduced = desk.clone();
    reduced.head.reduction = 8;
    reduced.head.split_ratio = 1.0;
    let mut out = vec![
        ("desk".to_string(), desk.clone()),
        ("desk 128x96".to_string(), desk.clone().with_resolution(128, 96)),
        ("desk r8 ratio1".to_string(), reduced),
    ];
    for t in [Toggle::NoSfe, Toggle::NoRa, Toggle::NoSc2Head] {
        out.push((format!("desk {t:?}"), desk.clone().with_toggle(t)));
    }
    let all = desk.with_toggle(Toggle::NoSfe).with_toggle(Toggle::NoRa).with_toggle(Toggle::NoSc2Head);
    out.push(("desk without optional blocks".to_string(), all));
    out
}

#[test]
fn params_match_block_formulas_and_checkpoint_scalars() {
    let dir = tempfile::tempdir().unwrap();
    for (name, cfg) in config_matrix() {
        let model = PoseModel::new(&cfg, 1).unwrap();
        let report = count_params(&model).unwrap();
        assert_eq!(report.totals.params as usize, oracle_params(&cfg), "{name}: formula");
        let path = dir.path().join("m.ckpt");
        model.save(&path).unwrap();
        let entries = read_checkpoint(BufReader::new(File::open(&path).unwrap())).unwrap();
        let scalars: usize = entries.iter().map(|(_, t)| t.numel()).sum();
        assert_eq!(report.totals.params as usize, scalars, "{name}: checkpoint");
    }
}

#[test]
fn toggles_remove_exactly_one_block() {
    let desk = ModelConfig::desk();
    let total = |cfg: &ModelConfig| count_params(&PoseModel::new(cfg, 0).unwrap()).unwrap().totals.params as usize;
    let base = total(&desk);
    assert_eq!(base - total(&desk.clone().with_toggle(Toggle::NoSfe)), sfe(32));
    assert_eq!(base - total(&desk.clone().with_toggle(Toggle::NoRa)), ra(64));
    assert_eq!(base - total(&desk.clone().with_toggle(Toggle::NoSc2Head)), sc2head(64, 4));
}

#[test]
fn conv_macs_scale_with_pixel_count() {
    let small = ModelConfig::desk();
    let big = small.clone().with_resolution(512, 384);
    let a = count_macs(&PoseModel::new(&small, 0).unwrap(), (256, 192)).unwrap();
    let b = count_macs(&PoseModel::new(&big, 0).unwrap(), (512, 384)).unwrap();
    let convs = |r: &fsmc_core::profiler::CostReport| {
        r.rows.iter().filter(|row| row.kind == LayerKind::Conv).map(|row| (row.name.clone(), row.macs)).collect::<Vec<_>>()
    };
    let (ca, cb) = (convs(&a), convs(&b));
    assert!(!ca.is_empty());
    assert_eq!(ca.len(), cb.len());
    for ((na, ma), (nb, mb)) in ca.iter().zip(&cb) {
        assert_eq!(na, nb);
        assert_eq!(*mb, 4 * ma, "{na}");
    }
}

#[test]
fn stem_macs_match_hand_count() {
    let cfg = ModelConfig::desk();
    let r = count_macs(&PoseModel::new(&cfg, 0).unwrap(), (256, 192)).unwrap();
    let stem = r.rows.iter().find(|row| row.name == "backbone.stem.conv").unwrap();
    // 128×96 outputs, 16 channels, 3×3×3 taps each.
    assert_eq!(stem.macs, 128 * 96 * 16 * 27);
}
