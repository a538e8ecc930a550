use homoscale::estimator::{estimate, EstimatorConfig};
use homoscale::evaluation::{pme, Category};
use homoscale::manifest::{parse_manifest, recorded, write_manifest, DatasetRecord};
use homoscale::homography::HomographyJson;
use homoscale::imaging::non_overlap_rate;
use homoscale::synthesis::{build_chain, labelled_points, procedural_texture, ChainConfig};
use homoscale::Homography;

fn small() -> ChainConfig {
    ChainConfig {
        crop_width: 240,
        crop_height: 160,
        resize_width: 128,
        resize_height: 128,
        min_perturbation: 4.0,
        max_perturbation: 16.0,
        ..ChainConfig::default()
    }
}

#[test]
fn chains_are_deterministic_and_consistent() {
    let img = procedural_texture(320, 240, 3).unwrap();
    let a = build_chain(&img, None, &small(), 11).unwrap();
    let b = build_chain(&img, None, &small(), 11).unwrap();
    assert_eq!(a.hops, b.hops);
    assert_eq!(a.h_st, b.h_st);
    assert_eq!(a.target.data(), b.target.data());

    let cfg = small();
    for hop in &a.hops {
        assert!(non_overlap_rate(hop, cfg.crop_width, cfg.crop_height).unwrap() <= cfg.max_rate);
    }
    let rate = non_overlap_rate(&a.h_st.unwrap(), cfg.crop_width, cfg.crop_height).unwrap();
    assert!(rate > cfg.target.min_rate && rate <= cfg.target.max_rate, "{rate}");

    // the last bridge closes the chain
    let cum = a.cumulative_hops().unwrap();
    let bridges = a.bridge_truths().unwrap().unwrap();
    let closed = bridges[a.n() - 1].compose(&cum[a.n() - 1]).unwrap();
    assert!(closed.max_abs_diff(&a.h_st.unwrap()) < 1e-12);
}

#[test]
fn estimator_recovers_a_small_shift() {
    let img = procedural_texture(320, 240, 5).unwrap();
    let cfg = ChainConfig { n: 0, ..small() };
    let chain = build_chain(&img, None, &cfg, 2).unwrap();
    let ecfg = EstimatorConfig {
        resize_width: 128,
        resize_height: 128,
        levels: 3,
        cells: vec![8, 4, 2],
        ..EstimatorConfig::default()
    };
    let e = estimate(chain.source(), chain.source(), &ecfg).unwrap();
    let pts = labelled_points(&Homography::identity(), 240, 160).unwrap();
    assert!(pme(&e.homography, &pts).unwrap().pme < 0.1);
}

#[test]
fn manifest_labels_score_zero_against_recorded_truth() {
    let img = procedural_texture(320, 240, 9).unwrap();
    let chain = build_chain(&img, None, &small(), 4).unwrap();
    let h = recorded(&chain.h_st.unwrap()).unwrap();
    let pts = labelled_points(&h, 240, 160).unwrap();
    let rec = DatasetRecord {
        id: Some("p0".into()),
        source: "s.png".into(),
        target: "t.png".into(),
        points: pts.to_tuples(),
        category: Category::Synthetic,
        homography: Some(HomographyJson::from(&chain.h_st.unwrap())),
        chain: None,
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("manifest.json");
    write_manifest(&path, &[rec]).unwrap();
    let back = parse_manifest(&path).unwrap();
    let truth = back[0].ground_truth().unwrap().unwrap();
    assert_eq!(pme(&truth, &back[0].correspondences().unwrap()).unwrap().pme, 0.0);
}
