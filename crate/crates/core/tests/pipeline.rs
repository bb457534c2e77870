use harmoflow::config::RunConfig;
use harmoflow::flow::{FlowConfig, FlowModel};
use harmoflow::harmonizer::{Harmonizer, HarmonizerConfig};
use harmoflow::image::ImageBatch;
use harmoflow::pipeline::{self, Layout};
use harmoflow::rng::{child_seed, rng};
use harmoflow::seg::{Segmenter, SegmenterConfig};
use harmoflow::synth::build_sites;
use harmoflow::Error;
use proptest::prelude::*;

const TINY: &str = r#"
seed = 5

[data.sites]
images_per_site = 8

[data.sites.phantom]
height = 16
width = 16

[flow.arch]
layers = 1
levels = 2
base_width = 4

[flow.train]
epochs = 2
batch_size = 4

[harmonizer.arch]
widths = [4, 8]
convs_per_level = 1

[harmonizer.train]
epochs = 2
batch_size = 4
eval_augmentations = 1

[segmenter.arch]
widths = [4, 8]
convs_per_level = 1

[segmenter.train]
epochs = 2

[adaptation]
max_steps = 3
eval_every = 1
eval_images = 2
batch_size = 2
micro_batch = 2
"#;

fn tiny(dir: &std::path::Path) -> RunConfig {
    let mut cfg = RunConfig::from_toml(TINY).unwrap();
    cfg.out = dir.to_path_buf();
    cfg
}

fn levels(n: usize, h: usize, w: usize, seed: u64) -> ImageBatch<f64> {
    let data: Vec<Vec<u8>> = (0..n)
        .map(|i| (0..h * w).map(|k| ((k as u64 * 37 + i as u64 * 11 + seed * 7) % 256) as u8).collect())
        .collect();
    let refs: Vec<&[u8]> = data.iter().map(|v| v.as_slice()).collect();
    ImageBatch::from_levels(&refs, h, w).unwrap()
}

#[test]
fn run_all_produces_a_report_for_every_target_and_repeats_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(tmp.path());
    let report = pipeline::run_all(&cfg, false).unwrap();
    assert_eq!(report.targets, vec!["site2", "site3", "site4"]);
    let (_, seg) = pipeline::load_segmenter(&cfg).unwrap();
    assert_eq!(report.segmenter_checksum, seg.checksum);
    for site in &report.targets {
        let trace = pipeline::load_trace(&cfg, site).unwrap();
        assert_eq!(trace.first().unwrap().step, 0);
        assert!(trace.iter().all(|r| r.bpd.is_finite()));
    }
    let first = std::fs::read(Layout::new(tmp.path()).report().join("metrics.json")).unwrap();
    let again = pipeline::run_all(&cfg, true).unwrap();
    assert_eq!(again, report);
    assert_eq!(std::fs::read(Layout::new(tmp.path()).report().join("metrics.json")).unwrap(), first);
}

#[test]
fn stages_report_missing_upstream_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(tmp.path());
    assert!(matches!(pipeline::train_flow_stage(&cfg), Err(Error::MissingArtifact(_))));
    pipeline::synth_data(&cfg, false).unwrap();
    assert!(matches!(pipeline::adapt_stage(&cfg), Err(Error::MissingArtifact(_))));
    assert!(matches!(pipeline::evaluate_stage(&cfg), Err(Error::MissingArtifact(_))));
}

#[test]
fn checkpoints_reproduce_every_model_output() {
    let tmp = tempfile::tempdir().unwrap();
    let x = levels(2, 16, 16, 1);

    let mut flow = FlowModel::<f64>::new(FlowConfig::compact(16, 16, 1, 2, 4), 3).unwrap();
    flow.params_mut().jitter(0.05, &mut rng(4));
    flow.save(tmp.path().join("flow.json")).unwrap();
    let back = FlowModel::<f64>::load(tmp.path().join("flow.json")).unwrap();
    assert_eq!(back.log_likelihood(&x, 9).unwrap(), flow.log_likelihood(&x, 9).unwrap());
    assert_eq!(back.params().checksum(), flow.params().checksum());

    let cont = x.to_continuous();
    let h = Harmonizer::<f64>::new(HarmonizerConfig { widths: vec![4, 8], convs_per_level: 1 }, 2).unwrap();
    h.save(tmp.path().join("h.json")).unwrap();
    let hb = Harmonizer::<f64>::load(tmp.path().join("h.json")).unwrap();
    assert_eq!(hb.harmonize(&cont).unwrap().images.tensor().data(), h.harmonize(&cont).unwrap().images.tensor().data());

    let s = Segmenter::<f64>::new(SegmenterConfig { widths: vec![4, 8], convs_per_level: 1, ..Default::default() }, 2).unwrap();
    s.save(tmp.path().join("s.json")).unwrap();
    let sb = Segmenter::<f64>::load(tmp.path().join("s.json")).unwrap();
    assert_eq!(sb.predict_probs(&cont).unwrap().data(), s.predict_probs(&cont).unwrap().data());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn stored_datasets_equal_regenerated_ones(seed in 0u64..1000) {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = tiny(tmp.path());
        cfg.seed = seed;
        pipeline::synth_data(&cfg, false).unwrap();
        let loaded = pipeline::load_data(&cfg).unwrap();
        let rebuilt = build_sites(child_seed(seed, "data"), &cfg.data.sites).unwrap();
        prop_assert_eq!(loaded.len(), rebuilt.len());
        for (a, b) in loaded.iter().zip(&rebuilt) {
            prop_assert_eq!(&a.domain_id, &b.domain_id);
            prop_assert_eq!(&a.images, &b.images);
            prop_assert_eq!(&a.masks, &b.masks);
            prop_assert_eq!(&a.splits, &b.splits);
        }
    }
}
