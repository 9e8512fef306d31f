use std::fs;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use xattn_core::data::{
    load_dataset, read_roi_bundle, read_roi_sets, roi_bundle_bytes, synth_generate, synth_table,
    write_annotations, write_reports, write_roi_bundle, write_roi_sets_jsonl, SynthConfig,
};
use xattn_core::model::{
    checkpoint_from_bytes, load_checkpoint, save_checkpoint, tiny_config, MAGIC, VERSION,
};
use xattn_core::text::DiseaseTerms;
use xattn_core::{Error, ModelParams};

fn trained_like_params() -> ModelParams {
    let mut p = ModelParams::init(tiny_config(), 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for t in p.weights.tensors_mut() {
        t.mapv_inplace(|v| (v + rng.random_range(-0.5..0.5)) as f32 as f64);
    }
    for r in &mut p.running {
        r.mean
            .mapv_inplace(|_| rng.random_range(-1.0f32..1.0) as f64);
        r.var.mapv_inplace(|_| rng.random_range(0.5f32..2.0) as f64);
    }
    p.stats_initialized = true;
    p
}

#[test]
fn checkpoint_round_trip_is_exact_at_f32() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let p = trained_like_params();
    save_checkpoint(&p, &path).unwrap();
    let q = load_checkpoint(&path).unwrap();
    assert_eq!(p.config, q.config);
    assert_eq!(p.weights, q.weights);
    assert_eq!(p.running, q.running);
    assert!(q.stats_initialized);
}

#[test]
fn checkpoint_corruption_is_detected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&trained_like_params(), &path).unwrap();
    let bytes = fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], MAGIC);

    for cut in [3, 6, 10, bytes.len() / 2, bytes.len() - 1] {
        assert!(
            checkpoint_from_bytes(&bytes[..cut]).is_err(),
            "truncated at {cut}"
        );
    }

    let mut newer = bytes.clone();
    newer[4..6].copy_from_slice(&(VERSION + 1).to_le_bytes());
    assert!(matches!(
        checkpoint_from_bytes(&newer),
        Err(Error::VersionUnsupported { found, .. }) if found == VERSION + 1
    ));

    let mut bad = bytes.clone();
    bad[0] = b'Y';
    assert!(matches!(
        checkpoint_from_bytes(&bad),
        Err(Error::BadMagic { .. })
    ));

    let mut trailing = bytes;
    trailing.push(0);
    assert!(checkpoint_from_bytes(&trailing).is_err());
}

fn synth_files(
    dir: &std::path::Path,
) -> (
    xattn_core::data::SynthData,
    xattn_core::embed::EmbeddingTable,
) {
    let table = synth_table(16, 2).unwrap();
    let cfg = SynthConfig {
        num_images: 12,
        rois_per_image: 5,
        feat_dim: 6,
        seed: 2,
        ..SynthConfig::default()
    };
    let data = synth_generate(&cfg, &table).unwrap();
    write_reports(&dir.join("reports.jsonl"), &data.reports).unwrap();
    write_annotations(&dir.join("annotations.jsonl"), &data.annotations()).unwrap();
    (data, table)
}

#[test]
fn dataset_round_trips_through_both_roi_formats() {
    let dir = tempfile::tempdir().unwrap();
    let (data, table) = synth_files(dir.path());
    let sets = data.roi_sets();
    write_roi_sets_jsonl(&dir.path().join("rois.jsonl"), &sets).unwrap();
    write_roi_bundle(&dir.path().join("rois.bin"), &sets).unwrap();

    for name in ["rois.jsonl", "rois.bin"] {
        let ds = load_dataset(
            &dir.path().join("reports.jsonl"),
            &dir.path().join(name),
            Some(&dir.path().join("annotations.jsonl")),
            &table,
            &DiseaseTerms::default(),
        )
        .unwrap();
        assert_eq!(ds.dropped, 0);
        assert_eq!(ds.samples.len(), data.samples.len());
        assert_eq!(ds.ground_truth, data.ground_truth());
        for (a, b) in ds.samples.iter().zip(&data.samples) {
            assert_eq!(a.image_id, b.image_id);
            assert_eq!(a.attrs, b.attrs);
            assert_eq!(a.attr_embeds, b.attr_embeds);
            assert_eq!(a.target, b.target);
            for (ra, rb) in a.roi_set.rois.iter().zip(&b.roi_set.rois) {
                if name == "rois.jsonl" {
                    // JSONL keeps full precision.
                    assert_eq!(ra, rb);
                } else {
                    // The bundle stores f32 payloads.
                    for (x, y) in ra.feat.iter().zip(&rb.feat) {
                        assert_eq!(*x, *y as f32 as f64);
                    }
                }
            }
        }
    }
}

#[test]
fn bundle_is_bit_exact_for_f32_values() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _) = synth_files(dir.path());
    let sets = data.roi_sets();
    let once = read_roi_bundle(&roi_bundle_bytes(&sets).unwrap()).unwrap();
    let twice = read_roi_bundle(&roi_bundle_bytes(&once).unwrap()).unwrap();
    assert_eq!(once, twice);
    let path = dir.path().join("rois.bin");
    write_roi_bundle(&path, &once).unwrap();
    assert_eq!(read_roi_sets(&path).unwrap(), once);
}
