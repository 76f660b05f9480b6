mod common;

use std::collections::BTreeMap;

use common::CHANNELS;
use image::{GrayImage, Luma};
use patchprobe::cluster::{compare_ab, pipeline_a, region_to_boxes, FruitEvidence, VerifyConfig, MIN_COMPONENT_AREA};
use patchprobe::dataset::{derive_bboxes, load_coco, load_source, split_dataset, validate, write_coco, Split, SplitPolicy};
use patchprobe::encoder::{encode_image, write_archive, Encoder, FeatureArchive, MockEncoder};
use patchprobe::synth::{cluster_scene, signal_squares, SceneConfig};

#[test]
fn coco_round_trip_split_and_archive_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let set = signal_squares(10, &SceneConfig { seed: 9, ..Default::default() });
    let split = split_dataset(&set.store, &SplitPolicy::random((0.7, 0.2, 0.1), 4)).unwrap();
    assert_eq!(split.split_counts(), (7, 2, 1));

    let coco = dir.path().join("coco.json");
    write_coco(&split, &coco).unwrap();
    let loaded = load_coco(&coco).unwrap();
    assert_eq!(loaded, split);

    let enc = MockEncoder::new(CHANNELS);
    let maps: Vec<_> = set
        .images
        .iter()
        .filter(|(id, _)| loaded.splits[id] == Split::Train)
        .map(|(id, img)| encode_image(&enc, img, *id, 96, false).unwrap().0)
        .collect();
    let path = dir.path().join("train.ppf");
    write_archive(&maps, enc.spec(), "train", &path).unwrap();
    let archive = FeatureArchive::open(&path).unwrap();
    assert_eq!(archive.image_ids(), loaded.image_ids_in(Split::Train));
    for m in &maps {
        assert_eq!(&archive.get(m.image_id).unwrap(), m);
    }
}

#[test]
fn mask_layout_gets_boxes_from_labels() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir(dir.path().join("masks")).unwrap();
    std::fs::write(dir.path().join("categories.json"), r#"[{"id": 3, "name": "apple"}]"#).unwrap();
    let raster = GrayImage::from_fn(40, 30, |x, y| {
        Luma([if (2..10).contains(&x) && (4..9).contains(&y) { 1 } else if x >= 30 && y >= 20 { 7 } else { 0 }])
    });
    raster.save(dir.path().join("masks/a.png")).unwrap();

    let store = load_source(dir.path()).unwrap();
    assert!(store.instances.iter().all(|i| i.bbox.is_none()));
    let store = derive_bboxes(&store).unwrap();
    assert!(validate(&store).is_empty());
    let boxes: Vec<[f64; 4]> = store.instances.iter().map(|i| i.bbox.unwrap().to_array()).collect();
    assert_eq!(boxes, [[2.0, 4.0, 8.0, 5.0], [30.0, 20.0, 10.0, 10.0]]);
    assert!(store.instances.iter().all(|i| i.category_id == 3));
}

#[test]
fn verified_clusters_match_annotations_exactly() {
    let cfg = VerifyConfig::default();
    for seed in 0..10 {
        let scene = cluster_scene(seed);
        let a = pipeline_a(&scene.foreground, &FruitEvidence::from_boxes(&scene.fruits), &cfg);
        let sorted = |v: &[patchprobe::geometry::BBox]| {
            let mut v = v.to_vec();
            v.sort_by(|p, q| p.x.total_cmp(&q.x));
            v
        };
        assert_eq!(sorted(&a.accepted), sorted(&scene.clusters), "layout {seed}");
        let b = region_to_boxes(&scene.foreground, MIN_COMPONENT_AREA);
        assert_eq!(b.len(), a.proposals.len());
        // accepted rois come from B and shrink to the tight union of their members
        for (p, shrunk) in a.proposals.iter().filter(|p| p.is_accepted()).zip(&a.accepted) {
            assert!(b.contains(&p.roi));
            let members: Vec<_> = p.members.iter().map(|&i| scene.fruits[i]).collect();
            assert!(members.iter().all(|m| shrunk.contains_box(m)));
            assert_eq!(members.iter().copied().reduce(|x, y| x.union(&y)).as_ref(), Some(shrunk));
        }
        let report = compare_ab(
            &BTreeMap::from([(1, a.accepted.clone())]),
            &BTreeMap::from([(1, a.accepted.clone())]),
            &scene.cluster_store(1),
            1,
        )
        .unwrap();
        assert_eq!(report.output_a, report.output_b);
        assert_eq!(report.output_a.map50, 100.0);
    }
}

#[test]
fn empty_scene_and_empty_annotations_score_full() {
    let mut scene = cluster_scene(0);
    scene.clusters.clear();
    let store = scene.cluster_store(1);
    let empty = BTreeMap::from([(1, vec![])]);
    let r = compare_ab(&empty, &empty, &store, 1).unwrap();
    assert_eq!(r.output_a.map50, 100.0);
    assert_eq!(r.output_b.precision, 100.0);
}
