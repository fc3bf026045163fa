mod common;

use angiogan::dataset::*;
use angiogan::image::{denormalize, normalize};
use angiogan::ImageTensor;
use common::*;
use proptest::prelude::*;

#[test]
fn seventeen_pairs_give_eight_hundred_fifty_aligned_samples() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), 17, 2, 576, 720);
    let pairs = load_split(dir.path(), None, Split::Train, 4).unwrap();
    assert_eq!(pairs.len(), 17);
    let samples = build_samples(&pairs, CROPS_PER_PAIR, CROP_SIZE, 0).unwrap();
    assert_eq!(samples.len(), 850);
    for s in &samples {
        let (r, c) = s.offset;
        assert!(r + CROP_SIZE <= 576 && c + CROP_SIZE <= 720);
        let src = s.source();
        let f = s.fundus_crop();
        let a = s.angio_crop();
        assert_eq!((f.height(), f.width(), a.height(), a.width()), (512, 512, 512, 512));
        assert_eq!(f, src.fundus.crop(r, c, CROP_SIZE, CROP_SIZE).unwrap());
        assert_eq!(a, src.angiogram.crop(r, c, CROP_SIZE, CROP_SIZE).unwrap());
    }
    let eval = load_split(dir.path(), None, Split::Eval, 1).unwrap();
    assert_eq!(eval.len(), 2);
}

#[test]
fn sample_list_is_a_function_of_manifest_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), 3, 0, 80, 96);
    let offsets = |workers, seed| {
        let pairs = load_split(dir.path(), None, Split::Train, workers).unwrap();
        build_samples(&pairs, 5, 64, seed)
            .unwrap()
            .iter()
            .map(|s| (s.pair_id.clone(), s.offset))
            .collect::<Vec<_>>()
    };
    assert_eq!(offsets(1, 7), offsets(3, 7));
    assert_ne!(offsets(1, 7), offsets(1, 8));
}

#[test]
fn sample_cache_round_trips_and_rejects_stale_keys() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), 2, 0, 80, 96);
    let pairs = load_split(dir.path(), None, Split::Train, 1).unwrap();
    let samples = build_samples(&pairs, 3, 64, 1).unwrap();
    let key = CacheKey {
        manifest_hash: dataset_hash(dir.path(), None).unwrap(),
        seed: 1,
        n: 3,
        size: 64,
    };
    let path = dir.path().join("cache.json");
    SampleCache::from_samples(key.clone(), &samples).save(&path).unwrap();
    let back = SampleCache::load_matching(&path, &key).unwrap().unwrap().samples(&pairs).unwrap();
    let offsets = |v: &[PairedSample]| v.iter().map(|s| (s.pair_id.clone(), s.offset)).collect::<Vec<_>>();
    assert_eq!(offsets(&back), offsets(&samples));
    let stale = CacheKey { seed: 2, ..key };
    assert!(SampleCache::load_matching(&path, &stale).unwrap().is_none());
}

#[test]
fn missing_image_names_the_pair() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), 2, 0, 80, 96);
    std::fs::remove_file(dir.path().join(ANGIO_DIR).join("pair01.png")).unwrap();
    match load_split(dir.path(), None, Split::Train, 1) {
        Err(angiogan::Error::Ingestion { stem, .. }) => assert_eq!(stem, "pair01"),
        other => panic!("expected an ingestion error, got {:?}", other.map(|p| p.len())),
    }
}

#[test]
fn colour_angiograms_are_averaged_to_one_channel() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), 1, 0, 64, 64);
    let rgb = ImageTensor::new(ndarray::Array3::from_shape_fn((3, 64, 64), |(c, _, _)| normalize([30, 90, 240][c])));
    rgb.save(&dir.path().join(ANGIO_DIR).join("pair00.png")).unwrap();
    let pairs = load_split(dir.path(), None, Split::Train, 1).unwrap();
    let a = &pairs[0].angiogram;
    assert_eq!(a.channels(), 1);
    let expect = (normalize(30) + normalize(90) + normalize(240)) / 3.0;
    assert!(a.data().iter().all(|v| (v - expect).abs() < 1e-12));
}

#[test]
fn dataset_hash_tracks_image_bytes() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), 2, 1, 64, 64);
    let h1 = dataset_hash(dir.path(), None).unwrap();
    assert_eq!(h1, dataset_hash(dir.path(), None).unwrap());
    ImageTensor::zeros(1, 64, 64).save(&dir.path().join(ANGIO_DIR).join("pair02.png")).unwrap();
    assert_ne!(h1, dataset_hash(dir.path(), None).unwrap());
}

proptest! {
    #[test]
    fn crops_are_aligned_and_counted(
        h in 64usize..120, w in 64usize..120, n in 1usize..12, pairs in 1usize..4, seed in any::<u64>(),
    ) {
        let list: Vec<_> = (0..pairs).map(|i| synthetic_pair(&format!("p{i}"), h, w, i as f64)).collect();
        let samples = build_samples(&list, n, 64, seed).unwrap();
        prop_assert_eq!(samples.len(), pairs * n);
        for s in &samples {
            prop_assert!(s.offset.0 + 64 <= h && s.offset.1 + 64 <= w);
            let (r, c) = s.offset;
            prop_assert_eq!(s.angio_crop(), s.source().angiogram.crop(r, c, 64, 64).unwrap());
            prop_assert_eq!(s.fundus_crop(), s.source().fundus.crop(r, c, 64, 64).unwrap());
        }
    }

    #[test]
    fn normalization_is_a_bijection_on_bytes(v in any::<u8>()) {
        let t = normalize(v);
        prop_assert!((-1.0..=1.0).contains(&t));
        prop_assert_eq!(denormalize(t), v);
    }
}
