use std::fs;

use selfcal_core::datasets::{
    generate_synthetic, load_image, load_manifest, load_manifest_with, load_mask, render_synthetic, tensor_to_rgb,
    BackgroundMode, SyntheticConfig, SYNTHETIC_FG_RANGE,
};
use selfcal_core::Error;

fn cfg(seed: u64) -> SyntheticConfig {
    SyntheticConfig {
        num_images: 24,
        image_size: 48,
        num_categories: 4,
        background_mode: BackgroundMode::Textured,
        seed,
    }
}

#[test]
fn synthetic_rendering_is_a_pure_function_of_seed_and_index() {
    let c = cfg(7);
    for i in [0, 5, 23] {
        let a = render_synthetic(&c, i);
        let b = render_synthetic(&c, i);
        assert_eq!(a.image, b.image);
        assert_eq!(a.mask, b.mask);
    }
    assert_ne!(render_synthetic(&c, 3).image, render_synthetic(&cfg(8), 3).image);
}

#[test]
fn synthetic_masks_stay_within_foreground_bounds() {
    let (lo, hi) = SYNTHETIC_FG_RANGE;
    for seed in 0..3 {
        let c = cfg(seed);
        for i in 0..c.num_images {
            let s = render_synthetic(&c, i);
            let frac = s.mask.foreground() as f64 / s.mask.len() as f64;
            assert!((lo..=hi).contains(&frac), "seed {seed} image {i}: {frac}");
            assert_eq!(s.category, i % c.num_categories);
            assert_eq!(s.shape.rasterize(c.image_size), s.mask);
        }
    }
}

#[test]
fn generated_split_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let c = cfg(2);
    let written = generate_synthetic(&c, dir.path(), "train").unwrap();
    let loaded = load_manifest(&dir.path().join("train.csv")).unwrap();
    assert_eq!(loaded.entries, written.entries);
    assert_eq!(loaded.num_categories, 4);
    assert!(loaded.synthetic);
    assert_eq!(loaded.content_hash(), written.content_hash());
    for i in 0..loaded.len() {
        let mask = load_mask(&loaded.label_path(i).unwrap()).unwrap();
        assert_eq!(mask, render_synthetic(&c, i).mask);
    }
}

#[test]
fn image_loading_is_idempotent_at_native_size() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_synthetic(&cfg(4), dir.path(), "test").unwrap();
    let first = load_image(&m.image_path(0), 48).unwrap();
    let again = dir.path().join("again.png");
    tensor_to_rgb(&first).save(&again).unwrap();
    let second = load_image(&again, 48).unwrap();
    assert_eq!(first.pixels().data, second.pixels().data);
    let small = load_image(&m.image_path(0), 20).unwrap();
    assert_eq!((small.height(), small.width()), (20, 20));
}

fn write(dir: &std::path::Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn malformed_manifests_are_rejected_with_typed_errors() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let empty = write(d, "empty.csv", "");
    assert!(matches!(load_manifest(&empty), Err(Error::EmptyManifest)));
    let header_only = write(d, "h.csv", "image_path,category_id,label_path\n");
    assert!(matches!(load_manifest(&header_only), Err(Error::EmptyManifest)));
    let bad_header = write(d, "b.csv", "img,cat\na.png,0\n");
    assert!(matches!(
        load_manifest(&bad_header),
        Err(Error::MalformedRow { line: 1, .. })
    ));
    let bad_cat = write(d, "c.csv", "image_path,category_id,label_path\na.png,x,\n");
    assert!(matches!(
        load_manifest(&bad_cat),
        Err(Error::MalformedRow { line: 2, .. })
    ));
    let dup = write(d, "d.csv", "image_path,category_id,label_path\na.png,0,\na.png,1,\n");
    assert!(matches!(load_manifest(&dup), Err(Error::DuplicateImage(_))));
    let range = write(d, "r.csv", "image_path,category_id,label_path\na.png,0,\nb.png,5,\n");
    assert!(matches!(
        load_manifest_with(&range, 3),
        Err(Error::CategoryOutOfRange {
            line: 3,
            category: 5,
            ..
        })
    ));
    // without a sidecar the category count is inferred
    assert_eq!(load_manifest(&range).unwrap().num_categories, 6);
    let unlabeled = write(d, "u.csv", "image_path,category_id,label_path\na.png,,\n");
    let m = load_manifest(&unlabeled).unwrap();
    assert!(matches!(m.require_categories(), Err(Error::MissingCategory(_))));
}
