//! Dataset loading, raw format, augmentation and shuffling.

use attnforge::data::{
    augment, batches, epoch_order, gen_synthetic, load_image_dataset, load_raw_dataset, raw_from_bytes, raw_to_bytes,
    save_raw_dataset, AugmentMode, AugmentPolicy, Split, SYNTHETIC_CLASSES,
};
use std::path::Path;

fn write_png(path: &Path, rgb: [u8; 3], size: u32) {
    let img = image::RgbImage::from_fn(size, size, |x, y| image::Rgb([rgb[0], rgb[1].wrapping_add(x as u8), rgb[2].wrapping_add(y as u8)]));
    img.save(path).unwrap();
}

#[test]
fn loads_png_folders_in_lexicographic_order() {
    let dir = tempfile::tempdir().unwrap();
    for (class, colour) in [("zebra", [200, 0, 0]), ("Apple", [0, 100, 0]), ("mango", [0, 0, 50])] {
        let d = dir.path().join(class);
        std::fs::create_dir(&d).unwrap();
        write_png(&d.join("b.png"), colour, 8);
        write_png(&d.join("a.png"), colour, 8);
    }
    std::fs::write(dir.path().join("zebra").join("notes.txt"), "ignored").unwrap();
    let ds = load_image_dataset(dir.path(), 8, Some(3), Split::Train).unwrap();
    // byte order puts the capitalised name first
    assert_eq!(ds.class_names, vec!["Apple", "mango", "zebra"]);
    assert_eq!(ds.len(), 6);
    assert_eq!(ds.labels(), vec![0, 0, 1, 1, 2, 2]);
    let first = &ds.samples[0].image;
    assert_eq!(first.shape(), &[3, 8, 8]);
    assert_eq!(first.data()[0], 0.0);
    assert!((first.data()[64] - 100.0 / 255.0).abs() < 1e-7);
    assert!(ds.samples.iter().all(|s| s.image.data().iter().all(|v| (0.0..=1.0).contains(v))));

    // resizing on load
    let small = load_image_dataset(dir.path(), 4, None, Split::Test).unwrap();
    assert_eq!(small.samples[0].image.shape(), &[3, 4, 4]);

    let err = load_image_dataset(dir.path(), 8, Some(4), Split::Train).unwrap_err();
    assert!(err.is_usage() && err.to_string().contains("expected 4 classes"));
    assert!(load_image_dataset(&dir.path().join("missing"), 8, None, Split::Train).is_err());
}

#[test]
fn empty_class_directory_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir(dir.path().join("a")).unwrap();
    assert!(load_image_dataset(dir.path(), 8, None, Split::Train).is_err());
}

#[test]
fn raw_round_trip_is_bitwise() {
    let (tr, te) = gen_synthetic(6, 16, 3).unwrap();
    for ds in [tr, te] {
        let bytes = raw_to_bytes(&ds);
        assert_eq!(&bytes[..4], b"ATND");
        let back = raw_from_bytes(&bytes, ds.split).unwrap();
        assert_eq!(back, ds);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.atnd");
        save_raw_dataset(&ds, &path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), bytes);
        assert_eq!(load_raw_dataset(&path, ds.split).unwrap(), ds);
        assert!(raw_from_bytes(&bytes[..bytes.len() - 1], ds.split).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(raw_from_bytes(&bad, ds.split).is_err());
    }
}

#[test]
fn synthetic_is_deterministic_and_balanced() {
    let (a_tr, a_te) = gen_synthetic(20, 32, 7).unwrap();
    let (b_tr, b_te) = gen_synthetic(20, 32, 7).unwrap();
    assert_eq!(raw_to_bytes(&a_tr), raw_to_bytes(&b_tr));
    assert_eq!(raw_to_bytes(&a_te), raw_to_bytes(&b_te));
    let (c_tr, _) = gen_synthetic(20, 32, 8).unwrap();
    assert_ne!(a_tr, c_tr);
    assert_eq!(a_tr.class_names, SYNTHETIC_CLASSES.to_vec());
    assert_eq!(a_tr.class_counts(), vec![16; 4]);
    assert_eq!(a_te.class_counts(), vec![4; 4]);
    assert!(gen_synthetic(20, 8, 0).is_err());
}

#[test]
fn augmentation_keeps_labels_and_range() {
    let (tr, te) = gen_synthetic(3, 16, 0).unwrap();
    let d8 = augment(&tr, AugmentPolicy { mode: AugmentMode::Dihedral8, train_only: true }, 0).unwrap();
    assert_eq!(d8.len(), tr.len() * 8);
    for (i, s) in tr.samples.iter().enumerate() {
        let group = &d8.samples[i * 8..i * 8 + 8];
        assert!(group.iter().all(|g| g.label == s.label));
        assert!(group.iter().any(|g| g.image == s.image));
        // the generator's images have no dihedral symmetry
        for a in 0..8 {
            for b in a + 1..8 {
                assert_ne!(group[a].image, group[b].image);
            }
        }
    }
    assert!(d8.samples.iter().all(|s| s.image.data().iter().all(|v| (0.0..=1.0).contains(v))));

    let rf = augment(&tr, AugmentPolicy { mode: AugmentMode::RandomRotFlip, train_only: true }, 5).unwrap();
    assert_eq!(rf.len(), tr.len() * 2);
    assert_eq!(rf.labels()[tr.len()..], tr.labels()[..]);
    assert_eq!(rf, augment(&tr, AugmentPolicy { mode: AugmentMode::RandomRotFlip, train_only: true }, 5).unwrap());

    // test split passes through under train_only
    assert_eq!(augment(&te, AugmentPolicy { mode: AugmentMode::Dihedral8, train_only: true }, 0).unwrap(), te);
}

#[test]
fn epoch_orders_are_seeded_permutations() {
    let a = epoch_order(100, 0, 0);
    let b = epoch_order(100, 0, 1);
    assert_ne!(a, b);
    assert_eq!(a, epoch_order(100, 0, 0));
    assert_ne!(a, epoch_order(100, 1, 0));
    let mut s = a.clone();
    s.sort();
    assert_eq!(s, (0..100).collect::<Vec<_>>());
}

#[test]
fn last_partial_batch_is_kept() {
    let (tr, _) = gen_synthetic(10, 16, 0).unwrap();
    let sizes: Vec<usize> = batches(&tr, 12, 0, 0).unwrap().map(|b| b.unwrap().1.len()).collect();
    assert_eq!(sizes, vec![12, 12, 8]);
    assert!(batches(&tr, 0, 0, 0).is_err());
}
