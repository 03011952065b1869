use std::path::Path;

use llvq::core::train::{BlobParams, DatasetRef, DatasetSource};
use llvq::data::{load_idx, load_idx_images, load_idx_labels, load_image_folder, resolve, synth_blobs, DataError, DATA_DIR_ENV};

/// Independent IDX writer: magic, big-endian dims, raw bytes.
fn idx_bytes(magic: u32, dims: &[u32], payload: &[u8]) -> Vec<u8> {
    let mut out = magic.to_be_bytes().to_vec();
    for d in dims {
        out.extend_from_slice(&d.to_be_bytes());
    }
    out.extend_from_slice(payload);
    out
}

fn write(path: &Path, bytes: &[u8]) {
    std::fs::write(path, bytes).unwrap();
}

/// Two 3x2 images with known bytes.
fn two_images() -> (Vec<u8>, Vec<u8>) {
    let pixels: Vec<u8> = vec![0, 51, 102, 153, 204, 255, 255, 0, 1, 2, 3, 4];
    (idx_bytes(0x803, &[2, 3, 2], &pixels), idx_bytes(0x801, &[2], &[7, 9]))
}

#[test]
fn idx_pixels_and_labels() {
    let dir = tempfile::tempdir().unwrap();
    let (img, lab) = two_images();
    let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
    write(&ip, &img);
    write(&lp, &lab);
    let ds = load_idx(&ip, &lp).unwrap();
    assert_eq!(ds.len(), 2);
    let s = ds.shape(1);
    assert_eq!((s.h, s.w, s.c), (3, 2, 1));
    assert_eq!(ds.labels(), Some(&[7u8, 9][..]));
    let expect: Vec<f32> = [0u8, 51, 102, 153, 204, 255].iter().map(|&b| b as f32 / 255.0).collect();
    assert_eq!(ds.image(0), &expect[..]);
    assert_eq!(ds.image(1)[0], 1.0);
    assert_eq!(ds.image(1)[1], 0.0);
}

#[test]
fn idx_bad_magic() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("img");
    write(&p, &idx_bytes(0x801, &[1, 1, 1], &[0]));
    match load_idx_images(&p) {
        Err(DataError::BadMagic { expected, found, .. }) => assert_eq!((expected, found), (0x803, 0x801)),
        other => panic!("expected bad magic, got {other:?}"),
    }
    let l = dir.path().join("lab");
    write(&l, &idx_bytes(0x803, &[1], &[0]));
    assert!(matches!(load_idx_labels(&l), Err(DataError::BadMagic { .. })));
}

#[test]
fn idx_truncated_payload_and_header() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("img");
    write(&p, &idx_bytes(0x803, &[2, 2, 2], &[0; 7]));
    match load_idx_images(&p) {
        Err(DataError::Truncated { expected, actual, .. }) => assert!(actual < expected),
        other => panic!("expected truncation, got {other:?}"),
    }
    write(&p, &[0, 0, 8]);
    assert!(matches!(load_idx_images(&p), Err(DataError::Truncated { .. })));
}

#[test]
fn idx_label_count_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let (img, _) = two_images();
    let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
    write(&ip, &img);
    write(&lp, &idx_bytes(0x801, &[3], &[1, 2, 3]));
    assert!(matches!(
        load_idx(&ip, &lp),
        Err(DataError::CountMismatch { header: 2, found: 3, .. })
    ));
}

#[test]
fn missing_file_names_path() {
    let err = load_idx_images(Path::new("/nonexistent/llvq/images")).unwrap_err();
    assert!(err.to_string().contains("/nonexistent/llvq/images"));
}

#[test]
fn subset_is_seed_deterministic() {
    let params = BlobParams {
        clusters: 3,
        samples: 40,
        noise: 0.1,
        size: 6,
        channels: 1,
    };
    let ds = synth_blobs(&params, 1).unwrap();
    let a = ds.subset(10, 5);
    let b = ds.subset(10, 5);
    let c = ds.subset(10, 6);
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(a.len(), 10);
    // every subset image is one of the originals
    for i in 0..a.len() {
        assert!((0..ds.len()).any(|j| ds.image(j) == a.image(i)));
    }
    assert_eq!(ds.subset(100, 0), ds);
}

#[test]
fn image_folder_crops_and_scales() {
    let dir = tempfile::tempdir().unwrap();
    // 6x4 image: left and right thirds black, central 4x4 white
    let img = image::GrayImage::from_fn(6, 4, |x, _| image::Luma([if (1..5).contains(&x) { 255 } else { 0 }]));
    img.save(dir.path().join("a.png")).unwrap();
    let rgb = image::RgbImage::from_pixel(4, 4, image::Rgb([255, 0, 0]));
    rgb.save(dir.path().join("b.png")).unwrap();
    std::fs::write(dir.path().join("notes.txt"), "skip me").unwrap();

    let ds = load_image_folder(dir.path(), 2, 1).unwrap();
    assert_eq!(ds.len(), 2);
    assert!(ds.image(0).iter().all(|&p| p == 1.0), "{:?}", ds.image(0));
    let colour = load_image_folder(dir.path(), 2, 3).unwrap();
    assert_eq!(&colour.image(1)[..3], &[1.0, 0.0, 0.0]);
    assert!(matches!(load_image_folder(dir.path(), 0, 1), Err(DataError::InvalidParams(_))));

    let empty = tempfile::tempdir().unwrap();
    assert!(matches!(load_image_folder(empty.path(), 4, 1), Err(DataError::NoImages(_))));
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| f64::from(x - y).powi(2)).sum()
}

/// Plain Lloyd iterations from one seed image per cluster.
fn lloyd(images: &[&[f32]], init: &[usize], iters: usize) -> Vec<usize> {
    let mut centers: Vec<Vec<f32>> = init.iter().map(|&i| images[i].to_vec()).collect();
    let mut assign = vec![0; images.len()];
    for _ in 0..iters {
        for (a, img) in assign.iter_mut().zip(images) {
            *a = (0..centers.len())
                .min_by(|&i, &j| sq_dist(img, &centers[i]).total_cmp(&sq_dist(img, &centers[j])))
                .unwrap();
        }
        for (k, c) in centers.iter_mut().enumerate() {
            let members: Vec<_> = images.iter().zip(&assign).filter(|(_, &a)| a == k).map(|(m, _)| *m).collect();
            if members.is_empty() {
                continue;
            }
            for (p, v) in c.iter_mut().enumerate() {
                *v = members.iter().map(|m| m[p]).sum::<f32>() / members.len() as f32;
            }
        }
    }
    assign
}

#[test]
fn blobs_are_recovered_by_kmeans() {
    let params = BlobParams {
        clusters: 4,
        samples: 80,
        noise: 0.05,
        size: 12,
        channels: 1,
    };
    let ds = synth_blobs(&params, 11).unwrap();
    let labels = ds.labels().unwrap();
    let images: Vec<&[f32]> = (0..ds.len()).map(|i| ds.image(i)).collect();
    let assign = lloyd(&images, &[0, 1, 2, 3], 10);
    // clustering must agree with the labels up to a permutation
    for i in 0..ds.len() {
        for j in 0..ds.len() {
            assert_eq!(labels[i] == labels[j], assign[i] == assign[j], "items {i} and {j}");
        }
    }
    assert!(ds.pixels().iter().all(|p| (0.0..=1.0).contains(p)));
    assert_eq!(synth_blobs(&params, 11).unwrap(), ds);
}

#[test]
fn blob_params_are_validated() {
    let bad = BlobParams {
        clusters: 0,
        samples: 4,
        noise: 0.0,
        size: 4,
        channels: 1,
    };
    assert!(matches!(synth_blobs(&bad, 0), Err(DataError::InvalidParams(_))));
    let nan = BlobParams {
        clusters: 2,
        noise: f64::NAN,
        ..bad
    };
    assert!(matches!(synth_blobs(&nan, 0), Err(DataError::InvalidParams(_))));
}

// The only test in this binary that touches the environment.
#[test]
fn relative_paths_resolve_against_data_dir() {
    let dir = tempfile::tempdir().unwrap();
    let (img, _) = two_images();
    write(&dir.path().join("imgs"), &img);
    std::env::set_var(DATA_DIR_ENV, dir.path());
    let dref = DatasetRef {
        source: DatasetSource::Idx { images: "imgs".into() },
        subset: Some(1),
        subset_seed: 3,
    };
    let ds = resolve(&dref).unwrap();
    let zero = resolve(&DatasetRef { subset: Some(0), ..dref });
    std::env::remove_var(DATA_DIR_ENV);
    assert_eq!(ds.len(), 1);
    assert!(matches!(zero, Err(DataError::Empty)));
}
