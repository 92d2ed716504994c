use super::*;
use std::collections::HashSet;

fn write_png(path: &Path, w: u32, h: u32, f: impl Fn(u32, u32) -> [u8; 3]) {
    RgbImage::from_fn(w, h, |x, y| image::Rgb(f(x, y))).save(path).unwrap();
}

fn fixture() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a.png", "b.png", "c.png"] {
        write_png(&dir.path().join(name), 4, 4, |_, _| [10, 20, 30]);
    }
    let path = dir.path().join("manifest.jsonl");
    (dir, path)
}

#[test]
fn manifest_loads_in_file_order() {
    let (_dir, path) = fixture();
    fs::write(
        &path,
        concat!(
            r#"{"image":"b.png","captions":["x","y"],"split":"train"}"#, "\n",
            r#"{"image":"a.png","captions":["z"],"split":"train"}"#, "\n",
            r#"{"image":"c.png","captions":["w"],"split":"test"}"#, "\n",
        ),
    )
    .unwrap();
    let m = load_manifest(&path).unwrap();
    assert_eq!(m.records.len(), 3);
    assert_eq!(m.records[0].image, "b.png");
    assert_eq!(m.split("train").len(), 2);
    assert_eq!(load_manifest(&path).unwrap(), m);
}

#[test]
fn manifest_errors_name_the_line() {
    let (_dir, path) = fixture();
    let cases = [
        (r#"{"image":"b.png","captions":[],"split":"train"}"#, "empty"),
        (r#"{"image":"missing.png","captions":["x"],"split":"train"}"#, "does not exist"),
        (r#"{"image":"a.png","captions":["x"],"split":"test"}"#, "also listed"),
        (r#"{"image":"b.png""#, ""),
    ];
    for (bad, needle) in cases {
        let ok = r#"{"image":"a.png","captions":["x"],"split":"train"}"#;
        fs::write(&path, format!("{ok}\n{bad}\n")).unwrap();
        match load_manifest(&path) {
            Err(Error::Manifest { line, reason, .. }) => {
                assert_eq!(line, 2);
                assert!(reason.contains(needle), "{reason}");
            }
            other => panic!("expected a manifest error, got {other:?}"),
        }
    }
}

#[test]
fn preprocess_square_and_gray() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("g.png");
    write_png(&p, 448, 448, |_, _| [128, 128, 128]);
    let t = preprocess(&p, 224, PixelRange::Symmetric).unwrap();
    assert_eq!(t.shape(), &[3, 224, 224]);
    // 8-bit storage has no exact midpoint; 128 sits half a level above it.
    assert!(t.data().iter().all(|v| v.abs() <= 1.0 / 255.0 + 1e-12));
}

#[test]
fn preprocess_crops_then_resamples() {
    // Red = x² mod 256, green = y over a 300×200 image.
    let img = RgbImage::from_fn(300, 200, |x, y| image::Rgb([((x * x) % 256) as u8, y as u8, 0]));
    let t = preprocess_rgb(&img, 16, PixelRange::Symmetric);
    // Crop starts at x = 50; scale 200/16 = 12.5. Output (y=1, x=1) samples
    // crop (18.25, 18.25), i.e. source x 68.25 between 68 (4624 mod 256 = 16)
    // and 69 (4761 mod 256 = 153): red 0.75·16 + 0.25·153 = 50.25, green 18.25.
    let at = |c: usize| t.data()[c * 256 + 16 + 1];
    assert!((at(0) - (50.25 / 127.5 - 1.0)).abs() < 1e-12);
    assert!((at(1) - (18.25 / 127.5 - 1.0)).abs() < 1e-12);
    assert_eq!(at(2), -1.0);
}

#[test]
fn backbone_range_matches_mapping() {
    let img = RgbImage::from_fn(8, 8, |x, _| image::Rgb([(x * 30) as u8, 7, 250]));
    let sym = preprocess_rgb(&img, 8, PixelRange::Symmetric);
    let bb = preprocess_rgb(&img, 8, PixelRange::Backbone);
    let expected = crate::backbone::to_backbone_space(&galip_autograd::Var::constant(sym.reshape(vec![1, 3, 8, 8])));
    assert!(bb.reshape(vec![1, 3, 8, 8]).bit_eq(expected.value()));
}

#[test]
fn undecodable_image_fails() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.png");
    fs::write(&p, b"not an image").unwrap();
    assert!(matches!(preprocess(&p, 8, PixelRange::Symmetric), Err(Error::Image { .. })));
}

#[test]
fn batches_are_seeded() {
    let ds = toy::dataset(toy::ToyConfig { count: 32, ..Default::default() });
    let first = |seed| BatchIter::new(ds.len(), 8, seed).unwrap().next_batch(&ds);
    let a = first(3);
    let b = first(3);
    assert_eq!(a.indices, b.indices);
    assert_eq!(a.captions, b.captions);
    assert!(a.images.bit_eq(&b.images));
    let distinct: HashSet<Vec<usize>> = (0..5).map(|s| first(s).indices).collect();
    assert!(distinct.len() > 1);
}

#[test]
fn every_record_once_per_epoch_and_distinct_within_batch() {
    let mut it = BatchIter::new(10, 3, 0).unwrap();
    for _ in 0..4 {
        let mut seen = Vec::new();
        for _ in 0..3 {
            let b = it.next_indices(|_| 1);
            let idx: HashSet<usize> = b.iter().map(|p| p.0).collect();
            assert_eq!(idx.len(), 3);
            seen.extend(idx);
        }
        let unique: HashSet<usize> = seen.iter().copied().collect();
        assert_eq!(unique.len(), 9, "one record dropped per epoch, none repeated");
    }
}

#[test]
fn caption_sampling_is_uniform() {
    let mut it = BatchIter::new(1, 1, 11).unwrap();
    let mut counts = [0usize; 10];
    for _ in 0..1000 {
        counts[it.next_indices(|_| 10)[0].1] += 1;
    }
    assert!(counts.iter().all(|&c| (60..=140).contains(&c)), "{counts:?}");
}

#[test]
fn oversize_batch_is_rejected() {
    assert!(BatchIter::new(4, 5, 0).is_err());
}

#[test]
fn coco_and_folder_conversion() {
    let dir = tempfile::tempdir().unwrap();
    let ann = dir.path().join("captions.json");
    fs::write(
        &ann,
        r#"{"images":[{"id":1,"file_name":"1.jpg"},{"id":2,"file_name":"2.jpg"},{"id":3,"file_name":"3.jpg"}],
            "annotations":[{"image_id":2,"caption":"b "},{"image_id":1,"caption":"a"},{"image_id":2,"caption":"c"}]}"#,
    )
    .unwrap();
    let recs = convert_coco(&ann, "train2014", "train").unwrap();
    assert_eq!(recs.len(), 2);
    assert_eq!(recs[1].image, "train2014/2.jpg");
    assert_eq!(recs[1].captions, vec!["b", "c"]);

    let (fdir, _) = fixture();
    fs::write(fdir.path().join("a.txt"), "first\n\nsecond\n").unwrap();
    fs::write(fdir.path().join("c.txt"), "third\n").unwrap();
    let recs = convert_folder(fdir.path(), "val").unwrap();
    assert_eq!(recs.len(), 2);
    assert_eq!(recs[0].captions, vec!["first", "second"]);
    let out = fdir.path().join("m.jsonl");
    DatasetManifest::write(&out, &recs).unwrap();
    assert_eq!(load_manifest(&out).unwrap().records, recs);
}

#[test]
fn rgb_roundtrip() {
    let t = Tensor::new(vec![3, 1, 2], vec![-1.0, 1.0, 0.0, 0.5, 2.0, -3.0]);
    let img = to_rgb8(&t);
    assert_eq!(img.get_pixel(0, 0).0, [0, 128, 255]);
    assert_eq!(img.get_pixel(1, 0).0, [255, 191, 0]);
}
