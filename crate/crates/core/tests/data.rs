use std::fs;

use graftnet::data::{ingest_market_layout, ingest_split_file, parse_market_name, synth_dataset, Split, SYNTH_HW};
use graftnet::eval::{evaluate_entries, GalleryEntry};
use graftnet::Error;

#[test]
fn market_file_names() {
    assert_eq!(parse_market_name("0002_c1s1_000451_03.jpg").unwrap(), (2, 1));
    assert_eq!(parse_market_name("-1_c3s2_000100_01.jpg").unwrap(), (-1, 3));
    assert_eq!(parse_market_name("0000_c6s1_000001_00.jpg").unwrap(), (0, 6));
    assert_eq!(parse_market_name("1501_c12_000001.png").unwrap(), (1501, 12));
    for bad in ["abc_c1s1.jpg", "0002c1s1.jpg", "0002_s1c1.jpg", "0002_c0s1.jpg", "-2_c1s1.jpg", "0002_cXs1.jpg"] {
        let err = parse_market_name(bad).unwrap_err();
        assert!(err.to_string().contains(bad), "{err}");
    }
}

#[test]
fn synthetic_layout_round_trips_through_ingestion() {
    let ds = synth_dataset(3, 4, 2, 7).unwrap();
    let dir = tempfile::tempdir().unwrap();
    ds.write_market_layout(dir.path()).unwrap();
    let back = ingest_market_layout(dir.path()).unwrap();
    assert_eq!(back.counts(), ds.counts());
    for (a, b) in [(&ds.train, &back.train), (&ds.query, &back.query), (&ds.gallery, &back.gallery)] {
        for (x, y) in a.iter().zip(b) {
            assert_eq!((x.person_id, x.camera_id, x.split), (y.person_id, y.camera_id, y.split));
            // Synthetic pixels are 8-bit values, so PNG storage is lossless.
            assert_eq!(x.load(SYNTH_HW).unwrap(), y.load(SYNTH_HW).unwrap());
        }
    }
    // Counts are reproducible.
    assert_eq!(ingest_market_layout(dir.path()).unwrap().counts(), back.counts());
}

#[test]
fn ingestion_names_the_offending_file() {
    let ds = synth_dataset(2, 2, 2, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    ds.write_market_layout(dir.path()).unwrap();
    let bad = dir.path().join("query").join("person_c1.png");
    fs::copy(dir.path().join("query").join(ds.query[0].file_name(0)), &bad).unwrap();
    let err = ingest_market_layout(dir.path()).unwrap_err();
    assert!(matches!(err, Error::Data(_)));
    assert!(err.to_string().contains("person_c1.png"), "{err}");

    // Non-image files are ignored; a missing split directory is an error.
    fs::remove_file(&bad).unwrap();
    fs::write(dir.path().join("query").join("readme.txt"), "x").unwrap();
    assert!(ingest_market_layout(dir.path()).is_ok());
    fs::remove_dir_all(dir.path().join("bounding_box_test")).unwrap();
    assert!(ingest_market_layout(dir.path()).is_err());
}

#[test]
fn distractors_are_marked() {
    let ds = synth_dataset(2, 4, 2, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    ds.write_market_layout(dir.path()).unwrap();
    let gallery = dir.path().join("bounding_box_test");
    fs::copy(gallery.join(ds.gallery[0].file_name(0)), gallery.join("-1_c2s1_000001_01.png")).unwrap();
    let back = ingest_market_layout(dir.path()).unwrap();
    let distractors: Vec<_> = back.gallery.iter().filter(|s| s.is_distractor()).collect();
    assert_eq!(distractors.len(), 1);
    assert_eq!(distractors[0].person_id, -1);
    assert_eq!(back.counts().distractors, 1);
}

#[test]
fn split_file_ingestion() {
    let ds = synth_dataset(2, 4, 2, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    ds.write_market_layout(dir.path()).unwrap();
    let mut lines = String::from("# split gallery images between query and gallery roles\n");
    for (i, s) in ds.train.iter().enumerate() {
        lines += &format!("train bounding_box_train/{}\n", s.file_name(i));
    }
    for (i, s) in ds.gallery.iter().enumerate() {
        let role = if i % 2 == 0 { "query" } else { "gallery" };
        lines += &format!("{role} bounding_box_test/{}\n", s.file_name(i));
    }
    let split = dir.path().join("split.txt");
    fs::write(&split, &lines).unwrap();
    let back = ingest_split_file(dir.path(), &split).unwrap();
    assert_eq!(back.train.len(), ds.train.len());
    assert_eq!(back.query.len() + back.gallery.len(), ds.gallery.len());
    assert!(back.query.iter().all(|s| s.split == Split::Query));

    fs::write(&split, "holdout bounding_box_train/x.png\n").unwrap();
    assert!(ingest_split_file(dir.path(), &split).is_err());
    fs::write(&split, "train bounding_box_train/0001_c1_missing.png\n").unwrap();
    assert!(ingest_split_file(dir.path(), &split).is_err());
}

#[test]
fn synthetic_data_is_deterministic_and_camera_dependent() {
    let a = synth_dataset(3, 4, 2, 11).unwrap();
    let b = synth_dataset(3, 4, 2, 11).unwrap();
    assert_eq!(a, b);
    let c = synth_dataset(3, 4, 2, 12).unwrap();
    assert_ne!(a, c);
    // Same person, different cameras: images differ in mean colour.
    let same_id: Vec<_> = a.train.iter().filter(|s| s.person_id == 1).collect();
    assert!(same_id.len() >= 2 && same_id[0].camera_id != same_id[1].camera_id);
    let mean = |s: &graftnet::data::ReidSample| {
        let t = s.load(SYNTH_HW).unwrap();
        let n = t.len() / 3;
        (0..3).map(|ch| t.data()[ch * n..(ch + 1) * n].iter().sum::<f32>() / n as f32).collect::<Vec<_>>()
    };
    let (m0, m1) = (mean(same_id[0]), mean(same_id[1]));
    assert!(m0.iter().zip(&m1).map(|(x, y)| (x - y).abs()).sum::<f32>() > 0.02, "{m0:?} {m1:?}");
}

#[test]
fn raw_pixel_nearest_neighbour_beats_chance() {
    let ds = synth_dataset(16, 8, 4, 0).unwrap();
    let hw = (48, 24);
    let entry = |s: &graftnet::data::ReidSample| {
        let t = s.load(hw).unwrap();
        let mean = t.data().iter().sum::<f32>() / t.len() as f32;
        GalleryEntry::new(t.data().iter().map(|v| v - mean).collect(), s.person_id, s.camera_id)
    };
    let queries: Vec<_> = ds.query.iter().map(entry).collect();
    let gallery: Vec<_> = ds.gallery.iter().map(entry).collect();
    let report = evaluate_entries(&queries, &gallery).unwrap();
    // With 16 identities and 3 true matches among 48 gallery images, a
    // random ranking puts a match first with probability 1/16.
    assert!(report.rank1() > 2.0 / 16.0, "rank-1 {}", report.rank1());
}
