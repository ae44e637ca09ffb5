use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trackcore::moteval::{format_mot, parse_mot};
use trackcore::{clearmot, idf1, BBox, MotRecord};

fn rec(frame: u32, id: i64, x: f64) -> MotRecord {
    MotRecord::new(frame, id, &BBox::new(x, 0.0, 50.0, 100.0).unwrap(), 1.0)
}

fn round4(x: f64) -> f64 {
    (x * 1e4).round() / 1e4
}

#[test]
fn hundred_random_records_survive_a_file_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut records: Vec<MotRecord> = (0..100)
        .map(|_| MotRecord {
            frame: rng.random_range(1..50),
            id: rng.random_range(1..30),
            x: rng.random_range(-20.0..600.0),
            y: rng.random_range(-20.0..600.0),
            w: rng.random_range(1.0..90.0),
            h: rng.random_range(1.0..90.0),
            conf: rng.random(),
        })
        .collect();
    records.sort_by_key(|r| (r.frame, r.id));
    records.dedup_by_key(|r| (r.frame, r.id));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("res.txt");
    std::fs::write(&path, format_mot(&records)).unwrap();
    let back = trackcore::moteval::read_mot_file(&path).unwrap();
    assert_eq!(back, records);
    assert_eq!(format_mot(&back).as_bytes(), std::fs::read(&path).unwrap().as_slice());
}

#[test]
fn malformed_fields_report_their_line() {
    for bad in ["0,1,1,1,1,1,1,-1,-1,-1", "1,1,1,1,-3,1,1,-1,-1,-1", "1,x,1,1,1,1,1,-1,-1,-1"] {
        let text = format!("1,1,1,1,1,1,1,-1,-1,-1\n\n{bad}");
        let msg = parse_mot(&text).unwrap_err().to_string();
        assert!(msg.starts_with("line 3"), "{msg}");
    }
}

#[test]
fn identity_and_empty_results() {
    let gt: Vec<MotRecord> = (1..=6).flat_map(|f| [rec(f, 1, 0.0), rec(f, 2, 200.0)]).collect();
    let same = clearmot(&gt, &gt, 0.5);
    assert_eq!((same.mota, same.idf1, same.fp, same.fn_, same.idsw), (1.0, 1.0, 0, 0, 0));
    let none = clearmot(&gt, &[], 0.5);
    assert_eq!((none.mota, none.fn_, none.fp), (0.0, gt.len(), 0));
    assert_eq!(idf1(&gt, &[], 0.5), 0.0);
}

/// Three tracks over ten frames: result ids 101 and 102 swap targets from
/// frame 5, id 103 misses frame 3, and id 104 is a false positive at frame 8.
///
/// By hand: 30 GT boxes, FN 1, FP 1, two switches (one per swapped GT
/// track), MOTA 1 − 4/30. Track 3 goes tracked→untracked once, so Frag 1.
/// Best identity bijection 1↔102, 2↔101, 3↔103 gives IDTP 6+6+9 = 21 and
/// IDF1 = 42/(30+30).
#[test]
fn hand_worked_swap_scenario() {
    let xs = [0.0, 100.0, 200.0];
    let mut gt = Vec::new();
    let mut res = Vec::new();
    for f in 1..=10u32 {
        for (k, &x) in xs.iter().enumerate() {
            gt.push(rec(f, k as i64 + 1, x));
        }
        let (a, b) = if f < 5 { (101, 102) } else { (102, 101) };
        res.push(rec(f, a, xs[0]));
        res.push(rec(f, b, xs[1]));
        if f != 3 {
            res.push(rec(f, 103, xs[2]));
        }
        if f == 8 {
            res.push(rec(f, 104, 400.0));
        }
    }
    let r = clearmot(&gt, &res, 0.5);
    assert_eq!((r.fp, r.fn_, r.idsw, r.frag, r.gt), (1, 1, 2, 1, 30));
    assert_eq!(round4(r.mota), 0.8667);
    assert_eq!(round4(r.idf1), 0.7);
    assert_eq!(r.idtp, 21);
    assert_eq!((r.mt, r.ml), (3, 0));
}

#[test]
fn persistence_keeps_a_still_valid_match() {
    // The frame-1 hypothesis still overlaps at IoU 0.6, so it is kept and
    // the perfect newcomer becomes a false positive.
    let gt = vec![rec(1, 1, 0.0), rec(2, 1, 0.0)];
    let shifted = MotRecord::new(2, 7, &BBox::new(12.5, 0.0, 50.0, 100.0).unwrap(), 1.0);
    let res = vec![rec(1, 7, 0.0), shifted, rec(2, 8, 0.0)];
    let r = clearmot(&gt, &res, 0.5);
    assert_eq!((r.fp, r.fn_, r.idsw), (1, 0, 0));
    assert_eq!(r.mota, 0.5);
}

#[test]
fn split_track_idf1() {
    let gt: Vec<MotRecord> = (1..=10).map(|f| rec(f, 1, 0.0)).collect();
    let res: Vec<MotRecord> = (1..=10).map(|f| rec(f, if f <= 5 { 5 } else { 6 }, 0.0)).collect();
    // 2·5 / (2·5 + 5 + 5)
    assert_eq!(idf1(&gt, &res, 0.5), 0.5);
}

proptest! {
    #[test]
    fn relabeling_result_ids_changes_nothing(
        seed in any::<u64>(), shift in 1i64..1000, flip in any::<bool>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gt = Vec::new();
        let mut res = Vec::new();
        for f in 1..=12u32 {
            for k in 0..4i64 {
                let x = 120.0 * k as f64;
                gt.push(rec(f, k + 1, x));
                if rng.random::<f64>() < 0.8 {
                    let id = if rng.random::<f64>() < 0.1 { 50 + k } else { 10 + k };
                    res.push(rec(f, id, x + rng.random_range(-10.0..10.0)));
                }
            }
        }
        let relabeled: Vec<MotRecord> = res
            .iter()
            .map(|r| MotRecord { id: if flip { -r.id } else { r.id + shift }, ..*r })
            .collect();
        let a = clearmot(&gt, &res, 0.5);
        let b = clearmot(&gt, &relabeled, 0.5);
        prop_assert_eq!(a.idsw, b.idsw);
        prop_assert_eq!(a.mota, b.mota);
        prop_assert_eq!(a.idf1, b.idf1);
        prop_assert_eq!(idf1(&gt, &res, 0.5), idf1(&gt, &relabeled, 0.5));
    }
}
