use std::f64::consts::PI;

use patt::autodiff::{Array, Mode, ParamStore, Tape};
use patt::cloud::{ball_windows, dist2, fps, grid_pool, grid_unpool, knn_query, Point3, PointCloud};
use patt::data::{load_boxes, save_boxes};
use patt::eval::{bev_rotated_iou, hop_counts, nms_indices, ConfusionMatrix};
use patt::model::{wrap_angle, Box3D};
use patt::train::{cosine_lr, hungarian_match};
use proptest::prelude::*;

fn cloud(max: usize) -> impl Strategy<Value = Vec<Point3>> {
    prop::collection::vec(prop::array::uniform3(-5.0f64..5.0), 1..max)
}

fn footprint() -> impl Strategy<Value = Box3D> {
    (-4.0f64..4.0, -4.0f64..4.0, 0.2f64..3.0, 0.2f64..3.0, -PI..PI, 0.0f64..1.0)
        .prop_map(|(x, y, dx, dy, yaw, s)| Box3D::new([x, y, 0.0], [dx, dy, 1.0], yaw, 0).with_score(s))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ball_windows_are_in_radius_and_capped(c in cloud(120), r in 0.2f64..3.0, m in 1usize..24) {
        let w = ball_windows(&c, r, m).unwrap();
        for (i, win) in w.iter().enumerate() {
            let inside = (0..c.len()).filter(|&j| dist2(&c[i], &c[j]) <= r * r).count();
            prop_assert_eq!(win.len(), inside.min(m));
            prop_assert!(win.iter().all(|&j| dist2(&c[i], &c[j]) <= r * r));
            prop_assert!(win.windows(2).all(|p| p[0] < p[1]));
        }
    }

    #[test]
    fn larger_windows_extend_smaller(c in cloud(80), r in 0.2f64..3.0, m in 1usize..16) {
        let a = ball_windows(&c, r, m).unwrap();
        let b = ball_windows(&c, r, m + 4).unwrap();
        for i in 0..c.len() {
            prop_assert!(a.window(i).iter().all(|j| b.window(i).contains(j)));
        }
        let src: Vec<usize> = (0..c.len().min(4)).collect();
        let (ha, hb) = (hop_counts(&a, &src).unwrap(), hop_counts(&b, &src).unwrap());
        for (x, y) in ha.iter().zip(&hb) {
            prop_assert!(y.unwrap_or(usize::MAX) <= x.unwrap_or(usize::MAX));
        }
    }

    #[test]
    fn knn_is_the_nearest_set(c in cloud(100), k in 1usize..12) {
        let k = k.min(c.len());
        let all: Vec<usize> = (0..c.len()).collect();
        let w = knn_query(&c, &all, k).unwrap();
        for i in 0..c.len() {
            let win = w.window(i);
            prop_assert_eq!(win.len(), k);
            let worst = win.iter().map(|&j| dist2(&c[i], &c[j])).fold(0.0, f64::max);
            let closer = (0..c.len()).filter(|&j| dist2(&c[i], &c[j]) < worst).count();
            prop_assert!(closer < k);
            prop_assert!(win.contains(&i) || (0..c.len()).filter(|&j| dist2(&c[i], &c[j]) == 0.0).count() > k);
        }
    }

    #[test]
    fn fps_is_greedy_and_distinct(c in cloud(60), n in 1usize..20, s in 0usize..1000) {
        let n = n.min(c.len());
        let start = s % c.len();
        let p = fps(&c, n, start).unwrap();
        prop_assert_eq!(p[0], start);
        let mut seen = p.clone();
        seen.sort_unstable();
        seen.dedup();
        prop_assert_eq!(seen.len(), n);
        for t in 1..n {
            let gap = |j: usize| p[..t].iter().map(|&q| dist2(&c[q], &c[j])).fold(f64::INFINITY, f64::min);
            let best = (0..c.len()).filter(|j| !p[..t].contains(j)).map(gap).fold(f64::NEG_INFINITY, f64::max);
            prop_assert_eq!(gap(p[t]), best);
        }
    }

    #[test]
    fn pooling_means_and_maxes(c in cloud(80), cell in 0.3f64..4.0) {
        let feats: Vec<f64> = (0..c.len()).map(|i| (i as f64 * 0.37).sin()).collect();
        let pc = PointCloud::new(c.clone(), feats.clone(), 1).unwrap();
        let (coarse, map) = grid_pool(&pc, cell).unwrap();
        prop_assert_eq!(map.fine_len(), c.len());
        for g in 0..coarse.len() {
            let members: Vec<usize> = (0..c.len()).filter(|&i| map.assign()[i] == g).collect();
            prop_assert!(!members.is_empty());
            for a in 0..3 {
                let mean = members.iter().map(|&i| c[i][a]).sum::<f64>() / members.len() as f64;
                prop_assert!((coarse.coords()[g][a] - mean).abs() < 1e-9);
            }
            let mx = members.iter().map(|&i| feats[i]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert_eq!(coarse.feat_row(g)[0], mx);
        }
        let back = grid_unpool(&Array::new(vec![coarse.len(), 1], coarse.feats().to_vec()).unwrap(), &map).unwrap();
        for i in 0..c.len() {
            prop_assert!(back.data()[i] >= feats[i]);
        }
    }

    #[test]
    fn iou_is_symmetric_bounded_and_reflexive(a in footprint(), b in footprint()) {
        let ab = bev_rotated_iou(&a, &b);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((ab - bev_rotated_iou(&b, &a)).abs() < 1e-9);
        prop_assert!((bev_rotated_iou(&a, &a) - 1.0).abs() < 1e-9);
        let turned = Box3D::new(a.center, a.size, a.yaw + PI, 0);
        prop_assert!((bev_rotated_iou(&a, &turned) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn nms_keeps_separated_and_covers_dropped(boxes in prop::collection::vec(footprint(), 0..15), t in 0.05f64..0.8) {
        let keep = nms_indices(&boxes, t, 0.1);
        for (x, &i) in keep.iter().enumerate() {
            for &j in &keep[..x] {
                prop_assert!(bev_rotated_iou(&boxes[i], &boxes[j]) <= t);
                prop_assert!(boxes[j].score >= boxes[i].score);
            }
        }
        for i in (0..boxes.len()).filter(|i| !keep.contains(i) && boxes[*i].score > 0.1) {
            prop_assert!(keep.iter().any(|&k| boxes[k].score >= boxes[i].score && bev_rotated_iou(&boxes[k], &boxes[i]) > t));
        }
    }

    #[test]
    fn wrap_angle_range_and_period(a in -100.0f64..100.0) {
        let w = wrap_angle(a);
        prop_assert!(w > -PI && w <= PI);
        prop_assert!((w.sin() - a.sin()).abs() < 1e-9 && (w.cos() - a.cos()).abs() < 1e-9);
    }

    #[test]
    fn hungarian_beats_every_greedy_order(rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
        let cost: Vec<f64> = (0..rows * cols).map(|k| ((seed.wrapping_mul(k as u64 + 1) >> 11) % 1000) as f64 / 100.0).collect();
        let got = hungarian_match(&cost, rows, cols).unwrap();
        prop_assert_eq!(got.len(), rows.min(cols));
        let mut rs: Vec<usize> = got.iter().map(|p| p.0).collect();
        let mut cs: Vec<usize> = got.iter().map(|p| p.1).collect();
        rs.dedup();
        cs.sort_unstable();
        cs.dedup();
        prop_assert_eq!(rs.len(), got.len());
        prop_assert_eq!(cs.len(), got.len());
        let total: f64 = got.iter().map(|&(i, j)| cost[i * cols + j]).sum();
        // greedy row-by-row cheapest free column is a feasible assignment
        let mut used = vec![false; cols];
        let mut greedy = 0.0;
        let mut taken = 0;
        for i in 0..rows {
            if taken == cols {
                break;
            }
            let j = (0..cols).filter(|&j| !used[j]).min_by(|&a, &b| cost[i * cols + a].total_cmp(&cost[i * cols + b])).unwrap();
            used[j] = true;
            taken += 1;
            greedy += cost[i * cols + j];
        }
        if rows <= cols {
            prop_assert!(total <= greedy + 1e-9);
        }
    }

    #[test]
    fn boxes_round_trip(boxes in prop::collection::vec(footprint(), 0..8)) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.txt");
        save_boxes(&p, &boxes).unwrap();
        let back = load_boxes(&p).unwrap();
        prop_assert_eq!(back.len(), boxes.len());
        for (a, b) in boxes.iter().zip(&back) {
            prop_assert_eq!(a.center, b.center);
            prop_assert_eq!(a.size, b.size);
            prop_assert_eq!(wrap_angle(a.yaw), b.yaw);
        }
    }

    #[test]
    fn cosine_schedule_decreases(total in 1usize..500, base in 1e-4f64..1.0, frac in 0.0f64..1.0) {
        let min = base * frac;
        let mut prev = f64::INFINITY;
        for s in 0..=total {
            let lr = cosine_lr(s, total, base, min);
            prop_assert!(lr <= prev + 1e-15 && lr >= min - 1e-15 && lr <= base + 1e-15);
            prev = lr;
        }
        prop_assert!((cosine_lr(total, total, base, min) - min).abs() < 1e-12);
    }

    #[test]
    fn segment_softmax_normalizes(vals in prop::collection::vec(-20.0f64..20.0, 1..40), groups in 1usize..6) {
        let seg: Vec<usize> = (0..vals.len()).map(|i| i % groups).collect();
        let store = ParamStore::new();
        let mut tape = Tape::new(&store, Mode::Eval);
        let x = tape.constant(Array::new(vec![vals.len(), 1], vals.clone()).unwrap());
        let y = tape.segment_softmax(x, &seg, groups).unwrap();
        let y = tape.value(y).data().to_vec();
        for g in 0..groups.min(vals.len()) {
            let s: f64 = (0..vals.len()).filter(|&i| seg[i] == g).map(|i| y[i]).sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn accuracy_is_trace_over_total(pairs in prop::collection::vec((0u32..4, 0u32..4), 1..60)) {
        let (gt, pred): (Vec<u32>, Vec<u32>) = pairs.iter().copied().unzip();
        let mut cm = ConfusionMatrix::new(4);
        cm.add(&gt, &pred).unwrap();
        let hits = pairs.iter().filter(|(a, b)| a == b).count() as f64;
        prop_assert_eq!(cm.accuracy(), hits / pairs.len() as f64);
        prop_assert_eq!(cm.total(), pairs.len() as u64);
    }
}
