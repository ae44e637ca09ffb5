use approx::assert_abs_diff_eq;
use autograd::gradcheck::check_inputs;
use autograd::Tensor;
use trackcore::geometry::{iou_matrix, roi_align, roi_align_tensor, ROI_SIZE};
use trackcore::{iou, BBox};

fn bx(x: f64, y: f64, w: f64, h: f64) -> BBox {
    BBox::new(x, y, w, h).unwrap()
}

#[test]
fn iou_examples() {
    let a = bx(0.0, 0.0, 10.0, 10.0);
    assert_eq!(iou(&a, &a), 1.0);
    assert_eq!(iou(&a, &bx(20.0, 20.0, 5.0, 5.0)), 0.0);
    // 5×10 overlap over a 150 union
    assert_abs_diff_eq!(iou(&a, &bx(5.0, 0.0, 10.0, 10.0)), 50.0 / 150.0, epsilon = 1e-15);
}

#[test]
fn iou_matrix_matches_pairwise_calls() {
    let tracks = [bx(0.0, 0.0, 10.0, 10.0), bx(4.0, 3.0, 8.0, 12.0), bx(30.0, 30.0, 5.0, 5.0)];
    let dets = [bx(2.0, 1.0, 9.0, 9.0), bx(31.0, 29.0, 6.0, 6.0), bx(5.0, 5.0, 3.0, 3.0)];
    let m = iou_matrix(&tracks, &dets);
    assert_eq!(m.shape(), (3, 3));
    for (j, t) in tracks.iter().enumerate() {
        for (i, d) in dets.iter().enumerate() {
            assert_eq!(m.get(j, i), iou(t, d));
        }
    }
    assert_eq!(iou_matrix(&[tracks[0]], &[tracks[0]]).data(), &[1.0]);
    assert_eq!(iou_matrix(&[], &dets).shape(), (0, 3));
}

#[test]
fn roi_align_constant_map_is_exact() {
    let map = Tensor::full(&[3, 6, 7], 2.5);
    for b in [bx(3.0, 5.0, 20.0, 11.0), bx(0.0, 0.0, 56.0, 48.0), bx(40.0, 30.0, 30.0, 30.0)] {
        let out = roi_align_tensor(&map, &b, 8.0).unwrap();
        assert_eq!(out.shape(), &[3, ROI_SIZE, ROI_SIZE]);
        assert!(out.data().iter().all(|&v| v == 2.5));
    }
}

#[test]
fn roi_align_reproduces_a_linear_ramp() {
    let (h, w, stride) = (5, 8, 4.0);
    let map = Tensor::new(&[1, h, w], (0..h * w).map(|i| (i % w) as f64).collect()).unwrap();
    let full = bx(0.0, 0.0, w as f64 * stride, h as f64 * stride);
    let out = roi_align_tensor(&map, &full, stride).unwrap();
    // Continuous index of bin centre bx across [-0.5, w - 0.5].
    let bin = w as f64 / ROI_SIZE as f64;
    for by in 0..ROI_SIZE {
        for bxi in 0..ROI_SIZE {
            let want = -0.5 + (bxi as f64 + 0.5) * bin;
            assert_abs_diff_eq!(out.data()[by * ROI_SIZE + bxi], want, epsilon = 1e-9);
        }
    }
}

#[test]
fn roi_align_gradient_matches_finite_differences() {
    let data: Vec<f64> = (0..2 * 5 * 6).map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0).collect();
    let map = Tensor::new(&[2, 5, 6], data).unwrap();
    let b = bx(3.5, 2.0, 14.0, 11.0);
    let report = check_inputs(&[map], |_, v| {
        let w = v[0].graph().input(Tensor::new(&[2, 4, 4], (0..32).map(|i| i as f64 / 10.0).collect())?);
        let crop = roi_align(v[0], &b, 4.0).map_err(|e| autograd::Error::Config(e.to_string()))?;
        Ok(crop.mul(w)?.sum())
    })
    .unwrap();
    assert!(report.passes(1e-4), "{report:?}");
}

#[test]
fn degenerate_regions_are_rejected() {
    let map = Tensor::zeros(&[1, 4, 4]);
    assert!(roi_align_tensor(&map, &bx(100.0, 100.0, 5.0, 5.0), 4.0).is_err());
    assert!(BBox::new(0.0, 0.0, 0.0, 3.0).is_err());
    assert!(BBox::new(0.0, f64::NAN, 2.0, 3.0).is_err());
}
