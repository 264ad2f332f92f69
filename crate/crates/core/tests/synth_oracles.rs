mod common;

use motionflow_core::metrics::{psnr, segmentation_score};
use motionflow_core::synth::{ground_truth_flow, render_sequence};
use motionflow_core::warp::{forward_warp, forward_warp_labels};
use motionflow_core::Frame;

#[test]
fn exact_flow_reproduces_next_frame_for_subpixel_motion() {
    let spec = common::two_shapes(31, 0.25);
    let (frames, masks) = render_sequence(&spec, 0).unwrap();
    for t in [0, 10, 29] {
        let gt = ground_truth_flow(&spec, t).unwrap();
        let warped = forward_warp(&frames[t], &gt).unwrap();
        let next = frames[t + 1].data();
        let outside_holes: Vec<f64> = warped
            .frame
            .data()
            .iter()
            .zip(&warped.hole_mask)
            .zip(next)
            .map(|((&w, &hole), &n)| if hole { n } else { w })
            .collect();
        let p = psnr(&Frame::new(64, 64, 1, outside_holes).unwrap(), &frames[t + 1]).unwrap();
        assert!(p >= 35.0, "frame {t}: {p} dB");

        let labels = forward_warp_labels(&masks[t], &gt, 3).unwrap();
        let score = segmentation_score(&labels, &masks[t + 1], 3).unwrap();
        for (class, iou) in &score.per_class_iou {
            assert!(*iou >= 0.95, "frame {t} class {class}: IoU {iou}");
        }
    }
}

#[test]
fn noise_is_seeded_per_frame() {
    let mut spec = common::two_shapes(3, 1.0);
    spec.noise_sigma = 0.03;
    let (a, _) = render_sequence(&spec, 7).unwrap();
    let (b, _) = render_sequence(&spec, 7).unwrap();
    assert_eq!(a, b);
    spec.noise_sigma = 0.0;
    let (clean, _) = render_sequence(&spec, 7).unwrap();
    let residual: f64 = a[1].data().iter().zip(clean[1].data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / 4096.0;
    assert!(residual.sqrt() > 0.02 && residual.sqrt() < 0.04);
}
