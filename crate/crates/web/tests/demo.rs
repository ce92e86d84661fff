use tfusion::synthetic::render_seeded;
use tfusion::FusionParams;
use tfusion_web::{fuse, resize_rgb, to_rgba, Explorer};

#[test]
fn bundled_model_loads_with_class_names() {
    let e = Explorer::bundled().unwrap();
    assert_eq!(e.size(), 32);
    assert_eq!(e.class_names(), ["blob", "ring"]);
}

#[test]
fn bundled_model_tells_blobs_from_rings() {
    let mut e = Explorer::bundled().unwrap();
    let mut correct = 0;
    for seed in 0..40 {
        let class = (seed % 2) as usize;
        let a = e.analyse(&render_seeded(class, 32, 20.0, 10_000 + seed)).unwrap();
        let p = a.probabilities();
        assert!((p.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        correct += usize::from((p[1] > p[0]) == (class == 1));
    }
    assert!(correct >= 36, "{correct} of 40");
}

#[test]
fn gate_shift_saturates_the_attention_map() {
    let mut e = Explorer::bundled().unwrap();
    let img = render_seeded(0, 32, 20.0, 3);
    e.set_gate_shift(60.0);
    assert!(e.analyse(&img).unwrap().attention().iter().all(|&v| v == 255));
    e.set_gate_shift(-60.0);
    assert!(e.analyse(&img).unwrap().attention().iter().all(|&v| v == 0));
    e.set_gate_shift(0.0);
    assert_eq!(e.analyse(&img).unwrap().attention().len(), 32 * 32);
}

#[test]
fn wrong_image_size_is_rejected() {
    let mut e = Explorer::bundled().unwrap();
    assert!(e.analyse(&[0; 12]).is_err());
}

#[test]
fn fusion_hand_example() {
    let f = fuse(&[0.9, 0.1, 0.3, 0.7], 2, FusionParams::default()).unwrap();
    assert_eq!(f.maximum(), vec![0.9, 0.7]);
    let want = [20.7201, 20.5601];
    assert!(f.fused().iter().zip(want).all(|(a, b)| (a - b).abs() < 1e-9), "{:?}", f.fused());
    assert_eq!(f.winner(), 0);
    assert!(fuse(&[0.5; 5], 2, FusionParams::default()).is_err());
    assert!(fuse(&[0.5; 4], 2, FusionParams { alpha: 0.0, ..FusionParams::default() }).is_err());
}

#[test]
fn resize_and_rgba() {
    let column = [0, 0, 0, 255, 255, 255];
    let out = resize_rgb(&column, 1, 2, 1, 4).unwrap();
    assert_eq!(out.iter().step_by(3).copied().collect::<Vec<_>>(), vec![0, 64, 191, 255]);
    assert_eq!(to_rgba(&[7], 1), vec![7, 7, 7, 255]);
    assert_eq!(to_rgba(&[1, 2, 3], 3), vec![1, 2, 3, 255]);
}
