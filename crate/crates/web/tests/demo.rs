use ctseg::heads::{build_mask_head, MaskHeadSpec};
use ctseg_web::{head_names, inventory_text, make_scene};

#[test]
fn scene_is_deterministic_and_rgba() {
    let a = make_scene(4, 3).unwrap();
    let b = make_scene(4, 3).unwrap();
    assert_eq!(a.rgba(), b.rgba());
    assert_eq!(a.rgba().len(), 4 * a.width() * a.height());
    assert_eq!(a.instance_count(), 3);
    assert!(a.rgba().chunks_exact(4).all(|p| p[3] == 255));
    assert_ne!(make_scene(5, 3).unwrap().rgba(), a.rgba());
    let bx = a.box_of(0);
    assert!(bx[0] < bx[2] && bx[1] < bx[3]);
    assert!(a.box_of(9).is_empty());
}

#[test]
fn round_trip_improves_with_crop_size() {
    let s = make_scene(2, 3).unwrap();
    for i in 0..s.instance_count() {
        let small = s.round_trip_with(i, 4).unwrap().iou();
        let large = s.round_trip_with(i, 48).unwrap().iou();
        assert!(large > 0.9, "instance {i}: {large}");
        assert!(large >= small, "instance {i}: {large} < {small}");
    }
    assert!(s.round_trip_with(0, 1).is_err());
    assert!(s.round_trip_with(7, 16).is_err());
}

#[test]
fn inventory_reports_built_parameter_count() {
    for name in head_names().lines() {
        let spec = MaskHeadSpec::preset(name).unwrap().with_width_divisor(4);
        let Ok(net) = build_mask_head::<f32>(&spec, 48, 32, 0) else {
            assert!(inventory_text(name, 32, 4).is_err());
            continue;
        };
        let text = inventory_text(name, 32, 4).unwrap();
        assert!(
            text.ends_with(&format!(
                "total trainable parameters: {}\n",
                net.count_parameters()
            )),
            "{name}"
        );
    }
    assert!(inventory_text("nope", 32, 1).is_err());
}
