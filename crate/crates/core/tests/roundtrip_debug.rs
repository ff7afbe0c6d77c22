use driftfit_core::corpus::{generate_scenario, load_scenario_dir, write_scenario_dir, LabelAccess};
use driftfit_core::sim::scenarios::compact_drift_scenario;

#[test]
fn debug_roundtrip() {
    let scenario_cfg = compact_drift_scenario(19);
    let scenario = generate_scenario(&scenario_cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_scenario_dir(&scenario, &scenario_cfg, dir.path()).unwrap();
    let loaded = load_scenario_dir(dir.path()).unwrap();

    assert_eq!(loaded.num_classes, scenario.num_classes, "num_classes");
    assert_eq!(loaded.objects.len(), scenario.objects.len());
    for (i, (a, b)) in scenario.objects.iter().zip(&loaded.objects).enumerate() {
        assert_eq!(a.id, b.id, "obj id {i}");
        assert_eq!(a.class, b.class, "obj class {i}");
        assert_eq!(a.herd, b.herd, "obj herd {i}");
        assert_eq!(a.activity, b.activity, "obj act {i}");
        assert!(a.orig_bbox.cx == b.orig_bbox.cx && a.orig_bbox.w == b.orig_bbox.w, "obj bbox {i}: {:?} vs {:?}", a.orig_bbox, b.orig_bbox);
        assert_eq!(a.pixels.as_raw(), b.pixels.as_raw(), "obj pixels {i}");
    }
    eprintln!("objects OK");
    for (i, (a, b)) in scenario.source_backgrounds.iter().zip(&loaded.source_backgrounds).enumerate() {
        assert_eq!(a.id, b.id, "bg id {i}");
        assert_eq!(a.timestamp, b.timestamp, "bg ts {i}");
        assert_eq!(a.location_id, b.location_id, "bg loc {i}");
        assert_eq!(a.pixels.as_raw(), b.pixels.as_raw(), "bg pixels {i}");
    }
    eprintln!("backgrounds OK");
    let acc = LabelAccess::new("dbg");
    for (i, (a, b)) in scenario.stream.iter().zip(&loaded.stream).enumerate() {
        assert_eq!(a.timestamp(), b.timestamp(), "ev ts {i}");
        assert_eq!(a.kind, b.kind, "ev kind {i}");
        assert_eq!(a.hidden_label(&acc), b.hidden_label(&acc), "ev label {i}");
        assert_eq!(a.image.location_id, b.image.location_id, "ev loc {i}");
        assert_eq!(a.image.pixels.as_raw(), b.image.pixels.as_raw(), "ev pixels {i}");
    }
    eprintln!("stream OK");
    assert_eq!(scenario.source.len(), loaded.source.len(), "source len");
    for (i, (a, b)) in scenario.source.iter().zip(&loaded.source).enumerate() {
        assert_eq!(a.label, b.label, "src label {i}");
        assert_eq!(a.timestamp, b.timestamp, "src ts {i}");
        assert_eq!(a.pixels.as_raw(), b.pixels.as_raw(), "src pixels {i}");
    }
    eprintln!("source OK");
}
