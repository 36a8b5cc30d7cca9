use segpred::geojson::export_geojson;
use segpred::roadnet::{RoadNetwork, SegmentId};
use segpred::synth::{synth_network, SynthSpec};

fn network() -> RoadNetwork {
    RoadNetwork::build(synth_network(&SynthSpec { grid_n: 3, ..SynthSpec::default() }).unwrap()).unwrap()
}

#[test]
fn single_segment_gives_one_feature() {
    let net = network();
    let v = export_geojson(&net, &[SegmentId(0)], &[], &[]).unwrap();
    assert_eq!(v["type"], "FeatureCollection");
    let features = v["features"].as_array().unwrap();
    assert_eq!(features.len(), 1);
    let props = &features[0]["properties"];
    assert_eq!(props["role"], "history");
    assert_eq!(props["segment_id"], 0);
    assert_eq!(props["position"], 0);
}

#[test]
fn coordinates_round_trip_and_roles_are_styled() {
    let net = network();
    let (h, t, p) = ([SegmentId(0), SegmentId(2)], [SegmentId(4)], [SegmentId(4), SegmentId(1)]);
    let v = export_geojson(&net, &h, &t, &p).unwrap();
    let text = serde_json::to_string(&v).unwrap();
    let back: serde_json::Value = serde_json::from_str(&text).unwrap();
    let features = back["features"].as_array().unwrap();
    assert_eq!(features.len(), 5);
    let expected = [("history", "#800080", 0), ("history", "#800080", 2), ("target", "#008000", 4), ("predicted", "#ff0000", 4), ("predicted", "#ff0000", 1)];
    for (f, (role, stroke, id)) in features.iter().zip(expected) {
        assert_eq!(f["properties"]["role"], role);
        assert_eq!(f["properties"]["stroke"], stroke);
        assert_eq!(f["geometry"]["type"], "LineString");
        let seg = net.segment(SegmentId(id)).unwrap();
        let coords = f["geometry"]["coordinates"].as_array().unwrap();
        assert_eq!(coords.len(), seg.geometry.len());
        for (c, g) in coords.iter().zip(&seg.geometry) {
            assert_eq!(c[0].as_f64().unwrap(), g.lon);
            assert_eq!(c[1].as_f64().unwrap(), g.lat);
        }
    }
}

#[test]
fn unknown_segment_is_rejected() {
    let net = network();
    assert!(export_geojson(&net, &[SegmentId(0)], &[SegmentId(9999)], &[]).is_err());
}
