use reder_web::{decode_table_js, round_trip_js, sample_pairs_js};
use serde_json::Value;

fn parse(s: String) -> Value {
    serde_json::from_str(&s).unwrap()
}

#[test]
fn round_trip_recovers_the_input_state() {
    let r = parse(round_trip_js(6, 32, 1, "3 1 4 1 5 9 2 6"));
    assert_eq!(r["frames"], 16);
    assert!(r["forward_then_reverse"].as_f64().unwrap() <= 1e-9);
    assert!(r["reverse_then_forward"].as_f64().unwrap() <= 1e-9);
    assert!(r["forward_trace"].as_str().unwrap().len() > 0);
}

#[test]
fn round_trip_reports_bad_input() {
    assert!(parse(round_trip_js(4, 16, 1, "")).get("error").is_some());
    assert!(parse(round_trip_js(4, 16, 1, "1 x")).get("error").is_some());
    assert!(parse(round_trip_js(3, 16, 1, "1 2")).get("error").is_some());
}

#[test]
fn sample_pairs_follow_the_task() {
    let r = parse(sample_pairs_js("reversal", 5, 2));
    let pairs = r.as_array().unwrap();
    assert_eq!(pairs.len(), 5);
    for p in pairs {
        let src: Vec<&str> = p["src"].as_str().unwrap().split(' ').collect();
        let mut tgt: Vec<&str> = p["tgt"].as_str().unwrap().split(' ').collect();
        tgt.reverse();
        assert_eq!(src, tgt);
    }
    assert!(parse(sample_pairs_js("nope", 5, 2)).get("error").is_some());
}

#[test]
fn beam_beats_greedy_on_the_two_frame_table() {
    let r = parse(decode_table_js("0.5 0.3 0.2\n0.5 0.3 0.2\n", 3));
    assert_eq!(r["greedy"]["output"], "");
    assert!((r["greedy"]["output_probability"].as_f64().unwrap() - 0.25).abs() < 1e-12);
    assert_eq!(r["beam"][0]["output"], "a");
    assert!((r["beam"][0]["probability"].as_f64().unwrap() - 0.39).abs() < 1e-12);
    assert!(parse(decode_table_js("0.5 0.5\n1\n", 2)).get("error").is_some());
    assert!(parse(decode_table_js("0.5 0.5\n", 0)).get("error").is_some());
}
