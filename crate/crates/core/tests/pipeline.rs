use mambast::harness::data::generate;
use mambast::harness::train::{detect, evaluate_detections};
use mambast::harness::{train, Fuser, RunConfig};

fn tiny(fuser: Fuser) -> RunConfig {
    let mut r = RunConfig::new(fuser);
    r.data.clips = 6;
    r.eval.clips = 4;
    r.train.steps = 4;
    r.train.batch = 3;
    r
}

fn run_once(r: &RunConfig) -> (Vec<f64>, Vec<mambast::metrics::FrameBoxes>, String) {
    let clips = generate(&r.data).unwrap();
    let test = generate(&r.eval_spec()).unwrap();
    let (ckpt, rep) = train(r, &clips, None).unwrap();
    let dets = detect(&ckpt, &test, &r.eval).unwrap();
    let reps = evaluate_detections(&test, &dets, &r.eval).unwrap();
    (rep.losses, dets, serde_json::to_string(&reps).unwrap())
}

#[test]
fn pipeline_is_reproducible() {
    let r = tiny(Fuser::Mambast);
    let a = run_once(&r);
    let b = run_once(&r);
    assert_eq!(a.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(a.1, b.1);
    assert_eq!(a.2, b.2);

    let mut other = r.clone();
    other.seed += 1;
    other.data.seed += 1;
    assert_ne!(run_once(&other).0, a.0);
}

#[test]
fn every_fuser_runs_the_same_pipeline() {
    for fuser in Fuser::ALL {
        let (losses, dets, _) = run_once(&tiny(fuser));
        assert_eq!(losses.len(), 4, "{fuser}");
        assert!(losses.iter().all(|l| l.is_finite()), "{fuser}");
        assert_eq!(dets.len(), 4 * 3, "{fuser}");
    }
}
