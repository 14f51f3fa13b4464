//! The staged pipeline on the tiny preset.

use std::fs;

use depflow::pipeline::{Experiment, ExperimentConfig, StageOutcome, STAGES};
use depflow::report::REPORT_KINDS;
use depflow::Error;

#[test]
fn staged_run_reproduce_and_invalidation() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("exp");
    let mut exp = Experiment::init(&root, &ExperimentConfig::smoke(), None).unwrap();
    assert!(Experiment::init(&root, &ExperimentConfig::smoke(), None).is_err());

    assert!(matches!(exp.run_stage("proto", false), Err(Error::Prerequisite(ref s)) if s == "world"));
    assert!(exp.run_stage("vocoder", false).is_err());

    let outcomes = exp.run_all(false).unwrap();
    assert_eq!(outcomes.len(), STAGES.len());
    assert!(outcomes.iter().all(|(_, o)| *o == StageOutcome::Ran));
    let again = exp.run_all(false).unwrap();
    assert!(again.iter().all(|(_, o)| *o == StageOutcome::UpToDate));

    let reopened = Experiment::open(&root).unwrap();
    let rep = reopened.reproduce().unwrap();
    assert!(rep.ok(), "{:#?}", rep.checks.iter().filter(|c| !c.check.ok()).collect::<Vec<_>>());
    for kind in REPORT_KINDS {
        assert!(reopened.report(kind).unwrap().is_object());
        assert!(root.join(format!("reports/{kind}.csv")).exists());
    }
    assert!(reopened.report("latency").is_err());

    // A config edit is caught by reproduce for that stage only and blocks an unforced rerun.
    let mut cfg = exp.config().unwrap();
    cfg.cdoa.seed += 1;
    cfg.write(&exp.config_dir()).unwrap();
    let rep = exp.reproduce().unwrap();
    assert_eq!(rep.failed_stages().into_iter().collect::<Vec<_>>(), vec!["cdoa".to_string()]);
    assert!(matches!(exp.run_stage("cdoa", false), Err(Error::DigestMismatch { ref stage, .. }) if stage == "cdoa"));
    assert_eq!(exp.run_stage("cdoa", true).unwrap(), StageOutcome::Ran);
    let status = exp.status().unwrap();
    let stale: Vec<&str> = status.iter().filter(|s| s.stale).map(|s| s.stage.as_str()).collect();
    assert_eq!(stale, vec!["detector", "report"]);
    assert!(status.iter().all(|s| s.completed && !s.config_changed));
    assert_eq!(exp.run_stage("detector", false).unwrap(), StageOutcome::Ran);
    assert_eq!(exp.run_stage("report", false).unwrap(), StageOutcome::Ran);
    assert!(exp.reproduce().unwrap().ok());

    // A tampered artifact is reported against its stage.
    let proto = root.join("proto.json");
    let text = fs::read_to_string(&proto).unwrap();
    fs::write(&proto, text.replacen('1', "2", 1)).unwrap();
    let rep = exp.reproduce().unwrap();
    assert!(rep.failed_stages().contains("proto"));
}
