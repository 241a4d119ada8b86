use hydroclean::ingestion::{group_streams, parse_dataset, Dataset, Schema};
use hydroclean::model::DataStream;
use hydroclean::synth::{generate, GroundTruth, SyntheticPlan, AMID_FILE, BILD_FILE, CLEAN_FILE, MIND_FILE, TRUTH_FILE};

fn plan() -> SyntheticPlan {
    let mut p = SyntheticPlan { seed: 5, stream_count: 30, ..SyntheticPlan::default() };
    p.spikes.bursts = 1;
    p.spikes.burst_meters = 3;
    p
}

fn sorted(mut v: Vec<DataStream>) -> Vec<DataStream> {
    v.sort_by(|a, b| a.key.cmp(&b.key));
    v.into_iter().map(|s| DataStream::new(s.key.clone(), s.readings().to_vec())).collect()
}

#[test]
fn written_corpus_parses_back_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = generate(&plan());
    corpus.write(dir.path()).unwrap();

    let amid = match parse_dataset(&dir.path().join(AMID_FILE), Schema::Amid).unwrap() {
        Dataset::Amid(p) => {
            assert!(p.rejected.is_empty());
            group_streams(p.records).0
        }
        _ => unreachable!(),
    };
    assert_eq!(sorted(amid), sorted(corpus.amid.clone()));

    let clean = match parse_dataset(&dir.path().join(CLEAN_FILE), Schema::Amid).unwrap() {
        Dataset::Amid(p) => group_streams(p.records).0,
        _ => unreachable!(),
    };
    assert_eq!(sorted(clean), sorted(corpus.clean.clone()));

    match parse_dataset(&dir.path().join(MIND_FILE), Schema::Mind).unwrap() {
        Dataset::Mind(p) => {
            assert_eq!(p.records.len(), corpus.mind.len());
            for (got, want) in p.records.iter().zip(&corpus.mind) {
                assert_eq!((&got.key, &got.category, &got.unit), (&want.key, &want.category, &want.unit));
                // coordinates are written with six decimals
                assert!((got.latitude.unwrap() - want.latitude.unwrap()).abs() < 1e-6);
            }
        }
        _ => unreachable!(),
    }
    match parse_dataset(&dir.path().join(BILD_FILE), Schema::Bild).unwrap() {
        Dataset::Bild(p) => assert_eq!(p.records.len(), corpus.bild.len()),
        _ => unreachable!(),
    }
    assert_eq!(GroundTruth::load(&dir.path().join(TRUTH_FILE)).unwrap(), corpus.truth);
}

#[test]
fn clean_streams_miss_only_outage_days() {
    let p = plan();
    let corpus = generate(&p);
    let outage = corpus.truth.outage_days.len() as i64;
    assert_eq!(outage, p.gaps.outage_days);
    for s in &corpus.clean {
        assert_eq!(s.readings().len() as i64, p.hours() - 24 * outage, "{}", s.key);
        assert!(s.readings().iter().all(|r| !corpus.truth.outage_days.contains(&r.at.day())));
        assert!(s.has_unique_timestamps());
        assert!(s.readings().iter().all(|r| r.value.litres() >= 0));
    }
}
