use std::fs::File;
use std::path::PathBuf;

use trialemu::ingest::{parse_events, sessions_for_log, EventSchema, Position, Provenance, SessionCounts, SpawnRules};

fn fixture() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/figure2_events.csv")
}

#[test]
fn fictitious_patient_yields_four_supine_and_two_prone() {
    let log = parse_events(File::open(fixture()).unwrap(), &EventSchema::default()).unwrap();
    let sessions = sessions_for_log(&log, &SpawnRules::default());
    let counts = SessionCounts::of(&sessions);
    assert_eq!((counts.supine(), counts.prone), (4, 2));
    assert_eq!(counts.supine_artificial, 2);

    // Artificial sessions sit inside an original supine session and share its end.
    for a in sessions.iter().filter(|s| s.provenance == Provenance::Artificial) {
        let parents: Vec<_> = sessions
            .iter()
            .filter(|o| {
                o.provenance == Provenance::Original
                    && o.position == Position::Supine
                    && o.start <= a.start
                    && a.end == o.end
            })
            .collect();
        assert_eq!(parents.len(), 1);
        assert_eq!(a.parent_end, Some(parents[0].end));
    }

    // Original sessions tile the timeline.
    let events = &log.patients["fig2"];
    let originals: Vec<_> = sessions.iter().filter(|s| s.provenance == Provenance::Original).collect();
    assert_eq!(originals[0].start, events[0].timestamp);
    assert_eq!(originals.last().unwrap().end, events.last().unwrap().timestamp);
    for w in originals.windows(2) {
        assert_eq!(w[0].end, w[1].start);
        assert_ne!(w[0].position, w[1].position);
    }
}

#[test]
fn session_building_is_deterministic() {
    let a = parse_events(File::open(fixture()).unwrap(), &EventSchema::default()).unwrap();
    let b = parse_events(File::open(fixture()).unwrap(), &EventSchema::default()).unwrap();
    assert_eq!(sessions_for_log(&a, &SpawnRules::default()), sessions_for_log(&b, &SpawnRules::default()));
}
