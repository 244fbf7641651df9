mod common;

use delib_core::memory::{load_stream, save_stream, Timestep};
use delib_core::{AgentId, MemoryEntry, MemoryError, MemoryKind, MemoryStream};
use proptest::prelude::*;

fn fixture(name: &str) -> std::path::PathBuf {
    common::fixture(name)
}

fn arb_stream() -> impl Strategy<Value = MemoryStream> {
    prop::collection::vec((1u64..5, 0usize..4, "\\PC{1,30}"), 0..40).prop_map(|items| {
        let owner = AgentId::new("owner");
        let mut s = MemoryStream::new(owner.clone());
        let mut t: Timestep = 0;
        for (gap, kind, content) in items {
            t += gap;
            let (kind, speaker) = match kind {
                0 => (MemoryKind::ScenarioPrompt, None),
                1 => (MemoryKind::Observation, Some(AgentId::new("other"))),
                2 => (MemoryKind::Interpretation, Some(owner.clone())),
                _ => (MemoryKind::Perturbation, None),
            };
            if content.trim().is_empty() {
                continue;
            }
            s.append(MemoryEntry::new(t, kind, speaker, content, "sc")).unwrap();
        }
        s
    })
}

#[test]
fn out_of_order_fixture_is_rejected() {
    let err = load_stream(fixture("malformed/memory_out_of_order.json")).unwrap_err();
    assert!(matches!(err, MemoryError::Validation(_)), "{err:?}");
}

#[test]
fn append_out_of_order_names_both_timesteps() {
    let mut s = MemoryStream::new(AgentId::new("a"));
    s.append(MemoryEntry::new(3, MemoryKind::ScenarioPrompt, None, "x", "sc")).unwrap();
    let err = s
        .append(MemoryEntry::new(2, MemoryKind::Perturbation, None, "y", "sc"))
        .unwrap_err();
    assert!(matches!(err, MemoryError::TimestepOrder { last: 3, got: 2 }));
    assert_eq!(s.len(), 1);
}

proptest! {
    #[test]
    fn save_load_round_trip(s in arb_stream()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        save_stream(&s, &path).unwrap();
        prop_assert_eq!(load_stream(&path).unwrap(), s);
    }

    #[test]
    fn context_window_is_a_recent_suffix(s in arb_stream(), k in 0usize..20, now in 0u64..200) {
        let w = s.context_window(k, now);
        prop_assert!(w.len() <= k);
        prop_assert!(w.iter().all(|e| e.timestep < now));
        let eligible: Vec<_> = s.full_history().iter().filter(|e| e.timestep < now).collect();
        let tail = &eligible[eligible.len() - w.len()..];
        prop_assert_eq!(w.iter().collect::<Vec<_>>(), tail.to_vec());
        prop_assert_eq!(w.len(), k.min(eligible.len()));
    }
}
