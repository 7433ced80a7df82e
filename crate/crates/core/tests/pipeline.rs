use crpa::posmap::Scheme;
use crpa::sim::{write_reports, LayoutSource, ModelConfig, ScheduleConfig, SimConfig, Simulator};
use crpa::Error;

fn small() -> SimConfig {
    SimConfig {
        lr_size: 12,
        model: ModelConfig {
            heads: 2,
            ..ModelConfig::default()
        },
        schedule: ScheduleConfig {
            total_steps: 8,
            coarse_steps: 3,
            mixed_steps: 5,
            fine_steps: 0,
            hr_token_ratio: 0.25,
            ..ScheduleConfig::default()
        },
        ..SimConfig::default()
    }
}

#[test]
fn repeated_scheme_gives_identical_rows() {
    let sim = Simulator::new(small()).unwrap();
    let r = sim
        .compare_schemes(&[Scheme::Yarn, Scheme::Yarn], &LayoutSource::Synthetic)
        .unwrap();
    assert_eq!(r.len(), 2);
    assert_eq!(
        (r[0].rms_global, r[0].rms_hr),
        (r[1].rms_global, r[1].rms_hr)
    );
    let mut a = Vec::new();
    let mut b = Vec::new();
    write_reports(&r[..1], Some("x"), false, &mut a).unwrap();
    write_reports(&r[1..], Some("x"), false, &mut b).unwrap();
    assert_eq!(a, b);
}

#[test]
fn reports_are_non_negative_and_account_for_steps() {
    let sim = Simulator::new(small()).unwrap();
    for r in sim
        .compare_schemes(&Scheme::ALL, &LayoutSource::Synthetic)
        .unwrap()
    {
        assert!(r.rms_global >= 0.0 && r.rms_hr >= 0.0 && r.phase_err >= 0.0);
        assert_eq!(r.coarse_steps + r.mixed_steps + r.fine_steps, 8);
    }
}

#[test]
fn fine_stage_only_matches_reference() {
    let sim = Simulator::new(small()).unwrap();
    let r = sim
        .run_with(Scheme::PiLr, &LayoutSource::Synthetic, 0.25, (0, 0, 8))
        .unwrap();
    assert_eq!(r.rms_global, 0.0);
}

#[test]
fn coarse_then_fine_is_scored_on_the_hr_canvas() {
    let sim = Simulator::new(small()).unwrap();
    let r = sim
        .run_with(Scheme::Crpa, &LayoutSource::Synthetic, 0.25, (3, 2, 3))
        .unwrap();
    assert!(r.rms_global > 0.0 && r.rms_global.is_finite());
}

#[test]
fn layout_file_and_mask_sources() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("layout.json");
    std::fs::write(&path, r#"{"lr_shape": [12, 12], "ratio": [2, 2], "hr_boxes": [{"start": [3, 3], "end": [9, 9]}]}"#).unwrap();
    let sim = Simulator::new(small()).unwrap();
    let from_file = sim
        .run_schedule(Scheme::Crpa, &LayoutSource::File(path))
        .unwrap();
    let mask: Vec<bool> = (0..144)
        .map(|i| (3..9).contains(&(i / 12)) && (3..9).contains(&(i % 12)))
        .collect();
    let from_mask = sim
        .run_schedule(Scheme::Crpa, &LayoutSource::Mask(mask))
        .unwrap();
    assert_eq!(from_file.rms_global, from_mask.rms_global);

    let wrong = LayoutSource::Mask((0..144).map(|i| i < 100).collect());
    let err = sim.run_schedule(Scheme::Crpa, &wrong).unwrap_err();
    assert!(matches!(err, Error::MaskCoverage { .. }));
}

#[test]
fn boundary_exchange_changes_only_mixed_runs() {
    let mut cfg = small();
    cfg.boundary_exchange = true;
    let with = Simulator::new(cfg).unwrap();
    let without = Simulator::new(small()).unwrap();
    let a = with
        .run_schedule(Scheme::Crpa, &LayoutSource::Synthetic)
        .unwrap();
    let b = without
        .run_schedule(Scheme::Crpa, &LayoutSource::Synthetic)
        .unwrap();
    assert_ne!(a.rms_global, b.rms_global);
    let fa = with
        .run_with(Scheme::Crpa, &LayoutSource::Synthetic, 0.25, (8, 0, 0))
        .unwrap();
    let fb = without
        .run_with(Scheme::Crpa, &LayoutSource::Synthetic, 0.25, (8, 0, 0))
        .unwrap();
    assert_eq!(fa.rms_global, fb.rms_global);
}
