use proptest::prelude::*;

use super::*;
use crate::analysis::TerminalCause;

fn record(trial: &PlannedTrial, lifetime: f64, censored: bool, disp: f64) -> TrialRecord {
    TrialRecord {
        stage: trial.stage,
        cell: trial.cell,
        replicate: trial.replicate,
        device_id: trial.device_id.clone(),
        seed: trial.seed,
        channel: 0,
        status: TrialStatus::Complete,
        lifetime: LifetimeResult {
            lifetime,
            censored,
            initial_amplitude: 1.0,
            terminal_cause: if censored { TerminalCause::Cap } else { TerminalCause::ThresholdCrossed },
        },
        avg_displacement: Some(disp),
        capacitance_loss: None,
        duration: lifetime,
        telemetry_ref: String::new(),
    }
}

fn summary(field: f64, freq: f64, m: MaterialConfig, life: f64, disp: f64) -> CellSummary {
    CellSummary {
        stage: 2,
        cell: Cell::new(Drive::new(field, freq), m),
        completed: 5,
        mean_lifetime: life,
        std_lifetime: 0.0,
        mean_displacement: disp,
        std_displacement: 0.0,
        censored_fraction: 0.0,
        status: CellStatus::Complete,
    }
}

/// Stage-1 landscape shaped like the calibrated model: 35 V/µm survives,
/// 50 V/µm is short-lived, displacement grows with field.
fn shaped_lifetime(field: f64, freq: f64) -> (f64, bool, f64) {
    let life = match field as u32 {
        35 => 10_800.0,
        40 => 7000.0 + 60.0 * freq,
        45 => 1300.0 + 12.0 * freq,
        _ => 400.0,
    };
    (life, life >= 10_800.0, field / 40.0 - freq / 1000.0)
}

fn run_stage1(space: &ParamSpace) -> Vec<TrialRecord> {
    let mut records = Vec::new();
    loop {
        let batch = plan_stage1(space, &records, 7);
        if batch.is_empty() {
            return records;
        }
        for t in &batch {
            let (l, c, d) = shaped_lifetime(t.cell.field, t.cell.freq);
            records.push(record(t, l, c, d));
        }
    }
}

#[test]
fn stage1_full_grid_with_early_stop() {
    let space = ParamSpace::default();
    let first = plan_stage1(&space, &[], 7);
    assert_eq!(first.len(), 16 * 3);
    let records = run_stage1(&space);
    assert!(records.len() <= 80);
    assert_eq!(records.len(), 4 * 3 + 12 * 5);
    let sums = summarize(&records, 1, space.replicates_per_cell);
    for s in &sums {
        if s.cell.field == 35.0 {
            assert_eq!(s.status, CellStatus::Stable);
            assert_eq!(s.completed, 3);
        } else {
            assert_eq!(s.status, CellStatus::Complete);
        }
    }
}

#[test]
fn single_cell_space() {
    let space = ParamSpace {
        fields: vec![40.0],
        frequencies: vec![1.0],
        ..ParamSpace::default()
    };
    assert_eq!(run_stage1(&space).len(), 5);
    let censored = ParamSpace {
        fields: vec![35.0],
        ..space
    };
    assert_eq!(run_stage1(&censored).len(), 3);
}

#[test]
fn planning_is_pure() {
    let space = ParamSpace::default();
    let records = run_stage1(&space);
    let half = &records[..30];
    assert_eq!(plan_stage1(&space, half, 7), plan_stage1(&space, half, 7));
    assert_ne!(plan_stage1(&space, &[], 7)[0].seed, plan_stage1(&space, &[], 8)[0].seed);
}

#[test]
fn boundary_on_shaped_landscape() {
    let records = run_stage1(&ParamSpace::default());
    let sums = summarize(&records, 1, 5);
    let b = select_boundary(&sums, 1500.0, 10_800.0).unwrap();
    assert_eq!(b.drives, vec![Drive::new(40.0, 1.0), Drive::new(45.0, 50.0)]);
}

#[test]
fn all_censored_grid_has_no_boundary() {
    let sums: Vec<CellSummary> = [1.0, 50.0]
        .iter()
        .map(|&f| summary(35.0, f, MaterialConfig::baseline(), 10_800.0, 1.0))
        .collect();
    assert_eq!(
        select_boundary(&sums, 1500.0, 10_800.0),
        Err(CampaignError::NoCandidate { freq: 1.0 })
    );
}

fn arb_summaries() -> impl Strategy<Value = Vec<CellSummary>> {
    let fields = [35.0, 40.0, 45.0, 50.0];
    let freqs = [1.0, 5.0, 10.0, 50.0];
    proptest::collection::vec((0usize..4, 0usize..4, 500.0..12_000f64, 0usize..4), 1..30).prop_map(move |v| {
        let mut out: Vec<CellSummary> = Vec::new();
        for (i, j, life, d) in v {
            if out.iter().any(|s| s.cell.field == fields[i] && s.cell.freq == freqs[j]) {
                continue;
            }
            let life = if life > 10_800.0 { 10_800.0 } else { life };
            out.push(summary(fields[i], freqs[j], MaterialConfig::baseline(), life, d as f64 * 0.25));
        }
        out
    })
}

proptest! {
    #[test]
    fn boundary_matches_brute_force(sums in arb_summaries()) {
        let got = select_boundary(&sums, 1500.0, 10_800.0);
        let mut freqs: Vec<f64> = sums.iter().map(|s| s.cell.freq).collect();
        freqs.sort_by(f64::total_cmp);
        freqs.dedup();
        let targets = if freqs.len() == 1 { vec![freqs[0]] } else { vec![freqs[0], *freqs.last().unwrap()] };
        let mut expect = Vec::new();
        let mut err = None;
        for f in targets {
            let mut best: Option<&CellSummary> = None;
            for s in &sums {
                if s.cell.freq != f || !(s.mean_lifetime >= 1500.0 && s.mean_lifetime < 10_800.0) {
                    continue;
                }
                best = match best {
                    None => Some(s),
                    Some(b) if s.mean_displacement > b.mean_displacement
                        || (s.mean_displacement == b.mean_displacement && s.cell.field < b.cell.field) => Some(s),
                    keep => keep,
                };
            }
            match best {
                Some(b) => expect.push(b.cell.drive()),
                None => { err = Some(CampaignError::NoCandidate { freq: f }); break; }
            }
        }
        match err {
            Some(e) => prop_assert_eq!(got, Err(e)),
            None => prop_assert_eq!(got.unwrap().drives, expect),
        }
    }

    #[test]
    fn best_material_matches_argmax(vals in proptest::collection::vec((100.0..5000f64, 0.1..2.0f64), 7)) {
        let drive = Drive::new(45.0, 50.0);
        let cells = stage2_cells(drive, &ParamSpace::default());
        let sums: Vec<CellSummary> = cells.iter().zip(&vals)
            .map(|(c, &(l, d))| summary(45.0, 50.0, c.material, l, d)).collect();
        let sel = &select_best_material(&sums, &BoundaryConditions { drives: vec![drive] }).unwrap()[0];
        let by_life = sums.iter().max_by(|a, b| a.mean_lifetime.total_cmp(&b.mean_lifetime)).unwrap();
        let by_disp = sums.iter().max_by(|a, b| a.mean_displacement.total_cmp(&b.mean_displacement)).unwrap();
        prop_assert_eq!(sel.lifetime_best, by_life.cell.material);
        prop_assert_eq!(sel.displacement_best, by_disp.cell.material);
    }
}

#[test]
fn stage2_plan_shape() {
    let space = ParamSpace::default();
    let boundary = BoundaryConditions {
        drives: vec![Drive::new(40.0, 1.0), Drive::new(45.0, 50.0)],
    };
    let plan = plan_stage2(&boundary, &space, &[], 1);
    // 3 fillers + 5 concentrations per boundary, baseline counted once
    assert_eq!(plan.len(), 2 * (3 + 5 - 1) * 5);
    let base = MaterialConfig::baseline();
    for t in &plan {
        let m = t.cell.material;
        let differing = (m.filler != base.filler) as u8 + (m.cnt_conc != base.cnt_conc) as u8;
        assert!(differing <= 1, "{m}");
    }
}

#[test]
fn minimal_stage2_dedupes_baseline() {
    let space = ParamSpace {
        fillers: vec![Filler::CB],
        cnt_concs: vec![2.5],
        ..ParamSpace::default()
    };
    let cells = stage2_cells(Drive::new(40.0, 1.0), &space);
    assert_eq!(cells.len(), 1);
    assert!(cells[0].material.is_baseline());
    let space = ParamSpace {
        fillers: vec![Filler::CG],
        cnt_concs: vec![2.5],
        ..space
    };
    assert_eq!(stage2_cells(Drive::new(40.0, 1.0), &space).len(), 2);
}

#[test]
fn shaped_materials_yield_stage3_combination() {
    let m = |f, c| MaterialConfig { filler: f, cnt_conc: c };
    let sums = vec![
        summary(45.0, 50.0, m(Filler::LM, 2.5), 630.0, 0.9),
        summary(45.0, 50.0, m(Filler::CB, 2.5), 1900.0, 1.0),
        summary(45.0, 50.0, m(Filler::CG, 2.5), 3700.0, 0.86),
        summary(45.0, 50.0, m(Filler::CB, 2.9), 1920.0, 1.23),
        summary(45.0, 50.0, m(Filler::CB, 3.3), 1700.0, 1.21),
    ];
    let b = BoundaryConditions {
        drives: vec![Drive::new(45.0, 50.0)],
    };
    let sel = &select_best_material(&sums, &b).unwrap()[0];
    assert_eq!(sel.lifetime_best, m(Filler::CG, 2.5));
    assert_eq!(sel.displacement_best, m(Filler::CB, 2.9));
    assert_eq!(sel.stage3, Some(m(Filler::CG, 2.9)));
}

#[test]
fn dominating_cell_needs_no_stage3() {
    let m = |f, c| MaterialConfig { filler: f, cnt_conc: c };
    assert_eq!(combine(m(Filler::CG, 2.5), m(Filler::CG, 2.5)), None);
    // both winners vary the same factor: the union is one of them
    assert_eq!(combine(m(Filler::CG, 2.5), m(Filler::LM, 2.5)), None);
}

fn synthetic_campaign(best: f64, base: f64, worst: f64) -> (Manifest, Vec<TrialRecord>) {
    let manifest = Manifest {
        space: ParamSpace {
            fields: vec![40.0],
            frequencies: vec![1.0],
            fillers: vec![Filler::LM, Filler::CB, Filler::CG],
            cnt_concs: vec![2.5],
            replicates_per_cell: 2,
            ..ParamSpace::default()
        },
        ..Manifest::default()
    };
    let mut records = Vec::new();
    for t in plan_stage1(&manifest.space, &[], 0) {
        records.push(record(&t, 5000.0, false, 1.0));
    }
    let boundary = BoundaryConditions {
        drives: vec![Drive::new(40.0, 1.0)],
    };
    for t in plan_stage2(&boundary, &manifest.space, &[], 0) {
        let life = match t.cell.material.filler {
            Filler::CG => best,
            Filler::CB => base,
            Filler::LM => worst,
        };
        records.push(record(&t, life + t.replicate as f64, false, 1.0));
    }
    (manifest, records)
}

#[test]
fn report_percentages() {
    let (manifest, records) = synthetic_campaign(1220.0, 1000.0, 710.0);
    let report = compile_report(&manifest, &records).unwrap();
    let c = &report.comparisons[0];
    assert_eq!(c.best.material.filler, Filler::CG);
    assert_eq!(c.worst.material.filler, Filler::LM);
    let expect = (1220.5 - 1000.5) / 1000.5 * 100.0;
    assert!((c.lifetime_vs_baseline_pct - expect).abs() < 1e-9);

    let (manifest, records) = synthetic_campaign(1000.0, 1000.0, 500.0);
    let report = compile_report(&manifest, &records).unwrap();
    assert_eq!(report.comparisons[0].lifetime_vs_baseline_pct, 0.0);
}

#[test]
fn report_recomputes_from_raw_records() {
    let (manifest, records) = synthetic_campaign(1500.0, 1000.0, 400.0);
    let report = compile_report(&manifest, &records).unwrap();
    let c = &report.comparisons[0];
    let mean = |f: Filler| {
        let v: Vec<f64> = records
            .iter()
            .filter(|r| r.stage == 2 && r.cell.material.filler == f)
            .map(|r| r.lifetime.lifetime)
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let rel = |a: f64, b: f64| ((a - b) / b).abs();
    let vs_base = (mean(Filler::CG) - mean(Filler::CB)) / mean(Filler::CB) * 100.0;
    let vs_worst = (mean(Filler::CG) - mean(Filler::LM)) / mean(Filler::LM) * 100.0;
    assert!(rel(c.lifetime_vs_baseline_pct, vs_base) < 1e-9);
    assert!(rel(c.lifetime_vs_worst_pct, vs_worst) < 1e-9);
    // record order does not matter
    let mut shuffled = records.clone();
    shuffled.reverse();
    assert_eq!(compile_report(&manifest, &shuffled).unwrap(), report);
}

#[test]
fn empty_records_is_an_error() {
    assert_eq!(compile_report(&Manifest::default(), &[]), Err(CampaignError::NoTrials));
}

#[test]
fn manifest_roundtrip_and_validation() {
    let m = Manifest::default();
    let text = serde_json::to_string_pretty(&m).unwrap();
    assert_eq!(Manifest::from_json(&text).unwrap(), m);
    assert!(Manifest::from_json("{\"schema_version\": 9}").is_err());
    let sparse = Manifest::from_json("{\"seed\": 4, \"channels\": 1}").unwrap();
    assert_eq!(sparse.seed, 4);
    assert_eq!(sparse.space, ParamSpace::default());
}

#[test]
fn small_campaign_runs_end_to_end() {
    let manifest = Manifest {
        seed: 3,
        space: ParamSpace {
            fields: vec![45.0, 50.0],
            frequencies: vec![50.0],
            fillers: vec![Filler::CB, Filler::CG],
            cnt_concs: vec![2.5, 2.9],
            replicates_per_cell: 2,
            lifetime_cap: 10_800.0,
        },
        protocol: Protocol {
            pre_sweep: false,
            post_sweep: false,
            ..Protocol::default()
        },
        ..Manifest::default()
    };
    let mut exec = LocalExecutor::new(2);
    let events = std::sync::Mutex::new(Vec::new());
    let progress = |e: ProgressEvent| events.lock().unwrap().push(e);
    let mut seen = 0;
    let out = run_campaign(
        &manifest,
        &mut exec,
        &mut |_| {
            seen += 1;
            Ok(())
        },
        &progress,
        &crate::rig::AbortSignal::new(),
    )
    .unwrap();
    assert_eq!(seen, out.records.len());
    assert_eq!(out.report.boundary, vec![Drive::new(45.0, 50.0)]);
    assert!(out.records.iter().all(|r| r.status == TrialStatus::Complete));
    let ev = events.into_inner().unwrap();
    assert!(ev.iter().any(|e| matches!(e, ProgressEvent::BoundarySelected { .. })));
    assert!(matches!(ev.last(), Some(ProgressEvent::CampaignFinished { .. })));
}
